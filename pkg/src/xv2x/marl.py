"""Multi-agent DQN allocation: centralized training, decentralized greedy execution.

Every V2V transmitter is an agent choosing a (sub-band, power level) pair.
All agents receive the same reward each slot and their experiences go to one
shared replay buffer.
"""

import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import phy
from ._rng import make_rng, stream_key, substream_seed
from .env import ChannelMatrix, episode_channels, w_to_dbm
from .errors import TrainingDivergence
from .nn import build_mlp, copy_weights

TEST_EPISODE_OFFSET = 1_000_000
GROUPS = ("direct", "crossV2V", "V2N", "interference")


def _db(x):
    return 10.0 * np.log10(x)


def scale_gain_db(g_db):
    return (g_db + 120.0) / 60.0


def scale_interference_dbm(i_dbm):
    return (i_dbm + 90.0) / 40.0


def state_dim(n_links, n_bands):
    return (2 + n_links) * n_bands


def feature_groups(n_links, n_bands):
    """Group label of every state feature, in state-vector order."""
    return (["direct"] * n_bands + ["crossV2V"] * ((n_links - 1) * n_bands)
            + ["V2N"] * n_bands + ["interference"] * n_bands)


def feature_names(n_links, n_bands):
    names = [f"direct_b{n}" for n in range(n_bands)]
    names += [f"cross{j}_b{n}" for j in range(n_links - 1) for n in range(n_bands)]
    names += [f"v2n_b{n}" for n in range(n_bands)]
    names += [f"interf_b{n}" for n in range(n_bands)]
    return names


def build_states(ch, prev_bands, prev_powers, p_v2n_w):
    """Scaled observation of every agent, shape (K, (2+K)N).

    Layout per agent k: own direct gains over the N sub-bands, gains from the
    other V2V transmitters (ascending index), V2N interferer gains, and the
    interference the previous slot's allocation would cause under the current
    gains.
    """
    k, n = ch.direct.shape
    direct = scale_gain_db(_db(ch.direct))
    cross_db = scale_gain_db(_db(ch.cross))  # (tx, rx, band)
    others = np.array([[j for j in range(k) if j != r] for r in range(k)], dtype=int).reshape(k, k - 1)
    cross = cross_db[others, np.arange(k)[:, None], :].reshape(k, (k - 1) * n)
    v2n = scale_gain_db(_db(ch.v2n_to_v2v)).T
    interf = phy.interference_at_v2v(ch.cross, ch.v2n_to_v2v, prev_bands, prev_powers, p_v2n_w)
    return np.concatenate([direct, cross, v2n, scale_interference_dbm(w_to_dbm(interf))], axis=1)


def build_state(k, ch, prev_alloc):
    return build_states(ch, prev_alloc.band, prev_alloc.power_w, prev_alloc.p_v2n_w)[k]


def encode_action(band, level, n_bands, n_levels):
    if not (0 <= band < n_bands and 0 <= level < n_levels):
        raise ValueError(f"action ({band}, {level}) outside {n_bands} bands x {n_levels} levels")
    return band * n_levels + level


def decode_action(index, n_bands, n_levels):
    if not 0 <= index < n_bands * n_levels:
        raise ValueError(f"action index {index} outside [0, {n_bands * n_levels})")
    return divmod(int(index), n_levels)


def select_action(net, s, eps, rng):
    """Epsilon-greedy over the network's Q-values; ties go to the lowest index."""
    if rng.random() < eps:
        return int(rng.integers(net.output_dim))
    return int(np.argmax(net.forward(s)))


@dataclass
class Scenario:
    """Environment, reward weights, action discretization and environment seeds."""

    env: object
    weights: object
    seed: int = 0
    n_power_levels: int = 4

    @property
    def n_links(self):
        return self.env.n_v2v

    @property
    def n_bands(self):
        return self.env.n_v2n

    @property
    def n_actions(self):
        return self.n_bands * self.n_power_levels

    @property
    def state_dim(self):
        return state_dim(self.n_links, self.n_bands)

    @property
    def power_levels_w(self):
        return self.env.p_max_w * np.arange(1, self.n_power_levels + 1) / self.n_power_levels

    def decode(self, actions):
        actions = np.asarray(actions, dtype=int)
        bands, levels = np.divmod(actions, self.n_power_levels)
        return bands, self.power_levels_w[levels]

    def channels(self, episode, n_steps):
        return episode_channels(self.env, substream_seed(self.seed, "topology", episode),
                                substream_seed(self.seed, "fading", episode), n_steps)

    def initial_actions(self, episode):
        rng = make_rng(self.seed, stream_key("init_alloc"), episode)
        return rng.integers(self.n_actions, size=self.n_links)

    def states(self, ch, actions):
        bands, powers = self.decode(actions)
        return build_states(ch, bands, powers, self.env.p_v2n_w)

    def score(self, ch, actions):
        bands, powers = self.decode(actions)
        return phy.evaluate_slot(ch, phy.Allocation(bands, powers, self.env.p_v2n_w), self.env, self.weights)

    def score_batch(self, channels_flat, actions):
        """Score (S, K) joint actions on (S, F) flattened channels."""
        k, n = self.n_links, self.n_bands
        s = channels_flat.shape[0]
        sizes = [k * n, k * k * n, n * k, k * n, n]
        parts = np.split(channels_flat, np.cumsum(sizes)[:-1], axis=1)
        bands, powers = self.decode(actions)
        cfg = self.env
        return phy.evaluate(parts[0].reshape(s, k, n), parts[1].reshape(s, k, k, n),
                            parts[2].reshape(s, n, k), parts[3].reshape(s, k, n), parts[4],
                            bands, powers, p_v2n_w=cfg.p_v2n_w, noise_w=cfg.noise_power_w,
                            bandwidth_hz=cfg.bandwidth_hz, latency_s=cfg.packet_latency_s,
                            payload_bits=cfg.payload_bits, weights=self.weights)


class ReplayBuffer:
    """Fixed-capacity FIFO ring of (s, a, r, s') shared by all agents."""

    def __init__(self, capacity, state_dim, action_shape=()):
        self.capacity = int(capacity)
        self.states = np.zeros((self.capacity, state_dim))
        self.next_states = np.zeros((self.capacity, state_dim))
        self.actions = np.zeros((self.capacity, *action_shape), dtype=int)
        self.rewards = np.zeros(self.capacity)
        self._next = 0
        self.size = 0

    def __len__(self):
        return self.size

    def push(self, s, a, r, s_next):
        i = self._next
        self.states[i] = s
        self.actions[i] = a
        self.rewards[i] = r
        self.next_states[i] = s_next
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size, rng):
        idx = rng.choice(self.size, size=min(batch_size, self.size), replace=False)
        return self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx]


def baseline_full_power(ch, prev_alloc, p_max_w):
    """Each link takes the sub-band with least previous-slot interference, at P_max."""
    interf = phy.interference_at_v2v(ch.cross, ch.v2n_to_v2v, prev_alloc.band, prev_alloc.power_w,
                                     prev_alloc.p_v2n_w)
    bands = np.argmin(interf, axis=1)
    return phy.Allocation(bands, np.full(len(bands), p_max_w), prev_alloc.p_v2n_w)


def baseline_random(rng, scenario):
    actions = rng.integers(scenario.n_actions, size=scenario.n_links)
    bands, powers = scenario.decode(actions)
    return phy.Allocation(bands, powers, scenario.env.p_v2n_w)


@dataclass
class TrainedEnsemble:
    eval_nets: list
    target_nets: list
    feature_subset: np.ndarray
    training_log: dict = field(default_factory=dict)

    @property
    def n_agents(self):
        return len(self.eval_nets)

    @property
    def input_dim(self):
        return self.eval_nets[0].input_dim

    def q_values(self, states):
        """Q-values for states shaped (..., K, L) already projected on the feature subset."""
        states = np.asarray(states, dtype=float)
        return np.stack([net.forward(states[..., k, :]) for k, net in enumerate(self.eval_nets)], axis=-2)

    def greedy(self, states):
        return np.argmax(self.q_values(states), axis=-1)

    def param_count(self):
        return sum(net.param_count() for net in self.eval_nets)


@dataclass
class Rollout:
    """Per-slot execution log plus the captured hold-out data."""

    episode: np.ndarray
    slot: np.ndarray
    reward: np.ndarray
    v2n_sum_rate_bps: np.ndarray
    v2v_sum_throughput_bps: np.ndarray
    sum_rate_bps: np.ndarray
    eps: np.ndarray
    actions: np.ndarray
    states: np.ndarray = None
    q_values: np.ndarray = None
    channels: np.ndarray = None

    @property
    def n_slots(self):
        return len(self.reward)

    def holdout_rows(self):
        """(state, Q-vector) per agent-slot, agent-major within each slot."""
        s, k, l = self.states.shape
        return self.states.reshape(s * k, l), self.q_values.reshape(s * k, -1)


def rollout(scenario, policy, episodes, n_steps, capture=False, subset=None):
    """Run `policy(states, ch, prev_actions, episode, t) -> actions` greedily over episodes."""
    cols = {name: [] for name in ("episode", "slot", "reward", "v2n", "v2v", "sum", "eps", "actions")}
    cap_s, cap_q, cap_c = [], [], []
    for ep in episodes:
        prev = scenario.initial_actions(ep)
        for t, ch in enumerate(scenario.channels(ep, n_steps - 1)):
            states = scenario.states(ch, prev)
            if subset is not None:
                states = states[:, subset]
            actions, q = policy(states, ch, prev, ep, t)
            rep = scenario.score(ch, actions)
            cols["episode"].append(ep)
            cols["slot"].append(t)
            cols["reward"].append(rep.reward)
            cols["v2n"].append(rep.v2n_sum_rate)
            cols["v2v"].append(rep.v2v_sum_throughput)
            cols["sum"].append(rep.objective)
            cols["eps"].append(rep.v2v_eps)
            cols["actions"].append(actions)
            if capture:
                cap_s.append(states)
                cap_q.append(q)
                cap_c.append(ch.flatten())
            prev = actions
    out = Rollout(
        episode=np.array(cols["episode"]), slot=np.array(cols["slot"]),
        reward=np.array(cols["reward"], dtype=float), v2n_sum_rate_bps=np.array(cols["v2n"], dtype=float),
        v2v_sum_throughput_bps=np.array(cols["v2v"], dtype=float), sum_rate_bps=np.array(cols["sum"], dtype=float),
        eps=np.array(cols["eps"], dtype=float), actions=np.array(cols["actions"], dtype=int),
    )
    if capture:
        out.states = np.array(cap_s)
        out.q_values = np.array(cap_q)
        out.channels = np.array(cap_c)
    return out


def random_policy(scenario):
    def act(states, ch, prev, ep, t):
        rng = make_rng(scenario.seed, stream_key("random_policy"), ep, t)
        return rng.integers(scenario.n_actions, size=scenario.n_links), None
    return act


def full_power_policy(scenario):
    top = scenario.n_power_levels - 1

    def act(states, ch, prev, ep, t):
        bands, powers = scenario.decode(prev)
        alloc = baseline_full_power(ch, phy.Allocation(bands, powers, scenario.env.p_v2n_w), scenario.env.p_max_w)
        return alloc.band * scenario.n_power_levels + top, None
    return act


def ensemble_policy(ensemble):
    def act(states, ch, prev, ep, t):
        q = ensemble.q_values(states)
        return np.argmax(q, axis=-1), q
    return act


def _training_log():
    return {"step": [], "episode": [], "epsilon": [], "lr": [], "loss": [], "reward": [], "eps": []}


class MultiAgentDQN(BaseEstimator):
    """K independent DQNs trained centrally from a shared replay buffer.

    Acting during training uses the local agent copies, which are refreshed
    from the evaluation networks together with the target networks every
    ``copy_period`` steps; they therefore coincide with the target networks.
    The learner sees rewards multiplied by ``reward_scale``; logged rewards
    keep their natural units.
    """

    def __init__(self, n_episodes=300, n_steps=100, lr0=0.01, lr_decay=1e-4, discount=0.99,
                 batch_size=100, eps0=0.1, eps_decay=1e-4, batch_period=100, copy_period=400,
                 buffer_capacity=100_000, output_activation="relu", reward_scale=1.0,
                 feature_subset=None, random_state=0):
        self.n_episodes = n_episodes
        self.n_steps = n_steps
        self.lr0 = lr0
        self.lr_decay = lr_decay
        self.discount = discount
        self.batch_size = batch_size
        self.eps0 = eps0
        self.eps_decay = eps_decay
        self.batch_period = batch_period
        self.copy_period = copy_period
        self.buffer_capacity = buffer_capacity
        self.output_activation = output_activation
        self.reward_scale = reward_scale
        self.feature_subset = feature_subset
        self.random_state = random_state

    def _subset(self, scenario):
        full = scenario.state_dim
        if self.feature_subset is None:
            return np.arange(full)
        subset = np.asarray(self.feature_subset, dtype=int)
        if subset.size < 1 or np.any((subset < 0) | (subset >= full)) or len(set(subset.tolist())) != subset.size:
            raise ValueError("feature_subset must be distinct indices into the state vector")
        return subset

    def fit(self, scenario, episodes=None):
        subset = self._subset(scenario)
        k, m, l = scenario.n_links, scenario.n_actions, subset.size
        seed = int(self.random_state)
        nets = [build_mlp(l, m, substream_seed(seed, "net_init", i), self.output_activation) for i in range(k)]
        targets = [net.clone() for net in nets]
        buffer = ReplayBuffer(self.buffer_capacity, l)
        rng = make_rng(seed, stream_key("exploration"))
        log = _training_log()
        bg_states, bg_actions, self.update_times_ = [], [], []
        eps, lr, step = self.eps0, self.lr0, 0
        episodes = range(self.n_episodes) if episodes is None else episodes
        for ep in episodes:
            chans = scenario.channels(ep, self.n_steps)
            ch = next(chans)
            prev = scenario.initial_actions(ep)
            states = scenario.states(ch, prev)[:, subset]
            for _ in range(self.n_steps):
                actions = np.array([select_action(targets[i], states[i], eps, rng) for i in range(k)])
                rep = scenario.score(ch, actions)
                r = rep.reward
                ch = next(chans)
                next_states = scenario.states(ch, actions)[:, subset]
                for i in range(k):
                    buffer.push(states[i], actions[i], r * self.reward_scale, next_states[i])
                bg_states.append(states)
                bg_actions.append(actions)
                step += 1
                loss = np.nan
                if step > self.batch_period:
                    t0 = time.perf_counter()
                    losses = []
                    for i in range(k):
                        s, a, rr, s2 = buffer.sample(self.batch_size, rng)
                        y = rr + self.discount * targets[i].forward(s2).max(axis=1)
                        try:
                            losses.append(nets[i].backward_update(s, a, y, lr))
                        except TrainingDivergence as exc:
                            raise TrainingDivergence(f"agent {i} diverged at step {step}, episode {ep}: {exc}") from exc
                    self.update_times_.append(time.perf_counter() - t0)
                    loss = float(np.mean(losses))
                    if step % self.copy_period == 0:
                        for net, tgt in zip(nets, targets):
                            copy_weights(net, tgt)
                log["step"].append(step)
                log["episode"].append(ep)
                log["epsilon"].append(eps)
                log["lr"].append(lr)
                log["loss"].append(loss)
                log["reward"].append(r)
                log["eps"].append(rep.v2v_eps)
                eps = max(0.0, (1 - self.eps_decay) * eps)
                lr = (1 - self.lr_decay) * lr
                states = next_states
        self.ensemble_ = TrainedEnsemble(nets, targets, subset, log)
        self.background_ = np.concatenate(bg_states) if bg_states else np.zeros((0, l))
        self.background_actions_ = np.concatenate(bg_actions) if bg_actions else np.zeros(0, dtype=int)
        self.training_log_ = log
        self.n_features_in_ = l
        return self

    def decision_function(self, states):
        check_is_fitted(self, "ensemble_")
        return self.ensemble_.q_values(states)

    def predict(self, states):
        return np.argmax(self.decision_function(states), axis=-1)

    def execute(self, scenario, episodes, capture=True):
        """Greedy decentralized execution; returns the Rollout with hold-out capture."""
        check_is_fitted(self, "ensemble_")
        return rollout(scenario, ensemble_policy(self.ensemble_), episodes, self.n_steps,
                       capture=capture, subset=self.ensemble_.feature_subset)


class CentralizedDQN(MultiAgentDQN):
    """Single meta-agent on the concatenated states with one output segment per link."""

    def fit(self, scenario, episodes=None):
        k, m, l = scenario.n_links, scenario.n_actions, scenario.state_dim
        seed = int(self.random_state)
        net = build_mlp(k * l, k * m, substream_seed(seed, "sadrl_init"), self.output_activation)
        target = net.clone()
        buffer = ReplayBuffer(self.buffer_capacity, k * l, (k,))
        rng = make_rng(seed, stream_key("sadrl_exploration"))
        offsets = np.arange(k) * m
        log = _training_log()
        self.update_times_ = []
        eps, lr, step = self.eps0, self.lr0, 0
        episodes = range(self.n_episodes) if episodes is None else episodes
        for ep in episodes:
            chans = scenario.channels(ep, self.n_steps)
            ch = next(chans)
            prev = scenario.initial_actions(ep)
            joint = scenario.states(ch, prev).ravel()
            for _ in range(self.n_steps):
                if rng.random() < eps:
                    actions = rng.integers(m, size=k)
                else:
                    actions = np.argmax(target.forward(joint).reshape(k, m), axis=1)
                rep = scenario.score(ch, actions)
                ch = next(chans)
                joint_next = scenario.states(ch, actions).ravel()
                buffer.push(joint, actions, rep.reward * self.reward_scale, joint_next)
                step += 1
                loss = np.nan
                if step > self.batch_period:
                    t0 = time.perf_counter()
                    s, a, rr, s2 = buffer.sample(self.batch_size, rng)
                    q_next = target.forward(s2).reshape(len(s2), k, m).max(axis=2)
                    y = rr[:, None] + self.discount * q_next
                    loss = net.backward_update(s, a + offsets, y, lr)
                    self.update_times_.append(time.perf_counter() - t0)
                    if step % self.copy_period == 0:
                        copy_weights(net, target)
                log["step"].append(step)
                log["episode"].append(ep)
                log["epsilon"].append(eps)
                log["lr"].append(lr)
                log["loss"].append(loss)
                log["reward"].append(rep.reward)
                log["eps"].append(rep.v2v_eps)
                eps = max(0.0, (1 - self.eps_decay) * eps)
                lr = (1 - self.lr_decay) * lr
                joint = joint_next
        self.net_ = net
        self.target_ = target
        self.training_log_ = log
        self.n_features_in_ = k * l
        self._shape = (k, m)
        return self

    def decision_function(self, states):
        check_is_fitted(self, "net_")
        states = np.asarray(states, dtype=float)
        k, m = self._shape
        joint = states.reshape(*states.shape[:-2], -1)
        return self.net_.forward(joint).reshape(*states.shape[:-2], k, m)

    def execute(self, scenario, episodes, capture=False):
        check_is_fitted(self, "net_")

        def act(states, ch, prev, ep, t):
            q = self.decision_function(states)
            return np.argmax(q, axis=-1), q
        return rollout(scenario, act, episodes, self.n_steps, capture=capture)


def train(scenario, hyper, n_episodes, n_steps=100, **kwargs):
    """Functional form: returns (TrainedEnsemble, background states, background actions)."""
    est = MultiAgentDQN(n_episodes=n_episodes, n_steps=n_steps, lr0=hyper.lr0, lr_decay=hyper.lr_decay,
                        discount=hyper.discount, batch_size=hyper.batch_size, eps0=hyper.eps0,
                        eps_decay=hyper.eps_decay, **kwargs).fit(scenario)
    return est.ensemble_, est.background_, est.background_actions_


def channel_table(rollout_, n_links, n_bands):
    return rollout_.channels.reshape(rollout_.n_slots, ChannelMatrix.flat_size(n_links, n_bands))
