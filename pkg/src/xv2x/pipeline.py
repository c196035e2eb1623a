"""End-to-end experiment: train -> explain -> select -> retrain -> eval -> report.

Every stage reads its inputs from the run directory, so stages can be run one
at a time from the command line. Wall-clock timings go to ``timing.csv`` only;
every other artifact is a deterministic function of (config, seed).
"""

import json
import logging
import traceback
from pathlib import Path

import numpy as np

from . import io
from ._rng import substream_seed
from .env import ChannelMatrix
from .marl import (TEST_EPISODE_OFFSET, CentralizedDQN, MultiAgentDQN, Rollout, Scenario, TrainedEnsemble,
                   ensemble_policy, feature_groups, feature_names, full_power_policy, random_policy, rollout)
from .metrics import availability_curve, complexity_report, emit_cdf, network_availability
from .selection import average_network_performance, rebuild_and_retrain, select_features
from .xai import (ImportanceRanking, aggregate_importance, average_across_agents, explain_dataset,
                  kmeans_summarize, summary_size)

log = logging.getLogger(__name__)

STAGES = ("train", "explain", "select", "retrain", "eval", "report")
FAILURE_MARKER = "FAILED"
ORIGINAL, SIMPLIFIED, RANDOM, FULL_POWER, SADRL = (
    "Original-MADRL", "Simplified-MADRL", "Random", "Full-power", "SADRL")


def _slug(name):
    return name.lower().replace("-", "_")


class Pipeline:
    def __init__(self, cfg, out_dir=None):
        self.cfg = cfg
        self.out = Path(out_dir or cfg.out_dir)
        self.env = cfg.env_config()
        self.scenario = Scenario(self.env, cfg.reward_weights(), seed=cfg.seed,
                                 n_power_levels=cfg.train.power_levels)
        self.k, self.n = self.env.n_v2v, self.env.n_v2n
        self.names = feature_names(self.k, self.n)
        self.groups = feature_groups(self.k, self.n)
        self._timing = {}

    # ---- helpers -------------------------------------------------------
    @property
    def test_episodes(self):
        return range(TEST_EPISODE_OFFSET, TEST_EPISODE_OFFSET + self.cfg.eval.episodes)

    def estimator(self, cls=MultiAgentDQN, **kw):
        t = self.cfg.train
        params = dict(n_episodes=t.episodes, n_steps=t.steps, lr0=t.lr0, lr_decay=t.lr_decay,
                      discount=t.discount, batch_size=t.batch_size, eps0=t.eps0, eps_decay=t.eps_decay,
                      batch_period=t.batch_period, copy_period=t.copy_period,
                      buffer_capacity=t.buffer_capacity, output_activation=t.output_activation,
                      reward_scale=t.reward_scale,
                      random_state=substream_seed(self.cfg.seed, "agents"))
        params.update(kw)
        return cls(**params)

    def _save_ensemble(self, directory, ens):
        for i, net in enumerate(ens.eval_nets):
            io.save_net(self.out / directory / f"agent_{i}.ckpt", net, self.cfg.seed,
                        {"agent": i, "feature_subset": [int(f) for f in ens.feature_subset]})

    def load_ensemble(self, directory):
        nets, subset = [], None
        for i in range(self.k):
            net, header = io.load_net(self.out / directory / f"agent_{i}.ckpt")
            nets.append(net)
            subset = np.array(header["extra"]["feature_subset"], dtype=int)
        return TrainedEnsemble(nets, [net.clone() for net in nets], subset)

    def _write_training_log(self, path, tlog):
        eps = np.asarray(tlog["eps"]).reshape(len(tlog["step"]), -1)
        header = ["step", "episode", "epsilon", "lr", "loss", "reward"] + [f"eps_{i}" for i in range(eps.shape[1])]
        rows = (list(r) + list(e) for r, e in zip(zip(tlog["step"], tlog["episode"], tlog["epsilon"],
                                                       tlog["lr"], tlog["loss"], tlog["reward"]), eps))
        io.write_csv(path, header, rows)

    def _save_holdout(self, ro, prefix):
        s, k, l = ro.states.shape
        m = ro.q_values.shape[-1]
        ep = np.repeat(ro.episode, k)
        sl = np.repeat(ro.slot, k)
        ag = np.tile(np.arange(k), s)
        rows = np.column_stack([ep, sl, ag, ro.states.reshape(s * k, l), ro.q_values.reshape(s * k, m),
                                ro.actions.reshape(-1)])
        cols = ["episode", "slot", "agent"] + self.names + [f"q_{j}" for j in range(m)] + ["action"]
        io.write_table(self.out / f"{prefix}_states.tab", rows, cols)
        slots = np.column_stack([ro.episode, ro.slot, ro.reward, ro.v2n_sum_rate_bps, ro.v2v_sum_throughput_bps,
                                 ro.sum_rate_bps, ro.eps, ro.channels])
        cols = (["episode", "slot", "reward", "v2n_sum_rate_bps", "v2v_sum_throughput_bps", "sum_rate_bps"]
                + [f"eps_{i}" for i in range(k)] + ChannelMatrix.flat_names(k, self.n))
        io.write_table(self.out / f"{prefix}_slots.tab", slots, cols)

    def load_holdout(self, prefix="train/holdout"):
        k = self.k
        st, sh = io.read_table(self.out / f"{prefix}_states.tab")
        sl, _ = io.read_table(self.out / f"{prefix}_slots.tab")
        l = len(self.names)
        s = sl.shape[0]
        states = st[:, 3:3 + l].reshape(s, k, l)
        q = st[:, 3 + l:-1].reshape(s, k, -1)
        return Rollout(episode=sl[:, 0].astype(int), slot=sl[:, 1].astype(int), reward=sl[:, 2],
                       v2n_sum_rate_bps=sl[:, 3], v2v_sum_throughput_bps=sl[:, 4], sum_rate_bps=sl[:, 5],
                       eps=sl[:, 6:6 + k], actions=st[:, -1].astype(int).reshape(s, k), states=states,
                       q_values=q, channels=sl[:, 6 + k:])

    def load_ranking(self):
        _, rows = io.read_csv(self.out / "explain" / "importance_global.csv")
        arr = np.array([[float(r[0]), float(r[3]), float(r[4]), float(r[5])] for r in rows])
        order = np.argsort(arr[:, 3], kind="stable")
        return ImportanceRanking(arr[:, 1], arr[:, 2], arr[order, 0].astype(int))

    def _write_importance(self, path, ranking):
        ranks = ranking.ranks
        rows = [(j, self.names[j], self.groups[j], ranking.mean_abs[j], ranking.transformed[j], int(ranks[j]))
                for j in range(len(self.names))]
        io.write_csv(path, ["feature_index", "feature_name", "group_label", "mean_abs", "transformed", "rank"], rows)

    def _record_timing(self, scheme, times):
        self._timing[scheme] = list(times)
        path = self.out / "timing.csv"
        existing = {}
        if path.exists():
            _, rows = io.read_csv(path)
            existing = {r[0]: r[1:] for r in rows}
        t = np.asarray(times, dtype=float)
        existing[scheme] = [repr(float(np.median(t))) if t.size else "nan", repr(float(np.mean(t))) if t.size else "nan",
                            str(t.size)]
        io.write_csv(path, ["scheme", "median_update_s", "mean_update_s", "n_updates"],
                     ([name, *vals] for name, vals in sorted(existing.items())))

    # ---- stages --------------------------------------------------------
    def train(self):
        est = self.estimator().fit(self.scenario)
        ens = est.ensemble_
        self._save_ensemble("train/original", ens)
        self._write_training_log(self.out / "train" / "training_log.csv", est.training_log_)
        bg = np.column_stack([est.background_, est.background_actions_])
        io.write_table(self.out / "train" / "x_bg.tab", bg, self.names + ["action"])
        self._record_timing(ORIGINAL, est.update_times_)
        ro = rollout(self.scenario, ensemble_policy(ens), self.test_episodes, self.cfg.train.steps, capture=True)
        self._save_holdout(ro, "train/holdout")
        return ens

    def explain(self):
        x = self.cfg.xai
        ens = self.load_ensemble("train/original")
        bg_rows, _ = io.read_table(self.out / "train" / "x_bg.tab")
        bg_states = bg_rows[:, :-1]
        bg = kmeans_summarize(bg_states, summary_size(len(bg_states), x.bg_fraction, x.bg_max_centroids),
                              substream_seed(self.cfg.seed, "kmeans", 0))
        hold = self.load_holdout()
        per_agent = []
        for i, net in enumerate(ens.eval_nets):
            rows = hold.states[:, i, :]
            summ = kmeans_summarize(rows, summary_size(len(rows), x.holdout_fraction, x.holdout_max_centroids),
                                    substream_seed(self.cfg.seed, "kmeans", 1 + i))
            phis, _ = explain_dataset(net, summ.samples, bg)
            ranking = ImportanceRanking.from_mean_abs(aggregate_importance(phis, summ.weights))
            self._write_importance(self.out / "explain" / f"importance_agent_{i}.csv", ranking)
            per_agent.append(ranking)
        glob = average_across_agents([r.transformed for r in per_agent], [r.mean_abs for r in per_agent])
        self._write_importance(self.out / "explain" / "importance_global.csv", glob)
        return glob

    def select(self, delta=None):
        ens = self.load_ensemble("train/original")
        hold = self.load_holdout()
        ranking = self.load_ranking()
        alpha0 = average_network_performance(ens, hold, self.scenario)
        s = self.cfg.select
        if delta is None:
            delta = s.delta if s.delta_fraction is None else s.delta_fraction * alpha0
        result = select_features(ens, hold, self.scenario, ranking, delta, s.mask)
        report = result.to_dict()
        report["retained_names"] = [self.names[j] for j in result.retained]
        report["ranking"] = [int(j) for j in ranking.order]
        report["ranking_transformed"] = [float(v) for v in ranking.transformed]
        io.write_json(self.out / "select" / "selection_report.json", report)
        return result

    def load_selection(self):
        return json.loads((self.out / "select" / "selection_report.json").read_text())

    def retrain(self):
        retained = self.load_selection()["retained"]
        est = rebuild_and_retrain(self.scenario, self.estimator(), retained)
        self._save_ensemble("retrain/simplified", est.ensemble_)
        self._write_training_log(self.out / "retrain" / "training_log.csv", est.training_log_)
        self._record_timing(SIMPLIFIED, est.update_times_)
        return est.ensemble_

    def policies(self, scenario=None, include_trained=True):
        scenario = scenario or self.scenario
        pol = {}
        if include_trained:
            pol[ORIGINAL] = (self.load_ensemble("train/original"), None)
            if (self.out / "retrain" / "simplified" / "agent_0.ckpt").exists():
                pol[SIMPLIFIED] = (self.load_ensemble("retrain/simplified"), None)
        b = self.cfg.baselines
        if b.random:
            pol[RANDOM] = (None, random_policy(scenario))
        if b.full_power:
            pol[FULL_POWER] = (None, full_power_policy(scenario))
        return pol

    def run_scheme(self, scenario, ens, policy, episodes):
        if ens is not None:
            return rollout(scenario, ensemble_policy(ens), episodes, self.cfg.train.steps, subset=ens.feature_subset)
        return rollout(scenario, policy, episodes, self.cfg.train.steps)

    def evaluate(self):
        results = {}
        for name, (ens, policy) in self.policies().items():
            results[name] = self.run_scheme(self.scenario, ens, policy, self.test_episodes)
        if self.cfg.baselines.sadrl:
            est = self.estimator(CentralizedDQN).fit(self.scenario)
            self._write_training_log(self.out / "eval" / "sadrl_training_log.csv", est.training_log_)
            self._record_timing(SADRL, est.update_times_)
            results[SADRL] = est.execute(self.scenario, self.test_episodes)
        thresholds = self.cfg.eval.availability_eps
        for name, ro in results.items():
            slug = _slug(name)
            header = (["episode", "slot", "reward", "v2n_sum_rate_bps", "v2v_sum_throughput_bps", "sum_rate_bps",
                       "max_eps"] + [f"eps_{i}" for i in range(self.k)])
            rows = (list(r) + list(e) for r, e in zip(zip(ro.episode, ro.slot, ro.reward, ro.v2n_sum_rate_bps,
                                                          ro.v2v_sum_throughput_bps, ro.sum_rate_bps,
                                                          ro.eps.max(axis=1)), ro.eps))
            io.write_csv(self.out / "eval" / f"metrics_{slug}.csv", header, rows)
            emit_cdf(ro.sum_rate_bps, self.out / "eval" / f"cdf_sum_rate_{slug}.csv")
            io.write_csv(self.out / "eval" / f"availability_{slug}.csv", ["eps_max", "availability_pct"],
                         zip(thresholds, availability_curve(ro.eps, thresholds)))
        return results

    def load_metrics(self, name):
        _, rows = io.read_csv(self.out / "eval" / f"metrics_{_slug(name)}.csv")
        return np.array(rows, dtype=float)

    def report(self):
        schemes = [p.stem[len("metrics_"):] for p in sorted((self.out / "eval").glob("metrics_*.csv"))]
        label = {_slug(n): n for n in (ORIGINAL, SIMPLIFIED, RANDOM, FULL_POWER, SADRL)}
        ens = {ORIGINAL: self.load_ensemble("train/original")}
        if (self.out / "retrain" / "simplified" / "agent_0.ckpt").exists():
            ens[SIMPLIFIED] = self.load_ensemble("retrain/simplified")
        eps_ref = float(min(self.cfg.env.eps_max))
        rows = []
        for slug in schemes:
            name = label.get(slug, slug)
            m = self.load_metrics(name)
            e = ens.get(name)
            rows.append([name, m[:, 2].mean(), m[:, 5].mean(), m[:, 3].mean(), m[:, 4].mean(),
                         network_availability(m[:, 7:], eps_ref), f"eval/cdf_sum_rate_{slug}.csv",
                         f"eval/availability_{slug}.csv", e.input_dim if e else "", e.param_count() if e else ""])
        io.write_csv(self.out / "report" / "comparison.csv",
                     ["scheme", "mean_alpha", "mean_sum_rate_bps", "mean_v2n_sum_rate_bps",
                      "mean_v2v_sum_throughput_bps", "availability_pct", "cdf_path", "availability_path",
                      "n_features", "param_count"], rows)
        if SIMPLIFIED in ens:
            crow, ratios = complexity_report(ens[ORIGINAL], ens[SIMPLIFIED])
            io.write_csv(self.out / "report" / "complexity.csv",
                         ["scheme", "n_features", "param_count", "feature_reduction", "param_reduction"],
                         [[r["scheme"], r["n_features"], r["param_count"], ratios["feature_reduction"] if i else 0.0,
                           ratios["param_reduction"] if i else 0.0] for i, r in enumerate(crow)])
        return rows

    def run_stage(self, stage, **kw):
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        self.out.mkdir(parents=True, exist_ok=True)
        marker = self.out / FAILURE_MARKER
        try:
            result = getattr(self, "evaluate" if stage == "eval" else stage)(**kw)
        except Exception:
            io.atomic_write_text(marker, f"stage: {stage}\n{traceback.format_exc()}")
            raise
        return result

    def run(self):
        marker = self.out / FAILURE_MARKER
        if marker.exists():
            marker.unlink()
        self.out.mkdir(parents=True, exist_ok=True)
        io.write_json(self.out / "config.json", self.cfg.model_dump())
        for stage in STAGES:
            log.info("stage %s", stage)
            self.run_stage(stage)
        return self.out


def run_pipeline(cfg, out_dir=None):
    return Pipeline(cfg, out_dir).run()
