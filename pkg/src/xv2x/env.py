"""Vehicular topology, mobility and wireless channel generation.

The road layout is a rectangular torus crossed by straight horizontal and
vertical roads, each with ``lanes_per_direction`` lanes per direction.
Vehicles are dropped per lane as a 1-D Poisson process whose mean headway is
``headway_s * speed``, which is how the urban drop rule scales density with
speed. V2N transmitters and V2V pairs are drawn from that field.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.constants import speed_of_light

from ._rng import make_rng, stream_key
from .errors import ConfigurationError, DomainError

_SHADOW = stream_key("shadowing")
_FADING = stream_key("fading")
_GROUPS = {name: i for i, name in enumerate(("direct", "cross", "v2n_to_v2v", "v2v_to_bs", "v2n_to_bs"))}


def dbm_to_w(dbm):
    return 10.0 ** ((np.asarray(dbm, dtype=float) - 30.0) / 10.0)


def w_to_dbm(w):
    return 10.0 * np.log10(np.asarray(w, dtype=float)) + 30.0


@dataclass(frozen=True)
class EnvConfig:
    n_v2v: int = 4
    n_v2n: int = 4
    carrier_freq_hz: float = 2e9
    speed_mps: float = 60.0 / 3.6
    bandwidth_hz: float = 180e3
    noise_power_dbm: float = -114.0
    shadowing_std_db: float = 3.0
    p_max_dbm: float = 23.0
    p_v2n_dbm: float = 23.0
    bs_antenna_height_m: float = 25.0
    bs_antenna_gain_dbi: float = 8.0
    bs_noise_figure_db: float = 5.0
    bs_road_distance_m: float = 35.0
    veh_antenna_height_m: float = 1.5
    veh_antenna_gain_dbi: float = 3.0
    veh_noise_figure_db: float = 9.0
    area_width_m: float = 750.0
    area_height_m: float = 1299.0
    n_roads_x: int = 3
    n_roads_y: int = 3
    lanes_per_direction: int = 2
    lane_width_m: float = 3.5
    headway_s: float = 2.5
    min_spacing_m: float = 5.0
    slot_s: float = 1e-3
    packet_latency_s: float = 1e-3
    payload_bits: int = 100
    winner_a: float = 22.7
    winner_b: float = 41.0
    winner_c: float = 20.0
    gain_floor: float = 1e-20
    min_distance_m: float = 1.0

    def __post_init__(self):
        if self.n_v2v < 1 or self.n_v2n < 1:
            raise ConfigurationError(f"need n_v2v, n_v2n >= 1, got {self.n_v2v}, {self.n_v2n}")
        positive = (
            "carrier_freq_hz", "bandwidth_hz", "area_width_m", "area_height_m", "lane_width_m",
            "headway_s", "min_spacing_m", "slot_s", "packet_latency_s", "payload_bits",
            "bs_antenna_height_m", "veh_antenna_height_m", "gain_floor", "min_distance_m",
        )
        bad = [name for name in positive if not getattr(self, name) > 0]
        if self.speed_mps < 0 or self.shadowing_std_db < 0:
            bad.append("speed_mps/shadowing_std_db")
        if self.n_roads_x < 0 or self.n_roads_y < 0 or self.n_roads_x + self.n_roads_y == 0:
            bad.append("n_roads_x/n_roads_y")
        if self.lanes_per_direction < 1:
            bad.append("lanes_per_direction")
        if bad:
            raise ConfigurationError(f"invalid environment parameters: {', '.join(bad)}")

    @property
    def noise_power_w(self):
        return float(dbm_to_w(self.noise_power_dbm))

    @property
    def p_max_w(self):
        return float(dbm_to_w(self.p_max_dbm))

    @property
    def p_v2n_w(self):
        return float(dbm_to_w(self.p_v2n_dbm))

    @property
    def blocklength(self):
        return self.bandwidth_hz * self.packet_latency_s

    @property
    def n_pairs(self):
        """Number of V2V pair slots, including virtual ones when N > K."""
        return max(self.n_v2v, self.n_v2n)

    @property
    def bs_position(self):
        return np.array([self.area_width_m / 2 + self.bs_road_distance_m,
                         self.area_height_m / 2 + self.bs_road_distance_m])


@dataclass(frozen=True)
class Vehicle:
    position: tuple
    heading: tuple
    lane_id: int


@dataclass(frozen=True, eq=False)
class WorldState:
    area_width_m: float
    area_height_m: float
    positions: np.ndarray
    headings: np.ndarray
    lane_ids: np.ndarray
    v2n_links: np.ndarray
    v2v_pairs: np.ndarray
    virtual: np.ndarray
    bs_position: np.ndarray
    slot_index: int = 0
    speed_mps: float = 0.0

    @property
    def vehicles(self):
        return [Vehicle(tuple(p), tuple(h), int(l))
                for p, h, l in zip(self.positions, self.headings, self.lane_ids)]

    @property
    def n_real_pairs(self):
        return int(np.count_nonzero(~self.virtual))

    def same_as(self, other):
        return (
            self.slot_index == other.slot_index
            and self.speed_mps == other.speed_mps
            and all(np.array_equal(getattr(self, f), getattr(other, f))
                    for f in ("positions", "headings", "lane_ids", "v2n_links", "v2v_pairs", "virtual"))
        )


@dataclass(frozen=True, eq=False)
class ChannelMatrix:
    """Linear power gains for one slot.

    ``cross[t, r, n]`` is the gain from V2V transmitter ``t`` to V2V receiver
    ``r`` on sub-band ``n``; ``v2n_to_v2v[n, k]`` is the gain from the n-th V2N
    transmitter to the k-th V2V receiver on sub-band ``n``.
    """

    direct: np.ndarray
    cross: np.ndarray
    v2n_to_v2v: np.ndarray
    v2v_to_bs: np.ndarray
    v2n_to_bs: np.ndarray
    virtual: np.ndarray = field(default=None)

    @property
    def n_pairs(self):
        return self.direct.shape[0]

    @property
    def n_bands(self):
        return self.direct.shape[1]

    def active(self):
        """View restricted to the real (non-virtual) V2V pairs."""
        if self.virtual is None or not self.virtual.any():
            return self
        keep = ~self.virtual
        return ChannelMatrix(
            direct=self.direct[keep],
            cross=self.cross[np.ix_(keep, keep)],
            v2n_to_v2v=self.v2n_to_v2v[:, keep],
            v2v_to_bs=self.v2v_to_bs[keep],
            v2n_to_bs=self.v2n_to_bs,
            virtual=np.zeros(int(keep.sum()), dtype=bool),
        )

    def flatten(self):
        return np.concatenate([self.direct.ravel(), self.cross.ravel(), self.v2n_to_v2v.ravel(),
                               self.v2v_to_bs.ravel(), self.v2n_to_bs.ravel()])

    @staticmethod
    def flat_size(n_pairs, n_bands):
        k, n = n_pairs, n_bands
        return k * n + k * k * n + n * k + k * n + n

    @classmethod
    def from_flat(cls, vec, n_pairs, n_bands):
        k, n = n_pairs, n_bands
        vec = np.asarray(vec, dtype=float)
        sizes = [k * n, k * k * n, n * k, k * n, n]
        parts = np.split(vec, np.cumsum(sizes)[:-1])
        return cls(direct=parts[0].reshape(k, n), cross=parts[1].reshape(k, k, n),
                   v2n_to_v2v=parts[2].reshape(n, k), v2v_to_bs=parts[3].reshape(k, n),
                   v2n_to_bs=parts[4], virtual=np.zeros(k, dtype=bool))

    @staticmethod
    def flat_names(n_pairs, n_bands):
        k, n = n_pairs, n_bands
        names = [f"g_direct_{a}_{b}" for a in range(k) for b in range(n)]
        names += [f"g_cross_{a}_{c}_{b}" for a in range(k) for c in range(k) for b in range(n)]
        names += [f"g_v2n_v2v_{b}_{a}" for b in range(n) for a in range(k)]
        names += [f"g_v2v_bs_{a}_{b}" for a in range(k) for b in range(n)]
        names += [f"g_v2n_bs_{b}" for b in range(n)]
        return names


def pathloss_v2n_db(d_km):
    """Cellular V2N path loss, distance in km."""
    return 128.1 + 37.6 * np.log10(d_km)


def pathloss_winner_b1_db(d_m, carrier_freq_hz, a=22.7, b=41.0, c=20.0):
    """WINNER B1 (urban micro, LOS) path loss, distance in m."""
    return a * np.log10(d_m) + b + c * np.log10(carrier_freq_hz / 1e9 / 5.0)


def coherence_time(carrier_freq_hz, speed_mps):
    """Channel coherence time sqrt(9 / (16 pi f_D^2)) for Doppler f_D = f_c v / c."""
    if not speed_mps > 0:
        raise DomainError(f"coherence time undefined for speed {speed_mps!r} (zero Doppler)")
    doppler = carrier_freq_hz * speed_mps / speed_of_light
    return 3.0 / (4.0 * np.sqrt(np.pi) * doppler)


def _lanes(cfg):
    """(is_horizontal, fixed_coordinate, direction) for every lane."""
    offsets = cfg.lane_width_m * (np.arange(cfg.lanes_per_direction) + 0.5)
    lanes = []
    for j in range(cfg.n_roads_y):
        y0 = cfg.area_height_m * (j + 0.5) / cfg.n_roads_y
        lanes += [(True, (y0 - o) % cfg.area_height_m, 1.0) for o in offsets]
        lanes += [(True, (y0 + o) % cfg.area_height_m, -1.0) for o in offsets]
    for i in range(cfg.n_roads_x):
        x0 = cfg.area_width_m * (i + 0.5) / cfg.n_roads_x
        lanes += [(False, (x0 + o) % cfg.area_width_m, 1.0) for o in offsets]
        lanes += [(False, (x0 - o) % cfg.area_width_m, -1.0) for o in offsets]
    return lanes


def _drop_field(cfg, rng):
    mean_gap = max(cfg.headway_s * cfg.speed_mps, cfg.min_spacing_m)
    pos, head, lane_ids = [], [], []
    for lane_id, (horizontal, coord, direction) in enumerate(_lanes(cfg)):
        length = cfg.area_width_m if horizontal else cfg.area_height_m
        s = rng.uniform(0.0, mean_gap)
        along = []
        # shifted exponential gaps: Poisson process with a hard-core spacing
        while s <= length - cfg.min_spacing_m:
            along.append(s)
            s += cfg.min_spacing_m + rng.exponential(mean_gap - cfg.min_spacing_m) \
                if mean_gap > cfg.min_spacing_m else cfg.min_spacing_m
        for a in along:
            pos.append((a, coord) if horizontal else (coord, a))
            head.append((direction, 0.0) if horizontal else (0.0, direction))
            lane_ids.append(lane_id)
    return np.array(pos, dtype=float).reshape(-1, 2), np.array(head, dtype=float).reshape(-1, 2), \
        np.array(lane_ids, dtype=int)


def torus_delta(a, b, width, height):
    d = np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))
    size = np.array([width, height])
    return np.minimum(d, size - d)


def init_topology(cfg, seed):
    """Drop vehicles and form V2N links and V2V pairs, deterministically in `seed`."""
    rng = make_rng(seed, stream_key("topology"))
    positions, headings, lane_ids = _drop_field(cfg, rng)
    k, n = cfg.n_v2v, cfg.n_v2n
    needed = n + 2 * k
    if len(positions) < needed:
        raise ConfigurationError(
            f"area holds {len(positions)} vehicles at minimum spacing/headway, {needed} required")
    order = rng.permutation(len(positions))
    used = np.zeros(len(positions), dtype=bool)
    chosen = list(order[:n])
    used[order[:n]] = True
    cursor = n
    for _ in range(k):
        while used[order[cursor]]:
            cursor += 1
        tx = order[cursor]
        used[tx] = True
        d = torus_delta(positions, positions[tx], cfg.area_width_m, cfg.area_height_m)
        dist = np.hypot(d[:, 0], d[:, 1])
        dist[used] = np.inf
        rx = int(np.argmin(dist))
        used[rx] = True
        chosen += [tx, rx]
    chosen = np.array(chosen, dtype=int)
    n_pairs = cfg.n_pairs
    pairs = np.full((n_pairs, 2), -1, dtype=int)
    pairs[:k, 0] = n + 2 * np.arange(k)
    pairs[:k, 1] = n + 2 * np.arange(k) + 1
    virtual = np.arange(n_pairs) >= k
    return WorldState(
        area_width_m=cfg.area_width_m,
        area_height_m=cfg.area_height_m,
        positions=positions[chosen],
        headings=headings[chosen],
        lane_ids=lane_ids[chosen],
        v2n_links=np.arange(n),
        v2v_pairs=pairs,
        virtual=virtual,
        bs_position=cfg.bs_position,
        slot_index=0,
        speed_mps=cfg.speed_mps,
    )


def step_mobility(world, dt):
    """Advance every vehicle by speed*dt along its heading, wrapping on the torus."""
    if not dt > 0:
        raise DomainError(f"dt must be positive, got {dt!r}")
    size = np.array([world.area_width_m, world.area_height_m])
    moved = np.mod(world.positions + world.speed_mps * dt * world.headings, size)
    return replace(world, positions=moved, slot_index=world.slot_index + 1)


def _rayleigh_power(rng, shape):
    h = rng.standard_normal((2,) + shape)
    return 0.5 * (h[0] ** 2 + h[1] ** 2)


def sample_channels(world, cfg, seed):
    """Large-scale (path loss + per-episode shadowing) times per-slot Rayleigh fading.

    Shadowing depends only on `seed`; small-scale fading on (`seed`, slot, link group).
    Virtual pairs get ``cfg.gain_floor`` on every link.
    """
    n = cfg.n_v2n
    kt = len(world.v2v_pairs)
    real = ~world.virtual
    pos = world.positions
    w, h = world.area_width_m, world.area_height_m
    tx = np.where(real, world.v2v_pairs[:, 0], 0)
    rx = np.where(real, world.v2v_pairs[:, 1], 0)
    v2n = pos[world.v2n_links]

    def ground(a, b):
        d = torus_delta(a, b, w, h)
        return np.maximum(np.hypot(d[..., 0], d[..., 1]), cfg.min_distance_m)

    d_direct = ground(pos[tx], pos[rx])
    d_cross = ground(pos[tx][:, None, :], pos[rx][None, :, :])
    d_v2n_v2v = ground(v2n[:, None, :], pos[rx][None, :, :])
    dh = cfg.bs_antenna_height_m - cfg.veh_antenna_height_m
    d_v2v_bs = np.maximum(np.hypot(ground(pos[tx], world.bs_position), dh), cfg.min_distance_m)
    d_v2n_bs = np.maximum(np.hypot(ground(v2n, world.bs_position), dh), cfg.min_distance_m)

    def b1(d):
        return pathloss_winner_b1_db(d, cfg.carrier_freq_hz, cfg.winner_a, cfg.winner_b, cfg.winner_c)

    g_vv = 2 * cfg.veh_antenna_gain_dbi - cfg.veh_noise_figure_db
    g_vb = cfg.veh_antenna_gain_dbi + cfg.bs_antenna_gain_dbi - cfg.bs_noise_figure_db
    large = {
        "direct": g_vv - b1(d_direct),
        "cross": g_vv - b1(d_cross),
        "v2n_to_v2v": g_vv - b1(d_v2n_v2v),
        "v2v_to_bs": g_vb - pathloss_v2n_db(d_v2v_bs / 1e3),
        "v2n_to_bs": g_vb - pathloss_v2n_db(d_v2n_bs / 1e3),
    }
    small_shapes = {
        "direct": (kt, n), "cross": (kt, kt, n), "v2n_to_v2v": (n, kt),
        "v2v_to_bs": (kt, n), "v2n_to_bs": (n,),
    }
    gains = {}
    for name, loss_db in large.items():
        shadow = make_rng(seed, _SHADOW, _GROUPS[name]).normal(0.0, cfg.shadowing_std_db, loss_db.shape)
        fading = _rayleigh_power(make_rng(seed, _FADING, world.slot_index, _GROUPS[name]), small_shapes[name])
        lin = 10.0 ** ((loss_db - shadow) / 10.0)
        if name in ("direct", "v2v_to_bs"):
            lin = lin[:, None]
        elif name == "cross":
            lin = lin[:, :, None]
        gains[name] = lin * fading

    floor = cfg.gain_floor
    virt = world.virtual
    gains["direct"][virt] = floor
    gains["cross"][virt] = floor
    gains["cross"][:, virt] = floor
    gains["cross"][np.arange(kt), np.arange(kt)] = floor
    gains["v2n_to_v2v"][:, virt] = floor
    gains["v2v_to_bs"][virt] = floor
    for g in gains.values():
        np.maximum(g, np.finfo(float).tiny, out=g)
    return ChannelMatrix(virtual=virt.copy(), **gains)


def episode_channels(cfg, topology_seed, fading_seed, n_steps):
    """Yield the real-pair ChannelMatrix for slots 0..n_steps of one episode."""
    world = init_topology(cfg, topology_seed)
    for t in range(n_steps + 1):
        if t:
            world = step_mobility(world, cfg.slot_s)
        yield sample_channels(world, cfg, fading_seed).active()
