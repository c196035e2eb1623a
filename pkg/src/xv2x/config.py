"""Experiment configuration: TOML file, schema-validated, unknown keys rejected."""

import sys
from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .env import EnvConfig
from .errors import SchemaError
from .nn import TrainHyper
from .phy import RewardWeights

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class EnvSection(_Strict):
    n_v2v: int = Field(2, ge=1)
    n_v2n: int = Field(2, ge=1)
    eps_max: List[float] = Field(..., min_length=1)
    carrier_freq_hz: float = Field(2e9, gt=0)
    speed_kmh: float = Field(60.0, ge=0)
    bandwidth_hz: float = Field(180e3, gt=0)
    noise_power_dbm: float = -114.0
    shadowing_std_db: float = Field(3.0, ge=0)
    p_max_dbm: float = 23.0
    p_v2n_dbm: float = 23.0
    packet_latency_s: float = Field(1e-3, gt=0)
    payload_bits: int = Field(100, gt=0)

    @model_validator(mode="after")
    def _eps(self):
        if len(self.eps_max) not in (1, self.n_v2v):
            raise ValueError(f"eps_max needs 1 or n_v2v={self.n_v2v} entries, got {len(self.eps_max)}")
        if any(not 0 < e < 1 for e in self.eps_max):
            raise ValueError("eps_max entries must lie in (0, 1)")
        return self


class TrainSection(_Strict):
    episodes: int = Field(300, ge=1)
    steps: int = Field(100, ge=1)
    power_levels: int = Field(4, ge=1)
    lr0: float = Field(0.01, gt=0)
    lr_decay: float = Field(1e-4, ge=0, lt=1)
    discount: float = Field(0.99, ge=0, lt=1)
    batch_size: int = Field(100, ge=1)
    eps0: float = Field(0.1, ge=0, le=1)
    eps_decay: float = Field(1e-4, ge=0, lt=1)
    batch_period: int = Field(100, ge=0)
    copy_period: int = Field(400, ge=1)
    buffer_capacity: int = Field(100_000, ge=1)
    output_activation: Literal["relu", "linear", "tanh"] = "linear"
    # TD targets use reward * reward_scale; logged rewards stay in kbit/s
    reward_scale: float = Field(0.01, gt=0)


class EvalSection(_Strict):
    episodes: int = Field(50, ge=1)
    availability_eps: List[float] = Field(default_factory=lambda: [1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1])


class XaiSection(_Strict):
    bg_fraction: float = Field(0.01, gt=0, le=1)
    bg_max_centroids: int = Field(100, ge=1)
    holdout_fraction: float = Field(0.10, gt=0, le=1)
    holdout_max_centroids: int = Field(1000, ge=1)


class SelectSection(_Strict):
    delta: float = Field(2.0, gt=0)
    delta_fraction: Optional[float] = Field(None, gt=0)
    mask: Literal["variance", "mean"] = "variance"


class BaselineSection(_Strict):
    random: bool = True
    full_power: bool = True
    sadrl: bool = False


class SweepSection(_Strict):
    delta: List[float] = Field(default_factory=list)
    eps_max: List[float] = Field(default_factory=list)
    vehicle_count: List[int] = Field(default_factory=list)
    speed_kmh: List[float] = Field(default_factory=list)
    vehicle_count_n_v2n: int = Field(4, ge=1)


class ExperimentConfig(_Strict):
    seed: int = 0
    scale: Literal["desk", "paper"] = "desk"
    out_dir: str = "runs/default"
    env: EnvSection
    train: TrainSection = TrainSection()
    eval: EvalSection = EvalSection()
    xai: XaiSection = XaiSection()
    select: SelectSection = SelectSection()
    baselines: BaselineSection = BaselineSection()
    sweep: SweepSection = SweepSection()

    def env_config(self, **overrides):
        e = self.env
        kw = dict(n_v2v=e.n_v2v, n_v2n=e.n_v2n, carrier_freq_hz=e.carrier_freq_hz, speed_mps=e.speed_kmh / 3.6,
                  bandwidth_hz=e.bandwidth_hz, noise_power_dbm=e.noise_power_dbm,
                  shadowing_std_db=e.shadowing_std_db, p_max_dbm=e.p_max_dbm, p_v2n_dbm=e.p_v2n_dbm,
                  packet_latency_s=e.packet_latency_s, payload_bits=e.payload_bits)
        kw.update(overrides)
        return EnvConfig(**kw)

    def reward_weights(self, eps_max=None):
        return RewardWeights(eps_max=self.env.eps_max if eps_max is None else eps_max,
                             rate_unit_bps=REWARD_RATE_UNIT_BPS)

    def hyper(self):
        t = self.train
        return TrainHyper(lr0=t.lr0, lr_decay=t.lr_decay, discount=t.discount, batch_size=t.batch_size,
                          eps0=t.eps0, eps_decay=t.eps_decay)

    def with_overrides(self, **kw):
        data = self.model_dump()
        for dotted, value in kw.items():
            if value is None:
                continue
            node = data
            *path, leaf = dotted.split(".")
            for p in path:
                node = node[p]
            node[leaf] = value
        return validate_config(data)


# Rates enter the reward in kbit/s.
REWARD_RATE_UNIT_BPS = 1e3

PAPER_SCALE = {"train.episodes": 4000, "eval.episodes": 1000, "xai.bg_max_centroids": 4000}


def validate_config(data):
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        keys = [".".join(str(p) for p in err["loc"]) or "<root>" for err in exc.errors()]
        raise SchemaError(f"invalid experiment config: {exc}", keys) from exc


def load_config(path, scale=None, seed=None, out_dir=None, delta=None):
    try:
        with open(Path(path), "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    cfg = validate_config(data)
    cfg = cfg.with_overrides(**{"seed": seed, "out_dir": out_dir, "scale": scale, "select.delta": delta})
    if delta is not None:
        # An explicit delta wins over a fraction-of-alpha setting
        data = cfg.model_dump()
        data["select"]["delta_fraction"] = None
        cfg = validate_config(data)
    if cfg.scale == "paper":
        cfg = cfg.with_overrides(**PAPER_SCALE)
    return cfg
