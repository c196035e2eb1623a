"""Parameter sweeps over a completed run (or fresh training runs for vehicle count)."""

import numpy as np

from . import io
from .marl import Scenario
from .metrics import network_availability
from .pipeline import FULL_POWER, ORIGINAL, RANDOM, Pipeline

AXES = ("delta", "eps_max", "speed", "vehicle_count")


def sweep_delta(pipe, values):
    rows = []
    for d in values:
        res = pipe.select(delta=float(d))
        rows.append([d, res.retained.size, res.p_stop, res.alpha_original])
    # leave the configured selection in place
    pipe.select()
    return io.write_csv(pipe.out / "sweep" / "delta.csv", ["delta", "n_retained", "p_stop", "alpha_original"], rows)


def sweep_eps_max(pipe, values):
    rows = []
    for name in pipe.policies():
        path = pipe.out / "eval" / f"metrics_{name.lower().replace('-', '_')}.csv"
        if not path.exists():
            continue
        eps = pipe.load_metrics(name)[:, 7:]
        rows += [[e, name, network_availability(eps, e)] for e in values]
    return io.write_csv(pipe.out / "sweep" / "eps_max.csv", ["eps_max", "scheme", "availability_pct"], rows)


def sweep_speed(pipe, values):
    rows = []
    eps_ref = float(min(pipe.cfg.env.eps_max))
    for v in values:
        scen = Scenario(pipe.cfg.env_config(speed_mps=float(v) / 3.6), pipe.scenario.weights, seed=pipe.cfg.seed,
                        n_power_levels=pipe.scenario.n_power_levels)
        for name, (ens, policy) in pipe.policies(scen).items():
            ro = pipe.run_scheme(scen, ens, policy, pipe.test_episodes)
            rows.append([v, name, ro.reward.mean(), ro.sum_rate_bps.mean(), ro.v2n_sum_rate_bps.mean(),
                         network_availability(ro.eps, eps_ref)])
    return io.write_csv(pipe.out / "sweep" / "speed.csv",
                        ["speed_kmh", "scheme", "mean_reward", "mean_sum_rate_bps", "mean_v2n_sum_rate_bps",
                         "availability_pct"], rows)


def sweep_vehicle_count(pipe, values):
    """Train and evaluate one ensemble per V2V link count at a fixed number of V2N links."""
    rows = []
    n = pipe.cfg.sweep.vehicle_count_n_v2n
    for k in values:
        k = int(k)
        eps = pipe.cfg.env.eps_max
        eps = [eps[0]] * k if len(eps) != k else list(eps)
        cfg = pipe.cfg.with_overrides(**{"env.n_v2v": k, "env.n_v2n": n, "env.eps_max": eps})
        sub = Pipeline(cfg, pipe.out / "sweep" / f"vehicles_{k}")
        est = sub.estimator().fit(sub.scenario)
        schemes = {ORIGINAL: (est.ensemble_, None)}
        schemes.update({name: val for name, val in sub.policies(include_trained=False).items()
                        if name in (RANDOM, FULL_POWER)})
        for name, (ens, policy) in schemes.items():
            ro = sub.run_scheme(sub.scenario, ens, policy, sub.test_episodes)
            rows.append([k, n, name, ro.reward.mean(), ro.v2n_sum_rate_bps.mean(), ro.sum_rate_bps.mean()])
    return io.write_csv(pipe.out / "sweep" / "vehicle_count.csv",
                        ["n_v2v", "n_v2n", "scheme", "mean_reward", "mean_v2n_sum_rate_bps", "mean_sum_rate_bps"],
                        rows)


def run_sweep(pipe, axis, values=None):
    if axis not in AXES:
        raise ValueError(f"sweep axis must be one of {AXES}")
    s = pipe.cfg.sweep
    if values is None:
        values = {"delta": s.delta, "eps_max": s.eps_max, "speed": s.speed_kmh,
                  "vehicle_count": s.vehicle_count}[axis]
    if not len(values):
        raise ValueError(f"no values configured for the {axis} sweep")
    fn = {"delta": sweep_delta, "eps_max": sweep_eps_max, "speed": sweep_speed,
          "vehicle_count": sweep_vehicle_count}[axis]
    return fn(pipe, list(np.atleast_1d(values)))
