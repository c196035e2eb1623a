"""Evaluation metrics: empirical CDFs, network availability and complexity figures."""

import numpy as np

from .io import read_csv, write_csv


def ecdf(samples):
    """Distinct sorted values and right-continuous cumulative probabilities P(X <= v)."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("empirical CDF needs at least one sample")
    values, counts = np.unique(x, return_counts=True)
    return values, np.cumsum(counts) / x.size


def emit_cdf(samples, path):
    values, probs = ecdf(samples)
    write_csv(path, ["value", "cumulative_probability"], zip(values, probs))
    return values, probs


def load_cdf(path):
    """Read a CDF file and check that both columns are nondecreasing and end at 1."""
    _, rows = read_csv(path)
    arr = np.array(rows, dtype=float).reshape(-1, 2)
    if np.any(np.diff(arr, axis=0) < 0) or not np.isclose(arr[-1, 1], 1.0):
        raise ValueError(f"{path} is not a valid CDF")
    return arr[:, 0], arr[:, 1]


def network_availability(eps, eps_max):
    """Percentage of slots whose worst-link decoding error is at most ``eps_max``."""
    eps = np.atleast_2d(np.asarray(eps, dtype=float))
    return 100.0 * float(np.mean(eps.max(axis=1) <= eps_max))


def availability_curve(eps, thresholds):
    return [network_availability(eps, t) for t in thresholds]


def reduction(original, simplified):
    return 1.0 - simplified / original


def complexity_report(original, simplified, timings=None):
    """Rows of (scheme, n_features, param_count, median update s) plus reduction ratios."""
    timings = timings or {}
    rows = []
    for name, ens in (("Original-MADRL", original), ("Simplified-MADRL", simplified)):
        t = timings.get(name)
        rows.append({
            "scheme": name,
            "n_features": int(ens.input_dim),
            "param_count": int(ens.param_count()),
            "median_update_s": float(np.median(t)) if t is not None and len(t) else float("nan"),
        })
    ratios = {
        "feature_reduction": reduction(rows[0]["n_features"], rows[1]["n_features"]),
        "param_reduction": reduction(rows[0]["param_count"], rows[1]["param_count"]),
    }
    return rows, ratios
