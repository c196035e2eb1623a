"""Masking-based iterative feature selection and the average-performance metric."""

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.feature_selection import SelectorMixin

MASK_MODES = ("variance", "mean")


def average_network_performance(ensemble, holdout, scenario, states=None):
    """Mean reward of the greedy joint actions re-scored on the stored channels.

    ``states`` (S, K, L) overrides the stored model inputs, which is how masked
    copies are evaluated without touching the environment.
    """
    if holdout.n_slots == 0:
        raise ValueError("hold-out dataset is empty")
    states = holdout.states if states is None else states
    actions = ensemble.greedy(states)
    return float(np.mean(scenario.score_batch(holdout.channels, actions).reward))


def mask_features(X, features, mode="variance"):
    """Copy of X with each listed column replaced by its population variance (or mean).

    Statistics pool every leading axis, so (S, K, L) hold-out states are
    masked with one value per feature shared by all agents.
    """
    if mode not in MASK_MODES:
        raise ValueError(f"mask mode must be one of {MASK_MODES}")
    X = np.array(X, dtype=float, copy=True)
    features = np.asarray(list(features), dtype=int)
    if features.size == 0:
        return X
    if np.any((features < 0) | (features >= X.shape[-1])):
        raise IndexError("feature index out of range")
    flat = X.reshape(-1, X.shape[-1])[:, features]
    fill = flat.var(axis=0) if mode == "variance" else flat.mean(axis=0)
    X[..., features] = fill
    return X


@dataclass
class SelectionResult:
    retained: np.ndarray
    eliminated: np.ndarray
    p_stop: int
    alpha_original: float
    alpha_trace: list = field(default_factory=list)
    delta: float = None
    mask: str = "variance"

    def __post_init__(self):
        self.retained = np.asarray(self.retained, dtype=int)
        self.eliminated = np.asarray(self.eliminated, dtype=int)
        if self.retained.size < 1:
            raise ValueError("selection must retain at least one feature")
        if np.intersect1d(self.retained, self.eliminated).size:
            raise ValueError("retained and eliminated features overlap")

    @property
    def n_features(self):
        return self.retained.size + self.eliminated.size

    def to_dict(self):
        return {
            "retained": self.retained.tolist(),
            "eliminated": self.eliminated.tolist(),
            "p_stop": int(self.p_stop),
            "alpha_original": float(self.alpha_original),
            "alpha_trace": [float(a) for a in self.alpha_trace],
            "delta": None if self.delta is None else float(self.delta),
            "mask": self.mask,
        }


def iterative_selection(alpha_fn, X, ranking, delta, mask="variance"):
    """Mask the p least important features for p = 1..L-1 until alpha moves by delta.

    ``alpha_fn(X_masked)`` returns the average performance of a masked copy.
    The first p with ``|alpha_original - alpha_p| >= delta`` eliminates the
    p - 1 least important features; if no p trips, all but the top feature go.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    order = np.asarray(ranking.order, dtype=int)
    n = X.shape[-1]
    if sorted(order.tolist()) != list(range(n)):
        raise ValueError("ranking must cover every feature exactly once")
    alpha0 = float(alpha_fn(X))
    trace = []
    n_elim, p_stop = n - 1, n
    for p in range(1, n):
        alpha_p = float(alpha_fn(mask_features(X, order[n - p:], mask)))
        trace.append(alpha_p)
        if abs(alpha0 - alpha_p) >= delta:
            n_elim, p_stop = p - 1, p
            break
    return SelectionResult(retained=order[:n - n_elim], eliminated=order[n - n_elim:], p_stop=p_stop,
                           alpha_original=alpha0, alpha_trace=trace, delta=delta, mask=mask)


def select_features(ensemble, holdout, scenario, ranking, delta, mask="variance"):
    def alpha_fn(states):
        return average_network_performance(ensemble, holdout, scenario, states)
    return iterative_selection(alpha_fn, holdout.states, ranking, delta, mask)


class ShapFeatureSelector(SelectorMixin, BaseEstimator):
    """Feature selector over state columns; ``fit`` takes the hold-out rollout."""

    def __init__(self, ensemble=None, scenario=None, ranking=None, delta=2.0, mask="variance"):
        self.ensemble = ensemble
        self.scenario = scenario
        self.ranking = ranking
        self.delta = delta
        self.mask = mask

    def fit(self, holdout, y=None):
        self.result_ = select_features(self.ensemble, holdout, self.scenario, self.ranking,
                                       self.delta, self.mask)
        self.n_features_in_ = self.result_.n_features
        return self

    def _get_support_mask(self):
        support = np.zeros(self.n_features_in_, dtype=bool)
        support[self.result_.retained] = True
        return support


def rebuild_and_retrain(scenario, estimator, retained):
    """Fresh copy of ``estimator`` trained on the retained state columns (kept in state order)."""
    retained = np.sort(np.asarray(retained, dtype=int))
    if retained.size < 1:
        raise ValueError("need at least one retained feature")
    est = estimator.__class__(**{**estimator.get_params(), "feature_subset": retained})
    return est.fit(scenario)
