"""Shapley attributions for the Q-networks.

Three estimators share one masking convention: a feature outside the
coalition takes its value from a background sample, and the coalition value
is the weighted expectation over the background.

* ``exact_shapley`` enumerates all coalitions (small inputs only).
* ``sampled_shapley`` averages marginal contributions along random permutations.
* ``deep_shap`` propagates DeepLIFT rescale multipliers through an ``MLP``.
"""

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.cluster import KMeans

from .errors import DomainError
from .nn import ACTIVATIONS

EXACT_MAX_FEATURES = 15
RESCALE_TOL = 1e-9


@dataclass
class BackgroundSet:
    samples: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if self.samples.shape[0] < 1:
            raise ValueError("background needs at least one sample")
        if self.weights.shape != (self.samples.shape[0],) or np.any(self.weights <= 0):
            raise ValueError("background weights must be positive, one per sample")

    @classmethod
    def uniform(cls, samples):
        samples = np.atleast_2d(np.asarray(samples, dtype=float))
        return cls(samples, np.ones(samples.shape[0]))

    @property
    def probs(self):
        return self.weights / self.weights.sum()

    def __len__(self):
        return self.samples.shape[0]


def kmeans_summarize(data, k, seed):
    """Weighted k-means summary: centroids with cluster cardinalities as weights."""
    data = np.atleast_2d(np.asarray(data, dtype=float))
    if data.shape[0] == 0:
        raise ValueError("cannot summarize an empty dataset")
    if not 1 <= k <= data.shape[0]:
        raise ValueError(f"k={k} must lie in [1, {data.shape[0]}]")
    if k == 1:
        return BackgroundSet(data.mean(axis=0, keepdims=True), [float(data.shape[0])])
    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=100, algorithm="lloyd",
                random_state=int(seed) % (2 ** 32)).fit(data)
    counts = np.bincount(km.labels_, minlength=k).astype(float)
    keep = counts > 0
    return BackgroundSet(km.cluster_centers_[keep], counts[keep])


def summary_size(n_rows, fraction, cap):
    return int(max(1, min(cap, math.ceil(fraction * n_rows), n_rows)))


class KMeansSummarizer(BaseEstimator):
    """Estimator wrapper around ``kmeans_summarize``; the result is ``background_``."""

    def __init__(self, fraction=0.01, max_centroids=100, random_state=0):
        self.fraction = fraction
        self.max_centroids = max_centroids
        self.random_state = random_state

    def fit(self, X, y=None):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        k = summary_size(X.shape[0], self.fraction, self.max_centroids)
        self.background_ = kmeans_summarize(X, k, self.random_state)
        return self


def _outputs(model, rows):
    out = np.asarray(model(rows), dtype=float)
    return out[:, None] if out.ndim == 1 else out


def _coalition_values(model, x, bg, masks, chunk_rows=200_000):
    """v(S) for each boolean row of ``masks``: weighted background expectation, shape (S, M)."""
    b, l = bg.samples.shape
    probs = bg.probs
    per = max(1, chunk_rows // b)
    vals = []
    for start in range(0, masks.shape[0], per):
        m = masks[start:start + per]
        rows = np.where(m[:, None, :], x[None, None, :], bg.samples[None, :, :]).reshape(-1, l)
        out = _outputs(model, rows).reshape(m.shape[0], b, -1)
        vals.append(np.einsum("sbm,b->sm", out, probs))
    return np.concatenate(vals)


def exact_shapley(model, x, bg, output=0):
    """Shapley values by full coalition enumeration.

    ``model`` maps (n, L) rows to (n,) or (n, M). Returns a length-L vector
    for ``output``, or an (M, L) matrix when ``output`` is None.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    l = x.size
    if l > EXACT_MAX_FEATURES:
        raise DomainError(f"{l} features exceed the enumeration budget of {EXACT_MAX_FEATURES}; "
                          "use sampled_shapley")
    codes = np.arange(2 ** l)
    masks = ((codes[:, None] >> np.arange(l)) & 1).astype(bool)
    v = _coalition_values(model, x, bg, masks)
    sizes = masks.sum(axis=1)
    fact = [math.factorial(i) for i in range(l + 1)]
    phi = np.zeros((v.shape[1], l))
    for j in range(l):
        without = codes[~masks[:, j]]
        wts = np.array([fact[s] * fact[l - s - 1] for s in sizes[without]], dtype=float) / fact[l]
        phi[:, j] = wts @ (v[without | (1 << j)] - v[without])
    return phi if output is None else phi[output]


def sampled_shapley(model, x, bg, n_perm, seed, output=0):
    """Permutation-sampling Shapley estimate and its standard error.

    Each permutation adds features one at a time and records every marginal
    contribution, so each permutation gives one unbiased sample per feature.
    Returns ``(phi, se)``, each of length L (or (M, L) when ``output`` is None).
    """
    if n_perm < 1:
        raise ValueError("n_perm must be >= 1")
    x = np.asarray(x, dtype=float).reshape(-1)
    l = x.size
    rng = np.random.default_rng(seed)
    total = None
    total_sq = None
    per = max(1, 20_000 // ((l + 1) * len(bg)))
    done = 0
    while done < n_perm:
        p = min(per, n_perm - done)
        perms = np.argsort(rng.random((p, l)), axis=1)
        # masks[i, s] = features in the first s positions of permutation i
        rank = np.argsort(perms, axis=1)
        masks = rank[:, None, :] < np.arange(l + 1)[None, :, None]
        v = _coalition_values(model, x, bg, masks.reshape(-1, l)).reshape(p, l + 1, -1)
        gains = np.diff(v, axis=1)  # gains[i, s] belongs to feature perms[i, s]
        contrib = np.zeros((p, l, v.shape[2]))
        np.put_along_axis(contrib, perms[:, :, None], gains, axis=1)
        s1 = contrib.sum(axis=0)
        s2 = (contrib ** 2).sum(axis=0)
        total = s1 if total is None else total + s1
        total_sq = s2 if total_sq is None else total_sq + s2
        done += p
    mean = total / n_perm
    var = np.maximum(total_sq / n_perm - mean ** 2, 0.0) * (n_perm / max(n_perm - 1, 1))
    se = np.sqrt(var / n_perm)
    if output is None:
        return mean.T, se.T
    return mean[:, output], se[:, output]


@dataclass
class ShapMatrix:
    values: np.ndarray  # (M, L)
    base_values: np.ndarray  # (M,)

    def local_accuracy_gap(self, outputs):
        """Largest relative deviation of sum(values) + base from the model outputs."""
        recon = self.values.sum(axis=-1) + self.base_values
        scale = np.maximum(np.abs(outputs), 1.0)
        return float(np.max(np.abs(recon - outputs) / scale))


def _rescale(act, z_x, z_r):
    f, df = ACTIVATIONS[act]
    dz = z_x - z_r
    small = np.abs(dz) < RESCALE_TOL
    safe = np.where(small, 1.0, dz)
    return np.where(small, df(z_r), (f(z_x) - f(z_r)) / safe)


def deep_shap_batch(net, X, bg, chunk_pairs=20_000):
    """DeepLIFT-rescale attributions for many inputs at once.

    Returns ``(values, base_values)`` with values of shape (n, M, L): for every
    (input, reference) pair the rescale multipliers are back-propagated from
    all output units, then the per-reference attributions are averaged with
    the background weights.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, l = X.shape
    refs = bg.samples
    probs = bg.probs
    _, ref_trace = net.forward_with_trace(refs)
    base = probs @ ref_trace[-1][1]
    out = np.zeros((n, net.output_dim, l))
    per = max(1, chunk_pairs // len(bg))
    for start in range(0, n, per):
        xs = X[start:start + per]
        _, x_trace = net.forward_with_trace(xs)
        # multiplier of every output unit w.r.t. the current layer's pre-activations: (c, B, M, H)
        grad = None
        for layer in range(net.n_layers - 1, -1, -1):
            s = _rescale(net.activations[layer], x_trace[layer][0][:, None, :], ref_trace[layer][0][None, :, :])
            if grad is None:
                grad = np.einsum("cbm,mk->cbmk", s, np.eye(s.shape[-1]))
            else:
                grad = grad * s[:, :, None, :]
            grad = grad @ net.weights[layer].T
        delta = xs[:, None, :] - refs[None, :, :]
        out[start:start + per] = np.einsum("cbml,cbl,b->cml", grad, delta, probs)
    return out, base


def deep_shap(net, x, bg):
    values, base = deep_shap_batch(net, np.asarray(x, dtype=float).reshape(1, -1), bg)
    return ShapMatrix(values[0], base)


def explain_dataset(net, X, bg):
    """Attribution row of the greedy action for every input: returns (phis (n, L), actions (n,))."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    values, _ = deep_shap_batch(net, X, bg)
    actions = np.argmax(net.forward(X), axis=1)
    return values[np.arange(X.shape[0]), actions], actions


class DeepShapExplainer(BaseEstimator):
    """Estimator-style front end: fit on background rows, then call ``explain``."""

    def __init__(self, net=None, fraction=0.01, max_centroids=100, random_state=0):
        self.net = net
        self.fraction = fraction
        self.max_centroids = max_centroids
        self.random_state = random_state

    def fit(self, X, y=None):
        if isinstance(X, BackgroundSet):
            self.background_ = X
        else:
            self.background_ = KMeansSummarizer(self.fraction, self.max_centroids, self.random_state).fit(X).background_
        return self

    def shap_values(self, X):
        return deep_shap_batch(self.net, X, self.background_)[0]

    def explain(self, X):
        return explain_dataset(self.net, X, self.background_)


def aggregate_importance(phis, weights=None):
    phis = np.atleast_2d(np.asarray(phis, dtype=float))
    if phis.shape[0] < 1:
        raise ValueError("need at least one attribution row")
    return np.average(np.abs(phis), axis=0, weights=weights)


def softmax_transform(mean_abs):
    v = np.abs(np.asarray(mean_abs, dtype=float))
    e = np.exp(v - v.max())
    return e / e.sum()


def rank_order(values):
    """Indices sorted by descending value; equal values keep ascending index order."""
    return np.argsort(-np.asarray(values, dtype=float), kind="stable")


@dataclass
class ImportanceRanking:
    mean_abs: np.ndarray
    transformed: np.ndarray
    order: np.ndarray

    @classmethod
    def from_mean_abs(cls, mean_abs):
        mean_abs = np.asarray(mean_abs, dtype=float)
        return cls(mean_abs, softmax_transform(mean_abs), rank_order(mean_abs))

    @property
    def ranks(self):
        """Rank of every feature (0 = most important)."""
        r = np.empty(len(self.order), dtype=int)
        r[self.order] = np.arange(len(self.order))
        return r

    def least_important(self, p):
        return self.order[len(self.order) - p:][::-1] if p > 0 else self.order[:0]


def average_across_agents(transformed, mean_abs=None):
    vecs = [np.asarray(t, dtype=float) for t in transformed]
    if not vecs or len({v.shape for v in vecs}) != 1:
        raise ValueError("per-agent importance vectors must be nonempty and equally long")
    glob = np.mean(vecs, axis=0)
    ma = glob if mean_abs is None else np.mean([np.asarray(m, dtype=float) for m in mean_abs], axis=0)
    return ImportanceRanking(ma, glob, rank_order(glob))
