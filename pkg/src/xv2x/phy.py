"""Rates, SINR, finite-blocklength error probability, reward and objective.

All array functions broadcast over leading batch axes so that a whole
hold-out set of slots can be scored in one call.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfc

from .errors import DomainError

LN2 = np.log(2.0)

# Acklam's rational approximation to the standard normal quantile
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def q_function(x):
    """Gaussian tail probability Q(x) = P(Z > x)."""
    return 0.5 * erfc(np.asarray(x, dtype=float) / np.sqrt(2.0))


def _normal_quantile(u):
    u = np.asarray(u, dtype=float)
    out = np.empty_like(u)
    lo = u < _P_LOW
    hi = u > 1 - _P_LOW
    mid = ~(lo | hi)
    if mid.any():
        q = u[mid] - 0.5
        r = q * q
        num = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
        den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1
        out[mid] = num / den
    for mask, sign, tail in ((lo, 1.0, u), (hi, -1.0, 1 - u)):
        if mask.any():
            q = np.sqrt(-2 * np.log(tail[mask]))
            num = ((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]
            den = (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1
            out[mask] = sign * num / den
    return out


def q_inverse(p):
    """Inverse Gaussian tail: x such that Q(x) = p, for p in (0, 1).

    Rational initial guess refined by one Newton step on Q.
    """
    p_arr = np.asarray(p, dtype=float)
    if np.any(~((p_arr > 0) & (p_arr < 1))):
        raise DomainError("q_inverse requires p in the open interval (0, 1)")
    # Q(x) = p  <=>  x = Phi^-1(1 - p) = -Phi^-1(p)
    x = -_normal_quantile(p_arr)
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2 * np.pi)
    x = x + (q_function(x) - p_arr) / pdf
    return float(x) if np.ndim(p) == 0 else x


def shannon_capacity(gamma):
    return np.log2(1.0 + np.asarray(gamma, dtype=float))


def channel_dispersion(gamma):
    return 1.0 - (1.0 + np.asarray(gamma, dtype=float)) ** -2


def v2n_rate(gamma, bandwidth_hz):
    gamma = np.asarray(gamma, dtype=float)
    if np.any(gamma < 0):
        raise DomainError("SINR must be nonnegative")
    return bandwidth_hz * np.log2(1.0 + gamma)


def decoding_error_prob(gamma, bandwidth_hz, latency_s, payload_bits):
    """Normal-approximation block error probability for a fixed payload."""
    m = bandwidth_hz * latency_s
    if m < 1:
        raise DomainError(f"blocklength {m} < 1")
    gamma = np.asarray(gamma, dtype=float)
    pos = gamma > 0
    g = np.where(pos, gamma, 1.0)
    arg = LN2 * np.sqrt(m / channel_dispersion(g)) * (shannon_capacity(g) - payload_bits / m)
    eps = np.where(pos, q_function(arg), 1.0)
    return float(eps) if eps.ndim == 0 else eps


def v2v_rate_fbl(gamma, eps, bandwidth_hz, latency_s):
    """Maximal rate (bit/s) at blocklength B_w*latency and error probability eps, floored at 0."""
    m = bandwidth_hz * latency_s
    if m < 1:
        raise DomainError(f"blocklength {m} < 1")
    eps = np.asarray(eps, dtype=float)
    if np.any(~((eps > 0) & (eps < 1))):
        raise DomainError("eps must lie in (0, 1)")
    gamma = np.asarray(gamma, dtype=float)
    rate = bandwidth_hz * (shannon_capacity(gamma)
                           - np.sqrt(channel_dispersion(gamma) / m) * q_inverse(eps) / LN2)
    rate = np.maximum(rate, 0.0)
    return float(rate) if rate.ndim == 0 else rate


def v2v_throughput(rate, eps):
    return np.asarray(rate, dtype=float) * (1.0 - np.asarray(eps, dtype=float))


@dataclass
class Allocation:
    band: np.ndarray
    power_w: np.ndarray
    p_v2n_w: float

    def __post_init__(self):
        self.band = np.asarray(self.band, dtype=int)
        self.power_w = np.asarray(self.power_w, dtype=float)

    def validate(self, n_bands, p_max_w):
        if self.band.shape != self.power_w.shape:
            raise ValueError("band and power_w must have one entry per V2V link")
        if np.any((self.band < 0) | (self.band >= n_bands)):
            raise ValueError(f"band indices must lie in [0, {n_bands})")
        if np.any((self.power_w < 0) | (self.power_w > p_max_w * (1 + 1e-12))):
            raise ValueError("V2V power outside [0, P_max]")
        return self


@dataclass
class RewardWeights:
    """Reward and objective weights.

    ``lambda1=None`` means 1/(5K); ``lambda2=None`` means 1/R' with R' the
    slot's sum V2V Shannon rate. Rates entering the reward are divided by
    ``rate_unit_bps`` (the pipeline uses the sub-band bandwidth, i.e. bit/s/Hz).
    """

    eps_max: np.ndarray
    lambda1: float = None
    lambda2: float = None
    lambda3: float = 1.0
    omega1: float = 1.0
    omega2: float = 1.0
    rate_unit_bps: float = 1.0

    def __post_init__(self):
        self.eps_max = np.atleast_1d(np.asarray(self.eps_max, dtype=float))
        if np.any(~((self.eps_max > 0) & (self.eps_max < 1))):
            raise ValueError("eps_max entries must lie in (0, 1)")
        for name in ("lambda1", "lambda2", "lambda3", "omega1", "omega2"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not self.rate_unit_bps > 0:
            raise ValueError("rate_unit_bps must be positive")

    def lambda1_for(self, n_links):
        return 1.0 / (5.0 * n_links) if self.lambda1 is None else self.lambda1


@dataclass
class SlotReport:
    v2n_sinr: np.ndarray
    v2n_rate_bps: np.ndarray
    v2v_sinr: np.ndarray
    v2v_eps: np.ndarray
    v2v_rate_bps: np.ndarray
    v2v_shannon_bps: np.ndarray
    v2v_throughput_bps: np.ndarray
    reward: np.ndarray = field(default=None)
    objective: np.ndarray = field(default=None)

    @property
    def v2n_sum_rate(self):
        return self.v2n_rate_bps.sum(axis=-1)

    @property
    def v2v_sum_throughput(self):
        return self.v2v_throughput_bps.sum(axis=-1)


def _onehot(bands, n_bands):
    return (np.asarray(bands)[..., None] == np.arange(n_bands)).astype(float)


def interference_at_v2v(cross, v2n_to_v2v, bands, powers, p_v2n_w):
    """Interference I_k[n] at every V2V receiver on every sub-band, shape (..., K, N).

    V2N term plus co-band V2V transmitters other than k.
    """
    n_bands = cross.shape[-1]
    k = cross.shape[-2]
    eta_p = _onehot(bands, n_bands) * np.asarray(powers, dtype=float)[..., None]  # (..., K', N)
    off_diag = (1.0 - np.eye(k))[:, :, None]
    v2v = np.einsum("...tn,...trn->...rn", eta_p, cross * off_diag)
    return p_v2n_w * np.swapaxes(v2n_to_v2v, -1, -2) + v2v


def v2n_sinr_all(v2v_to_bs, v2n_to_bs, bands, powers, p_v2n_w, noise_w):
    eta_p = _onehot(bands, v2n_to_bs.shape[-1]) * np.asarray(powers, dtype=float)[..., None]
    interference = np.sum(eta_p * v2v_to_bs, axis=-2)
    return p_v2n_w * v2n_to_bs / (noise_w + interference)


def v2v_sinr_all(direct, cross, v2n_to_v2v, bands, powers, p_v2n_w, noise_w):
    bands = np.asarray(bands)
    interference = interference_at_v2v(cross, v2n_to_v2v, bands, powers, p_v2n_w)
    i_own = np.take_along_axis(interference, bands[..., None], axis=-1)[..., 0]
    g_own = np.take_along_axis(direct, bands[..., None], axis=-1)[..., 0]
    return np.asarray(powers, dtype=float) * g_own / (noise_w + i_own)


def v2n_sinr(ch, a, n, noise_w):
    """SINR of the n-th V2N link at the BS."""
    return float(v2n_sinr_all(ch.v2v_to_bs, ch.v2n_to_bs, a.band, a.power_w, a.p_v2n_w, noise_w)[n])


def v2v_sinr(ch, a, k, noise_w):
    """SINR at the k-th V2V receiver on its selected sub-band."""
    return float(v2v_sinr_all(ch.direct, ch.cross, ch.v2n_to_v2v, a.band, a.power_w,
                              a.p_v2n_w, noise_w)[k])


def reward(report, w):
    """Common reward: weighted V2N sum rate + normalized V2V throughput - reliability penalty."""
    n_links = report.v2v_eps.shape[-1]
    unit = w.rate_unit_bps
    v2n_term = w.lambda1_for(n_links) * report.v2n_rate_bps.sum(axis=-1) / unit
    thr = report.v2v_throughput_bps.sum(axis=-1) / unit
    if w.lambda2 is None:
        r_prime = report.v2v_shannon_bps.sum(axis=-1) / unit
        v2v_term = np.divide(thr, r_prime, out=np.zeros_like(np.asarray(thr, dtype=float)),
                             where=np.asarray(r_prime) > 0)
    else:
        v2v_term = w.lambda2 * thr
    eps_max = np.broadcast_to(w.eps_max, report.v2v_eps.shape)
    penalty = np.maximum(report.v2v_eps - eps_max, 0.0).sum(axis=-1)
    r = v2n_term + v2v_term - w.lambda3 * penalty
    return float(r) if np.ndim(r) == 0 else r


def objective(report, w):
    obj = w.omega1 * report.v2n_rate_bps.sum(axis=-1) + w.omega2 * report.v2v_throughput_bps.sum(axis=-1)
    return float(obj) if np.ndim(obj) == 0 else obj


def evaluate(direct, cross, v2n_to_v2v, v2v_to_bs, v2n_to_bs, bands, powers, *,
             p_v2n_w, noise_w, bandwidth_hz, latency_s, payload_bits, weights):
    """Score allocations on channel arrays with arbitrary leading batch axes."""
    g_n = v2n_sinr_all(v2v_to_bs, v2n_to_bs, bands, powers, p_v2n_w, noise_w)
    g_k = v2v_sinr_all(direct, cross, v2n_to_v2v, bands, powers, p_v2n_w, noise_w)
    eps = decoding_error_prob(g_k, bandwidth_hz, latency_s, payload_bits)
    eps_max = np.broadcast_to(weights.eps_max, np.shape(g_k))
    rate = v2v_rate_fbl(g_k, eps_max, bandwidth_hz, latency_s)
    report = SlotReport(
        v2n_sinr=g_n,
        v2n_rate_bps=v2n_rate(g_n, bandwidth_hz),
        v2v_sinr=g_k,
        v2v_eps=np.asarray(eps, dtype=float),
        v2v_rate_bps=np.asarray(rate, dtype=float),
        v2v_shannon_bps=bandwidth_hz * shannon_capacity(g_k),
        v2v_throughput_bps=v2v_throughput(rate, eps),
    )
    report.reward = reward(report, weights)
    report.objective = objective(report, weights)
    return report


def evaluate_slot(ch, alloc, cfg, weights):
    """SlotReport for one ChannelMatrix (real pairs only) and Allocation."""
    alloc.validate(ch.n_bands, cfg.p_max_w)
    return evaluate(ch.direct, ch.cross, ch.v2n_to_v2v, ch.v2v_to_bs, ch.v2n_to_bs,
                    alloc.band, alloc.power_w, p_v2n_w=alloc.p_v2n_w, noise_w=cfg.noise_power_w,
                    bandwidth_hz=cfg.bandwidth_hz, latency_s=cfg.packet_latency_s,
                    payload_bits=cfg.payload_bits, weights=weights)
