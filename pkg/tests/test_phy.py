import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st

from xv2x import phy
from xv2x.env import ChannelMatrix
from xv2x.errors import DomainError

B = 180e3
DT = 1e-3
M = 180


def mp_q(x):
    return float(mpmath.erfc(mpmath.mpf(x) / mpmath.sqrt(2)) / 2)


def _channel(direct, cross, v2n_to_v2v, v2v_to_bs, v2n_to_bs):
    return ChannelMatrix(np.asarray(direct, float), np.asarray(cross, float), np.asarray(v2n_to_v2v, float),
                         np.asarray(v2v_to_bs, float), np.asarray(v2n_to_bs, float))


@pytest.mark.parametrize("p", [10.0 ** -e for e in range(1, 9)])
def test_q_inverse_roundtrip_against_mpmath(p):
    assert mp_q(phy.q_inverse(p)) == pytest.approx(p, rel=1e-9)


def test_q_inverse_values():
    assert phy.q_inverse(0.5) == pytest.approx(0.0, abs=1e-12)
    assert phy.q_inverse(1e-5) == pytest.approx(4.2649, abs=1e-4)
    x = float(mpmath.findroot(lambda t: mpmath.erfc(t / mpmath.sqrt(2)) / 2 - mpmath.mpf("1e-5"), 4.2))
    assert abs(phy.q_inverse(1e-5) - x) < 1e-9
    for bad in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(DomainError):
            phy.q_inverse(bad)


@given(st.floats(-8, 8))
def test_q_function_matches_mpmath(x):
    assert phy.q_function(x) == pytest.approx(mp_q(x), rel=1e-12, abs=1e-300)


def test_v2n_rate():
    assert phy.v2n_rate(1.0, B) == pytest.approx(180e3)
    assert phy.v2n_rate(0.0, B) == 0.0
    assert phy.v2n_rate(3.0, B) == pytest.approx(360e3)
    with pytest.raises(DomainError):
        phy.v2n_rate(-1.0, B)


def test_decoding_error_examples():
    r = 100 / M
    gamma_star = 2 ** r - 1
    assert phy.decoding_error_prob(gamma_star, B, DT, 100) == pytest.approx(0.5, abs=1e-9)
    assert phy.decoding_error_prob(0.0, B, DT, 100) == 1.0
    arg = np.log(2) * np.sqrt(180 / (1 - 11 ** -2)) * (np.log2(11) - r)
    assert arg == pytest.approx(27.1, abs=0.1)
    eps = phy.decoding_error_prob(10.0, B, DT, 100)
    assert eps < 1e-12
    assert eps == pytest.approx(mp_q(arg), rel=1e-9)


def test_fbl_rate_examples():
    assert phy.v2v_rate_fbl(10.0, 0.5, B, DT) == pytest.approx(B * np.log2(11))
    assert phy.v2v_rate_fbl(0.0, 1e-5, B, DT) == 0.0
    assert phy.v2v_rate_fbl(10.0, 1e-5, B, DT) == pytest.approx(540.5e3, rel=1e-3)
    for bad in (0.0, 1.0):
        with pytest.raises(DomainError):
            phy.v2v_rate_fbl(1.0, bad, B, DT)


def test_rate_floored_at_zero():
    assert phy.v2v_rate_fbl(1e-3, 1e-9, B, DT) == 0.0


@pytest.mark.parametrize("m_mult", [1, 10, 100])
def test_fbl_below_and_approaching_shannon(m_mult):
    gamma = np.array([0.5, 2.0, 10.0, 50.0])
    rate = phy.v2v_rate_fbl(gamma, 1e-5, B, DT * m_mult)
    cap = B * np.log2(1 + gamma)
    assert np.all(rate <= cap)
    if m_mult == 100:
        assert np.all(rate / cap > 0.9)


@given(st.floats(0.01, 100.0), st.floats(1.001, 5.0))
def test_error_monotone_in_gamma(gamma, f):
    assert phy.decoding_error_prob(gamma * f, B, DT, 100) <= phy.decoding_error_prob(gamma, B, DT, 100)


@given(st.floats(0.01, 100.0))
def test_error_monotone_in_blocklength(gamma):
    eps = [phy.decoding_error_prob(gamma, m / DT, DT, 100) for m in (90, 180, 360, 720)]
    assert all(b <= a for a, b in zip(eps, eps[1:]))


def test_throughput():
    assert phy.v2v_throughput(100e3, 0.0) == 100e3
    assert phy.v2v_throughput(100e3, 1.0) == 0.0
    assert phy.v2v_throughput(100e3, 0.2) == pytest.approx(80e3)


def test_v2n_sinr_examples():
    s2 = 1e-12
    ch = _channel(direct=[[1.0, 1.0]], cross=np.ones((1, 1, 2)), v2n_to_v2v=[[0.0], [0.0]],
                  v2v_to_bs=[[2 * s2, 2 * s2]], v2n_to_bs=[s2, s2])
    a = phy.Allocation([1], [1.0], 1.0)
    assert phy.v2n_sinr(ch, a, 0, s2) == pytest.approx(1.0)
    assert phy.v2n_sinr(ch, a, 1, s2) == pytest.approx(1 / 3)
    a2 = phy.Allocation([1], [2.0], 1.0)
    assert phy.v2n_sinr(ch, a2, 1, s2) < phy.v2n_sinr(ch, a, 1, s2)


def test_v2v_sinr_examples():
    s2 = 1e-12
    ch = _channel(direct=[[s2], [s2]], cross=np.full((2, 2, 1), s2), v2n_to_v2v=[[0.0, 0.0]],
                  v2v_to_bs=[[1.0], [1.0]], v2n_to_bs=[1.0])
    alone = phy.Allocation([0, 0], [1.0, 0.0], 1.0)
    assert phy.v2v_sinr(ch, alone, 0, s2) == pytest.approx(1.0)
    assert phy.v2v_sinr(ch, alone, 1, s2) == 0.0
    shared = phy.Allocation([0, 0], [1.0, 1.0], 1.0)
    assert phy.v2v_sinr(ch, shared, 0, s2) < phy.v2v_sinr(ch, alone, 0, s2)


def _report(v2n, thr, shannon, eps):
    return phy.SlotReport(v2n_sinr=None, v2n_rate_bps=np.asarray(v2n, float), v2v_sinr=None,
                          v2v_eps=np.asarray(eps, float), v2v_rate_bps=None,
                          v2v_shannon_bps=np.asarray(shannon, float), v2v_throughput_bps=np.asarray(thr, float))


def test_reward_examples():
    w = phy.RewardWeights(eps_max=[1e-4, 1e-4, 1e-4, 1e-4])
    z = np.zeros(4)
    assert phy.reward(_report(z, z, z, z), w) == 0.0
    assert phy.reward(_report(z, z, z, [0.1 + 1e-4, 0, 0, 0]), w) == pytest.approx(-0.1)
    assert w.lambda1_for(4) == pytest.approx(1 / 20)


def test_reward_terms():
    w = phy.RewardWeights(eps_max=[1e-3, 1e-3], rate_unit_bps=1e3)
    r = phy.reward(_report([2e3, 4e3], [1e3, 1e3], [2e3, 2e3], [0.0, 0.0]), w)
    assert r == pytest.approx(0.1 * 6 + 0.5)


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_reward_weakly_decreases_past_threshold(e1, e2):
    lo, hi = sorted((e1, e2))
    w = phy.RewardWeights(eps_max=[1e-3, 1e-3])
    rep = lambda e: _report([1e5, 1e5], [1e5, 1e5], [2e5, 2e5], [e, 0.0])
    assert phy.reward(rep(hi), w) <= phy.reward(rep(lo), w)


def test_objective():
    w = phy.RewardWeights(eps_max=[0.1])
    assert phy.objective(_report([5.0], [3.0], [0], [0]), w) == 8.0
    w0 = phy.RewardWeights(eps_max=[0.1], omega2=0.0)
    assert phy.objective(_report([5.0], [3.0], [0], [0]), w0) == 5.0
    assert phy.objective(_report([0.0], [0.0], [0], [0]), w) == 0.0


def test_reward_weights_validation():
    with pytest.raises(ValueError):
        phy.RewardWeights(eps_max=[0.0])
    with pytest.raises(ValueError):
        phy.RewardWeights(eps_max=[0.1], lambda3=-1.0)


@pytest.mark.parametrize("m", [90, 180, 360])
def test_roundtrip_recovers_coding_rate(m):
    bw = m / DT
    for gamma in np.geomspace(0.1, 100, 25):
        eps = phy.decoding_error_prob(gamma, bw, DT, 100)
        if 1e-300 < eps < 1 - 1e-12:
            assert phy.v2v_rate_fbl(gamma, eps, bw, DT) == pytest.approx(100 / DT, rel=1e-6)


def test_batched_evaluate_matches_per_slot():
    rng = np.random.default_rng(0)
    s, k, n = 5, 3, 2
    args = (rng.uniform(1e-9, 1e-7, (s, k, n)), rng.uniform(1e-12, 1e-10, (s, k, k, n)),
            rng.uniform(1e-13, 1e-11, (s, n, k)), rng.uniform(1e-13, 1e-11, (s, k, n)), rng.uniform(1e-11, 1e-9, (s, n)))
    bands = rng.integers(n, size=(s, k))
    powers = rng.uniform(0.01, 0.2, (s, k))
    w = phy.RewardWeights(eps_max=[1e-4] * k, rate_unit_bps=1e3)
    kw = dict(p_v2n_w=0.2, noise_w=1e-14, bandwidth_hz=B, latency_s=DT, payload_bits=100, weights=w)
    batch = phy.evaluate(*args, bands, powers, **kw)
    for i in range(s):
        one = phy.evaluate(*(a[i] for a in args), bands[i], powers[i], **kw)
        assert one.reward == pytest.approx(batch.reward[i], rel=1e-12)
        np.testing.assert_allclose(one.v2v_sinr, batch.v2v_sinr[i], rtol=1e-12)
