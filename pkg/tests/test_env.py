import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from xv2x.env import (ChannelMatrix, EnvConfig, _rayleigh_power, coherence_time, episode_channels,
                      init_topology, pathloss_v2n_db, pathloss_winner_b1_db, sample_channels, step_mobility)
from xv2x._rng import make_rng
from xv2x.errors import ConfigurationError, DomainError


def test_topology_counts():
    w = init_topology(EnvConfig(n_v2v=4, n_v2n=4), 7)
    assert len(w.v2n_links) == 4
    assert w.v2v_pairs.shape == (4, 2)
    assert not w.virtual.any()


def test_virtual_pairs_when_fewer_v2v_than_v2n():
    w = init_topology(EnvConfig(n_v2v=2, n_v2n=4), 3)
    assert w.n_real_pairs == 2
    assert w.virtual.tolist() == [False, False, True, True]
    assert (w.v2v_pairs[2:] == -1).all()


def test_topology_deterministic():
    cfg = EnvConfig()
    assert init_topology(cfg, 11).same_as(init_topology(cfg, 11))
    assert not init_topology(cfg, 11).same_as(init_topology(cfg, 12))


def test_positions_inside_area_and_unit_headings():
    cfg = EnvConfig(n_v2v=8, n_v2n=8)
    w = init_topology(cfg, 5)
    for _ in range(3):
        w = step_mobility(w, 0.5)
    assert np.all(w.positions >= 0) and np.all(w.positions[:, 0] < cfg.area_width_m)
    assert np.all(w.positions[:, 1] < cfg.area_height_m)
    np.testing.assert_allclose(np.linalg.norm(w.headings, axis=1), 1.0)


def test_pairs_are_nearest_free_neighbours():
    cfg = EnvConfig(n_v2v=3, n_v2n=2)
    w = init_topology(cfg, 1)
    d = np.linalg.norm(w.positions[w.v2v_pairs[:, 0]] - w.positions[w.v2v_pairs[:, 1]], axis=1)
    # neighbours on a single lane are at most a few headways apart
    assert np.all(d < 200)


def test_too_many_vehicles_is_config_error():
    cfg = EnvConfig(n_v2v=400, n_v2n=400, area_width_m=100, area_height_m=100, n_roads_x=1, n_roads_y=1)
    with pytest.raises(ConfigurationError):
        init_topology(cfg, 0)


def test_mobility_kinematics_and_wrap():
    cfg = EnvConfig(speed_mps=10.0)
    w = init_topology(cfg, 2)
    w2 = step_mobility(w, 1e-3)
    moved = np.abs(w2.positions - w.positions).sum(axis=1)
    np.testing.assert_allclose(moved, 0.01, atol=1e-9)
    assert w2.slot_index == 1
    edge = w.positions.copy()
    edge[0] = (cfg.area_width_m - 0.001, edge[0, 1])
    from dataclasses import replace
    wx = replace(w, positions=edge, headings=np.tile([1.0, 0.0], (len(edge), 1)))
    assert step_mobility(wx, 1e-3).positions[0, 0] < 1.0


def test_zero_speed_keeps_positions():
    w = init_topology(EnvConfig(speed_mps=0.0, min_spacing_m=5.0), 2)
    np.testing.assert_array_equal(step_mobility(w, 1e-3).positions, w.positions)


def test_step_rejects_nonpositive_dt():
    with pytest.raises(DomainError):
        step_mobility(init_topology(EnvConfig(), 0), 0.0)


def test_pathloss_values():
    assert pathloss_v2n_db(1.0) == pytest.approx(128.1)
    assert pathloss_winner_b1_db(100.0, 2e9) == pytest.approx(22.7 * 2 + 41.0 + 20 * np.log10(0.4))
    assert pathloss_winner_b1_db(100.0, 2e9) == pytest.approx(78.44, abs=5e-3)


@given(st.floats(1.0, 5000.0), st.floats(1.001, 3.0))
def test_pathloss_increases_with_distance(d, factor):
    assert pathloss_winner_b1_db(d * factor, 2e9) > pathloss_winner_b1_db(d, 2e9)
    assert pathloss_v2n_db(d * factor / 1e3) > pathloss_v2n_db(d / 1e3)


def test_coherence_time():
    assert coherence_time(2e9, 60 / 3.6) == pytest.approx(3.81e-3, rel=2e-3)
    assert coherence_time(2e9, 120 / 3.6) == pytest.approx(1.90e-3, rel=3e-3)
    with pytest.raises(DomainError):
        coherence_time(2e9, 0.0)


@given(st.floats(0.1, 120.0))
def test_coherence_exceeds_slot(v_kmh):
    assert coherence_time(2e9, v_kmh / 3.6) > 1e-3


def test_rayleigh_power_is_unit_exponential():
    x = _rayleigh_power(make_rng(0, 1), (100_000,))
    assert abs(x.mean() - 1.0) < 0.02
    assert stats.kstest(x[:20_000], "expon").pvalue > 0.01


def test_channels_positive_finite_and_deterministic():
    cfg = EnvConfig(n_v2v=2, n_v2n=4)
    w = init_topology(cfg, 4)
    a, b = sample_channels(w, cfg, 9), sample_channels(w, cfg, 9)
    for name in ("direct", "cross", "v2n_to_v2v", "v2v_to_bs", "v2n_to_bs"):
        g = getattr(a, name)
        assert np.all(np.isfinite(g)) and np.all(g > 0)
        np.testing.assert_array_equal(g, getattr(b, name))
    assert a.direct.shape == (4, 4)
    np.testing.assert_array_equal(a.direct[2:], cfg.gain_floor)
    act = a.active()
    assert act.direct.shape == (2, 4) and act.cross.shape == (2, 2, 4)


def test_shadowing_fixed_within_episode_fading_changes():
    cfg = EnvConfig(n_v2v=2, n_v2n=2, speed_mps=0.0)
    chans = list(episode_channels(cfg, 1, 2, 3))
    assert len(chans) == 4
    assert not np.array_equal(chans[0].direct, chans[1].direct)


def test_flatten_roundtrip():
    cfg = EnvConfig(n_v2v=3, n_v2n=2)
    ch = next(episode_channels(cfg, 1, 2, 0))
    back = ChannelMatrix.from_flat(ch.flatten(), 3, 2)
    for name in ("direct", "cross", "v2n_to_v2v", "v2v_to_bs", "v2n_to_bs"):
        np.testing.assert_array_equal(getattr(back, name), getattr(ch, name))
    assert len(ChannelMatrix.flat_names(3, 2)) == ChannelMatrix.flat_size(3, 2) == ch.flatten().size


def test_config_validation():
    with pytest.raises(ConfigurationError):
        EnvConfig(n_v2v=0)
    with pytest.raises(ConfigurationError):
        EnvConfig(bandwidth_hz=-1.0)
