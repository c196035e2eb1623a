import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from xv2x import io
from xv2x.config import load_config, validate_config
from xv2x.errors import SchemaError
from xv2x.metrics import availability_curve, complexity_report, ecdf, emit_cdf, load_cdf, network_availability
from xv2x.nn import build_mlp, param_count_for_input


def test_table_roundtrip(tmp_path):
    data = np.random.default_rng(0).normal(size=(7, 3))
    io.write_table(tmp_path / "t.tab", data, ["a", "b", "c"], meta={"k": 2})
    back, header = io.read_table(tmp_path / "t.tab")
    np.testing.assert_array_equal(back, data)
    assert header["columns"] == ["a", "b", "c"] and header["meta"] == {"k": 2}


def test_table_layout_bytes():
    raw = io.table_bytes([[1.0, 2.0]], ["x", "y"])
    assert raw[:8] == b"XV2XTAB\x00"
    version, hlen = struct.unpack("<II", raw[8:16])
    assert version == 1
    assert np.frombuffer(raw[16 + hlen:], "<f8").tolist() == [1.0, 2.0]


def test_table_rejects_bad_input(tmp_path):
    with pytest.raises(ValueError):
        io.table_bytes(np.zeros((2, 3)), ["a"])
    (tmp_path / "bad.tab").write_bytes(b"nope" * 8)
    with pytest.raises(ValueError):
        io.read_table(tmp_path / "bad.tab")
    raw = io.table_bytes(np.zeros((2, 2)), ["a", "b"])
    (tmp_path / "short.tab").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        io.read_table(tmp_path / "short.tab")


def test_csv_roundtrip_is_exact(tmp_path):
    vals = [0.1, 1 / 3, 1e-300, 12345.678901234567]
    io.write_csv(tmp_path / "c.csv", ["v", "i"], [[v, np.int64(i)] for i, v in enumerate(vals)])
    header, rows = io.read_csv(tmp_path / "c.csv")
    assert header == ["v", "i"]
    assert [float(r[0]) for r in rows] == vals
    assert not list(tmp_path.glob(".*.tmp"))


def test_checkpoint_roundtrip(tmp_path):
    net = build_mlp(6, 4, 3)
    io.save_net(tmp_path / "a.ckpt", net, 11, {"agent": 0})
    back, header = io.load_net(tmp_path / "a.ckpt")
    assert back.param_hash() == net.param_hash()
    x = np.random.default_rng(0).normal(size=(3, 6))
    np.testing.assert_array_equal(back(x), net(x))


def test_ecdf_examples(tmp_path):
    v, p = ecdf([3, 1, 2])
    assert v.tolist() == [1, 2, 3]
    np.testing.assert_allclose(p, [1 / 3, 2 / 3, 1])
    v, p = ecdf([2, 2])
    assert v.tolist() == [2] and p.tolist() == [1.0]
    with pytest.raises(ValueError):
        ecdf([])
    emit_cdf([5.0, 1.0, 1.0, 3.0], tmp_path / "cdf.csv")
    v, p = load_cdf(tmp_path / "cdf.csv")
    assert v.tolist() == [1.0, 3.0, 5.0] and p[-1] == 1.0


def test_load_cdf_rejects_non_monotone(tmp_path):
    io.write_csv(tmp_path / "x.csv", ["value", "cumulative_probability"], [[1.0, 0.6], [2.0, 0.4]])
    with pytest.raises(ValueError):
        load_cdf(tmp_path / "x.csv")


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50))
def test_ecdf_monotone(xs):
    v, p = ecdf(xs)
    assert np.all(np.diff(v) > 0) and np.all(np.diff(p) > 0) and p[-1] == pytest.approx(1.0)


def test_availability():
    assert network_availability(np.zeros((5, 3)), 1e-5) == 100.0
    eps = np.array([[1e-5, 1e-3], [1e-6, 1e-6], [0.5, 0.0]])
    assert network_availability(eps, 1e-4) == pytest.approx(100 / 3)
    curve = availability_curve(np.random.default_rng(0).random((100, 4)) ** 8, np.geomspace(1e-6, 1, 13))
    assert all(b >= a for a, b in zip(curve, curve[1:]))


class _Ens:
    def __init__(self, l, m=16):
        self.input_dim = l
        self.m = m

    def param_count(self):
        return 4 * param_count_for_input(self.input_dim, self.m)


def test_complexity_report():
    rows, ratios = complexity_report(_Ens(24), _Ens(19), {"Original-MADRL": [1.0, 3.0, 2.0]})
    assert rows[0]["n_features"] == 24 and rows[1]["n_features"] == 19
    assert rows[0]["median_update_s"] == 2.0 and np.isnan(rows[1]["median_update_s"])
    assert ratios["feature_reduction"] == pytest.approx(5 / 24)
    assert ratios["param_reduction"] == pytest.approx(1 - rows[1]["param_count"] / rows[0]["param_count"])
    assert 0.32 <= ratios["param_reduction"] <= 0.38
    _, same = complexity_report(_Ens(24), _Ens(24))
    assert same["param_reduction"] == 0.0


BASE = {"env": {"n_v2v": 2, "n_v2n": 2, "eps_max": [1e-4]}}


def test_config_defaults():
    cfg = validate_config(BASE)
    assert cfg.train.episodes == 300 and cfg.eval.episodes == 50
    assert cfg.select.delta == 2.0
    assert cfg.env_config().speed_mps == pytest.approx(60 / 3.6)


def test_missing_eps_max_is_schema_error():
    with pytest.raises(SchemaError) as exc:
        validate_config({"env": {"n_v2v": 2, "n_v2n": 2}})
    assert "env.eps_max" in exc.value.keys


def test_unknown_key_is_schema_error():
    with pytest.raises(SchemaError) as exc:
        validate_config({**BASE, "train": {"episdoes": 5}})
    assert "train.episdoes" in exc.value.keys


def test_eps_max_length_checked():
    with pytest.raises(SchemaError):
        validate_config({"env": {"n_v2v": 3, "n_v2n": 2, "eps_max": [1e-4, 1e-4]}})


def test_load_config_overrides(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('seed = 1\n[env]\neps_max = [1e-4]\n[select]\ndelta_fraction = 0.02\n')
    cfg = load_config(p, seed=5, out_dir=str(tmp_path / "o"), delta=3.0)
    assert cfg.seed == 5 and cfg.select.delta == 3.0 and cfg.select.delta_fraction is None
    assert load_config(p).select.delta_fraction == 0.02
    assert load_config(p, scale="paper").train.episodes == 4000
    p.write_text("seed = [\n")
    with pytest.raises(SchemaError):
        load_config(p)


def test_with_overrides_revalidates():
    cfg = validate_config(BASE)
    assert cfg.with_overrides(**{"train.episodes": 7}).train.episodes == 7
    with pytest.raises(SchemaError):
        cfg.with_overrides(**{"train.episodes": 0})
