import numpy as np
import pytest

from neuropol import autodiff as ad
from neuropol.grids import Grid
from neuropol.model import ModelConfig, ModelError, NeuroPolModel

GRID = Grid((17, 17), ((-1.0, 1.0), (-1.0, 1.0)))
CFG = ModelConfig(d_u=6, n_layers=3, wavelet_family="db2", wavelet_levels=2)


def small_model(seed=0, **kw):
    cfg = ModelConfig(**{**CFG.to_dict(), **kw})
    return NeuroPolModel(cfg, GRID, seed=seed)


def test_forward_shape_and_finiteness():
    m = small_model()
    a = np.random.default_rng(0).standard_normal((5, 1, 17, 17))
    out = m.forward(a)
    assert out.value.shape == (5, 1, 17, 17)
    assert np.all(np.isfinite(out.value))


def test_parameter_count_matches_formula():
    for kw in [
        dict(d_u=6, n_layers=3),
        dict(d_u=6, n_layers=3, vsn_after_uplift=True),
        dict(d_u=5, n_layers=4),
    ]:
        cfg = ModelConfig(wavelet_family="db2", wavelet_levels=2, **kw)
        m = NeuroPolModel(cfg, GRID, seed=0)
        assert m.parameter_count() == m.expected_parameter_count()


def test_vanilla_degeneracy_exact():
    # thresholds at -inf reproduce the continuous network bit-for-bit
    gen = np.random.default_rng(1)
    for draw in range(3):
        m = small_model(seed=draw)
        m.disable_thresholds()
        cont = small_model(seed=draw, spiking_layers=(False,) * 3)
        for name, p in m.params.items():
            if name in cont.params:
                cont.params[name].value = p.value.copy()
        a = gen.standard_normal((2, 1, 17, 17))
        out_spiking = m.forward(a).value
        out_cont = cont.forward(a).value
        assert np.abs(out_spiking - out_cont).max() <= 1e-12


def test_layer_preactivation_linearity():
    # the wavelet-kernel plus pointwise path of one layer, before activation,
    # is linear in the layer input
    m = small_model(seed=4)
    gen = np.random.default_rng(3)
    x = gen.standard_normal((2, 6, 17, 17))

    def preact(v):
        t = ad.Tensor(v)
        c = ad.dwt_flat(t, m.plan)
        mixed = ad.coeff_mix(c[..., : m.plan.n_retained], m.params["layer1.R"])
        zeros = ad.Tensor(np.zeros(c.value.shape[:-1] + (m.plan.n_coeff - m.plan.n_retained,)))
        k = ad.idwt_flat(ad.concat([mixed, zeros], axis=-1), m.plan)
        w = ad.channel_affine(t, m.params["layer1.W.w"])
        return (k + w).value

    y1 = preact(x)
    y3 = preact(3.0 * x)
    ysum = preact(x + 0.5 * x[::-1])
    assert np.abs(y3 - 3.0 * y1).max() < 1e-10
    assert np.abs(ysum - (y1 + 0.5 * preact(x[::-1]))).max() < 1e-10


def test_time_broadcast_input():
    grid = Grid((17,), ((0.0, 1.0),), (17, 1.0))
    cfg = ModelConfig(d_u=4, n_layers=3, wavelet_family="db2", wavelet_levels=2)
    m = NeuroPolModel(cfg, grid, seed=0)
    from neuropol.grids import Field

    spatial = Field(grid.spatial_grid(), np.ones((1, 17)))
    out = m.forward([spatial])
    assert out.value.shape == (1, 1, 17, 17)


def test_grid_mismatch_rejected():
    m = small_model()
    bad = np.zeros((1, 1, 9, 9))
    with pytest.raises(ModelError):
        m.forward(bad)
    other = Grid((9, 9), ((-1.0, 1.0), (-1.0, 1.0)))
    with pytest.raises(ModelError):
        m.check_grid(other)


def test_save_load_bitwise(tmp_path):
    m = small_model(seed=5)
    a = np.random.default_rng(2).standard_normal((2, 1, 17, 17))
    out = m.forward(a).value
    path = str(tmp_path / "ck")
    m.save(path)
    m2 = NeuroPolModel.load(path)
    assert np.array_equal(m2.forward(a).value, out)
    for name in m.params:
        assert np.array_equal(m.params[name].value, m2.params[name].value)


def test_load_rejects_corruption(tmp_path):
    m = small_model()
    path = str(tmp_path / "ck")
    m.save(path)
    wb = tmp_path / "ck" / "weights.bin"
    raw = wb.read_bytes()
    wb.write_bytes(b"BADMAGIC" + raw[8:])
    with pytest.raises(ModelError):
        NeuroPolModel.load(path)
    wb.write_bytes(raw[:-16])
    with pytest.raises(ModelError):
        NeuroPolModel.load(path)


def test_instrumented_run_reports():
    m = small_model()
    a = np.random.default_rng(4).standard_normal((3, 1, 17, 17))
    out, rep = m.forward(a, instrument=True)
    assert len(rep.activities) == 2  # spiking sites on layers 0 and 1
    for _, act in rep.activities:
        assert 0.0 <= act <= 1.0
    assert rep.event_macs <= rep.dense_macs


def test_event_macs_equal_dense_when_all_fire():
    m = small_model()
    m.disable_thresholds()
    a = np.abs(np.random.default_rng(5).standard_normal((2, 1, 17, 17))) + 0.1
    _, rep = m.forward(a, instrument=True)
    assert all(act == 1.0 for _, act in rep.activities)
    assert rep.event_macs == rep.dense_macs


def test_silenced_layer_zeroes_downstream_events():
    # layer0 thresholds +inf: its output is all zeros, so layer1's consumption
    # of that activation contributes zero event MACs.
    m = small_model()
    m2 = small_model()
    m.params["layer0.vsn.thresholds"].value[:] = np.inf
    a = np.random.default_rng(6).standard_normal((2, 1, 17, 17))
    _, rep = m.forward(a, instrument=True)
    _, rep2 = m2.forward(a, instrument=True)
    assert rep.event_macs < rep2.event_macs
    assert dict(rep.activities)["layer0.vsn"] == 0.0
