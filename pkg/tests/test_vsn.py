import numpy as np
import pytest

from neuropol import autodiff as ad
from neuropol import vsn
from neuropol.autodiff import Tensor
from neuropol.vsn import VsnError, VsnLayer, VsnState


def make_layer(threshold, width=4, **kw):
    return VsnLayer.create(width, threshold_init=threshold, **kw)


def test_plus_inf_threshold_never_fires():
    layer = make_layer(np.inf, activation="tanh")
    y, state = vsn.vsn_apply(layer, Tensor(np.ones(4)))
    assert np.array_equal(y.value, np.zeros(4))
    assert vsn.spiking_activity(state) == 0.0


def test_minus_inf_threshold_always_fires():
    layer = make_layer(-np.inf, activation="tanh")
    z = np.array([0.5, -1.0, 2.0, 0.0])
    y, state = vsn.vsn_apply(layer, Tensor(z))
    assert np.array_equal(y.value, np.tanh(z))
    assert vsn.spiking_activity(state) == 1.0


def test_hand_recurrence_two_steps():
    # beta=0.5, threshold=1.4, z=1 twice: step1 M=1 (<1.4) -> 0, step2 M=1.5 -> sigma(1)
    layer = make_layer(1.4, width=1, leak_init=0.5, activation="tanh")
    state = VsnState()
    z = Tensor(np.array([1.0]))
    y1, state = vsn.vsn_step(layer, state, z)
    assert y1.value[0] == 0.0
    y2, state = vsn.vsn_step(layer, state, z)
    assert y2.value[0] == pytest.approx(np.tanh(1.0))
    assert state.membrane.value[0] == pytest.approx(1.5)
    assert vsn.spiking_activity(state) == 0.5


def test_gating_identity_exact():
    layer = make_layer(0.1, width=8, activation="gelu")
    gen = np.random.default_rng(0)
    z = gen.standard_normal(8)
    y, state = vsn.vsn_apply(layer, Tensor(z))
    gate = (z >= layer.thresholds.value).astype(float)
    assert np.array_equal(y.value, gate * ad.gelu(Tensor(z)).value)


def test_reset_semantics():
    layer = make_layer(0.5, width=2, leak_init=0.9)
    state = VsnState()
    _, state = vsn.vsn_step(layer, state, Tensor(np.array([1.0, -1.0])))
    counts = (state.fire_count, state.total_count)
    vsn.reset(state)
    assert state.membrane is None
    assert (state.fire_count, state.total_count) == counts
    vsn.reset(state)  # idempotent
    assert state.membrane is None
    vsn.reset(state, clear_counters=True)
    assert state.total_count == 0
    assert state.activity() is None
    with pytest.raises(VsnError):
        vsn.spiking_activity(state)


def test_reset_then_step_equals_first_step():
    layer = make_layer(0.2, width=3, leak_init=0.7)
    z = Tensor(np.array([0.5, 0.1, -0.3]))
    y1, _ = vsn.vsn_step(layer, VsnState(), z)
    state = VsnState()
    _, state = vsn.vsn_step(layer, state, z)
    vsn.reset(state)
    y2, _ = vsn.vsn_step(layer, state, z)
    assert np.array_equal(y1.value, y2.value)


def test_activity_monotone_in_threshold_shift():
    gen = np.random.default_rng(4)
    z = Tensor(gen.standard_normal((16, 32)))
    base = gen.standard_normal(32) * 0.1
    acts = []
    for shift in np.linspace(-2.0, 2.0, 10):
        layer = VsnLayer.create(32, threshold_init=base + shift)
        _, state = vsn.vsn_apply(layer, z, channel_axis=-1)
        acts.append(vsn.spiking_activity(state))
    assert all(a >= b - 1e-12 for a, b in zip(acts, acts[1:]))
    assert all(0.0 <= a <= 1.0 for a in acts)


def test_width_mismatch_rejected():
    layer = make_layer(0.0, width=4)
    with pytest.raises(VsnError):
        vsn.vsn_step(layer, VsnState(), Tensor(np.ones(5)))


def test_invalid_layer_params():
    with pytest.raises(VsnError):
        VsnLayer.create(4, leak_init=1.5)
    with pytest.raises(VsnError):
        VsnLayer.create(0)
    with pytest.raises(VsnError):
        VsnLayer.create(4, n_spike_steps=0)


def test_mac_counter_semantics():
    c = vsn.MacCounter()
    dense_input = np.ones((2, 3, 5))
    c.add_pointwise(dense_input, out_channels=4)
    assert c.dense == 3 * 4 * 10
    assert c.event == c.dense  # all nonzero
    sparse_input = dense_input.copy()
    sparse_input[:, 1, :] = 0.0
    c2 = vsn.MacCounter()
    c2.add_pointwise(sparse_input, out_channels=4)
    assert c2.event == 2 * 4 * 10
    assert c2.event < c2.dense
    c3 = vsn.MacCounter()
    c3.add_linear(np.zeros((4, 4)), macs_per_nonzero=7.0)
    assert c3.dense == 112 and c3.event == 0
