"""Variable spiking neuron layer: event-gated continuous activations.

A VSN accumulates a leaky membrane potential ``M' = beta * M + z`` and emits
``sigma(z)`` only where the potential has reached its threshold, else 0.
There is no membrane reset on firing.  Thresholds and leak can be trained;
the hard gate is differentiable through the fast-sigmoid surrogate.

Sentinels: a threshold of ``-inf`` makes a neuron always fire (the layer
degenerates to the plain continuous activation), ``+inf`` silences it.

The module also owns the sparsity accounting: per-layer firing activity and
dense vs event-driven multiply-accumulate (MAC) counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import SurrogateSpec, Tensor


class VsnError(ValueError):
    pass


@dataclass
class VsnLayer:
    """Parameters of one spiking activation layer of width ``width``."""

    width: int
    thresholds: Tensor
    leak: Tensor
    activation: str = "gelu"
    n_spike_steps: int = 1
    surrogate: SurrogateSpec = field(default_factory=SurrogateSpec)

    def __post_init__(self):
        if self.width < 1:
            raise VsnError("width must be positive")
        if self.activation not in ad.ACTIVATIONS:
            raise VsnError(f"unknown activation {self.activation!r}")
        if self.n_spike_steps < 1:
            raise VsnError("n_spike_steps must be positive")
        if self.thresholds.value.shape != (self.width,):
            raise VsnError("thresholds must have shape (width,)")
        beta = float(self.leak.value)
        if not (0.0 < beta < 1.0):
            raise VsnError("leak must lie in (0, 1)")

    @staticmethod
    def create(width: int, *, threshold_init=0.0, leak_init=0.9, activation="gelu",
               n_spike_steps=1, surrogate: SurrogateSpec | None = None,
               trainable: bool = True) -> "VsnLayer":
        th = np.full(width, float(threshold_init)) if np.isscalar(threshold_init) \
            else np.asarray(threshold_init, dtype=np.float64)
        mk = ad.parameter if trainable else Tensor
        return VsnLayer(
            width=width,
            thresholds=mk(th),
            leak=mk(float(leak_init)),
            activation=activation,
            n_spike_steps=int(n_spike_steps),
            surrogate=surrogate or SurrogateSpec(),
        )


@dataclass
class VsnState:
    """Membrane potential plus firing counters for one evaluation stream."""

    membrane: Tensor | None = None
    fire_count: int = 0
    total_count: int = 0

    def activity(self):
        if self.total_count == 0:
            return None
        return self.fire_count / self.total_count


def reset(state: VsnState, clear_counters: bool = False) -> VsnState:
    """Zero the membrane; optionally clear the firing counters too."""
    state.membrane = None
    if clear_counters:
        state.fire_count = 0
        state.total_count = 0
    return state


def _broadcast_thresholds(layer: VsnLayer, z: Tensor, channel_axis: int) -> Tensor:
    nd = z.value.ndim
    axis = channel_axis % nd
    if z.value.shape[axis] != layer.width:
        raise VsnError(
            f"input width {z.value.shape[axis]} != layer width {layer.width}"
        )
    shape = [1] * nd
    shape[axis] = layer.width
    return ad.reshape(layer.thresholds, tuple(shape))


def vsn_step(layer: VsnLayer, state: VsnState, z: Tensor, channel_axis: int = -1):
    """One presentation of input current ``z``; returns (output, state).

    The membrane update and gate stay on the tape, so gradients flow to the
    thresholds and leak through the surrogate derivative.
    """
    z = ad.as_tensor(z)
    th = _broadcast_thresholds(layer, z, channel_axis)
    m_prev = state.membrane
    if m_prev is None:
        m_new = z
    else:
        if m_prev.value.shape != z.value.shape:
            raise VsnError("membrane/input shape mismatch; reset between runs")
        m_new = ad.mul(layer.leak, m_prev) + z
    gate = ad.spike_threshold(m_new, th, layer.surrogate)
    y = ad.mul(gate, ad.ACTIVATIONS[layer.activation](z))
    fired = int(np.count_nonzero(gate.value))
    new_state = VsnState(
        membrane=m_new,
        fire_count=state.fire_count + fired,
        total_count=state.total_count + gate.value.size,
    )
    return y, new_state


def vsn_apply(layer: VsnLayer, z: Tensor, channel_axis: int = -1):
    """Present ``z`` for ``n_spike_steps`` steps from a fresh membrane.

    Returns (output of the final step, final state).
    """
    state = VsnState()
    y = None
    for _ in range(layer.n_spike_steps):
        y, state = vsn_step(layer, state, z, channel_axis)
    return y, state


def spiking_activity(state: VsnState) -> float:
    """Fraction of neuron evaluations that fired."""
    if state.total_count == 0:
        raise VsnError("no evaluations recorded")
    return state.fire_count / state.total_count


# ---------------------------------------------------------------------------
# MAC accounting
# ---------------------------------------------------------------------------

@dataclass
class MacCounter:
    """Dense vs event-driven multiply counts over an instrumented forward.

    ``dense`` assumes every activation is nonzero; ``event`` counts only the
    multiplies whose activation input is exactly nonzero, which is the work a
    neuromorphic backend would actually execute.
    """

    dense: int = 0
    event: int = 0

    def add_pointwise(self, x: np.ndarray, out_channels: int):
        # (B, C, ...) activations feeding a C -> out_channels map per point.
        n_points = int(np.prod(x.shape) // x.shape[1]) if x.ndim > 1 else 1
        self.dense += int(x.shape[1] * out_channels * n_points)
        self.event += int(np.count_nonzero(x) * out_channels)

    def add_dense(self, n_inputs: int, out_channels: int):
        # Raw (non-activation) inputs: event-driven skipping does not apply.
        macs = int(n_inputs * out_channels)
        self.dense += macs
        self.event += macs

    def add_linear(self, x: np.ndarray, macs_per_nonzero: float, dense_inputs: int | None = None):
        # Generic linear operator consuming x with a fixed fan-out per entry.
        n = x.size if dense_inputs is None else dense_inputs
        self.dense += int(round(n * macs_per_nonzero))
        self.event += int(round(np.count_nonzero(x) * macs_per_nonzero))

    def merge(self, other: "MacCounter"):
        self.dense += other.dense
        self.event += other.event


def mac_count(run_report) -> tuple[int, int]:
    """(dense, event) MAC totals of an instrumented model run."""
    return run_report.dense_macs, run_report.event_macs
