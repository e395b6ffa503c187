"""The spiking wavelet neural operator.

Architecture: pointwise uplift of the input field (plus normalized coordinate
channels) to a latent width, ``n`` iterative layers that mix the deepest-level
wavelet coefficients with learnable per-coefficient channel kernels alongside
a pointwise linear path, then a two-layer pointwise projection back to the
output field.  Spiking activations gate all but the final iterative layer by
default; with every threshold at ``-inf`` the network reduces exactly to its
continuous (non-spiking) counterpart.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import rng as _rng
from .autodiff import SurrogateSpec, Tensor
from .grids import Field, Grid
from .vsn import MacCounter, VsnLayer, VsnState, vsn_apply
from .wavelets import WaveletSpec, get_plan

CHECKPOINT_MAGIC = b"NPOLCK01"


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_u: int = 32
    n_layers: int = 4
    spiking_layers: tuple[bool, ...] | None = None  # default: all but the last
    vsn_after_uplift: bool = False
    wavelet_family: str = "db4"
    wavelet_levels: int = 2
    wavelet_boundary: str = "symmetric"
    activation: str = "gelu"
    proj_hidden: int | None = None
    in_channels: int = 1
    out_channels: int = 1
    input_scale: float = 1.0
    output_scale: float = 1.0
    threshold_init: float = 0.0
    threshold_jitter: float = 0.01
    leak_init: float = 0.9
    surrogate_slope: float = 25.0
    n_spike_steps: int = 1
    trainable_thresholds: bool = True

    def __post_init__(self):
        if self.n_layers < 1 or self.d_u < 1:
            raise ModelError("need n_layers >= 1 and d_u >= 1")
        if self.spiking_layers is not None and len(self.spiking_layers) != self.n_layers:
            raise ModelError("spiking_layers length must equal n_layers")

    def spiking_flags(self) -> tuple[bool, ...]:
        if self.spiking_layers is not None:
            return tuple(bool(s) for s in self.spiking_layers)
        return tuple([True] * (self.n_layers - 1) + [False])

    def hidden_width(self) -> int:
        return self.proj_hidden if self.proj_hidden else 2 * self.d_u

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spiking_layers"] = list(self.spiking_flags())
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        if d.get("spiking_layers") is not None:
            d["spiking_layers"] = tuple(bool(x) for x in d["spiking_layers"])
        return ModelConfig(**d)


@dataclass
class RunReport:
    """Instrumentation of one forward pass."""

    activities: list  # per spiking site: (name, activity in [0,1])
    dense_macs: int
    event_macs: int


class NeuroPolModel:
    """Operator network bound to a fixed evaluation grid."""

    def __init__(self, config: ModelConfig, grid: Grid, seed: int = 0):
        if len(grid.shape) != 2:
            raise ModelError("the network operates on 2D (space-time or planar) grids")
        self.config = config
        self.grid = grid
        self.seed = int(seed)
        self.wavelet_spec = WaveletSpec(
            config.wavelet_family, config.wavelet_levels, config.wavelet_boundary
        )
        self.plan = get_plan(self.wavelet_spec, grid.shape)
        self._coords = self._coordinate_channels()
        self.params: dict[str, Tensor] = {}
        self._vsn_layers: dict[str, VsnLayer] = {}
        self._init_params()

    # -- construction --------------------------------------------------------

    def _coordinate_channels(self) -> np.ndarray:
        axes = self.grid.axis_coords()
        bounds = self.grid.axis_bounds()
        mesh = np.meshgrid(*axes, indexing="ij")
        chans = [
            (m - lo) / (hi - lo) for m, (lo, hi) in zip(mesh, bounds)
        ]
        return np.stack(chans)  # (n_axes, H, W)

    def _init_params(self):
        cfg = self.config
        d = cfg.d_u
        k_ret = self.plan.n_retained
        c_in = cfg.in_channels + self._coords.shape[0]
        p_h = cfg.hidden_width()

        def xavier(gen, fin, fout, shape):
            return _rng.normal(gen, shape) * np.sqrt(2.0 / (fin + fout))

        gen = _rng.substream(self.seed, 0)
        self.params["uplift.w"] = ad.parameter(xavier(gen, c_in, d, (c_in, d)))
        self.params["uplift.b"] = ad.parameter(np.zeros(d))
        sur = SurrogateSpec(slope=cfg.surrogate_slope)

        def make_vsn(name, gen):
            jitter = cfg.threshold_jitter * gen.random(d)
            layer = VsnLayer.create(
                d,
                threshold_init=cfg.threshold_init + jitter,
                leak_init=cfg.leak_init,
                activation=cfg.activation,
                n_spike_steps=cfg.n_spike_steps,
                surrogate=sur,
                trainable=cfg.trainable_thresholds,
            )
            self._vsn_layers[name] = layer
            self.params[f"{name}.thresholds"] = layer.thresholds
            self.params[f"{name}.leak"] = layer.leak

        if cfg.vsn_after_uplift:
            make_vsn("uplift_vsn", _rng.substream(self.seed, 1))
        flags = cfg.spiking_flags()
        for i in range(cfg.n_layers):
            gen = _rng.substream(self.seed, 10 + i)
            self.params[f"layer{i}.R"] = ad.parameter(
                gen.random((d, d, k_ret)) / (d * d)
            )
            self.params[f"layer{i}.W.w"] = ad.parameter(xavier(gen, d, d, (d, d)))
            self.params[f"layer{i}.W.b"] = ad.parameter(np.zeros(d))
            if flags[i]:
                make_vsn(f"layer{i}.vsn", gen)
        gen = _rng.substream(self.seed, 2)
        self.params["proj1.w"] = ad.parameter(xavier(gen, d, p_h, (d, p_h)))
        self.params["proj1.b"] = ad.parameter(np.zeros(p_h))
        self.params["proj2.w"] = ad.parameter(xavier(gen, p_h, cfg.out_channels, (p_h, cfg.out_channels)))
        self.params["proj2.b"] = ad.parameter(np.zeros(cfg.out_channels))

    def parameter_names(self) -> list[str]:
        return list(self.params.keys())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def expected_parameter_count(self) -> int:
        """Closed-form count; kept alongside the dict for auditability.

        uplift: (c_in + axes) d + d; per layer: d^2 K_ret + d^2 + d;
        per spiking site: d + 1; projection: d p + p + p c_out + c_out.
        """
        cfg = self.config
        d, k = cfg.d_u, self.plan.n_retained
        c_in = cfg.in_channels + len(self.grid.shape)
        p_h = cfg.hidden_width()
        n_vsn = sum(cfg.spiking_flags()) + (1 if cfg.vsn_after_uplift else 0)
        return (
            c_in * d + d
            + cfg.n_layers * (d * d * k + d * d + d)
            + n_vsn * (d + 1)
            + d * p_h + p_h + p_h * cfg.out_channels + cfg.out_channels
        )

    # -- vanilla degeneracy ---------------------------------------------------

    def disable_thresholds(self):
        """Set every threshold to -inf: the exact continuous-network mode."""
        for name, layer in self._vsn_layers.items():
            layer.thresholds.value[:] = -np.inf

    # -- forward --------------------------------------------------------------

    def _prepare_inputs(self, a) -> np.ndarray:
        """Accepts (B, C, *grid.shape) arrays, Field lists, or spatial-only
        fields for time-dependent problems (broadcast along time)."""
        if isinstance(a, Field):
            a = [a]
        if isinstance(a, (list, tuple)):
            arrs = []
            for f in a:
                v = f.values
                if v.shape[1:] != self.grid.shape:
                    if self.grid.time_axis is not None and v.shape[1:] == self.grid.spatial_shape:
                        v = np.repeat(v[..., None], self.grid.time_axis[0], axis=-1)
                    else:
                        raise ModelError(
                            f"input field shape {v.shape[1:]} does not match model grid {self.grid.shape}"
                        )
                arrs.append(v)
            a = np.stack(arrs)
        a = np.asarray(a, dtype=np.float64)
        if a.ndim == len(self.grid.shape) + 1:
            a = a[None]
        if a.shape[1] != self.config.in_channels or a.shape[2:] != self.grid.shape:
            raise ModelError(
                f"input batch shape {a.shape} incompatible with grid {self.grid.shape}"
            )
        return a

    def forward(self, a, instrument: bool = False):
        """Map input fields to predicted solution fields.

        Returns the output Tensor (B, out_channels, H, W); with
        ``instrument=True`` returns (output, RunReport).
        """
        cfg = self.config
        a = self._prepare_inputs(a)
        B = a.shape[0]
        mac = MacCounter()
        activities = []

        coords = np.broadcast_to(self._coords[None], (B,) + self._coords.shape)
        x_in = np.concatenate([a * cfg.input_scale, coords], axis=1)
        x = Tensor(x_in)
        if instrument:
            # The uplift consumes raw inputs and coordinates, not gated
            # activations, so it is dense work in both accountings.
            mac.add_dense(x_in.size, cfg.d_u)
        x = ad.channel_affine(x, self.params["uplift.w"], self.params["uplift.b"])

        def spike(name, x):
            layer = self._vsn_layers[name]
            y, state = vsn_apply(layer, x, channel_axis=1)
            if instrument:
                activities.append((name, state.fire_count / state.total_count))
            return y

        if cfg.vsn_after_uplift:
            x = spike("uplift_vsn", x)

        flags = cfg.spiking_flags()
        act = ad.ACTIVATIONS[cfg.activation]
        for i in range(cfg.n_layers):
            if instrument:
                # Wavelet branch + pointwise branch consume the layer input.
                branch = cfg.d_u * (self.plan.forward_macs + self.plan.inverse_macs) \
                    + cfg.d_u * cfg.d_u * self.plan.n_retained
                mac.add_linear(x.value, branch * B / x.value.size)
                mac.add_pointwise(x.value, cfg.d_u)
            c = ad.dwt_flat(x, self.plan)
            ret = c[..., : self.plan.n_retained]
            mixed = ad.coeff_mix(ret, self.params[f"layer{i}.R"])
            zeros = Tensor(np.zeros(c.shape[:-1] + (self.plan.n_coeff - self.plan.n_retained,)))
            k_path = ad.idwt_flat(ad.concat([mixed, zeros], axis=-1), self.plan)
            w_path = ad.channel_affine(x, self.params[f"layer{i}.W.w"], self.params[f"layer{i}.W.b"])
            pre = k_path + w_path
            x = spike(f"layer{i}.vsn", pre) if flags[i] else act(pre)

        if instrument:
            mac.add_pointwise(x.value, cfg.hidden_width())
        h = ad.gelu(ad.channel_affine(x, self.params["proj1.w"], self.params["proj1.b"]))
        if instrument:
            mac.add_pointwise(h.value, cfg.out_channels)
        out = ad.channel_affine(h, self.params["proj2.w"], self.params["proj2.b"])
        if cfg.output_scale != 1.0:
            out = ad.scale(out, cfg.output_scale)
        if instrument:
            return out, RunReport(activities, mac.dense, mac.event)
        return out

    def predict_fields(self, samples, batch_size: int = 64) -> list[Field]:
        """Convenience inference: Fields in, Fields out (no gradients kept)."""
        out = []
        for i0 in range(0, len(samples), batch_size):
            chunk = samples[i0:i0 + batch_size]
            flds = [s.field if hasattr(s, "field") else s for s in chunk]
            y = self.forward(flds).value
            out.extend(Field(self.grid, y[b]) for b in range(y.shape[0]))
        return out

    # -- checkpointing --------------------------------------------------------

    def save(self, path: str):
        os.makedirs(path, exist_ok=True)
        arrays = [
            {"name": n, "shape": list(self.params[n].value.shape)}
            for n in self.parameter_names()
        ]
        manifest = {
            "format": CHECKPOINT_MAGIC.decode("ascii"),
            "version": 1,
            "config": self.config.to_dict(),
            "grid": self.grid.to_dict(),
            "created_seed": self.seed,
            "arrays": arrays,
        }
        with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")
        tmp = os.path.join(path, "weights.bin.tmp")
        with open(tmp, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            for n in self.parameter_names():
                fh.write(self.params[n].value.astype("<f8").tobytes())
        os.replace(tmp, os.path.join(path, "weights.bin"))

    @staticmethod
    def load(path: str) -> "NeuroPolModel":
        try:
            with open(os.path.join(path, "manifest.json"), "r", encoding="utf-8") as fh:
                manifest = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ModelError(f"cannot read checkpoint manifest: {exc}") from exc
        if manifest.get("format") != CHECKPOINT_MAGIC.decode("ascii"):
            raise ModelError("checkpoint manifest has wrong format tag")
        config = ModelConfig.from_dict(manifest["config"])
        grid = Grid.from_dict(manifest["grid"])
        model = NeuroPolModel(config, grid, seed=manifest.get("created_seed", 0))
        with open(os.path.join(path, "weights.bin"), "rb") as fh:
            if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
                raise ModelError("checkpoint weights have wrong magic")
            for entry in manifest["arrays"]:
                name, shape = entry["name"], tuple(entry["shape"])
                if name not in model.params:
                    raise ModelError(f"unexpected array {name!r} in checkpoint")
                n_bytes = int(np.prod(shape)) * 8
                buf = fh.read(n_bytes)
                if len(buf) != n_bytes:
                    raise ModelError("truncated checkpoint weights")
                model.params[name].value = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
            if fh.read(1):
                raise ModelError("trailing bytes in checkpoint weights")
        return model

    def check_grid(self, grid: Grid):
        if grid.to_dict() != self.grid.to_dict():
            raise ModelError(
                "dataset grid does not match the grid this checkpoint was trained on"
            )
