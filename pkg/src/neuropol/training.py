"""Training loop: Adam with a geometric learning-rate schedule.

One epoch resamples the collocation machinery, walks fixed mini-batches, and
logs loss terms, validation accuracy, and spiking activity as line-delimited
JSON.  Wall-clock timings go to a separate sidecar so the log itself is
bitwise reproducible for identical (config, seeds, dataset).
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import physics as ph
from . import rng as _rng
from . import solvers as sv
from .grids import Field, InputSample
from .model import NeuroPolModel
from .physics import LossWeights, StochProjSpec


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 20
    learning_rate: float = 1e-3
    lr_decay: float = 0.75
    lr_decay_every: int = 50
    weight_decay: float = 1e-6
    grad_clip: float = 10.0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    stochproj: StochProjSpec = field(default_factory=StochProjSpec)
    n_collocation: int = 256
    seed: int = 0
    checkpoint_every: int = 0  # 0: only the final checkpoint
    val_fraction: float = 0.1
    divergence_loss: float = 1e6

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainingError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise TrainingError("learning rate must be positive")
        if not (0.0 < self.lr_decay <= 1.0):
            raise TrainingError("lr decay must lie in (0, 1]")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay ** (epoch // self.lr_decay_every)

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("loss_weights"), dict):
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        if isinstance(d.get("stochproj"), dict):
            d["stochproj"] = StochProjSpec(**d["stochproj"])
        return TrainConfig(**d)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @staticmethod
    def for_params(params: dict) -> "AdamState":
        return AdamState(
            m={k: np.zeros_like(p.value) for k, p in params.items()},
            v={k: np.zeros_like(p.value) for k, p in params.items()},
        )


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              weight_decay: float = 0.0, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    """In-place Adam update with decoupled weight decay.

    ``grads`` maps parameter names to gradient arrays; NaN gradients abort.
    Spiking thresholds and leaks are exempt from weight decay (decaying them
    toward zero would silently change the firing regime), and disabled
    thresholds (infinite sentinels) are left untouched entirely.
    """
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name!r}")
        finite = np.isfinite(p.value)
        if not finite.any():
            continue
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        step = lr * m_hat / (np.sqrt(v_hat) + eps)
        if weight_decay and not (name.endswith(".thresholds") or name.endswith(".leak")):
            step = step + lr * weight_decay * p.value
        p.value = np.where(finite, p.value - step, p.value)
    return state


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale gradients to a global norm cap; returns the pre-clip norm."""
    total = np.sqrt(sum(float((g**2).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _truth_fields(samples, grid) -> list[Field]:
    return [sv.solve_truth(s, grid) for s in samples]


def train(
    model: NeuroPolModel,
    problem: str,
    samples: list[InputSample],
    config: TrainConfig,
    *,
    truths: list[Field] | None = None,
    out_dir: str | None = None,
) -> list[dict]:
    """Optimize the model on the sample set; returns the per-epoch log.

    A 10% validation slice (never the test set) is held out for the NMSE
    curve; its reference solutions are computed once up front.  Checkpoints
    and the line-delimited JSON log are written under ``out_dir`` when given.
    """
    grid = model.grid
    n = len(samples)
    if n < 2:
        raise TrainingError("need at least 2 training samples")
    gen = _rng.substream(config.seed, 555)
    order = gen.permutation(n)
    n_val = max(1, int(round(config.val_fraction * n))) if config.val_fraction > 0 else 0
    val_idx = order[:n_val]
    train_idx = order[n_val:]
    if len(train_idx) == 0:
        raise TrainingError("validation slice consumed the whole dataset")
    train_samples = [samples[i] for i in train_idx]
    train_truths = [truths[i] for i in train_idx] if truths is not None else None
    val_samples = [samples[i] for i in val_idx]
    val_truths = (
        [truths[i] for i in val_idx]
        if truths is not None
        else _truth_fields(val_samples, grid) if n_val else []
    )
    probe = val_samples if val_samples else train_samples[: min(4, len(train_samples))]

    state = AdamState.for_params(model.params)
    log: list[dict] = []
    timings: list[float] = []
    log_fh = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "train.ldjson"), "w", encoding="utf-8")
    needs_flux = problem == "nagumo" and config.loss_weights.bc > 0
    flux_plan = (
        ph._nagumo_flux_plan(grid, config.stochproj, config.seed) if needs_flux else None
    )
    last_good = None
    try:
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            lr = config.lr_at(epoch)
            plans = (
                ph.epoch_plans(grid, problem, len(train_samples), config.stochproj,
                               config.n_collocation, epoch)
                if config.loss_weights.pde > 0
                else None
            )
            perm = _rng.substream(config.seed, 1000 + epoch).permutation(len(train_samples))
            epoch_parts = {"data": 0.0, "pde": 0.0, "bc": 0.0, "ic": 0.0, "total": 0.0}
            n_batches = 0
            clipped = 0
            for i0 in range(0, len(perm), config.batch_size):
                sel = perm[i0:i0 + config.batch_size]
                batch = [train_samples[i] for i in sel]
                b_truths = [train_truths[i] for i in sel] if train_truths else None
                b_plans = [plans[i] for i in sel] if plans is not None else None
                breakdown = ph.composite_loss(
                    model, batch, config.loss_weights, config.stochproj,
                    problem=problem, truths=b_truths, plans=b_plans,
                    flux_plan=flux_plan, n_collocation=config.n_collocation,
                    seed=_rng.stream_key(config.seed, epoch, i0),
                )
                loss_val = float(breakdown.total.value)
                if not np.isfinite(loss_val) or loss_val > config.divergence_loss:
                    hint = (
                        f"; last good checkpoint at epoch {last_good}"
                        if last_good is not None
                        else ""
                    )
                    raise TrainingError(
                        f"training diverged at epoch {epoch} (loss {loss_val:.3e}){hint}"
                    )
                ad.zero_grad(model.parameters())
                ad.backward(breakdown.total, model.parameters())
                grads = {k: p.grad for k, p in model.params.items()}
                norm = clip_gradients(grads, config.grad_clip)
                if config.grad_clip > 0 and norm > config.grad_clip:
                    clipped += 1
                adam_step(model.params, grads, state, lr, config.weight_decay)
                _constrain(model)
                for k in epoch_parts:
                    epoch_parts[k] += breakdown.parts.get(k, 0.0)
                n_batches += 1
            for k in epoch_parts:
                epoch_parts[k] /= max(n_batches, 1)

            record = {
                "epoch": epoch,
                "lr": lr,
                "loss": epoch_parts["total"],
                "loss_terms": {k: epoch_parts[k] for k in ("data", "pde", "bc", "ic")},
                "grad_clipped_batches": clipped,
            }
            if val_samples:
                preds = model.predict_fields(val_samples)
                record["val_nmse"] = sv.nmse(preds, val_truths)
            _, report = model.forward([s.field for s in probe[: min(4, len(probe))]], instrument=True)
            record["activity"] = {name: act for name, act in report.activities}
            log.append(record)
            timings.append(time.perf_counter() - t0)
            if log_fh:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
            if out_dir and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                model.save(os.path.join(out_dir, "checkpoint"))
                last_good = epoch
    finally:
        if log_fh:
            log_fh.close()
    if out_dir:
        model.save(os.path.join(out_dir, "checkpoint"))
        with open(os.path.join(out_dir, "timings.json"), "w", encoding="utf-8") as fh:
            json.dump({"epoch_seconds": timings, "total_seconds": sum(timings)}, fh)
            fh.write("\n")
    return log


def _constrain(model: NeuroPolModel):
    # Leak coefficients must stay inside (0, 1) to remain a valid membrane decay.
    for name, p in model.params.items():
        if name.endswith(".leak"):
            p.value = np.clip(p.value, 0.01, 0.99)


def evaluate(model: NeuroPolModel, samples: list[InputSample],
             truths: list[Field], batch_size: int = 32) -> dict:
    """Test metrics: NMSE, per-layer spiking activity, MAC counts."""
    if len(samples) != len(truths):
        raise TrainingError("samples/truths length mismatch")
    preds = model.predict_fields(samples, batch_size=batch_size)
    err = sv.nmse(preds, truths)
    probe = [s.field for s in samples[: min(8, len(samples))]]
    _, report = model.forward(probe, instrument=True)
    dense, event = report.dense_macs, report.event_macs
    return {
        "nmse_percent": err,
        "n_test": len(samples),
        "activity": {name: act for name, act in report.activities},
        "mac_dense": dense,
        "mac_event": event,
        "mac_ratio": event / dense if dense else None,
    }
