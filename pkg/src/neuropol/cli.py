"""Command-line pipeline: gen | train | eval | rel | report.

Every command takes a JSON run config (``--config``), applies flag
overrides, writes the resolved config next to its outputs, and is
deterministic given identical inputs and seeds.

Exit codes: 0 success, 2 configuration/usage error, 3 numeric failure,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import datasets as ds
from . import grids as gr
from . import reliability as rel
from . import solvers as sv
from . import training as tr
from .autodiff import AutodiffError
from .configs import ConfigError, RunConfig, validate_json
from .grids import GridError
from .model import ModelError, NeuroPolModel
from .physics import StochProjError
from .reliability import LimitState, ReliabilityError, SolverSource, SurrogateSource
from .rng import stream_key
from .solvers import SolverError
from .training import TrainingError
from .vsn import VsnError
from .wavelets import WaveletError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

_CONFIG_ERRORS = (ConfigError, GridError, ModelError, WaveletError, VsnError, ValueError)
_NUMERIC_ERRORS = (SolverError, TrainingError, StochProjError, ReliabilityError,
                   AutodiffError, FloatingPointError)
_IO_ERRORS = (ds.DatasetError, OSError)


def _write_json(path: str, payload: dict, schema_name: str | None = None):
    if schema_name:
        validate_json(payload, schema_name)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def _write_csv(path: str, header: list[str], rows: list[list]):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


# ---------------------------------------------------------------------------
# Paths inside a run directory
# ---------------------------------------------------------------------------

def _paths(out_dir: str) -> dict:
    return {
        "train_inputs": os.path.join(out_dir, "data", "train_inputs.npolds"),
        "test_inputs": os.path.join(out_dir, "data", "test_inputs.npolds"),
        "train_truth": os.path.join(out_dir, "data", "train_truth.npolds"),
        "test_truth": os.path.join(out_dir, "data", "test_truth.npolds"),
        "train_dir": os.path.join(out_dir, "train"),
        "checkpoint": os.path.join(out_dir, "train", "checkpoint"),
        "metrics": os.path.join(out_dir, "eval", "metrics.json"),
        "per_sample": os.path.join(out_dir, "eval", "per_sample.csv"),
        "rel_json": lambda source: os.path.join(out_dir, "rel", f"reliability_{source}.json"),
        "rel_csv": lambda source: os.path.join(out_dir, "rel", f"reliability_{source}.csv"),
        "report": os.path.join(out_dir, "report", "report.json"),
        "report_csv": os.path.join(out_dir, "report", "reliability_comparison.csv"),
    }


def _needs_truth(problem: str) -> bool:
    return problem != "poisson"  # poisson truth is closed-form


def _truths_for(samples, grid, problem):
    if problem == "poisson":
        return [sv.poisson_truth(s.params[0], s.params[1], grid) for s in samples]
    return [sv.solve_truth(s, grid) for s in samples]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen(cfg: RunConfig, args) -> int:
    out = cfg.out_dir
    paths = _paths(out)
    cfg.write_resolved(out)
    grid = cfg.grid()
    problem = cfg.problem
    os.makedirs(os.path.join(out, "data"), exist_ok=True)
    seed = cfg.seed("dataset")
    n_train = int(cfg.data["n_train"])
    n_test = int(cfg.data["n_test"])
    train_seed = stream_key(seed, 1)
    test_seed = stream_key(seed, 2)
    train_samples = gr.sample_batch(problem, n_train, train_seed, grid=grid)
    test_samples = gr.sample_batch(problem, n_test, test_seed, grid=grid)
    ds.save_batch(paths["train_inputs"], train_samples, seed=train_seed)
    ds.save_batch(paths["test_inputs"], test_samples, seed=test_seed)
    made = [paths["train_inputs"], paths["test_inputs"]]
    if args.truth and _needs_truth(problem):
        truths = _truths_for(test_samples, grid, problem)
        ds.save_batch(paths["test_truth"], test_samples, seed=test_seed,
                      kind="truth", fields=truths, grid=grid)
        made.append(paths["test_truth"])
        if cfg.train_config().loss_weights.data > 0:
            truths = _truths_for(train_samples, grid, problem)
            ds.save_batch(paths["train_truth"], train_samples, seed=train_seed,
                          kind="truth", fields=truths, grid=grid)
            made.append(paths["train_truth"])
    for p in made:
        print(p)
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    out = cfg.out_dir
    paths = _paths(out)
    cfg.write_resolved(out)
    grid = cfg.grid()
    problem = cfg.problem
    if not os.path.exists(paths["train_inputs"]):
        raise ds.DatasetError(
            f"{paths['train_inputs']} missing; run `neuropol gen` first"
        )
    _, samples = ds.load_batch(paths["train_inputs"])
    tc = cfg.train_config()
    if args.epochs is not None:
        tc.epochs = int(args.epochs)
    truths = None
    if tc.loss_weights.data > 0:
        if not os.path.exists(paths["train_truth"]):
            raise ds.DatasetError("data loss enabled but train truth batch is missing")
        _, tsam = ds.load_batch(paths["train_truth"])
        truths = [s.field for s in tsam]
    if args.resume and os.path.exists(os.path.join(paths["checkpoint"], "manifest.json")):
        model = NeuroPolModel.load(paths["checkpoint"])
        model.check_grid(grid)
        done = 0
        log_path = os.path.join(paths["train_dir"], "train.ldjson")
        if os.path.exists(log_path):
            with open(log_path, "r", encoding="utf-8") as fh:
                done = sum(1 for _ in fh)
        if done >= tc.epochs:
            print(f"checkpoint already trained for {done} epochs")
            return EXIT_OK
        tc.epochs = tc.epochs - done
    else:
        model = NeuroPolModel(cfg.model_config(), grid, seed=cfg.seed("model"))
    if args.vanilla:
        model.disable_thresholds()
    log = tr.train(model, problem, samples, tc, truths=truths, out_dir=paths["train_dir"])
    final = {
        "problem": problem,
        "epochs": len(log),
        "final_loss": log[-1]["loss"],
        "final_val_nmse": log[-1].get("val_nmse"),
        "checkpoint": paths["checkpoint"],
        "config_hash": cfg.config_hash(),
    }
    _write_json(os.path.join(paths["train_dir"], "summary.json"), final)
    print(paths["checkpoint"])
    return EXIT_OK


def _load_model(cfg: RunConfig, args) -> NeuroPolModel:
    ck = args.checkpoint or _paths(cfg.out_dir)["checkpoint"]
    model = NeuroPolModel.load(ck)
    model.check_grid(cfg.grid())
    if args.vanilla:
        model.disable_thresholds()
    model._checkpoint_path = ck
    return model


def cmd_eval(cfg: RunConfig, args) -> int:
    out = cfg.out_dir
    paths = _paths(out)
    cfg.write_resolved(out)
    grid = cfg.grid()
    problem = cfg.problem
    model = _load_model(cfg, args)
    _, samples = ds.load_batch(paths["test_inputs"])
    if problem == "poisson":
        truths = _truths_for(samples, grid, problem)
    else:
        if not os.path.exists(paths["test_truth"]):
            raise ds.DatasetError(
                f"{paths['test_truth']} missing; run `neuropol gen --truth` first"
            )
        _, tsam = ds.load_batch(paths["test_truth"])
        truths = [s.field for s in tsam]
    metrics = tr.evaluate(model, samples, truths)
    payload = {
        "problem": problem,
        "checkpoint": model._checkpoint_path,
        "config_hash": cfg.config_hash(),
        "vanilla_mode": bool(args.vanilla),
        **metrics,
    }
    _write_json(paths["metrics"], payload, "metrics.schema.json")
    if args.per_sample:
        preds = model.predict_fields(samples)
        rows = []
        for i, (p, t) in enumerate(zip(preds, truths)):
            err = float(((p.values - t.values) ** 2).sum() / (t.values**2).sum())
            rows.append([i, _fmt(100.0 * err), _fmt(float(p.values.max())), _fmt(float(t.values.max()))])
        _write_csv(paths["per_sample"], ["sample", "nmse_percent", "pred_max", "truth_max"], rows)
    print(paths["metrics"])
    return EXIT_OK


def cmd_rel(cfg: RunConfig, args) -> int:
    out = cfg.out_dir
    paths = _paths(out)
    cfg.write_resolved(out)
    grid = cfg.grid()
    problem = cfg.problem
    spec = cfg.reliability_spec()
    source_kind = args.source or spec.get("source", "surrogate")
    n = int(spec["n_samples"])
    seed = int(spec.get("seed", cfg.seed("reliability")))
    samples = gr.sample_batch(problem, n, stream_key(seed, 3), grid=grid)
    if source_kind == "surrogate":
        model = _load_model(cfg, args)
        source = SurrogateSource(model)
        fields = source(samples)
        checkpoint = model._checkpoint_path
    else:
        solver_source = SolverSource(grid, jobs=args.jobs or 1)
        fields = solver_source.solve_all(samples)
        checkpoint = None

    time_dependent = grid.time_axis is not None
    results = []
    csv_rows = []
    for threshold in spec["thresholds"]:
        ls = LimitState(float(threshold))
        margins = [rel.MarginSample(i, ls.margins(f)) for i, f in enumerate(fields)]
        if time_dependent:
            tg = grid.axis_coords()[-1]
            taus = rel.first_passage_all(margins, tg)
            s_curve, pf_curve = rel.survival_curve(taus, tg)
            p_f = float(pf_curve[-1])
            se = float(np.sqrt(max(p_f * (1 - p_f), 0.0) / n))
            t_kde, dens, cens = rel.fpft_pdf(taus, grid.time_axis[1]) if np.isfinite(taus).sum() >= 2 \
                else (tg, np.zeros_like(tg), 1.0)
            entry = {
                "threshold": float(threshold),
                "p_f": p_f,
                "stderr": se,
                "beta": _beta_json(p_f),
                "censored_mass": float(cens),
                "survival": {
                    "time": [float(t) for t in tg],
                    "s": [float(v) for v in s_curve],
                    "p_f_t": [float(v) for v in pf_curve],
                },
                "fpft_kde": {
                    "time": [float(t) for t in t_kde],
                    "density": [float(v) for v in dens],
                },
            }
        else:
            p_f, se = rel.failure_probability(margins)
            entry = {
                "threshold": float(threshold),
                "p_f": p_f,
                "stderr": se,
                "beta": _beta_json(p_f),
            }
        results.append(entry)
        csv_rows.append([_fmt(float(threshold)), _fmt(entry["p_f"]), _fmt(entry["stderr"]),
                         _fmt(entry["beta"])])
    payload = {
        "problem": problem,
        "source": source_kind,
        "checkpoint": checkpoint,
        "config_hash": cfg.config_hash(),
        "n_samples": n,
        "seed": seed,
        "time_dependent": time_dependent,
        "qoi": "max",
        "results": results,
    }
    _write_json(paths["rel_json"](source_kind), payload, "reliability.schema.json")
    _write_csv(paths["rel_csv"](source_kind), ["threshold", "p_f", "stderr", "beta"], csv_rows)
    print(paths["rel_json"](source_kind))
    return EXIT_OK


def _beta_json(p_f: float):
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        beta = rel.reliability_index(p_f)
    if np.isinf(beta):
        return "inf" if beta > 0 else "-inf"
    return float(beta)


def cmd_report(cfg_path_or_dir: str, args) -> int:
    run_dir = cfg_path_or_dir
    if not os.path.isdir(run_dir):
        print(f"run directory {run_dir!r} does not exist", file=sys.stderr)
        return EXIT_CONFIG
    resolved = os.path.join(run_dir, "resolved_config.json")
    try:
        with open(resolved, "r", encoding="utf-8") as fh:
            cfg = RunConfig(json.load(fh))
    except OSError:
        print(f"{resolved} missing; nothing to report", file=sys.stderr)
        return EXIT_CONFIG
    paths = _paths(run_dir)
    artifacts = []
    for root, _dirs, files in os.walk(run_dir):
        for f in sorted(files):
            artifacts.append(os.path.relpath(os.path.join(root, f), run_dir))
    artifacts.sort()
    metrics = None
    if os.path.exists(paths["metrics"]):
        with open(paths["metrics"], "r", encoding="utf-8") as fh:
            metrics = json.load(fh)
    comparison = None
    rel_sur = paths["rel_json"]("surrogate")
    rel_sol = paths["rel_json"]("solver")
    if os.path.exists(rel_sur) or os.path.exists(rel_sol):
        def load_rel(p):
            if not os.path.exists(p):
                return {}
            with open(p, "r", encoding="utf-8") as fh:
                data = json.load(fh)
            return {round(r["threshold"], 12): r["p_f"] for r in data["results"]}
        sur = load_rel(rel_sur)
        sol = load_rel(rel_sol)
        comparison = []
        for th in sorted(set(sur) | set(sol)):
            s, g = sur.get(th), sol.get(th)
            comparison.append({
                "threshold": th,
                "surrogate_p_f": s,
                "solver_p_f": g,
                "difference": (s - g) if (s is not None and g is not None) else None,
            })
        _write_csv(
            paths["report_csv"],
            ["threshold", "surrogate_p_f", "solver_p_f", "difference"],
            [[_fmt(c["threshold"]), _fmt(c["surrogate_p_f"]), _fmt(c["solver_p_f"]),
              _fmt(c["difference"])] for c in comparison],
        )
    payload = {
        "run_dir": os.path.basename(os.path.normpath(run_dir)),
        "config_hash": cfg.config_hash(),
        "problem": cfg.problem,
        "artifacts": artifacts,
        "metrics": metrics,
        "reliability_comparison": comparison,
        "activity": metrics.get("activity") if metrics else None,
    }
    _write_json(paths["report"], payload, "report.schema.json")
    print(paths["report"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neuropol", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_config=True):
        if needs_config:
            sp.add_argument("--config", required=True, help="run config JSON")
        sp.add_argument("--seed", type=int, default=None, help="override every seed")
        sp.add_argument("--out", default=None, help="override output directory")
        sp.add_argument("--jobs", type=int, default=None, help="worker cap for batch solves")

    g = sub.add_parser("gen", help="generate input (and optional truth) batches")
    common(g)
    g.add_argument("--truth", action="store_true", help="also solve and store test truths")

    t = sub.add_parser("train", help="train the operator surrogate")
    common(t)
    t.add_argument("--epochs", type=int, default=None, help="override epoch count")
    t.add_argument("--resume", action="store_true", help="continue from the checkpoint")
    t.add_argument("--vanilla", action="store_true", help="disable spiking thresholds")

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test batch")
    common(e)
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--vanilla", action="store_true", help="disable spiking thresholds")
    e.add_argument("--per-sample", action="store_true", help="write per-sample CSV")

    r = sub.add_parser("rel", help="Monte Carlo reliability analysis")
    common(r)
    r.add_argument("--checkpoint", default=None)
    r.add_argument("--source", choices=["surrogate", "solver"], default=None)
    r.add_argument("--vanilla", action="store_true", help="disable spiking thresholds")

    rp = sub.add_parser("report", help="consolidate a run directory")
    rp.add_argument("run_dir", help="run directory to summarize")
    return p


def _overrides_from(args) -> dict:
    ov: dict = {}
    if args.out:
        ov["out"] = args.out
    if args.seed is not None:
        ov["seeds"] = {k: args.seed for k in ("dataset", "model", "train", "reliability")}
    return ov


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.run_dir, args)
        cfg = RunConfig.from_file(args.config, _overrides_from(args))
        if args.command == "gen":
            return cmd_gen(cfg, args)
        if args.command == "train":
            return cmd_train(cfg, args)
        if args.command == "eval":
            return cmd_eval(cfg, args)
        if args.command == "rel":
            return cmd_rel(cfg, args)
        raise ConfigError(f"unknown command {args.command!r}")
    except _NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _IO_ERRORS as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except _CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
