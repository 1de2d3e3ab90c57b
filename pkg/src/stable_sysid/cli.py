"""Command line entry point: ``simba generate | fit | eval | bench | inspect``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import platform
import sys
import threading
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .baseline import build_comparison, multistep_mse
from .config import (
    BENCH_SCHEMA,
    FIT_SCHEMA,
    apply_overrides,
    build_model,
    build_train_config,
    config_hash,
    load_json,
    resolve_seed,
    validate,
)
from .data import load_csv, save_csv
from .errors import ContractError, NumericalError, SysIdError
from .model import StateSpaceModel, evaluate
from .synth import GeneratorSpec, make_benchmark
from .trainer import fit, history_csv, timings_csv

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 2, 3


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _manifest(command: str, cfg: dict, seed: int, wall: float) -> dict:
    return {
        "command": command,
        "config_hash": config_hash(cfg),
        "config": cfg,
        "seed": seed,
        "versions": {
            "stable_sysid": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "wall_time_s": wall,
    }


# ---------------------------------------------------------------- generate


def cmd_generate(args) -> int:
    t0 = time.perf_counter()
    seed = args.seed if args.seed is not None else resolve_seed({})
    spec = GeneratorSpec(
        n=args.n, m=args.m, p=args.p, target_spectral_radius=args.rho, sparsity_fraction=args.sparsity,
        noise_std=args.noise_std, gbn_switch_prob=args.switch_prob, trajectory_length=args.length, seed=seed,
        target_kind=args.target_kind, feedthrough=not args.no_feedthrough, train_trajectories=args.train_trajectories,
    )
    system, (train, val, test) = make_benchmark(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, tset in (("train", train), ("val", val), ("test", test)):
        save_csv(tset, out / f"{name}.csv")
    system.to_model(input_output=spec.target_kind == "output").save(out / "truth.json")
    cfg = spec.to_dict()
    _write(out / "manifest.json", _dump(_manifest("generate", cfg, seed, time.perf_counter() - t0)))
    print(f"wrote train/val/test CSVs and truth.json to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- fit


def _load_fit_config(path: str, overrides) -> tuple[dict, Path]:
    cfg = apply_overrides(load_json(path), overrides)
    validate(cfg, FIT_SCHEMA, "fit config")
    return cfg, Path(path).resolve().parent


def run_fit(cfg: dict, base: Path, out: Path, seed: int, truth_masks: dict | None = None):
    """Fit from a validated config; writes model, history and metrics into ``out``."""
    train = load_csv(base / cfg["train"])
    val = load_csv(base / cfg["val"], train.target_kind, train.m, train.q) if cfg.get("val") else None
    test = load_csv(base / cfg["test"], train.target_kind, train.m, train.q) if cfg.get("test") else None
    if train.target_kind == "state":
        n, p = train.q, None
    else:
        if "n" not in cfg:
            raise ContractError("input-output data needs the state dimension n in the config")
        n, p = cfg["n"], train.q
    model = build_model(cfg, n, train.m, p, train.target_kind, seed, base, truth_masks)
    result = fit(model, train, val, test, build_train_config(cfg, seed))
    metrics = {
        "train_loss": result.train_loss,
        "val_loss": None if np.isnan(result.val_loss) else result.val_loss,
        "test_loss": result.test_loss,
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "epochs_run": len(result.history),
        "spectral_radius": model.spectral_radius(),
        "bound": model.bound,
        "mode": model.mode or "free",
        "init_error": result.init_error,
        "empty_trajectories": result.stats.empty_trajectories,
    }
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.json")
    _write(out / "history.csv", history_csv(result))
    _write(out / "timings.csv", timings_csv(result))
    _write(out / "metrics.json", _dump(metrics))
    return result, metrics


def cmd_fit(args) -> int:
    t0 = time.perf_counter()
    cfg, base = _load_fit_config(args.config, args.set)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.max_epochs is not None:
        cfg["max_epochs"] = args.max_epochs
    validate(cfg, FIT_SCHEMA, "fit config")
    seed = resolve_seed(cfg)
    out = Path(args.out) if args.out else base / cfg.get("output_dir", Path(args.config).stem + "_out")
    result, metrics = run_fit(cfg, base, out, seed)
    _write(out / "manifest.json", _dump(_manifest("fit", cfg, seed, time.perf_counter() - t0)))
    print(f"best epoch {result.best_epoch} (val loss {result.best_val_loss:.6g}) "
          f"reached after {result.best_time_s:.3f} s")
    print(f"test loss {metrics['test_loss']}, spectral radius {metrics['spectral_radius']:.6f}; outputs in {out}")
    return EXIT_OK


# ---------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    model = StateSpaceModel.load(args.model)
    data = load_csv(args.data, model.target_kind)
    per, avg = evaluate(model, data, args.loss)
    report = {"loss": args.loss, "mean": avg,
              "per_trajectory": {tid: (None if np.isnan(v) else float(v)) for tid, v in zip(data.ids, per)}}
    text = _dump(report)
    if args.out:
        _write(Path(args.out), text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- inspect


def cmd_inspect(args) -> int:
    model = StateSpaceModel.load(args.model)
    from .autodiff import eigenvalues

    np.set_printoptions(precision=6, suppress=True, linewidth=120)
    print(repr(model))
    for name, mat in model.effective().items():
        if mat is not None:
            print(f"{name} =\n{mat}")
    A = model.effective()["A"]
    eig = eigenvalues(A)
    eig = eig[np.lexsort((eig.imag, -np.abs(eig)))]
    print("eigenvalues of A:")
    for lam in eig:
        print(f"  {lam.real:+.6f} {lam.imag:+.6f}j  |{abs(lam):.6f}|")
    print(f"spectral radius {np.abs(eig).max():.6f}" + ("" if model.bound is None else f" (bound {model.bound})"))
    return EXIT_OK


# ---------------------------------------------------------------- bench


def _cell_key(system: int, method: str, seed: int) -> str:
    return f"{system}|{method}|{seed}"


def run_bench(sweep: dict, out: Path, jobs: int = 1) -> dict:
    """Run every (system, method, seed) cell not already in ``out/results.json``."""
    validate(sweep, BENCH_SCHEMA, "bench config")
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "results.json"
    cells = load_json(manifest_path)["cells"] if manifest_path.exists() else {}
    seeds = sweep.get("seeds", [0])
    gen = sweep["generator"]
    base_cfg = sweep.get("base", {})
    lock = threading.Lock()
    data_cache: dict = {}

    def dataset(system: int):
        with lock:
            if system not in data_cache:
                spec = GeneratorSpec(**gen, seed=system)
                data_cache[system] = make_benchmark(spec)
            return data_cache[system]

    todo = [(s, m, sd) for s in sweep["systems"] for m in sorted(sweep["methods"]) for sd in seeds
            if cells.get(_cell_key(s, m, sd), {}).get("status") != "ok"]

    def run_cell(cell):
        system, method, seed = cell
        t0 = time.perf_counter()
        record = {"system": system, "method": method, "seed": seed}
        try:
            truth, (train, val, test) = dataset(system)
            cfg = {**base_cfg, **sweep["methods"][method]}
            masks = truth.masks if cfg.pop("masks_from_truth", False) else None
            kind = train.target_kind
            n, p = (train.q, None) if kind == "state" else (cfg.get("n", gen["n"]), train.q)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                model = build_model(cfg, n, train.m, p, kind, seed, truth_masks=masks)
                fit(model, train, val, None, build_train_config(cfg, seed))
            record.update(status="ok", mse=float(np.nanmean(multistep_mse(model, test))))
        except (SysIdError, ArithmeticError, ValueError) as exc:
            record.update(status="failed", mse=None, error=f"{type(exc).__name__}: {exc}")
        record["wall_time_s"] = round(time.perf_counter() - t0, 6)
        with lock:
            cells[_cell_key(system, method, seed)] = record
            _write(manifest_path, _dump({"cells": dict(sorted(cells.items()))}))
        return record

    if todo:
        with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
            list(pool.map(run_cell, todo))

    rows = ["system_id,method,seed,status,mse"]
    best: dict = {}
    every: dict = {}
    for s in sweep["systems"]:
        for m in sorted(sweep["methods"]):
            for sd in seeds:
                rec = cells.get(_cell_key(s, m, sd), {"status": "missing", "mse": None})
                v = rec.get("mse")
                rows.append(f"{s},{m},{sd},{rec['status']},{'' if v is None else repr(v)}")
                every.setdefault(f"{s}:{sd}", {})[m] = np.nan if v is None else v
                if v is not None:
                    best.setdefault(str(s), {})[m] = min(v, best.get(str(s), {}).get(m, np.inf))
                else:
                    best.setdefault(str(s), {}).setdefault(m, np.nan)
    _write(out / "cells.csv", "\n".join(rows) + "\n")
    tables = {"best_seed": build_comparison(best), "all_seeds": build_comparison(every)}
    for name, table in tables.items():
        _write(out / f"comparison_{name}.csv", table.to_csv())
        _write(out / f"quantiles_{name}.csv", table.quantiles_csv())
    return {"cells": cells, "tables": tables, "computed": len(todo)}


def cmd_bench(args) -> int:
    t0 = time.perf_counter()
    sweep = apply_overrides(load_json(args.config), args.set)
    base = Path(args.config).resolve().parent
    out = Path(args.out) if args.out else base / sweep.get("output_dir", Path(args.config).stem + "_out")
    res = run_bench(sweep, out, args.jobs)
    failed = sum(1 for c in res["cells"].values() if c["status"] != "ok")
    _write(out / "manifest.json", _dump(_manifest("bench", sweep, 0, time.perf_counter() - t0)))
    print(f"{res['computed']} cells computed, {failed} failed; tables in {out}")
    print(res["tables"]["best_seed"].quantiles_csv(), end="")
    return EXIT_OK


# ---------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="simba", description="Identify stable linear state-space models.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="draw a random stable system and its train/val/test data")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--m", type=int, required=True)
    g.add_argument("--p", type=int, required=True)
    g.add_argument("--length", type=int, default=300)
    g.add_argument("--noise-std", type=float, default=0.0)
    g.add_argument("--rho", type=float, default=0.9, help="spectral radius of the true A")
    g.add_argument("--sparsity", type=float, default=0.0, help="fraction of zeroed entries per matrix")
    g.add_argument("--switch-prob", type=float, default=0.1, help="GBN sign-flip probability")
    g.add_argument("--target-kind", choices=("output", "state"), default="output")
    g.add_argument("--train-trajectories", type=int, default=1)
    g.add_argument("--no-feedthrough", action="store_true", help="generate D = 0")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", default=".")
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("fit", help="train a model from a JSON config")
    f.add_argument("config")
    f.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (JSON value)")
    f.add_argument("--seed", type=int, default=None)
    f.add_argument("--max-epochs", type=int, default=None)
    f.add_argument("--out", default=None)
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("eval", help="evaluate a saved model on a trajectory CSV")
    e.add_argument("model")
    e.add_argument("data")
    e.add_argument("--loss", choices=("mse", "mae", "mape"), default="mse")
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="run a (system x method x seed) sweep")
    b.add_argument("config")
    b.add_argument("--set", action="append", metavar="KEY=VALUE")
    b.add_argument("--jobs", type=int, default=1)
    b.add_argument("--out", default=None)
    b.set_defaults(func=cmd_bench)

    i = sub.add_parser("inspect", help="print model matrices and eigenvalues")
    i.add_argument("model")
    i.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except (NumericalError, AssertionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (SysIdError, ValueError, FileNotFoundError, IsADirectoryError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
