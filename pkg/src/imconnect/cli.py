"""Command-line entry point: ``imconnect <command> [--config FILE] [--out DIR]``.

Every run resolves its configuration against the defaults below, writes the
resolved manifest to ``<out>/manifest.yaml`` and its tables as CSV. Feeding
that manifest back through ``--config`` reproduces every output file.

Exit codes: 0 success, 1 verification mismatch, 2 usage or config error,
3 numeric divergence.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from fractions import Fraction
from pathlib import Path

import numpy as np
import yaml

from . import harness as hr
from . import stability as sl
from .encoder import ConfigError, EncoderConfig, WiringSpec, all_explicit, all_implicit, all_monotone, implicit_group
from .encoder import placement_presets, save_checkpoint
from .ode_blocks import EulerConfig

log = logging.getLogger("imconnect")

EXIT_OK, EXIT_MISMATCH, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3
OUT_ENV = "IMCONNECT_OUT"
MANIFEST_NAME = "manifest.yaml"
COMMANDS = ("stability", "train-eval", "ablation", "tsweep", "flops")


class UsageError(Exception):
    pass


# -- defaults ----------------------------------------------------------------------------------

_TASK = asdict(hr.SyntheticTask())
_MODEL = {k: v for k, v in asdict(EncoderConfig()).items() if k != "seed"}
_HYPER = {k: v for k, v in asdict(hr.TrainHyper(epochs=4)).items() if k != "seed"}
_PERTURBATIONS = [
    {"kind": hr.SIGN_GRADIENT, "epsilon": 0.25},
    {"kind": hr.SIGN_GRADIENT, "epsilon": 0.5},
    {"kind": hr.SIGN_GRADIENT, "epsilon": 1.0},
    {"kind": hr.GAUSSIAN, "epsilon": 0.5},
    {"kind": hr.TOKEN_SWAP, "swap_fraction": 0.1},
]

DEFAULTS = {
    "stability": {
        # threshold 1e-4 keeps the 10/n band consistent: (1 - 10/n)^n < e^-10 < 1e-4
        "lambdas": {"lo": -4.0, "hi": -0.05, "n": 50},
        "gammas": {"lo": 0.05, "hi": 3.0, "n": 50},
        "steps": 6000,
        "threshold": 1e-4,
        "band": None,
        "trajectories": [{"lambda": -1.0, "gamma": 0.5}, {"lambda": -1.0, "gamma": 3.0}],
        "trajectory_steps": 50,
        "eta": 1.0,
    },
    "train-eval": {
        "task": _TASK,
        "model": _MODEL,
        "wiring": "implicit",
        "euler": asdict(EulerConfig()),
        "hyper": _HYPER,
        "perturbations": _PERTURBATIONS,
        "train_subset": None,
        "subset_seed": 0,
        "checkpoint": False,
    },
    "ablation": {
        "task": _TASK,
        "model": _MODEL,
        "placements": "presets",
        "n_groups": 4,
        "euler": asdict(EulerConfig()),
        "hyper": _HYPER,
        "perturbations": _PERTURBATIONS,
        "n_runs": 3,
        "train_subset": None,
        "subset_seed": 0,
    },
    "tsweep": {
        "task": _TASK,
        "model": _MODEL,
        "iterations": [1, 5, 10, 15],
        "euler": asdict(EulerConfig()),
        "hyper": _HYPER,
        "perturbations": _PERTURBATIONS,
        "train_subset": None,
        "subset_seed": 0,
    },
    "flops": {
        "model": {**_MODEL, "n_layers": 12},
        "iterations": [1, 5, 10, 15],
        "euler": asdict(EulerConfig()),
        "placements": "presets",
        "n_groups": 4,
    },
}


# -- manifest resolution ----------------------------------------------------------------------


def _merge(base, override, path=""):
    if not isinstance(base, dict) or not isinstance(override, dict):
        return copy.deepcopy(override)
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise UsageError(f"unknown config key {path + k!r}")
        out[k] = _merge(base[k], v, f"{path}{k}.") if isinstance(base[k], dict) and v is not None else copy.deepcopy(v)
    return out


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    text = path.read_text()
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise UsageError(f"cannot parse {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise UsageError(f"{path} must hold a mapping at the top level")
    return data


def _wiring(entry, n_layers: int, euler: EulerConfig) -> WiringSpec:
    if isinstance(entry, dict):
        spec = WiringSpec.from_dict(entry)
    elif entry == "monotone":
        spec = all_monotone(n_layers, euler)
    elif entry == "explicit":
        spec = all_explicit(n_layers, euler)
    elif entry == "implicit":
        spec = all_implicit(n_layers, euler)
    elif isinstance(entry, str) and entry.startswith("layers(") and entry.endswith(")"):
        try:
            first, last = (int(x) for x in entry[7:-1].split("-"))
        except ValueError as exc:
            raise UsageError(f"bad placement {entry!r}") from exc
        spec = implicit_group(n_layers, first, last, euler)
    else:
        raise UsageError(f"unknown wiring {entry!r}")
    if spec.n_layers != n_layers:
        raise UsageError(f"wiring {spec.label()} has {spec.n_layers} layers, model has {n_layers}")
    return spec


def _grid(entry) -> list[float]:
    if isinstance(entry, dict) and set(entry) == {"lo", "hi", "n"}:
        return [float(v) for v in sl.grid(entry["lo"], entry["hi"], entry["n"])]
    if isinstance(entry, list):
        return [float(v) for v in entry]
    raise UsageError(f"a grid is either {{lo, hi, n}} or a list of values, got {entry!r}")


def resolve(command: str, user: dict, seed: int | None = None, threads: int | None = None,
            out: str | None = None) -> dict:
    """Expand ``user`` against the command defaults and validate it.
    Returns the manifest as plain data."""
    user = dict(user)
    cmd = user.pop("command", command)
    if cmd != command:
        raise UsageError(f"manifest is for {cmd!r}, not {command!r}")
    top = {k: user.pop(k) for k in ("seed", "threads", "out") if k in user}
    if "params" in user:  # a written manifest
        nested = user.pop("params")
        if user or not isinstance(nested, dict):
            raise UsageError("a manifest holds only command, seed, threads, out and params")
        user = nested
    params = _merge(DEFAULTS[command], user)
    manifest = {
        "command": command,
        "seed": int(seed if seed is not None else top.get("seed", 0)),
        "threads": int(threads if threads is not None else top.get("threads", 1)),
        "out": str(out if out is not None else top.get("out") or default_out(command)),
        "params": _validate(command, params),
    }
    if manifest["threads"] < 1:
        raise UsageError("threads must be at least 1")
    return manifest


def _validate(command: str, p: dict) -> dict:
    if command == "stability":
        p["lambdas"] = _grid(p["lambdas"])
        p["gammas"] = _grid(p["gammas"])
        if not p["lambdas"] or not p["gammas"]:
            raise UsageError("lambda and gamma grids must be non-empty")
        if any(v >= 0 for v in p["lambdas"]) or any(v <= 0 for v in p["gammas"]):
            raise UsageError("lambdas must be negative and gammas positive")
        if int(p["steps"]) < 1 or int(p["trajectory_steps"]) < 1:
            raise UsageError("steps must be positive")
        for t in p["trajectories"]:
            sl.ModelEqParams(float(t["lambda"]), float(t["gamma"]), float(p["eta"]), int(p["trajectory_steps"]))
        return p

    if "model" in p:
        p["model"] = asdict(EncoderConfig(**p["model"]))
        del p["model"]["seed"]
    p["euler"] = asdict(EulerConfig(**p["euler"]))
    euler = EulerConfig(**p["euler"])
    n_layers = p["model"]["n_layers"]
    if "task" in p:
        task = hr.SyntheticTask(**p["task"])
        task.validate()
        p["task"] = asdict(task)
        if task.seq_len > p["model"]["max_seq_len"]:
            raise UsageError(f"task seq_len {task.seq_len} exceeds model max_seq_len {p['model']['max_seq_len']}")
        if task.num_classes != p["model"]["num_classes"]:
            raise UsageError("task and model disagree on num_classes")
        sub = p.get("train_subset")
        if sub is not None and not 0 <= int(sub) <= task.train_size:
            raise UsageError(f"train_subset {sub} is outside [0, {task.train_size}]")
    if "hyper" in p:
        p["hyper"] = {k: v for k, v in asdict(hr.TrainHyper(**p["hyper"])).items() if k != "seed"}
    if "perturbations" in p:
        p["perturbations"] = [asdict(hr.PerturbationSpec(**d)) for d in p["perturbations"]]
    if "placements" in p:
        entries = p["placements"]
        if entries == "presets":
            specs = placement_presets(n_layers, euler, int(p["n_groups"]))
        elif isinstance(entries, list) and entries:
            specs = [_wiring(e, n_layers, euler) for e in entries]
        else:
            raise UsageError("placements must be 'presets' or a non-empty list")
        p["placements"] = [s.to_dict() for s in specs]
    if "wiring" in p:
        p["wiring"] = _wiring(p["wiring"], n_layers, euler).to_dict()
    if "iterations" in p:
        if not isinstance(p["iterations"], list) or not p["iterations"]:
            raise UsageError("iterations must be a non-empty list")
        p["iterations"] = [int(t) for t in p["iterations"]]
        for t in p["iterations"]:
            EulerConfig(iterations=t)
    if "n_runs" in p and int(p["n_runs"]) < 1:
        raise UsageError("n_runs must be at least 1")
    return p


def default_out(command: str) -> str:
    return str(Path(os.environ.get(OUT_ENV, "imconnect-out")) / command)


def write_manifest(manifest: dict, out_dir: Path) -> None:
    text = yaml.safe_dump(manifest, sort_keys=True, default_flow_style=False)
    (out_dir / MANIFEST_NAME).write_text(text)


# -- shared helpers -------------------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, Fraction):
        return str(x)
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _objects(p: dict, seed: int):
    model = EncoderConfig(**p["model"], seed=seed)
    hyper = hr.TrainHyper(**p["hyper"], seed=seed)
    perts = [hr.PerturbationSpec(**d) for d in p["perturbations"]]
    task = hr.SyntheticTask(**p["task"])
    return task, model, hyper, perts


def _data(task, p):
    train_set, eval_set = hr.generate_task(task)
    if p["train_subset"] is not None:
        train_set = hr.subsample(train_set, int(p["train_subset"]), int(p["subset_seed"]))
    return train_set, eval_set


def _cell_row(cell: hr.CellResult, keys):
    return [cell.placement, "|".join(cell.modes), cell.gamma, cell.iterations, cell.seed, cell.clean_accuracy,
            *[cell.perturbed[k] for k in keys], cell.flops, float(cell.flops), cell.params]


def _cell_header(keys):
    return ["placement", "modes", "gamma", "iterations", "seed", "clean_acc", *keys, "flops", "flops_float", "params"]


# -- commands --------------------------------------------------------------------------------------


def cmd_stability(m: dict, out: Path) -> int:
    p = m["params"]
    trajectories = []
    for t in p["trajectories"]:
        params = sl.ModelEqParams(float(t["lambda"]), float(t["gamma"]), float(p["eta"]), int(p["trajectory_steps"]))
        trajectories += [sl.simulate_error(method, params) for method in sl.METHODS]
    sl.write_trajectory_csv(out / "trajectories.csv", trajectories)

    mismatch_rows = []
    for method in sl.METHODS:
        scan = sl.stability_region_scan(method, p["lambdas"], p["gammas"], int(p["steps"]), float(p["threshold"]),
                                        float(p["eta"]), p["band"])
        sl.write_scan_csv(out / f"region_{method}.csv", scan)
        for lam, g in scan.mismatches():
            predicted = sl.is_absolutely_stable(method, lam, g)
            mismatch_rows.append([method, lam, g, sl.CONVERGED if predicted else sl.DIVERGED,
                                  sl.DIVERGED if predicted else sl.CONVERGED])
    _write_csv(out / "mismatches.csv", ["method", "lambda", "gamma", "predicted", "observed"], mismatch_rows)
    if mismatch_rows:
        print(f"{len(mismatch_rows)} cells disagree with the analytic predicate:", file=sys.stderr)
        for r in mismatch_rows[:20]:
            print(f"  {r[0]} lambda={r[1]!r} gamma={r[2]!r}: predicted {r[3]}, observed {r[4]}", file=sys.stderr)
        return EXIT_MISMATCH
    return EXIT_OK


def cmd_train_eval(m: dict, out: Path) -> int:
    p, seed = m["params"], m["seed"]
    task, model_cfg, hyper, perts = _objects(p, seed)
    wiring = WiringSpec.from_dict(p["wiring"])
    train_set, eval_set = _data(task, p)
    t0 = time.perf_counter()
    model = hr.build_encoder(model_cfg)
    res = hr.train(model, wiring, train_set, hyper)
    clean = hr.accuracy(res.model, wiring, eval_set)
    keys = [s.label() for s in perts]
    pert = hr.accuracies(res.model, wiring, eval_set,
                         [hr.PerturbationSpec(s.kind, s.epsilon, s.swap_fraction, s.seed + seed) for s in perts])
    log.info("train-eval %s finished in %.1fs", wiring.label(), time.perf_counter() - t0)
    flops = hr.count_flops(model_cfg, wiring)
    _write_csv(out / "metrics.csv", ["placement", "modes", "gamma", "iterations", "seed", "train_size", "clean_acc", *keys,
                                     "flops", "flops_float", "params"],
               [[wiring.label(), "|".join(wiring.modes), wiring.euler.gamma, wiring.euler.iterations, seed,
                 len(train_set), clean, *pert, flops, float(flops), res.model.num_parameters()]])
    val = [None] + res.val_curve[1:] if not res.val_curve else res.val_curve
    rows = [[e, res.loss_curve[e], val[e] if e < len(val) else ""] for e in range(len(res.loss_curve))]
    _write_csv(out / "loss_curve.csv", ["epoch", "train_loss", "val_loss"], rows)
    if p["checkpoint"]:
        save_checkpoint(res.model, out / "model.json")
    return EXIT_OK


def _perturbed_mean(row: hr.AblationRow, keys) -> float:
    if not keys:
        return row.stat()[0]
    return float(np.mean([row.stat(k)[0] for k in keys]))


def cmd_ablation(m: dict, out: Path) -> int:
    p, seed = m["params"], m["seed"]
    task, model_cfg, hyper, perts = _objects(p, seed)
    placements = [WiringSpec.from_dict(d) for d in p["placements"]]
    keys = [s.label() for s in perts]
    t0 = time.perf_counter()
    rows = hr.run_ablation(placements, task, hyper, int(p["n_runs"]), model_cfg, perts, m["threads"],
                           p["train_subset"], int(p["subset_seed"]))
    log.info("ablation finished in %.1fs", time.perf_counter() - t0)
    _write_csv(out / "ablation_cells.csv", _cell_header(keys), [_cell_row(c, keys) for r in rows for c in r.cells])

    header = ["placement", "n_runs", "clean_mean", "clean_spread"]
    for k in keys:
        header += [f"{k}_mean", f"{k}_spread"]
    header += ["perturbed_mean", "flops", "flops_float", "params"]
    summary = []
    for r in rows:
        line = [r.placement, len(r.cells), *r.stat()]
        for k in keys:
            line += list(r.stat(k))
        flops = r.cells[0].flops
        line += [_perturbed_mean(r, keys), flops, float(flops), r.cells[0].params]
        summary.append(line)
    _write_csv(out / "ablation_summary.csv", header, summary)

    order = sorted(range(len(rows)), key=lambda i: (-_perturbed_mean(rows[i], keys), i))
    lines = ["placements ranked by mean perturbed accuracy", ""]
    for rank, i in enumerate(order, 1):
        r = rows[i]
        clean, spread = r.stat()
        lines.append(f"{rank}. {r.placement:<16} perturbed {_perturbed_mean(r, keys):.4f}  "
                     f"clean {clean:.4f} +/- {spread:.4f}  flops {r.cells[0].flops}x  params {r.cells[0].params}")
    (out / "ranking.txt").write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_tsweep(m: dict, out: Path) -> int:
    p, seed = m["params"], m["seed"]
    task, model_cfg, hyper, perts = _objects(p, seed)
    train_set, eval_set = _data(task, p)
    keys = [s.label() for s in perts]
    rows = []
    for i, T in enumerate(p["iterations"]):
        euler = EulerConfig(**{**p["euler"], "iterations": T})
        wiring = all_implicit(model_cfg.n_layers, euler)
        cell = hr.run_cell(model_cfg, wiring, train_set, eval_set, hyper, seed + i, perts)
        log.info("T=%d finished in %.1fs", T, cell.wall_time)
        rows.append(_cell_row(cell, keys))
    _write_csv(out / "tsweep.csv", _cell_header(keys), rows)
    return EXIT_OK


def cmd_flops(m: dict, out: Path) -> int:
    p = m["params"]
    cfg = EncoderConfig(**p["model"])
    specs = [WiringSpec.from_dict(d) for d in p["placements"]]
    for T in p["iterations"]:
        specs.append(WiringSpec(all_implicit(cfg.n_layers).modes, EulerConfig(**{**p["euler"], "iterations": T}),
                                name=f"implicit-T{T}"))
    params = hr.count_parameters(cfg)
    rows = []
    for s in specs:
        f = hr.count_flops(cfg, s)
        T = s.euler.iterations if s.n_implicit else 0
        rows.append([s.label(), cfg.n_layers, s.n_implicit, T, f, float(f), params])
    _write_csv(out / "flops.csv", ["wiring", "n_layers", "n_implicit", "iterations", "flops", "flops_float", "params"], rows)
    return EXIT_OK


HANDLERS = {
    "stability": cmd_stability,
    "train-eval": cmd_train_eval,
    "ablation": cmd_ablation,
    "tsweep": cmd_tsweep,
    "flops": cmd_flops,
}


# -- entry point ------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="imconnect", description="Implicit-Euler connection experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML or JSON config; a written manifest.yaml also works")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/{name} or ./imconnect-out/{name})")
        p.add_argument("--seed", type=int, help="global seed for model init and training")
        p.add_argument("--threads", type=int, help="worker threads for ablation cells")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(command: str, config: dict | None = None, seed=None, threads=None, out=None) -> int:
    """Resolve, write the manifest, run. Raises on errors; see :func:`main`."""
    manifest = resolve(command, config or {}, seed, threads, out)
    out_dir = Path(manifest["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(manifest, out_dir)
    return HANDLERS[command](manifest, out_dir)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        config = load_config(args.config) if args.config else {}
        return run(args.command, config, args.seed, args.threads, args.out)
    except (UsageError, ConfigError, ValueError, TypeError) as exc:
        print(f"imconnect: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"imconnect: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
