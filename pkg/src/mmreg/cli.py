"""Command-line interface.

Exit codes: 0 success, 1 invalid input (flags, files, shapes), 2 runtime
failure (diverging optimization, write errors, failed compare runs).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .core import DisplacementField, LossSpec, OptimConfig, zero_field
from .errors import MmregError, OptimizationError, ValidationError
from .evaluation import compare, hit_rate, tre
from .io import (config_document, dumps_report, parse_config, read_config, read_field,
                 read_field_spacing, read_landmarks, read_volume, write_field, write_landmarks,
                 write_report, write_volume)
from .loss import combined_loss
from .optim import register
from .phantom import PhantomSpec, generate
from .sampling import warp

log = logging.getLogger("mmreg")

DEFAULT_TAUS = [float(t) for t in range(0, 11)]
JOBS_ENV = "MMREG_JOBS"


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _floats(text: str, count: int | None = None) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if count is not None and len(values) == 1:
        values = values * count
    if count is not None and len(values) != count:
        raise argparse.ArgumentTypeError(f"expected 1 or {count} numbers, got {text!r}")
    return values


def _dims(text: str) -> list[int]:
    values = _floats(text, 3)
    if any(v != int(v) for v in values):
        raise argparse.ArgumentTypeError(f"dims must be integers, got {text!r}")
    return [int(v) for v in values]


def _triple(text: str) -> list[float]:
    return _floats(text, 3)


def parse_metrics(text: str) -> tuple[tuple[str, float], ...]:
    """Parse ``name:weight[,name:weight...]``; a bare ``name`` list gets equal weights."""
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise UsageError("--metrics needs at least one entry")
    names, weights = [], []
    for item in items:
        name, sep, weight = item.partition(":")
        names.append(name.strip().lower())
        if sep:
            try:
                weights.append(float(weight))
            except ValueError:
                raise UsageError(f"bad metric weight in {item!r}") from None
        else:
            weights.append(None)
    if all(w is None for w in weights):
        weights = [1.0 / len(names)] * len(names)
    elif any(w is None for w in weights):
        raise UsageError("give a weight for every metric or for none")
    return tuple(zip(names, weights))


def _print_config(doc: dict) -> None:
    print("resolved configuration:")
    print(json.dumps(doc, indent=2))
    sys.stdout.flush()


def _artifact() -> dict:
    return {"name": "mmreg", "version": __version__}


# -- phantom ---------------------------------------------------------------------------

def cmd_phantom(args) -> int:
    spec = PhantomSpec(seed=args.seed, dims=tuple(args.dims), channels=args.channels,
                       spacing=tuple(args.spacing), max_amplitude=args.amplitude,
                       n_landmarks=args.landmarks, n_blobs=args.blobs,
                       control_grid=args.control_grid,
                       translation=None if args.translation is None else tuple(args.translation))
    _print_config({"command": "phantom", "seed": spec.seed, "dims": list(spec.dims),
                   "channels": spec.channels, "spacing": list(spec.spacing),
                   "max_amplitude": spec.max_amplitude,
                   "translation": None if spec.translation is None else list(spec.translation),
                   "control_grid": spec.control_grid, "n_landmarks": spec.n_landmarks,
                   "n_blobs": spec.n_blobs, "out_dir": str(args.out_dir)})
    case = generate(spec)
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"cannot create {out}: {exc.strerror or exc}") from exc
    write_volume(out / "fixed.nii", case.fixed)
    write_volume(out / "moving.nii", case.moving)
    write_field(out / "gt_field.nii", case.gt_field, spec.spacing)
    write_landmarks(out / "landmarks.csv", case.landmarks)
    print(f"wrote fixed.nii, moving.nii, gt_field.nii, landmarks.csv to {out}")
    return 0


# -- register ----------------------------------------------------------------------------

def resolve_config(args) -> tuple[LossSpec, OptimConfig]:
    """Config file values, overridden by any explicitly given flag."""
    doc = {}
    if args.config is not None:
        spec, cfg = read_config(args.config)
        doc = config_document(spec, cfg)
    if args.metrics is not None:
        doc["metrics"] = [{"name": k, "weight": w} for k, w in parse_metrics(args.metrics)]
    for flag, key in (("lam", "lambda"), ("lr", "learning_rate"), ("iters", "iterations"),
                      ("levels", "levels"), ("ncc_window", "ncc_window")):
        value = getattr(args, flag)
        if value is not None:
            doc[key] = value
    spec, cfg = parse_config(doc)
    if abs(spec.weight_sum - 1.0) > 1e-12:
        log.warning("metric weights sum to %g, not 1", spec.weight_sum)
    return spec, cfg


def _register_report(fixed, moving, spec, cfg, result, timing: bool, landmarks=None, taus=None):
    # the fields are stored as float32, so the reported final loss is evaluated on
    # the rounded fields to match what a reader of the saved files recomputes
    u_fwd = DisplacementField(result.u_fwd.data.astype(np.float32))
    u_bwd = DisplacementField(result.u_bwd.data.astype(np.float32))
    zero = zero_field(fixed.dims)
    initial = combined_loss(moving, fixed, zero, zero, spec)
    final = combined_loss(moving, fixed, u_fwd, u_bwd, spec)
    doc = {
        "artifact": _artifact(),
        "config": config_document(spec, cfg),
        "level_dims": [list(d) for d in result.level_dims],
        "loss_trace": [list(t) for t in result.loss_trace],
        "best_loss_final_level": result.best_loss,
        "initial": initial.to_dict(),
        "final": final.to_dict(),
        "fwd_mean_magnitude": float(u_fwd.magnitude().mean()),
        "bwd_mean_magnitude": float(u_bwd.magnitude().mean()),
    }
    if landmarks is not None:
        rep = tre(landmarks, u_fwd, fixed.spacing)
        doc["tre"] = rep.to_dict()
        doc["tre_identity"] = tre(landmarks, zero, fixed.spacing).to_dict()
        doc["hit_rate"] = hit_rate(rep, taus or DEFAULT_TAUS).to_dict()
    if timing:
        doc["timing"] = {"elapsed_seconds": result.elapsed}
    return doc, u_fwd, u_bwd


def _load_pair(fixed_path, moving_path):
    fixed = read_volume(fixed_path)
    moving = read_volume(moving_path)
    if fixed.data.shape != moving.data.shape:
        raise ValidationError(f"fixed {fixed.data.shape} and moving {moving.data.shape} differ in shape")
    return fixed, moving


def cmd_register(args) -> int:
    spec, cfg = resolve_config(args)
    _print_config({"command": "register", "fixed": str(args.fixed), "moving": str(args.moving),
                   **config_document(spec, cfg), "timing": not args.no_timing})
    fixed, moving = _load_pair(args.fixed, args.moving)
    landmarks = read_landmarks(args.landmarks) if args.landmarks else None
    result = register(moving, fixed, spec, cfg)
    doc, u_fwd, u_bwd = _register_report(fixed, moving, spec, cfg, result, not args.no_timing,
                                         landmarks, args.taus)
    doc["inputs"] = {"fixed": str(args.fixed), "moving": str(args.moving)}
    if args.out_fwd:
        write_field(args.out_fwd, u_fwd, fixed.spacing)
    if args.out_bwd:
        write_field(args.out_bwd, u_bwd, fixed.spacing)
    if args.report:
        write_report(args.report, doc)
    print(f"loss {doc['initial']['total']:.6g} -> {doc['final']['total']:.6g}")
    if "tre" in doc:
        print(f"TRE {doc['tre_identity']['mean']:.3f} -> {doc['tre']['mean']:.3f} mm")
    return 0


# -- warp / evaluate -------------------------------------------------------------------------

def cmd_warp(args) -> int:
    _print_config({"command": "warp", "volume": str(args.volume), "field": str(args.field),
                   "out": str(args.out)})
    v = read_volume(args.volume)
    u = read_field(args.field)
    out = warp(v, u)
    write_volume(args.out, out)
    return 0


def evaluate_document(landmarks, u, spacing, taus) -> dict:
    rep = tre(landmarks, u, spacing)
    return {"artifact": _artifact(), "spacing": list(spacing), "tre": rep.to_dict(),
            "hit_rate": hit_rate(rep, taus).to_dict()}


def cmd_evaluate(args) -> int:
    spacing = tuple(args.spacing) if args.spacing else read_field_spacing(args.field)
    taus = args.taus or DEFAULT_TAUS
    _print_config({"command": "evaluate", "landmarks": str(args.landmarks), "field": str(args.field),
                   "spacing": list(spacing), "taus": taus})
    landmarks = read_landmarks(args.landmarks)
    u = read_field(args.field)
    doc = evaluate_document(landmarks, u, spacing, taus)
    if args.report:
        write_report(args.report, doc)
    print(f"TRE mean {doc['tre']['mean']:.4f} mm (std {doc['tre']['std']:.4f}, n={doc['tre']['count']})")
    return 0


# -- compare ---------------------------------------------------------------------------------

def _compare_run(case_dir: str, config_path: str, timing: bool, taus):
    """One config of a compare sweep; returns a JSON-ready dict (runs in worker processes)."""
    case = Path(case_dir)
    try:
        spec, cfg = read_config(config_path)
        fixed, moving = _load_pair(case / "fixed.nii", case / "moving.nii")
        landmarks = read_landmarks(case / "landmarks.csv")
        result = register(moving, fixed, spec, cfg)
        doc, _, _ = _register_report(fixed, moving, spec, cfg, result, timing, landmarks, taus)
        doc["status"] = "ok"
        return doc
    except MmregError as exc:
        return {"status": "failed", "error": str(exc), "error_type": type(exc).__name__}


def _unique_names(labels) -> list[str]:
    names, seen = [], {}
    for label in labels:
        seen[label] = seen.get(label, 0) + 1
        names.append(label if seen[label] == 1 else f"{label}#{seen[label]}")
    return names


def _row_names(paths) -> list[str]:
    return _unique_names(Path(p).stem for p in paths)


def _pooled(runs: dict, key: str, prefix: bool) -> dict:
    """Per-landmark distances of several cases, ids prefixed by case when pooling."""
    out = {}
    for case_name, run in runs.items():
        for lid, d in run[key]["distances_mm"].items():
            out[f"{case_name}/{lid}" if prefix else lid] = d
    return out


def cmd_compare(args) -> int:
    from .evaluation import TreReport

    configs = [c for c in args.configs.split(",") if c.strip()]
    if not configs:
        raise UsageError("--configs needs at least one file")
    cases = [c for c in args.case_dir.split(",") if c.strip()]
    if not cases:
        raise UsageError("--case-dir needs at least one directory")
    jobs = args.jobs if args.jobs is not None else int(os.environ.get(JOBS_ENV, "1") or 1)
    if jobs < 1:
        raise UsageError("--jobs must be >= 1")
    resolved = {}
    for name, path in zip(_row_names(configs), configs):
        resolved[name] = config_document(*read_config(path))
    case_names = _unique_names(Path(c).name or str(c) for c in cases)
    for case in cases:
        for required in ("fixed.nii", "moving.nii", "landmarks.csv"):
            if not (Path(case) / required).is_file():
                raise ValidationError(f"{Path(case) / required} not found")
    taus = args.taus or DEFAULT_TAUS
    _print_config({"command": "compare", "case_dirs": cases, "configs": resolved,
                   "jobs": jobs, "taus": taus, "timing": not args.no_timing})

    timing = not args.no_timing
    tasks = [(case, path) for path in configs for case in cases]
    if jobs == 1:
        flat = [_compare_run(case, path, timing, taus) for case, path in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            flat = list(pool.map(_compare_run, [t[0] for t in tasks], [t[1] for t in tasks],
                                 [timing] * len(tasks), [taus] * len(tasks)))

    names = list(resolved)
    runs = {name: dict(zip(case_names, flat[i * len(cases):(i + 1) * len(cases)]))
            for i, name in enumerate(names)}
    ok = [n for n in names if all(r["status"] == "ok" for r in runs[n].values())]
    partial = len(ok) != len(names)
    doc = {"artifact": _artifact(), "case_dirs": cases, "partial": partial, "runs": runs}
    if ok:
        prefix = len(cases) > 1
        reports = [(n, TreReport.from_distances(_pooled(runs[n], "tre", prefix))) for n in ok]
        table = compare(reports)
        identity = TreReport.from_distances(_pooled(runs[ok[0]], "tre_identity", prefix))
        doc["identity_tre"] = identity.to_dict()
        doc["comparison"] = table.to_dict()
        print(f"identity: {identity.mean:.3f} +/- {identity.std:.3f} mm (n={identity.count})")
        print(table.format_table())
    if args.report:
        write_report(args.report, doc)
    for n in names:
        for case_name, r in runs[n].items():
            if r["status"] != "ok":
                print(f"run {n} on {case_name} failed: {r['error']}", file=sys.stderr)
    return 2 if partial else 0


# -- entry point -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mmreg", description="Multi-metric deformable 3D registration on phantoms and "
                                          "NIfTI volumes.",
                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--version", action="version", version=f"mmreg {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-level progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    ph = sub.add_parser("phantom", help="write a synthetic fixed/moving case", formatter_class=fmt)
    ph.add_argument("--seed", type=int, default=0, help="PCG64 seed")
    ph.add_argument("--dims", type=_dims, default=[48, 48, 48], help="N or NX,NY,NZ")
    ph.add_argument("--channels", type=int, default=1, choices=(1, 2))
    ph.add_argument("--amplitude", type=float, default=4.0, help="max displacement in voxels")
    ph.add_argument("--translation", type=_triple, default=None,
                    help="TX,TY,TZ voxel translation instead of a random smooth field")
    ph.add_argument("--landmarks", type=int, default=6)
    ph.add_argument("--blobs", type=int, default=12)
    ph.add_argument("--control-grid", type=int, default=4)
    ph.add_argument("--spacing", type=_triple, default=[1.0, 1.0, 1.0], help="mm per voxel")
    ph.add_argument("--out-dir", required=True)
    ph.set_defaults(func=cmd_phantom)

    rg = sub.add_parser("register", help="register moving to fixed", formatter_class=fmt)
    rg.add_argument("--fixed", required=True, help="target image (NIfTI)")
    rg.add_argument("--moving", required=True, help="source image (NIfTI)")
    rg.add_argument("--config", help="JSON config; flags below override its values")
    rg.add_argument("--metrics", help="name:weight[,name:weight] (default mse:0.5,ncc:0.5)")
    rg.add_argument("--lambda", dest="lam", type=float, help="regularization weight (default 1.0)")
    rg.add_argument("--iters", type=int, help="Adam iterations per level (default 30)")
    rg.add_argument("--lr", type=float, help="learning rate (default 1e-3)")
    rg.add_argument("--levels", type=int, help="pyramid levels (default 3)")
    rg.add_argument("--ncc-window", type=int, help="NCC window side (default 9)")
    rg.add_argument("--landmarks", help="landmark CSV; adds TRE to the report")
    rg.add_argument("--taus", type=_floats, default=None, help="hit-rate tolerances in mm (0,...,10)")
    rg.add_argument("--out-fwd", help="forward field output (NIfTI)")
    rg.add_argument("--out-bwd", help="backward field output (NIfTI)")
    rg.add_argument("--report", help="JSON report output")
    rg.add_argument("--no-timing", action="store_true", help="omit wall-clock timings from the report")
    rg.set_defaults(func=cmd_register)

    wp = sub.add_parser("warp", help="resample a volume through a displacement field",
                        formatter_class=fmt)
    wp.add_argument("--volume", required=True)
    wp.add_argument("--field", required=True)
    wp.add_argument("--out", required=True)
    wp.set_defaults(func=cmd_warp)

    ev = sub.add_parser("evaluate", help="landmark TRE and hit-rate of a forward field",
                        formatter_class=fmt)
    ev.add_argument("--landmarks", required=True)
    ev.add_argument("--field", required=True)
    ev.add_argument("--spacing", type=_triple, default=None,
                    help="mm per voxel (default: pixdim of the field file)")
    ev.add_argument("--taus", type=_floats, default=None, help="hit-rate tolerances in mm (0,...,10)")
    ev.add_argument("--report")
    ev.set_defaults(func=cmd_evaluate)

    cp = sub.add_parser("compare", help="register one case under several loss configs",
                        formatter_class=fmt)
    cp.add_argument("--case-dir", required=True,
                    help="comma-separated directories written by 'phantom'; landmarks are pooled")
    cp.add_argument("--configs", required=True, help="comma-separated JSON configs; first is baseline")
    cp.add_argument("--report")
    cp.add_argument("--taus", type=_floats, default=None, help="hit-rate tolerances in mm (0,...,10)")
    cp.add_argument("--jobs", type=int, default=None,
                    help=f"parallel runs (default ${JOBS_ENV} or 1)")
    cp.add_argument("--no-timing", action="store_true", help="omit wall-clock timings from the report")
    cp.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, --version and usage errors
        return exc.code if isinstance(exc.code, int) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except OptimizationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except MmregError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
