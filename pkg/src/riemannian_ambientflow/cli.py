"""Command-line entry point (``raf``).

Every command writes ``config.json`` into its output directory: the exact
options used, the resolved seed and the schema version.  Passing that file back
with ``--config`` replays the command.

Exit codes: 0 success, 1 usage error, 2 data or schema error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import presets
from .corruption import CorruptionModel, Dataset, IdxFormatError, MatrixOperator, read_blocks, write_blocks
from .flow import CheckpointError, FlowModel
from .geometry import PullbackGeometry
from .inversion import certificate, check_rip, check_rric, invert, tv_reconstruct
from .rae import RAE, build_rae_from_samples
from .training import TrainingDiverged, TrainState, write_loss_csv

OUTPUT_ENV = "RAF_OUTPUT_ROOT"
log = logging.getLogger("riemannian_ambientflow")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericError(Exception):
    pass


# -- helpers ------------------------------------------------------------------------

def _out_dir(args, command: str) -> Path:
    if args.out:
        path = Path(args.out)
    else:
        path = Path(os.environ.get(OUTPUT_ENV, "runs")) / f"{command}-seed{args.seed if args.seed is not None else 0}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _read_json(path, what: str):
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{what} is not valid JSON: {p}: {exc}") from exc


def _load_flow(path) -> FlowModel:
    doc = _read_json(path, "checkpoint")
    if isinstance(doc, dict) and "flow" in doc and "layers" not in doc:
        doc = doc["flow"]  # a training checkpoint
    try:
        return FlowModel.from_dict(doc)
    except CheckpointError as exc:
        raise DataError(f"{path}: {exc}") from exc


def _load_rae(path, flow: FlowModel) -> RAE:
    try:
        return RAE.from_dict(_read_json(path, "RAE checkpoint"), flow)
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def _load_array(path, what: str) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    if p.suffix == ".json":
        doc = _read_json(p, what)
        if isinstance(doc, dict) and "file" in doc:
            return read_blocks(p)
        return np.asarray(doc, dtype=np.float64)
    raise DataError(f"{what} must be a JSON array or a block manifest: {p}")


def _load_operator(path, dim: int | None = None) -> CorruptionModel:
    doc = _read_json(path, "operator spec")
    try:
        if "operator" in doc:
            return CorruptionModel.from_dict(doc)
        return CorruptionModel(MatrixOperator(np.asarray(doc["matrix"])), float(doc.get("noise_sigma", 1.0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed operator spec: {exc}") from exc


def _write_echo(out: Path, command: str, options: dict, seed: int) -> None:
    doc = {"schema_version": presets.SCHEMA_VERSION, "command": command, "seed": seed, "options": options}
    (out / "config.json").write_text(json.dumps(doc, indent=1, default=str))


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _write_pgm(path: Path, images: np.ndarray, side: int, columns: int = 10) -> None:
    """Grayscale grid of square images in binary PGM."""
    n = len(images)
    rows = max(1, -(-n // columns))
    grid = np.zeros((rows * side, columns * side))
    for i, img in enumerate(images):
        r, c = divmod(i, columns)
        grid[r * side : (r + 1) * side, c * side : (c + 1) * side] = img.reshape(side, side)
    data = (np.clip(grid, 0.0, 1.0) * 255).round().astype(np.uint8)
    path.write_bytes(f"P5 {grid.shape[1]} {grid.shape[0]} 255\n".encode() + data.tobytes())


# -- commands -------------------------------------------------------------------------

def _resolve_run_config(args) -> dict:
    if args.config and args.preset:
        raise UsageError("give either --config or --preset, not both")
    if args.config:
        doc = _read_json(args.config, "config")
        if isinstance(doc, dict) and "options" in doc and "command" in doc:
            doc = doc["options"]  # a config echo
        base = presets.preset(doc.get("experiment")) if doc.get("experiment") in presets.PRESETS else {}
        try:
            presets.validate(doc)
        except presets.ConfigError as exc:
            raise UsageError(str(exc)) from exc
        cfg = presets.merge(base, doc)
    else:
        cfg = presets.preset(args.preset or "sinusoid")
    if getattr(args, "tier", None) == "smoke" and cfg["experiment"] == "mnist14":
        cfg = presets.merge(cfg, presets.MNIST_SMOKE_OVERRIDES)
    if args.seed is not None:
        cfg["seed"] = args.seed
    try:
        presets.validate(cfg)
    except presets.ConfigError as exc:
        raise UsageError(str(exc)) from exc
    for section in ("dataset", "flow", "posterior", "train", "rae"):
        if section not in cfg:
            raise UsageError(f"config.{section}: missing section")
    return cfg


def cmd_train(args) -> int:
    from .experiments import build_dataset, initial_state, train_config
    from .training import train

    cfg = _resolve_run_config(args)
    try:
        tc = train_config(cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config.train: {exc}") from exc
    if args.dry_run:
        print(json.dumps(cfg, indent=1))
        return 0
    out = _out_dir(args, "train")
    _write_echo(out, "train", cfg, cfg["seed"])
    try:
        dataset, corruption = build_dataset(cfg)
    except (FileNotFoundError, IdxFormatError, KeyError) as exc:
        raise DataError(str(exc)) from exc
    dataset.meta["corruption"] = corruption.to_dict()
    dataset.save(out / "dataset")
    state = initial_state(cfg, corruption, tc)
    try:
        state = train(tc, dataset, corruption, state, checkpoint_dir=out)
    except TrainingDiverged as exc:
        raise NumericError(f"{exc}; last good checkpoint kept in {out}") from exc
    state.prior.save(out / "flow.json")
    write_loss_csv(state.history, out / "loss.csv")
    print(f"trained {state.step} steps; final loss {state.history[-1]['total']:.6g}; outputs in {out}")
    return 0


def cmd_sample(args) -> int:
    if args.count is None or args.count < 0:
        raise UsageError("--count must be a nonnegative integer")
    flow = _load_flow(args.checkpoint)
    if args.dry_run:
        return 0
    out = _out_dir(args, "sample")
    seed = args.seed or 0
    _write_echo(out, "sample", {"checkpoint": args.checkpoint, "count": args.count, "pgm": args.pgm}, seed)
    samples = flow.sample(args.count, seed)
    write_blocks(out / "samples", samples, {"seed": seed})
    side = int(round(np.sqrt(flow.dim)))
    if args.pgm and side * side == flow.dim and args.count > 0:
        _write_pgm(out / "samples.pgm", samples[: min(args.count, 100)], side)
    print(f"wrote {args.count} samples to {out}")
    return 0


def cmd_rae(args) -> int:
    if (args.latent_dim is None) == (args.epsilon is None):
        raise UsageError("give exactly one of --latent-dim and --epsilon")
    flow = _load_flow(args.checkpoint)
    parts = []
    if args.dataset:
        try:
            parts.append(Dataset.load(args.dataset).clean_reference)
        except (OSError, KeyError) as exc:
            raise DataError(f"cannot read dataset {args.dataset}: {exc}") from exc
    if args.points:
        parts.append(_load_array(args.points, "points"))
    seed = args.seed or 0
    if args.prior_samples:
        parts.append(flow.sample(args.prior_samples, seed))
    if not parts:
        raise UsageError("no samples: give --dataset, --points or --prior-samples")
    samples = np.vstack([np.atleast_2d(p) for p in parts if np.size(p)])
    if args.dry_run:
        return 0
    out = _out_dir(args, "rae")
    opts = {k: getattr(args, k) for k in ("checkpoint", "dataset", "points", "prior_samples", "latent_dim", "epsilon")}
    _write_echo(out, "rae", opts, seed)
    try:
        rae = build_rae_from_samples(PullbackGeometry(flow), samples, args.latent_dim, args.epsilon)
    except ValueError as exc:
        raise NumericError(str(exc)) from exc
    rae.save(out / "rae.json", flow_reference=str(args.checkpoint))
    print(f"RAE with latent dimension {rae.latent_dim} written to {out / 'rae.json'}")
    return 0


def _point(spec: str, dataset, what: str) -> np.ndarray:
    try:
        val = json.loads(spec)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what}: expected a JSON array or an integer index") from exc
    if isinstance(val, int):
        if dataset is None:
            raise UsageError(f"{what}: an index needs --dataset")
        pts = dataset.clean_reference if len(dataset.clean_reference) else dataset.corrupted
        if not 0 <= val < len(pts):
            raise UsageError(f"{what}: index {val} out of range")
        return pts[val]
    return np.asarray(val, dtype=np.float64)


def cmd_geodesic(args) -> int:
    if args.steps < 2:
        raise UsageError("--steps must be at least 2")
    flow = _load_flow(args.checkpoint)
    dataset = Dataset.load(args.dataset) if args.dataset else None
    a, b = _point(args.start, dataset, "--start"), _point(args.end, dataset, "--end")
    if a.shape != (flow.dim,) or b.shape != (flow.dim,):
        raise UsageError(f"endpoints must have {flow.dim} coordinates")
    if args.dry_run:
        return 0
    out = _out_dir(args, "geodesic")
    opts = {k: getattr(args, k) for k in ("checkpoint", "dataset", "start", "end", "steps")}
    _write_echo(out, "geodesic", opts, args.seed or 0)
    t = np.linspace(0.0, 1.0, args.steps)
    path = PullbackGeometry(flow).geodesic(a, b, t)
    _write_csv(out / "geodesic.csv", ["t"] + [f"x{i}" for i in range(flow.dim)],
               [[repr(float(ti))] + [repr(float(v)) for v in row] for ti, row in zip(t, path)])
    print(f"geodesic with {args.steps} points written to {out / 'geodesic.csv'}")
    return 0


def cmd_invert(args) -> int:
    flow = _load_flow(args.checkpoint)
    rae = _load_rae(args.rae, flow)
    corruption = _load_operator(args.operator)
    y = _load_array(args.measurement, "measurement").reshape(-1)
    if y.size != corruption.measurement_dim:
        raise UsageError(f"measurement has {y.size} entries, operator expects {corruption.measurement_dim}")
    x_true = _load_array(args.ground_truth, "ground truth").reshape(-1) if args.ground_truth else None
    if args.select == "best-mse" and x_true is None:
        raise UsageError("--select best-mse requires --ground-truth")
    if args.dry_run:
        return 0
    out = _out_dir(args, "invert")
    opts = {k: getattr(args, k) for k in ("checkpoint", "rae", "operator", "measurement", "ground_truth", "alpha",
                                          "iters", "select", "certificate")}
    _write_echo(out, "invert", opts, args.seed or 0)
    res = invert(rae, corruption, y, args.alpha, args.iters, x_true=x_true, select=args.select)
    if res.aborted:
        _write_csv(out / "loss.csv", ["iteration", "loss"], list(enumerate(res.history["loss"])))
        raise NumericError("non-finite loss during inversion")
    write_blocks(out / "reconstruction", res.signal, {"latent": res.latent, "best_index": res.best_index})
    rows = [[i, repr(l)] + ([repr(res.history["mse"][i])] if res.history["mse"] else [])
            for i, l in enumerate(res.history["loss"])]
    _write_csv(out / "loss.csv", ["iteration", "loss"] + (["mse"] if res.history["mse"] else []), rows)
    if args.certificate:
        cert = certificate(rae, corruption, args.alpha, seed=args.seed or 0)
        (out / "certificate.json").write_text(json.dumps(cert.to_dict(), indent=1))
    print(f"reconstruction written to {out}")
    return 0


def cmd_check(args) -> int:
    flow = _load_flow(args.checkpoint)
    rae = _load_rae(args.rae, flow)
    corruption = _load_operator(args.operator)
    if corruption.signal_dim != flow.dim:
        raise UsageError(f"operator acts on {corruption.signal_dim} coordinates, model has {flow.dim}")
    if args.dry_run:
        return 0
    out = _out_dir(args, "check")
    seed = args.seed or 0
    _write_echo(out, "check-rip", {k: getattr(args, k) for k in ("checkpoint", "rae", "operator", "pairs")}, seed)
    (lo, hi), ratios = check_rip(rae, corruption, args.pairs, seed, return_ratios=True)
    delta = check_rric(rae, corruption, args.pairs, seed)
    counts, edges = np.histogram(ratios, bins=50)
    _write_csv(out / "rip_histogram.csv", ["bin_low", "bin_high", "count"],
               [[repr(float(a)), repr(float(b)), int(c)] for a, b, c in zip(edges[:-1], edges[1:], counts)])
    report = {"rip_min_ratio": lo, "rip_max_ratio": hi, "rric_delta_hat": delta, "pairs": args.pairs,
              "note": "sampled values; lower bounds on the true constants"}
    (out / "report.json").write_text(json.dumps(report, indent=1))
    print(json.dumps(report))
    return 0


def cmd_tv(args) -> int:
    corruption = _load_operator(args.operator)
    y = _load_array(args.measurement, "measurement").reshape(-1)
    try:
        h, w = (int(v) for v in args.shape.lower().split("x"))
    except ValueError as exc:
        raise UsageError("--shape must look like 14x14") from exc
    if h * w != corruption.signal_dim:
        raise UsageError(f"--shape {h}x{w} does not match signal size {corruption.signal_dim}")
    x_true = _load_array(args.ground_truth, "ground truth").reshape(-1) if args.ground_truth else None
    if args.select == "best-mse" and x_true is None:
        raise UsageError("--select best-mse requires --ground-truth")
    if args.dry_run:
        return 0
    out = _out_dir(args, "tv")
    opts = {k: getattr(args, k) for k in ("operator", "measurement", "shape", "lam", "alpha", "iters", "select",
                                          "ground_truth")}
    _write_echo(out, "tv", opts, args.seed or 0)
    x, hist = tv_reconstruct(corruption, y, (h, w), args.lam, args.alpha, args.iters, x_true=x_true, select=args.select)
    write_blocks(out / "reconstruction", x)
    _write_csv(out / "loss.csv", ["iteration", "objective"], [[i, repr(v)] for i, v in enumerate(hist["loss"])])
    print(f"TV reconstruction written to {out}")
    return 0


def cmd_reproduce(args) -> int:
    """Run a preset's whole experiment and print a JSON summary."""
    from .experiments import run_mnist, run_sinusoid

    cfg = _resolve_run_config(args)
    if args.dry_run:
        print(json.dumps(cfg, indent=1))
        return 0
    out = _out_dir(args, f"reproduce-{cfg['experiment']}")
    _write_echo(out, "reproduce", {**cfg, "tier": args.tier}, cfg["seed"])
    try:
        if cfg["experiment"] == "mnist14":
            res = run_mnist(cfg, out)
        else:
            res = run_sinusoid(cfg, out_dir=out)
    except (FileNotFoundError, IdxFormatError) as exc:
        raise DataError(str(exc)) from exc
    except TrainingDiverged as exc:
        raise NumericError(str(exc)) from exc
    summary = {k: v for k, v in res.items() if k not in ("state", "rae")}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, default=float))
    print(json.dumps(summary, default=float))
    return 0


# -- parser ---------------------------------------------------------------------------------

COMMAND_OPTIONS = {
    "sample": ("checkpoint", "count", "pgm"),
    "rae": ("checkpoint", "dataset", "points", "prior_samples", "latent_dim", "epsilon"),
    "geodesic": ("checkpoint", "dataset", "start", "end", "steps"),
    "invert": ("checkpoint", "rae", "operator", "measurement", "ground_truth", "alpha", "iters", "select", "certificate"),
    "check-rip": ("checkpoint", "rae", "operator", "pairs"),
    "check": ("checkpoint", "rae", "operator", "pairs"),
    "tv": ("operator", "measurement", "shape", "lam", "alpha", "iters", "select", "ground_truth"),
}


def _common(p):
    p.add_argument("--config", help="JSON config (or a config.json echo from an earlier run)")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ENV} or ./runs)")
    p.add_argument("--dry-run", action="store_true", help="validate inputs and exit")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="raf", description="Flow priors and Riemannian autoencoders from corrupted data")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("train", "reproduce"):
        p = sub.add_parser(name)
        _common(p)
        p.add_argument("--preset", choices=sorted(presets.PRESETS))
        p.add_argument("--tier", choices=("smoke", "full"), default="full" if name == "train" else "smoke")
        p.set_defaults(func=cmd_train if name == "train" else cmd_reproduce)

    p = sub.add_parser("sample")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--count", type=int)
    p.add_argument("--pgm", action="store_true", help="also write a grayscale grid for image data")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("rae")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--dataset", help="dataset directory whose clean references are used")
    p.add_argument("--points", help="extra points (JSON array or block manifest)")
    p.add_argument("--prior-samples", type=int)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--epsilon", type=float)
    p.set_defaults(func=cmd_rae)

    p = sub.add_parser("geodesic")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--start", help="JSON array or dataset index")
    p.add_argument("--end", help="JSON array or dataset index")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_geodesic)

    p = sub.add_parser("invert")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--rae")
    p.add_argument("--operator", help="operator spec JSON (corruption model or {'matrix': ...})")
    p.add_argument("--measurement")
    p.add_argument("--ground-truth")
    p.add_argument("--alpha", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--select", choices=("final", "best-mse"))
    p.add_argument("--certificate", action="store_true", default=None)
    p.set_defaults(func=cmd_invert)

    for name in ("check-rip", "check"):
        p = sub.add_parser(name)
        _common(p)
        p.add_argument("--checkpoint")
        p.add_argument("--rae")
        p.add_argument("--operator")
        p.add_argument("--pairs", type=int)
        p.set_defaults(func=cmd_check)

    p = sub.add_parser("tv")
    _common(p)
    p.add_argument("--operator")
    p.add_argument("--measurement")
    p.add_argument("--ground-truth")
    p.add_argument("--shape", help="image shape, e.g. 14x14")
    p.add_argument("--lam", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--select", choices=("final", "best-mse"))
    p.set_defaults(func=cmd_tv)
    return parser


DEFAULTS = {
    "count": None, "pgm": False, "steps": 11, "alpha": 1e-2, "iters": 500, "select": "final", "certificate": False,
    "pairs": 10000, "lam": 8.0, "prior_samples": 0,
}
REQUIRED = {
    "sample": ("checkpoint", "count"),
    "rae": ("checkpoint",),
    "geodesic": ("checkpoint", "start", "end"),
    "invert": ("checkpoint", "rae", "operator", "measurement"),
    "check-rip": ("checkpoint", "rae", "operator"),
    "check": ("checkpoint", "rae", "operator"),
    "tv": ("operator", "measurement", "shape"),
}


def _merge_options(args) -> None:
    """Fill unset options from ``--config`` (strict keys), then from defaults."""
    allowed = COMMAND_OPTIONS[args.command]
    if args.config:
        doc = _read_json(args.config, "config")
        if isinstance(doc, dict) and "options" in doc:
            if args.seed is None and "seed" in doc:
                args.seed = doc["seed"]
            doc = doc["options"]
        if not isinstance(doc, dict):
            raise UsageError("config: expected an object")
        for key, value in doc.items():
            if key not in allowed:
                raise UsageError(f"config.{key}: unknown key for '{args.command}'")
            if getattr(args, key, None) is None:
                setattr(args, key, value)
    for key in allowed:
        if getattr(args, key, None) is None and key in DEFAULTS:
            setattr(args, key, DEFAULTS[key])
    missing = [k for k in REQUIRED[args.command] if getattr(args, k, None) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command in COMMAND_OPTIONS:
            _merge_options(args)
        return args.func(args)
    except (UsageError, presets.ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError, IdxFormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, TrainingDiverged, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
