"""Command-line driver: simulate, fit, evaluate, recover and sweep.

Exit codes: 0 success, 2 invalid input or config, 3 numerical failure, 4 I/O.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .bellman import EmbeddingModel, omega, set_num_threads
from .config import ExperimentConfig, load_config
from .data import read_manifest, read_trajectories_csv, write_manifest, write_trajectories_csv
from .evaluation import OPEReport, embedding_error, evaluation_points, heldout_risk, mc_embedding
from .exceptions import InvalidInputError, KedrlError, NumericalError
from .kernel import gram
from .pipeline import fit_from_config, mc_from_config, run_sweep, simulate_from_config, split_from_config
from .stats import TestFunction, default_bandwidth, recover, recover_normalized, smooth_cdf_curve

__all__ = ["main", "cmd_simulate", "cmd_fit", "cmd_evaluate", "cmd_recover", "cmd_sweep"]

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4

DATA_FILE = "trajectories.csv"
MANIFEST_FILE = "manifest.json"


def _data_csv(path) -> Path:
    p = Path(path)
    return p / DATA_FILE if p.is_dir() else p


def _load_trajectories(path):
    csv_path = _data_csv(path)
    manifest = csv_path.parent / MANIFEST_FILE
    dims = None
    if manifest.exists():
        m = read_manifest(manifest)["dims"]
        dims = (m["state"], m["action"], m["reward"])
    return read_trajectories_csv(csv_path, dims)


def cmd_simulate(cfg: ExperimentConfig, out: Path, seed: int) -> Path:
    """Write behavior-policy trajectories and a manifest into ``out``."""
    trajs = simulate_from_config(cfg, seed)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectories_csv(trajs, out / DATA_FILE)
    write_manifest(
        out / MANIFEST_FILE,
        trajs[0].dims,
        cfg.discount,
        seed,
        n_trajectories=len(trajs),
        horizon=cfg.simulation.horizon,
        config=cfg.to_dict(),
    )
    return out / DATA_FILE


def cmd_fit(cfg: ExperimentConfig, data_path, out: Path, seed: int) -> Path:
    """Fit on the training split and save model, trace and a fit summary."""
    trajs = _load_trajectories(data_path)
    est, splits = fit_from_config(cfg, trajs, seed)
    out.mkdir(parents=True, exist_ok=True)
    model_dir = est.model_.save(out / "model")
    est.trace_.to_csv(out / "trace.csv")
    est.ratio_model_.save(out / "ratio_model.json")
    est.grid_.to_csv(out / "grid.csv")
    summary = {
        "config": cfg.to_dict(),
        "seed": seed,
        "data": str(_data_csv(data_path)),
        "n_train_transitions": len(splits[0]),
        "grid_atoms": est.grid_.size,
        "mass": float(est.omega_.sum()),
        "final_objective": est.trace_.objective[-1],
        "timings": est.timings_,
    }
    (out / "fit.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return model_dir


def _read_samples(path) -> np.ndarray:
    arr = np.loadtxt(path, delimiter=",", ndmin=2, comments="#")
    if arr.size == 0:
        raise InvalidInputError(f"{path} holds no samples")
    return arr


def _write_slices(path, model: EmbeddingModel, mc, query, n_points: int = 101):
    """Per-coordinate slices through the Monte-Carlo mean: x, fitted, reference."""
    center = mc.mean(axis=0)
    lo, hi = mc.min(axis=0), mc.max(axis=0)
    w = omega(model, query)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["coord", "x", "mu_hat", "mu_mc"])
        for c in range(mc.shape[1]):
            pad = 0.1 * (hi[c] - lo[c])
            xs = np.linspace(lo[c] - pad, hi[c] + pad, n_points)
            pts = np.tile(center, (n_points, 1))
            pts[:, c] = xs
            fitted = gram(pts, model.grid.atoms, model.k_z_params) @ w
            ref = mc_embedding(mc, pts, model.k_z_params)
            for x, f, r in zip(xs, fitted, ref):
                writer.writerow([c, repr(float(x)), repr(float(f)), repr(float(r))])


def cmd_evaluate(cfg: ExperimentConfig, model_path, out: Path, seed: int, mc_path=None, data_path=None) -> OPEReport:
    """Compare the saved model with a Monte-Carlo reference and score held-out data."""
    model = EmbeddingModel.load(model_path)
    query = model.query if model.query is not None else np.concatenate(cfg.query)
    mc = _read_samples(mc_path) if mc_path is not None else mc_from_config(cfg, seed)
    if mc.shape[1] != model.grid.dim:
        raise InvalidInputError(f"reference samples have dimension {mc.shape[1]}, model {model.grid.dim}")
    points = evaluation_points(mc, cfg.evaluation.points_per_dim, cfg.evaluation.pad)
    bias, rmse, mae, res = embedding_error(model, mc, points, query)
    risk = None
    if data_path is not None and _data_csv(data_path).exists():
        splits = split_from_config(cfg, _load_trajectories(data_path), seed)
        if splits[2] is not None:
            risk = heldout_risk(model, splits[2])
    report = OPEReport(bias, rmse, mae, list(res), risk, cfg.to_dict(), extras={"seed": seed, "mass": float(omega(model, query).sum())})
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / "report.json")
    report.to_csv(out / "report.csv")
    _write_slices(out / "plot_slices.csv", model, mc, query)
    np.savetxt(out / "mc_samples.csv", mc, delimiter=",", fmt="%.17g")
    return report


def _statistics(spec: dict, model: EmbeddingModel, w: np.ndarray) -> dict:
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind is None:
        raise InvalidInputError("statistic needs a 'kind'")
    if kind == "mass":
        return {"statistic": "mass", "params": {}, "raw": float(w.sum()), "clipped": float(np.clip(w, 0, None).sum())}
    if kind == "smooth_cdf_curve":
        coords = spec.pop("coord", None)
        coords = range(model.grid.dim) if coords is None else [int(coords)]
        n_points = int(spec.pop("n_points", 50))
        thresholds = spec.pop("thresholds", None)
        h_factor = float(spec.pop("bandwidth_factor", 0.25))
        if spec:
            raise InvalidInputError(f"unknown smooth_cdf_curve keys: {sorted(spec)}")
        raw, clipped, params = {}, {}, {}
        for c in coords:
            z = model.grid.atoms[:, c]
            t = np.linspace(z.min(), z.max(), n_points) if thresholds is None else np.asarray(thresholds, float)
            h = default_bandwidth(model.grid, c, h_factor)
            curve = smooth_cdf_curve(w, model.grid, t, h, coord=c if model.grid.dim > 1 else None)
            params[str(c)] = {"thresholds": t.tolist(), "bandwidth": h}
            raw[str(c)] = curve.raw.tolist()
            clipped[str(c)] = curve.clipped.tolist()
        return {"statistic": kind, "params": params, "raw": raw, "clipped": clipped}
    allowed = {"threshold", "bandwidth", "direction", "coord", "alpha", "order", "level"}
    extra = set(spec) - allowed
    if extra:
        raise InvalidInputError(f"unknown statistic keys: {sorted(extra)}")
    kw = dict(spec)
    if kind == "kernel_density":
        kw["kernel"] = model.k_z_params
    g = TestFunction(kind, **kw)
    return {
        "statistic": kind,
        "params": spec,
        "raw": recover(w, model.grid, g),
        "clipped": recover_normalized(w, model.grid, g),
    }


def cmd_recover(cfg: ExperimentConfig, model_path, out: Path, spec=None) -> dict:
    """Evaluate a statistic (or the configured list) at the model's query."""
    model = EmbeddingModel.load(model_path)
    query = model.query if model.query is not None else np.concatenate(cfg.query)
    w = omega(model, query)
    if spec is None:
        spec = cfg.recover or {"statistics": [{"kind": "mass"}, {"kind": "smooth_cdf_curve"}]}
    specs = spec.get("statistics", [spec]) if isinstance(spec, dict) else spec
    results = [_statistics(s, model, w) for s in specs]
    payload = results[0] if len(results) == 1 else {"results": results}
    out.mkdir(parents=True, exist_ok=True)
    (out / "recover.json").write_text(json.dumps(payload, indent=2) + "\n")
    return payload


def cmd_sweep(cfg: ExperimentConfig, data_path, out: Path, seed: int) -> Path:
    """Rank hyperparameter cells by validation risk into ``leaderboard.csv``."""
    rows = run_sweep(cfg, _load_trajectories(data_path), seed)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["rank", "nu", "length_scale", "amplitude", "lambda_reg", "lambda_fp", "expansion_factor", "val_risk", "status", "error"]
    path = out / "leaderboard.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row[c] for c in cols})
    (out / "sweep_config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    return path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kedrl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate", "fit", "evaluate", "recover", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--out", default="out", help="output directory")
        if name in ("fit", "evaluate", "sweep"):
            p.add_argument("--data", default=None, help="trajectory CSV or its directory (default: OUT)")
        if name in ("evaluate", "recover"):
            p.add_argument("--model", default=None, help="saved model directory (default: OUT/model)")
        if name == "evaluate":
            p.add_argument("--mc-samples", default=None, help="CSV of reference return samples")
        if name == "recover":
            p.add_argument("--statistic", default=None, help="JSON statistic spec")
    return parser


def _run(args) -> int:
    set_num_threads()
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    if args.seed is not None:
        cfg = cfg.replace(seed=seed)
    out = Path(args.out)
    data = Path(args.data) if getattr(args, "data", None) else out
    model = Path(args.model) if getattr(args, "model", None) else out / "model"
    if args.command == "simulate":
        print(cmd_simulate(cfg, out, seed))
    elif args.command == "fit":
        print(cmd_fit(cfg, data, out, seed))
    elif args.command == "evaluate":
        report = cmd_evaluate(cfg, model, out, seed, args.mc_samples, data)
        print(f"bias={report.bias:.6g} rmse={report.rmse:.6g} mae={report.mae:.6g} heldout_risk={report.heldout_risk}")
    elif args.command == "recover":
        spec = None
        if args.statistic:
            try:
                spec = json.loads(args.statistic)
            except json.JSONDecodeError as exc:
                raise InvalidInputError(f"--statistic is not valid JSON: {exc}") from None
        print(json.dumps(cmd_recover(cfg, model, out, spec))[:2000])
    else:
        print(cmd_sweep(cfg, data, out, seed))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except NumericalError as exc:
        print(f"kedrl {args.command}: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InvalidInputError, KedrlError) as exc:
        print(f"kedrl {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"kedrl {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
