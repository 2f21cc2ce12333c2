"""Accuracy metrics for fitted embeddings and replicate studies."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bellman import EmbeddingModel, omega
from .cme import clamp_squared_norm
from .data import TransitionDataset, flatten
from .exceptions import InvalidInputError
from .kernel import gram, kernel_matvec

__all__ = [
    "OPEReport",
    "heldout_risk",
    "embedding_error",
    "evaluation_points",
    "mc_embedding",
    "replicate_study",
    "w1_1d",
]


@dataclass
class OPEReport:
    """Metrics for one fit, or aggregates over replicates.

    For an aggregate, ``bias``/``rmse``/``mae`` are replicate means, the
    ``*_sd`` fields are sample standard deviations (None for one replicate)
    and ``replicates`` holds the per-replicate reports.
    """

    bias: float
    rmse: float
    mae: float
    residuals: list = field(default_factory=list, repr=False)
    heldout_risk: float = None
    config: dict = field(default_factory=dict)
    bias_sd: float = None
    rmse_sd: float = None
    mae_sd: float = None
    replicates: list = field(default_factory=list, repr=False)
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["residuals"] = [float(v) for v in self.residuals]
        out["replicates"] = [r.to_dict() for r in self.replicates]
        return out

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True, default=float)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    def to_csv(self, path) -> None:
        """One row per replicate (or a single row), metric columns only."""
        rows = self.replicates or [self]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["replicate", "bias", "rmse", "mae", "heldout_risk"])
            for i, r in enumerate(rows):
                writer.writerow([i, r.bias, r.rmse, r.mae, "" if r.heldout_risk is None else r.heldout_risk])

    @classmethod
    def aggregate(cls, reports, config=None) -> "OPEReport":
        reports = list(reports)
        if not reports:
            raise InvalidInputError("nothing to aggregate")
        stats = {}
        for name in ("bias", "rmse", "mae"):
            vals = np.array([getattr(r, name) for r in reports])
            stats[name] = float(vals.mean())
            stats[name + "_sd"] = float(vals.std(ddof=1)) if vals.size > 1 else None
        risks = [r.heldout_risk for r in reports if r.heldout_risk is not None]
        return cls(
            residuals=[],
            heldout_risk=float(np.mean(risks)) if risks else None,
            config=dict(config or {}),
            replicates=reports,
            **stats,
        )


def _returns_of(test: TransitionDataset, discount: float) -> np.ndarray:
    if test.trajectories:
        return flatten(test.trajectories, discount).returns_to_go
    if test.returns_to_go is None:
        raise InvalidInputError("test set carries no realized returns")
    return test.returns_to_go


def heldout_risk(model: EmbeddingModel, test: TransitionDataset, discount: float = None) -> float:
    """Mean squared RKHS distance between predicted embeddings and realized returns.

    For each held-out transition ``j`` with realized return ``y_j``:
    ``k(y_j, y_j) - 2 w_j^T k(Z, y_j) + w_j^T K_Z w_j`` with ``w_j = B^T k(X, x_j)``.
    """
    if test is None or len(test) == 0:
        raise InvalidInputError("empty test set")
    discount = model.gamma_discount if discount is None else discount
    y = _returns_of(test, discount)
    w = omega(model, test.inputs)  # (n_test, m)
    atoms = model.grid.atoms
    kz = model.k_z_params
    cross = gram(y, atoms, kz)  # (n_test, m)
    k_grid = gram(atoms, params=kz)
    quad = np.einsum("ij,jk,ik->i", w, k_grid, w)
    per_point = kz.variance - 2.0 * np.sum(w * cross, axis=1) + quad
    aw = np.abs(w)
    scales = kz.variance + 2.0 * np.sum(aw * cross, axis=1) + np.einsum("ij,jk,ik->i", aw, k_grid, aw)
    vals = [clamp_squared_norm(v, s, "held-out risk term") for v, s in zip(per_point, scales)]
    return float(np.mean(vals))


def evaluation_points(mc_samples, points_per_dim: int = 25, pad: float = 0.1) -> np.ndarray:
    """Regular grid over the sample bounding box widened by ``pad`` per side."""
    x = np.asarray(mc_samples, dtype=float)
    x = x.reshape(-1, 1) if x.ndim == 1 else x
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    axes = [np.linspace(l - pad * s, h + pad * s, points_per_dim) for l, h, s in zip(lo, hi, span)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def mc_embedding(mc_samples, eval_points, k_z, weights=None) -> np.ndarray:
    """``sum_i w_i k(x_i, z)`` at each evaluation point (uniform ``w`` by default)."""
    x = np.asarray(mc_samples, dtype=float)
    x = x.reshape(-1, 1) if x.ndim == 1 else x
    w = np.full(x.shape[0], 1.0 / x.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    return kernel_matvec(eval_points, x, w, k_z)


def embedding_error(model: EmbeddingModel, mc_samples, eval_points, query, mc_weights=None, reference=None):
    """Residuals of the fitted embedding against the Monte-Carlo embedding.

    Returns ``(bias, rmse, mae, residuals)``. ``reference`` may carry
    precomputed Monte-Carlo embedding values at ``eval_points``.
    """
    pts = np.asarray(eval_points, dtype=float)
    pts = pts.reshape(-1, model.grid.dim) if pts.ndim == 1 else pts
    if pts.shape[0] == 0:
        raise InvalidInputError("empty evaluation grid")
    w = omega(model, query)
    fitted = gram(pts, model.grid.atoms, model.k_z_params) @ w
    ref = mc_embedding(mc_samples, pts, model.k_z_params, mc_weights) if reference is None else np.asarray(reference)
    e = fitted - ref
    return float(e.mean()), float(math.sqrt(np.mean(e * e))), float(np.mean(np.abs(e))), e


def w1_1d(samples_a, samples_b) -> float:
    """Wasserstein-1 distance between two equal-size 1-D samples."""
    a = np.sort(np.asarray(samples_a, dtype=float).ravel())
    b = np.sort(np.asarray(samples_b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise InvalidInputError("empty sample")
    if a.size != b.size:
        raise InvalidInputError("samples must have equal length")
    return float(np.mean(np.abs(a - b)))


def replicate_study(scenario, n_replicates: int, seed=0, progress=None) -> OPEReport:
    """Repeat simulate, fit and evaluate on independent datasets.

    ``scenario`` is an :class:`~kedrl.config.ExperimentConfig`. The Monte
    Carlo reference is computed once; replicate ``r`` uses the ``r``-th child
    of ``SeedSequence(seed)`` for both data generation and fitting.
    """
    from .pipeline import fit_from_config, mc_from_config, simulate_from_config

    if n_replicates < 1:
        raise InvalidInputError("need at least one replicate")
    mc = mc_from_config(scenario, seed)
    points = evaluation_points(mc, scenario.evaluation.points_per_dim, scenario.evaluation.pad)
    ref = mc_embedding(mc, points, scenario.return_kernel)
    reports = []
    for r, child in enumerate(np.random.SeedSequence(seed).spawn(n_replicates)):
        rep_seed = int(child.generate_state(1)[0])
        trajs = simulate_from_config(scenario, rep_seed)
        est, splits = fit_from_config(scenario, trajs, rep_seed)
        bias, rmse, mae, res = embedding_error(est.model_, mc, points, est.query_, reference=ref)
        risk = heldout_risk(est.model_, splits[2]) if splits[2] is not None else None
        reports.append(
            OPEReport(bias, rmse, mae, list(res), risk, extras={"seed": rep_seed, "mass": float(est.omega_.sum())})
        )
        if progress is not None:
            progress(r, reports[-1])
    return OPEReport.aggregate(reports, scenario.to_dict())
