"""Config-driven building blocks shared by the CLI and replicate studies."""

from __future__ import annotations

import itertools
import math

import numpy as np

from .config import KERNEL_PRESETS, ExperimentConfig
from .data import flatten, split_by_trajectory
from .estimator import KernelEmbeddingOPE
from .evaluation import heldout_risk
from .exceptions import KedrlError
from .kernel import MaternParams
from .sim_env import generate_dataset, mc_reference

__all__ = [
    "simulate_from_config",
    "estimator_from_config",
    "fit_from_config",
    "mc_from_config",
    "sweep_cells",
    "run_sweep",
]


def simulate_from_config(cfg: ExperimentConfig, seed=None) -> list:
    seed = cfg.seed if seed is None else seed
    sim = cfg.simulation
    return generate_dataset(cfg.dynamics(), cfg.policy("behavior"), sim.n_trajectories, sim.horizon, seed=seed)


def estimator_from_config(cfg: ExperimentConfig, seed=None) -> KernelEmbeddingOPE:
    s, a = cfg.query
    return KernelEmbeddingOPE(
        target_policy=cfg.policy("target"),
        query_state=s,
        query_action=a,
        discount=cfg.discount,
        return_kernel=cfg.return_kernel,
        input_kernel=cfg.input_kernel,
        ratio_kernel=cfg.ratio_kernel,
        lambda_reg=cfg.lambda_reg,
        lambda_ulsif=cfg.lambda_ulsif,
        n_clusters=cfg.grid.k,
        expansion_factor=cfg.grid.expansion_factor,
        phi_form=cfg.phi_form,
        optimizer=cfg.optimizer,
        random_state=cfg.seed if seed is None else seed,
    )


def split_from_config(cfg: ExperimentConfig, trajectories, seed=None):
    seed = cfg.seed if seed is None else seed
    full = flatten(trajectories, cfg.discount)
    return split_by_trajectory(full, cfg.split, seed, gamma=cfg.discount)


def fit_from_config(cfg: ExperimentConfig, trajectories, seed=None):
    """Split, then fit on the training part. Returns ``(estimator, splits)``."""
    splits = split_from_config(cfg, trajectories, seed)
    est = estimator_from_config(cfg, seed).fit(splits[0])
    return est, splits


def mc_from_config(cfg: ExperimentConfig, seed=None) -> np.ndarray:
    seed = cfg.seed if seed is None else seed
    s, a = cfg.query
    samples, _ = mc_reference(
        cfg.dynamics(), cfg.policy("target"), s, a, cfg.mc.n_trajectories, cfg.mc.horizon, cfg.discount, seed
    )
    return samples


def sweep_cells(cfg: ExperimentConfig) -> list:
    """Hyperparameter combinations as dicts, grid product first then presets."""
    sw = cfg.sweep
    base_amp = math.sqrt(cfg.return_kernel.variance)
    axes = {
        "nu": [cfg.return_kernel.nu],
        "length_scale": [cfg.return_kernel.length_scale],
        "amplitude": [base_amp],
        "lambda_reg": [cfg.lambda_reg],
        "lambda_fp": [cfg.optimizer.lambda_fp],
    }
    if sw is not None:
        for key in axes:
            if getattr(sw, key) is not None:
                axes[key] = list(getattr(sw, key))
    cells = [
        dict(zip(axes, combo), expansion_factor=cfg.grid.expansion_factor)
        for combo in itertools.product(*axes.values())
    ]
    if sw is not None and sw.presets:
        for nu, ls, amp, lam, lfp, ef in KERNEL_PRESETS:
            cells.append(
                {"nu": nu, "length_scale": ls, "amplitude": amp, "lambda_reg": lam, "lambda_fp": lfp, "expansion_factor": ef}
            )
    return cells


def _cell_config(cfg: ExperimentConfig, cell: dict) -> ExperimentConfig:
    kernel = MaternParams(cell["nu"], cell["length_scale"], cell["amplitude"] ** 2)
    grid = type(cfg.grid)(cfg.grid.k, cell["expansion_factor"])
    opt = type(cfg.optimizer)(**{**cfg.optimizer.to_dict(), "lambda_fp": cell["lambda_fp"]})
    return cfg.replace(return_kernel=kernel, lambda_reg=cell["lambda_reg"], grid=grid, optimizer=opt)


def run_sweep(cfg: ExperimentConfig, trajectories, seed=None) -> list:
    """Fit each cell on the training split and score it on validation.

    Failed cells are kept with their error message and sort last.
    """
    rows = []
    for cell in sweep_cells(cfg):
        row = dict(cell, val_risk=float("nan"), status="ok", error="")
        try:
            cell_cfg = _cell_config(cfg, cell)
            est, splits = fit_from_config(cell_cfg, trajectories, seed)
            holdout = splits[1] if splits[1] is not None else splits[2]
            if holdout is None:
                raise KedrlError("the split leaves no validation or test trajectories")
            row["val_risk"] = heldout_risk(est.model_, holdout)
        except KedrlError as exc:
            row["status"] = "failed"
            row["error"] = str(exc)
        rows.append(row)
    rows.sort(key=lambda r: (r["status"] != "ok", r["val_risk"] if r["status"] == "ok" else 0.0))
    for rank, row in enumerate(rows, start=1):
        row["rank"] = rank
    return rows
