"""Penalized Bellman-MMD objective over ``B`` and its AdamW minimizer."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .bellman import BellmanOperators
from .exceptions import InvalidInputError, NumericalError

__all__ = [
    "OptimizerConfig",
    "OptimizationTrace",
    "loss",
    "loss_terms",
    "loss_gradient",
    "init_coefficients",
    "optimize",
]


@dataclass(frozen=True)
class OptimizerConfig:
    """AdamW settings and penalty weights.

    ``tol`` stops early once the gradient Frobenius norm drops below it;
    zero means run all ``steps``.
    """

    steps: int = 2000
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_adam: float = 1e-8
    weight_decay: float = 1e-4
    lambda_fp: float = 100.0
    lambda_mass: float = 10.0
    tol: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise InvalidInputError(f"steps must be a positive integer, got {self.steps}")
        if not self.learning_rate > 0:
            raise InvalidInputError("learning_rate must be positive")
        for name in ("beta1", "beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise InvalidInputError(f"{name} must lie in (0, 1)")
        if not self.epsilon_adam > 0:
            raise InvalidInputError("epsilon_adam must be positive")
        for name in ("weight_decay", "lambda_fp", "lambda_mass", "tol"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise InvalidInputError(f"{name} must be finite and nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimizationTrace:
    """Per-step diagnostics, recorded before each parameter update."""

    objective: list = field(default_factory=list)
    gamma_sq: list = field(default_factory=list)
    fp_residual: list = field(default_factory=list)
    mass_residual: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)

    COLUMNS = ("objective", "gamma_sq", "fp_residual", "mass_residual", "grad_norm")

    def __len__(self) -> int:
        return len(self.objective)

    def append(self, **values) -> None:
        for name in self.COLUMNS:
            getattr(self, name).append(float(values[name]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("step",) + self.COLUMNS)
            for t in range(len(self)):
                writer.writerow([t] + [repr(getattr(self, c)[t]) for c in self.COLUMNS])


def _unpack(k_vec, Phi, K_Z, H, G, B):
    k = np.asarray(k_vec, dtype=float).ravel()
    phi = np.asarray(Phi, dtype=float).ravel()
    b = np.asarray(B, dtype=float)
    n, m = b.shape
    if k.size != n or phi.size != n:
        raise InvalidInputError(f"k_vec and Phi must have length {n}")
    for name, mat in (("K_Z", K_Z), ("H", H), ("G", G)):
        if np.shape(mat) != (m, m):
            raise InvalidInputError(f"{name} has shape {np.shape(mat)}, expected {(m, m)}")
    return k, phi, b


def loss_terms(B, k_vec, Phi, K_Z, H, G, cfg: OptimizerConfig) -> dict:
    """Objective value split into its parts."""
    k, phi, b = _unpack(k_vec, Phi, K_Z, H, G, B)
    w = b.T @ k
    v = b.T @ phi
    gap = b.T @ (k - phi)
    g2 = float(w @ K_Z @ w - 2.0 * (w @ H @ v) + v @ G @ v)
    fp = float(gap @ gap)
    mass = float(w.sum() - 1.0)
    return {
        "objective": g2 + cfg.lambda_fp * fp + cfg.lambda_mass * mass * mass,
        "gamma_sq": g2,
        "fp_residual": fp,
        "mass_residual": mass,
    }


def loss(B, k_vec, Phi, K_Z, H, G, cfg: OptimizerConfig) -> float:
    """Bellman MMD plus the fixed-point and unit-mass penalties."""
    return loss_terms(B, k_vec, Phi, K_Z, H, G, cfg)["objective"]


def loss_gradient(B, k_vec, Phi, K_Z, H, G, cfg: OptimizerConfig) -> np.ndarray:
    """Exact gradient of :func:`loss` with respect to ``B``.

    With ``w = B^T k`` and ``v = B^T Phi`` the chain rule gives
    ``k dL/dw^T + Phi dL/dv^T + 2 lambda_fp (k - Phi)(k - Phi)^T B``.
    """
    k, phi, b = _unpack(k_vec, Phi, K_Z, H, G, B)
    K_Z, H, G = (np.asarray(a, dtype=float) for a in (K_Z, H, G))
    w = b.T @ k
    v = b.T @ phi
    diff = k - phi
    d_w = (K_Z + K_Z.T) @ w - 2.0 * (H @ v) + 2.0 * cfg.lambda_mass * (w.sum() - 1.0)
    d_v = (G + G.T) @ v - 2.0 * (H.T @ w)
    return np.outer(k, d_w) + np.outer(phi, d_v) + 2.0 * cfg.lambda_fp * np.outer(diff, diff @ b)


def init_coefficients(n: int, m: int, seed=0) -> np.ndarray:
    """Uniform draws on ``(-1/sqrt(nm), 1/sqrt(nm))``."""
    bound = 1.0 / math.sqrt(n * m)
    return np.random.default_rng(seed).uniform(-bound, bound, size=(n, m))


def optimize(B_init, operators: BellmanOperators, cfg: OptimizerConfig = None):
    """Run AdamW with bias correction and decoupled weight decay.

    Returns the final coefficients and the trace. Raises
    :class:`NumericalError` (carrying the partial trace) on non-finite values.
    """
    cfg = cfg or OptimizerConfig()
    b = np.array(B_init, dtype=float)
    args = (operators.k_vec, operators.Phi, operators.K_Z, operators.H, operators.G)
    _unpack(*args, b)
    trace = OptimizationTrace()
    m1 = np.zeros_like(b)
    m2 = np.zeros_like(b)
    decay = 1.0 - cfg.learning_rate * cfg.weight_decay
    for t in range(1, cfg.steps + 1):
        terms = loss_terms(b, *args, cfg)
        grad = loss_gradient(b, *args, cfg)
        gnorm = float(np.linalg.norm(grad))
        trace.append(grad_norm=gnorm, **terms)
        if not (math.isfinite(terms["objective"]) and math.isfinite(gnorm)):
            raise NumericalError("objective or gradient became non-finite", {"step": t, "trace": trace})
        if gnorm < cfg.tol:
            break
        m1 = cfg.beta1 * m1 + (1.0 - cfg.beta1) * grad
        m2 = cfg.beta2 * m2 + (1.0 - cfg.beta2) * grad * grad
        m_hat = m1 / (1.0 - cfg.beta1**t)
        v_hat = m2 / (1.0 - cfg.beta2**t)
        b = b - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon_adam)
        b *= decay
    return b, trace
