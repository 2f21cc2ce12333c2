"""Conditional mean embedding weights and RKHS reads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .exceptions import InvalidInputError, NumericalError
from .kernel import MaternParams, gram

__all__ = [
    "RidgeWeights",
    "SPDSolver",
    "ridge_weights",
    "embed_eval",
    "mmd_sq",
    "clamp_squared_norm",
]

MAX_JITTER_STEPS = 3
RESIDUAL_TOL = 1e-8


class SPDSolver:
    """Cholesky factorization of ``A + shift*I`` computed once and reused.

    If the factorization fails, a jitter of ``10*eps*trace/n`` is added to the
    diagonal and multiplied by ten up to three more times.

    Parameters
    ----------
    matrix : ndarray of shape (n, n)
        Symmetric positive semidefinite matrix.
    shift : float
        Positive ridge added to the diagonal.
    """

    def __init__(self, matrix, shift: float):
        a = np.asarray(matrix, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise InvalidInputError(f"expected a square matrix, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise InvalidInputError("matrix contains non-finite values")
        if not (np.isfinite(shift) and shift > 0):
            raise InvalidInputError(f"regularization must be positive, got {shift}")
        n = a.shape[0]
        self.matrix = a
        self.shift = float(shift)
        system = a + self.shift * np.eye(n)
        base = 10.0 * np.finfo(float).eps * max(np.trace(a), 1.0) / max(n, 1)
        jitter, attempts = 0.0, []
        for step in range(MAX_JITTER_STEPS + 1):
            try:
                self._factor = cho_factor(system + jitter * np.eye(n), lower=True, check_finite=False)
                break
            except LinAlgError as exc:
                attempts.append((jitter, str(exc)))
                jitter = base * 10.0**step
        else:
            raise NumericalError(
                "Cholesky factorization failed after jitter escalation",
                {"n": n, "shift": shift, "attempts": attempts},
            )
        self.jitter = jitter
        self._system = system

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def solve(self, rhs) -> np.ndarray:
        b = np.asarray(rhs, dtype=float)
        if b.shape[0] != self.size:
            raise InvalidInputError(f"right-hand side has {b.shape[0]} rows, expected {self.size}")
        x = cho_solve(self._factor, b, check_finite=False)
        # one round of refinement against the unjittered system
        residual = b - self._system @ x
        x = x + cho_solve(self._factor, residual, check_finite=False)
        residual = b - self._system @ x
        scale = np.linalg.norm(b)
        if np.linalg.norm(residual) > RESIDUAL_TOL * scale and scale > 0:
            raise NumericalError(
                "linear solve residual above tolerance",
                {"residual": float(np.linalg.norm(residual)), "rhs_norm": float(scale), "jitter": self.jitter},
            )
        return x


@dataclass(frozen=True)
class RidgeWeights:
    """Embedding weights ``(K + lambda I)^{-1} k(x)`` for one query."""

    gamma: np.ndarray
    lambda_reg: float
    query: np.ndarray = None

    def __post_init__(self):
        g = np.array(self.gamma, dtype=float).ravel()
        if not np.all(np.isfinite(g)):
            raise NumericalError("ridge weights are not finite")
        g.setflags(write=False)
        object.__setattr__(self, "gamma", g)

    def __len__(self) -> int:
        return self.gamma.shape[0]


def ridge_weights(gram_matrix, k_vec, lambda_reg: float, query=None, solver: SPDSolver = None) -> RidgeWeights:
    """Solve ``(K + lambda I) gamma = k_vec``.

    ``lambda_reg`` is an absolute ridge, not scaled by the sample size. Pass a
    prebuilt ``solver`` to reuse its factorization across queries.
    """
    if solver is None:
        solver = SPDSolver(gram_matrix, lambda_reg)
    elif solver.shift != lambda_reg:
        raise InvalidInputError("solver was built with a different regularization")
    k = np.asarray(k_vec, dtype=float).ravel()
    return RidgeWeights(solver.solve(k), float(lambda_reg), None if query is None else np.asarray(query, dtype=float))


def _weights_array(weights) -> np.ndarray:
    if isinstance(weights, RidgeWeights):
        return weights.gamma
    return np.asarray(weights, dtype=float).ravel()


def embed_eval(weights, outputs, query_points, k_z: MaternParams) -> np.ndarray:
    """Evaluate ``z -> sum_j w_j k(y_j, z)`` at each row of ``query_points``."""
    w = _weights_array(weights)
    y = np.asarray(outputs, dtype=float)
    if y.ndim == 1:
        y = y.reshape(-1, 1)
    if y.shape[0] != w.shape[0]:
        raise InvalidInputError(f"{y.shape[0]} outputs for {w.shape[0]} weights")
    z = np.asarray(query_points, dtype=float)
    if z.ndim == 1:
        z = z.reshape(-1, y.shape[1])
    return gram(z, y, k_z) @ w


def clamp_squared_norm(value: float, scale: float = 1.0, what: str = "squared RKHS norm") -> float:
    """Clamp tiny negative round-off to zero and reject larger negatives.

    The tolerance is ``1e-12`` times ``max(1, scale)``, where ``scale`` bounds
    the magnitude of the terms that were summed.
    """
    tol = 1e-12 * max(1.0, scale)
    if value >= 0:
        return float(value)
    if value >= -tol:
        return 0.0
    raise NumericalError(f"{what} is negative ({value:.3e}); the Gram matrix is not PSD", {"value": value, "tol": tol})


def mmd_sq(omega_p, omega_q, k_grid) -> float:
    """Squared MMD between two weightings of the same grid atoms."""
    p = np.asarray(omega_p, dtype=float).ravel()
    q = np.asarray(omega_q, dtype=float).ravel()
    k = np.asarray(k_grid, dtype=float)
    if p.shape != q.shape or k.shape != (p.size, p.size):
        raise InvalidInputError("weight vectors and grid Gram matrix disagree in size")
    diff = p - q
    value = float(diff @ k @ diff)
    scale = float(np.abs(diff) @ np.abs(k) @ np.abs(diff))
    return clamp_squared_norm(value, scale, "squared MMD")
