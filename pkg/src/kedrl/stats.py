"""Distributional statistics read off a weighted return grid.

A statistic is recovered as ``sum_i w_i g(z_i)``. Only smooth test functions
``g`` belong to the Matérn RKHS, so indicators and raw moments are refused
with an explanation rather than silently approximated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import expit, ndtr
from sklearn.isotonic import isotonic_regression

from .cme import SPDSolver
from .exceptions import InvalidInputError, UnsupportedStatisticError
from .grid import ReturnGrid
from .kernel import MaternParams, gram

__all__ = [
    "TestFunction",
    "CdfCurve",
    "recover",
    "recover_normalized",
    "smooth_cdf_curve",
    "tikhonov_proxy",
    "tikhonov_expectation",
    "default_bandwidth",
    "UNSUPPORTED",
]

KINDS = (
    "kernel_density",
    "smooth_cdf",
    "tail_sigmoid",
    "tanh_utility",
    "smoothed_moment",
    "spectral_cvar",
    "custom",
)

UNSUPPORTED = {
    "raw_moment": "polynomials grow without bound and are not in a Matérn RKHS; use smoothed_moment",
    "indicator_cdf": "indicator functions are discontinuous and not in a Matérn RKHS; use smooth_cdf",
    "quantile": "exact quantiles need an indicator CDF; invert a smooth_cdf curve instead",
    "density": "point densities are not bounded functionals of the embedding; use kernel_density",
    "tail_probability": "exact tail indicators are not in a Matérn RKHS; use tail_sigmoid",
    "cvar": "exact CVaR uses an indicator; use spectral_cvar with a smoothing bandwidth",
}

CVAR_NODES = 64


@dataclass(frozen=True)
class TestFunction:
    """A function ``g`` on return vectors.

    ``threshold`` may be a scalar or a per-coordinate vector. ``coord``
    restricts scalar kinds to one coordinate; ``direction`` projects onto a
    vector instead. For ``spectral_cvar``, ``level`` is the tail level and
    ``threshold`` is an increasing array of 64 quantile values on the
    midpoint nodes of ``(0, level)``.
    """

    __test__ = False  # not a pytest class

    kind: str
    threshold: object = 0.0
    bandwidth: float = 1.0
    direction: Optional[np.ndarray] = None
    coord: Optional[int] = None
    alpha: float = 1.0
    order: int = 1
    level: float = 0.1
    kernel: Optional[MaternParams] = None
    func: Optional[Callable] = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind in UNSUPPORTED:
            raise UnsupportedStatisticError(f"{self.kind}: {UNSUPPORTED[self.kind]}")
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown test-function kind {self.kind!r}")
        if self.kind in ("smooth_cdf", "tail_sigmoid", "spectral_cvar") and not self.bandwidth > 0:
            raise InvalidInputError("bandwidth must be positive")
        if self.kind == "custom" and not callable(self.func):
            raise InvalidInputError("custom test functions need a callable")
        if self.kind == "kernel_density" and self.kernel is None:
            raise InvalidInputError("kernel_density needs kernel parameters")
        if self.kind == "smoothed_moment" and (self.order not in (1, 2) or not self.alpha > 0):
            raise InvalidInputError("smoothed_moment needs order 1 or 2 and alpha > 0")
        if self.kind == "spectral_cvar" and not 0 < self.level <= 1:
            raise InvalidInputError("level must lie in (0, 1]")

    def _project(self, z: np.ndarray) -> np.ndarray:
        if self.direction is not None:
            return z @ np.asarray(self.direction, dtype=float)
        if self.coord is not None:
            return z[:, self.coord]
        if z.shape[1] != 1:
            raise InvalidInputError(f"{self.kind} on {z.shape[1]}-D returns needs coord or direction")
        return z[:, 0]

    def __call__(self, atoms) -> np.ndarray:
        z = np.asarray(atoms, dtype=float)
        z = z.reshape(-1, 1) if z.ndim == 1 else z
        if self.kind == "custom":
            return np.asarray(self.func(z), dtype=float).reshape(-1)
        if self.kind == "kernel_density":
            t = np.broadcast_to(np.asarray(self.threshold, dtype=float), (z.shape[1],))
            return gram(z, t.reshape(1, -1), self.kernel)[:, 0]
        if self.kind in ("smooth_cdf", "tail_sigmoid"):
            link = ndtr if self.kind == "smooth_cdf" else expit
            if self.coord is None and self.direction is None:
                # product of per-coordinate factors
                t = np.broadcast_to(np.asarray(self.threshold, dtype=float), (z.shape[1],))
                return np.prod(link((t - z) / self.bandwidth), axis=1)
            return link((float(self.threshold) - self._project(z)) / self.bandwidth)
        y = self._project(z)
        if self.kind == "tanh_utility":
            return np.tanh(self.alpha * y)
        if self.kind == "smoothed_moment":
            return y**self.order * np.exp(-self.alpha * y * y)
        q = np.asarray(self.threshold, dtype=float).ravel()
        if q.size != CVAR_NODES:
            raise InvalidInputError(f"spectral_cvar needs {CVAR_NODES} quantile values")
        # mean over u in (0, level) of P(Y <= q_u) smoothed, weight 1/level
        return ndtr((q[None, :] - y[:, None]) / self.bandwidth).mean(axis=1)


def _omega(omega_v, grid) -> tuple:
    w = np.asarray(omega_v, dtype=float).ravel()
    z = grid.atoms if isinstance(grid, ReturnGrid) else np.asarray(grid, dtype=float)
    z = z.reshape(-1, 1) if z.ndim == 1 else z
    if w.size != z.shape[0]:
        raise InvalidInputError(f"{w.size} weights for {z.shape[0]} atoms")
    return w, z


def recover(omega_v, grid, g) -> float:
    """``sum_i w_i g(z_i)``."""
    w, z = _omega(omega_v, grid)
    return float(w @ np.asarray(g(z), dtype=float))


def recover_normalized(omega_v, grid, g) -> float:
    """Same as :func:`recover` after clipping weights at zero and renormalizing."""
    w, z = _omega(omega_v, grid)
    w = np.clip(w, 0.0, None)
    if w.sum() <= 0:
        raise InvalidInputError("no positive weight left after clipping")
    return float((w / w.sum()) @ np.asarray(g(z), dtype=float))


def default_bandwidth(grid, coord: int = 0, factor: float = 0.25) -> float:
    z = grid.atoms if isinstance(grid, ReturnGrid) else np.asarray(grid, dtype=float)
    z = z.reshape(-1, 1) if z.ndim == 1 else z
    span = float(np.ptp(z[:, coord]))
    return factor * span if span > 0 else 1.0


@dataclass(frozen=True)
class CdfCurve:
    thresholds: np.ndarray
    raw: np.ndarray
    clipped: np.ndarray


def smooth_cdf_curve(omega_v, grid, thresholds, h: float = None, coord: int = None) -> CdfCurve:
    """Smoothed CDF at each threshold, raw and isotonic-projected onto [0, 1].

    Multivariate grids need ``coord`` to pick the marginal.
    """
    w, z = _omega(omega_v, grid)
    if coord is None and z.shape[1] > 1:
        raise InvalidInputError("pass coord for a multivariate grid")
    c = 0 if coord is None else coord
    if h is None:
        h = default_bandwidth(z, c)
    if not h > 0:
        raise InvalidInputError("bandwidth must be positive")
    t = np.asarray(thresholds, dtype=float).ravel()
    raw = ndtr((t[:, None] - z[None, :, c]) / h) @ w
    order = np.argsort(t, kind="stable")
    # order-only projection; interpolating on t breaks for near-equal thresholds
    fitted = isotonic_regression(np.clip(raw[order], 0.0, 1.0), y_min=0.0, y_max=1.0)
    clipped = np.empty_like(raw)
    clipped[order] = fitted
    return CdfCurve(t, raw, clipped)


def tikhonov_proxy(g_values, K_Z, lambda_t: float) -> np.ndarray:
    """Coefficients ``c = (K + m lambda I)^{-1} g`` of the RKHS proxy for ``g``."""
    g = np.asarray(g_values, dtype=float).ravel()
    k = np.asarray(K_Z, dtype=float)
    if k.shape != (g.size, g.size):
        raise InvalidInputError("K_Z and g_values disagree in size")
    return SPDSolver(k, g.size * lambda_t).solve(g)


def tikhonov_expectation(coef, K_Z, omega_v) -> float:
    """Proxy expectation ``c^T K w``."""
    return float(np.asarray(coef) @ np.asarray(K_Z) @ np.asarray(omega_v))
