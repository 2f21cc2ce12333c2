"""Matérn kernels: pointwise evaluation, Gram assembly and Lipschitz constants.

Half-integer smoothness values use the exact polynomial-times-exponential
form. Any other smoothness goes through the exponentially scaled modified
Bessel function of the second kind, evaluated in log space so that large
``nu`` does not overflow the gamma function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy.spatial.distance import cdist, pdist, squareform
from scipy.special import gammaln, kve

from .exceptions import DomainError, InvalidInputError

__all__ = [
    "MaternParams",
    "matern_eval",
    "gram",
    "kernel_vector",
    "kernel_matvec",
    "lipschitz_constant",
    "matern_deficit",
    "half_integer_order",
    "half_integer_coefficients",
]

# distances below this are treated as exact zeros
ZERO_DISTANCE = 1e-12


@dataclass(frozen=True)
class MaternParams:
    """Matérn kernel hyperparameters.

    Parameters
    ----------
    nu : float
        Smoothness. Half-integers (0.5, 1.5, 2.5, ...) take the closed form.
    length_scale : float
        Distance scale.
    variance : float
        Kernel value at zero distance (the square of the amplitude).
    """

    nu: float
    length_scale: float
    variance: float

    def __post_init__(self):
        for name in ("nu", "length_scale", "variance"):
            value = getattr(self, name)
            if not isinstance(value, (int, float, np.floating, np.integer)) or isinstance(value, bool):
                raise InvalidInputError(f"{name} must be a real number, got {value!r}")
            if not math.isfinite(value) or value <= 0:
                raise InvalidInputError(f"{name} must be finite and positive, got {value!r}")
            object.__setattr__(self, name, float(value))

    @property
    def amplitude(self) -> float:
        return math.sqrt(self.variance)

    def to_dict(self) -> dict:
        return {"nu": self.nu, "length_scale": self.length_scale, "variance": self.variance}

    @classmethod
    def from_dict(cls, data: dict) -> "MaternParams":
        extra = set(data) - {"nu", "length_scale", "variance"}
        if extra:
            raise InvalidInputError(f"unknown kernel keys: {sorted(extra)}")
        try:
            return cls(data["nu"], data["length_scale"], data["variance"])
        except KeyError as exc:
            raise InvalidInputError(f"missing kernel key {exc}") from None


def half_integer_order(nu: float):
    """Return ``p`` when ``nu == p + 1/2`` for a nonnegative integer ``p``, else None."""
    twice = 2.0 * nu
    nearest = round(twice)
    if abs(twice - nearest) < 1e-12 and nearest % 2 == 1:
        return (nearest - 1) // 2
    return None


@lru_cache(maxsize=64)
def half_integer_coefficients(p: int) -> tuple:
    """Polynomial coefficients ``c_j`` (ascending powers) of the closed form.

    For ``nu = p + 1/2`` and scaled distance ``x = sqrt(2 nu) d / l`` the
    kernel is ``variance * exp(-x) * sum_j c_j x**j`` with ``c_0 = 1``.
    """
    pre = math.factorial(p) / math.factorial(2 * p)
    coeffs = [0.0] * (p + 1)
    for i in range(p + 1):
        power = p - i
        coeffs[power] = (
            pre
            * math.factorial(p + i)
            / (math.factorial(i) * math.factorial(p - i))
            * 2.0**power
        )
    return tuple(coeffs)


@lru_cache(maxsize=64)
def _deficit_series(p: int, n_terms: int = 30) -> np.ndarray:
    """Taylor coefficients of ``1 - exp(-x) * poly(x)`` in exact arithmetic."""
    pre = Fraction(math.factorial(p), math.factorial(2 * p))
    c = [Fraction(0)] * (p + 1)
    for i in range(p + 1):
        c[p - i] = pre * Fraction(math.factorial(p + i), math.factorial(i) * math.factorial(p - i)) * 2 ** (p - i)
    out = []
    for k in range(n_terms):
        fk = sum(c[j] * Fraction((-1) ** (k - j), math.factorial(k - j)) for j in range(min(k, p) + 1))
        out.append(-fk if k else 1 - fk)
    return np.array([float(v) for v in out])


def _scaled(distance: np.ndarray, params: MaternParams) -> np.ndarray:
    return math.sqrt(2.0 * params.nu) * distance / params.length_scale


def _correlation(distance: np.ndarray, params: MaternParams) -> np.ndarray:
    """Unit-variance Matérn correlation for a nonnegative distance array."""
    d = np.where(distance < ZERO_DISTANCE, 0.0, distance)
    x = _scaled(d, params)
    p = half_integer_order(params.nu)
    if p is not None:
        coeffs = half_integer_coefficients(p)
        poly = np.full_like(x, coeffs[-1])
        for c in coeffs[-2::-1]:
            poly = poly * x + c
        out = poly * np.exp(-x)
    else:
        nu = params.nu
        out = np.ones_like(x)
        pos = x > 0
        xp = x[pos]
        with np.errstate(divide="ignore", over="ignore", under="ignore"):
            log_val = (
                (1.0 - nu) * math.log(2.0)
                - gammaln(nu)
                + nu * np.log(xp)
                + np.log(kve(nu, xp))
                - xp
            )
        out[pos] = np.exp(log_val)
    out[d == 0.0] = 1.0
    return out


def _check_distance(distance) -> np.ndarray:
    d = np.asarray(distance, dtype=float)
    if not np.all(np.isfinite(d)):
        raise InvalidInputError("distance must be finite")
    if np.any(d < 0):
        raise InvalidInputError("distance must be nonnegative")
    return d


def matern_eval(distance, params: MaternParams):
    """Evaluate the Matérn kernel at one distance or an array of distances.

    Returns a Python float for scalar input and an array otherwise.
    """
    d = _check_distance(distance)
    out = params.variance * _correlation(np.atleast_1d(d), params)
    if d.ndim == 0:
        return float(out[0])
    return out.reshape(d.shape)


def _as_points(points, name: str) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1) if arr.size else arr.reshape(0, 1)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be a list of vectors")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def gram(points_a, points_b=None, params: MaternParams = None) -> np.ndarray:
    """Kernel matrix ``K[i, j] = k(||a_i - b_j||)``.

    When ``points_b`` is omitted (or is the same object as ``points_a``) the
    result is assembled from the condensed upper triangle, so it is exactly
    symmetric with the variance on its diagonal.
    """
    if params is None:
        raise InvalidInputError("kernel params are required")
    a = _as_points(points_a, "points_a")
    if points_b is None or points_b is points_a:
        n = a.shape[0]
        if n == 0:
            return np.zeros((0, 0))
        condensed = params.variance * _correlation(pdist(a), params)
        out = squareform(condensed, checks=False)
        np.fill_diagonal(out, params.variance)
        return out
    b = _as_points(points_b, "points_b")
    if a.shape[1] != b.shape[1]:
        raise InvalidInputError(
            f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}"
        )
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    return params.variance * _correlation(cdist(a, b), params)


def kernel_vector(points, query, params: MaternParams) -> np.ndarray:
    """Column of kernel values between every training point and ``query``."""
    q = np.asarray(query, dtype=float).reshape(1, -1)
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        return np.zeros(0)
    pts = _as_points(pts, "points")
    if pts.shape[1] != q.shape[1]:
        raise InvalidInputError(f"dimension mismatch: {pts.shape[1]} vs {q.shape[1]}")
    return gram(pts, q, params)[:, 0]


def kernel_matvec(points_a, points_b, weights, params: MaternParams, chunk: int = 2048) -> np.ndarray:
    """``gram(points_a, points_b) @ weights`` without holding the full matrix."""
    a = _as_points(points_a, "points_a")
    b = _as_points(points_b, "points_b")
    w = np.asarray(weights, dtype=float)
    if w.shape[0] != b.shape[0]:
        raise InvalidInputError("weights length must match points_b")
    out = np.empty((a.shape[0],) + w.shape[1:])
    for start in range(0, a.shape[0], chunk):
        out[start:start + chunk] = gram(a[start:start + chunk], b, params) @ w
    return out


def matern_deficit(distance, params: MaternParams):
    """``variance - k(d)`` without cancellation at small distances.

    Equals half the squared RKHS distance between ``k(z, .)`` and ``k(z', .)``
    when ``||z - z'|| = d``. Half-integer smoothness uses an exact Taylor
    series below scaled distance 0.5.
    """
    d = _check_distance(distance)
    flat = np.atleast_1d(d).astype(float)
    out = params.variance * (1.0 - _correlation(flat, params))
    p = half_integer_order(params.nu)
    if p is not None:
        x = _scaled(np.where(flat < ZERO_DISTANCE, 0.0, flat), params)
        small = x < 0.5
        if np.any(small):
            series = _deficit_series(p)
            xs = x[small]
            acc = np.zeros_like(xs)
            for coef in series[::-1]:
                acc = acc * xs + coef
            out[small] = params.variance * acc
    if d.ndim == 0:
        return float(out[0])
    return out.reshape(d.shape)


def lipschitz_constant(params: MaternParams) -> float:
    """Lipschitz constant of ``z -> k(z, .)`` into the RKHS.

    Equals ``(sigma / l) * sqrt(nu / (nu - 1))`` and only exists for ``nu > 1``.
    """
    if params.nu <= 1.0:
        raise DomainError(
            f"the embedding map is not Lipschitz for nu <= 1 (got nu={params.nu})"
        )
    return params.amplitude / params.length_scale * math.sqrt(params.nu / (params.nu - 1.0))
