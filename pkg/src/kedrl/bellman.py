"""Matrices of the Bellman MMD objective and the fitted embedding model.

For a query ``x* = (s*, a*)`` with ridge weights ``Gamma`` over the ``n``
training transitions and grid atoms ``z_1..z_m``::

    H[i, j] = sum_l Gamma_l k(r_l, z_i - discount * z_j)
    G[i, j] = sum_{l, l'} Gamma_l Gamma_l' k(discount * z_i + r_l, discount * z_j + r_l')

G costs ``m^2 n^2 / 2`` kernel evaluations and is computed exactly.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .cme import RidgeWeights, clamp_squared_norm
from .exceptions import InvalidInputError
from .grid import ReturnGrid
from .kernel import (
    MaternParams,
    _correlation,
    gram,
    half_integer_coefficients,
    half_integer_order,
    kernel_vector,
)

__all__ = [
    "EmbeddingModel",
    "BellmanOperators",
    "compute_H",
    "compute_G",
    "compute_Phi",
    "compute_Phi_weighted",
    "omega",
    "gamma_sq",
    "target_embedding_eval",
    "set_num_threads",
]

_FAST_DEGREE = 8

# the bundled TBB is too old for numba; avoid the warning it triggers
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "workqueue"


def set_num_threads(n: int = None) -> int:
    """Cap worker threads for G assembly (defaults to ``KEDRL_THREADS``)."""
    if n is None:
        env = os.environ.get("KEDRL_THREADS")
        if not env:
            return numba.get_num_threads()
        n = int(env)
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


# exp(-x) for x >= 0 built from arithmetic LLVM can vectorize: x = k ln2 + f
# with |f| <= ln2 / 2, a degree-12 Taylor polynomial for exp(-f) (truncation
# below 2e-16 relative) and 2**-k from a table.
_LN2_HI = 0.693145751953125
_LN2_LO = 1.42860682030941723212e-6
_INV_LN2 = 1.4426950408889634
_EXP_CUTOFF = 700.0
_POW2_NEG = 2.0 ** -np.arange(1024.0)
_EXP_TAYLOR = np.array([(-1.0) ** j / math.factorial(j) for j in range(13)])


@numba.njit(fastmath=True, inline="always")
def _exp_neg(x, pow2, e):
    x = min(x, _EXP_CUTOFF)
    k = int(x * _INV_LN2 + 0.5)
    f = (x - k * _LN2_HI) - k * _LN2_LO
    ef = e[12]
    for j in range(11, -1, -1):
        ef = ef * f + e[j]
    return ef * pow2[k]


@numba.njit(fastmath=True, cache=True)
def _pair_fast(u0, u1, u2, r0, r1, r2, w, c, scale, pow2, e):
    n = r0.shape[0]
    c0, c1, c2, c3, c4 = c[0], c[1], c[2], c[3], c[4]
    c5, c6, c7, c8 = c[5], c[6], c[7], c[8]
    acc = 0.0
    for l in range(n):
        a0 = u0 + r0[l]
        a1 = u1 + r1[l]
        a2 = u2 + r2[l]
        inner = 0.0
        for k in range(n):
            d0 = a0 - r0[k]
            d1 = a1 - r1[k]
            d2 = a2 - r2[k]
            x = scale * np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
            p = (((((((c8 * x + c7) * x + c6) * x + c5) * x + c4) * x + c3) * x + c2) * x + c1) * x + c0
            inner += w[k] * p * _exp_neg(x, pow2, e)
        acc += w[l] * inner
    return acc


@numba.njit(fastmath=True, cache=True)
def _pair_generic(u, rt, w, c, scale, pow2, e):
    d, n = rt.shape
    deg = c.shape[0] - 1
    a = np.empty(d)
    acc = 0.0
    for l in range(n):
        for q in range(d):
            a[q] = u[q] + rt[q, l]
        inner = 0.0
        for k in range(n):
            s = 0.0
            for q in range(d):
                t = a[q] - rt[q, k]
                s += t * t
            x = scale * np.sqrt(s)
            p = c[deg]
            for j in range(deg - 1, -1, -1):
                p = p * x + c[j]
            inner += w[k] * p * _exp_neg(x, pow2, e)
        acc += w[l] * inner
    return acc


@numba.njit(parallel=True, cache=True)
def _all_pairs(shifts, rt, w, c, scale, fast, pow2, e):
    n_pairs = shifts.shape[0]
    out = np.empty(n_pairs)
    for t in numba.prange(n_pairs):
        if fast:
            out[t] = _pair_fast(shifts[t, 0], shifts[t, 1], shifts[t, 2], rt[0], rt[1], rt[2], w, c, scale, pow2, e)
        else:
            out[t] = _pair_generic(shifts[t], rt, w, c, scale, pow2, e)
    return out


def _weights(gamma_vec) -> np.ndarray:
    if isinstance(gamma_vec, RidgeWeights):
        return gamma_vec.gamma
    return np.asarray(gamma_vec, dtype=float).ravel()


def _atoms(grid) -> np.ndarray:
    z = grid.atoms if isinstance(grid, ReturnGrid) else np.asarray(grid, dtype=float)
    return z.reshape(-1, 1) if z.ndim == 1 else z


def _check(gamma_vec, grid, rewards):
    w = _weights(gamma_vec)
    z = _atoms(grid)
    r = np.asarray(rewards, dtype=float)
    r = r.reshape(-1, 1) if r.ndim == 1 else r
    if r.shape[0] != w.shape[0]:
        raise InvalidInputError(f"{r.shape[0]} rewards for {w.shape[0]} weights")
    if r.shape[1] != z.shape[1]:
        raise InvalidInputError(f"reward dimension {r.shape[1]} differs from grid dimension {z.shape[1]}")
    return w, z, r


def compute_H(gamma_vec, grid, rewards, discount: float, k_z: MaternParams) -> np.ndarray:
    """Cross term ``H[i, j] = sum_l Gamma_l k(r_l, z_i - discount z_j)``."""
    w, z, r = _check(gamma_vec, grid, rewards)
    m = z.shape[0]
    shifted = (z[:, None, :] - discount * z[None, :, :]).reshape(m * m, -1)
    return (gram(shifted, r, k_z) @ w).reshape(m, m)


def compute_G(gamma_vec, grid, rewards, discount: float, k_z: MaternParams) -> np.ndarray:
    """Quadratic term ``G[i, j] = Gamma^T K^{(ij)} Gamma`` over shifted returns.

    Only the upper triangle is evaluated and mirrored, so the result is
    exactly symmetric. The diagonal does not depend on the atom and is
    computed once.
    """
    w, z, r = _check(gamma_vec, grid, rewards)
    m, d = z.shape
    diag = float(w @ gram(r, params=k_z) @ w)
    iu, ju = np.triu_indices(m, k=1)
    shifts = discount * (z[iu] - z[ju])
    p = half_integer_order(k_z.nu)
    if iu.size == 0:
        values = np.zeros(0)
    elif p is not None:
        coeffs = np.array(half_integer_coefficients(p))
        fast = d <= 3 and p <= _FAST_DEGREE
        if fast:
            coeffs = np.concatenate([coeffs, np.zeros(_FAST_DEGREE + 1 - coeffs.size)])
            pad = 3 - d
            rt = np.ascontiguousarray(np.vstack([r.T, np.zeros((pad, r.shape[0]))]))
            shifts = np.ascontiguousarray(np.hstack([shifts, np.zeros((shifts.shape[0], pad))]))
        else:
            rt = np.ascontiguousarray(r.T)
            shifts = np.ascontiguousarray(shifts)
        scale = math.sqrt(2.0 * k_z.nu) / k_z.length_scale
        values = k_z.variance * _all_pairs(shifts, rt, w, coeffs, scale, fast, _POW2_NEG, _EXP_TAYLOR)
    else:
        values = np.empty(iu.size)
        diffs = r[:, None, :] - r[None, :, :]
        for t, u in enumerate(shifts):
            dist = np.sqrt(np.sum((diffs + u) ** 2, axis=2))
            values[t] = k_z.variance * (w @ _correlation(dist, k_z) @ w)
    out = np.empty((m, m))
    out[iu, ju] = values
    out[ju, iu] = values
    np.fill_diagonal(out, diag)
    return out


def compute_Phi(gram_next, gamma_vec, alpha) -> np.ndarray:
    """``K diag(Gamma) K alpha`` with ``K`` the next-input Gram matrix."""
    k = np.asarray(gram_next, dtype=float)
    w = _weights(gamma_vec)
    a = np.asarray(alpha, dtype=float).ravel()
    if k.shape != (w.size, w.size) or a.size != w.size:
        raise InvalidInputError("Gram matrix, weights and alpha disagree in size")
    return k @ (w * (k @ a))


def compute_Phi_weighted(gram_cross, gamma_vec, ratio_values) -> np.ndarray:
    """``K_cross (Gamma * eta)`` given ratio values at the next inputs.

    ``gram_cross[i, l] = k(x_i, x'_l)`` pairs training inputs with next
    inputs, so ``B^T`` of the result is the importance-weighted average of
    the embedding weights at the next inputs.
    """
    k = np.asarray(gram_cross, dtype=float)
    w = _weights(gamma_vec)
    eta = np.asarray(ratio_values, dtype=float).ravel()
    if k.shape[1] != w.size or eta.size != w.size:
        raise InvalidInputError("Gram matrix, weights and ratios disagree in size")
    return k @ (w * eta)


def gamma_sq(omega_v, omega_pi_v, K_Z, H, G) -> float:
    """Squared MMD between the fitted embedding and its Bellman target."""
    w = np.asarray(omega_v, dtype=float).ravel()
    v = np.asarray(omega_pi_v, dtype=float).ravel()
    m = w.size
    for name, mat in (("K_Z", K_Z), ("H", H), ("G", G)):
        if np.shape(mat) != (m, m):
            raise InvalidInputError(f"{name} has shape {np.shape(mat)}, expected {(m, m)}")
    if v.size != m:
        raise InvalidInputError("weight vectors differ in length")
    return float(w @ K_Z @ w - 2.0 * (w @ H @ v) + v @ G @ v)


@dataclass(frozen=True)
class BellmanOperators:
    """Everything the objective needs at one query point."""

    H: np.ndarray
    G: np.ndarray
    Phi: np.ndarray
    gamma_vec: RidgeWeights
    query: np.ndarray
    k_vec: np.ndarray
    K_Z: np.ndarray

    def __post_init__(self):
        for name in ("H", "G", "Phi", "k_vec", "K_Z"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidInputError(f"{name} has non-finite entries")

    @property
    def n(self) -> int:
        return self.k_vec.shape[0]

    @property
    def m(self) -> int:
        return self.K_Z.shape[0]


def _query_vector(query) -> np.ndarray:
    if isinstance(query, tuple) and len(query) == 2:
        return np.concatenate([np.atleast_1d(np.asarray(query[0], float)), np.atleast_1d(np.asarray(query[1], float))])
    return np.asarray(query, dtype=float)


@dataclass(frozen=True)
class EmbeddingModel:
    """Fitted coefficients ``B`` with the data needed to read embeddings."""

    coefficients: np.ndarray
    grid: ReturnGrid
    k_z_params: MaternParams
    k_x_params: MaternParams
    lambda_reg: float
    gamma_discount: float
    training_inputs: np.ndarray
    query: np.ndarray = None
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        b = np.asarray(self.coefficients, dtype=float)
        x = np.asarray(self.training_inputs, dtype=float)
        if b.ndim != 2 or not np.all(np.isfinite(b)):
            raise InvalidInputError("coefficients must be a finite matrix")
        if b.shape != (x.shape[0], self.grid.size):
            raise InvalidInputError(
                f"coefficients have shape {b.shape}, expected {(x.shape[0], self.grid.size)}"
            )
        if not 0.0 < self.gamma_discount < 1.0:
            raise InvalidInputError("discount must lie in (0, 1)")
        object.__setattr__(self, "coefficients", b)
        object.__setattr__(self, "training_inputs", x)

    @property
    def n(self) -> int:
        return self.coefficients.shape[0]

    @property
    def m(self) -> int:
        return self.coefficients.shape[1]

    def save(self, directory) -> Path:
        """Write ``manifest.json`` and ``arrays.npz`` into ``directory``."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        np.savez(
            out / "arrays.npz",
            coefficients=self.coefficients,
            atoms=self.grid.atoms,
            training_inputs=self.training_inputs,
            query=np.array([]) if self.query is None else np.asarray(self.query, dtype=float),
        )
        manifest = {
            "format": "kedrl-embedding-model/1",
            "n": self.n,
            "m": self.m,
            "k_z_params": self.k_z_params.to_dict(),
            "k_x_params": self.k_x_params.to_dict(),
            "lambda_reg": self.lambda_reg,
            "gamma_discount": self.gamma_discount,
            "grid": {
                "k_clusters": self.grid.k_clusters,
                "expansion_factor": self.grid.expansion_factor,
                "source_count": self.grid.source_count,
                "hull_vertex_count": self.grid.hull_vertex_count,
            },
            "metadata": self.metadata,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return out

    @classmethod
    def load(cls, directory) -> "EmbeddingModel":
        src = Path(directory)
        manifest = json.loads((src / "manifest.json").read_text())
        if manifest.get("format") != "kedrl-embedding-model/1":
            raise InvalidInputError(f"{src} is not a saved embedding model")
        with np.load(src / "arrays.npz") as arrays:
            coefficients = arrays["coefficients"]
            atoms = arrays["atoms"]
            inputs = arrays["training_inputs"]
            query = arrays["query"]
        g = manifest["grid"]
        grid = ReturnGrid(atoms, g["k_clusters"], g["expansion_factor"], g["source_count"], g["hull_vertex_count"])
        return cls(
            coefficients,
            grid,
            MaternParams.from_dict(manifest["k_z_params"]),
            MaternParams.from_dict(manifest["k_x_params"]),
            manifest["lambda_reg"],
            manifest["gamma_discount"],
            inputs,
            query if query.size else None,
            manifest.get("metadata", {}),
        )


def omega(model: EmbeddingModel, query) -> np.ndarray:
    """Grid weights ``B^T k(X, x)`` at one query or at each row of a matrix."""
    q = _query_vector(query)
    dim = model.training_inputs.shape[1]
    if q.ndim == 1:
        if q.size != dim:
            raise InvalidInputError(f"query has dimension {q.size}, model expects {dim}")
        return model.coefficients.T @ kernel_vector(model.training_inputs, q, model.k_x_params)
    if q.shape[1] != dim:
        raise InvalidInputError(f"queries have dimension {q.shape[1]}, model expects {dim}")
    return gram(q, model.training_inputs, model.k_x_params) @ model.coefficients


def target_embedding_eval(model: EmbeddingModel, operators: BellmanOperators, rewards, test_points) -> np.ndarray:
    """Evaluate the Bellman target ``sum_i w_i sum_l Gamma_l k(discount z_i + r_l, z)``.

    ``w = B^T Phi`` is the target-policy weight vector at the operators' query.
    """
    w_pi = model.coefficients.T @ operators.Phi
    gam, z, r = _check(operators.gamma_vec, model.grid, rewards)
    t = np.asarray(test_points, dtype=float)
    t = t.reshape(-1, z.shape[1]) if t.ndim == 1 else t
    out = np.zeros(t.shape[0])
    for i in np.flatnonzero(w_pi):
        out += w_pi[i] * (gram(t, model.gamma_discount * z[i] + r, model.k_z_params) @ gam)
    return out


def embedding_distance_sq(omega_v, omega_pi_v, operators: BellmanOperators) -> float:
    """``gamma_sq`` at the stored operators, with round-off clamped at zero."""
    value = gamma_sq(omega_v, omega_pi_v, operators.K_Z, operators.H, operators.G)
    scale = float(
        np.abs(omega_v) @ np.abs(operators.K_Z) @ np.abs(omega_v)
        + np.abs(omega_pi_v) @ np.abs(operators.G) @ np.abs(omega_pi_v)
    )
    return clamp_squared_norm(value, scale, "Bellman residual")
