"""Unconstrained least-squares importance fitting (uLSIF) in a Matérn RKHS."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted, check_scalar

from .cme import SPDSolver
from .exceptions import InvalidInputError
from .kernel import MaternParams, gram, kernel_matvec

__all__ = ["RatioModel", "fit_ulsif", "eval_ratio", "UlsifRatioEstimator"]


@dataclass(frozen=True)
class RatioModel:
    """Fitted ratio ``x -> max(0, sum_j alpha_j k(c_j, x))``."""

    alpha: np.ndarray
    centers: np.ndarray
    params: MaternParams
    lambda_ulsif: float

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float).ravel()
        centers = np.asarray(self.centers, dtype=float)
        if centers.ndim == 1:
            centers = centers.reshape(-1, 1)
        if alpha.shape[0] != centers.shape[0]:
            raise InvalidInputError("alpha and centers disagree in length")
        if not np.all(np.isfinite(alpha)):
            raise InvalidInputError("alpha must be finite")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "centers", centers)

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def to_json(self) -> str:
        return json.dumps(
            {
                "alpha": self.alpha.tolist(),
                "centers": self.centers.tolist(),
                "params": self.params.to_dict(),
                "lambda_ulsif": self.lambda_ulsif,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "RatioModel":
        data = json.loads(text)
        return cls(
            np.array(data["alpha"]),
            np.array(data["centers"]),
            MaternParams.from_dict(data["params"]),
            float(data["lambda_ulsif"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "RatioModel":
        return cls.from_json(Path(path).read_text())


def fit_ulsif(x_beta, x_pi, params: MaternParams, lambda_ulsif: float = 1e-3) -> RatioModel:
    """Fit the ratio of the ``x_pi`` density to the ``x_beta`` density.

    Centers are the ``x_beta`` points. The coefficients solve
    ``(K_bb K_bb^T / n_beta + lambda I) alpha = K_bp 1 / n_pi``.
    """
    xb = check_array(x_beta, ensure_2d=False, dtype=float)
    xp = check_array(x_pi, ensure_2d=False, dtype=float)
    xb = xb.reshape(-1, 1) if xb.ndim == 1 else xb
    xp = xp.reshape(-1, 1) if xp.ndim == 1 else xp
    if xb.shape[1] != xp.shape[1]:
        raise InvalidInputError(f"x_beta has dimension {xb.shape[1]}, x_pi has {xp.shape[1]}")
    k_bb = gram(xb, params=params)
    v_mat = k_bb @ k_bb.T / xb.shape[0]
    v_mat = 0.5 * (v_mat + v_mat.T)
    v_vec = kernel_matvec(xb, xp, np.full(xp.shape[0], 1.0 / xp.shape[0]), params)
    alpha = SPDSolver(v_mat, lambda_ulsif).solve(v_vec)
    return RatioModel(alpha, xb, params, float(lambda_ulsif))


def eval_ratio(model: RatioModel, query):
    """Clipped ratio at one query vector (float) or at each row of a matrix."""
    q = np.asarray(query, dtype=float)
    single = q.ndim == 0 or (q.ndim == 1 and q.size == model.dim)
    pts = q.reshape(1, -1) if single else (q.reshape(-1, 1) if q.ndim == 1 else q)
    if pts.shape[1] != model.dim:
        raise InvalidInputError(f"query dimension {pts.shape[1]} does not match centers ({model.dim})")
    raw = gram(pts, model.centers, model.params) @ model.alpha
    out = np.maximum(raw, 0.0)
    return float(out[0]) if single else out


class UlsifRatioEstimator(BaseEstimator):
    """Estimator wrapper around :func:`fit_ulsif`.

    Parameters
    ----------
    nu, length_scale, variance : float
        Matérn kernel on the joint state-action space.
    lambda_ulsif : float
        Ridge on the quadratic uLSIF system.
    """

    def __init__(self, nu=2.5, length_scale=1.0, variance=1.0, lambda_ulsif=1e-3):
        self.nu = nu
        self.length_scale = length_scale
        self.variance = variance
        self.lambda_ulsif = lambda_ulsif

    def fit(self, X, X_target):
        """Fit from behavior samples ``X`` and target samples ``X_target``."""
        check_scalar(self.lambda_ulsif, "lambda_ulsif", (int, float), min_val=0, include_boundaries="neither")
        params = MaternParams(self.nu, self.length_scale, self.variance)
        self.model_ = fit_ulsif(X, X_target, params, self.lambda_ulsif)
        self.n_features_in_ = self.model_.dim
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=float)
        return eval_ratio(self.model_, X)
