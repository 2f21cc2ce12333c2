"""Estimator for the return-distribution embedding at one state-action query."""

from __future__ import annotations

import time

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted, check_scalar

from .bellman import (
    BellmanOperators,
    EmbeddingModel,
    compute_G,
    compute_H,
    compute_Phi,
    compute_Phi_weighted,
    omega,
)
from .cme import SPDSolver, ridge_weights
from .data import TransitionDataset, flatten
from .density_ratio import eval_ratio, fit_ulsif
from .evaluation import heldout_risk
from .exceptions import InvalidInputError
from .grid import build_grid
from .kernel import MaternParams, gram, kernel_vector
from .optimizer import OptimizerConfig, init_coefficients, optimize
from .sim_env import PolicySpec, default_policy, sample_action
from .stats import recover

__all__ = ["KernelEmbeddingOPE", "DEFAULT_QUERY"]

DEFAULT_QUERY = (
    np.array([-1.294, -0.917, 0.219, 0.283, 1.466]),
    np.array([0.434]),
)


def _params(value, name) -> MaternParams:
    if isinstance(value, MaternParams):
        return value
    if isinstance(value, dict):
        return MaternParams.from_dict(value)
    try:
        nu, ls, var = value
    except (TypeError, ValueError):
        raise InvalidInputError(f"{name} must be MaternParams, a dict or (nu, length_scale, variance)") from None
    return MaternParams(nu, ls, var)


class KernelEmbeddingOPE(BaseEstimator):
    """Off-policy estimate of the return-distribution embedding at a query.

    ``fit`` builds a return grid from realized returns, ridge weights at the
    query, importance ratios between target and behavior actions, the
    Bellman matrices, and then minimizes the penalized Bellman MMD over the
    coefficient matrix ``B``.

    Parameters
    ----------
    target_policy : PolicySpec or str
        Policy to evaluate. A string names one of the built-in families.
    query_state, query_action : array-like or None
        Query pair. Defaults to the reference pair used in the simulations.
    discount : float
        Return discount in (0, 1).
    return_kernel : MaternParams or tuple
        Kernel on returns, as ``(nu, length_scale, variance)``.
    input_kernel, ratio_kernel : MaternParams, tuple or None
        Kernels on state-action inputs for the ridge weights and for the
        ratio model. None reuses ``return_kernel``.
    lambda_reg, lambda_ulsif : float
        Absolute ridge for the weights and for the ratio fit.
    n_clusters, expansion_factor : int, float
        Grid construction settings.
    phi_form : {"cross", "next"}
        "cross" pairs training inputs with next inputs when propagating the
        ratio-weighted next-step embedding. "next" uses the next-input Gram
        on both sides.
    optimizer : OptimizerConfig or dict or None
    random_state : int
        Seeds grid clustering, target-action resampling and the initial ``B``.
    """

    def __init__(
        self,
        target_policy="gaussian",
        query_state=None,
        query_action=None,
        discount=0.9,
        return_kernel=(6.5, 2.0, 0.36),
        input_kernel=None,
        ratio_kernel=None,
        lambda_reg=5e-4,
        lambda_ulsif=1e-3,
        n_clusters=48,
        expansion_factor=1.1,
        phi_form="cross",
        optimizer=None,
        random_state=0,
    ):
        self.target_policy = target_policy
        self.query_state = query_state
        self.query_action = query_action
        self.discount = discount
        self.return_kernel = return_kernel
        self.input_kernel = input_kernel
        self.ratio_kernel = ratio_kernel
        self.lambda_reg = lambda_reg
        self.lambda_ulsif = lambda_ulsif
        self.n_clusters = n_clusters
        self.expansion_factor = expansion_factor
        self.phi_form = phi_form
        self.optimizer = optimizer
        self.random_state = random_state

    def _validate(self):
        check_scalar(self.discount, "discount", (int, float), min_val=0, max_val=1, include_boundaries="neither")
        check_scalar(self.lambda_reg, "lambda_reg", (int, float), min_val=0, include_boundaries="neither")
        check_scalar(self.lambda_ulsif, "lambda_ulsif", (int, float), min_val=0, include_boundaries="neither")
        check_scalar(self.n_clusters, "n_clusters", int, min_val=1)
        check_scalar(self.expansion_factor, "expansion_factor", (int, float), min_val=1)
        if self.phi_form not in ("cross", "next"):
            raise InvalidInputError(f"phi_form must be 'cross' or 'next', got {self.phi_form!r}")
        policy = self.target_policy
        if isinstance(policy, str):
            policy = default_policy(policy)
        elif isinstance(policy, dict):
            policy = PolicySpec.from_dict(policy)
        elif not isinstance(policy, PolicySpec):
            raise InvalidInputError("target_policy must be a PolicySpec, dict or family name")
        opt = self.optimizer
        if opt is None:
            opt = OptimizerConfig()
        elif isinstance(opt, dict):
            opt = OptimizerConfig(**opt)
        k_z = _params(self.return_kernel, "return_kernel")
        k_x = k_z if self.input_kernel is None else _params(self.input_kernel, "input_kernel")
        k_r = k_x if self.ratio_kernel is None else _params(self.ratio_kernel, "ratio_kernel")
        s = DEFAULT_QUERY[0] if self.query_state is None else np.asarray(self.query_state, dtype=float).ravel()
        a = DEFAULT_QUERY[1] if self.query_action is None else np.asarray(self.query_action, dtype=float).ravel()
        return policy, opt, k_z, k_x, k_r, np.concatenate([s, a])

    def fit(self, X: TransitionDataset, y=None):
        """Fit on a transition dataset. ``y`` is ignored."""
        if not isinstance(X, TransitionDataset):
            raise InvalidInputError("X must be a TransitionDataset")
        policy, opt, k_z, k_x, k_r, query = self._validate()
        p, q, d = X.dims
        if query.size != p + q:
            raise InvalidInputError(f"query has dimension {query.size}, data has {p + q}")
        if policy.state_dim != p:
            raise InvalidInputError("target policy and data disagree on the state dimension")
        timings = {}
        clock = time.perf_counter()
        seeds = np.random.SeedSequence(self.random_state).spawn(3)

        returns = flatten(X.trajectories, self.discount).returns_to_go if X.trajectories else X.returns_to_go
        if returns is None:
            raise InvalidInputError("dataset has neither trajectories nor realized returns")
        k = min(self.n_clusters, returns.shape[0])
        self.grid_ = build_grid(returns, k, self.expansion_factor, int(seeds[0].generate_state(1)[0]))
        timings["grid"] = time.perf_counter() - clock

        inputs = X.inputs
        next_inputs = X.next_inputs
        self.solver_ = SPDSolver(gram(inputs, params=k_x), self.lambda_reg)
        k_vec = kernel_vector(inputs, query, k_x)
        gamma_vec = ridge_weights(None, k_vec, self.lambda_reg, query=query, solver=self.solver_)
        timings["weights"] = time.perf_counter() - clock

        rng = np.random.default_rng(seeds[1])
        target_actions = sample_action(policy, X.next_states, rng)
        target_inputs = np.hstack([X.next_states, target_actions])
        self.ratio_model_ = fit_ulsif(next_inputs, target_inputs, k_r, self.lambda_ulsif)
        if self.phi_form == "cross":
            eta = eval_ratio(self.ratio_model_, next_inputs)
            phi = compute_Phi_weighted(gram(inputs, next_inputs, k_x), gamma_vec, eta)
        else:
            phi = compute_Phi(gram(next_inputs, params=k_x), gamma_vec, self.ratio_model_.alpha)
        timings["ratio"] = time.perf_counter() - clock

        K_Z = gram(self.grid_.atoms, params=k_z)
        H = compute_H(gamma_vec, self.grid_, X.rewards, self.discount, k_z)
        G = compute_G(gamma_vec, self.grid_, X.rewards, self.discount, k_z)
        self.operators_ = BellmanOperators(H, G, phi, gamma_vec, query, k_vec, K_Z)
        timings["operators"] = time.perf_counter() - clock

        b0 = init_coefficients(len(X), self.grid_.size, seeds[2])
        self.coef_, self.trace_ = optimize(b0, self.operators_, opt)
        timings["optimize"] = time.perf_counter() - clock

        self.query_ = query
        self.model_ = EmbeddingModel(
            self.coef_,
            self.grid_,
            k_z,
            k_x,
            float(self.lambda_reg),
            float(self.discount),
            inputs,
            query,
            {"optimizer": opt.to_dict(), "phi_form": self.phi_form, "target_policy": policy.to_dict()},
        )
        self.omega_ = self.coef_.T @ k_vec
        self.omega_target_ = self.coef_.T @ phi
        self.timings_ = timings
        self.n_features_in_ = p + q
        return self

    def transform(self, X) -> np.ndarray:
        """Grid weights at each state-action row of ``X``."""
        check_is_fitted(self, "model_")
        x = X.inputs if isinstance(X, TransitionDataset) else np.atleast_2d(np.asarray(X, dtype=float))
        return omega(self.model_, x)

    def embedding(self, points, query=None) -> np.ndarray:
        """Embedding function at the query (the fitted one by default) evaluated at ``points``."""
        check_is_fitted(self, "model_")
        w = self.omega_ if query is None else omega(self.model_, query)
        z = np.asarray(points, dtype=float)
        z = z.reshape(-1, self.grid_.dim) if z.ndim == 1 else z
        return gram(z, self.grid_.atoms, self.model_.k_z_params) @ w

    def recover(self, g) -> float:
        check_is_fitted(self, "model_")
        return recover(self.omega_, self.grid_, g)

    def score(self, X, y=None) -> float:
        """Negative held-out risk, so larger is better."""
        check_is_fitted(self, "model_")
        return -heldout_risk(self.model_, X, self.discount)
