"""Linear-Gaussian MDP with state-dependent policies on (0, 1) actions.

States evolve as ``s' = b_s + W_s^T [s, a] + eps_s`` and rewards as
``r = b_r + W_r^T [s, a] + eps_r``. Every function accepts either one state
vector or a batch of states (one per row) so Monte-Carlo rollouts vectorize.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .data import Trajectory
from .exceptions import InvalidInputError

__all__ = [
    "LinearDynamics",
    "PolicySpec",
    "sample_action",
    "step",
    "generate_dataset",
    "mc_reference",
    "default_policy",
]

# actions are kept strictly inside (0, 1)
ACTION_MARGIN = 1e-12

_STATE_MAP = [  # rows map [s, a] to each next-state coordinate
    [0.4, -0.2, 0.1, 0.05, 0.3, -0.1],
    [0.03, 0.3, -0.2, 0.15, 0.25, 0.1],
    [0.15, -0.05, 0.2, 0.1, 0.35, -0.2],
    [0.2, 0.05, -0.1, 0.3, -0.15, 0.2],
    [0.1, -0.3, 0.25, -0.2, 0.4, 0.15],
]
_STATE_BIAS = [0.1, -0.1, 0.05, 0.2, -0.15]
_STATE_COV = [
    [0.1, 0.05, 0.02, 0.01, 0.03],
    [0.05, 0.2, 0.03, 0.02, 0.04],
    [0.02, 0.03, 0.3, 0.05, 0.01],
    [0.01, 0.02, 0.05, 0.25, 0.02],
    [0.03, 0.04, 0.01, 0.02, 0.35],
]
_REWARD_MAP = [
    [0.02, 0.1, -0.05, 0.3, -0.1, 0.2],
    [0.1, -0.3, 0.2, 0.25, -0.2, 0.4],
    [0.15, 0.05, -0.1, 0.35, 0.1, -0.25],
]
_REWARD_BIAS = [0.5, -0.4, 0.3]
_REWARD_COV = [
    [0.2, 0.01, 0.03],
    [0.01, 0.25, 0.02],
    [0.03, 0.02, 0.3],
]

_POLICY_DEFAULTS = {
    "uniform": {"theta_a": [0.0, -0.2, -0.2, -0.8, -0.6], "theta_b": [0.2, 0.0, 0.5, -0.1, 0.6], "noise": 0.05},
    "gaussian": {"theta_a": [0.8, 0.4, 0.2, 0.3, 0.0], "theta_b": [0.4, 0.3, 0.3, 0.5, 0.1], "noise": 0.05},
    "logistic": {"theta_a": [0.0, 0.3, -0.1, 0.1, 0.0], "theta_b": [1.0, 0.8, 0.8, 1.2, 1.0], "noise": 0.05},
}


def _noise_factor(cov: np.ndarray, name: str) -> np.ndarray:
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise InvalidInputError(f"{name} must be square")
    if not np.array_equal(cov, cov.T):
        raise InvalidInputError(f"{name} must be symmetric")
    if not np.any(cov):
        return np.zeros_like(cov)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        if vals.min() < -1e-12 * max(1.0, vals.max()):
            raise InvalidInputError(f"{name} is not positive semidefinite") from None
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


@dataclass(frozen=True)
class LinearDynamics:
    """Affine transition and reward maps with Gaussian noise.

    ``W_s`` has shape ``(p + q, p)`` and ``W_r`` shape ``(p + q, d)``; both act
    on the concatenated ``[s, a]`` through their transpose. Zero covariance
    gives deterministic dynamics.
    """

    W_s: np.ndarray
    b_s: np.ndarray
    Sigma_s: np.ndarray
    W_r: np.ndarray
    b_r: np.ndarray
    Sigma_r: np.ndarray
    _factors: tuple = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        arrays = {k: np.array(getattr(self, k), dtype=float) for k in ("W_s", "b_s", "Sigma_s", "W_r", "b_r", "Sigma_r")}
        p = arrays["b_s"].size
        d = arrays["b_r"].size
        ws, wr = arrays["W_s"], arrays["W_r"]
        if ws.ndim != 2 or ws.shape[1] != p or ws.shape[0] <= p:
            raise InvalidInputError(f"W_s must be (p+q) x p with p={p}, got {ws.shape}")
        if wr.shape != (ws.shape[0], d):
            raise InvalidInputError(f"W_r must be {(ws.shape[0], d)}, got {wr.shape}")
        if arrays["Sigma_s"].shape != (p, p) or arrays["Sigma_r"].shape != (d, d):
            raise InvalidInputError("covariance shapes do not match the state and reward dimensions")
        for k, v in arrays.items():
            if not np.all(np.isfinite(v)):
                raise InvalidInputError(f"{k} has non-finite entries")
            v.setflags(write=False)
            object.__setattr__(self, k, v)
        factors = (_noise_factor(arrays["Sigma_s"], "Sigma_s"), _noise_factor(arrays["Sigma_r"], "Sigma_r"))
        object.__setattr__(self, "_factors", factors)

    @property
    def state_dim(self) -> int:
        return self.b_s.size

    @property
    def action_dim(self) -> int:
        return self.W_s.shape[0] - self.b_s.size

    @property
    def reward_dim(self) -> int:
        return self.b_r.size

    @classmethod
    def standard(cls) -> "LinearDynamics":
        """Five state, one action and three reward dimensions."""
        return cls(
            np.array(_STATE_MAP).T,
            np.array(_STATE_BIAS),
            np.array(_STATE_COV),
            np.array(_REWARD_MAP).T,
            np.array(_REWARD_BIAS),
            np.array(_REWARD_COV),
        )

    def with_zero_noise(self) -> "LinearDynamics":
        return LinearDynamics(
            self.W_s, self.b_s, np.zeros_like(self.Sigma_s), self.W_r, self.b_r, np.zeros_like(self.Sigma_r)
        )

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("W_s", "b_s", "Sigma_s", "W_r", "b_r", "Sigma_r")}

    @classmethod
    def from_dict(cls, data: dict) -> "LinearDynamics":
        keys = {"W_s", "b_s", "Sigma_s", "W_r", "b_r", "Sigma_r"}
        if set(data) != keys:
            raise InvalidInputError(f"environment needs exactly the keys {sorted(keys)}")
        return cls(**{k: np.asarray(v, dtype=float) for k, v in data.items()})

    @classmethod
    def from_json(cls, path) -> "LinearDynamics":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class PolicySpec:
    """A state-dependent scalar-action policy.

    ``theta_a`` and ``theta_b`` mean, per family:

    * uniform: lower and upper bound directions
    * gaussian: mean and log-standard-deviation directions
    * logistic: location and log-scale directions

    ``noise`` is the per-draw perturbation added inside each link (uniform on
    ``[0, noise]`` for the uniform family, normal with that standard
    deviation otherwise). ``bound_shift`` widens a collapsed uniform
    interval; ``loc_clip`` bounds the logistic location.
    """

    family: str
    theta_a: np.ndarray
    theta_b: np.ndarray
    noise: float = 0.05
    bound_shift: float = 0.05
    loc_clip: float = 5.0

    def __post_init__(self):
        if self.family not in _POLICY_DEFAULTS:
            raise InvalidInputError(f"unknown policy family {self.family!r}")
        a = np.array(self.theta_a, dtype=float).ravel()
        b = np.array(self.theta_b, dtype=float).ravel()
        if a.shape != b.shape or a.size == 0:
            raise InvalidInputError("policy parameter vectors must be nonempty and equal in length")
        if self.noise < 0 or self.bound_shift < 0 or self.loc_clip <= 0:
            raise InvalidInputError("noise and bound_shift must be nonnegative, loc_clip positive")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "theta_a", a)
        object.__setattr__(self, "theta_b", b)

    @property
    def state_dim(self) -> int:
        return self.theta_a.size

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "theta_a": self.theta_a.tolist(),
            "theta_b": self.theta_b.tolist(),
            "noise": self.noise,
            "bound_shift": self.bound_shift,
            "loc_clip": self.loc_clip,
        }

    @classmethod
    def from_dict(cls, data) -> "PolicySpec":
        if isinstance(data, str):
            return default_policy(data)
        data = dict(data)
        allowed = {"family", "theta_a", "theta_b", "noise", "bound_shift", "loc_clip"}
        extra = set(data) - allowed
        if extra:
            raise InvalidInputError(f"unknown policy keys: {sorted(extra)}")
        if "family" not in data:
            raise InvalidInputError("policy needs a family")
        base = default_policy(data["family"]).to_dict()
        base.update(data)
        return cls(**base)


def default_policy(family: str) -> PolicySpec:
    """The simulation study's parameters for ``family``."""
    if family not in _POLICY_DEFAULTS:
        raise InvalidInputError(f"unknown policy family {family!r}")
    spec = _POLICY_DEFAULTS[family]
    return PolicySpec(family, np.array(spec["theta_a"]), np.array(spec["theta_b"]), spec["noise"])


def _squash(x: np.ndarray) -> np.ndarray:
    return np.clip(expit(x), ACTION_MARGIN, 1.0 - ACTION_MARGIN)


def sample_action(policy: PolicySpec, state, rng) -> np.ndarray:
    """Draw actions in (0, 1): shape ``(1,)`` for one state, ``(N, 1)`` for a batch."""
    s = np.asarray(state, dtype=float)
    single = s.ndim == 1
    s = np.atleast_2d(s)
    if s.shape[1] != policy.state_dim:
        raise InvalidInputError(f"state has dimension {s.shape[1]}, policy expects {policy.state_dim}")
    n = s.shape[0]
    lin_a = s @ policy.theta_a
    lin_b = s @ policy.theta_b
    if policy.family == "uniform":
        lo = expit(lin_a + rng.uniform(0.0, policy.noise, n))
        hi = expit(lin_b + rng.uniform(0.0, policy.noise, n))
        hi = np.where(hi <= lo, lo + policy.bound_shift, hi)
        act = np.clip(lo + (hi - lo) * rng.uniform(size=n), ACTION_MARGIN, 1.0 - ACTION_MARGIN)
    elif policy.family == "gaussian":
        mean = lin_a + rng.normal(0.0, policy.noise, n)
        std = np.exp(lin_b + rng.normal(0.0, policy.noise, n))
        act = _squash(mean + std * rng.standard_normal(n))
    else:
        loc = np.clip(lin_a + rng.normal(0.0, policy.noise, n), -policy.loc_clip, policy.loc_clip)
        scale = np.exp(lin_b + rng.normal(0.0, policy.noise, n))
        u = rng.uniform(size=n)
        act = _squash(loc + scale * (np.log(u) - np.log1p(-u)))
    act = act.reshape(n, 1)
    return act[0] if single else act


def step(dyn: LinearDynamics, s, a, rng):
    """One transition: returns ``(s_next, r)`` for a single pair or a batch."""
    s = np.asarray(s, dtype=float)
    a = np.asarray(a, dtype=float)
    single = s.ndim == 1
    x = np.hstack([np.atleast_2d(s), np.atleast_2d(a).reshape(np.atleast_2d(s).shape[0], -1)])
    if x.shape[1] != dyn.W_s.shape[0]:
        raise InvalidInputError(f"[s, a] has dimension {x.shape[1]}, dynamics expect {dyn.W_s.shape[0]}")
    n = x.shape[0]
    fs, fr = dyn._factors
    s_next = dyn.b_s + x @ dyn.W_s
    r = dyn.b_r + x @ dyn.W_r
    if np.any(fs):
        s_next = s_next + rng.standard_normal((n, dyn.state_dim)) @ fs.T
    if np.any(fr):
        r = r + rng.standard_normal((n, dyn.reward_dim)) @ fr.T
    if single:
        return s_next[0], r[0]
    return s_next, r


def _rollout(dyn, policy, s0, a0, horizon, rng):
    n = s0.shape[0]
    states = np.empty((horizon, n, dyn.state_dim))
    actions = np.empty((horizon, n, dyn.action_dim))
    rewards = np.empty((horizon, n, dyn.reward_dim))
    s = s0
    a = sample_action(policy, s, rng) if a0 is None else a0
    for t in range(horizon):
        states[t] = s
        actions[t] = a
        s_next, r = step(dyn, s, a, rng)
        rewards[t] = r
        if t + 1 < horizon:
            s = s_next
            a = sample_action(policy, s, rng)
    return states, actions, rewards


def generate_dataset(dyn: LinearDynamics, policy: PolicySpec, n_traj: int, T: int, init_dist=None, seed=0) -> list:
    """Roll out ``n_traj`` independent trajectories of length ``T``.

    Each trajectory draws from its own child of ``SeedSequence(seed)``, so
    any subset can be regenerated independently. ``init_dist(rng)`` returns
    one initial state; the default is a standard normal.
    """
    if n_traj < 1 or T < 1:
        raise InvalidInputError("need at least one trajectory of at least one step")
    if policy.state_dim != dyn.state_dim:
        raise InvalidInputError("policy and dynamics disagree on the state dimension")
    out = []
    for child in np.random.SeedSequence(seed).spawn(n_traj):
        rng = np.random.default_rng(child)
        s0 = rng.standard_normal(dyn.state_dim) if init_dist is None else np.asarray(init_dist(rng), dtype=float)
        st, ac, rw = _rollout(dyn, policy, s0.reshape(1, -1), None, T, rng)
        out.append(Trajectory(st[:, 0], ac[:, 0], rw[:, 0]))
    return out


def mc_reference(dyn, target_policy, s_star, a_star, n_traj: int = 10_000, T: int = 300, discount: float = 0.9, seed=0, block: int = 1000):
    """Monte-Carlo discounted returns from ``(s_star, a_star)`` under a policy.

    Trajectories are simulated in blocks that each own a child seed stream,
    so results depend only on ``seed`` and ``block``. Returns the ``N x d``
    samples and uniform weights ``1/N``.
    """
    if n_traj < 1 or T < 1:
        raise InvalidInputError("need at least one trajectory of at least one step")
    if not 0.0 <= discount < 1.0:
        raise InvalidInputError("discount must lie in [0, 1)")
    s_star = np.asarray(s_star, dtype=float).ravel()
    a_star = np.asarray(a_star, dtype=float).ravel()
    if s_star.size != dyn.state_dim or a_star.size != dyn.action_dim:
        raise InvalidInputError("query state or action has the wrong dimension")
    n_blocks = -(-n_traj // block)
    samples = np.empty((n_traj, dyn.reward_dim))
    for b, child in enumerate(np.random.SeedSequence(seed).spawn(n_blocks)):
        rng = np.random.default_rng(child)
        lo, hi = b * block, min(n_traj, (b + 1) * block)
        n = hi - lo
        s = np.tile(s_star, (n, 1))
        a = np.tile(a_star, (n, 1))
        acc = np.zeros((n, dyn.reward_dim))
        weight = 1.0
        for t in range(T):
            s_next, r = step(dyn, s, a, rng)
            acc += weight * r
            weight *= discount
            if weight == 0.0:
                break
            if t + 1 < T:
                s = s_next
                a = sample_action(target_policy, s, rng)
        samples[lo:hi] = acc
    return samples, np.full(n_traj, 1.0 / n_traj)
