"""JSON experiment configuration with strict key checking."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .exceptions import InvalidInputError
from .kernel import MaternParams
from .optimizer import OptimizerConfig
from .sim_env import LinearDynamics, PolicySpec

__all__ = [
    "ExperimentConfig",
    "SimulationSettings",
    "MonteCarloSettings",
    "GridSettings",
    "EvaluationSettings",
    "SweepSettings",
    "KERNEL_PRESETS",
    "load_config",
]

# (nu, length_scale, amplitude, lambda_reg, lambda_fp, expansion_factor)
KERNEL_PRESETS = (
    (6.5, 2.0, 0.6, 5e-4, 100.0, 1.1),
    (7.5, 3.0, 0.6, 2e-5, 200.0, 1.1),
    (7.5, 2.0, 0.6, 1e-4, 100.0, 1.1),
    (6.5, 1.5, 0.8, 5e-4, 100.0, 1.0),
    (7.5, 2.0, 0.9, 2e-4, 200.0, 1.1),
    (5.5, 2.5, 0.9, 2e-4, 200.0, 1.1),
)


def _build(cls, data, section: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise InvalidInputError(f"section '{section}' must be an object")
    names = {f.name for f in fields(cls)}
    extra = set(data) - names
    if extra:
        raise InvalidInputError(f"unknown keys in '{section}': {sorted(extra)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise InvalidInputError(f"bad '{section}' section: {exc}") from None


@dataclass(frozen=True)
class SimulationSettings:
    n_trajectories: int = 1000
    horizon: int = 3

    def __post_init__(self):
        if self.n_trajectories < 1 or self.horizon < 1:
            raise InvalidInputError("simulation needs at least one trajectory of at least one step")


@dataclass(frozen=True)
class MonteCarloSettings:
    n_trajectories: int = 10_000
    horizon: int = 300

    def __post_init__(self):
        if self.n_trajectories < 1 or self.horizon < 1:
            raise InvalidInputError("Monte-Carlo settings must be positive")


@dataclass(frozen=True)
class GridSettings:
    k: int = 48
    expansion_factor: float = 1.1

    def __post_init__(self):
        if self.k < 1 or self.expansion_factor < 1:
            raise InvalidInputError("grid needs k >= 1 and expansion_factor >= 1")


@dataclass(frozen=True)
class EvaluationSettings:
    points_per_dim: int = 25
    pad: float = 0.1

    def __post_init__(self):
        if self.points_per_dim < 1 or self.pad < 0:
            raise InvalidInputError("evaluation grid settings are invalid")


@dataclass(frozen=True)
class SweepSettings:
    """Grids for the hyperparameter sweep.

    Every combination of the listed values is fitted. ``presets`` adds the
    built-in kernel settings as extra rows; amplitudes are standard
    deviations (the kernel variance is their square).
    """

    nu: list = None
    length_scale: list = None
    amplitude: list = None
    lambda_reg: list = None
    lambda_fp: list = None
    presets: bool = False

    def __post_init__(self):
        for name in ("nu", "length_scale", "amplitude", "lambda_reg", "lambda_fp"):
            value = getattr(self, name)
            if value is not None and (not isinstance(value, list) or not value):
                raise InvalidInputError(f"sweep.{name} must be a nonempty list")


def _kernel(data, name):
    if data is None:
        return None
    if not isinstance(data, dict):
        raise InvalidInputError(f"kernel.{name} must be an object")
    return MaternParams.from_dict(data)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to simulate, fit, evaluate and sweep.

    ``env`` is "standard", an inline dynamics object, or a path to a JSON file
    holding one. Policies are family names or objects accepted by
    :meth:`PolicySpec.from_dict`.
    """

    env: object = "standard"
    behavior_policy: object = "uniform"
    target_policy: object = "gaussian"
    discount: float = 0.9
    return_kernel: MaternParams = field(default_factory=lambda: MaternParams(6.5, 2.0, 0.36))
    input_kernel: MaternParams = None
    ratio_kernel: MaternParams = None
    lambda_reg: float = 5e-4
    lambda_ulsif: float = 1e-3
    phi_form: str = "cross"
    grid: GridSettings = field(default_factory=GridSettings)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    query_state: tuple = (-1.294, -0.917, 0.219, 0.283, 1.466)
    query_action: tuple = (0.434,)
    simulation: SimulationSettings = field(default_factory=SimulationSettings)
    mc: MonteCarloSettings = field(default_factory=MonteCarloSettings)
    evaluation: EvaluationSettings = field(default_factory=EvaluationSettings)
    split: tuple = (0.8, 0.1, 0.1)
    seed: int = 0
    recover: dict = None
    sweep: SweepSettings = None
    base_dir: str = field(default=".", compare=False)

    def __post_init__(self):
        if not 0.0 < self.discount < 1.0:
            raise InvalidInputError("discount must lie in (0, 1)")
        if self.lambda_reg <= 0 or self.lambda_ulsif <= 0:
            raise InvalidInputError("regularization constants must be positive")
        if self.phi_form not in ("cross", "next"):
            raise InvalidInputError("phi_form must be 'cross' or 'next'")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise InvalidInputError("split must be three nonnegative fractions summing to 1")
        # resolve eagerly so bad policies or environments fail at load time
        self.dynamics()
        self.policy("behavior")
        self.policy("target")

    def dynamics(self) -> LinearDynamics:
        if self.env == "standard":
            return LinearDynamics.standard()
        if isinstance(self.env, dict):
            return LinearDynamics.from_dict(self.env)
        if isinstance(self.env, str):
            path = Path(self.env)
            if not path.is_absolute():
                path = Path(self.base_dir) / path
            return LinearDynamics.from_json(path)
        raise InvalidInputError("env must be 'standard', an object or a file path")

    def policy(self, which: str) -> PolicySpec:
        raw = self.behavior_policy if which == "behavior" else self.target_policy
        return PolicySpec.from_dict(raw)

    @property
    def query(self) -> tuple:
        return np.asarray(self.query_state, dtype=float), np.asarray(self.query_action, dtype=float)

    @classmethod
    def from_dict(cls, data: dict, base_dir=".") -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise InvalidInputError("config must be a JSON object")
        known = {f.name for f in fields(cls)} - {"return_kernel", "input_kernel", "ratio_kernel", "base_dir"}
        known |= {"kernel", "query"}
        extra = set(data) - known
        if extra:
            raise InvalidInputError(f"unknown config keys: {sorted(extra)}")
        kw = {k: v for k, v in data.items() if k not in ("kernel", "query")}
        kernel = data.get("kernel") or {}
        if not isinstance(kernel, dict) or set(kernel) - {"return", "input", "ratio"}:
            raise InvalidInputError("kernel section allows only 'return', 'input' and 'ratio'")
        if "return" in kernel:
            kw["return_kernel"] = _kernel(kernel["return"], "return")
        kw["input_kernel"] = _kernel(kernel.get("input"), "input")
        kw["ratio_kernel"] = _kernel(kernel.get("ratio"), "ratio")
        query = data.get("query")
        if query is not None:
            if not isinstance(query, dict) or set(query) != {"state", "action"}:
                raise InvalidInputError("query needs exactly 'state' and 'action'")
            kw["query_state"] = tuple(float(v) for v in query["state"])
            kw["query_action"] = tuple(float(v) for v in query["action"])
        for key, cls_ in (
            ("grid", GridSettings),
            ("optimizer", OptimizerConfig),
            ("simulation", SimulationSettings),
            ("mc", MonteCarloSettings),
            ("evaluation", EvaluationSettings),
        ):
            if key in kw:
                kw[key] = _build(cls_, kw[key], key)
        if kw.get("sweep") is not None:
            kw["sweep"] = _build(SweepSettings, kw["sweep"], "sweep")
        if "split" in kw:
            kw["split"] = tuple(kw["split"])
        if kw.get("recover") is not None and not isinstance(kw["recover"], dict):
            raise InvalidInputError("recover must be an object")
        try:
            return cls(base_dir=str(base_dir), **kw)
        except TypeError as exc:
            raise InvalidInputError(f"bad config: {exc}") from None

    def to_dict(self) -> dict:
        out = {
            "env": self.env,
            "behavior_policy": self.behavior_policy,
            "target_policy": self.target_policy,
            "discount": self.discount,
            "kernel": {
                "return": self.return_kernel.to_dict(),
                "input": None if self.input_kernel is None else self.input_kernel.to_dict(),
                "ratio": None if self.ratio_kernel is None else self.ratio_kernel.to_dict(),
            },
            "lambda_reg": self.lambda_reg,
            "lambda_ulsif": self.lambda_ulsif,
            "phi_form": self.phi_form,
            "grid": asdict(self.grid),
            "optimizer": self.optimizer.to_dict(),
            "query": {"state": list(self.query_state), "action": list(self.query_action)},
            "simulation": asdict(self.simulation),
            "mc": asdict(self.mc),
            "evaluation": asdict(self.evaluation),
            "split": list(self.split),
            "seed": self.seed,
            "recover": self.recover,
            "sweep": None if self.sweep is None else asdict(self.sweep),
        }
        return out

    def replace(self, **changes) -> "ExperimentConfig":
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data.update(changes)
        return ExperimentConfig(**data)


def load_config(path) -> ExperimentConfig:
    """Read and validate a JSON config file."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError:
        raise
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{p}: invalid JSON ({exc})") from None
    return ExperimentConfig.from_dict(data, base_dir=p.parent)
