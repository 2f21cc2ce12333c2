"""Trajectory containers, transition flattening, splits and CSV persistence."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import InvalidInputError

__all__ = [
    "Trajectory",
    "TransitionDataset",
    "flatten",
    "discounted_return",
    "split_by_trajectory",
    "write_trajectories_csv",
    "read_trajectories_csv",
    "write_manifest",
    "read_manifest",
]


def _as_matrix(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be a 2-D array")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Trajectory:
    """One episode: row ``t`` holds the state, action and reward at step ``t``."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        s = _as_matrix(self.states, "states")
        a = _as_matrix(self.actions, "actions")
        r = _as_matrix(self.rewards, "rewards")
        if not (s.shape[0] == a.shape[0] == r.shape[0]):
            raise InvalidInputError(
                f"trajectory arrays disagree on length: {s.shape[0]}, {a.shape[0]}, {r.shape[0]}"
            )
        if s.shape[0] < 1:
            raise InvalidInputError("a trajectory needs at least one step")
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "actions", a)
        object.__setattr__(self, "rewards", r)

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def dims(self) -> tuple:
        return self.states.shape[1], self.actions.shape[1], self.rewards.shape[1]


@dataclass(frozen=True)
class TransitionDataset:
    """Flattened transitions ``(s, a, r, s', a')`` with provenance.

    ``next_actions`` are the behavior actions actually taken at ``s'``.
    ``returns_to_go`` are truncated discounted returns from each transition,
    present only when a discount was supplied to :func:`flatten`.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    next_actions: np.ndarray
    traj_ids: np.ndarray
    time_index: np.ndarray
    returns_to_go: np.ndarray = None
    trajectories: tuple = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        n = self.states.shape[0]
        if n < 1:
            raise InvalidInputError("a transition dataset needs at least one transition")
        for name in ("actions", "rewards", "next_states", "next_actions", "traj_ids", "time_index"):
            if getattr(self, name).shape[0] != n:
                raise InvalidInputError(f"{name} has {getattr(self, name).shape[0]} rows, expected {n}")
        if self.next_states.shape[1] != self.states.shape[1]:
            raise InvalidInputError("next_states and states differ in dimension")
        if self.returns_to_go is not None and self.returns_to_go.shape != self.rewards.shape:
            raise InvalidInputError("returns_to_go must match rewards in shape")

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def dims(self) -> tuple:
        return self.states.shape[1], self.actions.shape[1], self.rewards.shape[1]

    @property
    def inputs(self) -> np.ndarray:
        """Concatenated ``[s, a]`` rows."""
        return np.hstack([self.states, self.actions])

    @property
    def next_inputs(self) -> np.ndarray:
        """Concatenated ``[s', a']`` rows with the behavior next action."""
        return np.hstack([self.next_states, self.next_actions])


def discounted_return(traj: Trajectory, start_index: int, gamma: float) -> np.ndarray:
    """Sum of ``gamma**k * r[start + k]`` up to the end of the trajectory.

    ``gamma = 0`` is accepted and returns the immediate reward.
    """
    if not 0.0 <= gamma < 1.0:
        raise InvalidInputError(f"discount must lie in [0, 1), got {gamma}")
    if not 0 <= start_index < len(traj):
        raise InvalidInputError(f"start index {start_index} outside trajectory of length {len(traj)}")
    tail = traj.rewards[start_index:]
    weights = gamma ** np.arange(tail.shape[0])
    return weights @ tail


def _returns_to_go(rewards: np.ndarray, gamma: float) -> np.ndarray:
    out = np.empty_like(rewards)
    acc = np.zeros(rewards.shape[1])
    for t in range(rewards.shape[0] - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def flatten(trajectories, gamma: float = None) -> TransitionDataset:
    """Turn trajectories into transitions, dropping each final step as a source.

    The last step of every trajectory only serves as the next state of the
    step before it, so a trajectory of length ``T`` yields ``T - 1`` rows.
    """
    trajs = tuple(trajectories)
    if not trajs:
        raise InvalidInputError("no trajectories given")
    dims = trajs[0].dims
    if any(t.dims != dims for t in trajs):
        raise InvalidInputError("trajectories differ in state, action or reward dimension")
    if gamma is not None and not 0.0 < gamma < 1.0:
        raise InvalidInputError(f"discount must lie in (0, 1), got {gamma}")
    parts = {k: [] for k in ("s", "a", "r", "s2", "a2", "id", "t", "g")}
    for idx, tr in enumerate(trajs):
        steps = len(tr) - 1
        if steps == 0:
            continue
        parts["s"].append(tr.states[:-1])
        parts["a"].append(tr.actions[:-1])
        parts["r"].append(tr.rewards[:-1])
        parts["s2"].append(tr.states[1:])
        parts["a2"].append(tr.actions[1:])
        parts["id"].append(np.full(steps, idx))
        parts["t"].append(np.arange(steps))
        if gamma is not None:
            parts["g"].append(_returns_to_go(tr.rewards, gamma)[:-1])
    if not parts["s"]:
        raise InvalidInputError("every trajectory has length 1, so there are no transitions")
    return TransitionDataset(
        states=np.vstack(parts["s"]),
        actions=np.vstack(parts["a"]),
        rewards=np.vstack(parts["r"]),
        next_states=np.vstack(parts["s2"]),
        next_actions=np.vstack(parts["a2"]),
        traj_ids=np.concatenate(parts["id"]),
        time_index=np.concatenate(parts["t"]),
        returns_to_go=np.vstack(parts["g"]) if gamma is not None else None,
        trajectories=trajs,
    )


def _split_counts(n: int, fractions) -> list:
    fr = np.asarray(fractions, dtype=float)
    if fr.shape != (3,) or np.any(fr < 0) or not np.isclose(fr.sum(), 1.0):
        raise InvalidInputError(f"fractions must be three nonnegative numbers summing to 1, got {fractions}")
    raw = fr * n
    counts = np.floor(raw).astype(int)
    remainder = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:remainder]] += 1
    # every requested split gets at least one trajectory
    for i in np.flatnonzero((fr > 0) & (counts == 0)):
        donor = int(np.argmax(counts))
        if counts[donor] <= 1:
            raise InvalidInputError(f"{n} trajectories cannot fill splits {tuple(fractions)}")
        counts[donor] -= 1
        counts[i] += 1
    return counts.tolist()


def split_by_trajectory(dataset: TransitionDataset, fractions=(0.8, 0.1, 0.1), seed: int = 0, gamma: float = None):
    """Partition whole trajectories into train, validation and test datasets.

    Returns a 3-tuple. A split with zero requested fraction comes back as None.
    The permutation depends only on ``seed``.
    """
    trajs = dataset.trajectories
    if not trajs:
        raise InvalidInputError("dataset carries no trajectories to split")
    counts = _split_counts(len(trajs), fractions)
    order = np.random.default_rng(seed).permutation(len(trajs))
    if gamma is None and dataset.returns_to_go is not None:
        raise InvalidInputError("pass the discount so split returns can be recomputed")
    out, start = [], 0
    for c in counts:
        idx = np.sort(order[start:start + c])
        start += c
        out.append(flatten([trajs[i] for i in idx], gamma) if c else None)
    return tuple(out)


def _header(dims) -> list:
    p, q, d = dims
    return (
        ["traj_id", "t"]
        + [f"s_{i}" for i in range(p)]
        + [f"a_{i}" for i in range(q)]
        + [f"r_{i}" for i in range(d)]
    )


def write_trajectories_csv(trajectories, path) -> None:
    """Write trajectories as one row per step with a fixed column order."""
    trajs = list(trajectories)
    if not trajs:
        raise InvalidInputError("no trajectories to write")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_header(trajs[0].dims))
        for idx, tr in enumerate(trajs):
            for t in range(len(tr)):
                row = np.concatenate([tr.states[t], tr.actions[t], tr.rewards[t]])
                writer.writerow([idx, t] + [repr(float(v)) for v in row])


def read_trajectories_csv(path, dims=None) -> list:
    """Read trajectories written by :func:`write_trajectories_csv`."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InvalidInputError(f"{path} is empty") from None
        rows = [r for r in reader if r]
    p = sum(h.startswith("s_") for h in header)
    q = sum(h.startswith("a_") for h in header)
    d = sum(h.startswith("r_") for h in header)
    if header != _header((p, q, d)) or min(p, q, d) == 0:
        raise InvalidInputError(f"unexpected CSV header in {path}: {header}")
    if dims is not None and tuple(dims) != (p, q, d):
        raise InvalidInputError(f"CSV dims {(p, q, d)} disagree with manifest {tuple(dims)}")
    if not rows:
        raise InvalidInputError(f"{path} has no data rows")
    try:
        table = np.array(rows, dtype=float)
    except ValueError as exc:
        raise InvalidInputError(f"malformed number in {path}: {exc}") from None
    out = []
    ids = table[:, 0].astype(int)
    for tid in np.unique(ids):
        block = table[ids == tid]
        block = block[np.argsort(block[:, 1], kind="stable")]
        if not np.array_equal(block[:, 1], np.arange(block.shape[0])):
            raise InvalidInputError(f"trajectory {tid} has missing or repeated steps")
        out.append(Trajectory(block[:, 2:2 + p], block[:, 2 + p:2 + p + q], block[:, 2 + p + q:]))
    return out


def write_manifest(path, dims, gamma: float, seed, **extra) -> None:
    p, q, d = dims
    payload = {"dims": {"state": p, "action": q, "reward": d}, "gamma": gamma, "seed": seed}
    payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    data = json.loads(Path(path).read_text())
    for key in ("dims", "gamma", "seed"):
        if key not in data:
            raise InvalidInputError(f"manifest {path} lacks '{key}'")
    return data
