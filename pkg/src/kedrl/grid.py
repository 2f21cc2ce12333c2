"""Support grid for returns: k-means centroids plus an expanded convex hull."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import cdist

from .exceptions import InvalidInputError

__all__ = [
    "KMeansResult",
    "kmeans",
    "hull_vertex_indices",
    "convex_hull",
    "dedup_rows",
    "ReturnGrid",
    "build_grid",
]

DEDUP_TOL = 1e-12


@dataclass(frozen=True)
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    wcss_history: tuple

    @property
    def wcss(self) -> float:
        return self.wcss_history[-1]


def _plus_plus_init(x: np.ndarray, k: int, rng) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    first = rng.integers(n)
    centers[0] = x[first]
    closest = np.sum((x - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            # fewer distinct points than clusters left; pick any unused index
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centers[c] = x[idx]
        closest = np.minimum(closest, np.sum((x - centers[c]) ** 2, axis=1))
    return centers


def kmeans_fit(samples, k: int, seed=0, max_iter: int = 300, tol: float = 1e-8) -> KMeansResult:
    """Lloyd iterations from a k-means++ start.

    Empty clusters are reseeded at the point farthest from its current
    centroid. Stops once the relative drop in within-cluster sum of squares
    falls below ``tol``.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if x.ndim != 2 or not np.all(np.isfinite(x)):
        raise InvalidInputError("samples must be a finite n-by-d matrix")
    n = x.shape[0]
    if not 1 <= k <= n:
        raise InvalidInputError(f"need 1 <= k <= n, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    centers = _plus_plus_init(x, k, rng)
    history = []
    labels = np.zeros(n, dtype=int)
    for _ in range(max_iter):
        sq = cdist(x, centers, "sqeuclidean")
        labels = np.argmin(sq, axis=1)
        point_cost = sq[np.arange(n), labels]
        history.append(float(point_cost.sum()))
        if len(history) > 1:
            prev = history[-2]
            if prev == 0 or (prev - history[-1]) <= tol * prev:
                break
        counts = np.bincount(labels, minlength=k)
        new = np.zeros_like(centers)
        np.add.at(new, labels, x)
        nonempty = counts > 0
        new[nonempty] /= counts[nonempty, None]
        taken = set()
        for c in np.flatnonzero(~nonempty):
            order = np.argsort(-point_cost, kind="stable")
            pick = next(i for i in order if i not in taken)
            taken.add(pick)
            new[c] = x[pick]
            point_cost[pick] = 0.0
        centers = new
    return KMeansResult(centers, labels, tuple(history))


def kmeans(samples, k: int, seed=0, max_iter: int = 300) -> np.ndarray:
    """Return the ``k`` centroids found by :func:`kmeans_fit`."""
    return kmeans_fit(samples, k, seed, max_iter).centroids


def _principal_extremes(x: np.ndarray) -> np.ndarray:
    centered = x - x.mean(axis=0)
    _, sv, vt = np.linalg.svd(centered, full_matrices=False)
    keep = sv > 1e-12 * max(sv[0], 1e-300) if sv.size else np.zeros(0, bool)
    idx = []
    for axis in vt[keep]:
        proj = centered @ axis
        idx.extend([int(np.argmin(proj)), int(np.argmax(proj))])
    if not idx:
        idx = [0]
    return np.unique(idx)


def hull_vertex_indices(points) -> np.ndarray:
    """Sorted indices of the extreme points of ``points``.

    Exact for dimensions 1 to 3. Above that the per-coordinate minimizers and
    maximizers stand in for the vertices. Rank-deficient inputs use extremes
    along their principal axes.
    """
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    k, d = x.shape
    if k == 0:
        raise InvalidInputError("no points given")
    if d == 1:
        return np.unique([int(np.argmin(x[:, 0])), int(np.argmax(x[:, 0]))])
    if d > 3:
        return np.unique(np.concatenate([np.argmin(x, axis=0), np.argmax(x, axis=0)]))
    if k < d + 1 or np.linalg.matrix_rank(x - x.mean(axis=0), tol=1e-10 * max(1.0, np.abs(x).max())) < d:
        return _principal_extremes(x)
    try:
        return np.sort(ConvexHull(x).vertices)
    except QhullError:
        return _principal_extremes(x)


def convex_hull(points) -> np.ndarray:
    """Vertex coordinates of the hull, in input order."""
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    return x[hull_vertex_indices(x)]


def dedup_rows(rows, tol: float = DEDUP_TOL) -> np.ndarray:
    """Drop rows within ``tol`` (Euclidean) of an earlier row."""
    x = np.asarray(rows, dtype=float)
    keep = []
    for i in range(x.shape[0]):
        if not keep or np.min(np.linalg.norm(x[keep] - x[i], axis=1)) > tol:
            keep.append(i)
    return x[keep]


@dataclass(frozen=True)
class ReturnGrid:
    """Atoms on which return distributions are represented."""

    atoms: np.ndarray
    k_clusters: int
    expansion_factor: float
    source_count: int
    hull_vertex_count: int = 0

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms.reshape(-1, 1)
        if atoms.ndim != 2 or atoms.shape[0] == 0 or not np.all(np.isfinite(atoms)):
            raise InvalidInputError("grid atoms must be a finite nonempty matrix")
        atoms.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)

    @property
    def size(self) -> int:
        return self.atoms.shape[0]

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def to_csv(self, path) -> None:
        header = ",".join(f"z_{i}" for i in range(self.dim))
        meta = f"k_clusters={self.k_clusters};expansion_factor={self.expansion_factor!r};source_count={self.source_count};hull_vertex_count={self.hull_vertex_count}"
        np.savetxt(path, self.atoms, delimiter=",", header=meta + "\n" + header, comments="# ", fmt="%.17g")

    @classmethod
    def from_csv(cls, path) -> "ReturnGrid":
        with open(path) as fh:
            meta_line = fh.readline()
        meta = dict(item.split("=") for item in meta_line[2:].strip().split(";"))
        atoms = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
        return cls(
            atoms,
            int(meta["k_clusters"]),
            float(meta["expansion_factor"]),
            int(meta["source_count"]),
            int(meta["hull_vertex_count"]),
        )


def build_grid(samples, k: int = 48, expansion_factor: float = 1.1, seed=0, max_iter: int = 300) -> ReturnGrid:
    """Cluster return samples and append hull vertices pushed away from the mean."""
    if not expansion_factor >= 1.0:
        raise InvalidInputError(f"expansion factor must be at least 1, got {expansion_factor}")
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    centroids = kmeans(x, k, seed, max_iter)
    center = centroids.mean(axis=0)
    vertices = convex_hull(centroids)
    expanded = center + expansion_factor * (vertices - center)
    atoms = dedup_rows(np.vstack([centroids, expanded]))
    return ReturnGrid(atoms, k, float(expansion_factor), x.shape[0], vertices.shape[0])
