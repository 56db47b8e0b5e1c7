"""Descriptor primitives: unit-sphere projection, L2 distances, batch types.

Every descriptor is a q-dimensional float64 unit vector (q >= 2). Distances
are computed with the explicit difference-norm formula, never the
dot-product identity, and always sum squared differences in ascending
coordinate order so that vectorized and scalar code paths agree bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import ValidationError

UNIT_NORM_ATOL = 1e-9


@njit(cache=True)
def _l2_kernel(u, v):
    s = 0.0
    for k in range(u.shape[0]):
        d = u[k] - v[k]
        s += d * d
    return np.sqrt(s)


@njit(cache=True)
def _pairwise_kernel(a, b):
    n, m = a.shape[0], b.shape[0]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for k in range(a.shape[1]):
                d = a[i, k] - b[j, k]
                s += d * d
            out[i, j] = np.sqrt(s)
    return out


def _as_matrix(a, name: str) -> np.ndarray:
    a = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    if a.ndim != 2:
        raise ValidationError(f"{name} must be a 2-D array, got ndim={a.ndim}")
    if a.shape[0] == 0:
        raise ValidationError(f"{name} must be non-empty")
    return a


def project_to_sphere(v) -> np.ndarray:
    """Normalize a vector to unit L2 norm.

    Raises ValidationError on zero (or numerically negligible) norm.
    Idempotent on vectors that are already unit norm.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValidationError(f"expected a 1-D vector, got ndim={v.ndim}")
    if v.shape[0] < 2:
        raise ValidationError("descriptor dimension must be at least 2")
    norm = float(np.sqrt(np.sum(v * v)))
    if norm <= 0.0 or not np.isfinite(norm):
        raise ValidationError("zero norm: cannot project degenerate vector")
    return v / norm


def project_rows(m) -> np.ndarray:
    """Row-wise unit-norm projection of a 2-D array."""
    m = _as_matrix(m, "rows")
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    if not np.all(norms > 0.0) or not np.all(np.isfinite(norms)):
        raise ValidationError("zero norm: cannot project degenerate row")
    return m / norms[:, None]


def l2_distance(u, v) -> float:
    """L2 distance between two descriptors, ascending-index summation."""
    u = np.ascontiguousarray(np.asarray(u, dtype=np.float64))
    v = np.ascontiguousarray(np.asarray(v, dtype=np.float64))
    if u.ndim != 1 or v.ndim != 1:
        raise ValidationError("l2_distance expects 1-D vectors")
    if u.shape[0] != v.shape[0]:
        raise ValidationError(
            f"dimension mismatch: {u.shape[0]} vs {v.shape[0]}"
        )
    return float(_l2_kernel(u, v))


def pairwise_distances(a, b) -> np.ndarray:
    """All-pairs L2 distances, entry [i, j] = l2_distance(a[i], b[j]).

    Bit-identical to the naive double loop of l2_distance: each entry sums
    its squared differences sequentially in ascending coordinate order.
    """
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ValidationError(
            f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}"
        )
    return _pairwise_kernel(a, b)


def _check_unit_rows(m: np.ndarray, name: str, atol: float) -> None:
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    bad = np.abs(norms - 1.0) > atol
    if np.any(bad):
        i = int(np.argmax(bad))
        raise ValidationError(
            f"{name}[{i}] is not unit norm (|norm-1| = {abs(norms[i]-1.0):.3g})"
        )


@dataclass(frozen=True)
class PairBatch:
    """N matched descriptor pairs with pairwise-distinct integer labels.

    anchors[i] and positives[i] are the two members of class labels[i].
    Optional row indices record where each descriptor lives in the
    embedding table that produced the batch.
    """

    anchors: np.ndarray
    positives: np.ndarray
    labels: np.ndarray
    anchor_rows: np.ndarray | None = None
    positive_rows: np.ndarray | None = None

    def __post_init__(self):
        anchors = _as_matrix(self.anchors, "anchors")
        positives = _as_matrix(self.positives, "positives")
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "anchors", anchors)
        object.__setattr__(self, "positives", positives)
        object.__setattr__(self, "labels", labels)
        n = anchors.shape[0]
        if n < 2:
            raise ValidationError("a batch needs at least 2 pairs")
        if positives.shape != anchors.shape:
            raise ValidationError("anchors and positives must share shape")
        if anchors.shape[1] < 2:
            raise ValidationError("descriptor dimension must be at least 2")
        if labels.shape != (n,):
            raise ValidationError("labels must be a length-N vector")
        if np.unique(labels).size != n:
            raise ValidationError("labels must be pairwise distinct in a batch")
        _check_unit_rows(anchors, "anchors", UNIT_NORM_ATOL)
        _check_unit_rows(positives, "positives", UNIT_NORM_ATOL)

    @property
    def n_pairs(self) -> int:
        return self.anchors.shape[0]

    @property
    def dim(self) -> int:
        return self.anchors.shape[1]


@dataclass
class LabeledDescriptorSet:
    """Descriptors with integer class labels and optional split tags."""

    vectors: np.ndarray
    labels: np.ndarray
    tags: list[str] | None = None
    provenance: str = ""

    def __post_init__(self):
        self.vectors = _as_matrix(self.vectors, "vectors")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (self.vectors.shape[0],):
            raise ValidationError("labels length must match descriptor count")
        if self.tags is not None and len(self.tags) != self.vectors.shape[0]:
            raise ValidationError("tags length must match descriptor count")

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def class_indices(self) -> dict[int, np.ndarray]:
        """Row indices per class id, classes in ascending id order."""
        order = np.argsort(self.labels, kind="stable")
        out: dict[int, np.ndarray] = {}
        sorted_labels = self.labels[order]
        bounds = np.flatnonzero(np.diff(sorted_labels)) + 1
        for chunk in np.split(order, bounds):
            out[int(self.labels[chunk[0]])] = chunk
        return out
