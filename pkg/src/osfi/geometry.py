"""Vector geometry on the unit hypersphere: normalization, prototypes, neighbors.

Vectors are plain float64 numpy arrays. A batch of embeddings is an (N, d)
array paired with an (N,) integer label array.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, ProtocolError

NORM_TOL = 1e-6
DEGENERATE_MEAN_TOL = 1e-9


def l2_normalize(v):
    """Scale `v` (a vector or the rows of a matrix) to unit Euclidean norm."""
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise DegenerateInputError("cannot normalize a zero or non-finite vector")
    return v / norms


def cosine(p, q):
    p = l2_normalize(p)
    q = l2_normalize(q)
    return float(np.clip(p @ q, -1.0, 1.0))


def angle_deg(cos_values):
    return np.degrees(np.arccos(np.clip(cos_values, -1.0, 1.0)))


@dataclass(frozen=True)
class PrototypeSet:
    """C unit-norm class prototypes; row j belongs to identity ``labels[j]``."""

    vectors: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.labels):
            raise ProtocolError("prototype vectors and labels disagree in length")
        if len(np.unique(self.labels)) != len(self.labels):
            raise ProtocolError("prototype labels must be distinct")

    @property
    def C(self):
        return len(self.labels)

    @property
    def dim(self):
        return self.vectors.shape[1]

    def index_of(self, label):
        hits = np.flatnonzero(self.labels == label)
        if len(hits) == 0:
            raise ProtocolError(f"no prototype for identity {label}")
        return int(hits[0])


def class_means(features, labels, classes=None):
    """Re-normalized per-class mean of normalized features, one row per class.

    Shared by prototype construction and weight imprinting so the two agree
    bit-for-bit.
    """
    features = l2_normalize(features)
    labels = np.asarray(labels)
    if classes is None:
        classes = np.unique(labels)
    if len(features) == 0:
        raise ProtocolError("cannot build prototypes from an empty gallery")
    rows = np.empty((len(classes), features.shape[1]))
    for j, c in enumerate(classes):
        members = features[labels == c]
        if len(members) == 0:
            raise ProtocolError(f"identity {c} has no gallery samples")
        mean = members.sum(axis=0) / len(members)
        norm = np.linalg.norm(mean)
        if norm < DEGENERATE_MEAN_TOL:
            raise DegenerateInputError(f"identity {c} has a degenerate (zero) mean embedding")
        rows[j] = mean / norm
    return rows, np.asarray(classes)


def build_prototypes(features, labels, mode="mean-of-normalized"):
    if mode != "mean-of-normalized":
        raise ValueError(f"unknown prototype mode {mode!r}")
    rows, classes = class_means(features, labels)
    return PrototypeSet(rows, classes)


def similarities(probes, protos):
    """Cosine similarity matrix (N, C) of probes against prototype rows."""
    probes = l2_normalize(np.atleast_2d(probes))
    vecs = protos.vectors if isinstance(protos, PrototypeSet) else protos
    return np.clip(probes @ vecs.T, -1.0, 1.0)


def rank_by_similarity(sims, k):
    """Column indices of the k largest entries per row; ties go to the lower index."""
    order = np.argsort(-sims, axis=-1, kind="stable")
    return order[..., :k]


def clamp_k(k, C):
    if k < 1:
        raise ValueError("k must be positive")
    if k > C:
        warnings.warn(f"k={k} exceeds the number of prototypes; clamped to {C}", stacklevel=3)
        return C
    return k


def top_k_neighbors(p, protos, k):
    k = clamp_k(k, protos.C)
    return rank_by_similarity(similarities(p, protos)[0], k)


@dataclass(frozen=True)
class NeighborAngleProfile:
    mean_top1_deg: float
    mean_top2_deg: float
    mean_top2to16_deg: float
    ranks_used: int = 16
    averaging: str = field(default="all-probes")


def neighbor_angle_profile(probes, protos, depth=16):
    """Mean angle from each probe to its nearest, second-nearest and 2..depth nearest prototypes.

    Averages over all probes (not per identity). With fewer than `depth`
    prototypes, the last field uses whatever ranks exist and `ranks_used`
    records how many; fields that need a second prototype are NaN when C=1.
    """
    probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    if len(probes) == 0:
        raise ProtocolError("empty probe set")
    sims = similarities(probes, protos)
    top = -np.sort(-sims, axis=1)[:, :depth]
    angles = angle_deg(top)
    top1 = float(angles[:, 0].mean())
    if angles.shape[1] < 2:
        return NeighborAngleProfile(top1, float("nan"), float("nan"), ranks_used=1)
    return NeighborAngleProfile(
        top1,
        float(angles[:, 1].mean()),
        float(angles[:, 1:].mean()),
        ranks_used=angles.shape[1],
    )
