"""Open-set evaluation: DIR@FAR, DIR curves and AUC, score histograms, cluster metrics.

Threshold convention: a probe is accepted when ``score >= tau``. For a FAR
target, tau is the smallest threshold whose empirical FAR does not exceed the
target. Because accepted sets only change at unknown scores, that threshold
sits just above some unknown score u* and we report ``nextafter(u*, +inf)``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import ProtocolError
from .geometry import PrototypeSet, angle_deg, l2_normalize

REPORT_FARS = (0.001, 0.01, 0.1, 1.0)


@dataclass
class ScoreTable:
    probe_index: np.ndarray
    true_label: np.ndarray
    pred_label: np.ndarray
    score: np.ndarray
    is_known: np.ndarray

    def __post_init__(self):
        self.probe_index = np.asarray(self.probe_index, dtype=np.int64)
        self.true_label = np.asarray(self.true_label, dtype=np.int64)
        self.pred_label = np.asarray(self.pred_label, dtype=np.int64)
        self.score = np.asarray(self.score, dtype=np.float64)
        self.is_known = np.asarray(self.is_known, dtype=bool)
        n = len(self.score)
        for name in ("probe_index", "true_label", "pred_label", "is_known"):
            if len(getattr(self, name)) != n:
                raise ProtocolError(f"score table column {name} has the wrong length")
        if not np.all(np.isfinite(self.score)):
            raise ProtocolError("score table contains non-finite scores")

    def __len__(self):
        return len(self.score)

    @property
    def correct(self):
        return self.is_known & (self.pred_label == self.true_label)

    def closed_set_accuracy(self):
        n_known = int(self.is_known.sum())
        if n_known == 0:
            raise ProtocolError("score table has no known probes")
        return int(self.correct.sum()) / n_known

    def to_csv(self):
        buf = io.StringIO()
        buf.write("probe_index,true_label,pred_label,score,is_known\n")
        for i, t, p, s, k in zip(self.probe_index, self.true_label, self.pred_label, self.score, self.is_known):
            buf.write(f"{i},{t},{p},{s:.9g},{int(k)}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls(
            [int(r["probe_index"]) for r in rows],
            [int(r["true_label"]) for r in rows],
            [int(r["pred_label"]) for r in rows],
            [float(r["score"]) for r in rows],
            [r["is_known"] == "1" for r in rows],
        )


def _split_scores(table):
    known = table.is_known
    if not known.any():
        raise ProtocolError("DIR needs at least one known probe")
    return table.score[known], table.correct[known], table.score[~known]


def dir_at_far(table, far_target):
    """Return ``(dir, tau)`` at the given false-alarm-rate target."""
    k_scores, k_correct, u_scores = _split_scores(table)
    n_known, n_unknown = len(k_scores), len(u_scores)
    if far_target >= 1.0:
        return int(k_correct.sum()) / n_known, -np.inf
    if n_unknown == 0:
        raise ProtocolError("FAR < 1 needs at least one unknown probe")
    if far_target < 0:
        raise ValueError("far_target must be non-negative")
    # Unknown scores descending; accepting everything above u_desc[j] admits j unknowns
    # (plus any ties, which we skip past).
    u_desc = np.sort(u_scores)[::-1]
    allowed = int(np.floor(far_target * n_unknown + 1e-9))
    # u* is the score of the (allowed+1)-th highest unknown; every unknown >= u* is rejected
    # only if tau > u*. Ties at u* force rejecting all of them.
    u_star = u_desc[min(allowed, n_unknown - 1)]
    tau = np.nextafter(u_star, np.inf)
    hits = int(np.count_nonzero(k_correct & (k_scores >= tau)))
    return hits / n_known, float(tau)


@dataclass
class DIRCurve:
    far: np.ndarray
    dir: np.ndarray
    auc: float

    def to_csv(self):
        lines = ["far,dir"]
        lines += [f"{f:.9g},{d:.9g}" for f, d in zip(self.far, self.dir)]
        return "\n".join(lines) + "\n"

    def dir_at(self, far_target):
        """DIR of the step curve at a FAR target (largest sampled FAR not above it)."""
        idx = np.searchsorted(self.far, far_target + 1e-12, side="right") - 1
        return float(self.dir[max(idx, 0)])


def dir_curve(table):
    """Sweep tau over every distinct unknown score plus the -inf sentinel.

    AUC is the trapezoid integral over linear FAR in [0, 1].
    """
    k_scores, k_correct, u_scores = _split_scores(table)
    n_known, n_unknown = len(k_scores), len(u_scores)
    if n_unknown == 0:
        raise ProtocolError("a DIR curve needs at least one unknown probe")

    distinct_u = np.unique(u_scores)  # ascending
    taus = np.concatenate([[np.nextafter(u, np.inf) for u in distinct_u[::-1]], [-np.inf]])
    u_sorted = np.sort(u_scores)
    correct_sorted = np.sort(k_scores[k_correct])
    # counts of scores >= tau via searchsorted on ascending arrays
    far_counts = n_unknown - np.searchsorted(u_sorted, taus, side="left")
    dir_counts = len(correct_sorted) - np.searchsorted(correct_sorted, taus, side="left")
    far = far_counts / n_unknown
    dirs = dir_counts / n_known
    auc = float(np.sum(np.diff(far) * (dirs[1:] + dirs[:-1]) / 2.0))
    return DIRCurve(far, dirs, auc)


def dir_report(table, fars=REPORT_FARS):
    """DIR per FAR target, keyed by ``repr(float(far))``."""
    return {repr(float(far)): dir_at_far(table, far)[0] for far in fars}


def score_histograms(table, bins=64, minmax=False):
    """Per-group normalized histograms on shared bins.

    Returns ``(edges, known_mass, unknown_mass)``; each mass vector sums to 1
    (or is all zero when its group is empty).
    """
    if bins < 2:
        raise ValueError("bins must be at least 2")
    scores = table.score
    if minmax:
        lo, hi = scores.min(), scores.max()
        scores = (scores - lo) / (hi - lo) if hi > lo else np.zeros_like(scores)
    lo, hi = float(scores.min()), float(scores.max())
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)

    def mass(values):
        counts, _ = np.histogram(values, bins=edges)
        total = counts.sum()
        return counts / total if total else counts.astype(np.float64)

    return edges, mass(scores[table.is_known]), mass(scores[~table.is_known])


def histogram_overlap(known_mass, unknown_mass):
    """1 - total variation distance between the two binned distributions."""
    return float(np.minimum(known_mass, unknown_mass).sum())


def histograms_csv(edges, known_mass, unknown_mass):
    lines = ["bin_left,bin_right,density_known,density_unknown"]
    for lo, hi, k, u in zip(edges[:-1], edges[1:], known_mass, unknown_mass):
        lines.append(f"{lo:.9g},{hi:.9g},{k:.9g},{u:.9g}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class ClusterMetrics:
    inter_deg: float
    intra_deg: float
    dbi: float


def cluster_metrics(features, labels, protos: PrototypeSet):
    """Angular spread of features around their prototypes, and prototype separation.

    intra_deg: mean angle between each feature and its own prototype.
    inter_deg: mean angle over unordered prototype pairs.
    dbi: Davies-Bouldin index with Euclidean distances on the unit sphere,
    using the prototypes as cluster centroids.
    """
    if protos.C < 2:
        raise ProtocolError("inter-class separation and DBI need at least two prototypes")
    features = l2_normalize(np.atleast_2d(features))
    labels = np.asarray(labels)
    rows = np.array([protos.index_of(lab) for lab in labels])
    own = protos.vectors[rows]
    intra = float(angle_deg(np.sum(features * own, axis=1)).mean())

    gram = np.clip(protos.vectors @ protos.vectors.T, -1.0, 1.0)
    iu = np.triu_indices(protos.C, k=1)
    inter = float(angle_deg(gram[iu]).mean())

    dist_to_own = np.linalg.norm(features - own, axis=1)
    scatter = np.zeros(protos.C)
    present = np.zeros(protos.C, dtype=bool)
    for j in range(protos.C):
        members = rows == j
        if members.any():
            scatter[j] = dist_to_own[members].mean()
            present[j] = True
    centers = protos.vectors[present]
    s = scatter[present]
    if len(s) < 2:
        raise ProtocolError("DBI needs features from at least two identities")
    sep = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=-1)
    np.fill_diagonal(sep, np.inf)
    ratio = (s[:, None] + s[None, :]) / sep
    dbi = float(ratio.max(axis=1).mean())
    return ClusterMetrics(inter_deg=inter, intra_deg=intra, dbi=dbi)
