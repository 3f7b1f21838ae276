"""Probe-to-gallery matchers: plain cosine and Neighborhood Aware Cosine (NAC).

NAC turns the cosine similarities to the k nearest prototypes into a softmax
(raw cosines as logits, no temperature) and reports the softmax mass of the
nearest one. A probe that sits between several identities gets a low score
even when its best cosine is high.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DegenerateInputError, ProtocolError
from .evaluation import ScoreTable
from .geometry import clamp_k, rank_by_similarity, similarities

COSINE_FALLBACK = "k=1 is the plain cosine matcher; use kind='cosine' instead of NAC"


@dataclass(frozen=True)
class MatcherConfig:
    kind: str = "nac"
    k: int = 16
    threshold: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("cosine", "nac"):
            raise ConfigurationError(f"unknown matcher kind {self.kind!r}")
        if self.kind == "nac" and self.k < 2:
            raise ConfigurationError(COSINE_FALLBACK)


@dataclass(frozen=True)
class MatchResult:
    predicted_label: int
    score: float
    accepted: Optional[bool] = None


def _cosine_scores(sims):
    top1 = rank_by_similarity(sims, 1)[:, 0]
    return top1, sims[np.arange(len(sims)), top1]


def _nac_scores(sims, k):
    neighbors = rank_by_similarity(sims, k)
    top_sims = np.take_along_axis(sims, neighbors, axis=1)
    weights = np.exp(top_sims)
    return neighbors[:, 0], weights[:, 0] / weights.sum(axis=1)


def nac_distribution(p, protos, k):
    """NAC value for every prototype (zero outside the k-neighborhood)."""
    if k < 2:
        raise ConfigurationError(COSINE_FALLBACK)
    k = clamp_k(k, protos.C)
    sims = similarities(p, protos)[0]
    neighbors = rank_by_similarity(sims, k)
    out = np.zeros(protos.C)
    weights = np.exp(sims[neighbors])
    out[neighbors] = weights / weights.sum()
    return out


def score_cosine(p, protos):
    idx, score = _cosine_scores(similarities(p, protos))
    return MatchResult(int(protos.labels[idx[0]]), float(score[0]))


def score_nac(p, protos, k=16):
    if k < 2:
        raise ConfigurationError(COSINE_FALLBACK)
    k = clamp_k(k, protos.C)
    idx, score = _nac_scores(similarities(p, protos), k)
    return MatchResult(int(protos.labels[idx[0]]), float(score[0]))


def decide(result, tau):
    return replace(result, accepted=bool(result.score >= tau))


def score_matrix(probes, protos, cfg):
    """Vectorized scoring: returns (predicted labels, scores) for an (N, d) probe array."""
    sims = similarities(probes, protos)
    if cfg.kind == "cosine":
        idx, scores = _cosine_scores(sims)
    else:
        idx, scores = _nac_scores(sims, clamp_k(cfg.k, protos.C))
    return protos.labels[idx], scores


def score_batch(probes, labels, is_known, protos, cfg):
    """Score every probe; rows keep the input order."""
    probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    if len(probes) == 0:
        raise ProtocolError("cannot score an empty probe list")
    norms = np.linalg.norm(probes, axis=1)
    bad = np.flatnonzero((norms == 0) | ~np.isfinite(norms))
    if len(bad):
        raise DegenerateInputError(f"probe {int(bad[0])} is a zero or non-finite vector")
    pred, scores = score_matrix(probes, protos, cfg)
    return ScoreTable(np.arange(len(probes)), labels, pred, scores, is_known)
