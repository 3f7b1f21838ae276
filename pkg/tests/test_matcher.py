import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from osfi.errors import ConfigurationError, DegenerateInputError
from osfi.geometry import PrototypeSet, l2_normalize
from osfi.matcher import (MatchResult, MatcherConfig, decide, nac_distribution, score_batch,
                          score_cosine, score_nac)


def random_protos(rng, C, d=8):
    return PrototypeSet(l2_normalize(rng.normal(size=(C, d))), np.arange(C))


def test_cosine_probe_on_prototype(rng):
    protos = random_protos(rng, 8)
    res = score_cosine(protos.vectors[5], protos)
    assert res.predicted_label == 5 and res.score == pytest.approx(1.0)
    assert res.accepted is None


def test_cosine_bisecting_probe_scores_0866():
    a = math.radians(60)
    protos = PrototypeSet(np.array([[1.0, 0.0], [math.cos(a), math.sin(a)]]), np.array([0, 1]))
    res = score_cosine([math.cos(a / 2), math.sin(a / 2)], protos)
    assert res.score == pytest.approx(0.866, abs=5e-4)


def test_cosine_matches_exhaustive_loop(rng):
    protos = random_protos(rng, 10)
    p = rng.normal(size=8)
    best = max(range(10), key=lambda j: (sum(a * b for a, b in zip(l2_normalize(p), protos.vectors[j])), -j))
    res = score_cosine(p, protos)
    assert res.predicted_label == best
    assert res.score == pytest.approx(float(l2_normalize(p) @ protos.vectors[best]), abs=1e-12)


def test_nac_symmetric_pair_is_half():
    protos = PrototypeSet(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 1]))
    assert score_nac([1.0, 1.0], protos, k=2).score == 0.5


def test_nac_orthogonal_second_neighbor():
    protos = PrototypeSet(np.eye(3), np.arange(3))
    expect = math.e / (math.e + 1.0)
    assert score_nac([1.0, 0.0, 0.0], protos, k=2).score == pytest.approx(expect, abs=1e-12)
    assert expect == pytest.approx(0.7311, abs=1e-4)


def test_nac_k_equal_C_is_full_softmax(rng):
    protos = random_protos(rng, 12)
    p = rng.normal(size=8)
    cos = protos.vectors @ l2_normalize(p)
    soft = np.exp(cos) / np.exp(cos).sum()
    assert score_nac(p, protos, k=12).score == pytest.approx(soft.max(), abs=1e-12)


def test_nac_k1_is_configuration_error(rng):
    protos = random_protos(rng, 4)
    with pytest.raises(ConfigurationError, match="cosine"):
        score_nac(rng.normal(size=8), protos, k=1)
    with pytest.raises(ConfigurationError):
        MatcherConfig("nac", 1)
    with pytest.raises(ConfigurationError):
        MatcherConfig("evm")


@given(st.integers(0, 2**32 - 1), st.integers(2, 20), st.integers(2, 25))
def test_nac_normalization_bounds_and_argmax(seed, C, k):
    rng = np.random.default_rng(seed)
    protos = random_protos(rng, C)
    p = rng.normal(size=8)
    k_eff = min(k, C)
    dist = nac_distribution(p, protos, k_eff)
    assert abs(dist.sum() - 1.0) <= 1e-9
    assert np.count_nonzero(dist) == k_eff
    res = score_nac(p, protos, k_eff)
    assert res.predicted_label == score_cosine(p, protos).predicted_label
    assert 1.0 / k_eff - 1e-12 <= res.score <= 1.0
    assert res.score == pytest.approx(dist.max(), abs=1e-15)


def test_decide_is_inclusive():
    assert decide(MatchResult(3, 0.9), 0.5).accepted
    assert decide(MatchResult(3, 0.5), 0.5).accepted
    assert not decide(MatchResult(3, 0.4999), 0.5).accepted
    assert decide(MatchResult(3, 0.9), 0.5).predicted_label == 3


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
def test_raising_tau_never_accepts_more(score, t1, t2):
    lo, hi = sorted((t1, t2))
    assert decide(MatchResult(0, score), hi).accepted <= decide(MatchResult(0, score), lo).accepted


@pytest.mark.parametrize("cfg", [MatcherConfig("cosine"), MatcherConfig("nac", 4)])
def test_batch_rows_match_single_calls(rng, cfg):
    protos = random_protos(rng, 6)
    probes = rng.normal(size=(3, 8))
    table = score_batch(probes, [0, 1, 9], [True, True, False], protos, cfg)
    assert list(table.probe_index) == [0, 1, 2]
    for i, p in enumerate(probes):
        single = score_cosine(p, protos) if cfg.kind == "cosine" else score_nac(p, protos, cfg.k)
        assert table.pred_label[i] == single.predicted_label
        assert table.score[i] == pytest.approx(single.score, abs=1e-12)
    again = score_batch(probes, [0, 1, 9], [True, True, False], protos, cfg)
    assert again.to_csv() == table.to_csv()


def test_batch_reports_degenerate_probe_index(rng):
    protos = random_protos(rng, 3)
    probes = rng.normal(size=(4, 8))
    probes[2] = 0.0
    with pytest.raises(DegenerateInputError, match="probe 2"):
        score_batch(probes, [0] * 4, [True] * 4, protos, MatcherConfig("cosine"))


def nac_gap_data(rng, C=40, d=32, spread=0.5):
    """Gallery/known/unknown embeddings where known probes sit nearest their own prototype."""
    centers = l2_normalize(rng.normal(size=(2 * C, d)))
    hub = l2_normalize(rng.normal(size=d))

    def sample(cs, n):
        q = rng.uniform(0.3, 1.0, (len(cs) * n, 1))
        base = np.repeat(cs, n, axis=0)
        return q * base + (1 - q) * hub + spread / np.sqrt(d) * rng.normal(size=base.shape)

    gallery = sample(centers[:C], 3)
    protos = PrototypeSet(l2_normalize(np.array([gallery[3 * j:3 * j + 3].mean(0) for j in range(C)])),
                          np.arange(C))
    known = sample(centers[:C], 6)
    unknown = sample(centers[C:], 6)
    x = np.concatenate([known, unknown])
    labels = np.concatenate([np.repeat(np.arange(C), 6), np.repeat(np.arange(C, 2 * C), 6)])
    is_known = np.arange(len(x)) < len(known)
    return x, labels, is_known, protos


def test_nac_shrinks_known_unknown_overlap(rng):
    from osfi.evaluation import histogram_overlap, score_histograms
    x, labels, is_known, protos = nac_gap_data(rng)
    overlaps = {}
    for cfg in (MatcherConfig("cosine"), MatcherConfig("nac", 16)):
        table = score_batch(x, labels, is_known, protos, cfg)
        overlaps[cfg.kind] = histogram_overlap(*score_histograms(table, 64, minmax=True)[1:])
    assert overlaps["nac"] < overlaps["cosine"]
