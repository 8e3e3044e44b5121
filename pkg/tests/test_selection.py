import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sals.cache import LatentKvCache
from sals.calibration import ProjectionMatrix
from sals.config import AttentionConfig, SelectionPolicy
from sals.selection import (
    latent_scores,
    overlap_score,
    pool_query,
    select_topk,
    selected_count,
    selection_recall,
)
from sals.synthetic import PlantedToken, SyntheticSpec, geometric_spectrum
from sals.traffic import TrafficCounter


def pol(x, y, z):
    return SelectionPolicy(sink=x, critical_budget=y, recent=z)


def brute_force_selection(scores, x, y, z):
    """Enumerate every candidate critical set and keep the one that dominates the rest."""
    s = len(scores)
    fixed = set(range(min(x, s))) | set(range(s - min(z, s), s))
    rest = [i for i in range(s) if i not in fixed]
    m = min(y, len(rest))
    winners = []
    for combo in itertools.combinations(rest, m):
        inside = set(combo)
        outside = [j for j in rest if j not in inside]
        if all(scores[i] > scores[j] or (scores[i] == scores[j] and i < j) for i in inside for j in outside):
            winners.append(inside)
    assert len(winners) == 1
    return sorted(fixed | winners[0])


def test_examples():
    assert list(select_topk([0.1, 0.9, 0.5], pol(0, 2, 0)).indices) == [1, 2]
    assert list(select_topk([3.0] * 5, pol(0, 1, 0)).indices) == [0]
    assert list(select_topk([0.0, 9, 1, 5, 0.0], pol(1, 1, 1)).indices) == [0, 1, 4]


def test_exhaustive_small(rng):
    for s in range(1, 9):
        scores = rng.integers(0, 3, s).astype(float)
        for x, y, z in itertools.product(range(s + 1), repeat=3):
            got = select_topk(scores, pol(x, y, z), s)
            assert list(got.indices) == brute_force_selection(scores, x, y, z)
            assert len(got) == min(x + y + z, s)


def test_forced_index_takes_a_critical_slot():
    got = select_topk([5.0, 4, 3, 2, 1], pol(0, 2, 0), forced=(4,))
    assert list(got.indices) == [0, 4]
    got = select_topk([5.0, 4, 3, 2, 1], pol(0, 0, 0), forced=(4,))
    assert list(got.indices) == [4]
    got = select_topk([5.0, 4, 3, 2, 1], pol(0, 2, 1), forced=(4,))
    assert list(got.indices) == [0, 1, 4]


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 40), st.integers(0, 10), st.integers(0, 40), st.integers(0, 10), st.integers(0, 2**32 - 1))
def test_selected_count_closed_form(s, x, y, z, seed):
    scores = np.random.default_rng(seed).standard_normal(s)
    got = select_topk(scores, pol(x, y, z), s, forced=(s - 1,))
    assert len(got) == selected_count(pol(x, y, z), s)
    assert s - 1 in got.indices


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-5, 5), min_size=1, max_size=30), st.integers(0, 5), st.integers(0, 8),
       st.integers(0, 5), st.integers(1, 7), st.integers(-10, 10))
def test_superset_and_affine_invariance(scores, x, y, z, a, b):
    s = len(scores)
    scores = np.array(scores, dtype=float)
    base = select_topk(scores, pol(x, y, z))
    idx = set(base.indices.tolist())
    assert set(range(min(x, s))) <= idx and set(range(s - min(z, s), s)) <= idx
    assert np.all(np.diff(base.indices) > 0)
    assert np.array_equal(select_topk(a * scores + b, pol(x, y, z)).indices, base.indices)


def test_latent_scores_lossless_limit(rng):
    c = AttentionConfig(num_heads=2, head_dim=4, latent_rank=8, score_rank=8, value_bits=16)
    cache = LatentKvCache(c)
    keys = rng.standard_normal((7, 8))
    for i, k in enumerate(keys):
        cache.append(k, k, i, ProjectionMatrix.identity(8))
    q = rng.standard_normal(8)
    assert np.allclose(latent_scores(q, cache, ProjectionMatrix.identity(8), 8),
                       keys.astype(np.float32) @ q, atol=1e-6)
    assert np.array_equal(latent_scores(np.zeros(8), cache, ProjectionMatrix.identity(8), 8), np.zeros(7))


def test_latent_scores_truncated_loop(rng):
    c = AttentionConfig(num_heads=2, head_dim=4, latent_rank=5, score_rank=3, value_bits=16)
    u, _ = np.linalg.qr(rng.standard_normal((8, 5)))
    p = ProjectionMatrix(u, np.zeros(5))
    cache = LatentKvCache(c)
    keys = rng.standard_normal((9, 8))
    for i, k in enumerate(keys):
        cache.append(k, k, i, p)
    q = rng.standard_normal(8)
    counter = TrafficCounter()
    got = latent_scores(q, cache, p, 3, counter)
    for j in range(9):
        ql = [sum(q[i] * u[i, c] for i in range(8)) for c in range(3)]
        kl = [float(np.float32(sum(keys[j, i] * u[i, c] for i in range(8)))) for c in range(3)]
        assert got[j] == pytest.approx(sum(a * b for a, b in zip(ql, kl)), abs=1e-5)
    assert counter.score == 9 * 3
    with pytest.raises(ValueError):
        latent_scores(q, cache, p, 6)


def test_pool_query_gqa():
    q = np.arange(16, dtype=float)  # 4 query heads of dim 4
    pooled = pool_query(q, 4, 2, 4)
    assert np.array_equal(pooled, [2, 3, 4, 5, 10, 11, 12, 13])
    assert np.array_equal(pool_query(q, 4, 4, 4), q)


def test_overlap_examples():
    assert overlap_score([3, 1, 2, 0], [0.1, 0.2, 0.3, 0.4], 4) == 1.0
    assert overlap_score([3, 1, 2, 0], [0.25] * 4, 2) == 0.5
    assert overlap_score([0, 7, 2], [0, 1.0, 0], 1) == 1.0
    with pytest.raises(ValueError):
        overlap_score([1, 2], [0.5, 0.5], 3)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(0, 1)), min_size=1, max_size=30))
def test_overlap_monotone(pairs):
    approx = [a for a, _ in pairs]
    p = [b for _, b in pairs]
    vals = [overlap_score(approx, p, n) for n in range(len(pairs) + 1)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert all(0.0 <= v <= 1.0 for v in vals)
    if sum(p) > 0:
        assert vals[-1] == 1.0


def test_exact_latent_selection_equals_exact_topk(rng):
    # identity projection, full score rank, no rotation: latent scores are exact logits
    c = AttentionConfig(num_heads=1, head_dim=8, latent_rank=8, score_rank=8, value_bits=16)
    cache = LatentKvCache(c)
    keys = rng.standard_normal((30, 8))
    for i, k in enumerate(keys):
        cache.append(k, k, i, ProjectionMatrix.identity(8))
    q = rng.standard_normal(8)
    scores = latent_scores(q, cache, ProjectionMatrix.identity(8), 8)
    chosen = select_topk(scores, pol(0, 6, 0)).indices
    exact = keys.astype(np.float32).astype(np.float64) @ q
    assert set(chosen.tolist()) == set(np.argsort(-exact, kind="stable")[:6].tolist())


SPEC = SyntheticSpec(48, geometric_spectrum(8, 0.6), seed=0, planted_token=PlantedToken(20, 12.0))
CFG = AttentionConfig(num_heads=2, head_dim=4, latent_rank=8, score_rank=8)


def test_recall_rope_disabled():
    rep = selection_recall(20, SPEC, CFG, pol(0, 4, 0), rope=False)
    assert rep.planted_recall == 1.0
    assert 0 < rep.mean_overlap <= 1


def test_recall_full_budget_overlap_one():
    rep = selection_recall(5, SPEC, CFG, pol(0, 48, 0), rope=True)
    assert all(o == 1.0 for o in rep.overlaps)
    assert rep.mean_topk_agreement == 1.0


def test_recall_rope_enabled_is_reported():
    cfg = AttentionConfig(num_heads=2, head_dim=4, latent_rank=4, score_rank=2)
    rep = selection_recall(10, SPEC, cfg, pol(2, 4, 2), rope=True)
    assert 0.0 <= rep.planted_recall <= 1.0
    assert rep.trials == 10
    again = selection_recall(10, SPEC, cfg, pol(2, 4, 2), rope=True)
    assert again.overlaps == rep.overlaps
