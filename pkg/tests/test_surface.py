import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stiefattn.config import EPSILON_PRESETS
from stiefattn.errors import AllocationError, DimensionError
from stiefattn.rng import RngState
from stiefattn.surface import (ErrorSurface, LayerChoice, RankAllocation, aggregate_ratio, allocate_pareto,
                               allocate_uniform, allocate_weighted_pareto, compression_ratio, pareto_front,
                               sensitivity_weights)


def dominates(q, p):
    return q[0] <= p[0] and q[1] <= p[1] and (q[0] < p[0] or q[1] < p[1])


def brute_front(points):
    return [p for p in points if not any(dominates(q, p) for q in points)]


def exhaustive_choice(surface, budget):
    """Oracle: enumerate every cell, drop dominated ones, apply the selection rule."""
    cells = list(surface.cells())
    pts = [(d, rk + rv) for rk, rv, d in cells]
    front = [c for c, p in zip(cells, pts) if not any(dominates(q, p) for q in pts)]
    ok = [c for c in front if c[2] <= budget]
    if ok:
        return min(ok, key=lambda c: (c[0] + c[1], c[1], c[0]))[:2], False
    return min(front, key=lambda c: (c[2], c[0] + c[1], c[1], c[0]))[:2], True


def synthetic_surface(rng, ranks=(2, 3, 4), layer=0, d_h=4, monotone=True):
    n = len(ranks)
    a = np.array([rng.uniform() for _ in range(n * n)]).reshape(n, n) * 0.1
    if monotone:
        # Errors shrink with either rank, zero at the full-rank corner.
        a = np.flip(np.cumsum(np.cumsum(np.flip(a), 0), 1))
        if ranks[-1] == d_h:
            a[-1, -1] = 0.0
    return ErrorSurface(layer, list(ranks), list(ranks), a)


# --- compression ratio ------------------------------------------------------------


def test_compression_ratio_examples():
    assert compression_ratio(128, 128, 128) == 1.0
    assert compression_ratio(64, 64, 128) == 0.5
    assert compression_ratio(64, 90, 128) == 0.6015625
    for bad in [(0, 4, 4), (4, 5, 4)]:
        with pytest.raises(DimensionError):
            compression_ratio(*bad)


def test_aggregate_ratio_examples():
    layers = [LayerChoice(64, 64, 0.0)] * 4
    assert aggregate_ratio(RankAllocation("uniform", None, 128, layers), 128) == 0.5
    two = RankAllocation("x", None, 10, [LayerChoice(4, 4, 0.0), LayerChoice(6, 6, 0.0)])
    assert two.aggregate_ratio() == pytest.approx(0.5, abs=1e-15)


# --- Pareto front -------------------------------------------------------------------


def test_pareto_examples():
    assert pareto_front([(0.02, 10), (0.03, 8), (0.025, 12)]) == [(0.02, 10), (0.03, 8)]
    assert pareto_front([(0.5, 3)]) == [(0.5, 3)]
    assert pareto_front([(0.1, 4), (0.1, 4)]) == [(0.1, 4), (0.1, 4)]


def test_pareto_matches_brute_force_200_sets():
    rng = RngState(0)
    for _ in range(200):
        n = 1 + rng.below(25)
        # Coarse grids force plenty of ties in both coordinates.
        pts = [(rng.below(6) / 10, 2 + rng.below(8)) for _ in range(n)]
        assert pareto_front(pts) == brute_front(pts)


@given(st.lists(st.tuples(st.floats(0, 1, allow_nan=False), st.integers(2, 40)), min_size=1, max_size=30))
def test_pareto_property(pts):
    front = pareto_front(pts)
    assert front == brute_front(pts)
    assert front


# --- allocation -------------------------------------------------------------------


def test_uniform_allocation():
    surfaces = [synthetic_surface(RngState(i), layer=i) for i in range(4)]
    alloc = allocate_uniform(3, 3, surfaces, 4)
    assert alloc.ranks == [(3, 3)] * 4 and alloc.aggregate_ratio() == 0.75
    assert allocate_uniform(4, 4, surfaces, 4).aggregate_ratio() == 1.0
    with pytest.raises(AllocationError):
        allocate_uniform(1, 3, surfaces, 4)


def test_pareto_forced_full_rank_and_slack():
    grid = np.full((3, 3), 0.5)
    grid[-1, -1] = 0.0
    s = ErrorSurface(0, [2, 3, 4], [2, 3, 4], grid)
    assert allocate_pareto([s], 0.01, 4).ranks == [(4, 4)]
    assert allocate_pareto([s], 1.0, 4).ranks == [(2, 2)]


def test_pareto_tie_break_prefers_small_value_rank():
    grid = np.array([[0.9, 0.1], [0.1, 0.0]])
    s = ErrorSurface(0, [1, 2], [1, 2], grid)
    assert allocate_pareto([s], 0.2, 2).ranks == [(2, 1)]


def test_pareto_errors():
    s = synthetic_surface(RngState(0))
    with pytest.raises(AllocationError):
        allocate_pareto([s], 0.0, 4)
    with pytest.raises(AllocationError):
        allocate_pareto([], 0.1, 4)
    with pytest.raises(AllocationError):
        allocate_weighted_pareto([s], 0.1, [1.0, 1.0], 4)


@pytest.mark.parametrize("seed", range(50))
def test_pareto_matches_exhaustive_3x3(seed):
    rng = RngState(seed)
    s = synthetic_surface(rng, monotone=seed % 2 == 0)
    for eps in (0.0001, 0.01, 0.05, 0.1, 0.3, 1.0):
        choice = allocate_pareto([s], eps, 4).layers[0]
        ranks, fallback = exhaustive_choice(s, eps)
        assert (choice.r_k, choice.r_v) == ranks and choice.fallback == fallback
        assert choice.delta <= eps or choice.fallback


@pytest.mark.parametrize("seed", range(20))
def test_budget_monotonicity(seed):
    rng = RngState(seed)
    surfaces = [synthetic_surface(rng, layer=i, monotone=seed % 2 == 0) for i in range(4)]
    ratios = [allocate_pareto(surfaces, e, 4).aggregate_ratio() for e in EPSILON_PRESETS]
    assert all(a >= b for a, b in zip(ratios, ratios[1:]))


@pytest.mark.parametrize("seed", range(20))
def test_weighted_tightening_never_compresses_more(seed):
    rng = RngState(seed)
    surfaces = [synthetic_surface(rng, layer=i, monotone=seed % 2 == 1) for i in range(8)]
    w = sensitivity_weights(8)
    for eps in EPSILON_PRESETS:
        plain = allocate_pareto(surfaces, eps, 4)
        weighted = allocate_weighted_pareto(surfaces, eps, w, 4)
        for ell in range(8):
            a, b = plain.layers[ell], weighted.layers[ell]
            assert b.budget == pytest.approx(eps / w[ell], rel=1e-15)
            assert b.delta <= b.budget or b.fallback
            if w[ell] > 1:
                assert b.r_k + b.r_v >= a.r_k + a.r_v


def test_weighted_two_layer_exhaustive():
    for seed in range(30):
        rng = RngState(100 + seed)
        surfaces = [synthetic_surface(rng, layer=i, monotone=seed % 3 != 0) for i in range(2)]
        w = np.array([0.5 + rng.uniform(), 0.5 + rng.uniform()])
        alloc = allocate_weighted_pareto(surfaces, 0.05, w, 4)
        for s, wl, choice in zip(surfaces, w, alloc.layers):
            assert ((choice.r_k, choice.r_v), choice.fallback) == exhaustive_choice(s, 0.05 / wl)


def test_unit_weights_equal_plain_pareto():
    surfaces = [synthetic_surface(RngState(i), layer=i) for i in range(4)]
    for eps in EPSILON_PRESETS:
        assert allocate_weighted_pareto(surfaces, eps, np.ones(4), 4) == allocate_pareto(surfaces, eps, 4)


def test_allocated_ranks_come_from_candidates():
    rng = RngState(9)
    s = ErrorSurface(0, [8, 11, 16], [10, 13, 16], np.array([[rng.uniform() for _ in range(3)] for _ in range(3)]))
    for eps in (0.05, 0.5):
        rk, rv = allocate_pareto([s], eps, 16).ranks[0]
        assert rk in s.ranks_k and rv in s.ranks_v


def test_surface_validation():
    with pytest.raises(DimensionError):
        ErrorSurface(0, [1, 2], [1], np.zeros((2, 2)))
    with pytest.raises(DimensionError):
        ErrorSurface(0, [2, 1], [1], np.zeros((2, 1)))


# --- sensitivity weights ------------------------------------------------------------


def test_sensitivity_weights_l32():
    w = sensitivity_weights(32)
    assert abs(w[0] - 2.0 / (37 / 32)) < 1e-12
    assert abs(w.mean() - 1) < 1e-12
    assert np.array_equal(w, w[::-1])
    assert np.all(w > 0)


@pytest.mark.parametrize("n", range(1, 12))
def test_sensitivity_weights_short_stacks(n):
    w = sensitivity_weights(n)
    assert w.shape == (n,) and abs(w.mean() - 1) < 1e-12 and np.all(w > 0)
    assert np.allclose(w, w[::-1], atol=0)
    raw = w / w[0] * 2.0
    expected = [2.0, 1.75, 1.5, 1.25]
    for ell in range(n):
        k = min(ell, n - 1 - ell)
        assert raw[ell] == pytest.approx(expected[k] if k < 4 else 1.0, abs=1e-12)


def test_sensitivity_weights_l4_raw_profile():
    w = sensitivity_weights(4)
    assert np.allclose(w * np.mean([2.0, 1.75, 1.75, 2.0]), [2.0, 1.75, 1.75, 2.0], atol=1e-15)


def test_sensitivity_weights_invalid():
    with pytest.raises(DimensionError):
        sensitivity_weights(0)


def test_hand_sum_aggregate():
    alloc = RankAllocation("p", 0.1, 16, [LayerChoice(8, 11, 0.0), LayerChoice(13, 16, 0.0), LayerChoice(10, 10, 0.0)])
    hand = ((8 + 11) / 32 + (13 + 16) / 32 + (10 + 10) / 32) / 3
    assert aggregate_ratio(alloc, 16) == pytest.approx(hand, abs=1e-15)


def test_exhaustive_oracle_on_all_3x3_orderings():
    # Every assignment of three distinct error levels per row exercises ties in total rank.
    levels = [0.0, 0.02, 0.05]
    for perm in itertools.islice(itertools.product(levels, repeat=9), 0, 19683, 97):
        s = ErrorSurface(0, [2, 3, 4], [2, 3, 4], np.array(perm).reshape(3, 3))
        for eps in (0.01, 0.03):
            c = allocate_pareto([s], eps, 4).layers[0]
            assert ((c.r_k, c.r_v), c.fallback) == exhaustive_choice(s, eps)
