"""Per-layer error surfaces and deployment-time rank allocation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AllocationError, DimensionError

RAMP = (2.0, 1.75, 1.5, 1.25)


@dataclass
class ErrorSurface:
    """``delta[i, j]`` is the layer-output error at ``(ranks_k[i], ranks_v[j])``."""

    layer: int
    ranks_k: list[int]
    ranks_v: list[int]
    delta: np.ndarray

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float64)
        if self.delta.shape != (len(self.ranks_k), len(self.ranks_v)):
            raise DimensionError(f"grid shape {self.delta.shape} does not match rank sets")
        if list(self.ranks_k) != sorted(self.ranks_k) or list(self.ranks_v) != sorted(self.ranks_v):
            raise DimensionError("candidate rank sets must be sorted ascending")

    def cells(self):
        """Yield ``(r_k, r_v, delta)`` over the grid in row-major order."""
        for i, rk in enumerate(self.ranks_k):
            for j, rv in enumerate(self.ranks_v):
                yield rk, rv, float(self.delta[i, j])

    def at(self, r_k: int, r_v: int) -> float:
        try:
            return float(self.delta[self.ranks_k.index(r_k), self.ranks_v.index(r_v)])
        except ValueError:
            raise AllocationError(f"layer {self.layer}: ranks ({r_k}, {r_v}) were not trained") from None


@dataclass
class LayerChoice:
    r_k: int
    r_v: int
    delta: float
    budget: float | None = None
    fallback: bool = False


@dataclass
class RankAllocation:
    policy: str
    epsilon: float | None
    d_h: int
    layers: list[LayerChoice]
    weights: list[float] | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def ranks(self) -> list[tuple[int, int]]:
        return [(c.r_k, c.r_v) for c in self.layers]

    def aggregate_ratio(self) -> float:
        return aggregate_ratio(self, self.d_h)


def compression_ratio(r_k: int, r_v: int, d_h: int) -> float:
    """Fraction of per-token KV memory kept: ``(r_k + r_v) / (2 d_h)``."""
    if not (1 <= r_k <= d_h and 1 <= r_v <= d_h):
        raise DimensionError(f"ranks ({r_k}, {r_v}) outside [1, {d_h}]")
    return (r_k + r_v) / (2 * d_h)


def aggregate_ratio(allocation: RankAllocation, d_h: int) -> float:
    ratios = [compression_ratio(c.r_k, c.r_v, d_h) for c in allocation.layers]
    return sum(ratios) / len(ratios)


def pareto_indices(points: list[tuple[float, int]]) -> list[int]:
    """Indices of points not dominated in (delta, total_rank), in input order.

    ``q`` dominates ``p`` when it is no worse in both coordinates and strictly
    better in at least one; exact duplicates therefore both survive.
    """
    order = sorted(range(len(points)), key=lambda i: (points[i][1], points[i][0]))
    keep = []
    best_lower = np.inf  # min delta over strictly smaller total rank
    pos = 0
    while pos < len(order):
        rank = points[order[pos]][1]
        end = pos
        while end < len(order) and points[order[end]][1] == rank:
            end += 1
        group = order[pos:end]
        group_min = points[group[0]][0]
        keep.extend(i for i in group if points[i][0] == group_min and group_min < best_lower)
        best_lower = min(best_lower, group_min)
        pos = end
    return sorted(keep)


def pareto_front(points: list[tuple[float, int]]) -> list[tuple[float, int]]:
    """Non-dominated subset of ``(delta, total_rank)`` points (ties kept)."""
    return [points[i] for i in pareto_indices(points)]


def _choose(surface: ErrorSurface, budget: float) -> LayerChoice:
    cells = list(surface.cells())
    if not cells:
        raise AllocationError(f"layer {surface.layer}: empty surface")
    on_front = [cells[i] for i in pareto_indices([(d, rk + rv) for rk, rv, d in cells])]
    feasible = [c for c in on_front if c[2] <= budget]
    if feasible:
        rk, rv, d = min(feasible, key=lambda c: (c[0] + c[1], c[1], c[0]))
        return LayerChoice(rk, rv, d, budget, False)
    rk, rv, d = min(on_front, key=lambda c: (c[2], c[0] + c[1], c[1], c[0]))
    return LayerChoice(rk, rv, d, budget, True)


def allocate_uniform(r_k: int, r_v: int, surfaces: list[ErrorSurface], d_h: int) -> RankAllocation:
    """Same ``(r_k, r_v)`` on every layer; ranks must exist in each surface."""
    layers = [LayerChoice(r_k, r_v, s.at(r_k, r_v)) for s in surfaces]
    compression_ratio(r_k, r_v, d_h)
    return RankAllocation("uniform", None, d_h, layers)


def allocate_pareto(surfaces: list[ErrorSurface], epsilon: float, d_h: int) -> RankAllocation:
    """Per layer, the smallest ``r_k + r_v`` Pareto point with ``delta <= epsilon``.

    Ties prefer smaller ``r_v`` then smaller ``r_k``. Infeasible layers fall
    back to the minimum-delta Pareto point and are flagged.
    """
    if not epsilon > 0:
        raise AllocationError("epsilon must be positive")
    if not surfaces:
        raise AllocationError("no surfaces")
    return RankAllocation("pareto", epsilon, d_h, [_choose(s, epsilon) for s in surfaces])


def sensitivity_weights(n_layers: int) -> np.ndarray:
    """Positional prior: 2.0/1.75/1.5/1.25 ramps at both ends, 1 elsewhere, mean 1.

    Short stacks use as many ramp entries per end as fit.
    """
    if n_layers < 1:
        raise DimensionError("need at least one layer")
    raw = np.ones(n_layers)
    for ell in range(n_layers):
        k = min(ell, n_layers - 1 - ell)
        if k < len(RAMP):
            raw[ell] = RAMP[k]
    return raw / raw.mean()


def allocate_weighted_pareto(surfaces: list[ErrorSurface], epsilon: float, weights, d_h: int) -> RankAllocation:
    """Pareto allocation with per-layer budget ``epsilon / w_l``."""
    if not epsilon > 0:
        raise AllocationError("epsilon must be positive")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(surfaces),):
        raise AllocationError(f"need {len(surfaces)} weights, got {weights.shape}")
    if np.any(weights <= 0):
        raise AllocationError("weights must be positive")
    if np.all(weights == 1.0):
        # Neutral weights: the plain Pareto policy, down to the report bytes.
        return allocate_pareto(surfaces, epsilon, d_h)
    layers = [_choose(s, epsilon / w) for s, w in zip(surfaces, weights)]
    return RankAllocation("weighted_pareto", epsilon, d_h, layers, [float(w) for w in weights])
