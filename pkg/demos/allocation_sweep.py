"""Error surfaces and rank allocation on the default toy stack.

Builds K-SVD error surfaces (fast, closed form) over the candidate rank grid
and sweeps the error budget through the preset values, for the plain and the
sensitivity-weighted Pareto policies.

    python3 demos/allocation_sweep.py
"""

import numpy as np

from stiefattn import stief
from stiefattn.config import EPSILON_PRESETS, RunConfig
from stiefattn.surface import allocate_pareto, allocate_uniform, allocate_weighted_pareto, sensitivity_weights

cfg = RunConfig()
stack = cfg.build_stack()
xs = cfg.calibration_inputs()[:8]
ranks = cfg.candidate_ranks()
d_h = cfg.decoder.d_h
print("candidate ranks:", ranks)

_, surfaces = stief.baseline_store("k_svd", stack, xs, ranks, ranks)
np.set_printoptions(precision=3, suppress=True)
print("\nlayer 0 surface (rows r_K, cols r_V):")
print(surfaces[0].delta)

mid = cfg.middle_rank()
uni = allocate_uniform(mid, mid, surfaces, d_h)
print(f"\nuniform ({mid}, {mid}): KV ratio {uni.aggregate_ratio():.3f}, "
      f"mean delta {np.mean([c.delta for c in uni.layers]):.4f}")

w = sensitivity_weights(len(surfaces))
print("sensitivity weights:", w)
print(f"\n{'eps':>6} {'pareto':>8} {'weighted':>9}   per-layer (r_K, r_V), weighted")
for eps in EPSILON_PRESETS:
    p = allocate_pareto(surfaces, eps, d_h)
    q = allocate_weighted_pareto(surfaces, eps, w, d_h)
    flags = "".join("*" if c.fallback else "" for c in q.layers)
    print(f"{eps:>6} {p.aggregate_ratio():>8.3f} {q.aggregate_ratio():>9.3f}   {q.ranks} {flags}")
# '*' marks layers where no candidate met the budget (minimum-error fallback)
