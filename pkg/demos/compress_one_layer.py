"""Learned vs SVD bases on a single decoder layer.

Trains a shared key basis and per-head value bases for one layer of a small
stack, then compares the layer-output error against K-SVD and random bases
at the same rank, and checks that the learned bases fold into the weights.

    python3 demos/compress_one_layer.py
"""

import numpy as np

from stiefattn import decoder as dec
from stiefattn import stief
from stiefattn.baselines import layer_bases
from stiefattn.linalg import random_orthonormal, relative_error
from stiefattn.rng import RngState

cfg = dec.DecoderConfig(d_model=32, n_heads_q=4, n_heads_kv=2, d_h=8, d_ff=64, n_layers=1)
rng = RngState(0)
layer = dec.init_stack(cfg, rng.child(1))[0]
xs = dec.gaussian_inputs(cfg, 8, 32, rng.child(2))
records = [dec.record_for(layer, x) for x in xs]
r = 4

# closed-form baseline: top singular directions of the pooled keys / per-head values
k_key, k_vals = layer_bases("k_svd", layer, records, r, r)

train_cfg = stief.TrainConfig(max_epochs=15, patience=5)
key_full, key_log = stief.train_key_basis(layer, records, r, train_cfg)
val_full, val_log = stief.train_value_bases(layer, records, r, train_cfg)
s_key, s_vals = key_full[:, :r], [p[:, :r] for p in val_full]

print(f"key training:   {key_log.initial_loss:.4f} -> {key_log.best_loss:.4f} ({len(key_log.epochs)} epochs)")
print(f"value training: {val_log.initial_loss:.4f} -> {val_log.best_loss:.4f} ({len(val_log.epochs)} epochs)")

rand = RngState(9)
random_delta = np.mean([
    stief.delta_from_records(layer, records, random_orthonormal(cfg.d_h, r, rand),
                             [random_orthonormal(cfg.d_h, r, rand) for _ in range(cfg.n_heads_kv)])
    for _ in range(20)])

print(f"\nlayer-output error at (r_K, r_V) = ({r}, {r}), calibration data")
print(f"  random bases : {random_delta:.4f}")
print(f"  K-SVD        : {stief.delta_from_records(layer, records, k_key, k_vals):.4f}")
print(f"  learned      : {stief.delta_from_records(layer, records, s_key, s_vals):.4f}")

# fresh sequences the bases never saw
held = dec.gaussian_inputs(cfg, 8, 32, rng.child(3))
print("held-out:")
print(f"  K-SVD        : {stief.layer_output_delta(layer, held, k_key, k_vals):.4f}")
print(f"  learned      : {stief.layer_output_delta(layer, held, s_key, s_vals):.4f}")

# with rope off the projections fold into W_K, W_V, W_Q, W_O
folded = dec.fold_bases(layer, s_key, s_vals)
y = dec.forward_compressed(layer, held[0], s_key, s_vals)
print(f"\nfolded vs projected forward, rel err {relative_error(y, dec.forward_folded(folded, held[0])):.1e}")
print(f"cached width per token: {2 * cfg.d_h} -> {2 * r} floats per KV head")
