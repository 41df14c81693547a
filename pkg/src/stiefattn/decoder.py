"""Desk-scale GQA decoder layer with K/V compression hooks.

Layout convention: activations are row-major token matrices (n x d_model)
and weights multiply on the right, ``x @ W``. Query head ``h`` reads KV head
``h // (n_heads_q // n_heads_kv)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, DimensionError
from .linalg import orthonormality_residual
from .rng import RngState

BASIS_TOL = 1e-8


@dataclass(frozen=True)
class DecoderConfig:
    d_model: int = 64
    n_heads_q: int = 4
    n_heads_kv: int = 2
    d_h: int = 16
    d_ff: int = 172
    norm_kind: str = "rms_norm"
    mlp_kind: str = "silu_gated"
    rope_enabled: bool = False
    rope_base: float = 10000.0
    n_layers: int = 4
    layer_norm_eps: float = ad.LAYER_NORM_EPS
    rms_norm_eps: float = ad.RMS_NORM_EPS

    def validate(self) -> "DecoderConfig":
        if min(self.d_model, self.n_heads_q, self.n_heads_kv, self.d_h, self.d_ff, self.n_layers) < 1:
            raise ConfigError("all decoder sizes must be positive")
        if self.d_model != self.n_heads_q * self.d_h:
            raise ConfigError(f"d_model ({self.d_model}) must equal n_heads_q * d_h ({self.n_heads_q * self.d_h})")
        if self.n_heads_q % self.n_heads_kv:
            raise ConfigError("n_heads_q must be divisible by n_heads_kv")
        if self.norm_kind not in ("layer_norm", "rms_norm"):
            raise ConfigError(f"unknown norm_kind {self.norm_kind!r}")
        if self.mlp_kind not in ("silu_gated", "gelu"):
            raise ConfigError(f"unknown mlp_kind {self.mlp_kind!r}")
        if self.rope_enabled and self.d_h % 2:
            raise ConfigError("rotary embeddings need an even d_h")
        return self

    @property
    def group_size(self) -> int:
        return self.n_heads_q // self.n_heads_kv

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DecoderLayerParams:
    config: DecoderConfig
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    # silu_gated: gate/up/down; gelu: up/down only (w_gate is None)
    w_gate: np.ndarray | None
    w_up: np.ndarray
    w_down: np.ndarray
    attn_norm_gain: np.ndarray
    mlp_norm_gain: np.ndarray
    attn_norm_bias: np.ndarray | None = None
    mlp_norm_bias: np.ndarray | None = None

    def named_weights(self) -> list[tuple[str, np.ndarray]]:
        names = ["w_q", "w_k", "w_v", "w_o", "w_gate", "w_up", "w_down",
                 "attn_norm_gain", "mlp_norm_gain", "attn_norm_bias", "mlp_norm_bias"]
        return [(n, getattr(self, n)) for n in names if getattr(self, n) is not None]

    def w_o_head(self, h: int) -> np.ndarray:
        d = self.config.d_h
        return self.w_o[h * d:(h + 1) * d, :]


@dataclass
class ActivationRecord:
    x: np.ndarray
    q: list[np.ndarray]  # per query head, post-rope
    k: list[np.ndarray]  # per KV head, post-rope
    v: list[np.ndarray]  # per KV head
    head_outputs: list[np.ndarray]  # per query head, pre-W_O
    attention_output: np.ndarray  # post-W_O, pre-residual
    output: np.ndarray
    probs: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def n_tokens(self) -> int:
        return self.x.shape[0]


def _gaussian(rng: RngState, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal((fan_in, fan_out)) / math.sqrt(fan_in)


def init_layer(config: DecoderConfig, rng: RngState) -> DecoderLayerParams:
    """Draw one layer. Order of draws: W_Q, W_K, W_V, W_O, [W_gate], W_up, W_down."""
    c = config.validate()
    kv = c.n_heads_kv * c.d_h
    w_q = _gaussian(rng, c.d_model, c.n_heads_q * c.d_h)
    w_k = _gaussian(rng, c.d_model, kv)
    w_v = _gaussian(rng, c.d_model, kv)
    w_o = _gaussian(rng, c.n_heads_q * c.d_h, c.d_model)
    w_gate = _gaussian(rng, c.d_model, c.d_ff) if c.mlp_kind == "silu_gated" else None
    w_up = _gaussian(rng, c.d_model, c.d_ff)
    w_down = _gaussian(rng, c.d_ff, c.d_model)
    ones = np.ones((1, c.d_model))
    bias = np.zeros((1, c.d_model)) if c.norm_kind == "layer_norm" else None
    return DecoderLayerParams(
        c, w_q, w_k, w_v, w_o, w_gate, w_up, w_down, ones.copy(), ones.copy(),
        None if bias is None else bias.copy(), None if bias is None else bias.copy(),
    )


def init_stack(config: DecoderConfig, rng: RngState) -> list[DecoderLayerParams]:
    config.validate()
    return [init_layer(config, rng) for _ in range(config.n_layers)]


# --- building blocks (array or Var) -------------------------------------------


def _norm(layer: DecoderLayerParams, x, gain, bias):
    c = layer.config
    if c.norm_kind == "rms_norm":
        y = ad.rms_norm(x, c.rms_norm_eps)
    else:
        y = ad.layer_norm(x, c.layer_norm_eps)
    y = ad.mul(y, gain)
    if bias is not None:
        y = ad.add(y, bias)
    return y


def _mlp(layer: DecoderLayerParams, x):
    if layer.w_gate is not None:
        hidden = ad.mul(ad.silu(ad.matmul(x, layer.w_gate)), ad.matmul(x, layer.w_up))
    else:
        hidden = ad.gelu(ad.matmul(x, layer.w_up))
    return ad.matmul(hidden, layer.w_down)


def causal_mask(n: int) -> np.ndarray:
    mask = np.zeros((n, n))
    mask[np.triu_indices(n, 1)] = -np.inf
    return mask


def _rotate(x: np.ndarray, positions: np.ndarray, base: float) -> np.ndarray:
    d_h = x.shape[1]
    half = d_h // 2
    inv_freq = base ** (-np.arange(half) * 2.0 / d_h)
    ang = positions[:, None] * inv_freq[None, :]
    cos, sin = np.cos(ang), np.sin(ang)
    x1, x2 = x[:, :half], x[:, half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=1)


def apply_rope(q: np.ndarray, k: np.ndarray, positions=None, base: float = 10000.0):
    """Rotate-half rotary embedding; pairs dimension ``i`` with ``i + d_h/2``."""
    if q.shape[1] % 2 or k.shape[1] % 2:
        raise ConfigError("rotary embeddings need an even d_h")
    if positions is None:
        positions = np.arange(q.shape[0])
    positions = np.asarray(positions, dtype=np.float64)
    return _rotate(q, positions, base), _rotate(k, positions, base)


def project_qkv(layer: DecoderLayerParams, x: np.ndarray):
    """Pre-norm input projections. Returns (x_norm, q heads, k heads, v heads)."""
    c = layer.config
    xn = _norm(layer, x, layer.attn_norm_gain, layer.attn_norm_bias)
    q_all, k_all, v_all = xn @ layer.w_q, xn @ layer.w_k, xn @ layer.w_v
    d = c.d_h
    qs = [q_all[:, h * d:(h + 1) * d] for h in range(c.n_heads_q)]
    ks = [k_all[:, g * d:(g + 1) * d] for g in range(c.n_heads_kv)]
    vs = [v_all[:, g * d:(g + 1) * d] for g in range(c.n_heads_kv)]
    if c.rope_enabled:
        pos = np.arange(x.shape[0], dtype=np.float64)
        qs = [_rotate(qh, pos, c.rope_base) for qh in qs]
        ks = [_rotate(kh, pos, c.rope_base) for kh in ks]
    return xn, qs, ks, vs


def attend(layer: DecoderLayerParams, qs, ks, vs, mask=None, keep_probs=False):
    """Causal GQA attention over per-head Q/K/V (arrays or Vars).

    Returns (per-head outputs, attention output after W_O, probs).
    """
    c = layer.config
    n = ad.value_of(qs[0]).shape[0]
    if mask is None:
        mask = causal_mask(n)
    inv_scale = 1.0 / math.sqrt(c.d_h)
    heads, probs = [], []
    attn = None
    for h in range(c.n_heads_q):
        g = h // c.group_size
        scores = ad.add(ad.scale(ad.matmul(qs[h], ad.transpose(ks[g])), inv_scale), mask)
        p = ad.row_softmax(scores)
        out = ad.matmul(p, vs[g])
        heads.append(out)
        if keep_probs:
            probs.append(ad.value_of(p))
        contrib = ad.matmul(out, layer.w_o_head(h))
        attn = contrib if attn is None else ad.add(attn, contrib)
    return heads, attn, probs


def finish_layer(layer: DecoderLayerParams, x, attn):
    """Residual + pre-norm MLP block on top of an attention output."""
    y = ad.add(x, attn)
    return ad.add(y, _mlp(layer, _norm(layer, y, layer.mlp_norm_gain, layer.mlp_norm_bias)))


def _check_input(layer: DecoderLayerParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer.config.d_model:
        raise DimensionError(f"expected n x {layer.config.d_model} input, got {x.shape}")
    return x


def forward(layer: DecoderLayerParams, x: np.ndarray, capture: bool = False):
    """Uncompressed pre-norm layer: ``y = x + Attn(norm(x)); y += MLP(norm(y))``.

    Returns ``(y, record)``; ``record`` is None unless ``capture`` is set.
    """
    x = _check_input(layer, x)
    _, qs, ks, vs = project_qkv(layer, x)
    heads, attn, probs = attend(layer, qs, ks, vs, keep_probs=capture)
    y = finish_layer(layer, x, attn)
    if not capture:
        return y, None
    return y, ActivationRecord(x, qs, ks, vs, heads, attn, y, probs)


def check_basis(p: np.ndarray, d_h: int, what: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != d_h:
        raise DimensionError(f"{what} basis must have {d_h} rows, got shape {p.shape}")
    if not 1 <= p.shape[1] <= d_h:
        raise DimensionError(f"{what} basis rank {p.shape[1]} outside [1, {d_h}]")
    res = orthonormality_residual(p)
    if not res < BASIS_TOL:
        raise ContractError(f"{what} basis is not orthonormal (residual {res:.2e})")
    return p


def check_bases(layer, key_basis, value_bases):
    c = layer.config
    if key_basis is not None:
        key_basis = check_basis(key_basis, c.d_h, "key")
    if value_bases is not None:
        if len(value_bases) != c.n_heads_kv:
            raise DimensionError(f"need {c.n_heads_kv} value bases, got {len(value_bases)}")
        value_bases = [check_basis(p, c.d_h, f"value[{g}]") for g, p in enumerate(value_bases)]
    return key_basis, value_bases


def project(m, p):
    """``m P P^T`` (reconstruction from the rank-r cache)."""
    return ad.matmul(ad.matmul(m, p), ad.transpose(p))


def compressed_from_record(layer, record: ActivationRecord, key_basis=None, value_bases=None,
                           return_attention: bool = False):
    """Layer output with reconstructed K (shared basis) and/or V (per-head bases).

    ``None`` leaves that side uncompressed. Bases may be Vars; no
    orthonormality check is performed here.
    """
    ks = record.k if key_basis is None else [project(k, key_basis) for k in record.k]
    vs = record.v if value_bases is None else [project(v, p) for v, p in zip(record.v, value_bases)]
    _, attn, _ = attend(layer, record.q, ks, vs)
    y = finish_layer(layer, record.x, attn)
    return (y, attn) if return_attention else y


def forward_compressed(layer: DecoderLayerParams, x: np.ndarray, key_basis, value_bases):
    """Forward pass where attention sees ``K P_K P_K^T`` and ``V_g P_{V,g} P_{V,g}^T``."""
    x = _check_input(layer, x)
    key_basis, value_bases = check_bases(layer, key_basis, value_bases)
    _, qs, ks, vs = project_qkv(layer, x)
    record = ActivationRecord(x, qs, ks, vs, [], None, None)
    return compressed_from_record(layer, record, key_basis, value_bases)


@dataclass
class FoldedLayer:
    """Attention weights with the projection bases multiplied in.

    Scores use ``(x Wq_h P_K)(x Wk_g P_K)^T`` and the value path
    ``(x Wv_g P_Vg)(P_Vg^T Wo_h)``; the cache holds r-wide rows only.
    """

    base: DecoderLayerParams
    w_q_heads: list[np.ndarray]  # d_model x r_K
    w_k_heads: list[np.ndarray]  # d_model x r_K
    w_v_heads: list[np.ndarray]  # d_model x r_V
    w_o_heads: list[np.ndarray]  # r_V x d_model


def fold_bases(layer: DecoderLayerParams, key_basis, value_bases) -> FoldedLayer:
    c = layer.config
    if c.rope_enabled:
        raise ConfigError("basis folding needs rope disabled (rotation sits between W_K and P_K)")
    key_basis, value_bases = check_bases(layer, key_basis, value_bases)
    d = c.d_h
    wq = [layer.w_q[:, h * d:(h + 1) * d] @ key_basis for h in range(c.n_heads_q)]
    wk = [layer.w_k[:, g * d:(g + 1) * d] @ key_basis for g in range(c.n_heads_kv)]
    wv = [layer.w_v[:, g * d:(g + 1) * d] @ value_bases[g] for g in range(c.n_heads_kv)]
    wo = [value_bases[h // c.group_size].T @ layer.w_o_head(h) for h in range(c.n_heads_q)]
    return FoldedLayer(layer, wq, wk, wv, wo)


def forward_folded(folded: FoldedLayer, x: np.ndarray) -> np.ndarray:
    layer = folded.base
    c = layer.config
    x = _check_input(layer, x)
    xn = _norm(layer, x, layer.attn_norm_gain, layer.attn_norm_bias)
    k_small = [xn @ w for w in folded.w_k_heads]
    v_small = [xn @ w for w in folded.w_v_heads]
    mask = causal_mask(x.shape[0])
    attn = np.zeros_like(x)
    for h in range(c.n_heads_q):
        g = h // c.group_size
        scores = (xn @ folded.w_q_heads[h]) @ k_small[g].T / math.sqrt(c.d_h) + mask
        p = ad.row_softmax(scores)
        attn = attn + (p @ v_small[g]) @ folded.w_o_heads[h]
    return finish_layer(layer, x, attn)


def capture_calibration(stack: list[DecoderLayerParams], inputs: list[np.ndarray]) -> list[list[ActivationRecord]]:
    """Uncompressed pass through the stack; ``records[l][i]`` is layer l on input i."""
    records: list[list[ActivationRecord]] = [[] for _ in stack]
    for x in inputs:
        h = x
        for ell, layer in enumerate(stack):
            h, rec = forward(layer, h, capture=True)
            records[ell].append(rec)
    return records


def layer_inputs(stack: list[DecoderLayerParams], inputs: list[np.ndarray]) -> list[list[np.ndarray]]:
    """Per-layer uncompressed inputs ``X^(l)`` for each sequence."""
    out: list[list[np.ndarray]] = [[] for _ in stack]
    for x in inputs:
        h = np.asarray(x, dtype=np.float64)
        for ell, layer in enumerate(stack):
            out[ell].append(h)
            h, _ = forward(layer, h)
    return out


def record_for(layer: DecoderLayerParams, x: np.ndarray) -> ActivationRecord:
    return forward(layer, x, capture=True)[1]


def gaussian_inputs(config: DecoderConfig, n_sequences: int, seq_len: int, rng: RngState) -> list[np.ndarray]:
    """Seeded Gaussian token embeddings, drawn sequence by sequence."""
    return [rng.normal((seq_len, config.d_model)) for _ in range(n_sequences)]
