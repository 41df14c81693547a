"""Learned orthonormal KV bases: statistics, MLP predictor, QR, training loop.

Per layer and candidate rank a small MLP maps per-dimension activation
statistics ``[mu; sigma^2]`` to a square matrix ``A``; the Q factor of
``A``'s QR decomposition is the basis, and its leading ``r`` columns define
the compression. The MLP is trained with AdamW to minimize the relative
error of the decoder-layer output.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .baselines import BaselineKind, head_values, ksvd_basis, layer_bases, pooled_keys
from .decoder import (ActivationRecord, DecoderLayerParams, check_bases, compressed_from_record, layer_inputs,
                      record_for)
from .errors import ConfigError, DegenerateInputError, DimensionError, RankDeficiencyError, StiefError, TrainingDivergedError
from .linalg import complete_basis, orthonormality_residual, relative_error
from .optim import AdamW, cosine_lr
from .rng import RngState, derive_seed
from .surface import ErrorSurface

log = logging.getLogger(__name__)

JITTER = 1e-8
HEAD_INIT_SCALE = 1e-3
TARGET_KEY, TARGET_VALUE = "key", "value"
_TARGET_IDS = {TARGET_KEY: 1, TARGET_VALUE: 2}


# --- statistics -------------------------------------------------------------


@dataclass
class ActivationStats:
    mu: np.ndarray
    sigma_sq: np.ndarray

    @property
    def s(self) -> np.ndarray:
        """Feature row ``[mu; sigma^2]`` (1 x 2 d_h)."""
        return np.concatenate([self.mu, self.sigma_sq]).reshape(1, -1)


def compute_stats(samples: list[np.ndarray]) -> ActivationStats:
    """Per-dimension mean and population variance over every row of every sample."""
    rows = [np.asarray(s, dtype=np.float64) for s in samples if np.asarray(s).size]
    if not rows:
        raise DegenerateInputError("no rows to compute statistics from")
    data = np.vstack(rows)
    mu = data.mean(axis=0)
    sigma_sq = ((data - mu) ** 2).mean(axis=0)
    return ActivationStats(mu, sigma_sq)


# --- predictor ----------------------------------------------------------------


@dataclass
class PredictorParams:
    """Three GELU(LayerNorm(affine)) hidden layers and a linear head.

    Row-vector layout: ``h_i = gelu(LN(h_{i-1} @ W_i + b_i) * gain_i + offset_i)``
    and ``A = reshape(h_3 @ W_head + b_head, (d_h, d_h))`` row-major.
    """

    weights: list
    biases: list
    ln_gains: list
    ln_offsets: list
    head_w: object
    head_b: object

    @property
    def d_h(self) -> int:
        return int(round(math.sqrt(ad.value_of(self.head_b).shape[1])))

    def arrays(self) -> list:
        return [*self.weights, *self.biases, *self.ln_gains, *self.ln_offsets, self.head_w, self.head_b]

    @classmethod
    def from_arrays(cls, arrays: list, n_hidden: int = 3) -> "PredictorParams":
        k = n_hidden
        return cls(list(arrays[:k]), list(arrays[k:2 * k]), list(arrays[2 * k:3 * k]),
                   list(arrays[3 * k:4 * k]), arrays[4 * k], arrays[4 * k + 1])

    def copy(self) -> "PredictorParams":
        return PredictorParams.from_arrays([np.array(a, copy=True) for a in self.arrays()], len(self.weights))


def init_predictor(d_h: int, rng: RngState, init_basis: np.ndarray | None = None,
                   width: int | None = None, n_hidden: int = 3) -> PredictorParams:
    """Gaussian 1/sqrt(fan_in) hidden layers; the head starts near ``init_basis``.

    ``b_head = vec(init_basis)`` and ``W_head`` is scaled by 1e-3, so the
    first predicted matrix is a small perturbation of ``init_basis``
    (identity when omitted).
    """
    width = width or 4 * d_h
    widths = [2 * d_h] + [width] * n_hidden
    weights, biases, gains, offsets = [], [], [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(rng.normal((fan_in, fan_out)) / math.sqrt(fan_in))
        biases.append(np.zeros((1, fan_out)))
        gains.append(np.ones((1, fan_out)))
        offsets.append(np.zeros((1, fan_out)))
    head_w = HEAD_INIT_SCALE * rng.normal((width, d_h * d_h)) / math.sqrt(width)
    base = np.eye(d_h) if init_basis is None else np.asarray(init_basis, dtype=np.float64)
    if base.shape != (d_h, d_h):
        raise DimensionError(f"init basis must be {d_h}x{d_h}, got {base.shape}")
    head_b = base.reshape(1, -1).copy()
    return PredictorParams(weights, biases, gains, offsets, head_w, head_b)


def predictor_forward(theta: PredictorParams, s) -> np.ndarray:
    """Raw square matrix ``A`` predicted from the statistics row ``s``."""
    if isinstance(s, ActivationStats):
        s = s.s
    h = s
    if ad.value_of(h).shape[1] != ad.value_of(theta.weights[0]).shape[0]:
        raise DimensionError("statistics width does not match the predictor input")
    for w, b, g, o in zip(theta.weights, theta.biases, theta.ln_gains, theta.ln_offsets):
        h = ad.gelu(ad.add(ad.mul(ad.layer_norm(ad.add(ad.matmul(h, w), b)), g), o))
    out = ad.add(ad.matmul(h, theta.head_w), theta.head_b)
    d_h = theta.d_h
    return ad.reshape(out, (d_h, d_h))


def orthonormalize(a):
    """Q factor of ``a`` (nonnegative R diagonal); R is discarded."""
    return ad.qr_q(a)


def basis_from_predictor(theta: PredictorParams, stats: ActivationStats) -> tuple[object, int]:
    """Orthonormal square basis and the number of jitter retries used (0 or 1)."""
    a = predictor_forward(theta, stats)
    try:
        return orthonormalize(a), 0
    except RankDeficiencyError:
        d_h = ad.value_of(a).shape[0]
        return orthonormalize(ad.add(a, JITTER * np.eye(d_h))), 1


# --- objective ----------------------------------------------------------------


def delta_from_records(layer: DecoderLayerParams, records: list[ActivationRecord],
                       key_basis=None, value_bases=None) -> float:
    """Mean over sequences of the relative layer-output error (None = uncompressed)."""
    if not records:
        raise DegenerateInputError("no calibration records")
    total = 0.0
    for rec in records:
        y = compressed_from_record(layer, rec, key_basis, value_bases)
        total += relative_error(rec.output, y)
    return total / len(records)


def layer_output_delta(layer: DecoderLayerParams, calib_inputs: list[np.ndarray],
                       key_basis, value_bases) -> float:
    """Layer-output relative error averaged over calibration sequences."""
    key_basis, value_bases = check_bases(layer, key_basis, value_bases)
    records = [record_for(layer, x) for x in calib_inputs]
    return delta_from_records(layer, records, key_basis, value_bases)


def _batch_loss(layer, batch, side: str, bases: list):
    total = None
    for rec in batch:
        if side == TARGET_KEY:
            y = compressed_from_record(layer, rec, key_basis=bases[0])
        else:
            y = compressed_from_record(layer, rec, value_bases=bases)
        loss = ad.frobenius_ratio_loss(rec.output, y)
        total = loss if total is None else ad.add(total, loss)
    return ad.scale(total, 1.0 / len(batch))


# --- training -----------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 5e-3
    weight_decay: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 50
    patience: int = 5
    min_delta: float = 1e-6
    batch_size_keys: int = 1
    batch_size_values: int = 4
    predictor_width_factor: int = 4
    seed: int = 0

    def validate(self) -> "TrainConfig":
        positive = [self.learning_rate, self.adam_eps, self.max_epochs, self.patience,
                    self.batch_size_keys, self.batch_size_values, self.predictor_width_factor]
        if any(v <= 0 for v in positive) or self.weight_decay < 0 or self.min_delta < 0:
            raise ConfigError("training hyperparameters must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.patience > self.max_epochs:
            raise ConfigError("patience must not exceed max_epochs")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochLog:
    epoch: int
    loss: float
    lr: float
    jitter_events: int


@dataclass
class TrainLog:
    layer: int
    target: str
    rank: int
    initial_loss: float = float("nan")
    best_loss: float = float("nan")
    best_epoch: int = 0
    steps: int = 0
    jitter_events: int = 0
    epochs: list[EpochLog] = field(default_factory=list)
    skipped: bool = False


def _fit(layer: DecoderLayerParams, records: list[ActivationRecord], side: str, rank: int,
         stats: list[ActivationStats], inits: list[np.ndarray], cfg: TrainConfig, rng: RngState,
         layer_index: int):
    c = layer.config
    d_h = c.d_h
    if not 1 <= rank <= d_h:
        raise DimensionError(f"rank {rank} outside [1, {d_h}]")
    if not records:
        raise DegenerateInputError("no calibration records")
    cfg.validate()
    tlog = TrainLog(layer_index, side, rank)
    if rank == d_h:
        # Any square orthonormal basis reconstructs exactly; nothing to learn.
        tlog.skipped = True
        tlog.initial_loss = tlog.best_loss = 0.0
        return [np.array(b, copy=True) for b in inits], tlog

    width = cfg.predictor_width_factor * d_h
    thetas = [init_predictor(d_h, rng, init, width) for init in inits]
    params = [a for th in thetas for a in th.arrays()]
    n_per = len(thetas[0].arrays())
    opt = AdamW(params, (cfg.adam_beta1, cfg.adam_beta2), cfg.adam_eps, cfg.weight_decay)

    def current_bases():
        out, jit = [], 0
        for th, st in zip(thetas, stats):
            p, j = basis_from_predictor(th, st)
            out.append(p)
            jit += j
        return out, jit

    def evaluate():
        bases, jit = current_bases()
        trunc = [p[:, :rank] for p in bases]
        if side == TARGET_KEY:
            loss = delta_from_records(layer, records, key_basis=trunc[0])
        else:
            loss = delta_from_records(layer, records, value_bases=trunc)
        return loss, bases, jit

    loss0, bases0, jit = evaluate()
    tlog.jitter_events += jit
    tlog.initial_loss = tlog.best_loss = loss0
    best_bases = bases0
    batch_size = cfg.batch_size_keys if side == TARGET_KEY else cfg.batch_size_values
    steps_per_epoch = math.ceil(len(records) / batch_size)
    t_max = cfg.max_epochs * steps_per_epoch
    step = 0
    since_improved = 0
    reference = loss0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(records))
        lr = cfg.learning_rate
        for b0 in range(0, len(order), batch_size):
            batch = [records[i] for i in order[b0:b0 + batch_size]]
            lr = cosine_lr(cfg.learning_rate, step, t_max)
            tape = ad.Tape()
            leaves = [tape.leaf(p) for p in params]
            bases = []
            for i, st in enumerate(stats):
                theta_v = PredictorParams.from_arrays(leaves[i * n_per:(i + 1) * n_per])
                p, j = basis_from_predictor(theta_v, st)
                tlog.jitter_events += j
                bases.append(ad.slice_cols(p, 0, rank))
            loss = _batch_loss(layer, batch, side, bases)
            if not math.isfinite(float(loss.value[0, 0])):
                raise TrainingDivergedError(step, f"layer {layer_index} {side} rank {rank}: non-finite loss")
            ad.backward(tape, loss)
            grads = [leaf.grad for leaf in leaves]
            if not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDivergedError(step, f"layer {layer_index} {side} rank {rank}: non-finite gradient")
            opt.step(grads, lr)
            step += 1
        epoch_loss, bases_now, jit = evaluate()
        tlog.jitter_events += jit
        if not math.isfinite(epoch_loss):
            raise TrainingDivergedError(step, f"layer {layer_index} {side} rank {rank}: non-finite loss")
        tlog.epochs.append(EpochLog(epoch, epoch_loss, lr, tlog.jitter_events))
        if epoch_loss < tlog.best_loss:
            tlog.best_loss, tlog.best_epoch = epoch_loss, epoch
            best_bases = bases_now
        if epoch_loss < reference - cfg.min_delta:
            reference = epoch_loss
            since_improved = 0
        else:
            since_improved += 1
            if since_improved >= cfg.patience:
                break
    tlog.steps = step
    log.debug("layer %d %s r=%d: %.6f -> %.6f in %d epochs", layer_index, side, rank,
              tlog.initial_loss, tlog.best_loss, len(tlog.epochs))
    return best_bases, tlog


def _cell_rng(cfg: TrainConfig, layer_index: int, side: str, rank: int) -> RngState:
    return RngState(derive_seed(cfg.seed, layer_index, _TARGET_IDS[side], rank))


def _ksvd_full(rows: np.ndarray) -> np.ndarray:
    d_h = rows.shape[1]
    return complete_basis(ksvd_basis(rows, min(d_h, rows.shape[0])))


def train_key_basis(layer: DecoderLayerParams, records: list[ActivationRecord], r_k: int,
                    cfg: TrainConfig, rng: RngState | None = None, layer_index: int = 0):
    """Train the shared key basis; values stay uncompressed.

    Returns the full square basis (truncate to ``r_k`` columns for use) and
    its :class:`TrainLog`.
    """
    rng = rng or _cell_rng(cfg, layer_index, TARGET_KEY, r_k)
    k_pool = pooled_keys(records)
    stats = [compute_stats([k_pool])]
    inits = [_ksvd_full(k_pool)]
    bases, tlog = _fit(layer, records, TARGET_KEY, r_k, stats, inits, cfg, rng, layer_index)
    return bases[0], tlog


def train_value_bases(layer: DecoderLayerParams, records: list[ActivationRecord], r_v: int,
                      cfg: TrainConfig, rng: RngState | None = None, layer_index: int = 0):
    """Jointly train one value predictor per KV head; keys stay uncompressed."""
    rng = rng or _cell_rng(cfg, layer_index, TARGET_VALUE, r_v)
    stats, inits = [], []
    for g in range(layer.config.n_heads_kv):
        v = head_values(records, g)
        stats.append(compute_stats([v]))
        inits.append(_ksvd_full(v))
    return _fit(layer, records, TARGET_VALUE, r_v, stats, inits, cfg, rng, layer_index)


# --- bases store and the full procedure -------------------------------------------


@dataclass
class BasisStore:
    """Truncated bases per (layer, rank): one shared key basis, per-KV-head value bases."""

    n_layers: int
    d_h: int
    n_heads_kv: int
    ranks_k: list[int]
    ranks_v: list[int]
    provenance: str = "stief"
    key: dict = field(default_factory=dict)  # (layer, r) -> d_h x r
    value: dict = field(default_factory=dict)  # (layer, r) -> [d_h x r] * H_KV
    logs: list[TrainLog] = field(default_factory=list)

    def key_basis(self, layer: int, r: int) -> np.ndarray:
        try:
            return self.key[(layer, r)]
        except KeyError:
            raise KeyError(f"{self.provenance}: no key basis for layer {layer}, rank {r}") from None

    def value_bases(self, layer: int, r: int) -> list[np.ndarray]:
        try:
            return self.value[(layer, r)]
        except KeyError:
            raise KeyError(f"{self.provenance}: no value bases for layer {layer}, rank {r}") from None

    def all_bases(self):
        for (ell, r), p in sorted(self.key.items()):
            yield ("key", ell, r, 0), p
        for (ell, r), ps in sorted(self.value.items()):
            for g, p in enumerate(ps):
                yield ("value", ell, r, g), p

    def max_orthonormality_residual(self) -> float:
        return max((orthonormality_residual(p) for _, p in self.all_bases()), default=0.0)


def candidate_ranks(d_h: int, low: float = 0.5, high: float = 0.9, count: int = 5,
                    include_full: bool = False) -> list[int]:
    """Uniformly spaced fractions of ``d_h``, rounded half-up and deduplicated."""
    if count < 1 or not 0 < low <= high <= 1:
        raise ConfigError("invalid rank fraction settings")
    fracs = [low] if count == 1 else [low + (high - low) * i / (count - 1) for i in range(count)]
    ranks = sorted({min(d_h, max(1, math.floor(f * d_h + 0.5))) for f in fracs})
    if include_full and d_h not in ranks:
        ranks.append(d_h)
    return ranks


def surface_for_layer(layer: DecoderLayerParams, records, store: BasisStore, ell: int) -> ErrorSurface:
    grid = np.zeros((len(store.ranks_k), len(store.ranks_v)))
    for i, rk in enumerate(store.ranks_k):
        for j, rv in enumerate(store.ranks_v):
            grid[i, j] = delta_from_records(layer, records, store.key_basis(ell, rk), store.value_bases(ell, rv))
    return ErrorSurface(ell, list(store.ranks_k), list(store.ranks_v), grid)


def _layer_records(stack, calib_inputs, per_layer_inputs):
    if per_layer_inputs is None:
        per_layer_inputs = layer_inputs(stack, calib_inputs)
    if len(per_layer_inputs) != len(stack):
        raise DimensionError(f"need inputs for {len(stack)} layers, got {len(per_layer_inputs)}")
    for ell, layer in enumerate(stack):
        yield ell, layer, [record_for(layer, x) for x in per_layer_inputs[ell]]


def run_algorithm_1(stack: list[DecoderLayerParams], calib_inputs, ranks_k, ranks_v,
                    cfg: TrainConfig, per_layer_inputs=None):
    """Train key/value bases for every layer and rank, then build error surfaces.

    ``calib_inputs`` are first-layer inputs; alternatively pass the recorded
    per-layer inputs directly (``per_layer_inputs[l][i]``).
    """
    ranks_k, ranks_v = sorted(set(ranks_k)), sorted(set(ranks_v))
    if not ranks_k or not ranks_v:
        raise ConfigError("candidate rank sets must be non-empty")
    c = stack[0].config
    store = BasisStore(len(stack), c.d_h, c.n_heads_kv, ranks_k, ranks_v, "stief")
    surfaces = []
    for ell, layer, records in _layer_records(stack, calib_inputs, per_layer_inputs):
        try:
            for rk in ranks_k:
                p_bar, tlog = train_key_basis(layer, records, rk, cfg, layer_index=ell)
                store.key[(ell, rk)] = p_bar[:, :rk].copy()
                store.logs.append(tlog)
            for rv in ranks_v:
                p_bars, tlog = train_value_bases(layer, records, rv, cfg, layer_index=ell)
                store.value[(ell, rv)] = [p[:, :rv].copy() for p in p_bars]
                store.logs.append(tlog)
            surfaces.append(surface_for_layer(layer, records, store, ell))
        except StiefError as exc:
            exc.args = (f"layer {ell}: {exc.args[0] if exc.args else exc}",)
            exc.layer = ell
            raise
        log.info("layer %d done", ell)
    return store, surfaces


def baseline_store(kind: BaselineKind | str, stack, calib_inputs, ranks_k, ranks_v,
                   per_layer_inputs=None):
    """Closed-form baseline bases and surfaces on the same grid as the learned ones."""
    kind = BaselineKind(kind)
    ranks_k, ranks_v = sorted(set(ranks_k)), sorted(set(ranks_v))
    c = stack[0].config
    store = BasisStore(len(stack), c.d_h, c.n_heads_kv, ranks_k, ranks_v, kind.value)
    surfaces = []
    for ell, layer, records in _layer_records(stack, calib_inputs, per_layer_inputs):
        for rk in ranks_k:
            store.key[(ell, rk)], _ = layer_bases(kind, layer, records, rk, None)
        for rv in ranks_v:
            _, store.value[(ell, rv)] = layer_bases(kind, layer, records, None, rv)
        surfaces.append(surface_for_layer(layer, records, store, ell))
    return store, surfaces
