"""On-disk formats: basis files, stack weights, activation dumps, JSON reports.

Every writer goes through :func:`atomic_write` (temp file in the target
directory, then ``os.replace``) so readers never see a partial file.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .decoder import DecoderConfig, DecoderLayerParams
from .errors import FormatError, StaleArtifactError
from .stief import BasisStore, TrainLog
from .surface import ErrorSurface, LayerChoice, RankAllocation, compression_ratio

BASIS_MAGIC = b"STF1"
STACK_MAGIC = b"STW1"
FORMAT_VERSION = 1
LITTLE_ENDIAN = 1
PROVENANCE_TAGS = {"stief": 0, "k_svd": 1, "eigen": 2, "kq_svd": 3}
_TAG_NAMES = {v: k for k, v in PROVENANCE_TAGS.items()}
_HAS_KEY, _HAS_VALUE = 1, 2


def atomic_write(path, data: bytes | str):
    path = Path(path)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


class _Reader:
    """Cursor over a byte buffer that reports the offset of any short read."""

    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.what}: truncated, needed {n} bytes", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def _split_crc(buf: bytes, what: str) -> bytes:
    if len(buf) < 4:
        raise FormatError(f"{what}: file too short for a checksum", 0)
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError(f"{what}: CRC-32 mismatch", len(buf) - 4)
    return body


def _with_crc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


def _fingerprint_bytes(fingerprint: str) -> bytes:
    raw = bytes.fromhex(fingerprint)
    if len(raw) != 32:
        raise ValueError("fingerprint must be a sha256 hex digest")
    return raw


# --- basis files ----------------------------------------------------------------


def encode_basis_store(store: BasisStore, fingerprint: str) -> bytes:
    """Header, one record per (layer, rank in either set), CRC-32 trailer.

    Matrices are stored column-major float64 little-endian so each basis
    reads back as ``d_h x r`` column blocks.
    """
    tag = PROVENANCE_TAGS[store.provenance]
    out = [BASIS_MAGIC, struct.pack("<HB", FORMAT_VERSION, LITTLE_ENDIAN), _fingerprint_bytes(fingerprint),
           struct.pack("<5I", store.n_layers, store.d_h, store.n_heads_kv, len(store.ranks_k), len(store.ranks_v)),
           struct.pack(f"<{len(store.ranks_k)}I", *store.ranks_k),
           struct.pack(f"<{len(store.ranks_v)}I", *store.ranks_v)]
    ranks = sorted(set(store.ranks_k) | set(store.ranks_v))
    for ell in range(store.n_layers):
        for r in ranks:
            has_key = (ell, r) in store.key
            has_value = (ell, r) in store.value
            out.append(struct.pack("<BB", tag, _HAS_KEY * has_key | _HAS_VALUE * has_value))
            mats = ([store.key[(ell, r)]] if has_key else []) + (list(store.value[(ell, r)]) if has_value else [])
            for m in mats:
                out.append(np.asarray(m, dtype="<f8").tobytes(order="F"))
    return _with_crc(b"".join(out))


def decode_basis_store(buf: bytes) -> tuple[BasisStore, str]:
    body = _split_crc(buf, "basis file")
    rd = _Reader(body, "basis file")
    if rd.take(4) != BASIS_MAGIC:
        raise FormatError("basis file: bad magic", 0)
    version, endian = rd.unpack("<HB")
    if version != FORMAT_VERSION:
        raise FormatError(f"basis file: unsupported version {version}", 4)
    if endian != LITTLE_ENDIAN:
        raise FormatError("basis file: only little-endian payloads are supported", 6)
    fingerprint = rd.take(32).hex()
    n_layers, d_h, h_kv, n_rk, n_rv = rd.unpack("<5I")
    ranks_k = list(rd.unpack(f"<{n_rk}I"))
    ranks_v = list(rd.unpack(f"<{n_rv}I"))
    for r in ranks_k + ranks_v:
        if not 1 <= r <= d_h:
            raise FormatError(f"basis file: rank {r} outside [1, {d_h}]", rd.pos)
    store = None
    for ell in range(n_layers):
        for r in sorted(set(ranks_k) | set(ranks_v)):
            at = rd.pos
            tag, mask = rd.unpack("<BB")
            if tag not in _TAG_NAMES or mask > 3:
                raise FormatError(f"basis file: bad record header (tag {tag}, mask {mask})", at)
            if store is None:
                store = BasisStore(n_layers, d_h, h_kv, ranks_k, ranks_v, _TAG_NAMES[tag])
            elif _TAG_NAMES[tag] != store.provenance:
                raise FormatError("basis file: mixed provenance tags", at)
            if mask & _HAS_KEY:
                store.key[(ell, r)] = rd.floats(d_h * r).reshape((d_h, r), order="F")
            if mask & _HAS_VALUE:
                store.value[(ell, r)] = [rd.floats(d_h * r).reshape((d_h, r), order="F") for _ in range(h_kv)]
    if rd.pos != len(body):
        raise FormatError(f"basis file: {len(body) - rd.pos} trailing bytes", rd.pos)
    if store is None:
        store = BasisStore(n_layers, d_h, h_kv, ranks_k, ranks_v)
    return store, fingerprint


def write_basis_file(path, store: BasisStore, fingerprint: str):
    atomic_write(path, encode_basis_store(store, fingerprint))


def read_basis_file(path) -> tuple[BasisStore, str]:
    return decode_basis_store(Path(path).read_bytes())


# --- stack weights ----------------------------------------------------------------


def encode_stack(stack: list[DecoderLayerParams], fingerprint: str) -> bytes:
    layers = [[[name, list(w.shape)] for name, w in layer.named_weights()] for layer in stack]
    meta = {"config": stack[0].config.to_dict(), "fingerprint": fingerprint, "layers": layers}
    head = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [STACK_MAGIC, struct.pack("<HI", FORMAT_VERSION, len(head)), head]
    for layer in stack:
        for _, w in layer.named_weights():
            parts.append(np.asarray(w, dtype="<f8").tobytes(order="C"))
    return _with_crc(b"".join(parts))


def decode_stack(buf: bytes) -> tuple[list[DecoderLayerParams], str]:
    body = _split_crc(buf, "stack file")
    rd = _Reader(body, "stack file")
    if rd.take(4) != STACK_MAGIC:
        raise FormatError("stack file: bad magic", 0)
    version, n_head = rd.unpack("<HI")
    if version != FORMAT_VERSION:
        raise FormatError(f"stack file: unsupported version {version}", 4)
    at = rd.pos
    try:
        meta = json.loads(rd.take(n_head))
        config = DecoderConfig(**meta["config"]).validate()
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"stack file: bad metadata ({exc})", at) from None
    stack = []
    for entries in meta["layers"]:
        arrays = {}
        for name, shape in entries:
            arrays[name] = rd.floats(int(np.prod(shape))).reshape(shape)
        arrays.setdefault("w_gate", None)
        stack.append(DecoderLayerParams(config=config, **arrays))
    if rd.pos != len(body):
        raise FormatError(f"stack file: {len(body) - rd.pos} trailing bytes", rd.pos)
    return stack, meta["fingerprint"]


def write_stack_file(path, stack, fingerprint: str):
    atomic_write(path, encode_stack(stack, fingerprint))


def read_stack_file(path):
    return decode_stack(Path(path).read_bytes())


# --- activation dumps ----------------------------------------------------------------


def encode_activations(per_layer_inputs: list[list[np.ndarray]]) -> bytes:
    """Header ``(n, d_model, L)`` as u64, then sequences x layers x n x d_model f64."""
    n_layers = len(per_layer_inputs)
    n_seq = len(per_layer_inputs[0])
    n, d_model = per_layer_inputs[0][0].shape
    parts = [struct.pack("<3Q", n, d_model, n_layers)]
    for i in range(n_seq):
        for ell in range(n_layers):
            x = per_layer_inputs[ell][i]
            if x.shape != (n, d_model):
                raise ValueError(f"sequence {i} layer {ell} has shape {x.shape}, expected {(n, d_model)}")
            parts.append(np.asarray(x, dtype="<f8").tobytes(order="C"))
    return b"".join(parts)


def decode_activations(buf: bytes) -> list[list[np.ndarray]]:
    """Inverse of :func:`encode_activations`; returns ``inputs[layer][sequence]``."""
    if len(buf) < 24:
        raise FormatError("activation dump: header needs 24 bytes", len(buf))
    n, d_model, n_layers = struct.unpack("<3Q", buf[:24])
    if min(n, d_model, n_layers) == 0:
        raise FormatError("activation dump: zero dimension in header", 0)
    block = n * d_model * 8
    payload = len(buf) - 24
    per_seq = block * n_layers
    if payload == 0:
        raise FormatError("activation dump: no sequences", 24)
    if payload % per_seq:
        raise FormatError(f"activation dump: payload of {payload} bytes is not a whole number of "
                          f"{per_seq}-byte sequences", 24 + payload - payload % per_seq)
    data = np.frombuffer(buf, dtype="<f8", offset=24).astype(np.float64)
    data = data.reshape(payload // per_seq, n_layers, n, d_model)
    if not np.all(np.isfinite(data)):
        bad = int(np.flatnonzero(~np.isfinite(data.ravel()))[0])
        raise FormatError("activation dump: non-finite value", 24 + 8 * bad)
    return [[data[i, ell].copy() for i in range(data.shape[0])] for ell in range(n_layers)]


def write_activations(path, per_layer_inputs):
    atomic_write(path, encode_activations(per_layer_inputs))


def read_activations(path):
    return decode_activations(Path(path).read_bytes())


# --- JSON reports ----------------------------------------------------------------


def surfaces_to_json(surfaces: list[ErrorSurface], method: str, d_h: int, fingerprint: str) -> str:
    doc = {"fingerprint": fingerprint, "method": method, "d_h": d_h,
           "surfaces": [{"layer": s.layer, "ranks_k": list(s.ranks_k), "ranks_v": list(s.ranks_v),
                         "delta": s.delta.tolist()} for s in surfaces]}
    return canonical_json(doc)


def surfaces_from_json(text: str):
    doc = json.loads(text)
    surfaces = [ErrorSurface(s["layer"], s["ranks_k"], s["ranks_v"], np.array(s["delta"], dtype=np.float64))
                for s in doc["surfaces"]]
    return surfaces, doc


def allocation_to_json(alloc: RankAllocation, fingerprint: str, method: str) -> str:
    layers = [{"layer": ell, "r_k": c.r_k, "r_v": c.r_v, "delta": c.delta, "budget": c.budget,
               "fallback": c.fallback, "compression_ratio": compression_ratio(c.r_k, c.r_v, alloc.d_h)}
              for ell, c in enumerate(alloc.layers)]
    doc = {"fingerprint": fingerprint, "method": method, "policy": alloc.policy, "epsilon": alloc.epsilon,
           "d_h": alloc.d_h, "weights": alloc.weights, "aggregate_ratio": alloc.aggregate_ratio(),
           "layers": layers, "notes": alloc.notes}
    return canonical_json(doc)


def allocation_from_json(text: str) -> tuple[RankAllocation, dict]:
    doc = json.loads(text)
    layers = [LayerChoice(e["r_k"], e["r_v"], e["delta"], e["budget"], e["fallback"]) for e in doc["layers"]]
    alloc = RankAllocation(doc["policy"], doc["epsilon"], doc["d_h"], layers, doc["weights"], doc["notes"])
    return alloc, doc


def require_fingerprint(found: str, expected: str, what: str):
    if found != expected:
        raise StaleArtifactError(f"{what} was produced under a different configuration "
                                 f"(fingerprint {found[:12]}..., expected {expected[:12]}...)")


# --- CSV -----------------------------------------------------------------------


TRAIN_LOG_COLUMNS = ("layer", "target", "rank", "epoch", "loss", "lr", "jitter_events")


def train_log_csv(logs: list[TrainLog]) -> str:
    """One row per epoch; epoch 0 is the warm-start evaluation."""
    lines = [",".join(TRAIN_LOG_COLUMNS)]
    for t in logs:
        lines.append(f"{t.layer},{t.target},{t.rank},0,{t.initial_loss!r},,0")
        for e in t.epochs:
            lines.append(f"{t.layer},{t.target},{t.rank},{e.epoch},{e.loss!r},{e.lr!r},{e.jitter_events}")
    return "\n".join(lines) + "\n"
