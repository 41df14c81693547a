"""Layer-level output-preservation metrics and method comparison reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

from .decoder import check_bases, compressed_from_record, layer_inputs, record_for
from .errors import DegenerateInputError, DiagnosticsError, DimensionError
from .linalg import as_matrix, relative_error

CSV_COLUMNS = ("method", "layer", "attn_rel_err", "layer_rel_err", "mean_cosine")
METRICS = (
    ("attn_rel_err", "Attention output relative error"),
    ("layer_rel_err", "Layer output relative error"),
    ("mean_cosine", "Mean token cosine similarity"),
)


@dataclass
class LayerDiagnostics:
    method: str
    layer: int
    attn_rel_err: float
    layer_rel_err: float
    mean_cosine: float


def attention_output_error(record, layer, key_basis, value_bases) -> float:
    """Relative error of the post-W_O attention output under compressed K/V."""
    key_basis, value_bases = check_bases(layer, key_basis, value_bases)
    _, attn = compressed_from_record(layer, record, key_basis, value_bases, return_attention=True)
    return relative_error(record.attention_output, attn)


def layer_output_error(record, layer, key_basis, value_bases) -> float:
    """Relative error of the full layer output on one sequence."""
    key_basis, value_bases = check_bases(layer, key_basis, value_bases)
    y = compressed_from_record(layer, record, key_basis, value_bases)
    return relative_error(record.output, y)


def mean_token_cosine(y: np.ndarray, y_tilde: np.ndarray) -> float:
    """Average over token rows of ``cos(y_t, y~_t)``, clipped to [-1, 1]."""
    y, y_tilde = as_matrix(y), as_matrix(y_tilde)
    if y.shape != y_tilde.shape:
        raise DimensionError(f"shape mismatch: {y.shape} vs {y_tilde.shape}")
    ny = np.linalg.norm(y, axis=1)
    nt = np.linalg.norm(y_tilde, axis=1)
    if np.any(ny == 0):
        raise DegenerateInputError("reference has a zero row")
    if np.any(nt == 0):
        raise DegenerateInputError("compressed output has a zero row")
    cos = np.einsum("ij,ij->i", y, y_tilde) / (ny * nt)
    return float(np.clip(cos, -1.0, 1.0).mean())


def _store_bases(name: str, store, ell: int, r_k: int, r_v: int):
    try:
        return store.key_basis(ell, r_k), store.value_bases(ell, r_v)
    except KeyError:
        raise DiagnosticsError(f"store {name!r} has no bases for layer {ell} at ranks ({r_k}, {r_v})") from None


def compare_methods(stack, inputs, stores: dict, ranks: tuple[int, int],
                    per_layer_inputs=None) -> list[LayerDiagnostics]:
    """All three metrics per layer and per method, averaged over ``inputs``.

    ``inputs`` are first-layer sequences; each layer sees the uncompressed
    hidden states of the layers below it. Recorded per-layer inputs can be
    passed instead (``inputs`` is then ignored).
    """
    if not stores:
        raise DiagnosticsError("no bases to compare")
    r_k, r_v = ranks
    for name, store in stores.items():
        for ell in range(len(stack)):
            _store_bases(name, store, ell, r_k, r_v)
    per_layer = per_layer_inputs if per_layer_inputs is not None else layer_inputs(stack, inputs)
    out = []
    for ell, layer in enumerate(stack):
        records = [record_for(layer, x) for x in per_layer[ell]]
        for name, store in stores.items():
            key, values = check_bases(layer, *_store_bases(name, store, ell, r_k, r_v))
            attn_err = layer_err = cos = 0.0
            for rec in records:
                y, attn = compressed_from_record(layer, rec, key, values, return_attention=True)
                attn_err += relative_error(rec.attention_output, attn)
                layer_err += relative_error(rec.output, y)
                cos += mean_token_cosine(rec.output, y)
            n = len(records)
            out.append(LayerDiagnostics(name, ell, attn_err / n, layer_err / n, cos / n))
    return out


def diagnostics_csv(rows: list[LayerDiagnostics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([r.method, r.layer, repr(r.attn_rel_err), repr(r.layer_rel_err), repr(r.mean_cosine)])
    return buf.getvalue()


# --- tiny SVG line chart ------------------------------------------------------------

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def line_chart_svg(series: dict[str, list[tuple[float, float]]], title: str, x_label: str = "layer",
                   y_label: str = "", width: int = 480, height: int = 320) -> str:
    """Polyline per series with axes, ticks and a legend."""
    pts = [p for s in series.values() for p in s]
    if not pts:
        raise DiagnosticsError("nothing to plot")
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        pad = abs(y0) * 0.05 or 0.5
        y0, y1 = y0 - pad, y1 + pad
    left, right, top, bottom = 60, 130, 30, 45
    pw, ph = width - left - right, height - top - bottom

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + (1 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for x in sorted(set(xs)):
        out.append(f'<text x="{sx(x):.2f}" y="{top + ph + 15}" text-anchor="middle">{x:g}</text>')
    for i in range(5):
        y = y0 + (y1 - y0) * i / 4
        out.append(f'<text x="{left - 5}" y="{sy(y) + 4:.2f}" text-anchor="end">{y:.4g}</text>')
        out.append(f'<line x1="{left - 3}" y1="{sy(y):.2f}" x2="{left}" y2="{sy(y):.2f}" stroke="black"/>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{escape(x_label)}</text>')
    if y_label:
        out.append(f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" '
                   f'transform="rotate(-90 14 {top + ph / 2:.1f})">{escape(y_label)}</text>')
    for i, (name, s) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in s)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        for x, y in s:
            out.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3" fill="{color}"/>')
        ly = top + 10 + 16 * i
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 35}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def metric_charts(rows: list[LayerDiagnostics]) -> dict[str, str]:
    """One SVG per metric, keyed by metric column name."""
    charts = {}
    for key, title in METRICS:
        series: dict[str, list] = {}
        for r in rows:
            v = getattr(r, key)
            if not math.isfinite(v):
                raise DiagnosticsError(f"non-finite {key} for {r.method} layer {r.layer}")
            series.setdefault(r.method, []).append((r.layer, v))
        charts[key] = line_chart_svg(series, title, y_label=key)
    return charts
