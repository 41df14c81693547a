"""Minimal reverse-mode differentiation on 2-D float64 arrays.

Every primitive accepts plain arrays or :class:`Var` objects. With no
``Var`` among its inputs a primitive simply returns the numpy result, so the
same model code serves both plain evaluation and taped training.

    tape = Tape()
    w = tape.leaf(w0)
    loss = frobenius_ratio_loss(y_ref, x @ w)
    grads = backward(tape, loss)
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DegenerateInputError, DimensionError, RankDeficiencyError
from .linalg import QR_RANK_TOL

LAYER_NORM_EPS = 1e-5
RMS_NORM_EPS = 1e-6

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tape:
    """Ordered record of primitive applications."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.leaves: list[Var] = []

    def leaf(self, value) -> "Var":
        var = Var(np.asarray(value, dtype=np.float64), self, ())
        self.leaves.append(var)
        return var

    def __len__(self):
        return len(self.nodes)


class Var:
    # Forces numpy to defer binary operators (ndarray @ Var -> Var.__rmatmul__).
    __array_ufunc__ = None

    def __init__(self, value: np.ndarray, tape: Tape, parents: tuple):
        self.value = value
        self.tape = tape
        self.parents = parents  # tuple of (Var, pullback)
        self.grad: np.ndarray | None = None
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self):
        return transpose(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, key):
        return take(self, key)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, node={self.index})"


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else x


def _record(out: np.ndarray, links: Sequence[tuple[object, Callable]]):
    tape = None
    parents = []
    for operand, pullback in links:
        if isinstance(operand, Var):
            tape = tape or operand.tape
            if operand.tape is not tape:
                raise ContractError("operands recorded on different tapes")
            parents.append((operand, pullback))
    if tape is None:
        return out
    return Var(out, tape, tuple(parents))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True).reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray, name: str):
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"{name} expects 2-D operands")
    for x, y in zip(a.shape, b.shape):
        if x != y and x != 1 and y != 1:
            raise DimensionError(f"{name}: cannot broadcast {a.shape} with {b.shape}")


# --- primitives -------------------------------------------------------------


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    if av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul: {av.shape} @ {bv.shape}")
    return _record(av @ bv, [(a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)])


def _operand(x):
    # Python scalars broadcast as 1x1 constants.
    return np.full((1, 1), float(x)) if np.isscalar(x) else x


def add(a, b):
    a, b = _operand(a), _operand(b)
    av, bv = value_of(a), value_of(b)
    _check_broadcast(av, bv, "add")
    return _record(
        av + bv,
        [(a, lambda g: _unbroadcast(g, av.shape)), (b, lambda g: _unbroadcast(g, bv.shape))],
    )


def sub(a, b):
    a, b = _operand(a), _operand(b)
    av, bv = value_of(a), value_of(b)
    _check_broadcast(av, bv, "sub")
    return _record(
        av - bv,
        [(a, lambda g: _unbroadcast(g, av.shape)), (b, lambda g: -_unbroadcast(g, bv.shape))],
    )


def mul(a, b):
    """Elementwise product with row/column/scalar (1x1) broadcasting."""
    if not isinstance(a, Var) and np.isscalar(a):
        return scale(b, float(a))
    if not isinstance(b, Var) and np.isscalar(b):
        return scale(a, float(b))
    av, bv = value_of(a), value_of(b)
    _check_broadcast(av, bv, "mul")
    return _record(
        av * bv,
        [(a, lambda g: _unbroadcast(g * bv, av.shape)), (b, lambda g: _unbroadcast(g * av, bv.shape))],
    )


def scale(a, c: float):
    return _record(value_of(a) * c, [(a, lambda g: g * c)])


def transpose(a):
    return _record(value_of(a).T, [(a, lambda g: g.T)])


def take(a, key):
    """Basic slicing that keeps the result 2-D."""
    av = value_of(a)
    out = av[key]
    if out.ndim != 2:
        raise DimensionError("take must keep the result two-dimensional (use slices)")

    def pullback(g):
        full = np.zeros_like(av)
        full[key] = g
        return full

    return _record(out.copy(), [(a, pullback)])


def slice_cols(a, start: int, stop: int):
    return take(a, (slice(None), slice(start, stop)))


def slice_rows(a, start: int, stop: int):
    return take(a, (slice(start, stop), slice(None)))


def concat_rows(parts: Sequence):
    values = [value_of(p) for p in parts]
    cols = {v.shape[1] for v in values}
    if len(cols) != 1:
        raise DimensionError(f"concat_rows: column counts differ {sorted(cols)}")
    out = np.concatenate(values, axis=0)
    links = []
    offset = 0
    for part, v in zip(parts, values):
        lo, hi = offset, offset + v.shape[0]
        links.append((part, lambda g, lo=lo, hi=hi: g[lo:hi]))
        offset = hi
    return _record(out, links)


def reshape(a, shape: tuple[int, int]):
    av = value_of(a)
    return _record(av.reshape(shape), [(a, lambda g: g.reshape(av.shape))])


def sum_all(a):
    av = value_of(a)
    return _record(np.array([[av.sum()]]), [(a, lambda g: np.full(av.shape, g[0, 0]))])


def sqrt(a):
    out = np.sqrt(value_of(a))
    return _record(out, [(a, lambda g: g * 0.5 / out)])


def reciprocal(a):
    out = 1.0 / value_of(a)
    return _record(out, [(a, lambda g: -g * out * out)])


def row_softmax(a):
    av = value_of(a)
    shifted = av - av.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def pullback(g):
        return y * (g - (g * y).sum(axis=1, keepdims=True))

    return _record(y, [(a, pullback)])


def layer_norm(a, eps: float = LAYER_NORM_EPS):
    """Row-wise standardization without affine parameters."""
    av = value_of(a)
    mu = av.mean(axis=1, keepdims=True)
    xc = av - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def pullback(g):
        gm = g.mean(axis=1, keepdims=True)
        gy = (g * y).mean(axis=1, keepdims=True)
        return inv * (g - gm - y * gy)

    return _record(y, [(a, pullback)])


def rms_norm(a, eps: float = RMS_NORM_EPS):
    """Row-wise RMS normalization without gain."""
    av = value_of(a)
    ms = (av * av).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    y = av * inv

    def pullback(g):
        gy = (g * av).mean(axis=1, keepdims=True)
        return inv * g - av * (inv ** 3) * gy

    return _record(y, [(a, pullback)])


def gelu(a):
    """Exact (erf) GELU."""
    av = value_of(a)
    cdf = 0.5 * (1.0 + erf(av * _SQRT_HALF))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * av * av)
    return _record(av * cdf, [(a, lambda g: g * (cdf + av * pdf))])


def silu(a):
    av = value_of(a)
    sig = 1.0 / (1.0 + np.exp(-av))
    return _record(av * sig, [(a, lambda g: g * sig * (1.0 + av * (1.0 - sig)))])


def frobenius_norm(a):
    """``||a||_F`` as a 1x1 matrix."""
    av = value_of(a)
    nrm = math.sqrt(float(np.sum(av * av)))

    def pullback(g):
        if nrm == 0.0:
            return np.zeros_like(av)
        return g[0, 0] * av / nrm

    return _record(np.array([[nrm]]), [(a, pullback)])


def frobenius_ratio_loss(reference, approx):
    """``||reference - approx||_F / ||reference||_F`` as a 1x1 matrix.

    At ``approx == reference`` the norm is not differentiable; the pullback
    returns the zero subgradient there.
    """
    rv, av = value_of(reference), value_of(approx)
    if rv.shape != av.shape:
        raise DimensionError(f"loss shapes differ: {rv.shape} vs {av.shape}")
    denom = math.sqrt(float(np.sum(rv * rv)))
    if denom == 0.0:
        raise DegenerateInputError("reference has zero Frobenius norm")
    diff = rv - av
    num = math.sqrt(float(np.sum(diff * diff)))
    loss = num / denom

    def d_approx(g):
        if num == 0.0:
            return np.zeros_like(av)
        return -g[0, 0] * diff / (num * denom)

    def d_reference(g):
        if num == 0.0:
            return -g[0, 0] * loss * rv / denom**2
        return g[0, 0] * (diff / (num * denom) - loss * rv / denom**2)

    return _record(np.array([[loss]]), [(reference, d_reference), (approx, d_approx)])


# --- composites ---------------------------------------------------------------


def qr_q(a):
    """Q factor of the thin Householder QR with nonnegative ``diag(R)``.

    Built from the primitives above, so the pullback runs back through every
    reflection. ``R`` is never returned. Raises :class:`RankDeficiencyError`
    when a pivot is below ``1e-10 * ||a||_F``.
    """
    av = value_of(a)
    m, n = av.shape
    if m < n:
        raise DimensionError(f"qr_q needs rows >= cols, got {av.shape}")
    tol = QR_RANK_TOL * math.sqrt(float(np.sum(av * av)))
    r = a
    reflections = []
    signs = np.empty((1, n))
    for k in range(n):
        x = take(r, (slice(k, m), slice(k, k + 1)))
        alpha = frobenius_norm(x)
        alpha_v = value_of(alpha)[0, 0]
        if alpha_v <= tol or alpha_v == 0.0:
            raise RankDeficiencyError(f"pivot {k} is {alpha_v:.3e}, below {tol:.3e}")
        s = 1.0 if value_of(x)[0, 0] >= 0 else -1.0
        e1 = np.zeros((m - k, 1))
        e1[0, 0] = s
        v = add(x, mul(alpha, e1))
        if k:
            v = concat_rows([np.zeros((k, 1)), v])
        beta = scale(reciprocal(matmul(transpose(v), v)), 2.0)
        r = sub(r, matmul(v, mul(beta, matmul(transpose(v), r))))
        reflections.append((v, beta))
        signs[0, k] = -s
    q = np.eye(m, n)
    for v, beta in reversed(reflections):
        q = sub(q, matmul(v, mul(beta, matmul(transpose(v), q))))
    return mul(q, signs)


# --- reverse sweep ------------------------------------------------------------


def backward(tape: Tape, loss: Var, seed: float = 1.0) -> dict[Var, np.ndarray]:
    """Propagate ``d loss`` back through ``tape``; return leaf gradients.

    Each node is visited once, in reverse recording order. Leaf ``grad``
    attributes are populated (zeros for leaves the loss does not reach).
    """
    if not isinstance(loss, Var) or loss.tape is not tape:
        raise ContractError("loss must be a Var recorded on this tape")
    if loss.value.shape != (1, 1):
        raise ContractError(f"loss must be 1x1, got {loss.value.shape}")
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.full((1, 1), float(seed))
    for node in reversed(tape.nodes[: loss.index + 1]):
        g = node.grad
        if g is None:
            continue
        for parent, pullback in node.parents:
            contrib = pullback(g)
            if parent.grad is None:
                parent.grad = np.array(contrib, dtype=np.float64, copy=True)
            else:
                parent.grad += contrib
    out = {}
    for leaf in tape.leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.value)
        out[leaf] = leaf.grad
    return out


def gradient(f: Callable, x: np.ndarray) -> tuple[float, np.ndarray]:
    """Value and gradient of a scalar (1x1) function built from these primitives."""
    tape = Tape()
    leaf = tape.leaf(np.array(x, dtype=np.float64, copy=True))
    out = f(leaf)
    backward(tape, out)
    return float(out.value[0, 0]), leaf.grad


def finite_diff_check(f: Callable, x: np.ndarray, eps: float = 1e-5) -> float:
    """Compare the taped gradient of ``f`` at ``x`` with central differences.

    ``f`` maps a matrix (array or Var) to a 1x1 result using the primitives
    in this module. Returns the max over entries of
    ``|analytic - fd| / (|analytic| + 1e-8)``.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ContractError("eps must lie in [1e-7, 1e-4]")
    x = np.array(x, dtype=np.float64, copy=True)
    _, analytic = gradient(f, x)
    worst = 0.0
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        fp = float(np.asarray(f(x)).reshape(-1)[0])
        x[idx] = orig - eps
        fm = float(np.asarray(f(x)).reshape(-1)[0])
        x[idx] = orig
        fd = (fp - fm) / (2.0 * eps)
        worst = max(worst, abs(analytic[idx] - fd) / (abs(analytic[idx]) + 1e-8))
    return worst
