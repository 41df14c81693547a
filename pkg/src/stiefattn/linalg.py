"""Dense float64 linear algebra used throughout the package.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. The
factorizations here (Householder QR, one-sided Jacobi SVD) are written out
so that sign conventions and convergence rules are pinned down.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConvergenceError, DegenerateInputError, DimensionError, RankDeficiencyError
from .rng import RngState

QR_RANK_TOL = 1e-10
SVD_MAX_SWEEPS = 100
SVD_TOL = 1e-12


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def frobenius_norm(a: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(math.sqrt(float(np.sum(a * a))))


def relative_error(reference: np.ndarray, approx: np.ndarray) -> float:
    """``||reference - approx||_F / ||reference||_F``."""
    reference = np.asarray(reference, dtype=np.float64)
    approx = np.asarray(approx, dtype=np.float64)
    if reference.shape != approx.shape:
        raise DimensionError(f"shape mismatch {reference.shape} vs {approx.shape}")
    denom = frobenius_norm(reference)
    if denom == 0.0:
        raise DegenerateInputError("reference has zero Frobenius norm")
    return frobenius_norm(reference - approx) / denom


def orthonormality_residual(p: np.ndarray) -> float:
    """``||P^T P - I||_F``."""
    p = as_matrix(p)
    return frobenius_norm(p.T @ p - np.eye(p.shape[1]))


def qr_decompose(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Thin Householder QR with a nonnegative diagonal on ``R``.

    Returns ``q`` (m x n) with orthonormal columns and upper-triangular ``r``
    (n x n). Raises :class:`RankDeficiencyError` when a pivot falls below
    ``1e-10 * ||a||_F``.
    """
    a = as_matrix(a)
    m, n = a.shape
    if m < n:
        raise DimensionError(f"qr_decompose needs rows >= cols, got {a.shape}")
    tol = QR_RANK_TOL * frobenius_norm(a)
    r = a.copy()
    vs = []
    signs = np.empty(n)
    for k in range(n):
        x = r[k:, k]
        alpha = math.sqrt(float(x @ x))
        if alpha <= tol or alpha == 0.0:
            raise RankDeficiencyError(f"pivot {k} is {alpha:.3e}, below {tol:.3e}")
        s = 1.0 if x[0] >= 0 else -1.0
        v = x.copy()
        v[0] += s * alpha
        beta = 2.0 / float(v @ v)
        r[k:, :] -= np.outer(v, beta * (v @ r[k:, :]))
        vs.append((v, beta))
        signs[k] = -s
    q = np.eye(m, n)
    for k in range(n - 1, -1, -1):
        v, beta = vs[k]
        q[k:, :] -= np.outer(v, beta * (v @ q[k:, :]))
    # Flip so that diag(R) >= 0.
    q = q * signs
    r = np.triu(r[:n, :]) * signs[:, None]
    return q, r


def _complete_columns(u: np.ndarray, m: int, k: int) -> np.ndarray:
    """Replace all-zero columns of ``u`` with orthonormal completions."""
    u = u.copy()
    for j in range(k):
        if np.any(u[:, j] != 0.0):
            continue
        for e in range(m):
            cand = np.zeros(m)
            cand[e] = 1.0
            others = np.delete(np.arange(k), j)
            basis = u[:, others]
            cand -= basis @ (basis.T @ cand)
            cand -= basis @ (basis.T @ cand)
            nrm = np.linalg.norm(cand)
            if nrm > 1e-6:
                u[:, j] = cand / nrm
                break
    return u


def _jacobi_tall(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    m, n = a.shape
    u = a.copy()
    v = np.eye(n)
    for _sweep in range(SVD_MAX_SWEEPS):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                ui, uj = u[:, i], u[:, j]
                alpha = float(ui @ ui)
                beta = float(uj @ uj)
                gamma = float(ui @ uj)
                if gamma == 0.0 or abs(gamma) <= SVD_TOL * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                new_i = c * ui - s * uj
                new_j = s * ui + c * uj
                u[:, i], u[:, j] = new_i, new_j
                vi, vj = v[:, i].copy(), v[:, j].copy()
                v[:, i] = c * vi - s * vj
                v[:, j] = s * vi + c * vj
        if not rotated:
            break
    else:
        raise ConvergenceError(f"Jacobi SVD did not converge in {SVD_MAX_SWEEPS} sweeps")
    sigma = np.sqrt(np.sum(u * u, axis=0))
    order = np.argsort(-sigma, kind="stable")
    sigma, u, v = sigma[order], u[:, order], v[:, order]
    scale = sigma.max() if n else 0.0
    nonzero = sigma > (scale * 1e-15 if scale > 0 else 0.0)
    u[:, nonzero] /= sigma[nonzero]
    u[:, ~nonzero] = 0.0
    sigma = np.where(nonzero, sigma, 0.0)
    if not nonzero.all():
        u = _complete_columns(u, m, n)
    return u, sigma, v


def svd(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD by one-sided (Hestenes) Jacobi.

    Returns ``u`` (m x k), ``sigma`` (k,), ``v`` (n x k) with
    ``k = min(m, n)``, ``a = u @ diag(sigma) @ v.T`` and ``sigma`` sorted
    descending. Each right singular vector is signed so its largest-magnitude
    entry is positive (first such entry on ties).
    """
    a = as_matrix(a)
    m, n = a.shape
    if m >= n:
        u, sigma, v = _jacobi_tall(a)
    else:
        v, sigma, u = _jacobi_tall(a.T)
    for j in range(v.shape[1]):
        idx = int(np.argmax(np.abs(v[:, j])))
        if v[idx, j] < 0:
            v[:, j] = -v[:, j]
            u[:, j] = -u[:, j]
    return u, sigma, v


def truncate_columns(p: np.ndarray, r: int) -> np.ndarray:
    p = as_matrix(p)
    if not 1 <= r <= p.shape[1]:
        raise DimensionError(f"rank {r} outside [1, {p.shape[1]}]")
    return p[:, :r].copy()


def complete_basis(p: np.ndarray) -> np.ndarray:
    """Extend orthonormal columns ``p`` (d x k) to a square orthogonal matrix.

    The leading ``k`` columns are returned unchanged.
    """
    p = as_matrix(p)
    d, k = p.shape
    if k == d:
        return p.copy()
    out = np.zeros((d, d))
    out[:, :k] = p
    return _complete_columns(out, d, d)


def random_orthonormal(d: int, r: int, rng: RngState) -> np.ndarray:
    """Haar-distributed ``d x r`` orthonormal matrix (QR of a Gaussian)."""
    if not 1 <= r <= d:
        raise DimensionError(f"need 1 <= r <= d, got r={r}, d={d}")
    g = rng.normal((d, r))
    q, _ = qr_decompose(g)
    return q


def dump_matrix(a: np.ndarray) -> str:
    """Text dump: ``"rows cols"`` then one row per line, shortest round-trip floats."""
    a = as_matrix(a)
    lines = [f"{a.shape[0]} {a.shape[1]}"]
    lines.extend(" ".join(repr(float(x)) for x in row) for row in a)
    return "\n".join(lines) + "\n"


def load_matrix(text: str) -> np.ndarray:
    lines = text.strip().splitlines()
    rows, cols = (int(t) for t in lines[0].split())
    data = [[float(t) for t in line.split()] for line in lines[1 : rows + 1]]
    out = np.array(data, dtype=np.float64).reshape(rows, cols)
    return out
