"""SVD-style proxy-objective bases: K-SVD, EigenAttention, KQ-SVD."""

from __future__ import annotations

from enum import Enum

import numpy as np

from .errors import DegenerateInputError, DimensionError
from .linalg import as_matrix, complete_basis, qr_decompose, svd


class BaselineKind(str, Enum):
    K_SVD = "k_svd"
    EIGEN = "eigen"
    KQ_SVD = "kq_svd"


def _check_rank(r: int, d_h: int):
    if not 1 <= r <= d_h:
        raise DimensionError(f"rank {r} outside [1, {d_h}]")


def top_right_singular(m: np.ndarray, r: int) -> np.ndarray:
    """Leading ``r`` right singular vectors of ``m`` (d x r)."""
    m = as_matrix(m)
    _check_rank(r, m.shape[1])
    if not np.any(m):
        raise DegenerateInputError("matrix is all zeros")
    _, _, v = svd(m)
    if v.shape[1] < r:
        # Fewer rows than columns: pad V to a full basis before truncating.
        v = complete_basis(v)
    return v[:, :r].copy()


def ksvd_basis(k: np.ndarray, r: int) -> np.ndarray:
    """Minimizer of ``||K - K P P^T||_F`` over orthonormal ``P`` (Eckart-Young)."""
    return top_right_singular(k, r)


def eigen_basis(k: np.ndarray, q: np.ndarray, r: int) -> np.ndarray:
    """Top right singular vectors of the row-stacked ``[K; Q]``."""
    k, q = as_matrix(k), as_matrix(q)
    if k.shape[1] != q.shape[1]:
        raise DimensionError(f"K and Q widths differ: {k.shape[1]} vs {q.shape[1]}")
    return top_right_singular(np.vstack([k, q]), r)


def eigen_value_basis(v: np.ndarray, r: int) -> np.ndarray:
    return ksvd_basis(v, r)


def kqsvd_factors(q: np.ndarray, k: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Rank-r factors with ``(Q p_q)(K p_k)^T ~ Q K^T`` (best rank-r on calibration).

    Symmetric split of the truncated SVD ``S = U S V^T`` of ``S = Q K^T``:
    ``p_q = Q^+ U_r S_r^(1/2)``, ``p_k = K^+ V_r S_r^(1/2)``. ``S`` is never
    formed; with thin QRs ``Q = Q1 R1`` and ``K = Q2 R2`` the SVD of the small
    core ``R1 R2^T`` yields the same factors. Factors are not orthonormal.
    """
    q, k = as_matrix(q), as_matrix(k)
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"Q and K widths differ: {q.shape[1]} vs {k.shape[1]}")
    _check_rank(r, q.shape[1])
    _, r1 = qr_decompose(q)
    _, r2 = qr_decompose(k)
    uc, sigma, vc = svd(r1 @ r2.T)
    root = np.sqrt(sigma[:r])
    p_q = np.linalg.solve(r1, uc[:, :r] * root)
    p_k = np.linalg.solve(r2, vc[:, :r] * root)
    return p_q, p_k


def orthonormal_span(p: np.ndarray) -> np.ndarray:
    """Orthonormal basis of ``span(p)`` (Q factor, nonnegative R diagonal)."""
    q, _ = qr_decompose(p)
    return q


def kqsvd_value_basis(v: np.ndarray, w_o_head: np.ndarray, r: int) -> np.ndarray:
    """Value basis preserving the ``V W_O`` pathway.

    Fits ``V p = U_r S_r`` (rank-r part of ``V W_O``) by least squares and
    orthonormalizes ``p``. With ``V = Q1 R1`` this is ``R1^-1 Uc_r S_r`` where
    ``R1 W_O = Uc S W^T``.
    """
    v, w_o_head = as_matrix(v), as_matrix(w_o_head)
    if w_o_head.shape[0] != v.shape[1]:
        raise DimensionError(f"W_O rows {w_o_head.shape[0]} != value width {v.shape[1]}")
    _check_rank(r, v.shape[1])
    _, r1 = qr_decompose(v)
    uc, sigma, _ = svd(r1 @ w_o_head)
    if uc.shape[1] < r:
        raise DimensionError(f"V W_O has at most {uc.shape[1]} directions, rank {r} requested")
    p = np.linalg.solve(r1, uc[:, :r] * sigma[:r])
    return orthonormal_span(p)


def pooled_keys(records) -> np.ndarray:
    """All key rows across sequences and KV heads (shared key basis)."""
    return np.vstack([k for rec in records for k in rec.k])


def pooled_queries(records) -> np.ndarray:
    return np.vstack([q for rec in records for q in rec.q])


def head_values(records, g: int) -> np.ndarray:
    return np.vstack([rec.v[g] for rec in records])


def layer_bases(kind: BaselineKind | str, layer, records, r_k: int | None, r_v: int | None):
    """Key basis (shared) and per-KV-head value bases for one layer.

    Either rank may be None to skip that side.
    """
    kind = BaselineKind(kind)
    c = layer.config
    key = values = None
    if r_k is not None:
        k_pool = pooled_keys(records)
        if kind is BaselineKind.K_SVD:
            key = ksvd_basis(k_pool, r_k)
        elif kind is BaselineKind.EIGEN:
            key = eigen_basis(k_pool, pooled_queries(records), r_k)
        else:
            _, p_k = kqsvd_factors(pooled_queries(records), k_pool, r_k)
            key = orthonormal_span(p_k)
    if r_v is not None:
        values = []
        for g in range(c.n_heads_kv):
            v = head_values(records, g)
            if kind is BaselineKind.KQ_SVD:
                heads = range(g * c.group_size, (g + 1) * c.group_size)
                w_o = np.hstack([layer.w_o_head(h) for h in heads])
                values.append(kqsvd_value_basis(v, w_o, r_v))
            else:
                values.append(eigen_value_basis(v, r_v))
    return key, values
