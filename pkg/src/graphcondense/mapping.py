"""The original-to-synthetic node mapping: init, normalization, losses, sparsification.

The raw mapping is a trainable dense N x N' matrix. All forward computations
use its row-normalized form (sigmoid / row-sum, small weights suppressed);
after training both the mapping and the synthetic adjacency are thresholded
into CSR for deployment.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .autodiff import Tape, Var, sigmoid
from .graphs import IncrementalBatch

MAPPING_EPS = 1e-5
MISMATCH_FILL = -40.0  # sigmoid(-40) is zero at 64-bit precision


def init_mapping(
    labels: np.ndarray, y_prime: np.ndarray, c0: float = 1.0, fill: float = MISMATCH_FILL
) -> np.ndarray:
    """Class-aware raw mapping: c0 where classes agree, a large negative
    value (sigmoid ~ 0) where they do not."""
    labels = np.asarray(labels, dtype=np.int64)
    y_prime = np.asarray(y_prime, dtype=np.int64)
    missing = np.setdiff1d(np.unique(labels[labels >= 0]), np.unique(y_prime))
    if missing.size:
        raise ValueError(f"classes {missing.tolist()} have no synthetic nodes")
    same = labels[:, None] == y_prime[None, :]
    return np.where(same, c0, fill)


def normalize_mapping(raw: np.ndarray, eps: float = MAPPING_EPS) -> np.ndarray:
    """ReLU(sigmoid(row) / row-sum - eps): nonnegative rows summing to <= 1."""
    s = sigmoid(raw)
    q = s / s.sum(axis=1, keepdims=True)
    return np.maximum(q - eps, 0.0)


def normalize_mapping_var(t: Tape, raw: Var, eps: float = MAPPING_EPS) -> Var:
    s = t.sigmoid(raw)
    q = t.mul(s, t.pow_const(t.row_sum(s), -1.0))
    return t.relu(t.scalar_add(q, -eps))


def l21_norm(x: np.ndarray) -> float:
    """Sum over rows of the row-wise Euclidean norm."""
    return float(np.sqrt((np.asarray(x, dtype=np.float64) ** 2).sum(axis=1)).sum())


def transductive_loss(h: np.ndarray, h_prime: np.ndarray, m_hat: np.ndarray) -> float:
    """Mean row-norm residual of reconstructing original embeddings: ||H - M H'||."""
    if h.shape != (m_hat.shape[0], h_prime.shape[1]) or m_hat.shape[1] != h_prime.shape[0]:
        raise ValueError(
            f"shape chain mismatch: H{h.shape}, M{m_hat.shape}, H'{h_prime.shape}")
    return l21_norm(h - m_hat @ h_prime) / h.shape[0]


def inductive_loss(h_sup_original: np.ndarray, h_sup_synthetic: np.ndarray) -> float:
    """Mean row-norm gap between the two support-node embedding routes."""
    if h_sup_original.shape != h_sup_synthetic.shape:
        raise ValueError("support embedding shapes differ")
    if h_sup_original.shape[0] == 0:
        raise ValueError("no support nodes")
    return l21_norm(h_sup_original - h_sup_synthetic) / h_sup_original.shape[0]


def mapping_loss(l_tra: float, l_ind: float, beta: float) -> float:
    return l_tra + beta * l_ind


# -- inductive assembly -----------------------------------------------------------


def _check_mode(batch: IncrementalBatch, mode: str) -> sp.spmatrix:
    if mode not in ("node_batch", "graph_batch"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "graph_batch":
        if batch.a_tilde is None:
            raise ValueError("graph_batch mode requires batch.a_tilde")
        if np.any(batch.a_tilde.diagonal() != 0):
            raise ValueError("self-edges among batch nodes are not allowed")
        return batch.a_tilde
    return sp.csr_matrix((batch.n, batch.n))


def assemble_inductive(
    a_prime: sp.spmatrix | np.ndarray,
    m_hat: sp.spmatrix | np.ndarray,
    batch: IncrementalBatch,
    mode: str = "node_batch",
) -> tuple[sp.csr_matrix, np.ndarray]:
    """Block adjacency [[A', (aM)^T], [aM, a~]] plus stacked features.

    The caller normalizes the result with self-loops before propagation.
    With n = 0 the synthetic graph comes back unchanged.
    """
    a_prime = sp.csr_matrix(a_prime)
    m_hat = sp.csr_matrix(m_hat)
    x_prime_rows = a_prime.shape[0]
    if m_hat.shape[1] != x_prime_rows:
        raise ValueError(f"mapping column count {m_hat.shape[1]} != {x_prime_rows}")
    if batch.n == 0:
        return a_prime, np.zeros((0, batch.x.shape[1]))
    if batch.a.shape[1] != m_hat.shape[0]:
        raise ValueError(
            f"batch references {batch.a.shape[1]} original nodes, mapping has {m_hat.shape[0]}")
    a_tilde = _check_mode(batch, mode)
    am = (batch.a @ m_hat).tocsr()
    assembled = sp.bmat([[a_prime, am.T], [am, a_tilde]], format="csr")
    return assembled, batch.x


def assemble_features(x_prime: np.ndarray, batch: IncrementalBatch) -> np.ndarray:
    if batch.n == 0:
        return x_prime
    if batch.x.shape[1] != x_prime.shape[1]:
        raise ValueError("feature width mismatch")
    return np.vstack([x_prime, batch.x])


def assemble_inductive_var(
    t: Tape,
    a_prime: Var,
    m_hat: Var,
    batch: IncrementalBatch,
    mode: str = "node_batch",
) -> Var:
    """Differentiable assembly; the gradient flows through aM into the mapping."""
    a_tilde = _check_mode(batch, mode)
    am = t.const_spmm_left(batch.a.tocsr(), m_hat)
    top = t.concat_cols(a_prime, t.transpose(am))
    bottom = t.concat_cols(am, t.leaf(np.asarray(a_tilde.todense())))
    return t.concat_rows(top, bottom)


def mapping_loss_var(
    t: Tape,
    raw: Var,
    *,
    h: np.ndarray,
    h_prime: np.ndarray,
    a_prime: np.ndarray,
    x_assembled: np.ndarray,
    h_sup: np.ndarray | None,
    support: IncrementalBatch | None,
    hops: int,
    beta: float,
    eps: float = MAPPING_EPS,
    support_mode: str = "node_batch",
) -> tuple[Var, Var, Var | None]:
    """Build the mapping objective on a tape: transductive + beta * inductive.

    `h`, `h_prime`, `a_prime`, `x_assembled`, and `h_sup` are values frozen
    for the phase (model weights and the synthetic graph do not move here).
    Returns (total, transductive term, inductive term or None).
    """
    from .condense import normalize_dense_var, sgc_embed_var  # cycle-free at import time

    m_hat = normalize_mapping_var(t, raw, eps)
    resid = t.sub(t.leaf(h), t.matmul(m_hat, t.leaf(h_prime)))
    l_tra = t.scalar_mul(t.row_l2_sum(resid), 1.0 / h.shape[0])
    if beta == 0.0 or support is None:
        return l_tra, l_tra, None

    assembled = assemble_inductive_var(t, t.leaf(a_prime), m_hat, support, support_mode)
    adj_norm = normalize_dense_var(t, assembled)
    p = sgc_embed_var(t, adj_norm, t.leaf(x_assembled), hops)
    n_prime = a_prime.shape[0]
    h_sup_syn = t.gather_rows(p, np.arange(n_prime, n_prime + support.n))
    gap = t.sub(t.leaf(h_sup), h_sup_syn)
    l_ind = t.scalar_mul(t.row_l2_sum(gap), 1.0 / support.n)
    total = t.add(l_tra, t.scalar_mul(l_ind, beta))
    return total, l_tra, l_ind


# -- sparsification ----------------------------------------------------------------


def sparsify(
    a_prime: np.ndarray | sp.spmatrix,
    m_hat: np.ndarray | sp.spmatrix,
    mu: float,
    delta: float,
) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Threshold both matrices into CSR: entries below mu / delta become
    structural zeros. Idempotent for fixed thresholds."""
    if not (0.0 <= mu < 1.0 and 0.0 <= delta < 1.0):
        raise ValueError("thresholds must lie in [0, 1)")
    a_sp = _threshold(a_prime, mu)
    m_sp = _threshold(m_hat, delta)
    if a_sp.nnz == 0:
        raise ValueError("sparsified synthetic adjacency is empty")
    empty_rows = int((np.diff(m_sp.indptr) == 0).sum())
    if empty_rows:
        warnings.warn(
            f"{empty_rows} original nodes lost their mapping at delta={delta}",
            RuntimeWarning,
            stacklevel=2,
        )
    return a_sp, m_sp


def _threshold(mat: np.ndarray | sp.spmatrix, cut: float) -> sp.csr_matrix:
    out = sp.csr_matrix(mat, dtype=np.float64, copy=True)
    out.data[out.data < cut] = 0.0
    out.eliminate_zeros()
    return out
