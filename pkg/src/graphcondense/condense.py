"""Synthetic-graph construction and its training losses.

The synthetic graph holds trainable features `x_prime`, fixed class labels
`y_prime`, and an adjacency derived on demand from pairwise feature affinity
through a small MLP. Training matches the model's weight gradients between
the original and synthetic graphs and, optionally, reconstructs original
edges from looked-up embeddings.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .autodiff import Tape, Var, sigmoid
from .gnn import onehot


@dataclass
class AffinityMlp:
    """Maps a concatenated feature pair (2d) to one edge score."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]


def init_affinity_mlp(d: int, hidden: tuple[int, ...], rng: np.random.Generator) -> AffinityMlp:
    dims = [2 * d, *hidden, 1]
    weights, biases = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        s = 1.0 / np.sqrt(a)
        weights.append(rng.uniform(-s, s, size=(a, b)))
        biases.append(np.zeros((1, b)))
    return AffinityMlp(weights, biases)


@dataclass
class SyntheticGraph:
    x_prime: np.ndarray
    y_prime: np.ndarray
    mlp: AffinityMlp

    @property
    def num_nodes(self) -> int:
        return self.x_prime.shape[0]

    def adjacency(self) -> np.ndarray:
        return synth_adjacency(self.x_prime, self.mlp)


def predefine_labels(labels: np.ndarray, n_prime: int) -> np.ndarray:
    """Synthetic labels matching the original class distribution.

    Largest-remainder rounding of the class frequencies, with a floor of one
    node per class. Deterministic: ties break toward the lower class id.
    """
    labels = np.asarray(labels, dtype=np.int64)
    classes, counts = np.unique(labels[labels >= 0], return_counts=True)
    num_classes = int(classes.max()) + 1
    full = np.zeros(num_classes, dtype=np.int64)
    full[classes] = counts
    if np.any(full == 0):
        raise ValueError("every class must appear in the training labels")
    if n_prime < num_classes:
        raise ValueError(f"n_prime={n_prime} < {num_classes} classes")

    quota = full / full.sum() * n_prime
    out = np.floor(quota).astype(np.int64)
    remainder = quota - out
    # Assign leftover slots by largest remainder, lower class id first on ties.
    order = np.lexsort((np.arange(num_classes), -remainder))
    for c in order[: n_prime - out.sum()]:
        out[c] += 1
    # Enforce the one-per-class floor by taking from the most over-quota class.
    while np.any(out == 0):
        needy = int(np.nonzero(out == 0)[0][0])
        donor = int(np.lexsort((np.arange(num_classes), -(out - quota)))[0])
        out[donor] -= 1
        out[needy] += 1
    return np.repeat(np.arange(num_classes, dtype=np.int64), out)


def init_x_prime(
    features: np.ndarray, labels: np.ndarray, y_prime: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Start synthetic features from sampled original nodes of the same class."""
    out = np.empty((len(y_prime), features.shape[1]))
    for c in np.unique(y_prime):
        pool = np.nonzero(labels == c)[0]
        need = int((y_prime == c).sum())
        pick = rng.choice(pool, size=need, replace=need > len(pool))
        out[y_prime == c] = features[pick]
    return out


# -- adjacency from affinities -------------------------------------------------


def _pair_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    grid = np.arange(n)
    return np.repeat(grid, n), np.tile(grid, n)


def synth_adjacency(x_prime: np.ndarray, mlp: AffinityMlp) -> np.ndarray:
    """Dense symmetric adjacency: sigmoid of the symmetrized pair MLP score."""
    if mlp.input_dim != 2 * x_prime.shape[1]:
        raise ValueError("affinity MLP input width must be 2d")
    n = x_prime.shape[0]
    li, ri = _pair_indices(n)
    h = np.concatenate([x_prime[li], x_prime[ri]], axis=1)
    for k, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        h = h @ w + b
        if k < len(mlp.weights) - 1:
            h = np.maximum(h, 0.0)
    scores = h.reshape(n, n)
    return sigmoid((scores + scores.T) / 2.0)


def synth_adjacency_var(t: Tape, x: Var, w_vars: list[Var], b_vars: list[Var]) -> Var:
    n = x.shape[0]
    li, ri = _pair_indices(n)
    h = t.concat_cols(t.gather_rows(x, li), t.gather_rows(x, ri))
    for k, (wv, bv) in enumerate(zip(w_vars, b_vars)):
        h = t.add(t.matmul(h, wv), bv)
        if k < len(w_vars) - 1:
            h = t.relu(h)
    scores = t.reshape(h, n, n)
    return t.sigmoid(t.scalar_mul(t.add(scores, t.transpose(scores)), 0.5))


def normalize_dense_var(t: Tape, a: Var) -> Var:
    """Differentiable D^{-1/2} (A + I) D^{-1/2} for a dense adjacency Var."""
    n = a.shape[0]
    a_tilde = t.add(a, t.leaf(np.eye(n)))
    dinv = t.pow_const(t.row_sum(a_tilde), -0.5)
    return t.mul(t.mul(a_tilde, dinv), t.transpose(dinv))


def sgc_embed_var(t: Tape, adj: Var, x: Var, hops: int) -> Var:
    p = x
    for _ in range(hops):
        p = t.matmul(adj, p)
    return p


def head_gradient_var(t: Tape, p: Var, w: Var, y_onehot: np.ndarray) -> Var:
    """The closed-form head gradient as a differentiable graph node."""
    resid = t.sub(t.row_softmax(t.matmul(p, w)), t.leaf(y_onehot))
    return t.scalar_mul(t.matmul(t.transpose(p), resid), 1.0 / p.shape[0])


# -- losses ---------------------------------------------------------------------


def gradient_matching_loss(g_t: list[np.ndarray], g_s: list[np.ndarray]) -> float:
    """Sum over layers and columns of one minus the column cosine similarity."""
    total = 0.0
    for a, b in zip(g_t, g_s, strict=True):
        if a.shape != b.shape:
            raise ValueError(f"gradient shape mismatch: {a.shape} vs {b.shape}")
        na = np.linalg.norm(a, axis=0)
        nb = np.linalg.norm(b, axis=0)
        live = (na > 0) & (nb > 0)
        cos = np.where(live, (a * b).sum(axis=0) / np.where(live, na * nb, 1.0), 0.0)
        total += float((1.0 - cos).sum())
    return total


@dataclass
class EdgeBatch:
    """Sampled node pairs with binary link targets (no self-pairs)."""

    i_idx: np.ndarray
    j_idx: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


def sample_edge_batch(adj: sp.csr_matrix, b_pos: int, rng: np.random.Generator) -> EdgeBatch:
    """b_pos observed edges plus b_pos rejected non-edges, drawn uniformly."""
    coo = adj.tocoo()
    upper = coo.row < coo.col
    src, dst = coo.row[upper], coo.col[upper]
    if len(src) == 0:
        raise ValueError("graph has no edges to sample")
    pick = rng.integers(0, len(src), size=b_pos)
    pos_i, pos_j = src[pick], dst[pick]

    edge_set = set(zip(coo.row.tolist(), coo.col.tolist()))
    n = adj.shape[0]
    neg_i, neg_j = [], []
    while len(neg_i) < b_pos:
        ii = int(rng.integers(0, n))
        jj = int(rng.integers(0, n))
        if ii == jj or (ii, jj) in edge_set:
            continue
        neg_i.append(ii)
        neg_j.append(jj)

    return EdgeBatch(
        i_idx=np.concatenate([pos_i, neg_i]).astype(np.int64),
        j_idx=np.concatenate([pos_j, neg_j]).astype(np.int64),
        y=np.concatenate([np.ones(b_pos), np.zeros(b_pos)]),
    )


def approx_embeddings(m_hat: np.ndarray, h_prime: np.ndarray) -> np.ndarray:
    """Weighted lookup of original-node embeddings from synthetic ones."""
    if m_hat.shape[1] != h_prime.shape[0]:
        raise ValueError(f"dimension mismatch: {m_hat.shape} @ {h_prime.shape}")
    return m_hat @ h_prime


def structure_loss(h_tilde: np.ndarray, batch: EdgeBatch, positives_only: bool = False) -> float:
    """Binary cross-entropy of sigmoid(h_i . h_j) against the link targets.

    With `positives_only` the non-edge samples still count in the mean but
    contribute no loss term, mirroring a reconstruction loss weighted by the
    adjacency entries alone.
    """
    if len(batch) == 0:
        raise ValueError("empty edge batch")
    dots = (h_tilde[batch.i_idx] * h_tilde[batch.j_idx]).sum(axis=1)
    if positives_only:
        terms = batch.y * np.logaddexp(0.0, -dots)
    else:
        terms = np.logaddexp(0.0, dots) - batch.y * dots
    return float(terms.mean())


def structure_loss_var(t: Tape, h_tilde: Var, batch: EdgeBatch, positives_only: bool = False) -> Var:
    hi = t.gather_rows(h_tilde, batch.i_idx)
    hj = t.gather_rows(h_tilde, batch.j_idx)
    dots = t.row_sum(t.mul(hi, hj))
    y = t.leaf(batch.y[:, None])
    if positives_only:
        terms = t.mul(y, t.softplus(t.scalar_mul(dots, -1.0)))
    else:
        terms = t.sub(t.softplus(dots), t.mul(y, dots))
    return t.scalar_mul(t.sum_all(terms), 1.0 / len(batch))


def synthetic_loss(
    g_t: list[np.ndarray],
    g_s: list[np.ndarray],
    h_tilde: np.ndarray,
    batch: EdgeBatch | None,
    lam: float,
) -> float:
    """Merged synthetic-graph objective: gradient matching + lam * structure."""
    loss = gradient_matching_loss(g_t, g_s)
    if lam != 0.0:
        loss += lam * structure_loss(h_tilde, batch)
    return loss


def synthetic_loss_var(
    t: Tape,
    x_var: Var,
    w_vars: list[Var],
    b_vars: list[Var],
    *,
    hops: int,
    head_w: np.ndarray,
    g_t: np.ndarray,
    y_onehot: np.ndarray,
    m_hat: np.ndarray,
    edge_batch: EdgeBatch | None,
    lam: float,
    positives_only: bool = False,
) -> tuple[Var, Var, Var | None]:
    """Build the full synthetic-graph loss on a tape.

    Returns (total, gradient-matching term, structure term or None). The
    second-order dependency of the matched gradient on `x_var` is realized by
    composing the closed-form head gradient from first-order ops.
    """
    a_prime = synth_adjacency_var(t, x_var, w_vars, b_vars)
    adj_norm = normalize_dense_var(t, a_prime)
    p = sgc_embed_var(t, adj_norm, x_var, hops)
    g_s = head_gradient_var(t, p, t.leaf(head_w), y_onehot)
    l_gra = t.cosine_columns(t.leaf(g_t), g_s)
    if lam == 0.0 or edge_batch is None:
        return l_gra, l_gra, None
    h_tilde = t.matmul(t.leaf(m_hat), p)
    l_str = structure_loss_var(t, h_tilde, edge_batch, positives_only)
    total = t.add(l_gra, t.scalar_mul(l_str, lam))
    return total, l_gra, l_str
