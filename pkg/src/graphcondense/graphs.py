"""Sparse graph containers, symmetric normalization, disk bundles, and generators.

Adjacency matrices are stored as scipy CSR with float64 values; features and
labels are plain numpy arrays. All propagation-facing numerics are 64-bit;
on-disk feature files are 32-bit and widened on load.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class BundleFormatError(ValueError):
    """Raised when an on-disk bundle is malformed or inconsistent."""


@dataclass
class SparseGraph:
    """An attributed graph: CSR adjacency, dense features, optional labels.

    Labels use -1 for unlabeled nodes; labeled entries must lie in [0, C).
    Undirected graphs carry both (i, j) and (j, i) entries with equal weight.
    """

    num_nodes: int
    adj: sp.csr_matrix
    features: np.ndarray
    labels: np.ndarray | None
    num_classes: int
    directed: bool = False

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        """Undirected edge count (each edge stored twice in CSR)."""
        if self.directed:
            return self.adj.nnz
        diag = int(self.adj.diagonal().astype(bool).sum())
        return (self.adj.nnz - diag) // 2 + diag

    def validate(self) -> None:
        n = self.num_nodes
        if self.adj.shape != (n, n):
            raise ValueError(f"adjacency shape {self.adj.shape} != ({n}, {n})")
        if self.adj.indices.size and self.adj.indices.max() >= n:
            raise ValueError("column index out of range")
        if np.any(self.adj.data <= 0):
            raise ValueError("edge weights must be positive")
        if self.features.shape[0] != n:
            raise ValueError("feature row count mismatch")
        if self.labels is not None:
            if self.labels.shape != (n,):
                raise ValueError("label length mismatch")
            lab = self.labels[self.labels >= 0]
            if lab.size and lab.max() >= self.num_classes:
                raise ValueError("label out of range")
        if not self.directed:
            delta = self.adj - self.adj.T
            if delta.nnz and np.abs(delta.data).max() > 0:
                raise ValueError("undirected adjacency is not symmetric")


@dataclass
class IncrementalBatch:
    """A batch of n unseen nodes: links into the base graph plus own features.

    `a` is n x N over base-graph node ids; `a_tilde` (optional) holds the
    symmetric n x n links among the batch nodes themselves.
    """

    n: int
    a: sp.csr_matrix
    x: np.ndarray
    a_tilde: sp.csr_matrix | None = None

    def validate(self, num_base_nodes: int | None = None) -> None:
        if self.a.shape[0] != self.n or self.x.shape[0] != self.n:
            raise ValueError("batch row count mismatch")
        if num_base_nodes is not None and self.a.shape[1] != num_base_nodes:
            raise ValueError(
                f"batch references {self.a.shape[1]} base nodes, expected {num_base_nodes}"
            )
        if self.a_tilde is not None:
            if self.a_tilde.shape != (self.n, self.n):
                raise ValueError("a_tilde shape mismatch")
            if np.any(self.a_tilde.diagonal() != 0):
                raise ValueError("self-edges among batch nodes are not allowed")


def graph_from_edges(
    num_nodes: int,
    edges: np.ndarray,
    weights: np.ndarray | None,
    features: np.ndarray,
    labels: np.ndarray | None,
    num_classes: int,
    directed: bool = False,
) -> SparseGraph:
    """Build a SparseGraph from an edge list (undirected edges listed once)."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if weights is None:
        weights = np.ones(len(edges), dtype=np.float64)
    if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
        raise BundleFormatError("edge endpoint out of range")
    rows, cols, vals = edges[:, 0], edges[:, 1], np.asarray(weights, dtype=np.float64)
    if not directed:
        off = rows != cols
        rows = np.concatenate([rows, cols[off]])
        cols = np.concatenate([cols, edges[:, 0][off]])
        vals = np.concatenate([vals, vals[off]])
    adj = sp.coo_matrix((vals, (rows, cols)), shape=(num_nodes, num_nodes)).tocsr()
    adj.sum_duplicates()
    g = SparseGraph(
        num_nodes=num_nodes,
        adj=adj,
        features=np.asarray(features, dtype=np.float64),
        labels=None if labels is None else np.asarray(labels, dtype=np.int64),
        num_classes=num_classes,
        directed=directed,
    )
    g.validate()
    return g


def normalize_with_self_loops(adj: sp.spmatrix) -> sp.csr_matrix:
    """Symmetric normalization with self-loops: D^{-1/2} (A + I) D^{-1/2}.

    D is the degree matrix of A + I, so isolated nodes keep a unit self-loop.
    """
    n = adj.shape[0]
    a_tilde = (adj + sp.eye(n, format="csr", dtype=np.float64)).tocsr()
    deg = np.asarray(a_tilde.sum(axis=1)).ravel()
    dinv = deg ** -0.5
    out = a_tilde.multiply(dinv[:, None]).multiply(dinv[None, :])
    return out.tocsr()


def normalize_adjacency(g: SparseGraph) -> sp.csr_matrix:
    return normalize_with_self_loops(g.adj)


def normalize_dense_with_self_loops(a: np.ndarray) -> np.ndarray:
    """Dense counterpart of `normalize_with_self_loops` for small matrices."""
    n = a.shape[0]
    a_tilde = a + np.eye(n)
    dinv = a_tilde.sum(axis=1) ** -0.5
    return a_tilde * dinv[:, None] * dinv[None, :]


def spmm(adj: sp.spmatrix, x: np.ndarray) -> np.ndarray:
    """Sparse-dense product adj @ x with an explicit dimension check."""
    if adj.shape[1] != x.shape[0]:
        raise ValueError(f"dimension mismatch: {adj.shape} @ {x.shape}")
    return adj @ x


def induced_subgraph(g: SparseGraph, ids: np.ndarray) -> SparseGraph:
    """Restrict the graph to `ids` (edges with both endpoints selected)."""
    ids = np.asarray(ids, dtype=np.int64)
    sub = g.adj[ids][:, ids].tocsr()
    return SparseGraph(
        num_nodes=len(ids),
        adj=sub,
        features=g.features[ids],
        labels=None if g.labels is None else g.labels[ids],
        num_classes=g.num_classes,
        directed=g.directed,
    )


def extract_batch(g: SparseGraph, base_ids: np.ndarray, batch_ids: np.ndarray) -> IncrementalBatch:
    """Cut an IncrementalBatch for `batch_ids` out of a full graph.

    `a` keeps only links into `base_ids` (re-indexed); `a_tilde` keeps the
    links among the batch nodes themselves.
    """
    base_ids = np.asarray(base_ids, dtype=np.int64)
    batch_ids = np.asarray(batch_ids, dtype=np.int64)
    a = g.adj[batch_ids][:, base_ids].tocsr()
    a_tilde = g.adj[batch_ids][:, batch_ids].tocsr()
    return IncrementalBatch(n=len(batch_ids), a=a, x=g.features[batch_ids], a_tilde=a_tilde)


def training_subgraph(g: SparseGraph, splits: dict[str, np.ndarray]) -> SparseGraph:
    """The condensation input: the graph induced by the training split."""
    sub = induced_subgraph(g, splits["train"])
    if sub.labels is None or np.any(sub.labels < 0):
        raise ValueError("training split must be fully labeled")
    return sub


def graph_fingerprint(g: SparseGraph) -> str:
    h = hashlib.sha256()
    h.update(struct.pack("<qqq", g.num_nodes, g.num_features, g.num_classes))
    h.update(g.adj.indptr.astype(np.int64).tobytes())
    h.update(g.adj.indices.astype(np.int64).tobytes())
    h.update(g.adj.data.astype(np.float64).tobytes())
    h.update(np.ascontiguousarray(g.features, dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


# ----------------------------------------------------------------------------
# Graph-bundle directory format
#
#   meta          key=value: num_nodes, num_features, num_classes, directed
#   edges.txt     one "u v [w]" per line, undirected edges listed once
#   features.bin  <u32 N><u32 d> then N*d float32 little-endian, row-major
#   labels.txt    one class id per line (-1 = unlabeled)
#   splits.txt    lines "train <id>" / "val <id>" / "test <id>"
# ----------------------------------------------------------------------------


def save_bundle(g: SparseGraph, splits: dict[str, np.ndarray], path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "num_nodes": g.num_nodes,
        "num_features": g.num_features,
        "num_classes": g.num_classes,
        "directed": int(g.directed),
    }
    (path / "meta").write_text("".join(f"{k}={v}\n" for k, v in meta.items()), encoding="utf-8")

    coo = g.adj.tocoo()
    lines = []
    for u, v, w in zip(coo.row, coo.col, coo.data):
        if not g.directed and v < u:
            continue  # undirected edges are listed once
        lines.append(f"{u} {v}\n" if w == 1.0 else f"{u} {v} {w!r}\n")
    (path / "edges.txt").write_text("".join(lines), encoding="utf-8")

    with open(path / "features.bin", "wb") as fh:
        fh.write(struct.pack("<II", g.num_nodes, g.num_features))
        fh.write(np.ascontiguousarray(g.features, dtype="<f4").tobytes())

    labels = g.labels if g.labels is not None else -np.ones(g.num_nodes, dtype=np.int64)
    (path / "labels.txt").write_text("".join(f"{y}\n" for y in labels), encoding="utf-8")

    split_lines = []
    for name in ("train", "val", "test"):
        for i in splits.get(name, ()):
            split_lines.append(f"{name} {i}\n")
    (path / "splits.txt").write_text("".join(split_lines), encoding="utf-8")


def _read_meta(path: Path) -> dict[str, int]:
    raw = {}
    for line in (path / "meta").read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        raw[key.strip()] = int(value.strip())
    for key in ("num_nodes", "num_features", "num_classes", "directed"):
        if key not in raw:
            raise BundleFormatError(f"meta missing key {key!r}")
    return raw


def load_bundle(path: str | Path) -> tuple[SparseGraph, dict[str, np.ndarray]]:
    """Load a graph-bundle directory; raises on missing files or bad contents."""
    path = Path(path)
    for name in ("meta", "edges.txt", "features.bin", "labels.txt", "splits.txt"):
        if not (path / name).is_file():
            raise FileNotFoundError(str(path / name))
    meta = _read_meta(path)
    n, d, c = meta["num_nodes"], meta["num_features"], meta["num_classes"]

    edges, weights = [], []
    for ln, line in enumerate((path / "edges.txt").read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) not in (2, 3):
            raise BundleFormatError(f"edges.txt line {ln}: expected 'u v [w]'")
        edges.append((int(parts[0]), int(parts[1])))
        weights.append(float(parts[2]) if len(parts) == 3 else 1.0)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)

    with open(path / "features.bin", "rb") as fh:
        header = fh.read(8)
        if len(header) != 8:
            raise BundleFormatError("features.bin truncated header")
        fn, fd = struct.unpack("<II", header)
        if (fn, fd) != (n, d):
            raise BundleFormatError(f"features.bin header ({fn}, {fd}) != meta ({n}, {d})")
        buf = fh.read()
    feats = np.frombuffer(buf, dtype="<f4")
    if feats.size != n * d:
        raise BundleFormatError("features.bin payload size mismatch")
    features = feats.reshape(n, d).astype(np.float64)

    label_lines = (path / "labels.txt").read_text(encoding="utf-8").split()
    if len(label_lines) != n:
        raise BundleFormatError("labels.txt line count mismatch")
    labels = np.asarray([int(v) for v in label_lines], dtype=np.int64)
    if np.any(labels >= c):
        raise BundleFormatError("label out of range")

    splits: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    for ln, line in enumerate((path / "splits.txt").read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 2 or parts[0] not in splits:
            raise BundleFormatError(f"splits.txt line {ln}: expected 'train|val|test <id>'")
        idx = int(parts[1])
        if not 0 <= idx < n:
            raise BundleFormatError(f"splits.txt line {ln}: node id out of range")
        splits[parts[0]].append(idx)

    g = graph_from_edges(n, edges, np.asarray(weights), features, labels, c,
                         directed=bool(meta["directed"]))
    return g, {k: np.asarray(v, dtype=np.int64) for k, v in splits.items()}


def sbm_generate(
    sizes: list[int],
    p_in: float,
    p_out: float,
    d: int,
    mu: float,
    seed: int,
    noise_std: float = 1.0,
) -> SparseGraph:
    """Stochastic-block-model graph with Gaussian class-mean features.

    Class means are placed so every pair of means is `mu` apart; features add
    isotropic noise of scale `noise_std`. Deterministic for a fixed seed.
    """
    if not 0.0 <= p_out <= p_in <= 1.0:
        raise ValueError("need 0 <= p_out <= p_in <= 1")
    if any(s <= 0 for s in sizes):
        raise ValueError("empty class")
    rng = np.random.default_rng(seed)
    num_classes = len(sizes)
    n = int(sum(sizes))
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), sizes)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    rows, cols = [], []
    for ci in range(num_classes):
        for cj in range(ci, num_classes):
            p = p_in if ci == cj else p_out
            ni, nj = sizes[ci], sizes[cj]
            mask = rng.random((ni, nj)) < p
            if ci == cj:
                mask = np.triu(mask, k=1)  # simple graph: no self-loops
            ii, jj = np.nonzero(mask)
            rows.append(ii + offsets[ci])
            cols.append(jj + offsets[cj])
    edges = np.stack([np.concatenate(rows), np.concatenate(cols)], axis=1) if rows else \
        np.zeros((0, 2), dtype=np.int64)

    if num_classes <= d:
        means = np.zeros((num_classes, d))
        means[np.arange(num_classes), np.arange(num_classes)] = mu / np.sqrt(2.0)
    else:
        dirs = rng.standard_normal((num_classes, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        means = dirs * mu / np.sqrt(2.0)
    features = means[labels] + noise_std * rng.standard_normal((n, d))

    return graph_from_edges(n, edges, None, features, labels, num_classes, directed=False)
