"""The graph model used for condensation and deployment.

Two architectures share one weight container:

* ``sgc``  -- L propagation hops then a linear head (ReLU between head layers
  if there is more than one). Embeddings carry no weights until the head, so
  the single-head gradient has a closed form used throughout condensation.
* ``gcn``  -- per-layer propagate-transform-ReLU with a linear final layer;
  available for deployment-time evaluation only.

Weight matrices are bias-free; ``adj_norm`` arguments are expected to be
symmetrically normalized with self-loops already.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .autodiff import Tape, Var, row_softmax
from .optim import make_optimizer


@dataclass(frozen=True)
class GnnConfig:
    depth: int = 2
    head_dims: tuple[int, ...] = ()
    architecture: str = "sgc"

    def __post_init__(self):
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        if not self.head_dims:
            raise ValueError("head_dims must end in the class count")
        if self.architecture not in ("sgc", "gcn"):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.architecture == "gcn" and len(self.head_dims) != self.depth:
            raise ValueError("gcn needs one head dim per layer")

    @property
    def num_classes(self) -> int:
        return self.head_dims[-1]


@dataclass
class GnnWeights:
    layers: list[np.ndarray] = field(default_factory=list)

    def copy(self) -> "GnnWeights":
        return GnnWeights([w.copy() for w in self.layers])


def init_weights(cfg: GnnConfig, in_dim: int, rng: np.random.Generator) -> GnnWeights:
    """Uniform(-s, s) init with s = 1/sqrt(fan_in), drawn from `rng`."""
    dims = [in_dim, *cfg.head_dims]
    layers = []
    for a, b in zip(dims[:-1], dims[1:]):
        s = 1.0 / np.sqrt(a)
        layers.append(rng.uniform(-s, s, size=(a, b)))
    return GnnWeights(layers)


def _propagate(adj_norm, x: np.ndarray, hops: int) -> np.ndarray:
    p = x
    for _ in range(hops):
        p = adj_norm @ p
    return p


def forward(adj_norm, x: np.ndarray, w: GnnWeights, cfg: GnnConfig) -> tuple[np.ndarray, np.ndarray]:
    """Return (pre-classifier embeddings H, logits)."""
    if adj_norm.shape[1] != x.shape[0]:
        raise ValueError(f"dimension mismatch: {adj_norm.shape} @ {x.shape}")
    if cfg.architecture == "sgc":
        h = _propagate(adj_norm, x, cfg.depth)
        for wk in w.layers[:-1]:
            h = np.maximum(h @ wk, 0.0)
        return h, h @ w.layers[-1]
    # gcn: ReLU(A h W) per layer, final layer linear
    h = x
    for wk in w.layers[:-1]:
        h = np.maximum(adj_norm @ (h @ wk), 0.0)
    h = _propagate(adj_norm, h, 1)
    return h, h @ w.layers[-1]


def ce_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean softmax cross-entropy over labeled rows (-1 marks unlabeled)."""
    labels = np.asarray(labels, dtype=np.int64)
    labeled = labels >= 0
    if not labeled.any():
        raise ValueError("all rows unlabeled")
    z = logits[labeled]
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    return float(np.mean(lse - z[np.arange(z.shape[0]), labels[labeled]]))


def onehot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes))
    labeled = labels >= 0
    out[np.nonzero(labeled)[0], labels[labeled]] = 1.0
    return out


def head_gradient(p: np.ndarray, w: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Closed-form d(ce)/dW for a single linear head: P^T (softmax(PW) - Y) / n."""
    labels = np.asarray(labels, dtype=np.int64)
    labeled = labels >= 0
    n = int(labeled.sum())
    resid = row_softmax(p @ w) - onehot(labels, w.shape[1])
    resid[~labeled] = 0.0
    return p.T @ resid / n


def grad_weights(adj_norm, x, labels, w: GnnWeights, cfg: GnnConfig) -> list[np.ndarray]:
    """Exact gradient of ce_loss(forward) w.r.t. every weight matrix."""
    if cfg.architecture == "sgc" and len(w.layers) == 1:
        return [head_gradient(_propagate(adj_norm, x, cfg.depth), w.layers[0], labels)]
    # general path: replay the forward pass on a tape
    t = Tape()
    wvars = [t.leaf(wk) for wk in w.layers]
    loss = _tape_loss(t, adj_norm, x, labels, wvars, cfg)
    grads = t.backward(loss)
    return [grads[wv] for wv in wvars]


def _tape_spmm(t: Tape, adj_norm, h: Var) -> Var:
    if sp.issparse(adj_norm):
        return t.const_spmm_left(adj_norm, h)
    return t.matmul(t.leaf(adj_norm), h)


def _tape_loss(t: Tape, adj_norm, x, labels, wvars: list[Var], cfg: GnnConfig) -> Var:
    h = t.leaf(x)
    if cfg.architecture == "sgc":
        for _ in range(cfg.depth):
            h = _tape_spmm(t, adj_norm, h)
        for wv in wvars[:-1]:
            h = t.relu(t.matmul(h, wv))
    else:
        for wv in wvars[:-1]:
            h = t.relu(_tape_spmm(t, adj_norm, t.matmul(h, wv)))
        h = _tape_spmm(t, adj_norm, h)
    return t.ce_with_logits(t.matmul(h, wvars[-1]), labels)


def train_step(w: GnnWeights, adj_norm, x, labels, cfg: GnnConfig, optimizer) -> float:
    """One optimizer step of ce_loss over the given graph; returns the loss."""
    _, logits = forward(adj_norm, x, w, cfg)
    loss = ce_loss(logits, labels)
    optimizer.step(w.layers, grad_weights(adj_norm, x, labels, w, cfg))
    return loss


def train_gnn(
    adj_norm,
    x: np.ndarray,
    labels: np.ndarray,
    cfg: GnnConfig,
    rng: np.random.Generator,
    epochs: int = 300,
    lr: float = 0.01,
    optimizer: str = "adam",
) -> GnnWeights:
    """Fit a model on one graph; used for deployment and baseline embeddings."""
    w = init_weights(cfg, x.shape[1], rng)
    opt = make_optimizer(optimizer, lr)
    for _ in range(epochs):
        train_step(w, adj_norm, x, labels, cfg, opt)
    return w
