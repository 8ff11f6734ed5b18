"""Reverse-mode autodiff over dense float64 matrices.

Every value on the tape is a 2-D array; scalars are (1, 1). Forward values
are computed eagerly, the backward pass walks the tape once in strict reverse
order, so gradient accumulation is deterministic and replays bit-identically.
Sparse matrices enter only as constants (`const_spmm_left`).
"""
from __future__ import annotations

from typing import Callable

import numpy as np
import scipy.sparse as sp

# Backward rule: grad_out -> list of (parent_index, grad_contribution)
_BackwardFn = Callable[[np.ndarray], list[tuple[int, np.ndarray]]]


class Var:
    __slots__ = ("tape", "idx", "value")

    def __init__(self, tape: "Tape", idx: int, value: np.ndarray):
        self.tape = tape
        self.idx = idx
        self.value = value

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape


class Gradients:
    """Per-leaf gradient lookup; unreachable nodes read as zeros."""

    def __init__(self, raw: list[np.ndarray | None]):
        self._raw = raw

    def __getitem__(self, v: Var) -> np.ndarray:
        g = self._raw[v.idx]
        return np.zeros_like(v.value) if g is None else g


def _as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D value, got shape {a.shape}")
    return a


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    out = g
    if shape[0] == 1 and g.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


def _check_broadcast(a: tuple[int, int], b: tuple[int, int], op: str) -> None:
    ok_rows = a[0] == b[0] or a[0] == 1 or b[0] == 1
    ok_cols = a[1] == b[1] or a[1] == 1 or b[1] == 1
    if not (ok_rows and ok_cols):
        raise ValueError(f"{op}: incompatible shapes {a} and {b}")


class Tape:
    """An append-only record of operations; backward visits it in reverse."""

    def __init__(self):
        self._values: list[np.ndarray] = []
        self._backward: list[_BackwardFn | None] = []

    def __len__(self) -> int:
        return len(self._values)

    def _emit(self, value: np.ndarray, backward: _BackwardFn | None) -> Var:
        self._values.append(value)
        self._backward.append(backward)
        return Var(self, len(self._values) - 1, value)

    def leaf(self, value) -> Var:
        return self._emit(_as_matrix(value).copy(), None)

    # -- elementwise / broadcast ---------------------------------------------

    def add(self, a: Var, b: Var) -> Var:
        _check_broadcast(a.shape, b.shape, "add")
        ai, bi, ash, bsh = a.idx, b.idx, a.shape, b.shape
        return self._emit(a.value + b.value,
                          lambda g: [(ai, _unbroadcast(g, ash)), (bi, _unbroadcast(g, bsh))])

    def sub(self, a: Var, b: Var) -> Var:
        _check_broadcast(a.shape, b.shape, "sub")
        ai, bi, ash, bsh = a.idx, b.idx, a.shape, b.shape
        return self._emit(a.value - b.value,
                          lambda g: [(ai, _unbroadcast(g, ash)), (bi, _unbroadcast(-g, bsh))])

    def mul(self, a: Var, b: Var) -> Var:
        _check_broadcast(a.shape, b.shape, "mul")
        ai, bi, av, bv = a.idx, b.idx, a.value, b.value
        return self._emit(av * bv,
                          lambda g: [(ai, _unbroadcast(g * bv, av.shape)),
                                     (bi, _unbroadcast(g * av, bv.shape))])

    def scalar_mul(self, a: Var, c: float) -> Var:
        ai, c = a.idx, float(c)
        return self._emit(a.value * c, lambda g: [(ai, g * c)])

    def scalar_add(self, a: Var, c: float) -> Var:
        ai = a.idx
        return self._emit(a.value + float(c), lambda g: [(ai, g)])

    def pow_const(self, a: Var, p: float) -> Var:
        """Elementwise power with a constant exponent; inputs must be > 0."""
        ai, p, av = a.idx, float(p), a.value
        return self._emit(av ** p, lambda g: [(ai, g * p * av ** (p - 1.0))])

    # -- structural ------------------------------------------------------------

    def matmul(self, a: Var, b: Var) -> Var:
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul: {a.shape} @ {b.shape}")
        ai, bi, av, bv = a.idx, b.idx, a.value, b.value
        return self._emit(av @ bv, lambda g: [(ai, g @ bv.T), (bi, av.T @ g)])

    def transpose(self, a: Var) -> Var:
        ai = a.idx
        return self._emit(a.value.T.copy(), lambda g: [(ai, g.T)])

    def reshape(self, a: Var, rows: int, cols: int) -> Var:
        if rows * cols != a.value.size:
            raise ValueError(f"reshape: cannot view {a.shape} as ({rows}, {cols})")
        ai, ash = a.idx, a.shape
        return self._emit(a.value.reshape(rows, cols).copy(),
                          lambda g: [(ai, g.reshape(ash))])

    def concat_cols(self, a: Var, b: Var) -> Var:
        if a.shape[0] != b.shape[0]:
            raise ValueError(f"concat_cols: {a.shape} vs {b.shape}")
        ai, bi, ca = a.idx, b.idx, a.shape[1]
        return self._emit(np.concatenate([a.value, b.value], axis=1),
                          lambda g: [(ai, g[:, :ca]), (bi, g[:, ca:])])

    def concat_rows(self, a: Var, b: Var) -> Var:
        if a.shape[1] != b.shape[1]:
            raise ValueError(f"concat_rows: {a.shape} vs {b.shape}")
        ai, bi, ra = a.idx, b.idx, a.shape[0]
        return self._emit(np.concatenate([a.value, b.value], axis=0),
                          lambda g: [(ai, g[:ra]), (bi, g[ra:])])

    def gather_rows(self, a: Var, idx) -> Var:
        idx = np.asarray(idx, dtype=np.int64)
        ai, ash = a.idx, a.shape

        def backward(g):
            out = np.zeros(ash)
            np.add.at(out, idx, g)
            return [(ai, out)]

        return self._emit(a.value[idx], backward)

    def const_spmm_left(self, s: sp.spmatrix, a: Var) -> Var:
        """Constant sparse matrix times a Var: s @ a."""
        if s.shape[1] != a.shape[0]:
            raise ValueError(f"const_spmm_left: {s.shape} @ {a.shape}")
        ai = a.idx
        s = s.tocsr()
        st = s.T.tocsr()
        return self._emit(s @ a.value, lambda g: [(ai, st @ g)])

    # -- nonlinearities ---------------------------------------------------------

    def relu(self, a: Var) -> Var:
        ai = a.idx
        mask = a.value > 0  # subgradient 0 at the kink
        return self._emit(a.value * mask, lambda g: [(ai, g * mask)])

    def sigmoid(self, a: Var) -> Var:
        ai = a.idx
        out = _sigmoid(a.value)
        return self._emit(out, lambda g: [(ai, g * out * (1.0 - out))])

    def softplus(self, a: Var) -> Var:
        ai, av = a.idx, a.value
        out = np.logaddexp(0.0, av)
        return self._emit(out, lambda g: [(ai, g * _sigmoid(av))])

    def row_softmax(self, a: Var) -> Var:
        ai = a.idx
        out = row_softmax(a.value)
        return self._emit(
            out,
            lambda g: [(ai, out * (g - (g * out).sum(axis=1, keepdims=True)))])

    # -- reductions --------------------------------------------------------------

    def row_sum(self, a: Var) -> Var:
        ai, cols = a.idx, a.shape[1]
        return self._emit(a.value.sum(axis=1, keepdims=True),
                          lambda g: [(ai, np.repeat(g, cols, axis=1))])

    def sum_all(self, a: Var) -> Var:
        ai, ash = a.idx, a.shape
        return self._emit(np.array([[a.value.sum()]]),
                          lambda g: [(ai, np.full(ash, g[0, 0]))])

    def row_l2_sum(self, a: Var) -> Var:
        """Sum of row-wise Euclidean norms; zero rows get zero gradient."""
        ai, av = a.idx, a.value
        norms = np.sqrt((av * av).sum(axis=1, keepdims=True))

        def backward(g):
            safe = np.where(norms > 0.0, norms, 1.0)
            return [(ai, g[0, 0] * np.where(norms > 0.0, av / safe, 0.0))]

        return self._emit(np.array([[norms.sum()]]), backward)

    def cosine_columns(self, a: Var, b: Var) -> Var:
        """Sum over columns of (1 - cosine(a_i, b_i)).

        A column pair where either side has zero norm contributes 1 and
        receives zero gradient.
        """
        if a.shape != b.shape:
            raise ValueError(f"cosine_columns: {a.shape} vs {b.shape}")
        ai, bi, av, bv = a.idx, b.idx, a.value, b.value
        na = np.sqrt((av * av).sum(axis=0))
        nb = np.sqrt((bv * bv).sum(axis=0))
        live = (na > 0.0) & (nb > 0.0)
        dots = (av * bv).sum(axis=0)
        cos = np.where(live, dots / np.where(live, na * nb, 1.0), 0.0)
        loss = float((1.0 - cos).sum())

        def backward(g):
            s = g[0, 0]
            with np.errstate(divide="ignore", invalid="ignore"):
                ga = np.where(live, cos * av / na ** 2 - bv / (na * nb), 0.0)
                gb = np.where(live, cos * bv / nb ** 2 - av / (na * nb), 0.0)
            return [(ai, s * np.nan_to_num(ga, nan=0.0)),
                    (bi, s * np.nan_to_num(gb, nan=0.0))]

        return self._emit(np.array([[loss]]), backward)

    def ce_with_logits(self, z: Var, labels) -> Var:
        """Mean softmax cross-entropy over labeled rows (label -1 = skip)."""
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape[0] != z.shape[0]:
            raise ValueError("ce_with_logits: label count mismatch")
        labeled = labels >= 0
        count = int(labeled.sum())
        if count == 0:
            raise ValueError("ce_with_logits: all rows unlabeled")
        zi, zv = z.idx, z.value
        m = zv.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(zv - m).sum(axis=1))
        picked = zv[np.arange(len(labels)), np.where(labeled, labels, 0)]
        loss = float(((lse - picked) * labeled).sum() / count)

        def backward(g):
            soft = row_softmax(zv)
            soft[np.arange(len(labels))[labeled], labels[labeled]] -= 1.0
            soft[~labeled] = 0.0
            return [(zi, g[0, 0] * soft / count)]

        return self._emit(np.array([[loss]]), backward)

    # -- backward ------------------------------------------------------------------

    def backward(self, loss: Var) -> Gradients:
        if loss.shape != (1, 1):
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * len(self._values)
        grads[loss.idx] = np.ones((1, 1))
        for i in range(loss.idx, -1, -1):
            g = grads[i]
            back = self._backward[i]
            if g is None or back is None:
                continue
            for parent, contrib in back(g):
                if grads[parent] is None:
                    grads[parent] = contrib.copy()
                else:
                    grads[parent] += contrib
        return Gradients(grads)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: np.ndarray) -> np.ndarray:
    return _sigmoid(np.asarray(x, dtype=np.float64))


def row_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def grad_check(
    f: Callable[[Tape, Var], Var],
    x: np.ndarray,
    eps: float = 1e-5,
    exclude: np.ndarray | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    `f(tape, var)` must build a scalar Var. `exclude` masks entries of `x`
    sitting on non-differentiable points (norm kinks etc.) out of the check.
    """
    x = np.asarray(x, dtype=np.float64)
    tape = Tape()
    xv = tape.leaf(x)
    analytic = tape.backward(f(tape, xv))[xv]

    def value_at(p: np.ndarray) -> float:
        t = Tape()
        return float(f(t, t.leaf(p)).value[0, 0])

    worst = 0.0
    for pos in np.ndindex(*x.shape):
        if exclude is not None and exclude[pos]:
            continue
        hi, lo = x.copy(), x.copy()
        hi[pos] += eps
        lo[pos] -= eps
        fd = (value_at(hi) - value_at(lo)) / (2.0 * eps)
        worst = max(worst, abs(analytic[pos] - fd) / (abs(fd) + 1e-12))
    return worst
