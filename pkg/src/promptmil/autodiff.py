"""Minimal reverse-mode automatic differentiation over 2-D float64 arrays.

Covers exactly the operations the prompt-training objective needs: matrix
products, column softmax, row normalization, tanh, reductions, fused
softmax cross-entropy, and the prototype-diversity penalty. Forward values
are computed with the same kernels the evaluation path uses, so training
and evaluation agree bit for bit.
"""
from __future__ import annotations

import numpy as np

from . import numerics
from .errors import ContractViolationError


class Tensor:
    """A graph node holding a 2-D float64 value and an accumulated gradient."""

    __slots__ = ("value", "grad", "_parents", "_backward", "needs_grad")

    def __init__(self, value, parents=(), backward=None, needs_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        if self.value.ndim != 2:
            raise ContractViolationError(f"Tensor must be 2-D, got {self.value.shape}")
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value.reshape(()))

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def backward(self):
        """Backpropagate from this scalar node through the whole graph."""
        if self.value.size != 1:
            raise ContractViolationError("backward() requires a scalar node")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.needs_grad and id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.value)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def leaf(value) -> Tensor:
    """Trainable leaf; `value` is aliased, not copied, so updates feed the next graph."""
    t = Tensor(np.asarray(value, dtype=np.float64), needs_grad=True)
    return t


def constant(value) -> Tensor:
    return Tensor(value, needs_grad=False)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _node(value, parents, backward):
    needs = any(p.needs_grad for p in parents)
    if not needs:
        return Tensor(value, needs_grad=False)
    return Tensor(value, parents=parents, backward=backward, needs_grad=True)


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise ContractViolationError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def backward(g):
        if a.needs_grad:
            a._accumulate(g)
        if b.needs_grad:
            b._accumulate(g)

    return _node(a.value + b.value, (a, b), backward)


def scale(a, s: float) -> Tensor:
    a = _lift(a)
    s = float(s)

    def backward(g):
        a._accumulate(g * s)

    return _node(a.value * s, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape[1] != b.shape[0]:
        raise ContractViolationError(f"matmul dimension mismatch: {a.shape} x {b.shape}")

    def backward(g):
        if a.needs_grad:
            a._accumulate(g @ b.value.T)
        if b.needs_grad:
            b._accumulate(a.value.T @ g)

    return _node(a.value @ b.value, (a, b), backward)


def transpose(a) -> Tensor:
    a = _lift(a)

    def backward(g):
        a._accumulate(g.T)

    return _node(a.value.T, (a,), backward)


def sum_rows(a) -> Tensor:
    """(R, C) -> (1, C) sum over rows."""
    a = _lift(a)

    def backward(g):
        a._accumulate(np.broadcast_to(g, a.shape))

    return _node(a.value.sum(axis=0, keepdims=True), (a,), backward)


def mean_rows(a) -> Tensor:
    """(R, C) -> (1, C) mean over rows."""
    a = _lift(a)
    r = a.shape[0]

    def backward(g):
        a._accumulate(np.broadcast_to(g / r, a.shape))

    return _node(a.value.mean(axis=0, keepdims=True), (a,), backward)


def concat_rows(parts) -> Tensor:
    parts = [_lift(p) for p in parts]
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.needs_grad:
                p._accumulate(g[lo:hi])

    return _node(np.concatenate([p.value for p in parts], axis=0), tuple(parts), backward)


def normalize_rows(a) -> Tensor:
    a = _lift(a)
    out = numerics.l2_normalize_rows(a.value)
    norms = np.linalg.norm(a.value, axis=1, keepdims=True)

    def backward(g):
        inner = (out * g).sum(axis=1, keepdims=True)
        a._accumulate((g - out * inner) / norms)

    return _node(out, (a,), backward)


def softmax_cols(a) -> Tensor:
    a = _lift(a)
    out = numerics.softmax_columns(a.value)

    def backward(g):
        s = (out * g).sum(axis=0, keepdims=True)
        a._accumulate(out * (g - s))

    return _node(out, (a,), backward)


def tanh(a) -> Tensor:
    a = _lift(a)
    out = np.tanh(a.value)

    def backward(g):
        a._accumulate(g * (1.0 - out * out))

    return _node(out, (a,), backward)


def ce_with_softmax(logits, y: int) -> Tensor:
    """Fused softmax + cross-entropy for a (1, K) logit row.

    Backward uses the standard p - onehot(y) form; the CE_EPS floor only
    guards the forward log.
    """
    logits = _lift(logits)
    if logits.shape[0] != 1:
        raise ContractViolationError(f"logits must be a (1, K) row, got {logits.shape}")
    p = numerics.class_probabilities(logits.value[0], tau=1.0)
    loss = numerics.cross_entropy(p, y)

    def backward(g):
        d = p.copy()
        d[y] -= 1.0
        logits._accumulate(g.reshape(()) * d[None, :])

    return _node(np.array([[loss]]), (logits,), backward)


def gram_offdiag_mean(p) -> Tensor:
    """Mean off-diagonal entry of P @ P.T for an (n, m) matrix, n >= 2."""
    p = _lift(p)
    n = p.shape[0]
    if n < 2:
        raise ContractViolationError("gram_offdiag_mean needs at least 2 rows")
    gram = p.value @ p.value.T
    denom = n * (n - 1)
    out = (gram.sum() - np.trace(gram)) / denom

    def backward(g):
        col_sums = p.value.sum(axis=0, keepdims=True)
        p._accumulate(g.reshape(()) * 2.0 * (col_sums - p.value) / denom)

    return _node(np.array([[out]]), (p,), backward)
