"""Minimal reverse-mode autodiff over float64 numpy arrays.

Only the operations the model needs: matmul, broadcast add, relu, elementwise
scaling (dropout masks), column concat, row mean, element pick, and weighted
softmax cross-entropy. Gradients are retained on every tensor in the graph so
attribution can read gradients of intermediate activations.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward requires a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        for node in topo:
            node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data @ b.data

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return Tensor(out_data, (a, b), backward)


def matmul_const(const: np.ndarray, b: Tensor) -> Tensor:
    """Left-multiply by a constant matrix (e.g. the neighborhood aggregation)."""
    const = np.asarray(const, dtype=np.float64)
    out_data = const @ b.data

    def backward(g):
        _accum(b, const.T @ g)

    return Tensor(out_data, (b,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return Tensor(out_data, (a, b), backward)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out_data = a.data * mask

    def backward(g):
        _accum(a, g * mask)

    return Tensor(out_data, (a,), backward)


def scale(a: Tensor, factor) -> Tensor:
    """Elementwise product with a constant scalar or array (dropout, loss weights)."""
    factor = np.asarray(factor, dtype=np.float64)
    out_data = a.data * factor

    def backward(g):
        _accum(a, g * factor)

    return Tensor(out_data, (a,), backward)


def concat_cols(tensors: list[Tensor]) -> Tensor:
    out_data = np.concatenate([t.data for t in tensors], axis=1)
    widths = [t.data.shape[1] for t in tensors]

    def backward(g):
        start = 0
        for t, w in zip(tensors, widths):
            _accum(t, g[:, start:start + w])
            start += w

    return Tensor(out_data, tuple(tensors), backward)


def mean_rows(a: Tensor) -> Tensor:
    """Columnwise mean, kept as a 1 x C row."""
    n = a.data.shape[0]
    if n == 0:
        raise ValueError("mean over empty graph")
    out_data = a.data.mean(axis=0, keepdims=True)

    def backward(g):
        _accum(a, np.repeat(g / n, n, axis=0))

    return Tensor(out_data, (a,), backward)


def pick(a: Tensor, row: int, col: int) -> Tensor:
    out_data = np.asarray(a.data[row, col])

    def backward(g):
        full = np.zeros_like(a.data)
        full[row, col] = g
        _accum(a, full)

    return Tensor(out_data, (a,), backward)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    out_data = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        _accum(a, full)

    return Tensor(out_data, (a,), backward)


def weighted_cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """Mean over samples of -w[target] * log softmax(logits)[target].

    logits: n x K; targets: n int class indices; weights: per-class weight.
    """
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    n = logits.data.shape[0]
    if targets.shape != (n,):
        raise ValueError("targets shape mismatch")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    w = weights[targets]
    losses = -w * log_probs[np.arange(n), targets]
    out_data = np.asarray(losses.mean())

    def backward(g):
        probs = np.exp(log_probs)
        grad = probs * w[:, None]
        grad[np.arange(n), targets] -= w
        _accum(logits, g * grad / n)

    return Tensor(out_data, (logits,), backward)


def add_scaled(terms: list[tuple[float, Tensor]]) -> Tensor:
    """Weighted sum of scalar tensors."""
    out_data = np.asarray(sum(c * t.data for c, t in terms))

    def backward(g):
        for c, t in terms:
            _accum(t, g * c)

    return Tensor(out_data, tuple(t for _, t in terms), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
