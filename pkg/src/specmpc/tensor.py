"""Minimal fp64 reverse-mode autodiff on 2-D numpy arrays.

Everything is a matrix: scalars are (1, 1), row vectors (1, n), batches
(batch, dim). The graph is rebuilt on every forward pass; ``backward``
walks it once in reverse topological order and accumulates gradients
into leaves. Sized for desk-scale networks (hidden widths of tens),
where simplicity and exact fp64 gradients matter more than speed.
"""

from __future__ import annotations

import hashlib
import json
from typing import Callable, Iterable

import numpy as np


def _as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ValueError(f"expected scalar, 1-D or 2-D value, got shape {a.shape}")
    return a


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    out = grad
    if shape[0] == 1 and out.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and out.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    if out.shape != shape:
        raise ValueError(f"cannot reduce gradient {grad.shape} to {shape}")
    return out


class Node:
    """A value in the computation graph.

    ``grad`` is zero-initialized and accumulates across repeated
    ``backward`` calls; reuse the same leaf Nodes to accumulate, create
    fresh ones to reset.
    """

    __slots__ = ("value", "grad", "_parents", "_backward")

    def __init__(self, value, parents: tuple = (), backward: Callable | None = None):
        self.value = _as_matrix(value)
        self.grad = np.zeros_like(self.value)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.shape}, leaf={self._backward is None})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = Node(a.value + b.value, (a, b))

    def back(g):
        a.grad += _unbroadcast(g, a.shape)
        b.grad += _unbroadcast(g, b.shape)

    out._backward = back
    return out


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = Node(a.value - b.value, (a, b))

    def back(g):
        a.grad += _unbroadcast(g, a.shape)
        b.grad -= _unbroadcast(g, b.shape)

    out._backward = back
    return out


def mul(a, b) -> Node:
    """Elementwise product with numpy broadcasting."""
    a, b = as_node(a), as_node(b)
    out = Node(a.value * b.value, (a, b))

    def back(g):
        a.grad += _unbroadcast(g * b.value, a.shape)
        b.grad += _unbroadcast(g * a.value, b.shape)

    out._backward = back
    return out


def scale(a, c: float) -> Node:
    a = as_node(a)
    out = Node(a.value * c, (a,))

    def back(g):
        a.grad += g * c

    out._backward = back
    return out


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Node(a.value @ b.value, (a, b))

    def back(g):
        a.grad += g @ b.value.T
        b.grad += a.value.T @ g

    out._backward = back
    return out


def tanh(a) -> Node:
    a = as_node(a)
    t = np.tanh(a.value)
    out = Node(t, (a,))

    def back(g):
        a.grad += g * (1.0 - t * t)

    out._backward = back
    return out


def sigmoid(a) -> Node:
    a = as_node(a)
    s = 1.0 / (1.0 + np.exp(-a.value))
    out = Node(s, (a,))

    def back(g):
        a.grad += g * s * (1.0 - s)

    out._backward = back
    return out


def softmax(a) -> Node:
    """Row-wise softmax; each output row sums to 1."""
    a = as_node(a)
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    out = Node(s, (a,))

    def back(g):
        # d/dx softmax: s * (g - <g, s>) per row
        dot = (g * s).sum(axis=1, keepdims=True)
        a.grad += s * (g - dot)

    out._backward = back
    return out


def clip(a, lo: float = -1.0, hi: float = 1.0) -> Node:
    """Componentwise clamp; zero subgradient outside (lo, hi)."""
    a = as_node(a)
    mask = (a.value > lo) & (a.value < hi)
    out = Node(np.clip(a.value, lo, hi), (a,))

    def back(g):
        a.grad += g * mask

    out._backward = back
    return out


def row_sum(a) -> Node:
    a = as_node(a)
    out = Node(a.value.sum(axis=1, keepdims=True), (a,))

    def back(g):
        a.grad += np.broadcast_to(g, a.shape)

    out._backward = back
    return out


def total_sum(a) -> Node:
    a = as_node(a)
    out = Node(a.value.sum().reshape(1, 1), (a,))

    def back(g):
        a.grad += g[0, 0]

    out._backward = back
    return out


def mean(a) -> Node:
    a = as_node(a)
    n = a.value.size
    out = Node(a.value.mean().reshape(1, 1), (a,))

    def back(g):
        a.grad += g[0, 0] / n

    out._backward = back
    return out


def concat_cols(nodes: Iterable[Node]) -> Node:
    nodes = [as_node(n) for n in nodes]
    rows = {n.shape[0] for n in nodes}
    if len(rows) != 1:
        raise ValueError(f"concat_cols row mismatch: {[n.shape for n in nodes]}")
    out = Node(np.concatenate([n.value for n in nodes], axis=1), tuple(nodes))
    widths = [n.shape[1] for n in nodes]

    def back(g):
        j = 0
        for n, w in zip(nodes, widths):
            n.grad += g[:, j:j + w]
            j += w

    out._backward = back
    return out


def slice_cols(a, j0: int, j1: int) -> Node:
    a = as_node(a)
    out = Node(a.value[:, j0:j1], (a,))

    def back(g):
        a.grad[:, j0:j1] += g

    out._backward = back
    return out


def slice_rows(a, i0: int, i1: int) -> Node:
    a = as_node(a)
    out = Node(a.value[i0:i1, :], (a,))

    def back(g):
        a.grad[i0:i1, :] += g

    out._backward = back
    return out


def mse(a, b) -> Node:
    """Mean over all elements of the squared difference; scalar Node."""
    a, b = as_node(a), as_node(b)
    if a.shape != b.shape:
        raise ValueError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    d = sub(a, b)
    return mean(mul(d, d))


def backward(loss: Node) -> None:
    """Reverse pass from a scalar loss; leaf grads accumulate."""
    if loss.value.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = loss.grad + 1.0
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# Parameter utilities


def params_to_nodes(params: dict[str, np.ndarray]) -> dict[str, Node]:
    return {k: Node(v) for k, v in params.items()}


def grad_check(build_loss: Callable[[dict[str, Node]], Node],
               params: dict[str, np.ndarray],
               eps: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference grads.

    Error per entry is |analytic - numeric| / max(1, |numeric|); the max
    is taken over every entry of every parameter.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    nodes = params_to_nodes(params)
    loss = build_loss(nodes)
    backward(loss)
    worst = 0.0
    for name, base in params.items():
        analytic = nodes[name].grad
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = build_loss(params_to_nodes(params)).value[0, 0]
            flat[i] = orig - eps
            lo = build_loss(params_to_nodes(params)).value[0, 0]
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


class Adam:
    """Adam on a dict of named parameter arrays; updates in place."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        self.t += 1
        lr = self.lr if lr is None else lr
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            p -= lr * mhat / (np.sqrt(vhat) + self.eps)


def cosine_lr(base_lr: float, step: int, total_steps: int, floor: float = 0.0) -> float:
    """Cosine decay from base_lr to floor over total_steps."""
    if total_steps <= 1:
        return base_lr
    frac = min(step, total_steps - 1) / (total_steps - 1)
    return floor + (base_lr - floor) * 0.5 * (1.0 + np.cos(np.pi * frac))


# ---------------------------------------------------------------------------
# Seeded, splittable randomness (Philox: counter-based, platform-stable)


def substream(seed: int, label: str) -> np.random.Generator:
    """Independent generator for (seed, label); same pair, same stream."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    key = int.from_bytes(digest[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(seed: int, label: str) -> int:
    """Stable 63-bit integer sub-seed for (seed, label)."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[16:24], "little") >> 1


# ---------------------------------------------------------------------------
# Checkpoint serialization: named fp64 arrays with shape metadata


def save_params_json(path, params: dict[str, np.ndarray], arch: str | None = None,
                     meta: dict | None = None) -> None:
    doc = {
        "arch": arch,
        "meta": meta or {},
        "params": {
            k: {"shape": list(v.shape), "data": [float(x) for x in v.reshape(-1)]}
            for k, v in params.items()
        },
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True)
        f.write("\n")


def load_params_json(path) -> tuple[dict[str, np.ndarray], str | None, dict]:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    params = {
        k: np.array(spec["data"], dtype=np.float64).reshape(spec["shape"])
        for k, spec in doc["params"].items()
    }
    return params, doc.get("arch"), doc.get("meta", {})
