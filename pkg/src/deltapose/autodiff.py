"""Minimal reverse-mode automatic differentiation over float32 numpy arrays.

Each primitive exists as an explicit forward/backward pair on plain arrays;
the Tensor layer composes them into a tape for the chain rule. Keeping the
raw pairs importable lets callers re-run forward pieces without building a
graph (finite-difference probing does exactly that).

Conventions: compute in float32, reduce in float64 where a scalar leaves the
graph, and use subgradient 0 at the origin of L2-norm nodes.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward_fn")

    def __init__(self, data, parents=(), backward_fn=None):
        self.data = np.asarray(data, dtype=np.float32)
        self.grad = None
        self._parents = tuple(parents)
        self._backward_fn = backward_fn

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


def backward(root: Tensor) -> None:
    """Reverse-mode sweep; accumulates .grad on every reachable tensor."""
    if root.data.size != 1:
        raise ValueError("backward starts from a scalar")
    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))

    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward_fn is None or node.grad is None:
            continue
        parent_grads = node._backward_fn(node.grad)
        for parent, g in zip(node._parents, parent_grads):
            if g is None:
                continue
            g = np.asarray(g, dtype=np.float32)
            if parent.grad is None:
                parent.grad = g.copy()
            else:
                parent.grad += g


# ---------------------------------------------------------------------------
# primitive pairs
# ---------------------------------------------------------------------------

def conv2d_forward(x, w, b, stride=2, pad=1):
    """x (N,C,H,W), w (O,C,kh,kw), b (O,) -> out (N,O,Ho,Wo), cache."""
    n, c, h, wid = x.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise ValueError(f"conv channel mismatch: input {c}, weight {c2}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wid + 2 * pad - kw) // stride + 1
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))

    # dtype follows x so probing code can evaluate the same function in float64
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            cols[:, :, ki, kj] = padded[:, :, ki:ki + stride * ho:stride,
                                        kj:kj + stride * wo:stride]
    cols2 = cols.reshape(n, c * kh * kw, ho * wo)
    w2 = w.reshape(o, c * kh * kw)
    out = np.matmul(w2, cols2)                      # (N, O, Ho*Wo)
    out = out.reshape(n, o, ho, wo) + b[None, :, None, None]
    cache = (cols2, w2, x.shape, (stride, pad, kh, kw, ho, wo))
    return out, cache


def conv2d_backward(dout, cache):
    cols2, w2, x_shape, (stride, pad, kh, kw, ho, wo) = cache
    n, c, h, wid = x_shape
    o = w2.shape[0]
    dout2 = dout.reshape(n, o, ho * wo)
    db = dout2.sum(axis=(0, 2))
    dw2 = np.matmul(dout2, cols2.transpose(0, 2, 1)).sum(axis=0)
    dcols2 = np.matmul(w2.T, dout2)                 # (N, F, Ho*Wo)
    dcols = dcols2.reshape(n, c, kh, kw, ho, wo)

    dpadded = np.zeros((n, c, h + 2 * pad, wid + 2 * pad), dtype=np.float32)
    for ki in range(kh):
        for kj in range(kw):
            dpadded[:, :, ki:ki + stride * ho:stride,
                    kj:kj + stride * wo:stride] += dcols[:, :, ki, kj]
    dx = dpadded[:, :, pad:pad + h, pad:pad + wid]
    return dx, dw2.reshape(o, c, kh, kw), db


def linear_forward(x, w, b):
    """x (N,F), w (O,F), b (O,)."""
    return x @ w.T + b, (x, w)


def linear_backward(dout, cache):
    x, w = cache
    return dout @ w, dout.T @ x, dout.sum(axis=0)


def leaky_relu_forward(x, alpha=0.1):
    slope = np.where(x > 0, np.float32(1.0), np.float32(alpha))
    return x * slope, slope


def leaky_relu_backward(dout, slope):
    return dout * slope


def gap_forward(x):
    """Global average pool (N,C,H,W) -> (N,C)."""
    return x.mean(axis=(2, 3), dtype=x.dtype), x.shape


def gap_backward(dout, x_shape):
    n, c, h, w = x_shape
    return np.broadcast_to(dout[:, :, None, None] / np.float32(h * w), x_shape).copy()


def norm_rows_forward(x):
    """Row-wise L2 norm (N,D) -> (N,); float64 accumulation inside the square sum."""
    sq = np.sum(x.astype(np.float64) ** 2, axis=1)
    n = np.sqrt(sq).astype(np.float32)
    return n, (x, n)


def norm_rows_backward(dout, cache):
    x, n = cache
    safe = np.where(n > 0, n, np.float32(1.0))
    # zero rows get subgradient 0
    return (dout / safe)[:, None] * x * (n > 0)[:, None]


# ---------------------------------------------------------------------------
# graph ops
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor, stride=2, pad=1) -> Tensor:
    out, cache = conv2d_forward(x.data, w.data, b.data, stride, pad)

    def bwd(g):
        return conv2d_backward(g, cache)

    return Tensor(out, (x, w, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    out, cache = linear_forward(x.data, w.data, b.data)

    def bwd(g):
        return linear_backward(g, cache)

    return Tensor(out, (x, w, b), bwd)


def leaky_relu(x: Tensor, alpha=0.1) -> Tensor:
    out, slope = leaky_relu_forward(x.data, alpha)

    def bwd(g):
        return (leaky_relu_backward(g, slope),)

    return Tensor(out, (x,), bwd)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    ca = a.data.shape[1]

    def bwd(g):
        return g[:, :ca], g[:, ca:]

    return Tensor(np.concatenate([a.data, b.data], axis=1), (a, b), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    out, shape = gap_forward(x.data)

    def bwd(g):
        return (gap_backward(g, shape),)

    return Tensor(out, (x,), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError("sub shape mismatch")

    def bwd(g):
        return g, -g

    return Tensor(a.data - b.data, (a, b), bwd)


def norm_rows(x: Tensor) -> Tensor:
    out, cache = norm_rows_forward(x.data)

    def bwd(g):
        return (norm_rows_backward(g, cache),)

    return Tensor(out, (x,), bwd)


def weighted_sum_mean(a: Tensor, b: Tensor, ca: float, cb: float) -> Tensor:
    """mean(ca*a + cb*b) over matching 1-d tensors, float64 accumulation."""
    if a.data.shape != b.data.shape or a.data.ndim != 1:
        raise ValueError("weighted_sum_mean wants matching 1-d tensors")
    n = a.data.shape[0]
    val = (ca * np.sum(a.data, dtype=np.float64) + cb * np.sum(b.data, dtype=np.float64)) / n

    def bwd(g):
        ga = np.full(a.data.shape, g * ca / n, dtype=np.float32)
        gb = np.full(b.data.shape, g * cb / n, dtype=np.float32)
        return ga, gb

    return Tensor(np.float32(val), (a, b), bwd)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Per-parameter first/second-moment adaptive steps."""

    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict, lr=None) -> None:
        self.t += 1
        lr = self.lr if lr is None else lr
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for k, p in params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= np.float32(lr) * (m / bc1) / (np.sqrt(v / bc2) + np.float32(self.eps))
