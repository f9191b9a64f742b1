"""Minimal reverse-mode autodiff over numpy arrays.

Only the operations the mask VAE needs: 3D convolution and its transpose,
dense layers, activations, and fused likelihood/KL terms. Values are plain
ndarrays; `Var` records the graph; `backward` walks it once in reverse
topological order, accumulating (+=) into leaf gradient buffers so
gradient accumulation across micro-batches is just "don't zero".

Spatial ops accept a single sample (C,D,H,W) or a batch (N,C,D,H,W).
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import ShapeMismatch


class Var:
    """Graph node: value + parents + a closure that routes gradients back."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward_fn=None, grad_buf=None):
        self.data = np.asarray(data)
        self.grad = grad_buf
        self._parents = tuple(parents)
        self._backward = backward_fn

    @property
    def shape(self):
        return self.data.shape

    def accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # small arithmetic surface, enough to compose losses
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return scale(self, other) if np.isscalar(other) else mul(self, other)

    __rmul__ = __mul__


def backward(root: Var) -> None:
    """Reverse-mode sweep from a scalar root; accumulates into leaf grads."""
    if root.data.size != 1:
        raise ShapeMismatch("backward expects a scalar loss")
    order = []
    seen = set()
    stack = [(root, False)]
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
    if root.grad is None:
        root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise / shape ops
# ---------------------------------------------------------------------------

def add(a: Var, b: Var) -> Var:
    if a.shape != b.shape:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")

    def back(g):
        a.accum(g)
        b.accum(g)

    return Var(a.data + b.data, (a, b), back)


def mul(a: Var, b: Var) -> Var:
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}")

    def back(g):
        a.accum(g * b.data)
        b.accum(g * a.data)

    return Var(a.data * b.data, (a, b), back)


def scale(a: Var, c: float) -> Var:
    def back(g):
        a.accum(g * c)

    return Var(a.data * c, (a,), back)


def vsum(a: Var) -> Var:
    def back(g):
        a.accum(np.full_like(a.data, float(g)))

    return Var(np.asarray(a.data.sum()), (a,), back)


def reshape(a: Var, shape) -> Var:
    def back(g):
        a.accum(g.reshape(a.shape))

    return Var(a.data.reshape(shape), (a,), back)


def leaky_relu(a: Var, slope: float = 0.01) -> Var:
    pos = a.data > 0

    def back(g):
        a.accum(np.where(pos, g, slope * g))

    return Var(np.where(pos, a.data, slope * a.data), (a,), back)


def sigmoid(a: Var) -> Var:
    out = stable_sigmoid(a.data)

    def back(g):
        a.accum(g * out * (1.0 - out))

    return Var(out, (a,), back)


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Branching form: never exponentiates a large positive argument."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def clamp(a: Var, lo: float, hi: float) -> Var:
    inside = (a.data > lo) & (a.data < hi)

    def back(g):
        a.accum(np.where(inside, g, 0.0))

    return Var(np.clip(a.data, lo, hi), (a,), back)


def slice_last(a: Var, start: int, stop: int) -> Var:
    """a[..., start:stop] with scatter-back gradient."""

    def back(g):
        gz = np.zeros_like(a.data)
        gz[..., start:stop] = g
        a.accum(gz)

    return Var(a.data[..., start:stop].copy(), (a,), back)


# ---------------------------------------------------------------------------
# dense / conv ops
# ---------------------------------------------------------------------------

def linear(x: Var, w: Var, b: Var) -> Var:
    """w @ x + b for a single vector, or x @ w.T + b for a batch (N,F)."""
    single = x.data.ndim == 1
    xd = x.data[None, :] if single else x.data
    if xd.shape[1] != w.shape[1] or w.shape[0] != b.shape[0]:
        raise ShapeMismatch(f"linear: x {x.shape}, w {w.shape}, b {b.shape}")
    out = xd @ w.data.T + b.data

    def back(g):
        gd = g[None, :] if single else g
        x.accum((gd @ w.data).reshape(x.shape))
        w.accum(gd.T @ xd)
        b.accum(gd.sum(axis=0))

    return Var(out[0] if single else out, (x, w, b), back)


def _normalize_batch(x: Var):
    if x.data.ndim == 4:
        return x.data[None], True
    if x.data.ndim == 5:
        return x.data, False
    raise ShapeMismatch(f"expected 4D or 5D input, got {x.data.ndim}D")


def conv3d(x: Var, w: Var, b: Var, stride: int = 1, pad: int = 0) -> Var:
    """Cross-correlation with zero padding, kernel (C_out, C_in, k, k, k)."""
    xd, single = _normalize_batch(x)
    k = w.shape[2]
    if k % 2 != 1:
        raise ShapeMismatch("kernel extent must be odd")
    if xd.shape[1] != w.shape[1] or w.shape[0] != b.shape[0]:
        raise ShapeMismatch(f"conv3d: x {x.shape}, w {w.shape}, b {b.shape}")
    if any(kernels.conv_out_extent(n, k, stride, pad) < 1 for n in xd.shape[2:]):
        raise ShapeMismatch(f"conv3d: output extent < 1 for input {x.shape}")
    out = kernels.conv3d_forward(xd, w.data, stride, pad)
    out += b.data[None, :, None, None, None]

    def back(g):
        gd = g[None] if single else g
        outpad = tuple(
            nin - kernels.tconv_out_extent(nout, k, stride, pad, 0)
            for nin, nout in zip(xd.shape[2:], gd.shape[2:])
        )
        gx = kernels.conv3d_transpose_forward(gd, w.data, stride, pad, outpad)
        x.accum(gx[0] if single else gx)
        w.accum(kernels.conv3d_weight_grad(xd, gd, k, stride, pad))
        b.accum(gd.sum(axis=(0, 2, 3, 4)))

    return Var(out[0] if single else out, (x, w, b), back)


def conv3d_transpose(
    x: Var, w: Var, b: Var, stride: int = 1, pad: int = 0, output_padding: int = 0
) -> Var:
    """Linear adjoint of conv3d (same kernel layout); input has C_out channels."""
    xd, single = _normalize_batch(x)
    k = w.shape[2]
    if xd.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"conv3d_transpose: x {x.shape}, w {w.shape}, b {b.shape}")
    if output_padding >= stride and stride > 1:
        raise ShapeMismatch("output_padding must be < stride")
    out = kernels.conv3d_transpose_forward(xd, w.data, stride, pad, output_padding)
    out += b.data[None, :, None, None, None]

    def back(g):
        gd = g[None] if single else g
        gx = kernels.conv3d_forward(gd, w.data, stride, pad)
        x.accum(gx[0] if single else gx)
        w.accum(kernels.conv3d_weight_grad(gd, xd, k, stride, pad))
        b.accum(gd.sum(axis=(0, 2, 3, 4)))

    return Var(out[0] if single else out, (x, w, b), back)


# ---------------------------------------------------------------------------
# fused probabilistic terms
# ---------------------------------------------------------------------------

def bernoulli_nll_terms(probs: Var, target: np.ndarray) -> Var:
    """Per-sample negative Bernoulli log-likelihood, summed over voxels.

    probs: (N, ...) in (0,1) (clamp first); target: binary, same shape.
    Returns a (N,) Var.
    """
    p = probs.data
    if p.shape != target.shape:
        raise ShapeMismatch(f"nll: probs {p.shape} vs target {target.shape}")
    t = target.astype(p.dtype)
    axes = tuple(range(1, p.ndim))
    val = -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).sum(axis=axes)

    def back(g):
        gexp = g.reshape((-1,) + (1,) * (p.ndim - 1))
        probs.accum(gexp * (-(t / p) + (1.0 - t) / (1.0 - p)))

    return Var(val, (probs,), back)


def bernoulli_nll_logits_terms(logits: Var, target: np.ndarray, clamp_eps: float) -> Var:
    """Per-sample Bernoulli NLL straight from decoder logits.

    The value matches bernoulli_nll on sigmoid probabilities clamped to
    [eps, 1-eps]; the gradient is the exact unclamped form (p - x), so
    saturated voxels keep a recovery gradient instead of going dead.
    """
    x = logits.data
    if x.shape != target.shape:
        raise ShapeMismatch(f"nll: logits {x.shape} vs target {target.shape}")
    p = stable_sigmoid(x)
    pc = np.clip(p, clamp_eps, 1.0 - clamp_eps)
    t = target.astype(x.dtype)
    axes = tuple(range(1, x.ndim))
    val = -(t * np.log(pc) + (1.0 - t) * np.log1p(-pc)).sum(axis=axes)

    def back(g):
        gexp = g.reshape((-1,) + (1,) * (x.ndim - 1))
        logits.accum(gexp * (p - t))

    return Var(val, (logits,), back)


def kl_gaussian_terms(mu: Var, logvar: Var) -> Var:
    """Per-sample KL(N(mu, diag exp(logvar)) || N(0, I)); (N,L) -> (N,)."""
    m, lv = mu.data, logvar.data
    ev = np.exp(lv)
    val = 0.5 * (m * m + ev - 1.0 - lv).sum(axis=-1)

    def back(g):
        gexp = g[..., None]
        mu.accum(gexp * m)
        logvar.accum(gexp * 0.5 * (ev - 1.0))

    return Var(val, (mu, logvar), back)


def reparameterize_var(mu: Var, logvar: Var, eps: np.ndarray) -> Var:
    """z = mu + exp(logvar/2) * eps with eps held fixed."""
    sd = np.exp(0.5 * logvar.data)

    def back(g):
        mu.accum(g)
        logvar.accum(g * 0.5 * sd * eps)

    return Var(mu.data + sd * eps, (mu, logvar), back)
