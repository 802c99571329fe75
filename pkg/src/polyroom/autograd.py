"""Minimal reverse-mode autodiff over dense float64 arrays.

Tensors wrap numpy arrays and record a closure-based tape; backward() does
a deterministic reverse topological sweep. Everything is f64 so finite
difference checks can be tight. There is no broadcasting beyond bias-add;
shapes must match exactly or an op raises ShapeError.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from .errors import ContractError, ShapeError

_ids = itertools.count()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "id", "name")

    def __init__(self, data, requires_grad=False, _prev=(), name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev = tuple(_prev)
        self._backward = None
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def accumulate(self, g) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ContractError("backward() without grad needs a scalar root")
            grad = np.ones_like(self.data)
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if node.id in visited:
                continue
            visited.add(node.id)
            stack.append((node, True))
            for child in node._prev:
                if child.id not in visited:
                    stack.append((child, False))
        self.grad = np.asarray(grad, dtype=np.float64).reshape(self.data.shape)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(data, parents, backward) -> Tensor:
    """Internal node constructor; drops the tape when no parent needs grads."""
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    out = Tensor(data, requires_grad=True, _prev=parents)
    out._backward = backward
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise --------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(-g)

    return _make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * b.data)
        if b.requires_grad:
            b.accumulate(g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")

    def backward(g):
        if a.requires_grad:
            a.accumulate(g / b.data)
        if b.requires_grad:
            b.accumulate(-g * a.data / (b.data * b.data))

    return _make(a.data / b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a.accumulate(-g)

    return _make(-a.data, (a,), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        a.accumulate(g * s)

    return _make(a.data * s, (a,), backward)


def shift(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        a.accumulate(g)

    return _make(a.data + s, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        a.accumulate(g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        a.accumulate(g * y * (1.0 - y))

    return _make(y, (a,), backward)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def backward(g):
        a.accumulate(g * y)

    return _make(y, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        a.accumulate(g / a.data)

    return _make(np.log(a.data), (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)

    def backward(g):
        a.accumulate(g * 0.5 / y)

    return _make(y, (a,), backward)


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)

    def backward(g):
        a.accumulate(g * sign)

    return _make(np.abs(a.data), (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        a.accumulate(g * mask)

    return _make(np.clip(a.data, lo, hi), (a,), backward)


# -- shape manipulation -------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape

    def backward(g):
        a.accumulate(g.reshape(old))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        a.accumulate(np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), backward)


def concat(parts, axis: int = 0) -> Tensor:
    parts = list(parts)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(int(lo), int(hi))
                p.accumulate(g[tuple(sl)])

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward)


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[sl] = g
        a.accumulate(buf)

    return _make(a.data[sl].copy(), (a,), backward)


def index_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        a.accumulate(buf)

    return _make(a.data[idx].copy(), (a,), backward)


# -- reductions ---------------------------------------------------------------

def sum_(a: Tensor, axis=None) -> Tensor:
    def backward(g):
        if axis is None:
            a.accumulate(np.full_like(a.data, float(g)))
        else:
            a.accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _make(np.sum(a.data, axis=axis), (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        cnt = a.size
    else:
        cnt = a.shape[axis]

    def backward(g):
        if axis is None:
            a.accumulate(np.full_like(a.data, float(g) / cnt))
        else:
            a.accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape) / cnt)

    return _make(np.mean(a.data, axis=axis), (a,), backward)


def l1(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference."""
    return mean(absolute(sub(a, b)))


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim == b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    elif a.ndim == b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    else:
        raise ShapeError(f"matmul wants matching 2D or 3D operands, got {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            b.accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _make(np.matmul(a.data, b.data), (a, b), backward)


def bias_add(a: Tensor, b: Tensor) -> Tensor:
    if b.ndim != 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias_add: {a.shape} + {b.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g.reshape(-1, b.shape[0]).sum(axis=0))

    return _make(a.data + b.data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor = None) -> Tensor:
    """x @ w (+ b) applied along the last axis of x."""
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    y = matmul(flat, w)
    if b is not None:
        y = bias_add(y, b)
    if x.ndim != 2:
        y = reshape(y, lead + (w.shape[1],))
    return y


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        a.accumulate((g - dot) * y)

    return _make(y, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm: gain/bias must match the last axis")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    var = np.var(x.data, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def backward(g):
        if gain.requires_grad:
            gain.accumulate(np.sum(g * xhat, axis=tuple(range(g.ndim - 1))))
        if bias.requires_grad:
            bias.accumulate(np.sum(g, axis=tuple(range(g.ndim - 1))))
        if x.requires_grad:
            gx = g * gain.data
            m1 = np.mean(gx, axis=-1, keepdims=True)
            m2 = np.mean(gx * xhat, axis=-1, keepdims=True)
            x.accumulate(inv * (gx - m1 - xhat * m2))

    return _make(xhat * gain.data + bias.data, (x, gain, bias), backward)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over (B, T, d) operands."""
    if not (q.ndim == k.ndim == v.ndim == 3):
        raise ShapeError("scaled_dot_attention wants (B, T, d) operands")
    if q.shape[-1] != k.shape[-1] or k.shape[:2] != v.shape[:2]:
        raise ShapeError(
            f"scaled_dot_attention: {q.shape} x {k.shape} x {v.shape}"
        )
    s = 1.0 / math.sqrt(q.shape[-1])
    scores = scale(matmul(q, transpose(k, (0, 2, 1))), s)
    att = softmax(scores, axis=-1)
    return matmul(att, v)


# -- structured ops -----------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2D convolution on one (H, W, Cin) image with a (kh, kw, Cin, Cout) kernel."""
    if x.ndim != 3 or w.ndim != 4 or x.shape[2] != w.shape[2]:
        raise ShapeError(f"conv2d: x {x.shape} vs kernel {w.shape}")
    kh, kw, cin, cout = w.shape
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0)))
    hp, wp = xp.shape[:2]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d: kernel larger than padded input")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    win = win[::stride, ::stride]  # (ho, wo, cin, kh, kw)
    out = np.tensordot(win, w.data, axes=([2, 3, 4], [2, 0, 1])) + b.data

    def backward(g):
        if w.requires_grad:
            gw = np.tensordot(win, g, axes=([0, 1], [0, 1]))  # (cin, kh, kw, cout)
            w.accumulate(np.transpose(gw, (1, 2, 0, 3)))
        if b.requires_grad:
            b.accumulate(g.sum(axis=(0, 1)))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(g, w.data[i, j], axes=([2], [1]))
                    gxp[i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib
            if pad > 0:
                gxp = gxp[pad:-pad, pad:-pad]
            x.accumulate(gxp)

    return _make(out, (x, w, b), backward)


def bilinear_sample(grid: Tensor, points: Tensor) -> Tensor:
    """Sample a (H, W, C) grid at (P, 2) normalized [0, 1] points.

    x maps to column x * (W - 1), y to row y * (H - 1), align-corners style.
    Points are clamped to the border; the point gradient is zero in any
    clamped direction.
    """
    if grid.ndim != 3 or points.ndim != 2 or points.shape[1] != 2:
        raise ShapeError(f"bilinear_sample: grid {grid.shape}, points {points.shape}")
    h, w, c = grid.shape
    gx = points.data[:, 0] * (w - 1)
    gy = points.data[:, 1] * (h - 1)
    in_x = (gx >= 0.0) & (gx <= w - 1)
    in_y = (gy >= 0.0) & (gy <= h - 1)
    gx = np.clip(gx, 0.0, w - 1)
    gy = np.clip(gy, 0.0, h - 1)
    x0 = np.minimum(np.floor(gx).astype(np.int64), w - 2) if w > 1 else np.zeros_like(gx, dtype=np.int64)
    y0 = np.minimum(np.floor(gy).astype(np.int64), h - 2) if h > 1 else np.zeros_like(gy, dtype=np.int64)
    fx = (gx - x0)[:, None]
    fy = (gy - y0)[:, None]
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    g00 = grid.data[y0, x0]
    g01 = grid.data[y0, x1]
    g10 = grid.data[y1, x0]
    g11 = grid.data[y1, x1]
    out = (
        g00 * (1 - fx) * (1 - fy)
        + g01 * fx * (1 - fy)
        + g10 * (1 - fx) * fy
        + g11 * fx * fy
    )

    def backward(g):
        if grid.requires_grad:
            buf = np.zeros((h * w, c))
            np.add.at(buf, y0 * w + x0, g * (1 - fx) * (1 - fy))
            np.add.at(buf, y0 * w + x1, g * fx * (1 - fy))
            np.add.at(buf, y1 * w + x0, g * (1 - fx) * fy)
            np.add.at(buf, y1 * w + x1, g * fx * fy)
            grid.accumulate(buf.reshape(h, w, c))
        if points.requires_grad:
            dgx = np.sum(g * ((g01 - g00) * (1 - fy) + (g11 - g10) * fy), axis=1)
            dgy = np.sum(g * ((g10 - g00) * (1 - fx) + (g11 - g01) * fx), axis=1)
            gp = np.zeros_like(points.data)
            gp[:, 0] = dgx * (w - 1) * in_x
            gp[:, 1] = dgy * (h - 1) * in_y
            points.accumulate(gp)

    return _make(out, (grid, points), backward)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of (T, C) logits against integer class targets."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy wants (T, C) logits, got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy: targets must be (T,) ints")
    z = logits.data - np.max(logits.data, axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    n = t.shape[0]
    loss = -np.mean(np.log(p[np.arange(n), t] + 1e-300))

    def backward(g):
        gp = p.copy()
        gp[np.arange(n), t] -= 1.0
        logits.accumulate(float(g) * gp / n)

    return _make(loss, (logits,), backward)


# -- verification -------------------------------------------------------------

def grad_check(f, inputs, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    f must rebuild its graph from the current values of `inputs` and return
    a scalar Tensor. Error is |analytic - numeric| / max(1, |numeric|),
    maximized over every coordinate of every input.
    """
    inputs = list(inputs)
    out = f()
    if out.size != 1:
        raise ContractError("grad_check needs a scalar-valued closure")
    for t in inputs:
        t.zero_grad()
    out = f()
    out.backward()
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs
    ]
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            err = abs(gflat[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    for t in inputs:
        t.zero_grad()
    return worst


def global_grad_norm(tensors) -> float:
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float(np.sum(t.grad * t.grad))
    return math.sqrt(total)
