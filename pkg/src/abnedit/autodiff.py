"""Dense tensors with reverse-mode automatic differentiation.

Just enough machinery to express the network forward pass and its losses:
conv2d, relu/sigmoid, broadcast add/mul, global average pooling, linear,
softmax cross entropy, and a batch-averaged L2 distance. Storage is
float32 by default; float64 arrays are kept as-is so gradient checks can
run in double precision through the identical code path.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from . import kernels

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-d float array that participates in the autodiff graph.

    grad is allocated on demand during backward() and accumulates across
    calls until explicitly cleared (the optimizer step clears it).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.data.dtype, copy=False).reshape(self.data.shape)

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other if isinstance(other, Tensor) else Tensor(other))

    def __mul__(self, other):
        return mul(self, other if isinstance(other, Tensor) else Tensor(other))

    __radd__ = __add__
    __rmul__ = __mul__

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _result(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting; grads sum-reduce over broadcast axes."""
    _check_broadcast(a, b)
    out_data = a.data + b.data

    def backward(out):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(out.grad, b.shape))

    return _result(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with broadcasting (e.g. a 1-channel map scaling C channels)."""
    _check_broadcast(a, b)
    out_data = a.data * b.data

    def backward(out):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(out.grad * a.data, b.shape))

    return _result(out_data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)

    def backward(out):
        if x.requires_grad:
            x.accumulate_grad(out.grad * (x.data > 0))

    return _result(out_data, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    # stable in both tails
    d = x.data
    out_data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                        np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d)))).astype(d.dtype)

    def backward(out):
        if x.requires_grad:
            x.accumulate_grad(out.grad * out_data * (1.0 - out_data))

    return _result(out_data, (x,), backward)


def tsum(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    out_data = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(out):
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(out.grad, x.shape))

    return _result(out_data, (x,), backward)


def take_rows(x: Tensor, indices) -> Tensor:
    """Select rows along axis 0; backward scatter-adds into the source."""
    idx = np.asarray(indices, dtype=np.intp)
    out_data = x.data[idx]

    def backward(out):
        if x.requires_grad:
            g = np.zeros_like(x.data)
            np.add.at(g, idx, out.grad)
            x.accumulate_grad(g)

    return _result(out_data, (x,), backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation, NCHW layout.

    x[N,C,H,W] * weight[F,C,kH,kW] + bias[F] -> [N,F,H',W'] with
    H' = (H + 2*pad - kH)//stride + 1.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    f, wc, kh, kw = weight.shape
    if wc != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {wc}")
    if bias.shape != (f,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match {f} filters")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ValueError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}"
        )
    xd = np.ascontiguousarray(x.data)
    wd = np.ascontiguousarray(weight.data)
    out_data = kernels.conv2d_forward(xd, wd, stride, pad)
    out_data += bias.data.reshape(1, f, 1, 1)

    def backward(out):
        gy = np.ascontiguousarray(out.grad)
        if bias.requires_grad:
            bias.accumulate_grad(gy.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            weight.accumulate_grad(
                kernels.conv2d_backward_weight(gy, xd, kh, kw, stride, pad)
            )
        if x.requires_grad:
            x.accumulate_grad(
                kernels.conv2d_backward_input(gy, wd, h, w, stride, pad)
            )

    return _result(out_data, (x, weight, bias), backward)


def global_average_pool(x: Tensor) -> Tensor:
    """Mean over each HxW plane: [N,C,H,W] -> [N,C]."""
    if x.data.ndim != 4:
        raise ValueError(f"global_average_pool expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    out_data = x.data.mean(axis=(2, 3))

    def backward(out):
        if x.requires_grad:
            g = out.grad.reshape(n, c, 1, 1) / (h * w)
            x.accumulate_grad(np.broadcast_to(g, x.shape))

    return _result(out_data, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x[N,D] @ weight[D,C] + bias[C]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ValueError(f"linear expects 2-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear shape mismatch: {x.shape} @ {weight.shape}")
    out_data = x.data @ weight.data + bias.data

    def backward(out):
        if x.requires_grad:
            x.accumulate_grad(out.grad @ weight.data.T)
        if weight.requires_grad:
            weight.accumulate_grad(x.data.T @ out.grad)
        if bias.requires_grad:
            bias.accumulate_grad(out.grad.sum(axis=0))

    return _result(out_data, (x, weight, bias), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-stabilized.

    Internal accumulation is float64 regardless of storage dtype.
    """
    labels = np.asarray(labels, dtype=np.intp)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsumexp - z[np.arange(n), labels]))
    out_data = np.asarray(loss, dtype=logits.dtype)

    def backward(out):
        if logits.requires_grad:
            p = np.exp(z - logsumexp[:, None])
            p[np.arange(n), labels] -= 1.0
            logits.accumulate_grad(float(out.grad) * p / n)

    return _result(out_data, (logits,), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Plain (non-graph) stabilized softmax over the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def l2_norm_loss(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distance ||a - b||_2, batch-averaged.

    Inputs of rank >= 3 are treated as a batch along axis 0 (one norm per
    sample, then the mean); rank 1 or 2 inputs are a single sample.
    """
    if a.shape != b.shape:
        raise ValueError(f"l2_norm_loss shape mismatch: {a.shape} vs {b.shape}")
    batched = a.data.ndim >= 3
    n = a.shape[0] if batched else 1
    diff = (a.data - b.data).astype(np.float64).reshape(n, -1)
    norms = np.sqrt((diff * diff).sum(axis=1))
    out_data = np.asarray(norms.mean(), dtype=a.dtype)

    def backward(out):
        # d||d||/dd = d/||d||; guard the nondifferentiable point at d = 0
        scale = float(out.grad) / (n * np.maximum(norms, 1e-12))
        g = (diff * scale[:, None]).reshape(a.shape)
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(-g)

    return _result(out_data, (a, b), backward)


def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad ancestor of a scalar loss.

    Grads accumulate across calls; callers reset via the optimizer step
    or zero_grad().
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node)


@dataclass
class OptimizerState:
    """SGD-with-momentum state: one velocity buffer per registered parameter."""

    learning_rate: float
    momentum: float
    velocity: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, learning_rate, momentum=0.0):
        if learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {learning_rate}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        return cls(learning_rate, momentum,
                   [np.zeros_like(p.data) for p in params])


def sgd_step(params, state: OptimizerState) -> None:
    """v <- momentum*v - lr*grad; p <- p + v; grads cleared afterwards."""
    if len(params) != len(state.velocity):
        raise ValueError(f"{len(params)} params vs {len(state.velocity)} velocity buffers")
    for p, v in zip(params, state.velocity):
        if p.grad is None:
            raise ValueError("sgd_step: parameter has no gradient (backward not run?)")
        if v.shape != p.data.shape:
            raise ValueError(f"velocity shape {v.shape} does not match param {p.data.shape}")
        v *= state.momentum
        v -= state.learning_rate * p.grad
        p.data += v
        p.grad = None


def gradient_check(build_loss, tensors, eps=1e-4, rtol=1e-4):
    """Compare analytic grads with central finite differences.

    build_loss maps the given tensors to a scalar Tensor. Tensors should
    hold float64 data. Returns the max relative error across all entries;
    raises if any tensor a grad was expected for ended up without one.
    """
    for t in tensors:
        t.zero_grad()
    loss = build_loss(*tensors)
    backward(loss)
    analytic = []
    for t in tensors:
        if t.requires_grad and t.grad is None:
            raise AssertionError("requires_grad tensor left without grad after backward()")
        analytic.append(None if t.grad is None else t.grad.copy())

    worst = 0.0
    for t, a in zip(tensors, analytic):
        if a is None:
            continue
        flat = t.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                up = float(build_loss(*tensors).data)
            flat[i] = orig - eps
            with no_grad():
                down = float(build_loss(*tensors).data)
            flat[i] = orig
            num[i] = (up - down) / (2 * eps)
        af = a.reshape(-1)
        rel = np.abs(af - num) / np.maximum.reduce([np.abs(af), np.abs(num),
                                                    np.ones_like(num)])
        worst = max(worst, float(rel.max()))
    return worst
