"""Reverse-mode autodiff over numpy arrays, small dense MLPs, positional
encoding with a coarse-to-fine window, and the Adam update.

The graph is a plain expression DAG: every operation returns a Var holding the
forward value and a closure that routes the incoming gradient to its parents.
Leaves are ParamTensors (persistent ``grad`` accumulators) or constants.
Everything is float64; backward accumulates with ``+=`` so repeated backward
passes without zeroing double the gradients by contract.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np


class StaleTraceError(RuntimeError):
    """Raised when backward runs over a trace built from outdated parameters."""


class ParamTensor:
    """Named trainable tensor with a persistent gradient accumulator."""

    __slots__ = ("name", "values", "grad", "version")

    def __init__(self, name: str, values):
        self.name = name
        self.values = np.array(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        self.version = 0

    @property
    def shape(self):
        return self.values.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def assign(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.values.shape:
            raise ValueError(f"shape mismatch for {self.name}: {values.shape} vs {self.values.shape}")
        self.values = values.copy()
        self.version += 1

    def __repr__(self):
        return f"ParamTensor({self.name}, shape={self.values.shape})"


class Var:
    """Node in the evaluation trace."""

    __slots__ = ("value", "requires_grad", "_parents", "_backward", "grad", "_param", "_version")

    def __init__(self, value, parents=(), backward=None, requires_grad=None, param=None):
        self.value = np.asarray(value, dtype=np.float64)
        self._parents = parents
        self._backward = backward
        self._param = param
        self._version = param.version if param is not None else 0
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def as_var(x) -> Var:
    if isinstance(x, Var):
        return x
    return Var(x, requires_grad=False)


def leaf(param: ParamTensor) -> Var:
    """Graph leaf bound to a ParamTensor; backward accumulates into param.grad."""
    return Var(param.values, requires_grad=True, param=param)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b):
    a, b = as_var(a), as_var(b)
    return Var(a.value + b.value, (a, b),
               lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_var(a), as_var(b)
    return Var(a.value - b.value, (a, b),
               lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_var(a), as_var(b)
    return Var(a.value * b.value, (a, b),
               lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def div(a, b):
    a, b = as_var(a), as_var(b)
    inv = 1.0 / b.value
    out = a.value * inv
    return Var(out, (a, b),
               lambda g: (_unbroadcast(g * inv, a.shape),
                          _unbroadcast(-g * out * inv, b.shape)))


def matmul(a, b):
    a, b = as_var(a), as_var(b)
    if a.value.ndim == 2 and a.value.shape[0] == 1:
        # single-row products route through a different BLAS kernel than
        # multi-row ones; padding keeps batch-of-1 bit-identical to batches
        out = (np.concatenate([a.value, np.zeros_like(a.value)]) @ b.value)[:1]
    else:
        out = a.value @ b.value
    return Var(out, (a, b),
               lambda g: (g @ b.value.T, a.value.T @ g))


def exp(a):
    a = as_var(a)
    out = np.exp(a.value)
    return Var(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_var(a)
    return Var(np.log(a.value), (a,), lambda g: (g / a.value,))


def sin(a):
    a = as_var(a)
    return Var(np.sin(a.value), (a,), lambda g: (g * np.cos(a.value),))


def cos(a):
    a = as_var(a)
    return Var(np.cos(a.value), (a,), lambda g: (-g * np.sin(a.value),))


def sqrt(a):
    a = as_var(a)
    out = np.sqrt(a.value)
    return Var(out, (a,), lambda g: (g * (0.5 / out),))


def square(a):
    a = as_var(a)
    return Var(a.value * a.value, (a,), lambda g: (g * (2.0 * a.value),))


def relu(a):
    a = as_var(a)
    mask = a.value > 0
    return Var(a.value * mask, (a,), lambda g: (g * mask,))


def softplus(a):
    """log(1 + e^x), overflow-safe; derivative is the logistic sigmoid."""
    a = as_var(a)
    x = a.value
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = 1.0 / (1.0 + np.exp(-x))
    return Var(out, (a,), lambda g: (g * sig,))


def sigmoid(a):
    a = as_var(a)
    out = 1.0 / (1.0 + np.exp(-a.value))
    return Var(out, (a,), lambda g: (g * out * (1.0 - out),))


def absolute(a):
    a = as_var(a)
    s = np.sign(a.value)
    return Var(np.abs(a.value), (a,), lambda g: (g * s,))


def vsum(a, axis=None, keepdims=False):
    a = as_var(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Var(out, (a,), back)


def vmean(a, axis=None, keepdims=False):
    a = as_var(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(vsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def cumsum(a, axis):
    a = as_var(a)

    def back(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return Var(np.cumsum(a.value, axis=axis), (a,), back)


def concat(parts, axis):
    parts = [as_var(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
                     for i in range(len(parts)))

    return Var(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), back)


def getitem(a, key):
    a = as_var(a)

    def back(g):
        out = np.zeros(a.shape)
        np.add.at(out, key, g)
        return (out,)

    return Var(a.value[key], (a,), back)


def reshape(a, shape):
    a = as_var(a)
    return Var(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def repeat(a, repeats, axis):
    """np.repeat with uniform repeat count (used to spread per-ray values to samples)."""
    a = as_var(a)

    def back(g):
        new_shape = list(a.shape)
        new_shape.insert(axis + 1, repeats)
        return (g.reshape(new_shape).sum(axis=axis + 1),)

    return Var(np.repeat(a.value, repeats, axis=axis), (a,), back)


def stack_cols(parts):
    """Stack 1-d vars of equal length into a (n, k) matrix."""
    return concat([reshape(p, (-1, 1)) for p in parts], axis=1)


def rodrigues_coefficients(theta_sq):
    """A = sin(t)/t, B = (1-cos t)/t^2, C = (t-sin t)/t^3 as functions of u = t^2.

    All three are entire functions of u, so the derivative w.r.t. u is smooth at
    zero; series branches keep both value and derivative accurate there.
    """
    u_var = as_var(theta_sq)
    u = u_var.value
    small = u < 1e-4
    u_safe = np.where(small, 1.0, u)
    t = np.sqrt(u_safe)
    sin_t, cos_t = np.sin(t), np.cos(t)
    u2 = u * u

    a = np.where(small, 1.0 - u / 6.0 + u2 / 120.0 - u * u2 / 5040.0, sin_t / t)
    b = np.where(small, 0.5 - u / 24.0 + u2 / 720.0 - u * u2 / 40320.0, (1.0 - cos_t) / u_safe)
    c = np.where(small, 1.0 / 6.0 - u / 120.0 + u2 / 5040.0 - u * u2 / 362880.0,
                 (t - sin_t) / (u_safe * t))

    da = np.where(small, -1.0 / 6.0 + u / 60.0 - u2 / 1680.0,
                  (t * cos_t - sin_t) / (2.0 * u_safe * t))
    db = np.where(small, -1.0 / 24.0 + u / 360.0 - u2 / 13440.0,
                  (t * sin_t - 2.0 * (1.0 - cos_t)) / (2.0 * u_safe * u_safe))
    dc = np.where(small, -1.0 / 120.0 + u / 2520.0 - u2 / 120960.0,
                  (3.0 * sin_t - t * cos_t - 2.0 * t) / (2.0 * u_safe * u_safe * t))

    va = Var(a, (u_var,), lambda g: (g * da,))
    vb = Var(b, (u_var,), lambda g: (g * db,))
    vc = Var(c, (u_var,), lambda g: (g * dc,))
    return va, vb, vc


# ---------------------------------------------------------------------------
# positional encoding


@dataclass
class PosEncConfig:
    """Sinusoidal encoding with L frequencies per axis and window position alpha.

    alpha in [0, L] eases frequency j in with weight
    w_j = (1 - cos(pi * clamp(alpha - j, 0, 1))) / 2; alpha = L is the full
    encoding, alpha = 0 keeps only the identity passthrough.
    """

    L: int
    alpha: float | None = None  # None = fully open window
    include_identity: bool = True

    def __post_init__(self):
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.alpha is not None and not (0 <= self.alpha <= self.L):
            raise ValueError("alpha must lie in [0, L]")

    def window(self) -> np.ndarray:
        if self.alpha is None:
            return np.ones(self.L)
        j = np.arange(self.L, dtype=np.float64)
        x = np.clip(self.alpha - j, 0.0, 1.0)
        return (1.0 - np.cos(np.pi * x)) / 2.0

    def out_dim(self, in_dim: int) -> int:
        return (in_dim if self.include_identity else 0) + 2 * self.L * in_dim


def posenc(x, cfg: PosEncConfig):
    """[x, w_0 sin(2^0 pi x), w_0 cos(2^0 pi x), ..., w_{L-1} sin, w_{L-1} cos].

    Accepts an (n, d) ndarray (returns ndarray) or Var (returns Var); a single
    primitive with an analytic backward keeps the trace small.
    """
    is_var = isinstance(x, Var)
    xv = x.value if is_var else np.asarray(x, dtype=np.float64)
    n, d = xv.shape
    window = cfg.window()
    freqs = (2.0 ** np.arange(cfg.L)) * np.pi
    ang = xv[:, None, :] * freqs[:, None]          # (n, L, d)
    s = np.sin(ang) * window[:, None]
    c = np.cos(ang) * window[:, None]
    blocks = np.concatenate([s[:, :, None, :], c[:, :, None, :]], axis=2).reshape(n, 2 * cfg.L * d)
    out = np.concatenate([xv, blocks], axis=1) if cfg.include_identity else blocks
    if not is_var:
        return out

    def back(g):
        if cfg.include_identity:
            g_id, g_f = g[:, :d], g[:, d:]
        else:
            g_id, g_f = 0.0, g
        g_f = g_f.reshape(n, cfg.L, 2, d)
        coeff = (g_f[:, :, 0, :] * c - g_f[:, :, 1, :] * s) * freqs[:, None]
        gx = coeff.sum(axis=1)
        if cfg.include_identity:
            gx = gx + g_id
        return (gx,)

    return Var(out, (x,), back)


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root: Var) -> list[Var]:
    order: list[Var] = []
    visited: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(output: Var, output_grad=None):
    """Reverse pass from ``output``; accumulates into every reachable
    ParamTensor.grad and sets .grad on every visited Var (inputs included)."""
    if not output.requires_grad:
        return
    if output_grad is None:
        output_grad = np.ones_like(output.value)
    grads: dict[int, np.ndarray] = {id(output): np.broadcast_to(
        np.asarray(output_grad, dtype=np.float64), output.shape).copy()}
    order = _toposort(output)
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._param is not None or node._backward is None:
            # .grad is only kept where it is observable: parameter leaves and
            # graph inputs; intermediates would just burn memory
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad += g
        if node._param is not None:
            if node._version != node._param.version:
                raise StaleTraceError(
                    f"trace is stale: {node._param.name} changed since the forward pass")
            node._param.grad += g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] += pg
            else:
                grads[id(p)] = np.asarray(pg, dtype=np.float64)


# ---------------------------------------------------------------------------
# dense network


class Mlp:
    """Fully connected net with ReLU hidden activations and a linear output.

    Output heads (softplus / sigmoid / exp-scaling) belong to the owner.
    Weights use He initialization; biases start at zero.
    """

    def __init__(self, widths: list[int], rng: np.random.Generator, name: str = "mlp",
                 skip_layers: tuple[int, ...] = ()):
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        self.widths = list(widths)
        self.skip_layers = tuple(skip_layers)  # hidden layers that re-append the input
        self.weights: list[ParamTensor] = []
        self.biases: list[ParamTensor] = []
        for i in range(len(widths) - 1):
            fan_in = widths[i] + (widths[0] if i in self.skip_layers else 0)
            w = rng.standard_normal((fan_in, widths[i + 1])) * math.sqrt(2.0 / fan_in)
            self.weights.append(ParamTensor(f"{name}.w{i}", w))
            self.biases.append(ParamTensor(f"{name}.b{i}", np.zeros(widths[i + 1])))

    def zero_last_layer(self):
        self.weights[-1].assign(np.zeros_like(self.weights[-1].values))
        self.biases[-1].assign(np.zeros_like(self.biases[-1].values))

    def params(self) -> list[ParamTensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def __call__(self, x) -> Var:
        return forward(self, x)


def forward(net: Mlp, x) -> Var:
    """Evaluate the net, recording the trace for backward."""
    x = as_var(x)
    if x.value.ndim != 2 or x.value.shape[1] != net.widths[0]:
        raise ValueError(
            f"input width {x.value.shape} incompatible with first layer ({net.widths[0]})")
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        if i in net.skip_layers:
            h = concat([h, x], axis=1)
        h = add(matmul(h, leaf(w)), leaf(b))
        if i != last:
            h = relu(h)
    return h


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction.  Gradients stay untouched; the caller zeroes."""

    def __init__(self, params: list[ParamTensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def step(self, lr: float, step_index: int, lr_scales=None):
        adam_step(self.params, self.m, self.v, lr, self.beta1, self.beta2, self.eps,
                  step_index, lr_scales)


def adam_step(params, m, v, lr, beta1=0.9, beta2=0.999, eps=1e-8, step_index=1,
              lr_scales=None):
    """One bias-corrected Adam update over all params (in place)."""
    if step_index < 1:
        raise ValueError("step_index starts at 1")
    bc1 = 1.0 - beta1 ** step_index
    bc2 = 1.0 - beta2 ** step_index
    for i, p in enumerate(params):
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {p.name}")
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
        scale = lr if lr_scales is None else lr * lr_scales[i]
        p.assign(p.values - scale * (m[i] / bc1) / (np.sqrt(v[i] / bc2) + eps))


# ---------------------------------------------------------------------------
# checkpoint format: "DNCK", u32 version, then per tensor
#   u32 name length, UTF-8 name, u32 rank, u32 dims..., f64 payload (LE)

_MAGIC = b"DNCK"
_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=np.float64)
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.astype("<f8").tobytes(order="C"))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a DNCK checkpoint")
        version, = struct.unpack("<I", f.read(4))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        count, = struct.unpack("<I", f.read(4))
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            nlen, = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            rank, = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            n = int(np.prod(dims)) if dims else 1
            arr = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(dims)
            out[name] = arr.astype(np.float64)
        return out
