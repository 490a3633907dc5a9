"""Dense tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a backward rule on the output tensor.
``Tensor.backward`` walks the recorded graph in reverse topological order and
accumulates gradients; gradients add across multiple uses of a tensor.

Layout conventions used by the sequence ops: ``[B, C, T]`` (batch, channels,
time).  All arithmetic happens in the dtype of the inputs: float64 for checks
and oracles, float32 for training speed.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy.special import expit

from .errors import ContractError, DimensionError, NumericError, StateError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data, dtype=dtype)
    if dtype is None and not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """A dense real array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_retain", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._retain = False
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def retain_grad(self) -> Tensor:
        """Keep ``.grad`` on this non-leaf tensor after backward."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad=None, retain_graph: bool = False) -> None:
        """Accumulate d(self)/d(leaf) into every reachable ``requires_grad`` leaf.

        ``self`` must be a scalar unless an explicit upstream ``grad`` is given.
        Existing leaf gradients are added to, never overwritten; callers zero
        them between optimizer steps.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = _as_array(grad, self.dtype)
            if grad.shape != self.shape:
                raise DimensionError(f"upstream grad shape {grad.shape} != tensor shape {self.shape}")
        if not self.requires_grad:
            return

        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf or node._retain:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise DimensionError(
                        f"backward rule produced grad {pg.shape} for input {parent.shape}"
                    )
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            if not retain_graph:
                node._backward = None
                node._parents = ()

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)


class Parameter(Tensor):
    """A leaf tensor owned by a module; always requires grad."""

    __slots__ = ()

    def __init__(self, data, dtype=None, name: str | None = None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make_result(data: np.ndarray, parents, backward) -> Tensor:
    """Wrap ``data`` as the output of a recorded op.

    ``backward(g)`` must return one gradient (or None) per parent.  This is the
    extension point used by fused kernels outside this module.
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _lift(a, b) -> tuple[Tensor, Tensor]:
    # Python scalars adopt the dtype of the tensor operand.
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a, b)
    return make_result(
        a.data + b.data, (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)
    return make_result(
        a.data - b.data, (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)
    return make_result(
        a.data * b.data, (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _lift(a, b)
    out = a.data / b.data
    return make_result(
        out, (a, b),
        lambda g: (unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    return make_result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    """Square root; the gradient at exactly zero is taken as zero."""
    out = np.sqrt(a.data)

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0).astype(out.dtype),)

    return make_result(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    # np.maximum keeps NaN visible instead of mapping it to zero.
    return make_result(np.maximum(a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def clamp_min(a: Tensor, low: float) -> Tensor:
    mask = a.data > low
    out = np.maximum(a.data, low).astype(a.dtype)
    return make_result(out, (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = a.data * s
    return make_result(out, (a,), lambda g: (g * (s + out * (1.0 - s)),))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x).astype(x.dtype)


def softplus(a: Tensor) -> Tensor:
    out = _softplus(a.data)
    return make_result(out, (a,), lambda g: (g * _sigmoid(a.data),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1.0 - out * out),))


# -- reductions ----------------------------------------------------------------

def _expand(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return make_result(out, (a,), lambda g: (np.array(_expand(g, a.shape, axis, keepdims)),))


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.size // max(out.size, 1)
    return make_result(
        out, (a,),
        lambda g: (np.array(_expand(g, a.shape, axis, keepdims)) / count,),
    )


def max_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    """Maximum; ties share the gradient equally."""
    out = np.asarray(a.data.max(axis=axis, keepdims=keepdims))

    def backward(g):
        full = _expand(out, a.shape, axis, keepdims)
        mask = (a.data == full).astype(a.dtype)
        mask /= mask.sum(axis=axis, keepdims=True)
        return (mask * _expand(g, a.shape, axis, keepdims),)

    return make_result(out, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (a,), backward)


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    w = e / s
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        return (w * _expand(g, a.shape, axis, keepdims),)

    return make_result(out, (a,), backward)


def var(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Population variance (divides by n)."""
    mu = mean(a, axis=axis, keepdims=True)
    return mean(square(a - mu), axis=axis, keepdims=keepdims)


def std(a: Tensor, axis: int = -1, keepdims: bool = False, eps: float = 0.0) -> Tensor:
    return sqrt(var(a, axis=axis, keepdims=keepdims) + eps)


def mean_over_time(x: Tensor) -> Tensor:
    return mean(x, axis=-1)


def std_over_time(x: Tensor, eps: float = 0.0) -> Tensor:
    return std(x, axis=-1, eps=eps)


# -- shape manipulation -----------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return make_result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return make_result(np.array(out), (a,), backward)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(
            i != axis % len(ref) and x != y for i, (x, y) in enumerate(zip(ref, other))
        ):
            raise DimensionError(f"concat along axis {axis}: shapes {tuple(ref)} and {t.shape} differ off-axis")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, tensors, backward)


def split(a: Tensor, sizes, axis: int = 1) -> list[Tensor]:
    """Split into consecutive pieces of the given sizes along ``axis``."""
    if sum(sizes) != a.shape[axis]:
        raise DimensionError(f"split sizes {sizes} do not cover axis {axis} of length {a.shape[axis]}")
    out = []
    start = 0
    for n in sizes:
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, start + n)
        out.append(getitem(a, tuple(idx)))
        start += n
    return out


def flip_time(x: Tensor) -> Tensor:
    """Reverse the last (time) axis."""
    return make_result(x.data[..., ::-1].copy(), (x,), lambda g: (g[..., ::-1].copy(),))


# -- linear algebra ------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _lift(a, b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return make_result(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; weight is ``[out, in]``."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear expects last axis {weight.shape[1]}, got {x.shape}")
    y = matmul(x, transpose(weight))
    return y + bias if bias is not None else y


def channel_linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Pointwise map over the channel axis of ``[B, Cin, T]`` -> ``[B, Cout, T]``."""
    if x.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"channel_linear: input channel axis 1 has {x.shape[1] if x.ndim == 3 else x.shape}, "
            f"weight expects {weight.shape[1]}"
        )
    xd, wd = x.data, weight.data
    out = wd @ xd
    if bias is not None:
        out = out + bias.data[:, None]

    def backward(g):
        gx = wd.T @ g
        gw = np.einsum("bot,bit->oi", g, xd, optimize=True)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


# -- convolutions -------------------------------------------------------------

def _conv_out_len(T: int, K: int, dilation: int, pad_total: int) -> int:
    return T + pad_total - dilation * (K - 1)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           dilation: int = 1, padding: int = 0) -> Tensor:
    """Dilated cross-correlation: ``[B, Cin, T] * [Cout, Cin, K] -> [B, Cout, T']``."""
    if x.ndim != 3 or weight.ndim != 3:
        raise DimensionError(f"conv1d expects 3-d input and weight, got {x.shape} and {weight.shape}")
    B, Cin, T = x.shape
    Cout, Cin_w, K = weight.shape
    if Cin != Cin_w:
        raise DimensionError(f"conv1d channel axis: input axis 1 = {Cin}, weight axis 1 = {Cin_w}")
    if K < 1 or dilation < 1 or padding < 0:
        raise ContractError("conv1d requires K >= 1, dilation >= 1, padding >= 0")
    T_out = _conv_out_len(T, K, dilation, 2 * padding)
    if T_out < 1:
        raise DimensionError(f"conv1d time axis too short: T={T}, K={K}, dilation={dilation}, padding={padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    cols = np.stack([xp[:, :, k * dilation:k * dilation + T_out] for k in range(K)], axis=2)
    cols = cols.reshape(B, Cin * K, T_out)
    w2 = weight.data.reshape(Cout, Cin * K)
    out = w2 @ cols
    if bias is not None:
        out = out + bias.data[:, None]

    def backward(g):
        gw = np.einsum("bot,bkt->ok", g, cols, optimize=True).reshape(weight.shape)
        gcols = (w2.T @ g).reshape(B, Cin, K, T_out)
        gxp = np.zeros(xp.shape, dtype=xp.dtype)
        for k in range(K):
            gxp[:, :, k * dilation:k * dilation + T_out] += gcols[:, :, k, :]
        gx = gxp[:, :, padding:padding + T] if padding else gxp
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def depthwise_conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     dilation: int = 1, pad_left: int = 0, pad_right: int = 0) -> Tensor:
    """Per-channel convolution: ``[B, C, T] * [C, K]`` with asymmetric zero padding."""
    if x.ndim != 3 or weight.ndim != 2 or weight.shape[0] != x.shape[1]:
        raise DimensionError(f"depthwise_conv1d: input {x.shape} vs weight {weight.shape} on channel axis")
    B, C, T = x.shape
    K = weight.shape[1]
    T_out = _conv_out_len(T, K, dilation, pad_left + pad_right)
    if T_out < 1:
        raise DimensionError(f"depthwise_conv1d time axis too short: T={T}, K={K}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad_left, pad_right))) if (pad_left or pad_right) else x.data
    w = weight.data
    out = np.zeros((B, C, T_out), dtype=np.result_type(x.dtype, w.dtype))
    for k in range(K):
        out += w[None, :, k, None] * xp[:, :, k * dilation:k * dilation + T_out]
    if bias is not None:
        out += bias.data[:, None]

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=xp.dtype)
        gw = np.empty_like(w)
        for k in range(K):
            sl = slice(k * dilation, k * dilation + T_out)
            gxp[:, :, sl] += w[None, :, k, None] * g
            gw[:, k] = (g * xp[:, :, sl]).sum(axis=(0, 2))
        gx = np.ascontiguousarray(gxp[:, :, pad_left:pad_left + T])
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


# -- normalization ------------------------------------------------------------

def _norm_backward(g, xhat, inv_std, axes, count):
    # d/dx of (x - mean) * inv_std over the reduced axes.
    gm = g.mean(axis=axes, keepdims=True)
    gxm = (g * xhat).mean(axis=axes, keepdims=True)
    return inv_std * (g - gm - xhat * gxm)


def instance_norm_1d(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
                     eps: float = 1e-5) -> Tensor:
    """Normalize every (batch, channel) slice over time to mean 0, variance 1."""
    if x.ndim != 3:
        raise DimensionError(f"instance_norm_1d expects [B, C, T], got {x.shape}")
    if x.shape[2] < 2:
        raise ContractError("instance_norm_1d needs T >= 2; variance of one frame is degenerate")
    mu = x.data.mean(axis=2, keepdims=True)
    xc = x.data - mu
    v = (xc * xc).mean(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(v + eps)
    xhat = xc * inv_std
    out = xhat
    if weight is not None:
        out = out * weight.data[:, None]
    if bias is not None:
        out = out + bias.data[:, None]
    T = x.shape[2]

    def backward(g):
        gh = g * weight.data[:, None] if weight is not None else g
        grads = [_norm_backward(gh, xhat, inv_std, 2, T)]
        if weight is not None:
            grads.append((g * xhat).sum(axis=(0, 2)))
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    parents = [x] + [p for p in (weight, bias) if p is not None]
    return make_result(out.astype(x.dtype, copy=False), parents, backward)


def batch_norm_1d(x: Tensor, running_mean: np.ndarray | None, running_var: np.ndarray | None,
                  weight: Tensor | None = None, bias: Tensor | None = None,
                  training: bool = True, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalization over (B, T) per channel for ``[B, C, T]`` or ``[B, C]``.

    In training mode the running statistics arrays are updated in place
    (unbiased variance, like the common frameworks).  Eval mode reads them.
    """
    squeeze = x.ndim == 2
    xd = x.data[:, :, None] if squeeze else x.data
    if xd.ndim != 3:
        raise DimensionError(f"batch_norm_1d expects [B, C, T] or [B, C], got {x.shape}")
    B, C, T = xd.shape
    if training:
        n = B * T
        if n < 2:
            raise ContractError("batch_norm_1d in training mode needs B*T >= 2")
        mu = xd.mean(axis=(0, 2), keepdims=True)
        xc = xd - mu
        v = (xc * xc).mean(axis=(0, 2), keepdims=True)
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu.reshape(C)
            running_var *= 1.0 - momentum
            running_var += momentum * v.reshape(C) * n / (n - 1)
    else:
        if running_mean is None or running_var is None or not np.all(np.isfinite(running_var)):
            raise StateError("batch_norm_1d eval mode before any running-statistics update")
        mu = running_mean.reshape(1, C, 1).astype(xd.dtype)
        xc = xd - mu
        v = running_var.reshape(1, C, 1).astype(xd.dtype)
    inv_std = 1.0 / np.sqrt(v + eps)
    xhat = xc * inv_std
    out = xhat
    if weight is not None:
        out = out * weight.data[:, None]
    if bias is not None:
        out = out + bias.data[:, None]
    if squeeze:
        out = out[:, :, 0]

    def backward(g):
        g3 = g[:, :, None] if squeeze else g
        gh = g3 * weight.data[:, None] if weight is not None else g3
        if training:
            gx = _norm_backward(gh, xhat, inv_std, (0, 2), B * T)
        else:
            gx = gh * inv_std
        grads = [gx[:, :, 0] if squeeze else gx]
        if weight is not None:
            grads.append((g3 * xhat).sum(axis=(0, 2)))
        if bias is not None:
            grads.append(g3.sum(axis=(0, 2)))
        return tuple(grads)

    parents = [x] + [p for p in (weight, bias) if p is not None]
    return make_result(out.astype(x.dtype, copy=False), parents, backward)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = sqrt(sum_(square(x), axis=axis, keepdims=True) + eps)
    return x / norm


# -- gradient checking -------------------------------------------------------

def grad_check(f, x, h: float = 1e-5, indices=None) -> float:
    """Largest ``|analytic - central difference| / max(1, |central difference|)``.

    ``x`` is a tensor or a list of tensors; every coordinate is probed unless
    ``indices`` (a per-tensor list of flat index arrays, or one array for a
    single tensor) restricts the set.  ``f`` must return a scalar tensor.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    if indices is None:
        indices = [None] * len(xs)
    elif isinstance(x, Tensor):
        indices = [indices]
    for t in xs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    out = f(x)
    if out.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise NumericError("grad_check: function value is not finite")
    out.backward()
    worst = 0.0
    for t, idx in zip(xs, indices):
        analytic = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1)
        flat = t.data.reshape(-1)
        probe = range(t.size) if idx is None else idx
        for i in probe:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = f(x).item()
                flat[i] = orig - h
                fm = f(x).item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"grad_check: non-finite value while probing coordinate {i}")
            numeric = (fp - fm) / (2.0 * h)
            err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
