"""Dense tensor with tape-based reverse-mode autodiff.

Feature maps use (batch, channel, height, width) layout. Every op records a
closure mapping the output gradient to input gradients; :meth:`Tensor.backward`
replays the tape in reverse topological order and accumulates gradients into
leaves that require them. Data lives in numpy arrays; float32 is used for
training and float64 for verification.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, GraphError, NonFiniteError, ShapeError

_GRAD_ENABLED = True
_DEBUG_FINITE = False
_THREAD_LIMITER = None
_BRANCH_TAPE = None


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class _BranchTape:
    def __init__(self, replay: Optional[list] = None):
        self.replay = replay
        self.items = [] if replay is None else replay
        self.pos = 0


@contextlib.contextmanager
def _branch_tape(tape: _BranchTape):
    global _BRANCH_TAPE
    prev, _BRANCH_TAPE = _BRANCH_TAPE, tape
    try:
        yield tape.items
    finally:
        _BRANCH_TAPE = prev


def record_branches():
    """Collect the branch choices of piecewise ops (ReLU masks, max-pool argmaxes).

    Two evaluations with equal records lie on the same smooth piece.
    """
    return _branch_tape(_BranchTape())


def replay_branches(record: list):
    """Re-run piecewise ops with the choices of an earlier :func:`record_branches`."""
    return _branch_tape(_BranchTape(record))


def branch(choice: np.ndarray) -> np.ndarray:
    """Route a piecewise op's branch choice through the active tape, if any."""
    tape = _BRANCH_TAPE
    if tape is None:
        return choice
    if tape.replay is None:
        tape.items.append(choice.copy())
        return choice
    if tape.pos >= len(tape.replay) or tape.replay[tape.pos].shape != choice.shape:
        raise GraphError("branch replay does not match the recorded computation")
    stored = tape.replay[tape.pos]
    tape.pos += 1
    return stored


def set_debug(enabled: bool) -> None:
    """Turn on NaN/Inf detection for every op output."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(enabled)


def set_threads(n: Optional[int]) -> None:
    """Cap BLAS threads; ``1`` is the deterministic mode used by tests.

    ``None`` lifts a previously applied cap.
    """
    global _THREAD_LIMITER
    from threadpoolctl import threadpool_limits

    if _THREAD_LIMITER is not None:
        _THREAD_LIMITER.restore_original_limits()
        _THREAD_LIMITER = None
    if n is not None:
        if n < 1:
            raise ConfigurationError(f"thread count must be >= 1, got {n}")
        _THREAD_LIMITER = threadpool_limits(limits=n)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._consumed = False

    # construction from an op

    @classmethod
    def from_op(cls, out: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        """Wrap ``out`` and record ``backward(grad) -> tuple of parent grads``.

        The closure may return ``None`` for parents that need no gradient.
        """
        if _DEBUG_FINITE and not np.all(np.isfinite(out)):
            raise NonFiniteError(f"non-finite values produced by {backward.__qualname__}")
        t = cls(out)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            t.requires_grad = True
            t._parents = tuple(parents)
            t._backward = backward
        return t

    # basic properties

    @property
    def shape(self) -> tuple:
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
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operators

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    # reverse pass

    def backward(self) -> None:
        if self._consumed:
            raise GraphError("graph already consumed by a previous backward(); rebuild it")
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("backward() on a tensor that does not require grad")

        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(
                        f"gradient shape {pg.shape} != tensor shape {parent.shape} "
                        f"in {node._backward.__qualname__}"
                    )
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._consumed = True


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _pair(a, b) -> tuple:
    """Promote a python/numpy operand to a Tensor of its partner's dtype."""
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# elementwise family


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor.from_op(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(a.data * b.data, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return (g * c,)

    return Tensor.from_op(x.data * x.data.dtype.type(c), (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = branch(x.data > 0)

    def backward(g):
        return (g * mask,)

    return Tensor.from_op((x.data * mask).astype(x.dtype, copy=False), (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # two-branch form avoids overflow in exp for large |d|
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)

    def backward(g):
        return (g * out * (1 - out),)

    return Tensor.from_op(out, (x,), backward)


def tsum(x: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return Tensor.from_op(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward)


def mean(x: Tensor) -> Tensor:
    n = x.size

    def backward(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return Tensor.from_op(np.asarray(x.data.mean(), dtype=x.dtype), (x,), backward)


# shape ops


def reshape(x: Tensor, shape: tuple) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None

    def backward(g):
        return (g.reshape(x.shape),)

    return Tensor.from_op(out, (x,), backward)


def transpose(x: Tensor, axes: tuple) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return Tensor.from_op(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward)


# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (numpy semantics)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return Tensor.from_op(out, (a, b), backward)


batched_matmul = matmul


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if _DEBUG_FINITE and not np.all(np.isfinite(x.data)):
        raise NonFiniteError("softmax received non-finite input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(out, (x,), backward)


# convolution family


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: tuple = (1, 1)
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    bias: bool = True
    output_padding: int = 0

    def __post_init__(self):
        k = self.kernel_size
        if isinstance(k, int):
            object.__setattr__(self, "kernel_size", (k, k))
        kh, kw = self.kernel_size
        for name, v in (("in_channels", self.in_channels), ("out_channels", self.out_channels),
                        ("kernel height", kh), ("kernel width", kw), ("stride", self.stride),
                        ("dilation", self.dilation)):
            if int(v) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {v}")
        if self.padding < 0 or self.output_padding < 0:
            raise ConfigurationError("padding must be >= 0")
        if self.output_padding >= max(self.stride, self.dilation):
            raise ConfigurationError("output_padding must be smaller than stride or dilation")

    def conv_output_size(self, h: int, w: int) -> tuple:
        kh, kw = self.kernel_size
        return (_conv_out(h, kh, self.stride, self.padding, self.dilation),
                _conv_out(w, kw, self.stride, self.padding, self.dilation))

    def transpose_output_size(self, h: int, w: int) -> tuple:
        kh, kw = self.kernel_size
        return (_tconv_out(h, kh, self.stride, self.padding, self.dilation, self.output_padding),
                _tconv_out(w, kw, self.stride, self.padding, self.dilation, self.output_padding))


def _conv_out(n, k, s, p, d):
    return (n + 2 * p - d * (k - 1) - 1) // s + 1


def _tconv_out(n, k, s, p, d, op):
    return (n - 1) * s - 2 * p + d * (k - 1) + op + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int) -> np.ndarray:
    """(N,C,Hp,Wp) -> (N,Ho,Wo,C,kh,kw) contiguous patch array, no padding applied."""
    ekh, ekw = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    v = sliding_window_view(xp, (ekh, ekw), axis=(2, 3))
    v = v[:, :, ::stride, ::stride, ::dilation, ::dilation]
    return np.ascontiguousarray(v.transpose(0, 2, 3, 1, 4, 5))


def _col2im(cols: np.ndarray, padded_shape: tuple, stride: int, dilation: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add (N,Ho,Wo,C,kh,kw) patches."""
    n, ho, wo, c, kh, kw = cols.shape
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            out[:, :, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return out


def _pad(x: np.ndarray, p: int, value=0.0) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def _check_rank4(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op} expects a (batch, channel, height, width) tensor, got {x.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """Cross-correlation; weight is (out_channels, in_channels, kh, kw)."""
    _check_rank4(x, "conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be rank 4, got {weight.shape}")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if cin != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    ho, wo = _conv_out(h, kh, stride, padding, dilation), _conv_out(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ConfigurationError(
            f"conv2d output would be {ho}x{wo} for input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}, dilation {dilation}"
        )
    wmat = weight.data.reshape(cout, -1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    if kh == kw == 1 and stride == 1 and padding == 0:
        xm = x.data.reshape(n, c, h * w)
        out = np.matmul(wmat, xm)
        if bias is not None:
            out += bias.data[None, :, None]

        def backward(g):
            gm = g.reshape(n, cout, h * w)
            gx = np.matmul(wmat.T, gm).reshape(x.shape) if x.requires_grad else None
            gw = np.einsum("nop,ncp->oc", gm, xm).reshape(weight.shape) if weight.requires_grad else None
            grads = (gx, gw)
            if bias is not None:
                grads += (gm.sum(axis=(0, 2)),)
            return grads

        return Tensor.from_op(out.reshape(n, cout, h, w), parents, backward)

    cols = _im2col(_pad(x.data, padding), kh, kw, stride, dilation)
    cols2 = cols.reshape(n * ho * wo, c * kh * kw)
    out = cols2 @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gx = gw = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = _col2im(gcols, (n, c, h + 2 * padding, w + 2 * padding), stride, dilation)
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
            gx = np.ascontiguousarray(gx)
        if weight.requires_grad:
            gw = (g2.T @ cols2).reshape(weight.shape)
        grads = (gx, gw)
        if bias is not None:
            grads += (g2.sum(axis=0),)
        return grads

    return Tensor.from_op(out, parents, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
                     padding: int = 0, output_padding: int = 0, dilation: int = 1) -> Tensor:
    """Fractionally strided convolution, the adjoint of :func:`conv2d`.

    ``weight`` is (in_channels, out_channels, kh, kw), as for the gradient of
    a conv2d whose weight is (out, in, kh, kw) with the roles swapped.
    """
    _check_rank4(x, "conv_transpose2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv_transpose2d weight must be rank 4, got {weight.shape}")
    n, c, h, w = x.shape
    cin, cout, kh, kw = weight.shape
    if cin != c:
        raise ShapeError(f"conv_transpose2d: input has {c} channels but weight expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} != ({cout},)")
    if output_padding >= max(stride, dilation):
        raise ConfigurationError("output_padding must be smaller than stride or dilation")
    ho = _tconv_out(h, kh, stride, padding, dilation, output_padding)
    wo = _tconv_out(w, kw, stride, padding, dilation, output_padding)
    if ho < 1 or wo < 1:
        raise ConfigurationError(f"conv_transpose2d output would be {ho}x{wo} for input {h}x{w}")
    wmat = weight.data.reshape(cin, cout * kh * kw)
    x2 = x.data.transpose(0, 2, 3, 1).reshape(n * h * w, cin)
    cols = (x2 @ wmat).reshape(n, h, w, cout, kh, kw)
    full = (ho + 2 * padding, wo + 2 * padding)
    outp = _col2im(cols, (n, cout) + full, stride, dilation)
    out = np.ascontiguousarray(outp[:, :, padding:padding + ho, padding:padding + wo])
    if bias is not None:
        out += bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gp = _pad(g, padding)
        gcols = _im2col(gp, kh, kw, stride, dilation)[:, :h, :w]
        gcols2 = gcols.reshape(n * h * w, cout * kh * kw)
        gx = gw = None
        if x.requires_grad:
            gx = np.ascontiguousarray((gcols2 @ wmat.T).reshape(n, h, w, cin).transpose(0, 3, 1, 2))
        if weight.requires_grad:
            gw = (x2.T @ gcols2).reshape(weight.shape)
        grads = (gx, gw)
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    return Tensor.from_op(out, parents, backward)


def maxpool2d(x: Tensor, window: int, stride: Optional[int] = None, padding: int = 0) -> Tensor:
    """Max over windows; the gradient goes to the first maximal index."""
    _check_rank4(x, "maxpool2d")
    stride = window if stride is None else stride
    n, c, h, w = x.shape
    if window < 1 or stride < 1:
        raise ConfigurationError("maxpool window and stride must be >= 1")
    if window > h + 2 * padding or window > w + 2 * padding:
        raise ConfigurationError(f"maxpool window {window} larger than padded input {h}x{w}+{padding}")
    if padding > window // 2:
        raise ConfigurationError("maxpool padding must be at most half the window")
    xp = _pad(x.data, padding, value=-np.inf)
    v = sliding_window_view(xp, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = v.shape[2], v.shape[3]
    flat = v.reshape(n, c, ho, wo, window * window)
    arg = branch(flat.argmax(axis=-1))
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gp = np.zeros(xp.shape, dtype=g.dtype)
        for idx in range(window * window):
            i, j = divmod(idx, window)
            hit = arg == idx
            if hit.any():
                gp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += g * hit
        return (np.ascontiguousarray(gp[:, :, padding:padding + h, padding:padding + w]),)

    return Tensor.from_op(np.ascontiguousarray(out), (x,), backward)


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel normalization; in training mode also updates ``state`` in place."""
    _check_rank4(x, "batchnorm2d")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma/beta must have shape ({c},)")
    m = n * h * w
    if m == 0:
        raise ConfigurationError("batchnorm2d over an empty batch")
    eps = state.eps
    g4 = gamma.data[None, :, None, None]
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mu[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv[None, :, None, None]
        unbiased = var * m / max(m - 1, 1)
        mom = state.momentum
        state.running_mean[...] = (1 - mom) * state.running_mean + mom * mu
        state.running_var[...] = (1 - mom) * state.running_var + mom * unbiased
        out = xhat * g4 + beta.data[None, :, None, None]

        def backward(g):
            gb = g.sum(axis=(0, 2, 3))
            gg = (g * xhat).sum(axis=(0, 2, 3))
            gx = None
            if x.requires_grad:
                # dxhat summed terms reuse gb and gg scaled by gamma
                gx = (g4 * inv[None, :, None, None] / m) * (
                    m * g - gb[None, :, None, None] - xhat * gg[None, :, None, None]
                )
            return gx, gg, gb

    else:
        inv = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x.data - state.running_mean[None, :, None, None]) * inv[None, :, None, None]
        out = xhat * g4 + beta.data[None, :, None, None]

        def backward(g):
            gx = g * (g4 * inv[None, :, None, None]) if x.requires_grad else None
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return Tensor.from_op(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)
