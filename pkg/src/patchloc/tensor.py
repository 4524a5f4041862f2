"""Dense float64 tensors with tape-based reverse-mode autodiff.

Every array the training stack touches (images, patch scores, weights,
losses) is a ``Tensor``. Operations record themselves onto the active
``Tape``; ``backward`` replays the tape in exact reverse order and
accumulates gradients into every participating tensor.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class TensorError(Exception):
    """Base class for tensor-core failures."""


class ShapeError(TensorError):
    """Operand shapes incompatible for the requested op."""


class NonFiniteError(TensorError):
    """An op produced NaN or Inf."""


class TapeError(TensorError):
    """Backward called on an invalid loss (non-scalar or detached)."""


class MissingGradError(TensorError):
    """Optimizer step requested for a parameter without a gradient."""


class Tensor:
    """N-dimensional float64 value grid, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={tuple(self.data.shape)}, requires_grad={self.requires_grad}{tag})"


def constant(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=False, name=name)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    """One recorded op: output, inputs, and the rule mapping d(out) to d(inputs)."""

    __slots__ = ("kind", "output", "inputs", "backward_fn")

    def __init__(self, kind, output, inputs, backward_fn):
        self.kind = kind
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of ops; confined to the thread that entered it."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape exited out of order")
        stack.pop()
        return False

    def record(self, kind, output, inputs, backward_fn) -> None:
        self.nodes.append(_Node(kind, output, inputs, backward_fn))

    def owns(self, t: Tensor) -> bool:
        return any(node.output is t for node in self.nodes)

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` of every requires_grad tensor reachable from ``loss``.

        Repeated calls accumulate. Traversal uses a scratch gradient map so a
        second backward never re-propagates gradients left over from the first.
        """
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if not self.owns(loss):
            raise TapeError("loss tensor is not recorded on this tape (detached)")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            g_out = grads.get(id(node.output))
            if g_out is None:
                continue
            in_grads = node.backward_fn(g_out)
            for t, g in zip(node.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = np.array(g, dtype=np.float64, copy=True)
                    holders[key] = t
        for key, g in grads.items():
            t = holders[key]
            if not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = g.reshape(t.data.shape).copy()
            else:
                t.grad += g.reshape(t.data.shape)


def backward(loss: Tensor) -> None:
    """Backprop through the active tape from a scalar loss."""
    tape = active_tape()
    if tape is None:
        raise TapeError("no active tape")
    tape.backward(loss)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


_CHECK_FINITE = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op NaN/Inf detection; returns the previous setting."""
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)
    return prev


def _emit(kind: str, out_data: np.ndarray, inputs: Sequence[Tensor],
          backward_fn: Callable) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"op '{kind}' produced non-finite values")
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape.record(kind, out, tuple(inputs), backward_fn)
    return out


def apply_custom(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray,
                 backward_fn: Callable) -> Tensor:
    """Record a custom op with a hand-written backward rule.

    ``backward_fn(g_out)`` must return one gradient array (or None) per input.
    Used by modules that fuse non-trivial math (CRF messages, product losses)
    into a single differentiable node.
    """
    return _emit(kind, out_data, inputs, backward_fn)


def _require_same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"op '{kind}': shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ShapeError(f"op 'add': shapes {a.data.shape} and {b.data.shape} differ")
    out = a.data + b.data

    def bwd(g):
        ga = g if a.data.shape == g.shape else np.sum(g)
        gb = g if b.data.shape == g.shape else np.sum(g)
        return ga, gb

    return _emit("add", out, (a, b), bwd)


def sub(a, b) -> Tensor:
    return add(a, mul(b, -1.0))


def mul(x, scalar: float) -> Tensor:
    """Multiply by a plain python scalar constant."""
    x = _as_tensor(x)
    c = float(scalar)
    return _emit("mul", x.data * c, (x,), lambda g: (g * c,))


def hadamard(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ShapeError(f"op 'hadamard': shapes {a.data.shape} and {b.data.shape} differ")
    out = a.data * b.data

    def bwd(g):
        ga = g * b.data
        gb = g * a.data
        if a.data.shape != ga.shape:
            ga = np.sum(ga)
        if b.data.shape != gb.shape:
            gb = np.sum(gb)
        return ga, gb

    return _emit("hadamard", out, (a, b), bwd)


def tsum(x, axes: Optional[tuple] = None) -> Tensor:
    """Sum over the given axes (all axes when None)."""
    x = _as_tensor(x)
    if axes is None:
        out = np.sum(x.data)
        return _emit("sum", out, (x,), lambda g: (np.full(x.data.shape, float(g)),))
    axes = tuple(axes)
    out = np.sum(x.data, axis=axes)

    def bwd(g):
        ge = np.expand_dims(g, axes)
        return (np.broadcast_to(ge, x.data.shape).copy(),)

    return _emit("sum", out, (x,), bwd)


def masked_sum(x, mask: np.ndarray, axes: Optional[tuple] = None) -> Tensor:
    """Sum of x*mask over ``axes``; the mask is a constant, never differentiated."""
    x = _as_tensor(x)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.data.shape:
        raise ShapeError(f"op 'masked_sum': shapes {x.data.shape} and {mask.shape} differ")
    if axes is None:
        out = np.sum(x.data * mask)
        return _emit("masked_sum", out, (x,), lambda g: (mask * float(g),))
    axes = tuple(axes)
    out = np.sum(x.data * mask, axis=axes)

    def bwd(g):
        ge = np.expand_dims(g, axes)
        return (mask * ge,)

    return _emit("masked_sum", out, (x,), bwd)


def relu(x) -> Tensor:
    # subgradient at 0 is 0
    x = _as_tensor(x)
    out = np.maximum(x.data, 0.0)
    return _emit("relu", out, (x,), lambda g: (g * (x.data > 0.0),))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    out = _sigmoid_nd(x.data)
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def _sigmoid_nd(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v, dtype=np.float64)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def log(x, floor: float = 1e-300) -> Tensor:
    """Natural log with a hard floor; gradient is 0 on floored entries."""
    x = _as_tensor(x)
    clipped = np.maximum(x.data, floor)
    out = np.log(clipped)
    live = x.data > floor
    return _emit("log", out, (x,), lambda g: (g * live / clipped,))


def logit(p, clamp: float = 1e-7) -> Tensor:
    """log(p/(1-p)) with p clamped into [clamp, 1-clamp]; grad 0 where clamped."""
    p = _as_tensor(p)
    pc = np.clip(p.data, clamp, 1.0 - clamp)
    out = np.log(pc) - np.log1p(-pc)
    live = (p.data > clamp) & (p.data < 1.0 - clamp)
    return _emit("logit", out, (p,), lambda g: (g * live / (pc * (1.0 - pc)),))


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int = 1) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * kh * kw)


def conv2d(x, w, b=None, padding: int = 0) -> Tensor:
    """2-D cross-correlation, stride 1, zero padding; inputs NCHW / OCHW."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"op 'conv2d': need 4-D input/kernel, got {x.data.shape} and {w.data.shape}")
    n, c, h, wd = x.data.shape
    o, cw, kh, kw = w.data.shape
    if cw != c:
        raise ShapeError(f"op 'conv2d': input channels {c} != kernel channels {cw}")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError(f"op 'conv2d': kernel {kh}x{kw} larger than padded input")
    p = int(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, kh, kw)
    out = cols @ w.data.reshape(o, -1).T
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    inputs = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.data.shape != (o,):
            raise ShapeError(f"op 'conv2d': bias shape {b.data.shape}, expected ({o},)")
        out = out + b.data[None, :, None, None]
        inputs.append(b)

    def bwd(g):
        go = g.transpose(0, 2, 3, 1)  # (N,Ho,Wo,O)
        gw = (go.reshape(-1, o).T @ cols.reshape(-1, c * kh * kw)).reshape(w.data.shape)
        q = kh - 1 - p
        gp = np.pad(g, ((0, 0), (0, 0), (q, q), (kw - 1 - p, kw - 1 - p))) if (q or kw - 1 - p) else g
        gcols = _im2col(gp, kh, kw)
        wt = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
        gx = (gcols @ wt.T).transpose(0, 3, 1, 2)
        if b is not None:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    return _emit("conv2d", out, tuple(inputs), bwd)


# ---------------------------------------------------------------------------
# normalization (batch-statistics affine norm, the batch-norm stand-in)


class NormState:
    """Running per-channel statistics for affine_norm inference."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self.momentum = float(momentum)
        self.eps = float(eps)


def affine_norm(x, gamma, beta, state: NormState, training: bool) -> Tensor:
    """Per-channel normalization with learnable scale/shift.

    Training mode normalizes by batch statistics over (N,H,W) and updates the
    running averages; inference mode uses the stored running statistics.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.data.ndim != 4:
        raise ShapeError(f"op 'affine_norm': need 4-D input, got {x.data.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"op 'affine_norm': scale/shift shapes {gamma.data.shape}/{beta.data.shape}, expected ({c},)")
    axes = (0, 2, 3)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mean
        state.running_var = (1 - m) * state.running_var + m * var
    else:
        mean = state.running_mean
        var = state.running_var
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def bwd(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxh = g * gamma.data[None, :, None, None]
        if training:
            cnt = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
            m1 = gxh.sum(axis=axes) / cnt
            m2 = (gxh * xhat).sum(axis=axes) / cnt
            gx = inv[None, :, None, None] * (gxh - m1[None, :, None, None]
                                             - xhat * m2[None, :, None, None])
        else:
            gx = gxh * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return _emit("affine_norm", out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# anti-aliased downsampling

_ALLOWED_TAPS = (1, 2, 3, 5)


def binomial_kernel(taps: int) -> np.ndarray:
    """Normalized 2-D binomial blur kernel (outer product of the 1-D row)."""
    if taps not in _ALLOWED_TAPS:
        raise ShapeError(f"blur taps must be one of {_ALLOWED_TAPS}, got {taps}")
    row = np.array([math.comb(taps - 1, i) for i in range(taps)], dtype=np.float64)
    row /= row.sum()
    return np.outer(row, row)


def _blur_pads(taps: int) -> tuple[int, int]:
    if taps == 1:
        return 0, 0
    if taps == 2:
        return 0, 1
    return (taps - 1) // 2, (taps - 1) // 2


def _fold_edge(g: np.ndarray, lo: int, hi: int, axis: int) -> np.ndarray:
    """Collapse replicate-padding gradients back onto the edge samples."""
    if lo == 0 and hi == 0:
        return g
    g = np.moveaxis(g, axis, 0)
    core = g[lo:g.shape[0] - hi].copy()
    if lo:
        core[0] += g[:lo].sum(axis=0)
    if hi:
        core[-1] += g[core.shape[0] + lo:].sum(axis=0)
    return np.moveaxis(core, 0, axis)


def blur_downsample(x, taps: int) -> Tensor:
    """Binomial low-pass blur (replicate padding) then stride-2 subsampling.

    taps=1 degenerates to plain subsampling. Spatial extents must be even;
    output extents are halved. DC gain is exactly 1.
    """
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"op 'blur_downsample': need 4-D input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"op 'blur_downsample': spatial extents must be even, got {h}x{w}")
    kern = binomial_kernel(taps)
    pl, pr = _blur_pads(taps)
    if taps == 1:
        out = x.data[:, :, ::2, ::2].copy()

        def bwd1(g):
            gx = np.zeros_like(x.data)
            gx[:, :, ::2, ::2] = g
            return (gx,)

        return _emit("blur_downsample", out, (x,), bwd1)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pl, pr), (pl, pr)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(xp, (taps, taps), axis=(2, 3))
    win = win[:, :, ::2, ::2]
    out = np.einsum("nchwij,ij->nchw", win, kern, optimize=True)

    def bwd(g):
        gy = np.zeros((n, c, h, w), dtype=np.float64)
        gy[:, :, ::2, ::2] = g
        t1 = taps - 1
        gyp = np.pad(gy, ((0, 0), (0, 0), (t1, t1), (t1, t1)))
        gwin = np.lib.stride_tricks.sliding_window_view(gyp, (taps, taps), axis=(2, 3))
        gxp = np.einsum("nchwij,ij->nchw", gwin, kern[::-1, ::-1], optimize=True)
        gx = _fold_edge(gxp, pl, pr, axis=2)
        gx = _fold_edge(gx, pl, pr, axis=3)
        return (gx,)

    return _emit("blur_downsample", out, (x,), bwd)


# ---------------------------------------------------------------------------
# dispatcher

_OP_TABLE = {
    "conv2d": conv2d,
    "relu": relu,
    "sigmoid": sigmoid,
    "add": add,
    "mul": mul,
    "hadamard": hadamard,
    "sum": tsum,
    "masked_sum": masked_sum,
    "affine_norm": affine_norm,
    "blur_downsample": blur_downsample,
    "log": log,
    "logit": logit,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a forward op by name; records onto the active tape."""
    fn = _OP_TABLE.get(kind)
    if fn is None:
        raise TensorError(f"unknown op kind {kind!r}")
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """ADAM with decoupled weight decay and caller-signaled lr decay."""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.001,
                 weight_decay: float = 0.01, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 lr_decay: float = 0.95):
        self.params = list(params)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.lr_decay = float(lr_decay)

    def decay_lr(self) -> None:
        """Caller signals an epoch boundary; lr *= decay factor."""
        self.lr *= self.lr_decay


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One in-place ADAM update of ``params`` (must match the state's set)."""
    params = list(params)
    if len(params) != len(state.params) or any(a is not b for a, b in zip(params, state.params)):
        raise MissingGradError("adam_step: params do not match the optimizer state")
    for p in params:
        if p.grad is None:
            raise MissingGradError(f"adam_step: parameter {p.name or '<unnamed>'} has no gradient")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        p.data -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
        if state.weight_decay:
            p.data -= state.lr * state.weight_decay * p.data
