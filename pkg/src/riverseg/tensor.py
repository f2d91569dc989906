"""Dense tensors with reverse-mode autodiff on a global tape.

Every operation the segmentation network needs is implemented here as a
function on :class:`Tensor`. Executed ops are recorded on a Wengert-list
tape; ``backward`` replays the list in exact reverse execution order and
accumulates gradients into ``requires_grad`` leaves. Float32 is the training
precision; call ``use_dtype(np.float64)`` around gradient checks.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf, expit


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class GraphError(RuntimeError):
    """The autodiff tape was used in an invalid state."""


_default_dtype = np.float32


def set_default_dtype(dtype) -> None:
    global _default_dtype
    if np.dtype(dtype) not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _default_dtype = np.dtype(dtype).type


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the default tensor dtype (64-bit for grad checks)."""
    prev = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    """N-dimensional array that can participate in gradient taping.

    ``data`` is a row-major numpy array. Leaves created with
    ``requires_grad=True`` receive a ``grad`` buffer of identical shape after
    ``backward``; everything else keeps ``grad is None``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_is_op_output")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._is_op_output = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return not self._is_op_output

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar; constants stay constants (no grad)
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


def _scalar_err(t):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# Tape


class _TapeEntry:
    __slots__ = ("out", "inputs", "grad_fn")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], grad_fn: Callable):
        self.out = out
        self.inputs = inputs
        self.grad_fn = grad_fn


class Tape:
    """Ordered record of executed ops; replayed back-to-front by backward."""

    def __init__(self):
        self._entries: list[_TapeEntry] = []
        self._consumed = False

    def __len__(self):
        return len(self._entries)

    def record(self, out: Tensor, inputs: Sequence[Tensor], grad_fn: Callable) -> None:
        out._is_op_output = True
        self._entries.append(_TapeEntry(out, inputs, grad_fn))

    def reset(self) -> None:
        self._entries.clear()
        self._consumed = False

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise GraphError("backward already ran on this tape; reset it first")
        on_tape = any(e.out is loss for e in self._entries)
        if not on_tape and not (loss.is_leaf and loss.requires_grad):
            raise GraphError("loss is not connected to the tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        if not on_tape:
            loss.grad = grads[id(loss)]
            return
        for entry in reversed(self._entries):
            g = grads.pop(id(entry.out), None)
            if g is None:
                continue
            input_grads = entry.grad_fn(g)
            for inp, ig in zip(entry.inputs, input_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    inp.grad = ig if inp.grad is None else inp.grad + ig
                else:
                    prev = grads.get(id(inp))
                    grads[id(inp)] = ig if prev is None else prev + ig


_tape = Tape()
_grad_enabled = True


def active_tape() -> Tape:
    return _tape


def reset_tape() -> None:
    _tape.reset()


def backward(loss: Tensor) -> None:
    _tape.backward(loss)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _make_op(out_data, inputs: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    track = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track, dtype=out_data.dtype)
    if track:
        _tape.record(out, tuple(inputs), grad_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum grad over axes that numpy broadcasting expanded."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make_op(out, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make_op(out, (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    return _make_op(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a python constant; the constant never gets a gradient."""
    f = a.data.dtype.type(factor)
    return _make_op(a.data * f, (a,), lambda g: (g * f,))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = a.data.reshape(shape)
    src = a.shape
    return _make_op(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(int(ax) for ax in axes)
    inv = tuple(np.argsort(axes))
    return _make_op(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                    lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make_op(out, tuple(tensors), grad_fn)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    shp = a.shape
    return _make_op(out, (a,), lambda g: (np.broadcast_to(g, shp).astype(a.dtype),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean(), dtype=a.dtype)
    shp = a.shape
    return _make_op(out, (a,), lambda g: ((np.broadcast_to(g, shp) / n).astype(a.dtype),))


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree between {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make_op(out, (a, b), grad_fn)


def _conv_windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::sh, ::sw]  # (B, C, Ho, Wo, kh, kw)


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Cross-correlation with stride/padding/groups; groups == C is depthwise."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, Cg, kh, kw = w.shape
    if C % groups or O % groups:
        raise ShapeError(f"conv2d: channels {C}->{O} not divisible by groups={groups}")
    if Cg != C // groups:
        raise ShapeError(f"conv2d: weight expects {Cg} in-channels per group, input has {C // groups}")
    sh = sw = int(stride)
    Ho = (H + 2 * padding - kh) // sh + 1
    Wo = (W + 2 * padding - kw) // sw + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: non-positive output size {Ho}x{Wo} for input {H}x{W}, "
                         f"kernel {kh}x{kw}, stride {stride}, padding {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = _conv_windows(xp, kh, kw, sh, sw)
    G, Og = groups, O // groups
    # (B, G, Ho*Wo, Cg*kh*kw) x (G, Cg*kh*kw, Og) -> (B, G, Ho*Wo, Og)
    cols = win.reshape(B, G, Cg, Ho, Wo, kh, kw).transpose(0, 1, 3, 4, 2, 5, 6)
    cols = np.ascontiguousarray(cols).reshape(B, G, Ho * Wo, Cg * kh * kw)
    wmat = w.data.reshape(G, Og, Cg * kh * kw)
    out = np.matmul(cols, wmat.swapaxes(1, 2))
    out = out.transpose(0, 1, 3, 2).reshape(B, O, Ho, Wo)
    if bias is not None:
        out = out + bias.data.reshape(1, O, 1, 1)

    def grad_fn(g):
        gout = g.reshape(B, G, Og, Ho * Wo)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        # (B,G,Og,N) x (B,G,N,K) -> (G,Og,K)
        gw = np.einsum("bgon,bgnk->gok", gout, cols).reshape(O, Cg, kh, kw)
        gcols = np.matmul(gout.swapaxes(2, 3), wmat)  # (B,G,N,K)
        gwin = gcols.reshape(B, G, Ho, Wo, Cg, kh, kw).transpose(0, 1, 4, 2, 3, 5, 6)
        gwin = gwin.reshape(B, C, Ho, Wo, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + sh * (Ho - 1) + 1:sh, j:j + sw * (Wo - 1) + 1:sw] += gwin[:, :, :, :, i, j]
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        if bias is not None:
            return gx, gw, gb
        return gx, gw

    inputs = (x, w) if bias is None else (x, w, bias)
    return _make_op(out, inputs, grad_fn)


# ---------------------------------------------------------------------------
# Normalization / activations


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta must have shape ({d},), "
                         f"got {gamma.shape} and {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def grad_fn(g):
        lead = tuple(range(g.ndim - 1))
        gbeta = g.sum(axis=lead)
        ggamma = (g * xhat).sum(axis=lead)
        gx_hat = g * gamma.data
        gx = inv * (gx_hat
                    - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx.astype(x.dtype), ggamma.astype(x.dtype), gbeta.astype(x.dtype)

    return _make_op(out.astype(x.dtype), (x, gamma, beta), grad_fn)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return ((g - dot) * s,)

    return _make_op(s, (x,), grad_fn)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def grad_fn(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return ((cdf + x.data * pdf) * g,)

    return _make_op(out.astype(x.dtype), (x,), grad_fn)


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)

    def grad_fn(g):
        return (g * s * (1.0 - s),)

    return _make_op(s.astype(x.dtype), (x,), grad_fn)


# ---------------------------------------------------------------------------
# Resampling


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row-stochastic bilinear weights, align-corners=false convention."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    ratio = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * ratio - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        f = src - i0
        m[o, i0] += 1.0 - f
        m[o, i1] += f
    return m


def bilinear_upsample2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample2d expects (B,C,H,W), got {x.shape}")
    B, C, H, W = x.shape
    ah = _interp_matrix(H, int(out_h), x.data.dtype)
    aw = _interp_matrix(W, int(out_w), x.data.dtype)
    tmp = np.einsum("oh,bchw->bcow", ah, x.data)
    out = np.einsum("pw,bcow->bcop", aw, tmp)

    def grad_fn(g):
        t = np.einsum("pw,bcop->bcow", aw, g)
        return (np.einsum("oh,bcow->bchw", ah, t),)

    return _make_op(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# Loss


def binary_cross_entropy_with_logits(logits: Tensor, target: Tensor) -> Tensor:
    """Mean of the numerically stable per-pixel logistic loss."""
    if logits.shape != target.shape:
        raise ShapeError(f"bce: logits {logits.shape} and target {target.shape} differ")
    t = target.data
    if not np.isin(t, (0.0, 1.0)).all():
        raise ValueError("bce: target must be binary (0/1)")
    z = logits.data
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = per.size
    out = np.asarray(per.mean(), dtype=logits.dtype)

    def grad_fn(g):
        gl = (expit(z) - t) * (g / n)
        return gl.astype(logits.dtype), None

    return _make_op(out, (logits, target), grad_fn)


# ---------------------------------------------------------------------------
# Optimizer


def adamw_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]],
               state: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0) -> dict:
    """One decoupled-weight-decay Adam update, in place on params.

    ``state`` holds one (m, v) slot per parameter plus the shared step count;
    pass the returned dict back in on the next call.
    """
    if "m" not in state:
        state = {"step": 0,
                 "m": [np.zeros_like(p.data) for p in params],
                 "v": [np.zeros_like(p.data) for p in params]}
    if len(state["m"]) != len(params):
        raise ValueError(f"optimizer state holds {len(state['m'])} slots "
                         f"for {len(params)} parameters")
    b1, b2 = betas
    state["step"] += 1
    t = state["step"]
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        m = state["m"][i]
        v = state["v"][i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay:
            update = update + weight_decay * p.data
        p.data -= (lr * update).astype(p.dtype)
    return state


class AdamW:
    """Stateful wrapper around :func:`adamw_step` over a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float = 6e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict = {}

    def step(self) -> None:
        grads = [p.grad for p in self.params]
        self.state = adamw_step(self.params, grads, self.state, self.lr,
                                self.betas, self.eps, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
