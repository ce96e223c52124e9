"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap contiguous row-major numpy arrays (float64 by default,
float32 as an opt-in fast mode).  Shapes are always explicit: no implicit
broadcasting except multiplication by a python scalar (``scale``) and the
two explicit bias-add ops.

A ``Tape`` records primitive operations while active; ``tape.backward(root)``
replays the records in reverse and accumulates gradients into every
reachable tensor with ``requires_grad=True``.  Tapes are per-computation
and discarded afterwards.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ShapeError(ValueError):
    """Operand shapes (or dtypes) incompatible with the requested op."""


_ACTIVE_TAPE = None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of primitive ops; context manager sets the active tape."""

    def __init__(self):
        self.records = []       # (out, inputs, vjp) in topological order
        self._outputs = set()

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        return False

    def backward(self, root: Tensor):
        """Accumulate d(root)/d(tensor) into .grad of reachable tensors.

        root must be a scalar (size-1) tensor produced on this tape.
        Repeated calls without zero_grad accumulate.
        """
        if root.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.data.shape}")
        if id(root) not in self._outputs:
            raise ValueError("backward root was not produced on this tape")
        grads = {id(root): np.ones_like(root.data)}
        touched = {id(root): root}
        for out, inputs, vjp in reversed(self.records):
            g = grads.get(id(out))
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    touched[key] = inp
        for key, t in touched.items():
            if t.requires_grad:
                t.grad = grads[key] if t.grad is None else t.grad + grads[key]


def _emit(data, inputs, vjp):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    if out.requires_grad and _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE.records.append((out, inputs, vjp))
        _ACTIVE_TAPE._outputs.add(id(out))
    return out


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "subtract")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "multiply")
    return _emit(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"matmul: dtype mismatch {a.data.dtype} vs {b.data.dtype}")

    def vjp(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _emit(a.data @ b.data, (a, b), vjp)


def add_row_bias(x: Tensor, b: Tensor) -> Tensor:
    """(B, N) + (N,) with the bias broadcast over rows."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"add_row_bias: {x.data.shape} + {b.data.shape}")
    return _emit(x.data + b.data[None, :], (x, b),
                 lambda g: (g, g.sum(axis=0) if b.requires_grad else None))


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """(B, C, H, W) + (C,) with the bias broadcast over batch and space."""
    if x.data.ndim != 4 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"add_channel_bias: {x.data.shape} + {b.data.shape}")
    return _emit(
        x.data + b.data[None, :, None, None],
        (x, b),
        lambda g: (g, g.sum(axis=(0, 2, 3)) if b.requires_grad else None),
    )


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    if not 0 <= slope < 1:
        raise ValueError("leaky_relu slope must be in [0, 1)")
    s = x.data.dtype.type(slope)
    # for 0 <= s < 1, max(x, s*x) equals x when x >= 0 and s*x otherwise
    out = np.maximum(x.data, x.data * s)

    def vjp(g):
        go = g * s
        np.copyto(go, g, where=x.data >= 0)
        return (go,)

    return _emit(out, (x,), vjp)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), computed stably; a smooth (C^inf) relu."""
    out = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))

    def vjp(g):
        # d/dx softplus = sigmoid(x), evaluated overflow-free
        e = np.exp(-np.abs(x.data))
        sig = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * sig.astype(x.data.dtype),)

    return _emit(out.astype(x.data.dtype), (x,), vjp)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; backward passes 1 inside the interval, 0 outside."""
    inside = (x.data >= lo) & (x.data <= hi)
    return _emit(np.clip(x.data, lo, hi), (x,), lambda g: (np.where(inside, g, 0.0),))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.data.shape} as {shape}")
    old = x.data.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def tsum(x: Tensor, axis=None) -> Tensor:
    def vjp(g):
        if axis is None:
            return (np.full_like(x.data, 1.0) * g,)
        return (np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy(),)

    return _emit(x.data.sum(axis=axis), (x,), vjp)


def tmean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    inv = x.data.dtype.type(1.0 / n)

    def vjp(g):
        if axis is None:
            return (np.full_like(x.data, inv) * g,)
        return (np.broadcast_to(np.expand_dims(g * inv, axis), x.data.shape).copy(),)

    return _emit(x.data.mean(axis=axis), (x,), vjp)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-sample cross entropy of softmax(logits) against integer labels.

    logits: (B, J); labels: (B,) ints in [0, J).  Returns shape (B,).
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-D, got {logits.data.shape}")
    labels = np.asarray(labels)
    if labels.shape != (logits.data.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: labels shape {labels.shape} "
                         f"does not match batch {logits.data.shape[0]}")
    j = logits.data.shape[1]
    if labels.min() < 0 or labels.max() >= j:
        raise ValueError(f"label out of range [0, {j})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(sez)
    rows = np.arange(labels.shape[0])
    loss = -logp[rows, labels]

    def vjp(g):
        sm = ez / sez
        d = sm.copy()
        d[rows, labels] -= 1.0
        return (d * g[:, None],)

    return _emit(loss, (logits,), vjp)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), zero padding, square stride.

    x: (B, C, H, W); w: (O, C, kh, kw) -> (B, O, oh, ow).
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input and kernel, got {x.data.shape}, {w.data.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"conv2d: channel mismatch {x.data.shape[1]} vs {w.data.shape[1]}")
    if x.data.dtype != w.data.dtype:
        raise ShapeError(f"conv2d: dtype mismatch {x.data.dtype} vs {w.data.dtype}")
    if stride < 1:
        raise ShapeError("conv2d: stride must be >= 1")
    b_, c, h, wd = x.data.shape
    o, _, kh, kw = w.data.shape
    hp, wp = h + 2 * pad, wd + 2 * pad
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    xp = x.data if pad == 0 else np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    sb, sc, sh, sw = xp.strides
    win = as_strided(xp, (b_, oh, ow, c, kh, kw), (sb, sh * stride, sw * stride, sc, sh, sw))
    col = win.reshape(b_ * oh * ow, c * kh * kw)
    wmat = w.data.reshape(o, c * kh * kw)
    out = (col @ wmat.T).reshape(b_, oh, ow, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    need_dw = w.requires_grad
    col_saved = np.ascontiguousarray(col) if need_dw else None

    def vjp(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b_ * oh * ow, o)
        gx = None
        if x.requires_grad:
            dcol = (gmat @ wmat).reshape(b_, oh, ow, c, kh, kw)
            dcol = np.ascontiguousarray(dcol.transpose(0, 3, 4, 5, 1, 2))  # B,C,kh,kw,oh,ow
            dxp = np.zeros((b_, c, hp, wp), dtype=x.data.dtype)
            for i in range(kh):
                for jj in range(kw):
                    dxp[:, :, i:i + stride * oh:stride, jj:jj + stride * ow:stride] += dcol[:, :, i, jj]
            gx = dxp if pad == 0 else dxp[:, :, pad:pad + h, pad:pad + wd]
            gx = np.ascontiguousarray(gx)
        gw = (gmat.T @ col_saved).reshape(o, c, kh, kw) if need_dw else None
        return gx, gw

    return _emit(out, (x, w), vjp)


def nchw_to_nhwc(x: Tensor) -> Tensor:
    """Layout change (B, C, H, W) -> (B, H, W, C)."""
    if x.data.ndim != 4:
        raise ShapeError(f"nchw_to_nhwc: need 4-D input, got {x.data.shape}")
    out = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))
    return _emit(out, (x,),
                 lambda g: (np.ascontiguousarray(g.transpose(0, 3, 1, 2)),))


def conv2d_nhwc(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """conv2d on channels-last activations: (B, H, W, C) -> (B, oh, ow, O).

    Same kernel layout (O, C, kh, kw) and same arithmetic as ``conv2d``;
    channels-last keeps the im2col gather and both backward GEMMs free of
    layout transposes, which is what makes long Langevin runs affordable.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d_nhwc: need 4-D input and kernel, got {x.data.shape}, {w.data.shape}")
    if x.data.shape[3] != w.data.shape[1]:
        raise ShapeError(f"conv2d_nhwc: channel mismatch {x.data.shape[3]} vs {w.data.shape[1]}")
    if x.data.dtype != w.data.dtype:
        raise ShapeError(f"conv2d_nhwc: dtype mismatch {x.data.dtype} vs {w.data.dtype}")
    if stride < 1:
        raise ShapeError("conv2d_nhwc: stride must be >= 1")
    b_, h, wd, c = x.data.shape
    o, _, kh, kw = w.data.shape
    hp, wp = h + 2 * pad, wd + 2 * pad
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d_nhwc: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    xp = x.data if pad == 0 else np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    sb, sh, sw, sc = xp.strides
    win = as_strided(xp, (b_, oh, ow, kh, kw, c), (sb, sh * stride, sw * stride, sh, sw, sc))
    col = win.reshape(b_ * oh * ow, kh * kw * c)
    wmat = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, o))
    out = (col @ wmat).reshape(b_, oh, ow, o)

    need_dw = w.requires_grad
    col_saved = col if need_dw else None

    def vjp(g):
        gmat = g.reshape(b_ * oh * ow, o)
        gx = None
        if x.requires_grad:
            dcol = (gmat @ wmat.T).reshape(b_, oh, ow, kh, kw, c)
            dxp = np.zeros((b_, hp, wp, c), dtype=x.data.dtype)
            for i in range(kh):
                for jj in range(kw):
                    dxp[:, i:i + stride * oh:stride, jj:jj + stride * ow:stride, :] += dcol[:, :, :, i, jj, :]
            gx = dxp if pad == 0 else np.ascontiguousarray(dxp[:, pad:pad + h, pad:pad + wd, :])
        gw = None
        if need_dw:
            gw = np.ascontiguousarray(
                (col_saved.T @ gmat).reshape(kh, kw, c, o).transpose(3, 2, 0, 1))
        return gx, gw

    return _emit(out, (x, w), vjp)


def add_last_bias(x: Tensor, b: Tensor) -> Tensor:
    """(..., C) + (C,) with the bias broadcast over all leading axes."""
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"add_last_bias: {x.data.shape} + {b.data.shape}")
    axes = tuple(range(x.data.ndim - 1))
    return _emit(x.data + b.data, (x, b),
                 lambda g: (g, g.sum(axis=axes) if b.requires_grad else None))
