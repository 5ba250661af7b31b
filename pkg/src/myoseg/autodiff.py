"""Reverse-mode automatic differentiation over dense N-d arrays.

A ``Tape`` records every differentiable operation in execution order and
``backward`` replays the records in exact reverse order, accumulating
gradients additively.  Broadcasting is deliberately restricted to exact
shape match or scalar operands so each backward rule stays auditable.
Only the primitives the segmentation network and its losses need are
provided; there is no control-flow capture and no higher-order gradients.

Gradient ownership: tensors produced by ops ("intermediates") have their
grads reset at the start of every backward pass; leaf tensors (inputs,
parameters) accumulate across passes until the caller clears them.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested operation."""


class GradError(RuntimeError):
    """Backward pass invoked on an unsuitable root or without a tape."""


_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense N-d value participating in reverse-mode differentiation.

    ``data`` is a numpy float32/float64 array (float64 is the default so
    finite-difference checks are meaningful; training may select float32).
    ``grad`` stays ``None`` until a backward pass reaches the tensor.
    """

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        backward(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Small sugar; the module-level functions are the canonical op surface.
    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    def __radd__(self, other):
        return add(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    def __rmul__(self, other):
        return mul(_lift(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, scale(_lift(other, self.dtype), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self):
        return tensor_sum(self)


def _lift(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


class Tape:
    """Ordered record of executed ops for one differentiation context.

    Used as a context manager; ops executed while a tape is active are
    recorded onto the innermost one.  With no active tape, ops run as
    pure forward computations (inference mode).  Single-threaded per
    training context; never share a tape across concurrent trainers.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, object]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self._entries)

    def clear(self) -> None:
        """Release every recorded op and its captured intermediates."""
        self._entries.clear()


_ACTIVE_TAPES: list[Tape] = []

_PROBE: dict | None = None


class probe_smoothness:
    """Record how close ops run inside the context come to non-smooth points.

    Exposes ``leaky_margin`` (min |input| seen by leaky_relu) and
    ``sigma_min`` (min sqrt(var + eps) seen by instance_norm).  Used by the
    finite-difference audit to reject instances where the difference
    quotient would straddle an activation kink.
    """

    def __enter__(self) -> dict:
        global _PROBE
        self._prev = _PROBE
        _PROBE = {"leaky_margin": np.inf, "sigma_min": np.inf}
        return _PROBE

    def __exit__(self, exc_type, exc, tb) -> None:
        global _PROBE
        _PROBE = self._prev


def _op_output(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    if out.requires_grad and _ACTIVE_TAPES:
        tape = _ACTIVE_TAPES[-1]
        tape._entries.append((out, backward_fn))
        out._tape = tape
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        if g.shape != t.data.shape:
            g = np.broadcast_to(g, t.data.shape)
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _accum_reduced(t: Tensor, g: np.ndarray) -> None:
    """Accumulate, collapsing the gradient when ``t`` was a broadcast scalar."""
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = np.sum(g).reshape(t.data.shape) if t.data.size == 1 else g.reshape(t.data.shape)
    _accum(t, g)


def backward(loss: Tensor) -> None:
    """Populate grads of every ``requires_grad`` ancestor of a scalar loss.

    Replays the recording tape in exact reverse execution order.  Repeated
    calls without clearing leaf grads accumulate onto them.
    """
    if loss.data.size != 1:
        raise GradError(f"backward needs a scalar root, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or not tape._entries:
        raise GradError("backward needs a non-empty tape (was the loss computed under `with Tape()`?)")
    for out, _ in tape._entries:
        out.grad = None
    loss.grad = np.ones_like(loss.data)
    for out, fn in reversed(tape._entries):
        if out.grad is not None:
            fn(out.grad)


# ---------------------------------------------------------------------------
# Elementwise / reduction primitives


def _check_binary(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape == b.data.shape or a.data.size == 1 or b.data.size == 1:
        return
    raise ShapeError(
        f"{op}: operands have shapes {a.data.shape} and {b.data.shape}; "
        "only exact match or scalar broadcast is supported"
    )


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary("add", a, b)
    out = a.data + b.data

    def bw(g):
        _accum_reduced(a, g)
        _accum_reduced(b, g)

    return _op_output(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary("mul", a, b)
    out = a.data * b.data

    def bw(g):
        _accum_reduced(a, g * b.data)
        _accum_reduced(b, g * a.data)

    return _op_output(out, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_binary("div", a, b)
    out = a.data / b.data

    def bw(g):
        _accum_reduced(a, g / b.data)
        _accum_reduced(b, -g * a.data / (b.data * b.data))

    return _op_output(out, (a, b), bw)


def scale(a: Tensor, k: float) -> Tensor:
    k = float(k)
    out = a.data * k

    def bw(g):
        _accum(a, g * k)

    return _op_output(out, (a,), bw)


def tensor_sum(a: Tensor) -> Tensor:
    """Sum of all elements as a 0-d scalar tensor."""
    out = np.asarray(a.data.sum())

    def bw(g):
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _op_output(out, (a,), bw)


def clamped_log(a: Tensor, floor: float) -> Tensor:
    """log(max(a, floor)); zero gradient on the clamped region."""
    if floor <= 0:
        raise ValueError(f"clamped_log floor must be positive, got {floor}")
    clamped = np.maximum(a.data, floor)
    out = np.log(clamped)

    def bw(g):
        _accum(a, g * np.where(a.data > floor, 1.0 / clamped, 0.0))

    return _op_output(out, (a,), bw)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    """x if x >= 0 else slope*x; subgradient at exactly 0 is 1."""
    if _PROBE is not None and a.data.size:
        _PROBE["leaky_margin"] = min(_PROBE["leaky_margin"], float(np.min(np.abs(a.data))))
    factor = np.where(a.data >= 0, a.data.dtype.type(1.0), a.data.dtype.type(slope))
    out = a.data * factor

    def bw(g):
        _accum(a, g * factor)

    return _op_output(out, (a,), bw)


def softmax_channels(a: Tensor) -> Tensor:
    """Per-voxel softmax over the channel axis of a rank-5 tensor.

    Max-subtraction keeps the exponentials in range for arbitrary logits.
    """
    _check_rank5("softmax_channels", "input", a)
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        _accum(a, p * (g - dot))

    return _op_output(p, (a,), bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_rank5("concat_channels", "a", a)
    _check_rank5("concat_channels", "b", b)
    for axis in (0, 2, 3, 4):
        if a.data.shape[axis] != b.data.shape[axis]:
            raise ShapeError(
                f"concat_channels: extent mismatch on axis {axis}: "
                f"{a.data.shape[axis]} vs {b.data.shape[axis]}"
            )
    ca = a.data.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def bw(g):
        _accum(a, g[:, :ca])
        _accum(b, g[:, ca:])

    return _op_output(out, (a, b), bw)


# ---------------------------------------------------------------------------
# Convolution family


def _check_rank5(op: str, name: str, t: Tensor) -> None:
    if t.data.ndim != 5:
        raise ShapeError(f"{op}: {name} must be rank-5, got shape {t.data.shape}")


def _triple(op: str, name: str, v, minimum: int) -> tuple[int, int, int]:
    if isinstance(v, int):
        v = (v, v, v)
    v = tuple(int(x) for x in v)
    if len(v) != 3 or any(x < minimum for x in v):
        raise ShapeError(f"{op}: {name} must be a triple of ints >= {minimum}, got {v}")
    return v


def _conv_pre(op: str, x: Tensor, weight: Tensor, bias: Tensor, in_axis: int) -> None:
    _check_rank5(op, "input", x)
    _check_rank5(op, "weight", weight)
    if weight.data.shape[in_axis] != x.data.shape[1]:
        raise ShapeError(
            f"{op}: input has {x.data.shape[1]} channels but weight expects "
            f"{weight.data.shape[in_axis]} (weight shape {weight.data.shape})"
        )
    out_ch = weight.data.shape[1 - in_axis]
    if bias.data.shape != (out_ch,):
        raise ShapeError(f"{op}: bias shape {bias.data.shape} does not match {out_ch} output channels")


# The convolution family is computed offset-by-offset: one [C, C] x [C, P]
# GEMM per kernel position, accumulated over positions, with all temporaries
# activation-sized and reused across the loop.  This keeps memory traffic
# near the size of the activations themselves (no im2col blow-up), which is
# what bounds throughput on commodity CPUs; the per-voxel reduction order is
# fixed by the loop, so results are deterministic within a build.

try:
    from scipy.linalg import blas as _blas
except ImportError:  # pragma: no cover - scipy is a soft dependency
    _blas = None


def _gemm_acc(w2: np.ndarray, src2: np.ndarray, out2: np.ndarray) -> None:
    """out2 += w2 @ src2 for C-contiguous 2-d arrays, in place and copy-free.

    Runs the BLAS update on transposed views (C-contiguous [m, n] is
    F-contiguous [n, m]); falls back to a temporary when scipy is absent.
    """
    if _blas is not None and out2.flags.c_contiguous and src2.flags.c_contiguous:
        gemm = _blas.dgemm if out2.dtype == np.float64 else _blas.sgemm
        gemm(1.0, src2.T, w2.T, beta=1.0, c=out2.T, overwrite_c=True)
    else:
        out2 += w2 @ src2


def _offset_slice(start: int, count: int, step: int) -> slice:
    return slice(start, start + (count - 1) * step + 1, step)


# Unit-stride convolutions run on the flattened padded grid, where a kernel
# offset (i, j, l) is the single scalar shift (i*Hp + j)*Wp + l: every GEMM
# operand is then a dense column-sliced view of one buffer, so no per-offset
# gather is needed.  Trailing guard planes absorb the largest shift; border
# columns that would alias across rows are cropped away afterwards.


def _embed(buf5: np.ndarray, x: np.ndarray, corner) -> None:
    """Write x into buf5 at corner, zeroing only the surrounding border."""
    d0, h0, w0 = corner
    d, h, w = x.shape[2:]
    buf5[:, :, :d0] = 0
    buf5[:, :, d0 + d:] = 0
    mid = buf5[:, :, d0:d0 + d]
    mid[:, :, :, :h0] = 0
    mid[:, :, :, h0 + h:] = 0
    rows = mid[:, :, :, h0:h0 + h]
    rows[:, :, :, :, :w0] = 0
    rows[:, :, :, :, w0 + w:] = 0
    rows[:, :, :, :, w0:w0 + w] = x


def _ext_flat(x: np.ndarray, kernel, padding) -> tuple[np.ndarray, tuple[int, int, int]]:
    """Zero-embed into the padded grid with guard planes; flat [N, C, planes*Hp*Wp]."""
    n, c, d, h, w = x.shape
    pd, ph, pw = padding
    dp, hp, wp = d + 2 * pd, h + 2 * ph, w + 2 * pw
    ext = np.empty((n, c, dp + kernel[0], hp, wp), dtype=x.dtype)
    _embed(ext, x, (pd, ph, pw))
    return ext.reshape(n, c, -1), (dp, hp, wp)


def _conv3d_s1(x: np.ndarray, w: np.ndarray, padding, bias: np.ndarray | None):
    """Unit-stride cross-correlation; returns (out, extf, geometry) for reuse in backward."""
    n, ci = x.shape[:2]
    co = w.shape[0]
    kd, kh, kw = w.shape[2:]
    extf, (dp, hp, wp) = _ext_flat(x, w.shape[2:], padding)
    length = dp * hp * wp
    od, oh, ow = dp - kd + 1, hp - kh + 1, wp - kw + 1
    wt = np.ascontiguousarray(w.transpose(2, 3, 4, 0, 1))
    out = np.empty((n, co, length), dtype=x.dtype)
    tmp = np.empty((n, co, length), dtype=x.dtype)
    first = True
    for i in range(kd):
        for j in range(kh):
            for l in range(kw):
                off = (i * hp + j) * wp + l
                target = out if first else tmp
                for b in range(n):
                    np.matmul(wt[i, j, l], extf[b, :, off:off + length], out=target[b])
                if not first:
                    out += tmp
                first = False
    out = np.ascontiguousarray(out.reshape(n, co, dp, hp, wp)[:, :, :od, :oh, :ow])
    if bias is not None:
        out += bias.astype(x.dtype).reshape(1, -1, 1, 1, 1)
    return out, extf, (dp, hp, wp)


def _grad_weight_s1(extf: np.ndarray, geometry, kernel, gout: np.ndarray) -> np.ndarray:
    dp, hp, wp = geometry
    length = dp * hp * wp
    n, co = gout.shape[:2]
    ci = extf.shape[1]
    od, oh, ow = gout.shape[2:]
    gext = np.empty((n, co, dp, hp, wp), dtype=gout.dtype)
    _embed(gext, gout, (0, 0, 0))
    gf = gext.reshape(n, co, length)
    kd, kh, kw = kernel
    dw = np.empty((kd, kh, kw, co, ci), dtype=gout.dtype)
    acc = np.empty((co, ci), dtype=gout.dtype)
    for i in range(kd):
        for j in range(kh):
            for l in range(kw):
                off = (i * hp + j) * wp + l
                target = dw[i, j, l]
                for b in range(n):
                    np.matmul(gf[b], extf[b, :, off:off + length].T, out=acc)
                    if b == 0:
                        target[:] = acc
                    else:
                        target += acc
    return np.ascontiguousarray(dw.transpose(3, 4, 0, 1, 2))


def _conv3d_core(xp: np.ndarray, w: np.ndarray, stride, bias: np.ndarray | None = None) -> np.ndarray:
    """Strided cross-correlation of pre-padded input; returns [N, C_out, D', H', W']."""
    n, ci = xp.shape[:2]
    co = w.shape[0]
    kd, kh, kw = w.shape[2:]
    sd, sh, sw = stride
    od = (xp.shape[2] - kd) // sd + 1
    oh = (xp.shape[3] - kh) // sh + 1
    ow = (xp.shape[4] - kw) // sw + 1
    p = od * oh * ow
    wt = np.ascontiguousarray(w.transpose(2, 3, 4, 0, 1))
    out = np.empty((n, co, p), dtype=xp.dtype)
    out[:] = 0.0 if bias is None else bias.astype(xp.dtype)[None, :, None]
    src = np.empty((n, ci, od, oh, ow), dtype=xp.dtype)
    src2 = src.reshape(n, ci, p)
    for i in range(kd):
        for j in range(kh):
            for l in range(kw):
                np.copyto(src, xp[:, :, _offset_slice(i, od, sd), _offset_slice(j, oh, sh), _offset_slice(l, ow, sw)])
                for b in range(n):
                    _gemm_acc(wt[i, j, l], src2[b], out[b])
    return out.reshape(n, co, od, oh, ow)


def _conv3d_raw(x: np.ndarray, w: np.ndarray, stride, padding) -> np.ndarray:
    pd, ph, pw = padding
    xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    return _conv3d_core(xp, w, stride)


def _conv3d_grad_weight(xp: np.ndarray, gout: np.ndarray, kernel, stride) -> np.ndarray:
    n, ci = xp.shape[:2]
    co = gout.shape[1]
    kd, kh, kw = kernel
    sd, sh, sw = stride
    od, oh, ow = gout.shape[2:]
    p = od * oh * ow
    g3 = gout.reshape(n, co, p)
    dw = np.empty((kd, kh, kw, co, ci), dtype=xp.dtype)
    src = np.empty((n, ci, od, oh, ow), dtype=xp.dtype)
    tmp = np.empty((n, co, ci), dtype=xp.dtype)
    for i in range(kd):
        for j in range(kh):
            for l in range(kw):
                np.copyto(src, xp[:, :, _offset_slice(i, od, sd), _offset_slice(j, oh, sh), _offset_slice(l, ow, sw)])
                np.matmul(g3, src.reshape(n, ci, p).transpose(0, 2, 1), out=tmp)
                dw[i, j, l] = tmp.sum(axis=0)
    return np.ascontiguousarray(dw.transpose(3, 4, 0, 1, 2))


def _spread_adjoint(g: np.ndarray, w: np.ndarray, stride, target_spatial) -> np.ndarray:
    """Adjoint of the strided cross-correlation's input map.

    ``g`` is [N, C_out, O...]; returns [N, C_in, target_spatial] where
    target_spatial is the (padded) input extent the values spread back to:
    each output position scatters back to input position d*stride + offset.
    """
    n, co = g.shape[:2]
    ci = w.shape[1]
    kd, kh, kw = w.shape[2:]
    sd, sh, sw = stride
    od, oh, ow = g.shape[2:]
    if stride == (1, 1, 1):
        dp, hp, wp = target_spatial
        length = dp * hp * wp
        gext = np.empty((n, co, dp, hp, wp), dtype=g.dtype)
        _embed(gext, g, (0, 0, 0))
        gf = gext.reshape(n, co, length)
        wt = np.ascontiguousarray(w.transpose(2, 3, 4, 1, 0))
        dext = np.empty((n, ci, (dp + kd) * hp * wp), dtype=g.dtype)
        dext[:, :, length:] = 0  # guard tail never fully overwritten below
        tmp = np.empty((n, ci, length), dtype=g.dtype)
        first = True
        for i in range(kd):
            for j in range(kh):
                for l in range(kw):
                    off = (i * hp + j) * wp + l
                    if first:
                        # offset 0 covers [0, length); assignment initializes dext
                        for b in range(n):
                            np.matmul(wt[i, j, l], gf[b], out=dext[b, :, :length])
                    else:
                        for b in range(n):
                            np.matmul(wt[i, j, l], gf[b], out=tmp[b])
                        dext[:, :, off:off + length] += tmp
                    first = False
        return dext.reshape(n, ci, dp + kd, hp, wp)[:, :, :dp]
    dxp = np.zeros((n, ci) + tuple(target_spatial), dtype=g.dtype)
    g3 = g.reshape(n, co, od * oh * ow)
    wt = np.ascontiguousarray(w.transpose(2, 3, 4, 1, 0))
    tmp = np.empty((n, ci, od * oh * ow), dtype=g.dtype)
    tmp5 = tmp.reshape(n, ci, od, oh, ow)
    for i in range(kd):
        for j in range(kh):
            for l in range(kw):
                np.matmul(wt[i, j, l], g3, out=tmp)
                dxp[:, :, _offset_slice(i, od, sd), _offset_slice(j, oh, sh), _offset_slice(l, ow, sw)] += tmp5
    return dxp


def conv3d(x: Tensor, weight: Tensor, bias: Tensor, stride=(1, 1, 1), padding=(0, 0, 0)) -> Tensor:
    """3D cross-correlation with stride and zero padding.

    ``x`` is [batch, ch_in, D, H, W]; ``weight`` is [ch_out, ch_in, kD, kH, kW].
    Output spatial extent per axis: floor((in + 2*pad - k)/stride) + 1.
    """
    stride = _triple("conv3d", "stride", stride, 1)
    padding = _triple("conv3d", "padding", padding, 0)
    _conv_pre("conv3d", x, weight, bias, in_axis=1)
    kernel = weight.data.shape[2:]
    for axis in range(3):
        padded = x.data.shape[2 + axis] + 2 * padding[axis]
        if kernel[axis] > padded:
            raise ShapeError(
                f"conv3d: kernel extent {kernel[axis]} exceeds padded input extent "
                f"{padded} on spatial axis {axis}"
            )
    pd, ph, pw = padding
    in_spatial = x.data.shape[2:]
    if stride == (1, 1, 1):
        out, extf, geometry = _conv3d_s1(x.data, weight.data, padding, bias.data)

        def bw(g):
            if weight.requires_grad:
                _accum(weight, _grad_weight_s1(extf, geometry, kernel, g))
            if bias.requires_grad:
                _accum(bias, g.sum(axis=(0, 2, 3, 4)))
            if x.requires_grad:
                gxp = _spread_adjoint(g, weight.data, stride, geometry)
                _accum(x, gxp[:, :, pd:pd + in_spatial[0], ph:ph + in_spatial[1], pw:pw + in_spatial[2]])

        return _op_output(out, (x, weight, bias), bw)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    out = _conv3d_core(xp, weight.data, stride, bias=bias.data)

    def bw(g):
        if weight.requires_grad:
            _accum(weight, _conv3d_grad_weight(xp, g, kernel, stride))
        if bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3, 4)))
        if x.requires_grad:
            gxp = _spread_adjoint(g, weight.data, stride, xp.shape[2:])
            _accum(x, gxp[:, :, pd:pd + in_spatial[0], ph:ph + in_spatial[1], pw:pw + in_spatial[2]])

    return _op_output(out, (x, weight, bias), bw)


def conv3d_transposed(x: Tensor, weight: Tensor, bias: Tensor, stride=(1, 1, 1), padding=(0, 0, 0)) -> Tensor:
    """Transposed 3D convolution: the adjoint of ``conv3d``'s input map.

    ``x`` is [batch, ch_in, D, H, W]; ``weight`` is [ch_in, ch_out, kD, kH, kW]
    (shared layout with the paired forward convolution).  Output spatial
    extent per axis: (in - 1)*stride - 2*pad + k.
    """
    stride = _triple("conv3d_transposed", "stride", stride, 1)
    padding = _triple("conv3d_transposed", "padding", padding, 0)
    _conv_pre("conv3d_transposed", x, weight, bias, in_axis=0)
    kernel = weight.data.shape[2:]
    out_spatial = []
    for axis in range(3):
        ext = (x.data.shape[2 + axis] - 1) * stride[axis] - 2 * padding[axis] + kernel[axis]
        if ext < 1:
            raise ShapeError(
                f"conv3d_transposed: computed output extent {ext} on spatial axis {axis} "
                f"is not positive (in={x.data.shape[2 + axis]}, stride={stride[axis]}, "
                f"pad={padding[axis]}, k={kernel[axis]})"
            )
        out_spatial.append(ext)
    pd, ph, pw = padding
    padded_spatial = tuple(out_spatial[i] + 2 * padding[i] for i in range(3))
    full = _spread_adjoint(x.data, weight.data, stride, padded_spatial)
    out = np.ascontiguousarray(
        full[:, :, pd:pd + out_spatial[0], ph:ph + out_spatial[1], pw:pw + out_spatial[2]]
    )
    out += bias.data.reshape(1, -1, 1, 1, 1)

    def bw(g):
        if x.requires_grad:
            _accum(x, _conv3d_raw(g, weight.data, stride, padding))
        if weight.requires_grad:
            gp = np.pad(g, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
            _accum(weight, _conv3d_grad_weight(gp, x.data, kernel, stride))
        if bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3, 4)))

    return _op_output(out, (x, weight, bias), bw)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per (batch, channel) normalization over spatial voxels, with affine terms.

    output = gamma * (x - mean) / sqrt(var + eps) + beta, using the biased
    variance of each instance's spatial voxels.
    """
    _check_rank5("instance_norm", "input", x)
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"instance_norm: gamma/beta must have shape ({c},), got "
            f"{gamma.data.shape} and {beta.data.shape}"
        )
    if x.data.shape[2] * x.data.shape[3] * x.data.shape[4] < 1:
        raise ShapeError("instance_norm: each instance needs at least one voxel")
    mean = x.data.mean(axis=(2, 3, 4), keepdims=True)
    var = x.data.var(axis=(2, 3, 4), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    if _PROBE is not None:
        _PROBE["sigma_min"] = min(_PROBE["sigma_min"], float(np.sqrt(var.min() + eps)))
    xhat = (x.data - mean) * inv
    gbc = gamma.data.reshape(1, -1, 1, 1, 1)
    out = gbc * xhat + beta.data.reshape(1, -1, 1, 1, 1)

    def bw(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=(0, 2, 3, 4)))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(0, 2, 3, 4)))
        if x.requires_grad:
            gxh = g * gbc
            m1 = gxh.mean(axis=(2, 3, 4), keepdims=True)
            m2 = (gxh * xhat).mean(axis=(2, 3, 4), keepdims=True)
            _accum(x, inv * (gxh - m1 - xhat * m2))

    return _op_output(out, (x, gamma, beta), bw)
