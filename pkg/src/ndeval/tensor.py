"""Dense tensors and the differentiable layer vocabulary.

Every forward function takes and returns :class:`Tensor` values and can record
exactly one entry onto a :class:`Tape`; :func:`backward` replays the recorded
entries in reverse to produce the gradient of a scalar objective with respect
to the graph input (or any other recorded tensor).

Compute dtype follows the inputs: float32 in production, float64 on the
high-precision test path. Reduction order is fixed per output element, so
results are bit-identical no matter how callers parallelize across samples.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .errors import NumericError, ValidationError

_ALLOWED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """Immutable dense N-d array of finite reals, row-major storage."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None and isinstance(data, np.ndarray) and data.dtype in _ALLOWED_DTYPES:
            dtype = data.dtype
        arr = np.array(data, dtype=dtype if dtype is not None else np.float32, order="C")
        self.data = _validated(arr)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        """Adopt a freshly allocated array without copying."""
        out = object.__new__(cls)
        out.data = _validated(np.ascontiguousarray(arr))
        return out

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def astype(self, dtype) -> "Tensor":
        return Tensor._wrap(self.data.astype(dtype))

    def reshape(self, *dims) -> "Tensor":
        if len(dims) == 1 and isinstance(dims[0], (tuple, list)):
            dims = tuple(dims[0])
        return Tensor._wrap(self.data.reshape(dims))

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _scalar_error(self)

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims}, dtype={self.data.dtype.name})"


def _scalar_error(t: Tensor):
    raise ValidationError(f"tensor with dims {t.dims} is not a scalar")


def _validated(arr: np.ndarray) -> np.ndarray:
    if arr.dtype not in _ALLOWED_DTYPES:
        raise ValidationError(f"unsupported tensor dtype {arr.dtype}; expected float32 or float64")
    if arr.ndim < 1:
        raise ValidationError("tensors must have at least one dimension")
    if any(d < 1 for d in arr.shape):
        raise ValidationError(f"all tensor dims must be >= 1, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise NumericError("tensor contains non-finite values")
    arr.flags.writeable = False
    return arr


class TraceEntry:
    """One recorded forward call: op kind, tensor references, backward closure."""

    __slots__ = ("kind", "inputs", "output", "backward_fn")

    def __init__(self, kind, inputs, output, backward_fn):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        # backward_fn(grad_out, need) -> per-input gradients (None where not needed)
        self.backward_fn = backward_fn


class Tape:
    """Sequential trace of differentiable ops; one entry per forward call.

    A tape must not be shared across concurrent backward calls; build one tape
    per forward pass.
    """

    def __init__(self):
        self.entries: list[TraceEntry] = []

    def _record(self, kind: str, inputs: tuple[Tensor, ...], output: Tensor,
                backward_fn: Callable) -> None:
        self.entries.append(TraceEntry(kind, inputs, output, backward_fn))

    def __len__(self) -> int:
        return len(self.entries)


def backward(tape: Tape, output: Tensor, output_grad: Tensor,
             wrt: Optional[Tensor] = None) -> Tensor:
    """Replay the tape in reverse; return d(objective)/d(wrt).

    ``output_grad`` seeds the objective gradient at ``output``. ``wrt``
    defaults to the first input of the first recorded entry (the graph input
    for a sequentially recorded forward pass).
    """
    if not tape.entries:
        raise ValidationError("cannot run backward over an empty trace")
    if wrt is None:
        wrt = tape.entries[0].inputs[0]
    if output_grad.dims != output.dims:
        raise ValidationError(
            f"output_grad dims {output_grad.dims} do not match output dims {output.dims}")

    # Tensors reachable forward from wrt; gradients flow only along this set.
    active = {id(wrt)}
    for entry in tape.entries:
        if any(id(t) in active for t in entry.inputs):
            active.add(id(entry.output))

    if id(output) not in active:
        return Tensor._wrap(np.zeros(wrt.dims, dtype=wrt.dtype))

    grads: dict[int, np.ndarray] = {id(output): output_grad.data}
    for entry in reversed(tape.entries):
        gout = grads.pop(id(entry.output), None)
        if gout is None:
            continue
        need = tuple(id(t) in active for t in entry.inputs)
        if not any(need):
            continue
        gins = entry.backward_fn(gout, need)
        for tens, gin in zip(entry.inputs, gins):
            if gin is None:
                continue
            key = id(tens)
            prev = grads.get(key)
            grads[key] = gin if prev is None else prev + gin

    result = grads.get(id(wrt))
    if result is None:
        result = np.zeros(wrt.dims, dtype=wrt.dtype)
    if not np.isfinite(result).all():
        raise NumericError("backward produced non-finite gradient values")
    return Tensor._wrap(np.array(result, copy=True))


# ---------------------------------------------------------------------------
# shape helpers


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValidationError(msg)


def _same_dtype(*tensors: Tensor) -> np.dtype:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ValidationError(
                f"mixed tensor dtypes {dt} and {t.dtype}; all operands must agree")
    return dt


def _patch_index(h_pad: int, w_pad: int, kh: int, kw: int, stride: int):
    out_h = (h_pad - kh) // stride + 1
    out_w = (w_pad - kw) // stride + 1
    i0 = np.repeat(np.arange(kh), kw)
    j0 = np.tile(np.arange(kw), kh)
    i1 = stride * np.repeat(np.arange(out_h), out_w)
    j1 = stride * np.tile(np.arange(out_w), out_h)
    rows = i0[:, None] + i1[None, :]   # (kh*kw, out_h*out_w)
    cols = j0[:, None] + j1[None, :]
    return rows, cols, out_h, out_w


def _extract_patches(x: np.ndarray, kh: int, kw: int, stride: int, padding: int,
                     fill: float = 0.0):
    """Return window patches of shape (N, C, kh*kw, out_h*out_w)."""
    if padding > 0:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                   mode="constant", constant_values=fill)
    n, c, hp, wp = x.shape
    rows, cols, out_h, out_w = _patch_index(hp, wp, kh, kw, stride)
    return x[:, :, rows, cols], rows, cols, out_h, out_w


def _scatter_patches(grad_patches: np.ndarray, x_shape, kh: int, kw: int,
                     stride: int, padding: int) -> np.ndarray:
    """Inverse of _extract_patches: accumulate per-window grads back onto the input."""
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    rows, cols, _, _ = _patch_index(hp, wp, kh, kw, stride)
    flat = np.zeros((n * c, hp, wp), dtype=grad_patches.dtype)
    vals = grad_patches.reshape(n * c, *grad_patches.shape[2:])
    np.add.at(flat, (np.arange(n * c)[:, None, None], rows[None], cols[None]), vals)
    out = flat.reshape(n, c, hp, wp)
    if padding > 0:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# layer ops


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, tape: Optional[Tape] = None) -> Tensor:
    """2-d cross-correlation over NCHW input with OIHW weights."""
    _require(len(x.dims) == 4, f"conv2d input must be 4-d NCHW, got dims {x.dims}")
    _require(len(weight.dims) == 4, f"conv2d weight must be 4-d KCkhkw, got dims {weight.dims}")
    _require(stride >= 1, f"conv2d stride must be >= 1, got {stride}")
    _require(padding >= 0, f"conv2d padding must be >= 0, got {padding}")
    n, c, h, w = x.dims
    k, cw, kh, kw = weight.dims
    _require(c == cw,
             f"conv2d channel mismatch: input dims {x.dims} vs weight dims {weight.dims}")
    if bias is not None:
        _require(bias.dims == (k,),
                 f"conv2d bias dims {bias.dims} do not match out channels ({k},)")
        _same_dtype(x, weight, bias)
    else:
        _same_dtype(x, weight)
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    _require(out_h >= 1 and out_w >= 1,
             f"conv2d output would be empty: input dims {x.dims}, kernel ({kh},{kw}), "
             f"stride {stride}, padding {padding}")

    patches, _, _, _, _ = _extract_patches(x.data, kh, kw, stride, padding)
    cols = patches.reshape(n, c * kh * kw, out_h * out_w)
    w2 = weight.data.reshape(k, c * kh * kw)
    # matmul over stacked (per-sample) operands: batch results are bit-identical
    # to single-sample calls because each sample is its own fixed-shape GEMM.
    out = np.matmul(w2, cols).reshape(n, k, out_h, out_w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    result = Tensor._wrap(out)

    if tape is not None:
        def backward_fn(gout: np.ndarray, need):
            g = gout.reshape(n, k, out_h * out_w)
            gx = gw = gb = None
            if need[0]:
                dcols = np.matmul(w2.T, g)
                gx = _scatter_patches(dcols.reshape(n, c, kh * kw, out_h * out_w),
                                      (n, c, h, w), kh, kw, stride, padding)
            if len(need) > 1 and need[1]:
                redo, _, _, _, _ = _extract_patches(x.data, kh, kw, stride, padding)
                cols2 = redo.reshape(n, c * kh * kw, out_h * out_w)
                gw = np.matmul(g, cols2.transpose(0, 2, 1)).sum(axis=0).reshape(weight.dims)
            if len(need) > 2 and need[2]:
                gb = gout.sum(axis=(0, 2, 3))
            return (gx, gw, gb)[: 3 if bias is not None else 2]

        inputs = (x, weight) if bias is None else (x, weight, bias)
        tape._record("conv2d", inputs, result, backward_fn)
    return result


def batchnorm_eval(x: Tensor, mean: Tensor, var: Tensor, gamma: Tensor,
                   beta: Tensor, eps: float = 1e-5, tape: Optional[Tape] = None) -> Tensor:
    """Inference-mode batch normalization with frozen running statistics."""
    _require(len(x.dims) == 4, f"batchnorm input must be 4-d NCHW, got dims {x.dims}")
    c = x.dims[1]
    for name, t in (("mean", mean), ("var", var), ("gamma", gamma), ("beta", beta)):
        _require(t.dims == (c,),
                 f"batchnorm {name} dims {t.dims} do not match channel count ({c},)")
    _require(eps >= 0.0, f"batchnorm eps must be >= 0, got {eps}")
    if np.any(var.data < 0):
        raise ValidationError("batchnorm variance must be non-negative")
    denom = var.data + x.dtype.type(eps)
    if np.any(denom <= 0):
        raise ValidationError("batchnorm var + eps must be positive")
    _same_dtype(x, mean, var, gamma, beta)

    scale = gamma.data / np.sqrt(denom)
    out = (x.data - mean.data[None, :, None, None]) * scale[None, :, None, None] \
        + beta.data[None, :, None, None]
    result = Tensor._wrap(out)

    if tape is not None:
        def backward_fn(gout: np.ndarray, need):
            gx = gout * scale[None, :, None, None] if need[0] else None
            return (gx,)

        tape._record("batchnorm_eval", (x,), result, backward_fn)
    return result


def relu(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    out = np.maximum(x.data, x.dtype.type(0))
    result = Tensor._wrap(out)
    if tape is not None:
        mask = x.data > 0  # subgradient at exactly 0 is 0

        def backward_fn(gout: np.ndarray, need):
            return (gout * mask if need[0] else None,)

        tape._record("relu", (x,), result, backward_fn)
    return result


def maxpool2d(x: Tensor, window: int, stride: int, padding: int = 0,
              tape: Optional[Tape] = None) -> Tensor:
    """Max pooling; ties broken by first index in row-major window scan order."""
    _require(len(x.dims) == 4, f"maxpool input must be 4-d NCHW, got dims {x.dims}")
    _require(window >= 1, f"maxpool window must be >= 1, got {window}")
    _require(stride >= 1, f"maxpool stride must be >= 1, got {stride}")
    _require(0 <= padding < window,
             f"maxpool padding must satisfy 0 <= padding < window, got {padding}")
    n, c, h, w = x.dims
    out_h = (h + 2 * padding - window) // stride + 1
    out_w = (w + 2 * padding - window) // stride + 1
    _require(out_h >= 1 and out_w >= 1,
             f"maxpool output would be empty: input dims {x.dims}, window {window}, "
             f"stride {stride}, padding {padding}")

    patches, rows, cols, _, _ = _extract_patches(
        x.data, window, window, stride, padding, fill=-np.inf)
    arg = patches.argmax(axis=2)  # (N, C, P); np.argmax keeps the first maximum
    p = out_h * out_w
    best = np.take_along_axis(patches, arg[:, :, None, :], axis=2)[:, :, 0, :]
    result = Tensor._wrap(best.reshape(n, c, out_h, out_w))

    if tape is not None:
        def backward_fn(gout: np.ndarray, need):
            if not need[0]:
                return (None,)
            hp, wp = h + 2 * padding, w + 2 * padding
            flat = np.zeros((n * c, hp, wp), dtype=gout.dtype)
            pos = np.arange(p)[None, None, :]
            r = rows[arg, pos].reshape(n * c, p)
            s = cols[arg, pos].reshape(n * c, p)
            np.add.at(flat, (np.arange(n * c)[:, None], r, s), gout.reshape(n * c, p))
            gx = flat.reshape(n, c, hp, wp)
            if padding > 0:
                gx = gx[:, :, padding:padding + h, padding:padding + w]
            return (np.ascontiguousarray(gx),)

        tape._record("maxpool2d", (x,), result, backward_fn)
    return result


def global_avgpool(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Spatial mean per channel: NCHW -> NC."""
    _require(len(x.dims) == 4, f"global_avgpool input must be 4-d NCHW, got dims {x.dims}")
    n, c, h, w = x.dims
    result = Tensor._wrap(x.data.mean(axis=(2, 3)))
    if tape is not None:
        inv = x.dtype.type(1.0 / (h * w))

        def backward_fn(gout: np.ndarray, need):
            if not need[0]:
                return (None,)
            gx = np.broadcast_to((gout * inv)[:, :, None, None], (n, c, h, w))
            return (np.ascontiguousarray(gx),)

        tape._record("global_avgpool", (x,), result, backward_fn)
    return result


def flatten(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Collapse all per-sample axes: (N, ...) -> (N, D)."""
    _require(len(x.dims) >= 2, f"flatten input must have a batch axis, got dims {x.dims}")
    n = x.dims[0]
    result = Tensor._wrap(x.data.reshape(n, -1))
    if tape is not None:
        def backward_fn(gout: np.ndarray, need):
            return (gout.reshape(x.dims) if need[0] else None,)

        tape._record("flatten", (x,), result, backward_fn)
    return result


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           tape: Optional[Tape] = None) -> Tensor:
    """Affine map: (N, D) x (M, D) -> (N, M)."""
    _require(len(x.dims) == 2, f"linear input must be 2-d (N, D), got dims {x.dims}")
    _require(len(weight.dims) == 2, f"linear weight must be 2-d (M, D), got dims {weight.dims}")
    n, d = x.dims
    m, dw = weight.dims
    _require(d == dw, f"linear feature mismatch: input dims {x.dims} vs weight dims {weight.dims}")
    if bias is not None:
        _require(bias.dims == (m,), f"linear bias dims {bias.dims} do not match ({m},)")
        _same_dtype(x, weight, bias)
    else:
        _same_dtype(x, weight)

    # per-sample matmul keeps batch rows bit-identical to single-sample calls
    out = np.matmul(x.data[:, None, :], weight.data.T[None, :, :])[:, 0, :]
    if bias is not None:
        out = out + bias.data[None, :]
    result = Tensor._wrap(out)

    if tape is not None:
        def backward_fn(gout: np.ndarray, need):
            gx = gw = gb = None
            if need[0]:
                gx = np.matmul(gout[:, None, :], weight.data[None, :, :])[:, 0, :]
                gx = np.ascontiguousarray(gx)
            if len(need) > 1 and need[1]:
                gw = gout.T @ x.data
            if len(need) > 2 and need[2]:
                gb = gout.sum(axis=0)
            return (gx, gw, gb)[: 3 if bias is not None else 2]

        inputs = (x, weight) if bias is None else (x, weight, bias)
        tape._record("linear", inputs, result, backward_fn)
    return result


def add(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    _require(a.dims == b.dims, f"add dims mismatch: {a.dims} vs {b.dims}")
    _same_dtype(a, b)
    result = Tensor._wrap(a.data + b.data)
    if tape is not None:
        def backward_fn(gout: np.ndarray, need):
            return (gout if need[0] else None, gout if need[1] else None)

        tape._record("add", (a, b), result, backward_fn)
    return result


def normalize(x: Tensor, channel_mean: Tensor, channel_std: Tensor,
              tape: Optional[Tape] = None) -> Tensor:
    """Per-channel affine normalization: (x - mean) / std over NCHW input."""
    _require(len(x.dims) == 4, f"normalize input must be 4-d NCHW, got dims {x.dims}")
    c = x.dims[1]
    _require(channel_mean.dims == (c,),
             f"normalize mean dims {channel_mean.dims} do not match channels ({c},)")
    _require(channel_std.dims == (c,),
             f"normalize std dims {channel_std.dims} do not match channels ({c},)")
    if np.any(channel_std.data <= 0):
        raise ValidationError("normalize channel_std must be strictly positive")
    _same_dtype(x, channel_mean, channel_std)

    inv = (x.dtype.type(1.0) / channel_std.data)[None, :, None, None]
    result = Tensor._wrap((x.data - channel_mean.data[None, :, None, None]) * inv)
    if tape is not None:
        def backward_fn(gout: np.ndarray, need):
            return (gout * inv if need[0] else None,)

        tape._record("normalize", (x,), result, backward_fn)
    return result
