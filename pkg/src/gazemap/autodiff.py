"""Minimal dense-tensor engine with reverse-mode differentiation.

Every tensor is a four-axis array (batch, channels, height, width) of
float64. Forward ops record a define-by-run graph; ``backward`` on a
scalar tensor populates ``grad`` on every reachable tensor that has
``requires_grad`` set. The op set is exactly what the saliency network
needs: convolution (strided / dilated), relu / sigmoid, max and global
average pooling, nearest-neighbour resize, channel concat / slice, and
a handful of elementwise and reduction primitives.

No broadcasting beyond the two explicit expansion ops
(``scale_channels`` for per-channel weights, ``scale_scalar`` for
learnable scalars).
"""

from __future__ import annotations

import math
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "Tensor",
    "ParamStore",
    "constant",
    "parameter",
    "conv2d",
    "relu",
    "sigmoid",
    "max_pool2d",
    "global_avg_pool",
    "nearest_resize",
    "concat_channels",
    "slice_channels",
    "mean_channels",
    "gaussian_kernel1d",
    "gaussian_kernel2d",
    "gaussian_blur",
    "add",
    "sub",
    "mul",
    "add_scalar",
    "mul_scalar",
    "exp",
    "log",
    "square",
    "reciprocal",
    "scale_channels",
    "scale_scalar",
    "repeat_batch",
    "sum_all",
    "sum_per_image",
    "backward",
    "grad_check",
]


class Tensor:
    """Dense (B, C, H, W) float64 array plus reverse-mode bookkeeping."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 4:
            raise ValueError(f"tensor must have 4 axes (B,C,H,W), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"tensor axes must all be >= 1, got shape {arr.shape}")
        self.values: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.values.shape  # type: ignore[return-value]

    @property
    def is_scalar(self) -> bool:
        return self.dims == (1, 1, 1, 1)

    def item(self) -> float:
        if not self.is_scalar:
            raise ValueError(f"item() requires dims (1,1,1,1), got {self.dims}")
        return float(self.values[0, 0, 0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def detach(self) -> "Tensor":
        """Copy of the values with no graph attached."""
        return Tensor(self.values.copy())

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims}, requires_grad={self.requires_grad})"

    # Thin operator sugar over the module-level ops; same-dims only.
    def __add__(self, other):
        return add_scalar(self, other) if isinstance(other, (int, float)) else add(self, other)

    def __sub__(self, other):
        return add_scalar(self, -other) if isinstance(other, (int, float)) else sub(self, other)

    def __mul__(self, other):
        return mul_scalar(self, other) if isinstance(other, (int, float)) else mul(self, other)

    def __rmul__(self, other):
        return mul_scalar(self, other)

    def __neg__(self):
        return mul_scalar(self, -1.0)


def constant(values) -> Tensor:
    """Tensor that takes no gradient (inputs, targets, fixed kernels)."""
    return Tensor(values, requires_grad=False)


def parameter(values) -> Tensor:
    """Trainable leaf tensor."""
    return Tensor(values, requires_grad=True)


def _make(values: np.ndarray, parents: tuple[Tensor, ...],
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _accum(t: Tensor, piece: np.ndarray, fresh: bool = False) -> None:
    # ``fresh`` promises the piece is newly allocated and unaliased, so it
    # can be adopted directly; pass-through pieces alias a child's grad
    # buffer and must be copied on first store.
    if t.grad is None:
        t.grad = piece if fresh else np.array(piece)
    else:
        t.grad += piece


class ParamStore:
    """Ordered, uniquely named collection of trainable tensors.

    Also owns the per-parameter optimizer accumulators (squared-gradient
    average and momentum buffer) so that a checkpoint can capture the
    full training state.
    """

    def __init__(self) -> None:
        self._entries: dict[str, Tensor] = {}
        self.opt_state: dict[str, dict[str, np.ndarray]] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        if not tensor.requires_grad:
            raise ValueError(f"parameter {name!r} must have requires_grad=True")
        self._entries[name] = tensor
        self.opt_state[name] = {
            "sq": np.zeros_like(tensor.values),
            "mom": np.zeros_like(tensor.values),
        }
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._entries.items())

    def tensors(self) -> Iterator[Tensor]:
        return iter(self._entries.values())

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def num_values(self) -> int:
        return sum(t.values.size for t in self._entries.values())


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_geometry(h: int, w: int, kh: int, kw: int, stride: int, dilation: int,
                   padding: str) -> tuple[int, int, int, int]:
    keh = dilation * (kh - 1) + 1
    kew = dilation * (kw - 1) + 1
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"'same' padding needs odd kernel dims, got {kh}x{kw}")
        ph, pw = (keh - 1) // 2, (kew - 1) // 2
    elif padding == "valid":
        ph = pw = 0
        if h < keh or w < kew:
            raise ValueError(
                f"'valid' conv needs input >= effective kernel: input {h}x{w}, kernel {keh}x{kew}")
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    oh = (h + 2 * ph - keh) // stride + 1
    ow = (w + 2 * pw - kew) // stride + 1
    return ph, pw, oh, ow


def _pad_zeros(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 2 * ph, w + 2 * pw))
    out[:, :, ph:ph + h, pw:pw + w] = x
    return out


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, *,
           stride: int = 1, dilation: int = 1, padding: str = "same") -> Tensor:
    """2-D convolution (cross-correlation) of x[B,Cin,H,W] with kernel[Cout,Cin,kh,kw].

    ``bias``, when given, has dims (1, Cout, 1, 1). Zero padding for
    "same"; gradients are recorded for input, kernel and bias.
    """
    if stride < 1 or dilation < 1:
        raise ValueError("stride and dilation must be positive")
    B, Cin, H, W = x.dims
    Cout, Ck, kh, kw = kernel.dims
    if Ck != Cin:
        raise ValueError(
            f"conv2d channel mismatch: input has {Cin} channels {x.dims}, "
            f"kernel expects {Ck} {kernel.dims}")
    if bias is not None and bias.dims != (1, Cout, 1, 1):
        raise ValueError(f"bias dims must be (1,{Cout},1,1), got {bias.dims}")
    ph, pw, oh, ow = _conv_geometry(H, W, kh, kw, stride, dilation, padding)

    if kh == 1 and kw == 1 and stride == 1:
        return _conv1x1(x, kernel, bias)

    kmat = kernel.values.reshape(Cout, Cin * kh * kw)

    def tap_slices(i: int, j: int) -> tuple[slice, slice]:
        return (slice(i * dilation, i * dilation + stride * oh, stride),
                slice(j * dilation, j * dilation + stride * ow, stride))

    def gather(xp: np.ndarray) -> np.ndarray:
        # Strided slice copies beat fancy indexing by orders of magnitude here.
        cols = np.empty((B, Cin, kh * kw, oh, ow))
        for p in range(kh * kw):
            si, sj = tap_slices(*divmod(p, kw))
            cols[:, :, p] = xp[:, :, si, sj]
        return cols.reshape(B, Cin * kh * kw, oh * ow)

    cols = gather(_pad_zeros(x.values, ph, pw))
    out = np.empty((B, Cout, oh * ow))
    for b in range(B):
        np.dot(kmat, cols[b], out=out[b])
    out = out.reshape(B, Cout, oh, ow)
    if bias is not None:
        out += bias.values
    # Keep the gathered columns when the kernel needs a gradient: the
    # backward pass reuses them for d_kernel instead of regathering.
    cached_cols = cols if kernel.requires_grad else None
    del cols

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward_fn(grad: np.ndarray) -> None:
        if bias is not None and bias.requires_grad:
            _accum(bias, grad.sum(axis=(0, 2, 3)).reshape(1, Cout, 1, 1), fresh=True)
        need_x = x.requires_grad
        need_k = kernel.requires_grad
        if not (need_x or need_k):
            return
        gflat = grad.reshape(B, Cout, oh * ow)
        if need_k:
            cols2 = cached_cols if cached_cols is not None else \
                gather(_pad_zeros(x.values, ph, pw))
            dk = np.zeros((Cout, Cin * kh * kw))
            for b in range(B):
                dk += np.dot(gflat[b], cols2[b].T)
            _accum(kernel, dk.reshape(kernel.dims), fresh=True)
        if need_x:
            dcols = np.empty((B, Cin * kh * kw, oh * ow))
            for b in range(B):
                np.dot(kmat.T, gflat[b], out=dcols[b])
            dcols = dcols.reshape(B, Cin, kh * kw, oh, ow)
            dxp = np.zeros((B, Cin, H + 2 * ph, W + 2 * pw))
            for p in range(kh * kw):
                si, sj = tap_slices(*divmod(p, kw))
                dxp[:, :, si, sj] += dcols[:, :, p]
            dx = dxp if ph == 0 and pw == 0 else \
                np.ascontiguousarray(dxp[:, :, ph:ph + H, pw:pw + W])
            _accum(x, dx, fresh=True)

    return _make(out, parents, backward_fn)


def _conv1x1(x: Tensor, kernel: Tensor, bias: Tensor | None) -> Tensor:
    # Pure channel mixing: one dgemm per image, no patch gathering.
    B, Cin, H, W = x.dims
    Cout = kernel.dims[0]
    kmat = kernel.values.reshape(Cout, Cin)
    xf = x.values.reshape(B, Cin, H * W)
    out = np.empty((B, Cout, H * W))
    for b in range(B):
        np.dot(kmat, xf[b], out=out[b])
    out = out.reshape(B, Cout, H, W)
    if bias is not None:
        out += bias.values

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward_fn(grad: np.ndarray) -> None:
        if bias is not None and bias.requires_grad:
            _accum(bias, grad.sum(axis=(0, 2, 3)).reshape(1, Cout, 1, 1), fresh=True)
        gflat = grad.reshape(B, Cout, H * W)
        if kernel.requires_grad:
            dk = np.zeros((Cout, Cin))
            for b in range(B):
                dk += np.dot(gflat[b], xf[b].T)
            _accum(kernel, dk.reshape(kernel.dims), fresh=True)
        if x.requires_grad:
            dx = np.empty((B, Cin, H * W))
            for b in range(B):
                np.dot(kmat.T, gflat[b], out=dx[b])
            _accum(x, dx.reshape(x.dims), fresh=True)

    return _make(out, parents, backward_fn)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.values, 0.0)
    mask = x.values > 0.0

    def backward_fn(grad: np.ndarray) -> None:
        _accum(x, grad * mask, fresh=True)

    return _make(out, (x,), backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    # exp of the negated magnitude never overflows; both branches share it.
    v = x.values
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward_fn(grad: np.ndarray) -> None:
        _accum(x, grad * out * (1.0 - out), fresh=True)

    return _make(out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# pooling / resizing
# ---------------------------------------------------------------------------

def max_pool2d(x: Tensor, window: int, stride: int, *, padding: str = "valid") -> Tensor:
    """Windowed max; for "same" the border is padded with -inf.

    Gradient is routed to the window argmax, ties to the first position
    in row-major order.
    """
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be positive")
    B, C, H, W = x.dims
    if padding == "same":
        oh = -(-H // stride)
        ow = -(-W // stride)
        pth = max(0, (oh - 1) * stride + window - H)
        ptw = max(0, (ow - 1) * stride + window - W)
        pads = (pth // 2, pth - pth // 2, ptw // 2, ptw - ptw // 2)
    elif padding == "valid":
        if window > H or window > W:
            raise ValueError(f"pool window {window} exceeds spatial extent {H}x{W}")
        oh = (H - window) // stride + 1
        ow = (W - window) // stride + 1
        pads = (0, 0, 0, 0)
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")

    pt, pb, pl, pr = pads
    xp = np.pad(x.values, ((0, 0), (0, 0), (pt, pb), (pl, pr)),
                constant_values=-np.inf) if any(pads) else x.values

    wins = np.empty((B, C, window * window, oh, ow))
    for p in range(window * window):
        i, j = divmod(p, window)
        wins[:, :, p] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    amax = wins.argmax(axis=2)  # first max in row-major window order
    out = wins.max(axis=2)

    def backward_fn(grad: np.ndarray) -> None:
        dxp = np.zeros_like(xp)
        for p in range(window * window):
            m = amax == p
            if not m.any():
                continue
            i, j = divmod(p, window)
            si = slice(i, i + stride * oh, stride)
            sj = slice(j, j + stride * ow, stride)
            dxp[:, :, si, sj] += np.where(m, grad, 0.0)
        dx = dxp[:, :, pt:pt + H, pl:pl + W] if any(pads) else dxp
        _accum(x, dx, fresh=True)

    return _make(out, (x,), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, output dims (B, C, 1, 1)."""
    B, C, H, W = x.dims
    out = x.values.mean(axis=(2, 3), keepdims=True)

    def backward_fn(grad: np.ndarray) -> None:
        _accum(x, np.broadcast_to(grad / (H * W), x.dims).copy(), fresh=True)

    return _make(out, (x,), backward_fn)


def nearest_resize(x: Tensor, factor: int) -> Tensor:
    """Replicate each pixel factor x factor; gradient sums the replicas."""
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        out = x.values.copy()

        def backward_id(grad: np.ndarray) -> None:
            _accum(x, grad)

        return _make(out, (x,), backward_id)

    B, C, H, W = x.dims
    buf = np.empty((B, C, H, factor, W, factor))
    buf[:] = x.values[:, :, :, None, :, None]
    out = buf.reshape(B, C, H * factor, W * factor)

    def backward_fn(grad: np.ndarray) -> None:
        g = grad.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5))
        _accum(x, g, fresh=True)

    return _make(out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis; gradients split back per part."""
    parts = list(parts)
    if not parts:
        raise ValueError("concat_channels needs at least one part")
    b, _, h, w = parts[0].dims
    for p in parts[1:]:
        pb, _, ph, pw = p.dims
        if (pb, ph, pw) != (b, h, w):
            raise ValueError(
                f"concat_channels spatial/batch mismatch: {parts[0].dims} vs {p.dims}")
    out = np.concatenate([p.values for p in parts], axis=1)
    offsets = np.cumsum([0] + [p.dims[1] for p in parts])

    def backward_fn(grad: np.ndarray) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _accum(p, grad[:, lo:hi])

    return _make(out, tuple(parts), backward_fn)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Channel range [start, stop); gradient zero-fills outside the slice."""
    B, C, H, W = x.dims
    if not (0 <= start < stop <= C):
        raise ValueError(f"invalid channel slice [{start}:{stop}) for {C} channels")
    out = x.values[:, start:stop].copy()

    def backward_fn(grad: np.ndarray) -> None:
        dx = np.zeros(x.dims)
        dx[:, start:stop] = grad
        _accum(x, dx, fresh=True)

    return _make(out, (x,), backward_fn)


def mean_channels(x: Tensor) -> Tensor:
    """Channel-wise mean, output dims (B, 1, H, W)."""
    C = x.dims[1]
    out = x.values.mean(axis=1, keepdims=True)

    def backward_fn(grad: np.ndarray) -> None:
        _accum(x, np.broadcast_to(grad / C, x.dims).copy(), fresh=True)

    return _make(out, (x,), backward_fn)


def repeat_batch(x: Tensor, batch: int) -> Tensor:
    """Replicate a single-image tensor along the batch axis."""
    if x.dims[0] != 1:
        raise ValueError(f"repeat_batch expects batch 1, got {x.dims}")
    out = np.broadcast_to(x.values, (batch,) + x.dims[1:]).copy()

    def backward_fn(grad: np.ndarray) -> None:
        _accum(x, grad.sum(axis=0, keepdims=True), fresh=True)

    return _make(out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# elementwise / reductions
# ---------------------------------------------------------------------------

def _check_same_dims(a: Tensor, b: Tensor, op: str) -> None:
    if a.dims != b.dims:
        raise ValueError(f"{op}: dims mismatch {a.dims} vs {b.dims}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dims(a, b, "add")
    out = a.values + b.values

    def backward_fn(grad: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, grad)
        if b.requires_grad:
            _accum(b, grad)

    return _make(out, (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dims(a, b, "sub")
    out = a.values - b.values

    def backward_fn(grad: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, grad)
        if b.requires_grad:
            _accum(b, -grad, fresh=True)

    return _make(out, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dims(a, b, "mul")
    out = a.values * b.values

    def backward_fn(grad: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, grad * b.values, fresh=True)
        if b.requires_grad:
            _accum(b, grad * a.values, fresh=True)

    return _make(out, (a, b), backward_fn)


def add_scalar(x: Tensor, c: float) -> Tensor:
    out = x.values + float(c)

    def backward_fn(grad: np.ndarray) -> None:
        _accum(x, grad)

    return _make(out, (x,), backward_fn)


def mul_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = x.values * c

    def backward_fn(grad: np.ndarray) -> None:
        _accum(x, grad * c, fresh=True)

    return _make(out, (x,), backward_fn)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.values)

    def backward_fn(grad: np.ndarray) -> None:
        _accum(x, grad * out, fresh=True)

    return _make(out, (x,), backward_fn)


def log(x: Tensor) -> Tensor:
    if np.any(x.values <= 0):
        raise ValueError("log: input must be strictly positive")
    out = np.log(x.values)

    def backward_fn(grad: np.ndarray) -> None:
        _accum(x, grad / x.values, fresh=True)

    return _make(out, (x,), backward_fn)


def square(x: Tensor) -> Tensor:
    out = x.values * x.values

    def backward_fn(grad: np.ndarray) -> None:
        _accum(x, grad * (2.0 * x.values), fresh=True)

    return _make(out, (x,), backward_fn)


def reciprocal(x: Tensor) -> Tensor:
    if np.any(x.values == 0):
        raise ValueError("reciprocal: input contains zeros")
    out = 1.0 / x.values

    def backward_fn(grad: np.ndarray) -> None:
        _accum(x, -grad * out * out, fresh=True)

    return _make(out, (x,), backward_fn)


def scale_channels(x: Tensor, a: Tensor) -> Tensor:
    """Multiply x[B,C,H,W] by per-channel weights a[B,C,1,1]."""
    B, C, _, _ = x.dims
    if a.dims != (B, C, 1, 1):
        raise ValueError(f"scale_channels: weights must be ({B},{C},1,1), got {a.dims}")
    out = x.values * a.values

    def backward_fn(grad: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, grad * a.values, fresh=True)
        if a.requires_grad:
            _accum(a, (grad * x.values).sum(axis=(2, 3), keepdims=True), fresh=True)

    return _make(out, (x, a), backward_fn)


def scale_scalar(x: Tensor, s: Tensor) -> Tensor:
    """Multiply a tensor by a learnable scalar of dims (1,1,1,1)."""
    if not s.is_scalar:
        raise ValueError(f"scale_scalar: scale must have dims (1,1,1,1), got {s.dims}")
    out = x.values * s.values[0, 0, 0, 0]

    def backward_fn(grad: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, grad * s.values[0, 0, 0, 0], fresh=True)
        if s.requires_grad:
            _accum(s, np.full((1, 1, 1, 1), (grad * x.values).sum()), fresh=True)

    return _make(out, (x, s), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    """Sum of every element, output dims (1,1,1,1)."""
    out = np.full((1, 1, 1, 1), x.values.sum())

    def backward_fn(grad: np.ndarray) -> None:
        _accum(x, np.full(x.dims, grad[0, 0, 0, 0]), fresh=True)

    return _make(out, (x,), backward_fn)


def sum_per_image(x: Tensor) -> Tensor:
    """Per-image sum over channels and space, output dims (B,1,1,1)."""
    out = x.values.sum(axis=(1, 2, 3), keepdims=True)

    def backward_fn(grad: np.ndarray) -> None:
        _accum(x, np.broadcast_to(grad, x.dims).copy(), fresh=True)

    return _make(out, (x,), backward_fn)


def fused_reduction_attention(x: Tensor, rw: Tensor, rb: Tensor,
                              fw: Tensor, fb: Tensor) -> Tensor:
    """One-node composite: relu(1x1 conv) gated by sigmoid(fc(global mean)).

    Semantically identical to composing conv2d, relu, global_avg_pool,
    conv2d and scale_channels, but materializes no intermediate graph
    nodes; this block appears dozens of times per forward pass, so the
    saved gradient-buffer traffic matters.
    """
    B, Cin, H, W = x.dims
    Cout = rw.dims[0]
    if rw.dims[1] != Cin:
        raise ValueError(
            f"reduction-attention channel mismatch: input has {Cin} channels, "
            f"reduce kernel expects {rw.dims[1]}")
    rmat = rw.values.reshape(Cout, Cin)
    fmat = fw.values.reshape(Cout, Cout)
    xf = x.values.reshape(B, Cin, H * W)

    pre = np.empty((B, Cout, H * W))
    for b in range(B):
        np.dot(rmat, xf[b], out=pre[b])
    pre += rb.values.reshape(1, Cout, 1)
    mask = pre > 0.0
    red = np.where(mask, pre, 0.0)                       # relu(conv)
    desc = red.mean(axis=2)                              # (B, Cout)
    z = desc @ fmat.T + fb.values.reshape(1, Cout)
    e = np.exp(-np.abs(z))
    gate = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = red * gate[:, :, None]

    def backward_fn(grad: np.ndarray) -> None:
        g = grad.reshape(B, Cout, H * W)
        d_gate = (g * red).sum(axis=2)                   # (B, Cout)
        dz = d_gate * gate * (1.0 - gate)
        if fw.requires_grad:
            _accum(fw, (dz.T @ desc).reshape(fw.dims), fresh=True)
        if fb.requires_grad:
            _accum(fb, dz.sum(axis=0).reshape(fb.dims), fresh=True)
        d_desc = dz @ fmat                               # (B, Cout)
        d_red = g * gate[:, :, None]
        d_red += (d_desc / (H * W))[:, :, None]
        d_pre = np.where(mask, d_red, 0.0)
        if rb.requires_grad:
            _accum(rb, d_pre.sum(axis=(0, 2)).reshape(rb.dims), fresh=True)
        if rw.requires_grad:
            drw = np.zeros((Cout, Cin))
            for b in range(B):
                drw += np.dot(d_pre[b], xf[b].T)
            _accum(rw, drw.reshape(rw.dims), fresh=True)
        if x.requires_grad:
            dx = np.empty((B, Cin, H * W))
            for b in range(B):
                np.dot(rmat.T, d_pre[b], out=dx[b])
            _accum(x, dx.reshape(x.dims), fresh=True)

    return _make(out.reshape(B, Cout, H, W), (x, rw, rb, fw, fb), backward_fn)


# ---------------------------------------------------------------------------
# Gaussian kernels and smoothing
# ---------------------------------------------------------------------------

def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def gaussian_kernel1d(sigma: float, size: int | None = None) -> np.ndarray:
    """Normalized 1-D Gaussian profile; size defaults to 2*round(3*sigma)+1."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if size is None:
        size = 2 * _round_half_up(3.0 * sigma) + 1
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {size}")
    r = size // 2
    d = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(d * d) / (2.0 * sigma * sigma))
    return g / g.sum()


def gaussian_kernel2d(sigma: float, size: int | None = None) -> Tensor:
    """Constant (1,1,k,k) Gaussian kernel, renormalized to sum exactly 1."""
    g = gaussian_kernel1d(sigma, size)
    k2 = np.outer(g, g)
    k2 /= k2.sum()
    return constant(k2[None, None])


def gaussian_blur(x: Tensor, sigma: float, size: int | None = None) -> Tensor:
    """Separable Gaussian smoothing with border renormalization.

    Zero-padded correlation divided by the blurred all-ones mask, so a
    flat input stays exactly flat and interior pixels (further than the
    kernel radius from the border) match a plain "same" convolution.
    """
    g = gaussian_kernel1d(sigma, size)
    H, W = x.dims[2], x.dims[3]
    norm = _blur2d(np.ones((1, 1, H, W)), g)
    out = _blur2d(x.values, g) / norm

    def backward_fn(grad: np.ndarray) -> None:
        # Zero-padded Gaussian correlation is self-adjoint.
        _accum(x, _blur2d(grad / norm, g), fresh=True)

    return _make(out, (x,), backward_fn)


def _blur2d(v: np.ndarray, g: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(v, g, axis=2, mode="constant", cval=0.0)
    return ndimage.correlate1d(out, g, axis=3, mode="constant", cval=0.0)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad tensor reachable from loss.

    Gradients accumulate: a tensor used in several branches receives the
    sum of the branch contributions.
    """
    if not loss.is_scalar:
        raise ValueError(f"backward requires a scalar loss (1,1,1,1), got dims {loss.dims}")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    loss.grad = np.ones((1, 1, 1, 1))
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)
            # The graph is single-use (rebuilt every forward pass), so the
            # closure and the intermediate grad can be released right away.
            node._backward_fn = None
            node._parents = ()
            node.grad = None


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3,
               sample: int | None = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per element is |analytic - numeric| / max(1, |numeric|).
    ``sample`` limits the check to that many randomly chosen elements of
    ``x`` (all elements when None), which keeps large inputs tractable.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if not x.requires_grad:
        raise ValueError("grad_check input must have requires_grad=True")

    x.grad = None
    out = f(x)
    if not out.is_scalar:
        raise ValueError("grad_check requires a scalar-valued function")
    out.backward()
    if x.grad is None:
        raise ValueError("function output does not depend on the input")
    analytic = x.grad.ravel().copy()

    n = x.values.size
    if sample is not None and sample < n:
        rng = np.random.default_rng(seed)
        idx = rng.choice(n, size=sample, replace=False)
    else:
        idx = np.arange(n)

    flat = x.values.ravel()
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x).item()
        flat[i] = orig - h
        fm = f(x).item()
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * h)
        err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
