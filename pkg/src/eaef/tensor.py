"""Dense NCHW tensors and the differentiable ops the fusion graph is built from.

Every op is a plain function. When a :class:`Tape` is passed, the op appends a
record holding its analytic backward function; :meth:`Tape.backward` replays the
records in reverse order. There is no general autodiff engine beyond that.

Activations and parameters default to float32. Reductions accumulate in
float64. Ops preserve the dtype of their inputs, so the gradient oracle can run
the same graph in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from numbers import Number
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    """Raised when tensor shapes violate an op's contract."""


class Tensor:
    """A dense value grid with an optional gradient slot."""

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def set_grad(self, grad: np.ndarray | None) -> None:
        if grad is not None and grad.shape != self.data.shape:
            raise DimensionError(f"grad shape {grad.shape} != value shape {self.data.shape}")
        self.grad = grad

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), name=self.name)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), name=self.name)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    @staticmethod
    def zeros(shape, dtype=DEFAULT_DTYPE) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype))

    @staticmethod
    def full(shape, value: float, dtype=DEFAULT_DTYPE) -> "Tensor":
        return Tensor(np.full(shape, value, dtype=dtype))


@dataclass
class DenseLayerParams:
    """Affine layer ``y = x @ weight.T + bias``."""

    weight: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(
                f"dense layer weight {self.weight.shape} and bias {self.bias.shape} disagree"
            )

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]


@dataclass
class ConvParams:
    """Convolution kernel ``(out, in, kh, kw)``; depthwise kernels are ``(C, 1, kh, kw)``."""

    kernel: Tensor
    bias: Tensor
    mode: str = "standard"

    def __post_init__(self):
        if self.mode not in ("standard", "depthwise"):
            raise ValueError(f"unknown conv mode {self.mode!r}")
        if self.kernel.ndim != 4 or self.bias.shape != (self.kernel.shape[0],):
            raise DimensionError(
                f"conv kernel {self.kernel.shape} and bias {self.bias.shape} disagree"
            )
        if self.mode == "depthwise" and self.kernel.shape[1] != 1:
            raise DimensionError("depthwise kernel must have one input slice per channel")

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[0] if self.mode == "depthwise" else self.kernel.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.kernel.shape[2], self.kernel.shape[3]


RELU_GAIN = float(np.sqrt(6.0))


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=DEFAULT_DTYPE,
                 gain: float = 1.0) -> Tensor:
    """Zero-mean uniform on ``[-gain / sqrt(fan_in), gain / sqrt(fan_in)]``."""
    bound = gain / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype))


def init_dense(rng, in_features: int, out_features: int, dtype=DEFAULT_DTYPE) -> DenseLayerParams:
    return DenseLayerParams(
        uniform_init(rng, (out_features, in_features), in_features, dtype),
        Tensor.zeros((out_features,), dtype),
    )


def init_conv(rng, in_channels: int, out_channels: int, k: int = 3, mode: str = "standard",
              dtype=DEFAULT_DTYPE, gain: float = RELU_GAIN) -> ConvParams:
    if mode == "depthwise":
        if in_channels != out_channels:
            raise DimensionError("depthwise conv requires in_channels == out_channels")
        shape, fan_in = (out_channels, 1, k, k), k * k
    else:
        shape, fan_in = (out_channels, in_channels, k, k), in_channels * k * k
    return ConvParams(uniform_init(rng, shape, fan_in, dtype, gain), Tensor.zeros((out_channels,), dtype), mode)


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    backward: BackwardFn


class Gradients:
    """Mapping from tensors to gradient arrays produced by one backward pass."""

    def __init__(self, grads: dict[int, np.ndarray], owners: dict[int, Tensor]):
        self._grads = grads
        self._owners = owners

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None or self._owners.get(id(t)) is not t:
            return np.zeros_like(t.data)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads and self._owners.get(id(t)) is t

    def assign(self, tensors: Iterable[Tensor]) -> None:
        for t in tensors:
            t.set_grad(self[t])


@dataclass
class Tape:
    """Ordered list of op records; replayed backwards to get gradients."""

    records: list = field(default_factory=list)

    def record(self, out: Tensor, inputs: tuple, backward: BackwardFn) -> None:
        self.records.append(_Record(out, inputs, backward))

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, out: Tensor, grad: np.ndarray | None = None) -> Gradients:
        if grad is None:
            grad = np.ones_like(out.data)
        grad = np.asarray(grad, dtype=out.dtype)
        if grad.shape != out.shape:
            raise DimensionError(f"seed grad {grad.shape} != output {out.shape}")
        grads: dict[int, np.ndarray] = {id(out): grad}
        owners: dict[int, Tensor] = {id(out): out}
        for rec in reversed(self.records):
            g = grads.get(id(rec.out))
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or inp is None:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    owners[key] = inp
        return Gradients(grads, owners)


def _result(arr: np.ndarray, tape: Tape | None, inputs: tuple, backward: BackwardFn) -> Tensor:
    out = Tensor(arr)
    out.data.flags.writeable = False
    if tape is not None:
        tape.record(out, inputs, backward)
    return out


def _require_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _require_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{op}: expected N x C x H x W, got {x.shape}")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise DimensionError(f"{op}: zero-sized spatial dims {x.shape}")


# --------------------------------------------------------------------------
# Pooling
# --------------------------------------------------------------------------

def global_avg_pool(x: Tensor, tape: Tape | None = None) -> Tensor:
    _require_4d(x, "global_avg_pool")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)

    def backward(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).astype(x.dtype),)

    return _result(out, tape, (x,), backward)


def global_max_pool(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Max over H x W; the gradient goes to the first maximal cell in row-major order."""
    _require_4d(x, "global_max_pool")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)
    out = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]

    def backward(g):
        gx = np.zeros((n, c, h * w), dtype=x.dtype)
        np.put_along_axis(gx, idx[:, :, None], g[:, :, None], axis=2)
        return (gx.reshape(x.shape),)

    return _result(out, tape, (x,), backward)


# --------------------------------------------------------------------------
# Dense layers and activations
# --------------------------------------------------------------------------

def linear(v: Tensor, layer: DenseLayerParams, tape: Tape | None = None) -> Tensor:
    if v.ndim != 2 or v.shape[1] != layer.in_features:
        raise DimensionError(f"linear: input {v.shape} vs weight {layer.weight.shape}")
    W, b = layer.weight, layer.bias
    out = v.data @ W.data.T + b.data

    def backward(g):
        return g @ W.data, g.T @ v.data, g.sum(axis=0, dtype=np.float64).astype(b.dtype)

    return _result(out, tape, (v, W, b), backward)


def relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    mask = x.data > 0
    # maximum keeps NaN visible to the non-finite checks
    return _result(np.maximum(x.data, x.dtype.type(0)), tape, (x,), lambda g: (g * mask,))


def identity(x: Tensor, tape: Tape | None = None) -> Tensor:
    return x


ACTIVATIONS = {"relu": relu, "identity": identity}


def dense_mlp(v: Tensor, layers: Sequence[DenseLayerParams], hidden_activation: str = "relu",
              tape: Tape | None = None) -> Tensor:
    """Affine layers with ``hidden_activation`` between them and none after the last."""
    if not layers:
        raise DimensionError("dense_mlp: empty layer list")
    act = ACTIVATIONS[hidden_activation]
    for i, layer in enumerate(layers):
        v = linear(v, layer, tape)
        if i < len(layers) - 1:
            v = act(v, tape)
    return v


def sigmoid(x: Tensor, tape: Tape | None = None) -> Tensor:
    s = expit(x.data)
    return _result(s, tape, (x,), lambda g: (g * s * (1 - s),))


# --------------------------------------------------------------------------
# Convolutions
# --------------------------------------------------------------------------

def _check_odd(kh: int, kw: int, op: str) -> None:
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"{op}: kernel size must be odd, got {kh}x{kw}")


def depthwise_conv(x: Tensor, p: ConvParams, tape: Tape | None = None) -> Tensor:
    """Per-channel same-padded spatial convolution (zero padding)."""
    _require_4d(x, "depthwise_conv")
    if p.mode != "depthwise":
        raise DimensionError("depthwise_conv: params are not depthwise")
    n, c, h, w = x.shape
    if p.out_channels != c:
        raise DimensionError(f"depthwise_conv: {c} channels vs kernel for {p.out_channels}")
    kh, kw = p.kernel_size
    _check_odd(kh, kw, "depthwise_conv")
    ph, pw = kh // 2, kw // 2
    K, b = p.kernel.data[:, 0], p.bias.data
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros(x.shape, dtype=np.result_type(x.dtype, K.dtype))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i:i + h, j:j + w] * K[None, :, i, j, None, None]
    out += b[None, :, None, None]

    def backward(g):
        gxp = np.zeros_like(xp)
        gK = np.zeros((c, 1, kh, kw), dtype=K.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + h, j:j + w] += g * K[None, :, i, j, None, None]
                gK[:, 0, i, j] = np.sum(g * xp[:, :, i:i + h, j:j + w], axis=(0, 2, 3), dtype=np.float64)
        gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(b.dtype)
        return gxp[:, :, ph:ph + h, pw:pw + w], gK, gb

    return _result(out, tape, (x, p.kernel, p.bias), backward)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Rows are (n, y, x) output positions, columns are (c, i, j) taps."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)


def conv2d(x: Tensor, p: ConvParams, stride: int = 1, tape: Tape | None = None) -> Tensor:
    """Standard convolution with zero padding ``k // 2``."""
    _require_4d(x, "conv2d")
    if p.mode != "standard":
        raise DimensionError("conv2d: params are depthwise")
    n, c, h, w = x.shape
    K, b = p.kernel.data, p.bias.data
    o, ci, kh, kw = K.shape
    if ci != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {ci}")
    _check_odd(kh, kw, "conv2d")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (w + 2 * pw - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    Kmat = K.reshape(o, -1)
    out = (cols @ Kmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2) + b[None, :, None, None]

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gK = (gmat.T @ cols).reshape(K.shape)
        gxp = np.zeros_like(xp)
        if stride == 1:
            # full correlation of the grad with the flipped kernel
            gd = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            fh, fw = ho + kh - 1, wo + kw - 1
            Kflip = K[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            gfull = (_im2col(gd, kh, kw, 1, fh, fw) @ Kflip.T).reshape(n, fh, fw, c)
            gxp[:, :, :fh, :fw] = gfull.transpose(0, 3, 1, 2)
        else:
            gcols = (gmat @ Kmat).reshape(n, ho, wo, c, kh, kw)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(b.dtype)
        return np.ascontiguousarray(gxp[:, :, ph:ph + h, pw:pw + w]), gK.astype(K.dtype), gb

    return _result(np.ascontiguousarray(out), tape, (x, p.kernel, p.bias), backward)


def conv1x1(x: Tensor, p: ConvParams, tape: Tape | None = None) -> Tensor:
    """Per-pixel linear map across channels."""
    _require_4d(x, "conv1x1")
    if p.mode != "standard" or p.kernel_size != (1, 1):
        raise DimensionError("conv1x1: expected a standard 1x1 kernel")
    if p.in_channels != x.shape[1]:
        raise DimensionError(f"conv1x1: input has {x.shape[1]} channels, kernel expects {p.in_channels}")
    W, b = p.kernel.data[:, :, 0, 0], p.bias.data
    n, c, h, w = x.shape
    xm = x.data.reshape(n, c, h * w)
    out = (W @ xm + b[None, :, None]).reshape(n, -1, h, w)

    def backward(g):
        gm = g.reshape(n, -1, h * w)
        gx = (W.T @ gm).reshape(x.shape)
        gW = np.tensordot(gm, xm, axes=([0, 2], [0, 2]))[:, :, None, None]
        gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(b.dtype)
        return gx, gW.astype(W.dtype), gb

    return _result(out, tape, (x, p.kernel, p.bias), backward)


def upsample_nearest(x: Tensor, factor: int, tape: Tape | None = None) -> Tensor:
    _require_4d(x, "upsample_nearest")
    n, c, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _result(out, tape, (x,), backward)


# --------------------------------------------------------------------------
# Normalisation and channel ops
# --------------------------------------------------------------------------

def _softmax(z: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return (e / e.sum(axis=axis, keepdims=True, dtype=np.float64)).astype(z.dtype)


def spatial_softmax(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Softmax over the H*W cells of each (n, c) map."""
    _require_4d(x, "spatial_softmax")
    n, c, h, w = x.shape
    s = _softmax(x.data.reshape(n, c, h * w), axis=2)

    def backward(g):
        g = g.reshape(n, c, h * w)
        dot = np.sum(g * s, axis=2, keepdims=True, dtype=np.float64)
        return ((s * (g - dot)).astype(x.dtype).reshape(x.shape),)

    return _result(s.reshape(x.shape), tape, (x,), backward)


def channel_softmax(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Softmax across channels at each pixel."""
    _require_4d(x, "channel_softmax")
    s = _softmax(x.data, axis=1)

    def backward(g):
        dot = np.sum(g * s, axis=1, keepdims=True, dtype=np.float64)
        return ((s * (g - dot)).astype(x.dtype),)

    return _result(s, tape, (x,), backward)


def channel_scale(x: Tensor, g: Tensor, tape: Tape | None = None) -> Tensor:
    """``out[n, c, h, w] = x[n, c, h, w] * g[n, c]``."""
    _require_4d(x, "channel_scale")
    if g.shape != x.shape[:2]:
        raise DimensionError(f"channel_scale: gate {g.shape} vs features {x.shape}")
    out = x.data * g.data[:, :, None, None]

    def backward(go):
        gx = go * g.data[:, :, None, None]
        gg = np.sum(go * x.data, axis=(2, 3), dtype=np.float64).astype(g.dtype)
        return gx, gg

    return _result(out, tape, (x, g), backward)


def channel_broadcast(x: Tensor, channels: int, tape: Tape | None = None) -> Tensor:
    """Repeat a single-channel map ``(N, 1, H, W)`` across ``channels``."""
    _require_4d(x, "channel_broadcast")
    if x.shape[1] != 1:
        raise DimensionError(f"channel_broadcast: expected 1 channel, got {x.shape[1]}")
    out = np.repeat(x.data, channels, axis=1)
    return _result(out, tape, (x,), lambda g: (g.sum(axis=1, keepdims=True),))


def concat_channels(x: Tensor, y: Tensor, tape: Tape | None = None) -> Tensor:
    if x.ndim != y.ndim or x.shape[0] != y.shape[0] or x.shape[2:] != y.shape[2:]:
        raise DimensionError(f"concat_channels: {x.shape} vs {y.shape}")
    cx = x.shape[1]
    out = np.concatenate([x.data, y.data], axis=1)
    return _result(out, tape, (x, y), lambda g: (g[:, :cx], g[:, cx:]))


def channel_slice(z: Tensor, start: int, stop: int, tape: Tape | None = None) -> Tensor:
    if not 0 <= start < stop <= z.shape[1]:
        raise DimensionError(f"channel_slice: [{start}, {stop}) outside {z.shape[1]} channels")

    def backward(g):
        gz = np.zeros_like(z.data)
        gz[:, start:stop] = g
        return (gz,)

    return _result(z.data[:, start:stop], tape, (z,), backward)


def split_channels(z: Tensor, tape: Tape | None = None) -> tuple[Tensor, Tensor]:
    c2 = z.shape[1]
    if c2 % 2:
        raise DimensionError(f"split_channels: odd channel count {c2}")
    half = c2 // 2
    return channel_slice(z, 0, half, tape), channel_slice(z, half, c2, tape)


# --------------------------------------------------------------------------
# Elementwise
# --------------------------------------------------------------------------

def add(a: Tensor, b: "Tensor | float", tape: Tape | None = None) -> Tensor:
    if isinstance(b, Number):
        return _result(a.data + a.dtype.type(b), tape, (a,), lambda g: (g,))
    _require_same(a, b, "add")
    return _result(a.data + b.data, tape, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: "Tensor | float", tape: Tape | None = None) -> Tensor:
    if isinstance(b, Number):
        return scalar_mul(a, b, tape)
    _require_same(a, b, "mul")
    return _result(a.data * b.data, tape, (a, b), lambda g: (g * b.data, g * a.data))


def scalar_mul(a: Tensor, s: float, tape: Tape | None = None) -> Tensor:
    s = a.dtype.type(s)
    return _result(a.data * s, tape, (a,), lambda g: (g * s,))


def scalar_add(a: Tensor, s: float, tape: Tape | None = None) -> Tensor:
    return _result(a.data + a.dtype.type(s), tape, (a,), lambda g: (g,))


def one_minus(a: Tensor, tape: Tape | None = None) -> Tensor:
    return _result(a.dtype.type(1) - a.data, tape, (a,), lambda g: (-g,))
