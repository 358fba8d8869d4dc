"""Small dense-tensor engine: conv, pooling, upsampling, activations, Adam.

Tensors are plain numpy arrays laid out as (batch, channel, height, width).
Layers cache what they need in ``forward`` and expose an explicit
``backward(upstream) -> d_input`` that also accumulates parameter gradients.
There is no graph autodiff; models are fixed sequential pipelines.
"""
from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

PAD_MODES = ("zero", "circular")


class ShapeError(ValueError):
    """Raised when an array does not have the expected size along a dimension."""

    def __init__(self, what: str, dim: str, expected, got):
        self.what = what
        self.dim = dim
        self.expected = expected
        self.got = got
        super().__init__(f"{what}: dimension {dim!r} expected {expected}, got {got}")


class NonFiniteError(FloatingPointError):
    pass


def seeded_rng(seed: int) -> np.random.Generator:
    """Return the project-wide generator: numpy's PCG64 seeded with ``seed``.

    PCG64 output for a given seed is fixed by numpy's stream-compatibility
    policy, so identical seeds give identical streams on every platform.
    """
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"non-finite values produced by {where}")
    return x


def _check_4d(x: np.ndarray, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(what, "ndim", 4, x.ndim)


@dataclass
class Parameter:
    """Trainable array with its gradient and Adam moment buffers."""

    value: np.ndarray
    grad: np.ndarray = field(init=False)
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def astype(self, dtype) -> None:
        self.value = self.value.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.m = self.m.astype(dtype)
        self.v = self.v.astype(dtype)


# ---------------------------------------------------------------------------
# functional kernels


def _pad(x: np.ndarray, pad: int, mode: str) -> np.ndarray:
    if pad == 0:
        return x
    if mode == "zero":
        return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    if mode == "circular":
        return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="wrap")
    raise ValueError(f"unknown padding mode {mode!r}; expected one of {PAD_MODES}")


def _unpad(dxp: np.ndarray, pad: int, mode: str, h: int, w: int) -> np.ndarray:
    """Adjoint of ``_pad``: fold gradients of the padded array back onto the input."""
    if pad == 0:
        return dxp
    if mode == "zero":
        return dxp[:, :, pad:pad + h, pad:pad + w]
    rows = (np.arange(dxp.shape[2]) - pad) % h
    cols = (np.arange(dxp.shape[3]) - pad) % w
    tmp = np.zeros(dxp.shape[:2] + (h, dxp.shape[3]), dtype=dxp.dtype)
    np.add.at(tmp, (slice(None), slice(None), rows), dxp)
    out = np.zeros(dxp.shape[:2] + (h, w), dtype=dxp.dtype)
    np.add.at(out, (slice(None), slice(None), slice(None), cols), tmp)
    return out


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d_forward(x, weight, bias, stride=1, padding=0, mode="zero"):
    """Cross-correlate ``x`` (N,Cin,H,W) with ``weight`` (Cout,Cin,kh,kw).

    Returns ``(out, cache)``; pass ``cache`` to :func:`conv2d_backward`.
    """
    _check_4d(x, "conv2d input")
    cout, cin, kh, kw = weight.shape
    n, c, h, w = x.shape
    if c != cin:
        raise ShapeError("conv2d input", "channels", cin, c)
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d kernel", "kernel size (odd)", "odd", (kh, kw))
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError("conv2d bias", "length", cout, bias.shape)
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d input", "spatial size", f">= {kh}x{kw} after padding", (h, w))

    xp = _pad(x, padding, mode)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    out = cols @ weight.reshape(cout, -1).T
    if bias is not None:
        out += bias
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    cache = (cols, x.shape, stride, padding, mode)
    return np.ascontiguousarray(out), cache


def conv2d_backward(upstream, cache, weight):
    """Return ``(d_input, d_weight, d_bias)`` for a forward call's ``cache``."""
    if cache is None:
        raise RuntimeError("conv2d_backward called without a forward cache")
    cols, (n, cin, h, w), stride, padding, mode = cache
    cout, _, kh, kw = weight.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if upstream.shape != (n, cout, ho, wo):
        raise ShapeError("conv2d upstream", "shape", (n, cout, ho, wo), upstream.shape)

    g = upstream.transpose(0, 2, 3, 1).reshape(-1, cout)
    d_weight = (g.T @ cols).reshape(weight.shape)
    d_bias = g.sum(axis=0)
    dcols = (g @ weight.reshape(cout, -1)).reshape(n, ho, wo, cin, kh, kw)

    hp, wp = h + 2 * padding, w + 2 * padding
    dxp = np.zeros((n, cin, hp, wp), dtype=upstream.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                dcols[..., i, j].transpose(0, 3, 1, 2)
            )
    return _unpad(dxp, padding, mode, h, w), d_weight, d_bias


def separable_factors(kernel):
    """Return (column, row) vectors with ``outer(column, row) == kernel``, or None."""
    kernel = np.asarray(kernel, dtype=np.float64)
    u, sv, vt = np.linalg.svd(kernel)
    if sv[1:].size and sv[1:].max() > 1e-12 * sv[0]:
        return None
    col, row = u[:, 0] * np.sqrt(sv[0]), vt[0] * np.sqrt(sv[0])
    if not np.allclose(np.outer(col, row), kernel, rtol=0, atol=1e-15):
        return None
    return col, row


def depthwise_forward(x, kernel, stride=1, padding=0, mode="zero"):
    """Apply one fixed 2-D ``kernel`` to every channel independently.

    Separable kernels run as a vertical then a horizontal 1-D pass.
    """
    _check_4d(x, "depthwise input")
    kernel = np.asarray(kernel, dtype=np.float64)
    kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("depthwise kernel", "kernel size (odd)", "odd", (kh, kw))
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError("depthwise input", "spatial size", f">= {kh}x{kw} after padding", (h, w))
    xp = _pad(x, padding, mode)
    t = x.dtype.type
    factors = separable_factors(kernel)
    if factors is not None:
        col, row = factors
        tmp = np.zeros((n, c, ho, xp.shape[3]), dtype=x.dtype)
        for i in range(kh):
            tmp += t(col[i]) * xp[:, :, i:i + stride * ho:stride, :]
        out = np.zeros((n, c, ho, wo), dtype=x.dtype)
        for j in range(kw):
            out += t(row[j]) * tmp[:, :, :, j:j + stride * wo:stride]
    else:
        out = np.zeros((n, c, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                out += t(kernel[i, j]) * xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return out, (x.shape, stride, padding, mode)


def depthwise_backward(upstream, cache, kernel):
    (n, c, h, w), stride, padding, mode = cache
    kernel = np.asarray(kernel, dtype=np.float64)
    kh, kw = kernel.shape
    ho, wo = upstream.shape[2:]
    hp, wp = h + 2 * padding, w + 2 * padding
    t = upstream.dtype.type
    dxp = np.zeros((n, c, hp, wp), dtype=upstream.dtype)
    factors = separable_factors(kernel)
    if factors is not None:
        col, row = factors
        dtmp = np.zeros((n, c, ho, wp), dtype=upstream.dtype)
        for j in range(kw):
            dtmp[:, :, :, j:j + stride * wo:stride] += t(row[j]) * upstream
        for i in range(kh):
            dxp[:, :, i:i + stride * ho:stride, :] += t(col[i]) * dtmp
    else:
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += t(kernel[i, j]) * upstream
    return _unpad(dxp, padding, mode, h, w)


def avgpool2d(x, k, stride, padding=0, mode="zero"):
    """Mean over k x k windows. Zero-padded windows still divide by k*k."""
    if k < 1:
        raise ValueError(f"pool size must be >= 1, got {k}")
    kernel = np.full((k, k), 1.0 / (k * k), dtype=x.dtype)
    if k % 2 == 0:
        raise ShapeError("avgpool2d", "kernel size (odd)", "odd", k)
    return depthwise_forward(x, kernel, stride, padding, mode)


def avgpool2d_backward(upstream, cache, k):
    kernel = np.full((k, k), 1.0 / (k * k), dtype=upstream.dtype)
    return depthwise_backward(upstream, cache, kernel)


def upsample_nearest(x, factor):
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    return x.repeat(factor, axis=2).repeat(factor, axis=3)


def upsample_nearest_backward(upstream, factor):
    n, c, h, w = upstream.shape
    return upstream.reshape(n, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5))


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def mse_loss(pred, target):
    """Mean squared error and its gradient with respect to ``pred``."""
    if pred.shape != target.shape:
        raise ShapeError("mse_loss", "shape", target.shape, pred.shape)
    diff = pred - target
    loss = float(np.mean(diff * diff))
    return loss, (2.0 / diff.size) * diff


# ---------------------------------------------------------------------------
# layers


class Layer:
    def __getstate__(self):
        # forward caches are scratch state; copies start without them
        return {k: v for k, v in self.__dict__.items() if not k.startswith("_")}

    def params(self) -> list[tuple[str, Parameter]]:
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def to(self, dtype) -> "Layer":
        for _, p in self.params():
            p.astype(dtype)
        return self


def init_conv(rng: np.random.Generator, cout, cin, k, dtype=DEFAULT_DTYPE):
    """Uniform +/- sqrt(6 / fan_in) weights and zero bias."""
    bound = np.sqrt(6.0 / (cin * k * k))
    w = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(dtype)
    return Parameter(w), Parameter(np.zeros(cout, dtype=dtype))


class Conv2d(Layer):
    def __init__(self, cin, cout, k, stride=1, padding=None, mode="zero",
                 rng=None, dtype=DEFAULT_DTYPE):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.mode = mode
        self.weight, self.bias = init_conv(rng if rng is not None else seeded_rng(0),
                                           cout, cin, k, dtype)
        self._cache = None

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x):
        out, self._cache = conv2d_forward(x, self.weight.value, self.bias.value,
                                          self.stride, self.padding, self.mode)
        return out

    def backward(self, upstream):
        dx, dw, db = conv2d_backward(upstream, self._cache, self.weight.value)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class FixedDepthwise(Layer):
    """Depthwise filtering with a constant kernel; contributes no parameters."""

    def __init__(self, kernel, stride=1, padding=None, mode="zero"):
        self.kernel = np.asarray(kernel, dtype=np.float64)
        self.kernel.setflags(write=False)
        self.stride = stride
        self.padding = self.kernel.shape[0] // 2 if padding is None else padding
        self.mode = mode
        self._cache = None

    def forward(self, x):
        out, self._cache = depthwise_forward(x, self.kernel, self.stride, self.padding, self.mode)
        return out

    def backward(self, upstream):
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        return depthwise_backward(upstream, self._cache, self.kernel)


class AvgPool2d(FixedDepthwise):
    def __init__(self, k, stride, padding=None, mode="zero"):
        if k < 1:
            raise ValueError(f"pool size must be >= 1, got {k}")
        super().__init__(np.full((k, k), 1.0 / (k * k)), stride, padding, mode)
        self.k = k


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, upstream):
        return upstream * self._mask


class Sigmoid(Layer):
    def forward(self, x):
        self._out = sigmoid(x)
        return self._out

    def backward(self, upstream):
        return upstream * self._out * (1.0 - self._out)


class UpsampleNearest(Layer):
    def __init__(self, factor):
        if factor < 1:
            raise ValueError(f"upsample factor must be >= 1, got {factor}")
        self.factor = factor

    def forward(self, x):
        return upsample_nearest(x, self.factor)

    def backward(self, upstream):
        return upsample_nearest_backward(upstream, self.factor)


class Sequential(Layer):
    def __init__(self, layers: Sequence[tuple[str, Layer]]):
        self.layers = list(layers)

    def params(self):
        out = []
        for name, layer in self.layers:
            out.extend((f"{name}.{pname}", p) for pname, p in layer.params())
        return out

    def forward(self, x):
        for _, layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, upstream):
        for _, layer in reversed(self.layers):
            upstream = layer.backward(upstream)
        return upstream


# ---------------------------------------------------------------------------
# optimisation


class Adam:
    """Bias-corrected Adam. ``step`` applies the update and zeroes gradients."""

    def __init__(self, params: Iterable[Parameter], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0

    def step(self) -> None:
        self.t += 1
        adam_step(self.params, self.lr, self.betas, self.eps, self.t)


def adam_step(params, lr, betas=(0.9, 0.999), eps=1e-8, t=1) -> None:
    if t < 1:
        raise ValueError(f"Adam step index must be >= 1, got {t}")
    b1, b2 = betas
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p in params:
        g = p.grad
        p.m *= b1
        p.m += (1.0 - b1) * g
        p.v *= b2
        p.v += (1.0 - b2) * g * g
        m_hat = p.m / c1
        v_hat = p.v / c2
        p.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.value.dtype)
        p.zero_grad()


# ---------------------------------------------------------------------------
# verification


def gradcheck(layer: Layer, input_shape, seed: int = 0, step: float = 1e-5) -> float:
    """Largest relative discrepancy between analytic and central-difference gradients.

    The layer is deep-copied and promoted to float64 first. The scalar probed is
    ``sum(forward(x) * u)`` for a random projection ``u``. For each gradient array
    the error is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``;
    the maximum over the input gradient and every parameter gradient is returned.
    """
    layer = copy.deepcopy(layer).to(np.float64)
    rng = seeded_rng(seed)
    x = rng.standard_normal(input_shape)
    out = layer.forward(x)
    u = rng.standard_normal(out.shape)

    for _, p in layer.params():
        p.zero_grad()
    dx = layer.backward(u)

    def objective():
        return float(np.sum(layer.forward(x) * u))

    def numeric(arr):
        num = np.zeros_like(arr)
        flat, nflat = arr.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = objective()
            flat[i] = orig - step
            fm = objective()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * step)
        return num

    def rel(a, n):
        scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
        if scale == 0.0:
            return 0.0
        return float(np.abs(a - n).max() / scale)

    errors = [rel(dx, numeric(x))]
    for _, p in layer.params():
        errors.append(rel(p.grad, numeric(p.value)))
    return max(errors)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"SHIFTVAR"
CHECKPOINT_VERSION = 1


def save_checkpoint(f: BinaryIO, params: Sequence[tuple[str, Parameter]], meta: str = "") -> None:
    """Write named float32 parameters to a little-endian binary container.

    Layout: magic (8 bytes), version u32, meta length u32 + UTF-8 meta text,
    record count u32, then per record: name length u32, UTF-8 name, ndim u32,
    ndim x u32 dims, raw float32 values in C order.
    """
    meta_b = meta.encode("utf-8")
    f.write(CHECKPOINT_MAGIC)
    f.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta_b)))
    f.write(meta_b)
    f.write(struct.pack("<I", len(params)))
    for name, p in params:
        nb = name.encode("utf-8")
        f.write(struct.pack("<I", len(nb)))
        f.write(nb)
        f.write(struct.pack("<I", p.value.ndim))
        f.write(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
        f.write(np.ascontiguousarray(p.value, dtype="<f4").tobytes())


def load_checkpoint(f: BinaryIO) -> tuple[str, dict[str, np.ndarray]]:
    """Inverse of :func:`save_checkpoint`; returns ``(meta, {name: array})``."""

    def read(n):
        b = f.read(n)
        if len(b) != n:
            raise ValueError("truncated checkpoint")
        return b

    if read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise ValueError("not a shiftvar checkpoint (bad magic)")
    version, meta_len = struct.unpack("<II", read(8))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    meta = read(meta_len).decode("utf-8")
    (count,) = struct.unpack("<I", read(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", read(4))
        name = read(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", read(4))
        shape = struct.unpack(f"<{ndim}I", read(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(read(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    return meta, arrays
