"""Small reverse-mode layer library: conv/linear layers, Adam, gradient checks, checkpoints.

Layers are explicit forward/backward pairs. ``forward`` caches what
``backward`` needs, so a layer instance serves one forward/backward pass at
a time. Parameters accumulate gradients until the optimiser consumes them.
All arrays are NCHW.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, NumericError, ShapeError

LEAKY_SLOPE = 0.2


class Param:
    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.m = np.zeros_like(value)
        self.v = np.zeros_like(value)
        self.step = 0

    @property
    def shape(self):
        return self.value.shape

    def astype(self, dtype) -> None:
        self.value = self.value.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.m = self.m.astype(dtype)
        self.v = self.v.astype(dtype)

    def zero_grad(self) -> None:
        self.grad[...] = 0


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    gain = np.sqrt(2.0 / (1.0 + LEAKY_SLOPE**2))
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _shape_error(op: str, *shapes) -> ShapeError:
    return ShapeError(f"shape error in {op}: " + ", ".join(str(tuple(s)) for s in shapes))


# --- functional ops -------------------------------------------------------------


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Padded [N, C, H, W] -> [N, Ho, Wo, C, k, k] view of strided patches."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.transpose(0, 2, 3, 1, 4, 5)


def _col2im(cols: np.ndarray, padded_shape, k: int, stride: int) -> np.ndarray:
    """Scatter-add channel-first patches [C, k, k, N, Ho, Wo] into a padded [N, C, H, W] image."""
    c, _, _, n, ho, wo = cols.shape
    out = np.zeros((c, n, *padded_shape[2:]), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, i, j]
    return out.transpose(1, 0, 2, 3)


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int = 1, pad: int = 0):
    """Cross-correlation. ``w`` is [Cout, Cin, k, k]. Returns (y, cache)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise _shape_error("conv2d", x.shape, w.shape)
    k = w.shape[2]
    if k % 2 == 0:
        raise _shape_error("conv2d (kernel must be odd)", w.shape)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    if xp.shape[2] < k or xp.shape[3] < k:
        raise _shape_error("conv2d", x.shape, w.shape)
    cols = _im2col(xp, k, stride)
    n, ho, wo = cols.shape[:3]
    cols2 = cols.reshape(n * ho * wo, -1)
    y = cols2 @ w.reshape(w.shape[0], -1).T
    if b is not None:
        y += b
    y = y.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y), (cols2, xp.shape, x.shape, w, stride, pad, (n, ho, wo))


def conv2d_backward(dy: np.ndarray, cache):
    cols2, xp_shape, x_shape, w, stride, pad, (n, ho, wo) = cache
    k = w.shape[2]
    dy_c = dy.transpose(1, 0, 2, 3).reshape(dy.shape[1], -1)  # [Cout, N*Ho*Wo]
    dw = (dy_c @ cols2).reshape(w.shape)
    db = dy_c.sum(axis=1)
    dcols = (w.reshape(w.shape[0], -1).T @ dy_c).reshape(w.shape[1], k, k, n, ho, wo)
    dxp = _col2im(dcols, xp_shape, k, stride)
    if pad:
        dxp = dxp[:, :, pad : pad + x_shape[2], pad : pad + x_shape[3]]
    return np.ascontiguousarray(dxp), dw, db


def transposed_conv2d(
    x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int = 2, pad: int = 0, output_padding: int = 0
):
    """Adjoint of ``conv2d`` w.r.t. its input. ``w`` is [Cin, Cout, k, k]."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise _shape_error("transposed_conv2d", x.shape, w.shape)
    k = w.shape[2]
    if k % 2 == 0:
        raise _shape_error("transposed_conv2d (kernel must be odd)", w.shape)
    n, _, h, wd = x.shape
    cout = w.shape[1]
    hp = (h - 1) * stride + k + output_padding
    wp = (wd - 1) * stride + k + output_padding
    x2 = x.transpose(0, 2, 3, 1).reshape(n * h * wd, -1)
    x_c = x.transpose(1, 0, 2, 3).reshape(x.shape[1], -1)  # [Cin, N*H*W]
    cols = (w.reshape(w.shape[0], -1).T @ x_c).reshape(cout, k, k, n, h, wd)
    yp = _col2im(cols, (n, cout, hp, wp), k, stride)
    y = yp[:, :, pad : hp - pad, pad : wp - pad]
    if b is not None:
        y = y + b[None, :, None, None]
    return np.ascontiguousarray(y), (x2, (n, h, wd), w, stride, pad, (hp, wp))


def transposed_conv2d_backward(dy: np.ndarray, cache):
    x2, (n, h, wd), w, stride, pad, (hp, wp) = cache
    k = w.shape[2]
    dyp = np.zeros((dy.shape[0], dy.shape[1], hp, wp), dtype=dy.dtype)
    dyp[:, :, pad : hp - pad, pad : wp - pad] = dy
    cols = _im2col(dyp, k, stride)[:, :h, :wd]
    cols2 = cols.reshape(n * h * wd, -1)
    dx = (cols2 @ w.reshape(w.shape[0], -1).T).reshape(n, h, wd, -1).transpose(0, 3, 1, 2)
    dw = (x2.T @ cols2).reshape(w.shape)
    db = dy.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(dx), dw, db


def leaky_relu(x: np.ndarray, slope: float = LEAKY_SLOPE):
    pos = x > 0
    return np.where(pos, x, slope * x), pos


def leaky_relu_backward(dy: np.ndarray, pos: np.ndarray, slope: float = LEAKY_SLOPE):
    # at exactly 0 the left derivative (slope) is used
    return np.where(pos, dy, slope * dy)


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None):
    """``w`` is [out, in]."""
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise _shape_error("linear", x.shape, w.shape)
    y = x @ w.T
    if b is not None:
        y = y + b
    return y, x


def linear_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    return dy @ w, dy.T @ x, dy.sum(axis=0)


def global_avg_pool(x: np.ndarray):
    if x.ndim != 4:
        raise _shape_error("global_avg_pool", x.shape)
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(dy: np.ndarray, shape):
    n, c, h, w = shape
    return np.broadcast_to(dy[:, :, None, None] / (h * w), shape).copy()


def channel_concat(xs):
    base = xs[0].shape
    for x in xs:
        if x.ndim != 4 or x.shape[0] != base[0] or x.shape[2:] != base[2:]:
            raise _shape_error("channel_concat", *[y.shape for y in xs])
    return np.concatenate(xs, axis=1), [x.shape[1] for x in xs]


def channel_concat_backward(dy: np.ndarray, sizes):
    return np.split(dy, np.cumsum(sizes)[:-1], axis=1)


def nearest_upsample(x: np.ndarray):
    if x.ndim != 4:
        raise _shape_error("nearest_upsample", x.shape)
    return x.repeat(2, axis=2).repeat(2, axis=3)


def nearest_upsample_backward(dy: np.ndarray):
    n, c, h, w = dy.shape
    return dy.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def tile_vector(v: np.ndarray, h: int, w: int):
    """Broadcast [N, D] to [N, D, h, w]."""
    return np.ascontiguousarray(np.broadcast_to(v[:, :, None, None], (*v.shape, h, w)))


def tile_vector_backward(dy: np.ndarray):
    return dy.sum(axis=(2, 3))


# --- modules ----------------------------------------------------------------------


class Module:
    def params(self) -> list[Param]:
        out = []
        for name, val in vars(self).items():
            if isinstance(val, Param):
                out.append(val)
            elif isinstance(val, Module):
                out.extend(val.params())
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        out.extend(item.params())
        return out

    def named_params(self) -> dict[str, Param]:
        out = {}
        for p in self.params():
            if p.name in out:
                raise DataError(f"duplicate parameter name {p.name}")
            out[p.name] = p
        return out

    def astype(self, dtype) -> "Module":
        for p in self.params():
            p.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()


class Conv2d(Module):
    def __init__(self, name, cin, cout, k=3, stride=1, pad=None, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        self.w = Param(f"{name}.w", kaiming_uniform(rng, (cout, cin, k, k), cin * k * k, dtype))
        self.b = Param(f"{name}.b", np.zeros(cout, dtype=dtype))

    def forward(self, x):
        y, self._cache = conv2d(x, self.w.value, self.b.value, self.stride, self.pad)
        return y

    def backward(self, dy):
        dx, dw, db = conv2d_backward(dy, self._cache)
        self.w.grad += dw
        self.b.grad += db
        return dx


class ConvTranspose2d(Module):
    def __init__(self, name, cin, cout, k=3, stride=2, pad=1, output_padding=1, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.pad, self.output_padding = stride, pad, output_padding
        self.w = Param(f"{name}.w", kaiming_uniform(rng, (cin, cout, k, k), cin * k * k // (stride * stride), dtype))
        self.b = Param(f"{name}.b", np.zeros(cout, dtype=dtype))

    def forward(self, x):
        y, self._cache = transposed_conv2d(x, self.w.value, self.b.value, self.stride, self.pad, self.output_padding)
        return y

    def backward(self, dy):
        dx, dw, db = transposed_conv2d_backward(dy, self._cache)
        self.w.grad += dw
        self.b.grad += db
        return dx


class Linear(Module):
    def __init__(self, name, n_in, n_out, rng=None, dtype=np.float32, bias=True):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.w = Param(f"{name}.w", kaiming_uniform(rng, (n_out, n_in), n_in, dtype))
        self.b = Param(f"{name}.b", np.zeros(n_out, dtype=dtype)) if bias else None

    def forward(self, x):
        y, self._x = linear(x, self.w.value, None if self.b is None else self.b.value)
        return y

    def backward(self, dy):
        dx, dw, db = linear_backward(dy, self._x, self.w.value)
        self.w.grad += dw
        if self.b is not None:
            self.b.grad += db
        return dx


class LeakyReLU(Module):
    def forward(self, x):
        y, self._pos = leaky_relu(x)
        return y

    def backward(self, dy):
        return leaky_relu_backward(dy, self._pos)


class GlobalAvgPool(Module):
    def forward(self, x):
        y, self._shape = global_avg_pool(x)
        return y

    def backward(self, dy):
        return global_avg_pool_backward(dy, self._shape)


class Upsample2x(Module):
    def forward(self, x):
        return nearest_upsample(x)

    def backward(self, dy):
        return nearest_upsample_backward(dy)


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


# --- optimiser ----------------------------------------------------------------------


class Adam:
    def __init__(self, params: list[Param], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in {p.name}")
        for p in self.params:
            p.step += 1
            g = p.grad
            p.m *= self.beta1
            p.m += (1 - self.beta1) * g
            p.v *= self.beta2
            p.v += (1 - self.beta2) * g * g
            m_hat = p.m / (1 - self.beta1**p.step)
            v_hat = p.v / (1 - self.beta2**p.step)
            p.value -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.value.dtype)
            p.zero_grad()


# --- gradient checking -------------------------------------------------------------


def grad_check(module, input_shapes, seed: int = 0, n_coords: int = 200, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``module`` needs ``forward(*inputs)``, ``backward(dout)`` returning the
    input gradient (or a tuple of them) and ``params()``. The scalar checked
    is ``sum(forward(*inputs) * r)`` for a fixed random ``r``. Coordinates
    are sampled across inputs and parameters, at most ``n_coords`` in total.
    """
    rng = np.random.default_rng(seed)
    if hasattr(module, "astype"):
        module.astype(np.float64)
    inputs = [rng.standard_normal(s) for s in input_shapes]
    out = np.asarray(module.forward(*inputs), dtype=np.float64)
    r = rng.standard_normal(out.shape) if out.ndim else np.float64(1.0)

    def objective():
        return float(np.sum(np.asarray(module.forward(*inputs)) * r))

    for p in module.params():
        p.zero_grad()
    objective()
    gin = module.backward(r)
    if not isinstance(gin, (tuple, list)):
        gin = (gin,)
    targets = [(x, np.array(g, dtype=np.float64)) for x, g in zip(inputs, gin) if g is not None]
    targets += [(p.value, p.grad.copy()) for p in module.params()]
    sizes = np.array([t[0].size for t in targets], dtype=np.float64)
    picks = rng.choice(len(targets), size=n_coords, p=sizes / sizes.sum())

    scale = max(max(np.max(np.abs(g)) for _, g in targets), 1e-12)
    worst = 0.0
    for ti in picks:
        arr, g = targets[ti]
        idx = tuple(rng.integers(0, s) for s in arr.shape)
        orig = arr[idx]
        arr[idx] = orig + h
        fp = objective()
        arr[idx] = orig - h
        fm = objective()
        arr[idx] = orig
        num = (fp - fm) / (2 * h)
        ana = g[idx]
        denom = max(abs(num), abs(ana), 1e-3 * scale)
        worst = max(worst, abs(num - ana) / denom)
    for p in module.params():
        p.zero_grad()
    return worst


# --- checkpoints ---------------------------------------------------------------------

CKPT_MAGIC = b"VDCK"
CKPT_VERSION = 1
_DTYPES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES_INV = {v: k for k, v in _DTYPES.items()}


def save_checkpoint(path: str | Path, params: list[Param], config_digest: str, meta: dict | None = None) -> None:
    """Header (version, digest, JSON meta) then per-parameter name, shape, value, moments, step."""
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    digest = config_digest.encode()
    chunks = [CKPT_MAGIC, struct.pack("<HH", CKPT_VERSION, len(digest)), digest]
    chunks.append(struct.pack("<I", len(meta_bytes)) + meta_bytes)
    chunks.append(struct.pack("<I", len(params)))
    for p in params:
        name = p.name.encode()
        dt = np.dtype(p.value.dtype).newbyteorder("<")
        chunks.append(struct.pack("<H", len(name)) + name)
        chunks.append(struct.pack("<BB", _DTYPES[dt], p.value.ndim))
        chunks.append(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
        chunks.append(struct.pack("<Q", p.step))
        for arr in (p.value, p.m, p.v):
            chunks.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[str, dict, dict]:
    """Returns ``(config_digest, meta, {name: (value, m, v, step)})``."""
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise DataError(f"not a checkpoint: {path}")
    version, dlen = struct.unpack_from("<HH", raw, 4)
    if version != CKPT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    off = 8
    digest = raw[off : off + dlen].decode()
    off += dlen
    (mlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    meta = json.loads(raw[off : off + mlen].decode())
    off += mlen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        name = raw[off + 2 : off + 2 + nlen].decode()
        off += 2 + nlen
        code, ndim = struct.unpack_from("<BB", raw, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        (step,) = struct.unpack_from("<Q", raw, off)
        off += 8
        dt = _DTYPES_INV[code]
        size = int(np.prod(shape)) * dt.itemsize
        arrs = []
        for _ in range(3):
            arrs.append(np.frombuffer(raw[off : off + size], dtype=dt).reshape(shape).copy())
            off += size
        tensors[name] = (*arrs, step)
    return digest, meta, tensors


def load_params(params: list[Param], tensors: dict) -> None:
    by_name = {p.name: p for p in params}
    if set(by_name) != set(tensors):
        missing = sorted(set(by_name) ^ set(tensors))[:5]
        raise DataError(f"checkpoint parameters do not match model: {missing}")
    for name, (value, m, v, step) in tensors.items():
        p = by_name[name]
        if p.value.shape != value.shape:
            raise DataError(f"checkpoint shape mismatch for {name}: {value.shape} vs {p.value.shape}")
        p.value, p.m, p.v, p.step = value.copy(), m.copy(), v.copy(), int(step)
        p.grad = np.zeros_like(value)
