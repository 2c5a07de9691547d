"""Visually conditioned spectrogram UNet and its training losses.

The visual tower maps a panorama to an embedding ``e_c``; the UNet encodes a
(log-magnitude, phase) segment, concatenates the tiled ``e_c`` at its
bottleneck and decodes the clean segment. A projection of the pooled
bottleneck gives the audio embedding ``e_s`` used by the matching loss.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import (
    Conv2d,
    GlobalAvgPool,
    LeakyReLU,
    Linear,
    Module,
    Upsample2x,
    ConvTranspose2d,
    channel_concat,
    channel_concat_backward,
    tile_vector,
    tile_vector_backward,
)
from .errors import NumericError, ShapeError, UsageError


@dataclass(frozen=True)
class VanConfig:
    tower_widths: tuple[int, ...] = (16, 32, 64)
    embed_dim: int = 64
    height: int = 64
    width: int = 252
    early_fusion: bool = False
    depth_scale: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "tower_widths", tuple(self.tower_widths))
        if self.embed_dim <= 0:
            raise UsageError("embedding dim must be positive")


@dataclass(frozen=True)
class UNetConfig:
    window: int = 64
    bins: int = 64
    depth: int = 5
    base_channels: int = 16
    upsample: str = "nearest"  # or "transposed"
    residual: bool = True
    mag_offset: float = -4.0
    mag_scale: float = 4.0

    def __post_init__(self):
        step = 2**self.depth
        if self.window % step or self.bins % step:
            raise UsageError(f"window and bins must be divisible by 2^depth = {step}")
        if self.upsample not in ("nearest", "transposed"):
            raise UsageError(f"unknown upsample mode {self.upsample}")


@dataclass(frozen=True)
class ModelConfig:
    van: VanConfig = field(default_factory=VanConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    audio_only: bool = False
    seed: int = 0

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        return cls(VanConfig(embed_dim=512, height=192, width=756), UNetConfig(window=256, bins=256, base_channels=64))


@dataclass(frozen=True)
class TrainConfig:
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    epochs: int = 150
    batch_size: int = 8
    lambda_phase: float = 0.08
    lambda_match: float = 0.001
    margin: float = 0.5
    rotate: bool = True
    seed: int = 0
    max_steps: int | None = None

    def __post_init__(self):
        if self.lambda_phase < 0 or self.lambda_match < 0:
            raise UsageError("loss weights must be non-negative")
        if self.margin < 0:
            raise UsageError("margin must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise UsageError("batch size and epochs must be positive")

    def lr_at(self, epoch: float) -> float:
        """Exponential decay from ``lr_start`` to ``lr_end`` over ``epochs``."""
        return self.lr_start * (self.lr_end / self.lr_start) ** (epoch / self.epochs)


class Tower(Module):
    """Stride-2 conv stack; last stage outputs ``out_channels`` maps."""

    def __init__(self, name, cin, widths, out_channels, rng, dtype):
        chans = [cin, *widths, out_channels]
        self.layers = []
        for i in range(len(chans) - 1):
            self.layers.append(Conv2d(f"{name}.conv{i}", chans[i], chans[i + 1], 3, 2, rng=rng, dtype=dtype))
            self.layers.append(LeakyReLU())

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


class VisualAcousticsNet(Module):
    """Two towers (depth | albedo + speaker mask), 1x1 fusion, global pooling."""

    def __init__(self, cfg: VanConfig, rng, dtype=np.float32):
        self.cfg = cfg
        d = cfg.embed_dim
        if cfg.early_fusion:
            self.tower = Tower("van.early", 3, cfg.tower_widths, 2 * d, rng, dtype)
        else:
            self.tower_d = Tower("van.depth", 1, cfg.tower_widths, d, rng, dtype)
            self.tower_r = Tower("van.albedo", 2, cfg.tower_widths, d, rng, dtype)
        self.fuse = Conv2d("van.fuse", 2 * d, d, 1, 1, rng=rng, dtype=dtype)
        self.pool = GlobalAvgPool()

    def forward(self, pano):
        if pano.ndim != 4 or pano.shape[1] != 3 or pano.shape[2] != self.cfg.height or pano.shape[3] > self.cfg.width:
            raise ShapeError(f"panorama resolution {pano.shape[1:]} does not match (3, {self.cfg.height}, <= {self.cfg.width})")
        x = pano.astype(self.fuse.w.value.dtype, copy=True)
        x[:, 0] *= self.cfg.depth_scale
        if self.cfg.early_fusion:
            feats = self.tower.forward(x)
        else:
            f_d = self.tower_d.forward(x[:, :1])
            f_r = self.tower_r.forward(x[:, 1:])
            feats, self._sizes = channel_concat([f_r, f_d])
        return self.pool.forward(self.fuse.forward(feats))

    def backward(self, de_c):
        dfeats = self.fuse.backward(self.pool.backward(de_c))
        if self.cfg.early_fusion:
            dx = self.tower.backward(dfeats)
        else:
            df_r, df_d = channel_concat_backward(dfeats, self._sizes)
            dx = np.concatenate([self.tower_d.backward(df_d), self.tower_r.backward(df_r)], axis=1)
        dx[:, 0] *= self.cfg.depth_scale
        return dx


class UNet(Module):
    def __init__(self, cfg: UNetConfig, embed_dim: int, rng, dtype=np.float32):
        self.cfg = cfg
        self.embed_dim = embed_dim
        widths = [cfg.base_channels * 2**i for i in range(cfg.depth)]
        self.widths = widths
        self.enc = []
        cin = 2
        for i, w in enumerate(widths):
            self.enc.append((Conv2d(f"unet.enc{i}", cin, w, 3, 2, rng=rng, dtype=dtype), LeakyReLU()))
            cin = w
        self.proj = Linear("unet.proj", widths[-1], embed_dim, rng=rng, dtype=dtype)
        self.pool = GlobalAvgPool()

        # decoder stage i upsamples to the resolution of encoder stage depth-2-i
        self.dec = []
        cin = widths[-1] + embed_dim
        outs = list(reversed(widths[:-1])) + [cfg.base_channels]
        for i, w in enumerate(outs):
            if cfg.upsample == "nearest":
                up = (Upsample2x(), Conv2d(f"unet.dec{i}", cin, w, 3, 1, rng=rng, dtype=dtype))
            else:
                up = (ConvTranspose2d(f"unet.dec{i}", cin, w, 3, 2, 1, 1, rng=rng, dtype=dtype),)
            self.dec.append((up, LeakyReLU()))
            skip = widths[-2 - i] if i < len(outs) - 1 else 2
            cin = w + skip
        self.head = Conv2d("unet.head", cin, 2, 3, 1, rng=rng, dtype=dtype)
        # start as the identity map when residual
        if cfg.residual:
            self.head.w.value[...] = 0

    def normalise(self, x):
        c = self.cfg
        out = np.empty_like(x)
        out[:, 0] = (x[:, 0] - c.mag_offset) / c.mag_scale
        out[:, 1] = x[:, 1] / np.pi
        return out

    def forward(self, seg, e_c):
        c = self.cfg
        if seg.ndim != 4 or seg.shape[1:] != (2, c.window, c.bins):
            raise ShapeError(f"segment shape {seg.shape[1:]} does not match (2, {c.window}, {c.bins})")
        if e_c.shape != (seg.shape[0], self.embed_dim):
            raise ShapeError(f"conditioning shape {e_c.shape} does not match ({seg.shape[0]}, {self.embed_dim})")
        dtype = self.head.w.value.dtype
        seg = seg.astype(dtype, copy=False)
        x0 = self.normalise(seg)
        skips = [x0]
        h = x0
        for conv, act in self.enc:
            h = act.forward(conv.forward(h))
            skips.append(h)
        e_s = self.proj.forward(self.pool.forward(h))
        _, _, bh, bw = h.shape
        h, self._bneck_sizes = channel_concat([h, tile_vector(e_c.astype(dtype, copy=False), bh, bw)])
        self._cat_sizes = []
        for i, (up, act) in enumerate(self.dec):
            for m in up:
                h = m.forward(h)
            h = act.forward(h)
            h, sizes = channel_concat([h, skips[-2 - i]])
            self._cat_sizes.append(sizes)
        y = self.head.forward(h)
        out = np.empty_like(y)
        out[:, 0] = c.mag_scale * y[:, 0]
        out[:, 1] = np.pi * y[:, 1]
        if c.residual:
            out += seg
        return out, e_s

    def backward(self, d_out, d_es):
        c = self.cfg
        dy = np.empty_like(d_out)
        dy[:, 0] = c.mag_scale * d_out[:, 0]
        dy[:, 1] = np.pi * d_out[:, 1]
        dh = self.head.backward(dy)
        dskips = [None] * (len(self.enc) + 1)
        for i in reversed(range(len(self.dec))):
            up, act = self.dec[i]
            dh, dskip = channel_concat_backward(dh, self._cat_sizes[i])
            dskips[-2 - i] = dskip
            dh = act.backward(dh)
            for m in reversed(up):
                dh = m.backward(dh)
        dh, dtile = channel_concat_backward(dh, self._bneck_sizes)
        de_c = tile_vector_backward(dtile)
        dh = dh + self.pool.backward(self.proj.backward(d_es))
        for k in reversed(range(len(self.enc))):
            conv, act = self.enc[k]
            if dskips[k + 1] is not None:
                dh = dh + dskips[k + 1]
            dh = conv.backward(act.backward(dh))
        dx0 = dh + dskips[0]
        dseg = np.empty_like(dx0)
        dseg[:, 0] = dx0[:, 0] / c.mag_scale
        dseg[:, 1] = dx0[:, 1] / np.pi
        if c.residual:
            dseg += d_out
        return dseg, de_c

    def params(self):
        out = []
        for conv, _ in self.enc:
            out.extend(conv.params())
        out.extend(self.proj.params())
        for up, _ in self.dec:
            for m in up:
                out.extend(m.params())
        out.extend(self.head.params())
        return out


class VidaModel(Module):
    """Visual tower + UNet. In audio-only mode the conditioning is all zeros."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), dtype=np.float32):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.van = None if cfg.audio_only else VisualAcousticsNet(cfg.van, rng, dtype)
        self.unet = UNet(cfg.unet, cfg.van.embed_dim, rng, dtype)

    def params(self):
        return (self.van.params() if self.van is not None else []) + self.unet.params()

    def embed_visual(self, pano):
        if self.van is None:
            n = 1 if pano is None else pano.shape[0]
            return np.zeros((n, self.cfg.van.embed_dim), dtype=self.unet.head.w.value.dtype)
        return self.van.forward(pano)

    def forward(self, seg, pano=None, e_c=None):
        """Returns (prediction [N, 2, T, F], e_s [N, D], e_c [N, D])."""
        if e_c is None:
            if self.van is None:
                e_c = np.zeros((seg.shape[0], self.cfg.van.embed_dim), dtype=self.unet.head.w.value.dtype)
            else:
                if pano is None:
                    raise ShapeError("visual model needs a panorama")
                e_c = self.van.forward(pano)
        pred, e_s = self.unet.forward(seg, e_c)
        return pred, e_s, e_c

    def backward(self, d_pred, d_es, d_ec=None):
        dseg, de_c = self.unet.backward(d_pred, d_es)
        dpano = None
        if self.van is not None:
            if d_ec is not None:
                de_c = de_c + d_ec
            dpano = self.van.backward(de_c)
        return dseg, dpano


# --- losses: each returns (value, gradient(s)) ------------------------------------


def loss_magnitude(target, pred):
    """Mean squared error over all entries; gradient w.r.t. ``pred``."""
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def loss_phase(target, pred):
    """MSE between unit-circle coordinates of the two phase maps.

    Written as ``2 - 2 cos(pred - target)``, the same quantity, so that
    phases a whole turn apart give exactly zero.
    """
    delta = pred - target
    n = delta.size
    value = float(np.mean(2.0 - 2.0 * np.cos(delta)))
    return value, 2.0 * np.sin(delta) / n


def _unit(v):
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise NumericError("degenerate embedding")
    return v / norm, norm


def _unit_backward(dn, n, norm):
    return (dn - n * np.sum(dn * n, axis=-1, keepdims=True)) / norm


def _dist(a, b):
    diff = a - b
    d = np.linalg.norm(diff, axis=-1, keepdims=True)
    safe = np.where(d > 0, d, 1.0)
    return d, np.where(d > 0, diff / safe, 0.0)


def loss_matching(e_c, e_s, e_s_neg, margin=0.5):
    """Batch-mean triplet hinge on unit-normalised embeddings.

    Accepts [D] vectors or [N, D] batches; returns
    ``(value, (grad e_c, grad e_s, grad e_s_neg))`` in the input shapes.
    """
    single = np.ndim(e_c) == 1
    e_c, e_s, e_s_neg = (np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in (e_c, e_s, e_s_neg))
    nc, norm_c = _unit(e_c)
    ns, norm_s = _unit(e_s)
    nn, norm_n = _unit(e_s_neg)
    d_pos, g_pos = _dist(nc, ns)
    d_neg, g_neg = _dist(nc, nn)
    raw = d_pos - d_neg + margin
    active = (raw > 0).astype(np.float64)
    n = e_c.shape[0]
    value = float(np.sum(np.maximum(raw, 0.0)) / n)
    w = active / n
    dnc = w * (g_pos - g_neg)
    dns = -w * g_pos
    dnn = w * g_neg
    grads = (_unit_backward(dnc, nc, norm_c), _unit_backward(dns, ns, norm_s), _unit_backward(dnn, nn, norm_n))
    if single:
        grads = tuple(g[0] for g in grads)
    return value, grads


def loss_total(magnitude, phase, matching, lambda_phase=0.08, lambda_match=0.001):
    return magnitude + lambda_phase * phase + lambda_match * matching


def draw_negatives(n: int, rng: np.random.Generator) -> np.ndarray:
    """For each batch index, a uniformly drawn different index (itself if n == 1)."""
    if n < 2:
        return np.zeros(n, dtype=np.int64)
    offs = rng.integers(1, n, size=n)
    return (np.arange(n) + offs) % n


class VidaObjective(Module):
    """Total loss of a fixed batch as a function of (segment, panorama).

    Wraps the model for whole-network gradient checks; the targets and the
    negative pairing are frozen at construction.
    """

    def __init__(self, model: VidaModel, target, negatives, lambda_phase=0.08, lambda_match=0.001, margin=0.5):
        self.model = model
        self.target = target
        self.negatives = negatives
        self.lambda_phase, self.lambda_match, self.margin = lambda_phase, lambda_match, margin

    def params(self):
        return self.model.params()

    def astype(self, dtype):
        self.model.astype(dtype)
        return self

    def forward(self, seg, pano=None):
        pred, e_s, e_c = self.model.forward(seg, pano)
        lm, gm = loss_magnitude(self.target[:, 0], pred[:, 0])
        lp, gp = loss_phase(self.target[:, 1], pred[:, 1])
        total = loss_total(lm, lp, 0.0, self.lambda_phase, self.lambda_match)
        d_es = np.zeros_like(e_s)
        d_ec = None
        if self.lambda_match > 0 and self.model.van is not None:
            lmt, (gc, gs, gn) = loss_matching(e_c, e_s, e_s[self.negatives], self.margin)
            total += self.lambda_match * lmt
            d_es = self.lambda_match * gs
            np.add.at(d_es, self.negatives, self.lambda_match * gn)
            d_ec = self.lambda_match * gc
        d_pred = np.stack([gm, self.lambda_phase * gp], axis=1)
        self._grads = (d_pred, d_es, d_ec)
        return np.float64(total)

    def backward(self, dout=1.0):
        d_pred, d_es, d_ec = self._grads
        dout = float(dout)
        return self.model.backward(d_pred * dout, d_es * dout, None if d_ec is None else d_ec * dout)
