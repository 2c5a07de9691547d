"""Finite-difference checks for every layer, loss and the assembled network."""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .model import ModelConfig, VidaModel, VidaObjective, loss_magnitude, loss_matching, loss_phase

TOLERANCE = 1e-4
# Whole-network checks use a smaller step: wide leaky-ReLU maps put a kink
# inside a 1e-5 stencil often enough to spoil a 200-coordinate sample.
MODEL_STEP = 1e-6


class _Concat(ag.Module):
    def forward(self, *xs):
        y, self.sizes = ag.channel_concat(xs)
        return y

    def backward(self, dy):
        return tuple(ag.channel_concat_backward(dy, self.sizes))


class _Tile(ag.Module):
    def forward(self, v):
        return ag.tile_vector(v, 4, 5)

    def backward(self, dy):
        return ag.tile_vector_backward(dy)


class _Loss(ag.Module):
    """Wraps a ``(value, grads)`` loss so the generic checker can drive it."""

    def __init__(self, fn):
        self.fn = fn

    def forward(self, *xs):
        value, grads = self.fn(*xs)
        self._grads = grads if isinstance(grads, tuple) else (grads,)
        return np.float64(value)

    def backward(self, dout=1.0):
        return tuple(None if g is None else float(dout) * g for g in self._grads)


def _phase_loss(target, pred):
    value, g = loss_phase(target, pred)
    return value, (None, g)


def _mag_loss(target, pred):
    value, g = loss_magnitude(target, pred)
    return value, (None, g)


def _match_loss(e_c, e_s, e_n):
    # a wide margin keeps every hinge active so the check sees all terms
    return loss_matching(e_c, e_s, e_n, margin=4.0)


def op_cases(seed: int = 0):
    """(name, module, input shapes) for each primitive."""
    rng = np.random.default_rng(seed)
    return [
        ("conv2d", ag.Conv2d("c", 3, 4, 3, 1, rng=rng), [(2, 3, 7, 6)]),
        ("conv2d_stride2", ag.Conv2d("c", 3, 4, 3, 2, rng=rng), [(2, 3, 8, 9)]),
        ("conv2d_1x1", ag.Conv2d("c", 5, 2, 1, 1, rng=rng), [(2, 5, 4, 4)]),
        ("transposed_conv2d", ag.ConvTranspose2d("t", 3, 2, 3, 2, rng=rng), [(2, 3, 4, 5)]),
        ("linear", ag.Linear("l", 6, 4, rng=rng), [(3, 6)]),
        ("leaky_relu", ag.LeakyReLU(), [(2, 3, 4, 4)]),
        ("global_avg_pool", ag.GlobalAvgPool(), [(2, 3, 4, 5)]),
        ("nearest_upsample", ag.Upsample2x(), [(2, 3, 3, 4)]),
        ("channel_concat", _Concat(), [(2, 2, 3, 3), (2, 3, 3, 3)]),
        ("tile_vector", _Tile(), [(2, 3)]),
        ("loss_magnitude", _Loss(_mag_loss), [(2, 5, 6), (2, 5, 6)]),
        ("loss_phase", _Loss(_phase_loss), [(2, 5, 6), (2, 5, 6)]),
        ("loss_matching", _Loss(_match_loss), [(4, 6), (4, 6), (4, 6)]),
    ]


def check_ops(seed: int = 0, n_coords: int = 200) -> dict[str, float]:
    return {name: ag.grad_check(mod, shapes, seed=seed, n_coords=n_coords) for name, mod, shapes in op_cases(seed)}


def check_model(cfg: ModelConfig = ModelConfig(), seed: int = 0, batch: int = 2, n_coords: int = 200) -> float:
    """Max relative error of the total loss (all three terms) w.r.t. inputs and weights.

    The zero-initialised output head is replaced by small random weights
    first, otherwise every gradient behind it would vanish.
    """
    model = VidaModel(cfg, dtype=np.float64)
    rng = np.random.default_rng([seed, 7])
    head = model.unet.head.w
    head.value[...] = 0.05 * rng.standard_normal(head.value.shape)
    u, v = cfg.unet, cfg.van
    target = rng.standard_normal((batch, 2, u.window, u.bins))
    negatives = (np.arange(batch) + 1) % batch
    obj = VidaObjective(model, target, negatives, lambda_match=0.5)
    shapes = [(batch, 2, u.window, u.bins)]
    if not cfg.audio_only:
        shapes.append((batch, 3, v.height, v.width))
    return ag.grad_check(obj, shapes, seed=seed, n_coords=n_coords, h=MODEL_STEP)
