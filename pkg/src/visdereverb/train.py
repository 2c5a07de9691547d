"""Training loop, checkpoint round trips and full-utterance inference."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dsp
from .autograd import Adam, load_params, read_checkpoint, save_checkpoint
from .config import config_digest, from_dict, to_dict
from .dataset import Sample, segment_spectrogram, spectrogram_pair, stitch_segments
from .dsp import AudioClip, LogMagPhase, StftConfig
from .errors import DataError, NumericError
from .model import (
    ModelConfig,
    TrainConfig,
    VidaModel,
    draw_negatives,
    loss_magnitude,
    loss_matching,
    loss_phase,
    loss_total,
)

log = logging.getLogger(__name__)


def model_digest(model_cfg: ModelConfig, stft_cfg: StftConfig) -> str:
    return config_digest({"stft": to_dict(stft_cfg), "model": to_dict(model_cfg)})


@dataclass
class TrainingItem:
    reverb: np.ndarray  # [n_segments, 2, window, F]
    clean: np.ndarray
    pano: np.ndarray | None  # [3, H, W]


def prepare_items(samples: list[Sample], stft_cfg: StftConfig, window: int, dtype=np.float32) -> list[TrainingItem]:
    items = []
    for s in samples:
        rev, clean = spectrogram_pair(s, stft_cfg)
        r = np.stack([seg.data for seg in segment_spectrogram(rev, window)]).astype(dtype)
        c = np.stack([seg.data for seg in segment_spectrogram(clean, window)]).astype(dtype)
        items.append(TrainingItem(r, c, s.pano.stack().astype(dtype)))
    return items


@dataclass
class StepLosses:
    magnitude: float
    phase: float
    matching: float
    total: float


def train_step(
    model: VidaModel,
    opt: Adam,
    seg: np.ndarray,
    target: np.ndarray,
    pano: np.ndarray | None,
    cfg: TrainConfig,
    lr: float,
    rng: np.random.Generator,
) -> StepLosses:
    pred, e_s, e_c = model.forward(seg, pano)
    lm, gm = loss_magnitude(target[:, 0], pred[:, 0])
    lp, gp = loss_phase(target[:, 1], pred[:, 1])
    lmt = 0.0
    d_es = np.zeros_like(e_s)
    d_ec = None
    use_match = cfg.lambda_match > 0 and model.van is not None and seg.shape[0] > 1
    if use_match:
        neg = draw_negatives(seg.shape[0], rng)
        lmt, (gc, gs, gn) = loss_matching(e_c, e_s, e_s[neg], cfg.margin)
        d_es = (cfg.lambda_match * gs).astype(e_s.dtype)
        np.add.at(d_es, neg, (cfg.lambda_match * gn).astype(e_s.dtype))
        d_ec = (cfg.lambda_match * gc).astype(e_c.dtype)
    total = loss_total(lm, lp, lmt, cfg.lambda_phase, cfg.lambda_match)
    if not np.isfinite(total):
        raise NumericError("non-finite loss")
    d_pred = np.stack([gm, cfg.lambda_phase * gp], axis=1).astype(pred.dtype)
    model.backward(d_pred, d_es, d_ec)
    opt.step(lr)
    return StepLosses(lm, lp, lmt, total)


def assemble_batch(items, idx, rng, rotate: bool, visual: bool):
    segs, tgts, panos = [], [], []
    for i in idx:
        it = items[i]
        k = int(rng.integers(it.reverb.shape[0]))
        segs.append(it.reverb[k])
        tgts.append(it.clean[k])
        if visual:
            pano = it.pano
            if rotate:
                shift = int(round(rng.uniform(0.0, 360.0) / 360.0 * pano.shape[-1]))
                pano = np.roll(pano, shift, axis=-1)
            panos.append(pano)
    return np.stack(segs), np.stack(tgts), (np.stack(panos) if visual else None)


def train(
    samples_or_items,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    stft_cfg: StftConfig,
    out_dir: str | Path | None = None,
    model: VidaModel | None = None,
    log_every: int = 0,
    stop=None,
):
    """Fit a model; returns ``(model, records)``.

    Each record is one optimiser step: epoch, step, the three loss terms,
    the total and the learning rate. With ``out_dir`` a checkpoint is written
    after every epoch (``epoch_XXXX.ckpt`` and ``last.ckpt``) and the records
    go to ``loss_log.jsonl``. ``stop``, if given, is called with each record
    and ends training after the first step for which it returns true.
    """
    items = samples_or_items
    if items and isinstance(items[0], Sample):
        items = prepare_items(items, stft_cfg, model_cfg.unet.window)
    if not items:
        raise DataError("empty split")
    model = model if model is not None else VidaModel(model_cfg)
    opt = Adam(model.params(), lr=train_cfg.lr_start)
    rng = np.random.default_rng([train_cfg.seed, 1])
    digest = model_digest(model_cfg, stft_cfg)
    visual = model.van is not None

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "loss_log.jsonl", "w")
    records = []
    step = 0
    n = len(items)
    bs = train_cfg.batch_size
    steps_per_epoch = -(-n // bs)
    last_good = None
    done = False
    try:
        for epoch in range(train_cfg.epochs):
            order = rng.permutation(n)
            for b in range(steps_per_epoch):
                if train_cfg.max_steps is not None and step >= train_cfg.max_steps:
                    break
                idx = order[b * bs : (b + 1) * bs]
                seg, tgt, pano = assemble_batch(items, idx, rng, train_cfg.rotate, visual)
                lr = train_cfg.lr_at(epoch + b / steps_per_epoch)
                try:
                    losses = train_step(model, opt, seg, tgt, pano, train_cfg, lr, rng)
                except NumericError as exc:
                    where = f"epoch {epoch} step {step}"
                    raise NumericError(f"{exc} at {where}; last good checkpoint: {last_good}") from exc
                rec = {
                    "epoch": epoch,
                    "step": step,
                    "magnitude": losses.magnitude,
                    "phase": losses.phase,
                    "matching": losses.matching,
                    "total": losses.total,
                    "lr": lr,
                }
                records.append(rec)
                if log_fh is not None:
                    log_fh.write(json.dumps(rec) + "\n")
                if log_every and step % log_every == 0:
                    log.info("epoch %d step %d total %.4f mag %.4f", epoch, step, losses.total, losses.magnitude)
                step += 1
                if stop is not None and stop(rec):
                    done = True
                    break
            if out is not None:
                meta = {"epoch": epoch + 1, "step": step, "model": to_dict(model_cfg), "stft": to_dict(stft_cfg)}
                save_checkpoint(out / f"epoch_{epoch + 1:04d}.ckpt", model.params(), digest, meta)
                save_checkpoint(out / "last.ckpt", model.params(), digest, meta)
                last_good = str(out / "last.ckpt")
            if done or (train_cfg.max_steps is not None and step >= train_cfg.max_steps):
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    return model, records


def save_model(path: str | Path, model: VidaModel, stft_cfg: StftConfig, meta: dict | None = None) -> None:
    full = {"model": to_dict(model.cfg), "stft": to_dict(stft_cfg), **(meta or {})}
    save_checkpoint(path, model.params(), model_digest(model.cfg, stft_cfg), full)


def load_model(path: str | Path, expect_digest: str | None = None) -> tuple[VidaModel, StftConfig]:
    """Rebuild the network recorded in a checkpoint, refusing digest mismatches."""
    digest, meta, tensors = read_checkpoint(path)
    if expect_digest is not None and digest != expect_digest:
        raise DataError(f"checkpoint/config mismatch: checkpoint {digest}, config {expect_digest}")
    model_cfg = from_dict(ModelConfig, meta["model"])
    stft_cfg = from_dict(StftConfig, meta["stft"])
    if model_digest(model_cfg, stft_cfg) != digest:
        raise DataError("checkpoint header digest does not match its recorded config")
    first = next(iter(tensors.values()))[0]
    model = VidaModel(model_cfg, dtype=first.dtype)
    load_params(model.params(), tensors)
    return model, stft_cfg


# --- inference ----------------------------------------------------------------------


def predict_spectrogram(model: VidaModel, reverb: LogMagPhase, pano: np.ndarray | None, batch: int = 16) -> LogMagPhase:
    """Run the network over every segment of ``reverb`` with one shared conditioning vector."""
    window = model.cfg.unet.window
    segs = segment_spectrogram(reverb, window)
    dtype = model.unet.head.w.value.dtype
    if model.van is not None:
        if pano is None:
            raise DataError("visual checkpoint needs a panorama")
        e_c = model.embed_visual(np.asarray(pano, dtype=dtype)[None])
    else:
        e_c = np.zeros((1, model.cfg.van.embed_dim), dtype=dtype)
    outs = []
    for i in range(0, len(segs), batch):
        chunk = np.stack([s.data for s in segs[i : i + batch]]).astype(dtype)
        pred, _, _ = model.forward(chunk, e_c=np.repeat(e_c, chunk.shape[0], axis=0))
        outs.extend(pred.astype(np.float64))
    return stitch_segments(outs, reverb.shape[0])


def dereverberate_full(
    reverb: AudioClip,
    pano,
    model: VidaModel,
    stft_cfg: StftConfig,
    gl_iters: int = 30,
    random_phase: bool = False,
    seed: int = 0,
) -> AudioClip:
    """Enhance a whole clip: STFT, per-segment prediction, stitching, Griffin-Lim.

    Frames whose input spectrum is entirely silent stay silent. The output is
    zero-padded to the input length.
    """
    if len(reverb) < stft_cfg.win_length:
        raise DataError("clip too short")
    spec = dsp.stft(reverb, stft_cfg)
    lmp = dsp.encode(spec)
    pano_arr = None if pano is None else (pano.stack() if hasattr(pano, "stack") else np.asarray(pano))
    pred = predict_spectrogram(model, lmp, pano_arr)
    mag = np.maximum(np.exp(pred.mag) - dsp.MAG_EPS, 0.0)
    silent = np.max(np.abs(spec.data), axis=1) <= 1e-12
    mag[silent] = 0.0
    init = None if random_phase else pred.phase
    out = dsp.griffin_lim(mag, init, gl_iters, stft_cfg, rng=np.random.default_rng(seed), sample_rate=reverb.sample_rate)
    samples = np.zeros(len(reverb))
    n = min(len(out), len(reverb))
    samples[:n] = out.samples[:n]
    return AudioClip(samples, reverb.sample_rate)


def retrieval_accuracy(e_c: np.ndarray, e_s: np.ndarray) -> float:
    """Fraction of rows whose nearest normalised ``e_s`` is their own pair."""
    nc = e_c / np.linalg.norm(e_c, axis=1, keepdims=True)
    ns = e_s / np.linalg.norm(e_s, axis=1, keepdims=True)
    d = np.linalg.norm(nc[:, None, :] - ns[None, :, :], axis=-1)
    return float(np.mean(np.argmin(d, axis=1) == np.arange(len(nc))))
