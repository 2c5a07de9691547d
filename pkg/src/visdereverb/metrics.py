"""Objective metrics, per-method evaluation over a dataset split, and report files."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .dsp import AudioClip, StftConfig
from .errors import DataError
from .view import crop_fov, remove_speaker
from .wpe import WpeConfig, wpe_clip

METHODS = ("none", "wpe", "audio_only", "vida")
ABLATIONS = ("full_pano", "fov80", "no_speaker", "no_matching")
LSD_EPS = 1e-5
# metric name -> True when lower is better
METRICS = {"lsd": True, "segsnr": False, "stft_mse": True}


def _match_length(ref: AudioClip, est: AudioClip) -> tuple[np.ndarray, np.ndarray]:
    if ref.sample_rate != est.sample_rate:
        raise DataError("rate mismatch")
    if len(ref) == 0 or len(est) == 0:
        raise DataError("empty input")
    e = np.zeros(len(ref))
    n = min(len(ref), len(est))
    e[:n] = est.samples[:n]
    return ref.samples, e


def lsd(ref: AudioClip, est: AudioClip, cfg: StftConfig = StftConfig()) -> float:
    """Log-spectral distance in dB, averaged over frames."""
    r, e = _match_length(ref, est)
    R = 20 * np.log10(np.abs(dsp.stft(r, cfg).data) + LSD_EPS)
    E = 20 * np.log10(np.abs(dsp.stft(e, cfg).data) + LSD_EPS)
    return float(np.mean(np.sqrt(np.mean((R - E) ** 2, axis=1))))


def segsnr(ref: AudioClip, est: AudioClip, frame: int = 256, clamp=(-10.0, 35.0)) -> float:
    """Segmental SNR over non-overlapping frames, skipping frames where ``ref`` is silent."""
    r, e = _match_length(ref, est)
    n_frames = max(len(r) // frame, 1)
    vals = []
    for k in range(n_frames):
        rs = r[k * frame : (k + 1) * frame]
        es = e[k * frame : (k + 1) * frame]
        sig = np.sum(rs * rs)
        if sig < 1e-10:
            continue
        err = np.sum((rs - es) ** 2)
        snr = clamp[1] if err == 0 else 10 * np.log10(sig / err)
        vals.append(np.clip(snr, *clamp))
    if not vals:
        raise DataError("no voiced frames")
    return float(np.mean(vals))


def stft_mse(ref: AudioClip, est: AudioClip, cfg: StftConfig = StftConfig()) -> float:
    """Mean squared difference of natural-log magnitude spectrograms."""
    r, e = _match_length(ref, est)
    R = np.log(np.abs(dsp.stft(r, cfg).data) + dsp.MAG_EPS)
    E = np.log(np.abs(dsp.stft(e, cfg).data) + dsp.MAG_EPS)
    return float(np.mean((R - E) ** 2))


def relative_improvement(unprocessed: float, method: float, lower_is_better: bool = True) -> float:
    if unprocessed == 0:
        return 0.0
    if lower_is_better:
        return (unprocessed - method) / unprocessed
    return (method - unprocessed) / abs(unprocessed)


@dataclass
class MetricReport:
    method: str
    ablation: str
    records: list[dict]
    aggregates: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)

    def summary_table(self) -> str:
        lines = [f"method={self.method} ablation={self.ablation} samples={len(self.records)}"]
        lines.append(f"{'metric':<10}{'mean':>12}{'median':>12}{'unproc':>12}{'rel.impr':>10}")
        for name in METRICS:
            a = self.aggregates[name]
            lines.append(
                f"{name:<10}{a['mean']:>12.4f}{a['median']:>12.4f}{a['unprocessed_mean']:>12.4f}"
                f"{100 * a['relative_improvement']:>9.2f}%"
            )
        return "\n".join(lines)


def _bucket_curves(records: list[dict], key: str, edges) -> list[dict]:
    rows = []
    edges = list(edges)
    defined = [r for r in records if r[key] is not None]
    for lo, hi in zip(edges[:-1], edges[1:]):
        members = [r for r in defined if lo <= r[key] < hi]
        row = {"lo": lo, "hi": hi, "count": len(members)}
        for name in METRICS:
            row[name] = float(np.mean([m[name] for m in members])) if members else float("nan")
        rows.append(row)
    undefined = [r for r in records if r[key] is None]
    if undefined:
        row = {"lo": float("nan"), "hi": float("nan"), "count": len(undefined)}
        for name in METRICS:
            row[name] = float(np.mean([m[name] for m in undefined]))
        rows.append(row)
    return rows


def aggregate(method: str, ablation: str, records: list[dict], distance_edges, rt60_edges) -> MetricReport:
    """Means, medians and relative improvements; independent of record order."""
    records = sorted(records, key=lambda r: r["sample_id"])
    aggregates = {}
    for name, lower in METRICS.items():
        vals = np.sort(np.array([r[name] for r in records], dtype=np.float64))
        base = np.sort(np.array([r[f"{name}_unprocessed"] for r in records], dtype=np.float64))
        mean, base_mean = float(np.mean(vals)), float(np.mean(base))
        aggregates[name] = {
            "mean": mean,
            "median": float(np.median(vals)),
            "unprocessed_mean": base_mean,
            "relative_improvement": relative_improvement(base_mean, mean, lower),
        }
    curves = {
        "distance": _bucket_curves(records, "distance", distance_edges),
        "rt60": _bucket_curves(records, "rt60_in", rt60_edges),
    }
    return MetricReport(method, ablation, records, aggregates, curves)


def apply_ablation(pano, ablation: str, rng: np.random.Generator, fov: float = 80.0):
    """Visual ablations are applied at evaluation time only."""
    if ablation == "fov80":
        return crop_fov(pano, rng.uniform(0.0, 360.0), fov)
    if ablation == "no_speaker":
        return remove_speaker(pano)
    return pano


def evaluate(
    samples,
    method: str,
    ablation: str = "full_pano",
    model=None,
    stft_cfg: StftConfig = StftConfig(),
    wpe_cfg: WpeConfig = WpeConfig(),
    eval_cfg=None,
) -> MetricReport:
    """Dereverberate every sample with ``method`` and score it against the clean target.

    The clean clip is the reference; outputs are trimmed to its length, so
    the reverberant tail past the end of the utterance is not scored.
    ``model`` is the loaded network for the learned methods; for
    ``ablation='no_matching'`` it must be the checkpoint trained without the
    matching loss.
    """
    from .config import EvalConfig
    from .train import dereverberate_full

    eval_cfg = eval_cfg if eval_cfg is not None else EvalConfig()
    if method not in METHODS:
        raise DataError(f"unknown method {method}")
    if ablation not in ABLATIONS:
        raise DataError(f"unknown ablation {ablation}")
    if not samples:
        raise DataError("empty split")
    if method in ("audio_only", "vida") and model is None:
        raise DataError("missing checkpoint")
    records = []
    for i, s in enumerate(samples):
        ref = s.clean
        if method == "none":
            est = s.reverb
        elif method == "wpe":
            est = wpe_clip(s.reverb, wpe_cfg, stft_cfg)
        elif method == "audio_only":
            est = dereverberate_full(s.reverb, None, model, stft_cfg, eval_cfg.griffin_lim_iters, eval_cfg.random_phase_init)
        else:
            rng = np.random.default_rng([eval_cfg.fov_seed, i])
            pano = apply_ablation(s.pano, ablation, rng)
            est = dereverberate_full(s.reverb, pano, model, stft_cfg, eval_cfg.griffin_lim_iters, eval_cfg.random_phase_init)
        rec = {
            "sample_id": s.meta.sample_id,
            "method": method,
            "ablation": ablation,
            "lsd": lsd(ref, est, stft_cfg),
            "segsnr": segsnr(ref, est, eval_cfg.segsnr_frame),
            "stft_mse": stft_mse(ref, est, stft_cfg),
            "lsd_unprocessed": lsd(ref, s.reverb, stft_cfg),
            "segsnr_unprocessed": segsnr(ref, s.reverb, eval_cfg.segsnr_frame),
            "stft_mse_unprocessed": stft_mse(ref, s.reverb, stft_cfg),
            "rt60_in": s.meta.rt60,
            "distance": s.meta.distance,
        }
        records.append(rec)
    return aggregate(method, ablation, records, eval_cfg.distance_edges, eval_cfg.rt60_edges)


def write_report(report: MetricReport, out_dir: str | Path, config_digest: str = "", seed: int | None = None) -> Path:
    """records.jsonl, summary.json, table.txt and one TSV per analysis axis."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "records.jsonl", "w") as fh:
        for r in report.records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    summary = {
        "method": report.method,
        "ablation": report.ablation,
        "count": len(report.records),
        "aggregates": report.aggregates,
        "config_digest": config_digest,
        "seed": seed,
    }
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    (out / "table.txt").write_text(report.summary_table() + "\n")
    for axis, rows in report.curves.items():
        cols = ["lo", "hi", "count", *METRICS]
        lines = ["\t".join(cols)] + ["\t".join(repr(float(r[c])) if c != "count" else str(r[c]) for c in cols) for r in rows]
        (out / f"curve_{axis}.tsv").write_text("\n".join(lines) + "\n")
    return out
