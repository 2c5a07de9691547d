import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from visdereverb.config import EvalConfig
from visdereverb.dataset import SceneSamplerConfig, build_split, load_split, min_clean_samples
from visdereverb.dsp import AudioClip, StftConfig
from visdereverb.errors import DataError
from visdereverb.metrics import aggregate, evaluate, lsd, relative_improvement, segsnr, stft_mse, write_report

DESK = StftConfig.desk()


def clip(x, rate=16000):
    return AudioClip(np.asarray(x, dtype=np.float64), rate)


def lsd_oracle(ref, est, cfg):
    # per-frame direct DFT, no shared code with the pipeline STFT
    n = np.arange(cfg.win_length)
    win = 0.54 - 0.46 * np.cos(2 * np.pi * n / cfg.win_length)
    k = np.arange(cfg.kept_bins)
    n = np.arange(cfg.win_length)
    basis = np.exp(-2j * np.pi * np.outer(n, k) / cfg.fft_size)
    per_frame = []
    for t in range(1 + (len(ref) - cfg.win_length) // cfg.hop_length):
        sl = slice(t * cfg.hop_length, t * cfg.hop_length + cfg.win_length)
        a = 20 * np.log10(np.abs((ref[sl] * win) @ basis) + 1e-5)
        b = 20 * np.log10(np.abs((est[sl] * win) @ basis) + 1e-5)
        per_frame.append(np.sqrt(np.mean((a - b) ** 2)))
    return np.mean(per_frame)


def test_lsd_identity_and_oracle(rng):
    x = rng.standard_normal(2000)
    y = rng.standard_normal(2000)
    assert lsd(clip(x), clip(x), DESK) == 0.0
    assert lsd(clip(x), clip(y), DESK) == pytest.approx(lsd_oracle(x, y, DESK), rel=1e-9)


@given(st.floats(0.01, 100.0))
def test_lsd_scale(c):
    x = np.random.default_rng(0).standard_normal(1600) * 100
    assert lsd(clip(x), clip(c * x), DESK) == pytest.approx(abs(20 * np.log10(c)), abs=2e-3)


def test_lsd_ten_times_is_twenty_db():
    x = np.random.default_rng(1).standard_normal(3200) * 1000
    assert lsd(clip(x), clip(10 * x)) == pytest.approx(20.0, abs=1e-6)


def test_lsd_trims_and_pads(rng):
    x = rng.standard_normal(1000)
    assert lsd(clip(x), clip(np.concatenate([x, rng.standard_normal(500)])), DESK) == 0.0
    short = x.copy()
    short[800:] = 0
    assert lsd(clip(x), clip(x[:800]), DESK) == lsd(clip(x), clip(short), DESK)


def test_metric_errors():
    with pytest.raises(DataError, match="empty input"):
        lsd(clip([]), clip(np.ones(10)))
    with pytest.raises(DataError, match="rate mismatch"):
        segsnr(clip(np.ones(500)), clip(np.ones(500), 8000))
    with pytest.raises(DataError, match="no voiced frames"):
        segsnr(clip(np.zeros(1000)), clip(np.ones(1000)))


def test_segsnr_examples(rng):
    x = rng.standard_normal(256 * 6)
    assert segsnr(clip(x), clip(x)) == 35.0
    # est == 0: every frame has error energy equal to its signal energy
    assert segsnr(clip(x), clip(np.zeros_like(x))) == 0.0
    noise = rng.standard_normal(x.shape)
    for k in range(6):
        sl = slice(256 * k, 256 * (k + 1))
        noise[sl] *= np.sqrt(np.sum(x[sl] ** 2) / np.sum(noise[sl] ** 2) / 100)
    assert segsnr(clip(x), clip(x + noise)) == pytest.approx(20.0, abs=0.01)


def test_segsnr_oracle_and_clamp(rng):
    x = rng.standard_normal(256 * 4)
    x[256:512] = 0  # silent frame is skipped
    est = x + 0.3 * rng.standard_normal(x.shape)
    frames = [k for k in range(4) if k != 1]
    vals = [np.clip(10 * np.log10(np.sum(x[256 * k : 256 * k + 256] ** 2) / np.sum((x - est)[256 * k : 256 * k + 256] ** 2)), -10, 35) for k in frames]
    assert segsnr(clip(x), clip(est)) == pytest.approx(np.mean(vals), abs=1e-12)
    assert segsnr(clip(x), clip(-30 * x)) == -10.0


def test_stft_mse(rng):
    x = rng.standard_normal(1000)
    assert stft_mse(clip(x), clip(x), DESK) == 0.0
    assert stft_mse(clip(1000 * x), clip(1000 * np.e * x), DESK) == pytest.approx(1.0, abs=1e-6)


def test_relative_improvement():
    assert relative_improvement(10.0, 7.5) == 0.25
    assert relative_improvement(10.0, 12.0) == -0.2
    assert relative_improvement(4.0, 6.0, lower_is_better=False) == 0.5
    assert relative_improvement(0.0, 1.0) == 0.0


def fake_records(n, seed=0):
    r = np.random.default_rng(seed)
    return [
        {
            "sample_id": f"sample_{i:05d}",
            "lsd": r.uniform(5, 10),
            "segsnr": r.uniform(-5, 10),
            "stft_mse": r.uniform(1, 3),
            "lsd_unprocessed": r.uniform(10, 15),
            "segsnr_unprocessed": r.uniform(-10, 0),
            "stft_mse_unprocessed": r.uniform(3, 5),
            "rt60_in": None if i % 7 == 0 else r.uniform(0.1, 1.0),
            "distance": r.uniform(0.5, 4.0),
        }
        for i in range(n)
    ]


def test_aggregate_arithmetic_and_permutation():
    recs = fake_records(20)
    cfg = EvalConfig()
    a = aggregate("wpe", "full_pano", recs, cfg.distance_edges, cfg.rt60_edges)
    mean = np.mean([r["lsd"] for r in recs])
    base = np.mean([r["lsd_unprocessed"] for r in recs])
    assert a.aggregates["lsd"]["mean"] == pytest.approx(mean, rel=1e-12)
    assert a.aggregates["lsd"]["relative_improvement"] == pytest.approx((base - mean) / base, rel=1e-12)
    assert a.aggregates["segsnr"]["median"] == pytest.approx(np.median([r["segsnr"] for r in recs]))
    b = aggregate("wpe", "full_pano", recs[::-1], cfg.distance_edges, cfg.rt60_edges)
    assert a.aggregates == b.aggregates and json.dumps(a.curves) == json.dumps(b.curves)
    for axis in ("distance", "rt60"):
        assert sum(row["count"] for row in a.curves[axis]) == len(recs)


@pytest.fixture(scope="module")
def small_split(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    build_split(root, "test", 3, SceneSamplerConfig(rng_seed=4, clip_seconds=0.4), min_samples=min_clean_samples(DESK, 64))
    return load_split(root / "test")


def test_evaluate_none_is_passthrough(small_split, tmp_path):
    rep = evaluate(small_split, "none", stft_cfg=DESK)
    for rec, s in zip(rep.records, small_split):
        assert rec["lsd"] == lsd(s.clean, s.reverb, DESK) == rec["lsd_unprocessed"]
        assert rec["distance"] == s.meta.distance and rec["rt60_in"] == s.meta.rt60
    assert rep.aggregates["lsd"]["relative_improvement"] == 0.0
    again = evaluate(small_split, "none", stft_cfg=DESK)
    a = write_report(rep, tmp_path / "a", "d", 0)
    b = write_report(again, tmp_path / "b", "d", 0)
    for name in ("records.jsonl", "summary.json", "table.txt", "curve_distance.tsv", "curve_rt60.tsv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    summary = json.loads((a / "summary.json").read_text())
    assert summary["count"] == 3 and summary["config_digest"] == "d"


def test_evaluate_wpe(small_split):
    rep = evaluate(small_split, "wpe", stft_cfg=DESK)
    assert all(np.isfinite(v) for agg in rep.aggregates.values() for v in agg.values())


def test_evaluate_errors(small_split):
    with pytest.raises(DataError, match="empty split"):
        evaluate([], "none")
    with pytest.raises(DataError, match="missing checkpoint"):
        evaluate(small_split, "vida")
    with pytest.raises(DataError, match="unknown method"):
        evaluate(small_split, "magic")
