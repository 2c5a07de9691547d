"""
Training the visually conditioned network
=========================================

Train the desk-scale model and its audio-only twin for a few hundred steps
on rooms from two very different families, then compare them on held-out
rooms. Expect about fifteen minutes on one core.
"""
import tempfile
from pathlib import Path

import numpy as np

from visdereverb.dataset import RoomFamily, SceneSamplerConfig, build_split, load_split, min_clean_samples
from visdereverb.dsp import StftConfig
from visdereverb.metrics import evaluate
from visdereverb.model import ModelConfig, TrainConfig, loss_magnitude
from visdereverb.train import prepare_items, retrieval_accuracy, train

stft_cfg = StftConfig.desk()
root = Path(tempfile.mkdtemp())

###############################################################################
# One family of small damped rooms and one of large live rooms. The view
# tells the two apart at a glance, while a 64-frame audio window only sees
# the start of the long tails. Clips are 3 s long: with 1 s clips the
# silent stretch after the utterance, where the clean target is zero, makes
# up much of every spectrogram and dominates the magnitude loss.

families = (
    RoomFamily((3.5, 3.0, 2.5), (4.5, 4.0, 3.0), 0.38, 0.48, 20),
    RoomFamily((7.5, 5.5, 3.2), (8.5, 6.5, 3.8), 0.10, 0.15, 40),
)
sampler = SceneSamplerConfig(families=families, rng_seed=3, clip_seconds=3.0, distance_min=0.7, distance_max=3.0)
min_samples = min_clean_samples(stft_cfg, 64)
build_split(root, "train", 48, sampler, min_samples=min_samples)
build_split(root, "test", 16, sampler, min_samples=min_samples)
train_items = prepare_items(load_split(root / "train"), stft_cfg, 64)
test_samples = load_split(root / "test")
test_items = prepare_items(test_samples, stft_cfg, 64)

###############################################################################
# Same seed, same batches, same number of steps. Only the conditioning differs.

steps = 300
models = {}
for name, cfg in (("vida", ModelConfig()), ("audio_only", ModelConfig(audio_only=True))):
    models[name], records = train(train_items, cfg, TrainConfig(epochs=10**6, max_steps=steps), stft_cfg)
    print(name, "training magnitude loss", round(records[0]["magnitude"], 3), "->",
          round(np.mean([r["magnitude"] for r in records[-20:]]), 3))

###############################################################################
# Held-out magnitude loss over every segment, and LSD after Griffin-Lim.

for name, model in models.items():
    losses = []
    for it in test_items:
        pano = None if model.van is None else np.repeat(it.pano[None], len(it.reverb), 0)
        pred, _, _ = model.forward(it.reverb, pano)
        losses.append(loss_magnitude(it.clean[:, 0], pred[:, 0])[0])
    report = evaluate(test_samples, name, model=model, stft_cfg=stft_cfg)
    print(f"{name:10s} held-out L_mag {np.mean(losses):.3f}  LSD {report.aggregates['lsd']['mean']:.2f} dB")

###############################################################################
# The matching loss ties the panorama embedding to the audio bottleneck.
# Retrieval asks whether each panorama finds its own clip in a batch of 16.

vida = models["vida"]
batch = test_items[:16]
e_c = vida.embed_visual(np.stack([it.pano for it in batch]))
_, e_s, _ = vida.forward(np.stack([it.reverb[0] for it in batch]), e_c=e_c)
print("retrieval accuracy", retrieval_accuracy(e_c, e_s), "chance", 1 / 16)
