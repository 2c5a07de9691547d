"""Command-line entry point: ``visdereverb <subcommand> ...``.

Failures print a single line ``error code=<n> kind=<kind> reason=<text>`` to
stderr and exit with 2 (usage), 3 (data), 4 (numeric) or 1 (anything else).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import yaml

from . import dsp
from .config import PipelineConfig, config_digest, config_keys, to_dict
from .dataset import build_split, load_split, min_clean_samples
from .errors import DataError, NumericError, PipelineError, UsageError
from .gradcheck import TOLERANCE, check_model, check_ops
from .metrics import ABLATIONS, METHODS, evaluate, write_report
from .room import Pose, ShoeboxRoom, rt60_schroeder, simulate_rir
from .train import dereverberate_full, load_model, train
from .view import load_panorama
from .wpe import wpe_clip

log = logging.getLogger("visdereverb")

# config sections each subcommand reads
SECTIONS = {
    "simulate-rir": (),
    "build-dataset": ("stft", "sampler", "view", "model.unet.window"),
    "train": ("stft", "model", "train"),
    "dereverb": ("wpe", "eval.griffin_lim_iters", "eval.random_phase_init"),
    "evaluate": ("stft", "wpe", "eval"),
    "gradcheck": ("model",),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _keys_epilog(command: str) -> str:
    keys = config_keys(PipelineConfig)
    wanted = SECTIONS[command]
    used = [k for k in keys if any(k == w or k.startswith(w + ".") for w in wanted)]
    if not used:
        return "config keys consumed: none (everything comes from flags)"
    return "config keys consumed:\n  " + "\n  ".join(used)


def _parse_value(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def load_config(path: str | None, overrides: list[str] | None = None) -> PipelineConfig:
    """Config file (JSON or YAML) plus ``section.key=value`` overrides."""
    data = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise DataError(f"config file not found: {path}")
        text = p.read_text()
        try:
            data = (yaml.safe_load(text) if p.suffix in (".yaml", ".yml") else json.loads(text)) or {}
        except (yaml.YAMLError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot parse config {path}: {exc}") from exc
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"override must look like section.key=value: {item}")
        key, value = item.split("=", 1)
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise UsageError(f"cannot override inside non-mapping key {key}")
        node[parts[-1]] = _parse_value(value)
    try:
        return PipelineConfig.from_dict(data)
    except TypeError as exc:
        raise UsageError(f"bad config value: {exc}") from exc


def _write_sidecar(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


# --- subcommands --------------------------------------------------------------------


def cmd_simulate_rir(args) -> int:
    absorption = args.absorption if len(args.absorption) == 6 else args.absorption * 6
    if len(absorption) != 6:
        raise UsageError("--absorption takes 1 or 6 values")
    room = ShoeboxRoom(tuple(args.room), tuple(absorption))
    rir = simulate_rir(room, Pose(tuple(args.src)), Pose(tuple(args.mic)), args.max_order)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dsp.write_wav_float(out, rir.samples, rir.sample_rate)
    try:
        rt60 = rt60_schroeder(rir)
    except DataError:
        rt60 = None
    params = {"room": args.room, "absorption": absorption, "src": args.src, "mic": args.mic, "max_order": args.max_order}
    _write_sidecar(out.with_suffix(out.suffix + ".json"), {**params, "rt60": rt60, "config_digest": config_digest(params), "seed": None})
    print(f"rt60={'undefined' if rt60 is None else f'{rt60:.4f}'} samples={len(rir.samples)} out={out}")
    return 0


def cmd_build_dataset(args) -> int:
    cfg = load_config(args.config, args.set)
    sampler = cfg.sampler
    if args.seed is not None:
        sampler = dataclasses.replace(sampler, rng_seed=args.seed)
    if args.synthetic is not None:
        if args.synthetic < 1:
            raise UsageError("--synthetic needs a positive count")
        counts = {"train": args.synthetic, "val": max(1, args.synthetic // 4), "test": max(1, args.synthetic // 4)}
        corpus = None
    else:
        counts = dict(sampler.samples_per_split)
        corpus = args.corpus
    cfg = dataclasses.replace(cfg, sampler=sampler)
    digest = cfg.digest()
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    min_samples = min_clean_samples(cfg.stft, cfg.model.unet.window)
    for split, count in counts.items():
        if count > 0:
            corpus_dir = corpus
            if corpus is not None and (Path(corpus) / split).is_dir():
                corpus_dir = Path(corpus) / split
            build_split(root, split, count, sampler, cfg.view, corpus_dir, min_samples, digest)
            print(f"split={split} count={count} manifest={root / split / 'manifest.jsonl'}")
    (root / "config.json").write_text(cfg.to_json() + "\n")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    model_cfg, train_cfg = cfg.model, cfg.train
    if args.audio_only:
        model_cfg = dataclasses.replace(model_cfg, audio_only=True)
    if args.early_fusion:
        model_cfg = dataclasses.replace(model_cfg, van=dataclasses.replace(model_cfg.van, early_fusion=True))
    if args.no_matching:
        train_cfg = dataclasses.replace(train_cfg, lambda_match=0.0)
    if args.max_steps is not None:
        train_cfg = dataclasses.replace(train_cfg, max_steps=args.max_steps)
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
        model_cfg = dataclasses.replace(model_cfg, seed=args.seed)
    samples = load_split(Path(args.dataset) / args.split)
    out = Path(args.out)
    _, records = train(samples, model_cfg, train_cfg, cfg.stft, out)
    final = dataclasses.replace(cfg, model=model_cfg, train=train_cfg)
    _write_sidecar(out / "run.json", {"config": to_dict(final), "config_digest": final.digest(), "seed": train_cfg.seed})
    last = records[-1]
    print(f"steps={len(records)} total={last['total']:.6f} magnitude={last['magnitude']:.6f} checkpoint={out / 'last.ckpt'}")
    return 0


def cmd_dereverb(args) -> int:
    cfg = load_config(args.config, args.set)
    clip = dsp.read_wav(args.input)
    if args.method == "wpe":
        stft_cfg = cfg.stft
        if args.ckpt is not None:
            _, stft_cfg = load_model(args.ckpt)
        out = wpe_clip(clip, cfg.wpe, stft_cfg)
    else:
        if args.ckpt is None:
            raise UsageError("--method model needs --ckpt")
        model, stft_cfg = load_model(args.ckpt)
        pano = None
        if model.van is not None:
            if args.pano is None:
                raise UsageError("this checkpoint needs --pano")
            pano = load_panorama(args.pano)
        out = dereverberate_full(clip, pano, model, stft_cfg, cfg.eval.griffin_lim_iters, cfg.eval.random_phase_init)
    if not np.all(np.isfinite(out.samples)):
        raise NumericError("non-finite output audio")
    dest = Path(args.out)
    dest.parent.mkdir(parents=True, exist_ok=True)
    dsp.write_wav(dest, out)
    _write_sidecar(dest.with_suffix(dest.suffix + ".json"), {"method": args.method, "ckpt": args.ckpt, "config_digest": cfg.digest(), "seed": None})
    print(f"out={dest} samples={len(out)}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config, args.set)
    split = args.split or cfg.eval.split
    samples = load_split(Path(args.dataset) / split)
    model, stft_cfg = None, cfg.stft
    if args.method in ("audio_only", "vida"):
        if args.ckpt is None:
            raise UsageError(f"--method {args.method} needs --ckpt")
        model, stft_cfg = load_model(args.ckpt)
        if (model.van is None) != (args.method == "audio_only"):
            raise DataError(f"checkpoint {args.ckpt} does not match method {args.method}")
    report = evaluate(samples, args.method, args.ablation, model, stft_cfg, cfg.wpe, cfg.eval)
    for name, agg in report.aggregates.items():
        if not all(math.isfinite(v) for v in agg.values()):
            raise NumericError(f"non-finite {name} aggregate")
    write_report(report, args.out, cfg.digest(), cfg.eval.fov_seed)
    print(report.summary_table())
    return 0


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config, args.set)
    results = check_ops(args.seed)
    if not args.ops_only:
        results["full_model"] = check_model(cfg.model, args.seed)
    worst = max(results.values())
    for name, err in results.items():
        print(f"{name}\t{err:.3e}\t{'ok' if err < TOLERANCE else 'FAIL'}")
    print(f"max_relative_error={worst:.3e} tolerance={TOLERANCE:.0e}")
    if worst >= TOLERANCE:
        raise NumericError(f"gradient check failed: max relative error {worst:.3e}")
    return 0


# --- parser -------------------------------------------------------------------------


def _add_config(p):
    p.add_argument("--config", help="JSON or YAML pipeline config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key, e.g. wpe.iterations=0")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="visdereverb", description="Visual-acoustic speech dereverberation pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text):
        return sub.add_parser(
            name, help=help_text, description=help_text, epilog=_keys_epilog(name), formatter_class=argparse.RawDescriptionHelpFormatter
        )

    p = add("simulate-rir", "Render a shoebox impulse response and print its RT60.")
    p.add_argument("--room", type=float, nargs=3, required=True, metavar=("L", "W", "H"))
    p.add_argument("--src", type=float, nargs=3, required=True, metavar=("X", "Y", "Z"))
    p.add_argument("--mic", type=float, nargs=3, required=True, metavar=("X", "Y", "Z"))
    p.add_argument("--absorption", type=float, nargs="+", default=[0.3])
    p.add_argument("--max-order", type=int, default=30)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate_rir)

    p = add("build-dataset", "Synthesize train/val/test splits with manifests.")
    _add_config(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--corpus", help="directory of clean WAV files (optionally with train/val/test subdirs)")
    src.add_argument("--synthetic", type=int, metavar="N", help="N synthetic training utterances (N//4 for val and test)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_dataset)

    p = add("train", "Train a dereverberation model and write checkpoints plus a loss log.")
    _add_config(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    p.add_argument("--audio-only", action="store_true")
    p.add_argument("--no-matching", action="store_true")
    p.add_argument("--early-fusion", action="store_true")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = add("dereverb", "Enhance one WAV file.")
    _add_config(p)
    p.add_argument("--method", choices=("wpe", "model"), required=True)
    p.add_argument("--ckpt")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--pano")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dereverb)

    p = add("evaluate", "Score a method on a dataset split and write a metric report.")
    _add_config(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split")
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--ablation", choices=ABLATIONS, default="full_pano")
    p.add_argument("--ckpt")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = add("gradcheck", "Finite-difference check of every layer and the full model.")
    _add_config(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ops-only", action="store_true", help="skip the whole-network check")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _kind(exc: PipelineError) -> str:
    return {2: "usage", 3: "data", 4: "numeric"}.get(exc.exit_code, "error")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except PipelineError as exc:
        code, kind, err = exc.exit_code, _kind(exc), exc
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        code, kind, err = 3, "data", exc
    except FloatingPointError as exc:
        code, kind, err = 4, "numeric", exc
    except Exception as exc:  # noqa: BLE001
        code, kind, err = 1, "internal", exc
    reason = " ".join(f"{type(err).__name__}: {err}".split())
    print(f"error code={code} kind={kind} reason={reason}", file=sys.stderr)
    return code

if __name__ == "__main__":
    sys.exit(main())
