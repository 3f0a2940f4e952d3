"""Command-line interface: gen-data, train, convert, eval, adapter-report.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every subcommand takes --seed; one root seed drives all named RNG
streams, so reruns with the same seed reproduce outputs byte-for-byte.
"""

import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import csv
import json
import pathlib
import sys
import time

import numpy as np

from . import autodiff as ad
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import (
    ModelConfig,
    TrainConfig,
    config_from_dict,
    config_to_dict,
    seed_stream,
)
from .corpus import make_corpus
from .decoder import FlowConfig, sample
from .dsp import AudioClip, AudioFormatError, griffin_lim, load_wav, mel_spectrogram, resample, save_wav
from .evaluation import build_eval_report, write_adapter_report, ascii_bar_chart
from .model import VoiceConversionModel
from .training import TrainingDiverged, train, write_loss_csv

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(ValueError):
    pass


class DataError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="flowvc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[], help="synthesize a multi-speaker corpus")
    p.add_argument("--speakers", type=int, required=True, help="number of synthetic speakers")
    p.add_argument("--utts", type=int, required=True, help="utterances (scripts) per speaker")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory for WAVs + manifest")

    p = sub.add_parser("train", help="train a model on a generated corpus")
    p.add_argument("--config", help="JSON config file with model/train sections")
    p.add_argument("--data", required=True, help="corpus directory (with manifest.csv)")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--loss-csv", help="loss log path (default: <out>.loss.csv)")
    p.add_argument("--steps", type=int, help="override training step count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-vq", action="store_true", help="ablation: drop the VQ bottleneck")
    p.add_argument("--no-adapter", action="store_true",
                   help="ablation: fixed layer selection instead of adapters")
    p.add_argument("--condition", choices=["cross-attention", "saln", "mean-add"],
                   help="decoder speaker-conditioning variant")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, e.g. model.codebook_size=64")

    p = sub.add_parser("convert", help="convert a source clip to a reference voice")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--steps", type=int, default=10, help="sampling steps")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--glim-iters", type=int, default=32)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out pairs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pairs", required=True, help="CSV of source,reference WAV paths")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--convert-steps", type=int, default=32)

    p = sub.add_parser("adapter-report", help="dump adapter weights as CSV + chart")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="output directory")
    return parser


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _apply_override(tree: dict, spec: str) -> None:
    if "=" not in spec:
        raise UsageError(f"override {spec!r} is not KEY=VALUE")
    dotted, raw = spec.split("=", 1)
    keys = dotted.strip().split(".")
    node = tree
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise UsageError(f"override path {dotted!r} crosses a non-dict value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node[keys[-1]] = value


def _load_configs(args) -> tuple:
    tree = {"model": {}, "train": {}}
    if getattr(args, "config", None):
        path = pathlib.Path(args.config)
        if not path.exists():
            raise DataError(f"config file not found: {path}")
        loaded = json.loads(path.read_text())
        unknown = sorted(set(loaded) - {"model", "train"})
        if unknown:
            raise UsageError(f"unknown config sections: {unknown}")
        for section in ("model", "train"):
            tree[section].update(loaded.get(section, {}))
    for spec in getattr(args, "set", []):
        _apply_override(tree, spec)
    unknown = sorted(set(tree) - {"model", "train"})
    if unknown:
        raise UsageError(f"unknown config sections: {unknown}")

    tree["model"].setdefault("seed", args.seed)
    tree["train"].setdefault("seed", args.seed)
    if args.steps is not None:
        tree["train"]["steps"] = args.steps
    for flag in ("no_vq", "no_adapter"):
        if getattr(args, flag):
            tree["model"][flag] = True
            tree["train"][flag] = True
    if args.condition:
        tree["model"]["condition"] = args.condition
        tree["train"]["condition"] = args.condition
    try:
        model_cfg = config_from_dict(ModelConfig, tree["model"])
        train_cfg = config_from_dict(TrainConfig, tree["train"])
    except (ValueError, TypeError) as err:
        raise UsageError(str(err)) from err
    return model_cfg, train_cfg


def _read_manifest(data_dir) -> list:
    data_dir = pathlib.Path(data_dir)
    manifest = data_dir / "manifest.csv"
    if not manifest.exists():
        raise DataError(f"manifest not found: {manifest}")
    rows = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append(row)
    if not rows:
        raise DataError(f"manifest is empty: {manifest}")
    items = []
    for row in rows:
        path = data_dir / row["path"]
        if not path.exists():
            raise DataError(f"manifest entry missing on disk: {path}")
        clip = load_wav(path)
        if clip.sample_rate != 16000:
            clip = resample(clip, 16000)
        items.append(_ManifestItem(clip, int(row["speaker_id"]), int(row["script_id"])))
    return items


class _ManifestItem:
    def __init__(self, clip, speaker_id, script_id):
        self.clip = clip
        self.speaker_id = speaker_id
        self.script_id = script_id


def _load_clip_16k(path) -> AudioClip:
    path = pathlib.Path(path)
    if not path.exists():
        raise DataError(f"audio file not found: {path}")
    clip = load_wav(path)
    if clip.sample_rate != 16000:
        clip = resample(clip, 16000)
    return clip


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.speakers < 1 or args.utts < 1:
        raise UsageError("--speakers and --utts must be positive")
    out_dir = pathlib.Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise DataError(f"cannot create output directory {out_dir}: {err}") from err
    items = make_corpus(args.speakers, args.utts, seed=args.seed)
    with open(out_dir / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "speaker_id", "script_id", "duration"])
        for item in items:
            name = f"spk{item.speaker_id:02d}_scr{item.script_id:03d}.wav"
            save_wav(out_dir / name, item.clip)
            writer.writerow([name, item.speaker_id, item.script_id,
                             f"{item.clip.duration:.6f}"])
    print(f"wrote {len(items)} clips + manifest to {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    model_cfg, train_cfg = _load_configs(args)
    items = _read_manifest(args.data)
    model = VoiceConversionModel(model_cfg)
    history, rng_state = train(model, items, train_cfg)
    out = pathlib.Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out, step=len(history), rng_state=rng_state,
                    train_config=train_cfg)
    loss_path = pathlib.Path(args.loss_csv) if args.loss_csv else out.with_suffix(
        out.suffix + ".loss.csv"
    )
    write_loss_csv(history, loss_path)
    print(f"trained {len(history)} steps; final loss {history[-1][1]:.4f}")
    print(f"checkpoint: {out}\nloss log: {loss_path}")
    return EXIT_OK


def cmd_convert(args) -> int:
    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    try:
        model, _ = load_checkpoint(args.ckpt)
    except FileNotFoundError as err:
        raise DataError(f"checkpoint not found: {args.ckpt}") from err
    source = _load_clip_16k(args.source)
    reference = _load_clip_16k(args.reference)

    sampling_rng = seed_stream(args.seed, "sampling")
    with ad.no_grad():
        content, _, _ = model.encode_content(source)
        speaker = model.encode_speaker(reference)
        prior_mean = model.fuse(content, speaker).detach()
    flow = FlowConfig(sigma_min=model.config.flow.sigma_min, steps=args.steps,
                      source=model.config.flow.source)
    start = time.perf_counter()
    mel = sample(prior_mean, speaker, flow, sampling_rng, field=model.field.vector_field)
    decode_seconds = time.perf_counter() - start

    clip = griffin_lim(mel, model.config.mel, iterations=args.glim_iters,
                       rng=seed_stream(args.seed, "glim"))
    out = pathlib.Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_wav(out, clip)
    print(f"decoder RTF ({args.steps} steps): {decode_seconds / source.duration:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        model, _ = load_checkpoint(args.ckpt)
    except FileNotFoundError as err:
        raise DataError(f"checkpoint not found: {args.ckpt}") from err
    items = _read_manifest(args.data)
    pairs_path = pathlib.Path(args.pairs)
    if not pairs_path.exists():
        raise DataError(f"pairs file not found: {pairs_path}")
    pairs = []
    with open(pairs_path, newline="") as fh:
        for row in csv.DictReader(fh):
            pairs.append((_load_clip_16k(row["source"]), _load_clip_16k(row["reference"])))
    if not pairs:
        raise DataError(f"pairs file is empty: {pairs_path}")
    report = build_eval_report(model, [i.clip for i in items], pairs,
                               convert_steps=args.convert_steps, seed=args.seed)
    out = pathlib.Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True))
    print(f"eval report: {out}")
    print(f"disentanglement win-rate: {report['disentanglement_win_rate']:.3f}")
    return EXIT_OK


def cmd_adapter_report(args) -> int:
    try:
        model, _ = load_checkpoint(args.ckpt)
    except FileNotFoundError as err:
        raise DataError(f"checkpoint not found: {args.ckpt}") from err
    weights = write_adapter_report(model, args.out)
    for name in ("content", "speaker"):
        print(f"{name} adapter weights:")
        print(ascii_bar_chart(weights[name]))
    print(f"report written to {args.out}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "convert": cmd_convert,
    "eval": cmd_eval,
    "adapter-report": cmd_adapter_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, AudioFormatError, CheckpointError, FileNotFoundError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except SystemExit as err:  # argparse --help
        return int(err.code or 0)


if __name__ == "__main__":
    sys.exit(main())
