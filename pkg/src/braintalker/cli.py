"""Command-line entry point: ``braintalker <command> ...``.

Commands: synthgen, train, synth, eval, plot. Values given as flags override
those read from ``--config``.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .dataio import DataError, load_manifest, read_ecog, read_mel, split_corpus, write_mel
from .extractor import ExtractorSpec

log = logging.getLogger("braintalker")

PROTOCOL_UNSEEN_INDEX = 7  # the eighth word of a 12-word vocabulary


def default_unseen_word(entries) -> str:
    """The eighth word label in sorted order, or the last one for smaller vocabularies."""
    labels = sorted({e.word_label for e in entries})
    if not labels:
        raise DataError("the manifest is empty")
    return labels[min(PROTOCOL_UNSEEN_INDEX, len(labels) - 1)]


def _read_json(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"config file {path} is not valid JSON: {exc}") from None


def cmd_synthgen(args):
    from .synthdata import SynthConfig, generate_corpus

    cfg = SynthConfig.from_dict(_read_json(args.config))
    if args.seed is not None:
        cfg = SynthConfig.from_dict({**cfg.__dict__, "seed": args.seed})
    print(generate_corpus(cfg, args.out))


def build_train_config(args):
    from .training import TrainConfig

    raw = _read_json(args.config)
    cfg = TrainConfig.from_dict(raw)
    overrides = {}
    if args.no_lf:
        overrides["use_lf"] = False
    if args.mel_bins is not None:
        overrides["mel_bins"] = args.mel_bins
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.unseen_word is not None:
        overrides["unseen_word"] = args.unseen_word
    if args.extractor == "pretrained":
        overrides["extractor"] = ExtractorSpec.pretrained(cfg.extractor.checkpoint_dir)
    elif args.extractor == "scratch" and cfg.extractor.kind != "scratch":
        overrides["extractor"] = ExtractorSpec()
    overrides["out_dir"] = str(args.out)
    return TrainConfig.from_dict({**cfg.to_dict(), **overrides})


def cmd_train(args):
    from .training import load_checkpoint, train

    cfg = build_train_config(args)
    entries = load_manifest(args.data)
    if cfg.unseen_word is None:
        cfg.unseen_word = default_unseen_word(entries)
    split = split_corpus(entries, cfg.unseen_word, cfg.heldout_trial)
    resume = load_checkpoint(args.resume, expect=cfg) if args.resume else None
    ckpt = train(split, cfg, resume=resume)
    last = ckpt.history[-1] if ckpt.history else {}
    print(json.dumps({
        "out": str(args.out), "epochs": ckpt.epoch, "best_epoch": ckpt.best_epoch,
        "best_val_L_mel": ckpt.best_val, "final_val_L_mel": last.get("val_L_mel"),
    }))


def cmd_synth(args):
    from .model import prepare_ecog
    from .training import load_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.build_model()
    rec = read_ecog(args.input, expected_channels=ckpt.config.channels)
    mel = model.synthesize(prepare_ecog(rec))
    print(write_mel(mel, args.out))


def cmd_eval(args):
    from .evaluation import evaluate_dirs

    report = evaluate_dirs(args.pred, args.ref)
    json_path, csv_path = report.write(args.report)
    summary = {m: {"mean": v[0], "ci95": v[1]} for m, v in report.summary.items()}
    print(json.dumps({"json": str(json_path), "csv": str(csv_path), "summary": summary}))


def plot_mel(mel, path, title=None):
    """Render a frames x bins log-mel as a heatmap PNG; returns the image artist."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    values = np.asarray(getattr(mel, "values", mel))
    hop_s = getattr(mel, "hop_ms", 10) / 1000
    fig, ax = plt.subplots(figsize=(6, 3))
    im = ax.imshow(values.T, origin="lower", aspect="auto", interpolation="nearest",
                   extent=(0, values.shape[0] * hop_s, -0.5, values.shape[1] - 0.5))
    ax.set_xlabel("time (s)")
    ax.set_ylabel("mel bin")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, label="log amplitude")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return im


def cmd_plot(args):
    plot_mel(read_mel(args.mel), args.png, title=Path(args.mel).name)
    print(args.png)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="braintalker", description="ECoG-to-mel decoding toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synthgen", help="write a synthetic paired ECoG/speech corpus")
    s.add_argument("--config", help="JSON file with SynthConfig fields")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synthgen)

    t = sub.add_parser("train", help="train a model on a manifest")
    t.add_argument("--config", help="JSON file with TrainConfig fields")
    t.add_argument("--data", required=True, help="manifest.jsonl")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--no-lf", action="store_true", help="drop the latent feature loss")
    t.add_argument("--extractor", choices=("scratch", "pretrained"))
    t.add_argument("--mel-bins", type=int, choices=(13, 80))
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--unseen-word", help="word label held out entirely")
    t.set_defaults(func=cmd_train)

    y = sub.add_parser("synth", help="generate a mel-spectrogram from one ECoG recording")
    y.add_argument("--ckpt", required=True)
    y.add_argument("--input", required=True, help="ECoG WAV or .f32 file")
    y.add_argument("--out", required=True, help="output .melbin path")
    y.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", help="RMSE/MCD/PCC between two directories of .melbin files")
    e.add_argument("--pred", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--report", required=True, help="report path (.json; a .csv is written alongside)")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("plot", help="render a .melbin as a PNG heatmap")
    g.add_argument("--mel", required=True)
    g.add_argument("--png", required=True)
    g.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    from .training import CheckpointError, TrainingError

    try:
        args.func(args)
    except (DataError, CheckpointError, TrainingError, ValueError, OSError, ImportError) as exc:
        print(f"braintalker {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
