"""Command-line entry points: dataset synthesis, training, evaluation,
prediction filtering, gradient checking, and ablation grids.

Config files are JSON. A training config has a "pipeline" section (any
PipelineConfig field, plus optional "preset": "desk"|"full") and a "data"
section whose "train"/"val" entries are either {"dir": <dataset dir>} or
{"synth": {<SynthConfig fields>}}.
"""

from __future__ import annotations

import argparse
import json
import sys
import numpy as np

from . import harness, numkit, postproc
from .data import SynthConfig, read_dataset, synth_dataset, write_dataset
from .harness import Checkpoint, PipelineConfig, load_checkpoint, model_from_checkpoint


def _load_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _pipeline_from(doc: dict) -> PipelineConfig:
    return PipelineConfig.from_dict(doc.get("pipeline", {}))


def _load_split(entry: dict):
    if "dir" in entry:
        return read_dataset(entry["dir"])
    if "synth" in entry:
        return synth_dataset(SynthConfig.from_dict(entry["synth"]))
    raise ValueError("data entry needs either 'dir' or 'synth'")


def _load_data(doc: dict):
    data = doc.get("data")
    if not data or "train" not in data:
        raise ValueError("config needs a 'data' section with at least 'train'")
    train_seqs = _load_split(data["train"])
    val_seqs = _load_split(data["val"]) if "val" in data else None
    return train_seqs, val_seqs


def cmd_synth(args) -> int:
    cfg = SynthConfig.from_dict(_load_json(args.config))
    seqs = synth_dataset(cfg)
    write_dataset(args.out, seqs)
    print(f"wrote {len(seqs)} sequences to {args.out}")
    return 0


def cmd_train(args) -> int:
    doc = _load_json(args.config)
    cfg = _pipeline_from(doc)
    train_seqs, val_seqs = _load_data(doc)
    result = harness.train(train_seqs, cfg, val_seqs,
                           metrics_path=args.metrics, log=print)
    meta = {"epochs_run": result.epochs_run,
            "stopped_early": result.stopped_early,
            "loss_history": [s.train_loss for s in result.history],
            "final_train_accuracy": result.history[-1].train_accuracy,
            "final_val_accuracy": result.history[-1].val_accuracy}
    harness.save_checkpoint(args.out, Checkpoint.of_model(result.model, meta))
    print(f"saved checkpoint to {args.out} after {result.epochs_run} epochs")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    seqs = read_dataset(args.data)
    acc = harness.evaluate(model, seqs, post_window=args.post_window)
    window_txt = "off" if args.post_window is None else str(args.post_window)
    print(f"accuracy {acc:.4f} on {len(seqs)} sequences (post window {window_txt})")
    return 0


def cmd_postproc(args) -> int:
    preds = postproc.read_predictions_csv(args.infile)
    postproc.write_predictions_csv(args.out, postproc.filter_predictions(preds, args.window))
    print(f"filtered {len(preds)} sequences with window {args.window} -> {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    doc = _load_json(args.config) if args.config else {}
    cfg = _pipeline_from(doc)
    model = harness.Model.create(cfg)
    synth = SynthConfig(t_len=cfg.t_len, n_classes=cfg.n_classes,
                        video_width=cfg.video_width, audio_width=cfg.audio_width,
                        regions=cfg.regions, n_sequences=1, seed=cfg.seed)
    seq = synth_dataset(synth)[0]
    report = numkit.grad_check(lambda: model.loss(seq)[0], model.store,
                               max_entries_per_tensor=args.samples,
                               rng=np.random.default_rng(cfg.seed))
    print(report.format())
    ok = report.max_rel_err < args.tolerance
    print(f"{'PASS' if ok else 'FAIL'} (tolerance {args.tolerance:g})")
    return 0 if ok else 1


def cmd_ablate(args) -> int:
    doc = _load_json(args.grid)
    base = _pipeline_from(doc)
    train_seqs, val_seqs = _load_data(doc)
    if val_seqs is None:
        raise ValueError("ablation grid needs a validation split")
    rows = harness.ablate(
        base, train_seqs, val_seqs,
        attention_modes=doc.get("attention_modes"),
        layout_sets=doc.get("layout_sets"),
        shared_options=doc.get("shared_weights"),
        egta_supervision=doc.get("egta_supervision"),
        post_windows=doc.get("post_windows"),
        log=print)
    harness.write_ablation_csv(args.out, rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avloc",
                                     description="audio-visual event localization pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--config", required=True, help="SynthConfig JSON")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model and save a checkpoint")
    p.add_argument("--config", required=True, help="pipeline+data JSON")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", default=None, help="per-epoch metrics CSV")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--post-window", type=int, default=None,
                   help="locality filter window (omit to disable)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("postproc", help="run the locality filter over a prediction CSV")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, required=True)
    p.set_defaults(fn=cmd_postproc)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--config", default=None, help="pipeline JSON (defaults to desk preset)")
    p.add_argument("--samples", type=int, default=40,
                   help="entries checked per tensor (0 = every entry)")
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("ablate", help="run a config grid and emit a CSV of accuracies")
    p.add_argument("--grid", required=True, help="grid JSON")
    p.add_argument("--out", required=True, help="results CSV")
    p.set_defaults(fn=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "samples", None) == 0:
        args.samples = None
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
