"""Command-line orchestration for the text-vision pipeline.

Every training command writes a manifest (config hash, seed, library versions)
next to its outputs so runs can be reproduced exactly.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import pipeline as pl
from .config import ConfigError, load_config, profile, save_config, write_manifest
from .runtime import Runtime, load_splits, to_json
from .saliency import SmoothGradConfig
from .volumes import SequenceType


def _log(msg: str) -> None:
    print(msg, flush=True)


def _config_from_args(args):
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = profile(args.profile, seed=args.seed)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _add_common(p, dataset=True):
    p.add_argument("--artifacts", required=True, help="artifact directory")
    if dataset:
        p.add_argument("--dataset", default=None,
                       help="dataset directory (defaults to the recorded reference)")
    p.add_argument("--config", default=None, help="RunConfig JSON file")
    p.add_argument("--profile", default="desk", choices=("desk", "paper"))
    p.add_argument("--seed", type=int, default=None)


def _dataset_dir(args):
    if args.dataset:
        return Path(args.dataset)
    ref = Path(args.artifacts) / "dataset_ref.json"
    if not ref.exists():
        raise SystemExit("no --dataset given and no dataset reference recorded")
    return Path(json.loads(ref.read_text())["dataset_dir"])


def _sequence(value):
    try:
        return SequenceType(value)
    except ValueError:
        raise SystemExit(f"unknown sequence {value!r}; choose from "
                         f"{[s.value for s in SequenceType]}")


def cmd_synth_gen(args):
    cfg = _config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pl.stage_synth(cfg, out, args.n_exams, log=_log)
    write_manifest(out / "manifest.json", cfg, "synth-gen", {"n_exams": args.n_exams})


def cmd_split(args):
    cfg = _config_from_args(args)
    pl.stage_splits(cfg, _dataset_dir(args), args.artifacts, log=_log)
    write_manifest(Path(args.artifacts) / "manifest_split.json", cfg, "split")


def cmd_train_tokenizer(args):
    cfg = _config_from_args(args)
    if args.vocab_size:
        cfg.vocab_size = args.vocab_size
    if args.min_frequency:
        cfg.min_frequency = args.min_frequency
    pl.stage_tokenizer(cfg, _dataset_dir(args), args.artifacts, log=_log)
    write_manifest(Path(args.artifacts) / "manifest_tokenizer.json", cfg, "train-tokenizer")


def cmd_train_mlm(args):
    cfg = _config_from_args(args)
    if args.epochs:
        cfg.mlm.epochs = args.epochs
    state = pl.stage_mlm(cfg, _dataset_dir(args), args.artifacts,
                         max_steps=args.max_steps, log=_log)
    write_manifest(Path(args.artifacts) / "manifest_mlm.json", cfg, "train-mlm",
                   {"best_val_loss": state.best_val_loss, "best_epoch": state.best_epoch})


def cmd_train_rsm(args):
    cfg = _config_from_args(args)
    if args.epochs:
        cfg.rsm.epochs = args.epochs
    state = pl.stage_rsm(cfg, _dataset_dir(args), args.artifacts, log=_log)
    write_manifest(Path(args.artifacts) / "manifest_rsm.json", cfg, "train-rsm",
                   {"best_val_loss": state.best_val_loss, "best_epoch": state.best_epoch})


def cmd_embed_reports(args):
    cfg = _config_from_args(args)
    pl.stage_embed_reports(cfg, _dataset_dir(args), args.artifacts, log=_log)


def cmd_preprocess(args):
    cfg = _config_from_args(args)
    pl.stage_preprocess(cfg, _dataset_dir(args), args.artifacts, log=_log)


def cmd_train_vision(args):
    cfg = _config_from_args(args)
    if args.epochs:
        cfg.vision_max_epochs = args.epochs
    sequences = None
    if args.sequences:
        sequences = tuple(_sequence(s) for s in args.sequences.split(","))
    pl.stage_train_vision(cfg, _dataset_dir(args), args.artifacts,
                          sequences=sequences, log=_log)
    write_manifest(Path(args.artifacts) / "manifest_vision.json", cfg, "train-vision")


def cmd_build_index(args):
    cfg = _config_from_args(args)
    pl.stage_build_index(cfg, _dataset_dir(args), args.artifacts,
                         subset=args.subset, log=_log)


def cmd_score(args):
    runtime = Runtime(args.artifacts, args.dataset)
    queries = args.queries.split("||") if args.queries else [runtime.queries["normal"]]
    payload = runtime.score_exam(args.exam_id, queries)
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["exam_id", "sequence", "query", "score"])
            for entry in payload["queries"]:
                for seq, value in sorted(entry["per_sequence"].items()):
                    writer.writerow([payload["exam_id"], seq, entry["query"], repr(value)])
        _log(f"wrote {args.csv}")
        return
    _emit(payload, args.out)


def cmd_triage(args):
    runtime = Runtime(args.artifacts, args.dataset)
    if args.subset:
        splits = load_splits(Path(args.artifacts) / "splits.json")
        exam_ids = splits[args.subset]
    else:
        exam_ids = sorted(runtime.exams)
    rows = runtime.triage(exam_ids)
    out = Path(args.out) if args.out else None
    if out is None:
        print(to_json(rows), end="")
        return
    with open(out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["exam_id", "ensemble_abnormality", "top_sequence"])
        for r in rows:
            writer.writerow([r["exam_id"], repr(r["ensemble_abnormality"]), r["top_sequence"]])
    _log(f"wrote {out}")


def cmd_retrieve(args):
    runtime = Runtime(args.artifacts, args.dataset)
    seq = _sequence(args.sequence) if args.sequence else None
    payload = runtime.retrieve(args.query, seq, args.k)
    _emit(payload, args.out)


def cmd_saliency(args):
    runtime = Runtime(args.artifacts, args.dataset)
    smooth = None
    if args.smooth:
        n, std, seed = args.smooth.split(",")
        smooth = SmoothGradConfig(n_samples=int(n), noise_std=float(std), seed=int(seed))
    out_dir = Path(args.out) if args.out else Path(args.artifacts) / "saliency"
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{args.exam_id}_{args.sequence}_saliency"
    payload = runtime.saliency(
        args.exam_id, _sequence(args.sequence), args.query, smooth=smooth,
        axis=args.axis, save_volume_to=out_dir / f"{stem}.nii.gz",
    )
    png = payload.pop("heatmap_png_base64")
    (out_dir / f"{stem}.png").write_bytes(__import__("base64").b64decode(png))
    (out_dir / f"{stem}.json").write_text(to_json(payload))
    _log(f"wrote {out_dir / stem}.{{json,png,nii.gz}} (key slice {payload['key_slice']})")


def cmd_discrepancy(args):
    runtime = Runtime(args.artifacts, args.dataset)
    report_text = Path(args.report_file).read_text()
    templates = args.templates.split("||") if args.templates else None
    payload = runtime.discrepancy(args.exam_id, report_text, templates,
                                  args.theta_scan, args.theta_report)
    _emit(payload, args.out)


def cmd_evaluate(args):
    cfg = _config_from_args(args)
    metrics = pl.stage_evaluate(cfg, _dataset_dir(args), args.artifacts,
                                out_path=args.out, task=args.task, log=_log)
    if not args.out:
        print(to_json(metrics), end="")


def cmd_pipeline(args):
    cfg = _config_from_args(args)
    metrics = pl.run_pipeline(cfg, args.workdir, args.n_exams, log=_log)
    ensemble = metrics["task_normal_vs_abnormal"]["ensemble"]
    _log(f"pipeline done: ensemble AUC {ensemble['auc']}")


def cmd_config(args):
    cfg = _config_from_args(args)
    save_config(cfg, args.out)
    _log(f"wrote {args.out}")


def cmd_serve(args):
    import uvicorn

    from .service import create_app

    app = create_app(args.artifacts, args.dataset)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")


def _emit(payload, out):
    text = to_json(payload)
    if out:
        Path(out).write_text(text)
        _log(f"wrote {out}")
    else:
        print(text, end="")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="brainalign",
        description="Self-supervised text-vision brain MRI abnormality detection",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate the synthetic paired dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-exams", type=int, default=1000)
    p.add_argument("--config", default=None)
    p.add_argument("--profile", default="desk", choices=("desk", "paper"))
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("split", help="patient-level train/valid/test splits")
    _add_common(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train-tokenizer", help="train the WordPiece vocabulary")
    _add_common(p)
    p.add_argument("--vocab-size", type=int, default=None)
    p.add_argument("--min-frequency", type=int, default=None)
    p.set_defaults(func=cmd_train_tokenizer)

    p = sub.add_parser("train-mlm", help="masked language model pretraining")
    _add_common(p)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--max-steps", type=int, default=None)
    p.set_defaults(func=cmd_train_mlm)

    p = sub.add_parser("train-rsm", help="section-matching fine-tuning")
    _add_common(p)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train_rsm)

    p = sub.add_parser("embed-reports", help="embed every report with the final encoder")
    _add_common(p)
    p.set_defaults(func=cmd_embed_reports)

    p = sub.add_parser("preprocess", help="cache canonical volumes")
    _add_common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train-vision", help="train per-sequence image encoders")
    _add_common(p)
    p.add_argument("--sequences", default=None, help="comma-separated subset")
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train_vision)

    p = sub.add_parser("build-index", help="encode a split into the search index")
    _add_common(p)
    p.add_argument("--subset", default="test", choices=("train", "valid", "test", "all"))
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("score", help="score one exam against queries")
    p.add_argument("--artifacts", required=True)
    p.add_argument("--dataset", default=None)
    p.add_argument("--exam-id", required=True)
    p.add_argument("--queries", default=None, help="'||'-separated sentences")
    p.add_argument("--out", default=None)
    p.add_argument("--csv", default=None,
                   help="write (exam_id, sequence, query, score) rows instead of JSON")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("triage", help="rank exams by ensemble abnormality")
    p.add_argument("--artifacts", required=True)
    p.add_argument("--dataset", default=None)
    p.add_argument("--subset", default=None, choices=(None, "train", "valid", "test"))
    p.add_argument("--out", default=None, help="CSV path (JSON to stdout without)")
    p.set_defaults(func=cmd_triage)

    p = sub.add_parser("retrieve", help="visual-semantic search")
    p.add_argument("--artifacts", required=True)
    p.add_argument("--dataset", default=None)
    p.add_argument("--query", required=True)
    p.add_argument("--sequence", default=None)
    p.add_argument("-k", type=int, default=15)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("saliency", help="guided-backprop saliency for one exam")
    p.add_argument("--artifacts", required=True)
    p.add_argument("--dataset", default=None)
    p.add_argument("--exam-id", required=True)
    p.add_argument("--sequence", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--smooth", default=None, help="n_samples,noise_std,seed")
    p.add_argument("--axis", type=int, default=None,
                   help="slice axis (default: through-plane for the sequence)")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("discrepancy", help="flag report/scan disagreement")
    p.add_argument("--artifacts", required=True)
    p.add_argument("--dataset", default=None)
    p.add_argument("--exam-id", required=True)
    p.add_argument("--report-file", required=True)
    p.add_argument("--templates", default=None, help="'||'-separated sentences")
    p.add_argument("--theta-scan", type=float, default=0.5)
    p.add_argument("--theta-report", type=float, default=0.3)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_discrepancy)

    p = sub.add_parser("evaluate", help="classification/retrieval metrics")
    _add_common(p)
    p.add_argument("--task", default="all",
                   choices=("all", "normal-vs-abnormal", "specialised", "retrieval"))
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pipeline", help="run every stage end to end")
    p.add_argument("--workdir", required=True)
    p.add_argument("--n-exams", type=int, default=1000)
    p.add_argument("--config", default=None)
    p.add_argument("--profile", default="desk", choices=("desk", "paper"))
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("config", help="write a profile's RunConfig JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--profile", default="desk", choices=("desk", "paper"))
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_config)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--artifacts", default=None)
    p.add_argument("--dataset", default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (ConfigError, FileNotFoundError, KeyError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
