"""End-to-end training/evaluation stages shared by the CLI and the tests.

Every stage is deterministic given the RunConfig seed; stage seeds are fixed
offsets so reruns with the same config reproduce artifacts exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, config_hash, write_manifest
from .corpus import read_exams_json, read_reports_jsonl, sample_section_pairs
from .inference import retrieve as op_retrieve
from .metrics import auc, macro_prf, roc_curve
from .nifti import load_volume_file
from .runtime import Runtime, load_report_embeddings, load_splits, make_splits, save_splits, to_json
from .synthetic import SyntheticSpec, read_ground_truth, write_synthetic_dataset
from .text_encoder import (
    embed_report,
    load_checkpoint,
    save_checkpoint,
    train_mlm,
    train_rsm,
)
from .tokenizer import Vocabulary, encode, pack_blocks, train_wordpiece
from .vision import save_vision_checkpoint, train_vision
from .volumes import RawVolume, SequenceType, preprocess


def stage_synth(cfg: RunConfig, dataset_dir, n_exams: int, log=None):
    spec = SyntheticSpec(
        n_exams=n_exams,
        volume_shape=tuple(cfg.canonical_shape),
        seed=cfg.seed,
        sequences=cfg.sequence_types(),
    )
    exams, reports, truths = write_synthetic_dataset(spec, dataset_dir)
    if log:
        log(f"synth: {len(exams)} exams, {sum(t.is_abnormal for t in truths)} abnormal")
    return exams, reports, truths


def stage_splits(cfg: RunConfig, dataset_dir, artifacts, log=None):
    exams = read_exams_json(Path(dataset_dir) / "exams.json")
    split = make_splits(exams, cfg.test_fraction, cfg.train_valid_ratios, cfg.seed)
    artifacts = Path(artifacts)
    artifacts.mkdir(parents=True, exist_ok=True)
    save_splits(split, artifacts / "splits.json")
    (artifacts / "dataset_ref.json").write_text(to_json({"dataset_dir": str(dataset_dir)}))
    if log:
        log(f"splits: {len(split.train)} train / {len(split.valid)} valid / {len(split.test)} test")
    return split


def _split_reports(dataset_dir, artifacts):
    reports = read_reports_jsonl(Path(dataset_dir) / "reports.jsonl")
    splits = load_splits(Path(artifacts) / "splits.json")
    by_exam = {r.exam_id: r for r in reports}
    train = [by_exam[e] for e in splits["train"] if e in by_exam]
    valid = [by_exam[e] for e in splits["valid"] if e in by_exam]
    return reports, train, valid


def stage_tokenizer(cfg: RunConfig, dataset_dir, artifacts, log=None) -> Vocabulary:
    _, train, _ = _split_reports(dataset_dir, artifacts)
    vocab = train_wordpiece(
        (r.full_text for r in train), vocab_size=cfg.vocab_size, min_frequency=cfg.min_frequency
    )
    vocab.save(Path(artifacts) / "vocab.txt")
    if log:
        log(f"tokenizer: |V| = {len(vocab)}")
    return vocab


def _corpus_blocks(reports, vocab, block_length):
    """Report-aligned blocks: each report starts at position 0 of its block.

    Alignment anchors the learned position embeddings to the report layout,
    which converges far faster than packing one continuous corpus stream.
    """
    blocks = []
    for r in reports:
        ids = encode(r.full_text, vocab).token_ids
        blocks.extend(pack_blocks(ids, block_length, vocab=vocab))
    return blocks


def stage_mlm(cfg: RunConfig, dataset_dir, artifacts, max_steps=None, log=None):
    artifacts = Path(artifacts)
    vocab = Vocabulary.load(artifacts / "vocab.txt")
    _, train, valid = _split_reports(dataset_dir, artifacts)
    train_blocks = _corpus_blocks(train, vocab, cfg.block_length)
    val_blocks = _corpus_blocks(valid, vocab, cfg.block_length)
    state = train_mlm(
        train_blocks,
        val_blocks,
        cfg.encoder_config(len(vocab)),
        epochs=cfg.mlm.epochs,
        batch_size=cfg.mlm.batch_size,
        lr=cfg.mlm.lr,
        mask_rate=cfg.mlm.mask_rate,
        patience=cfg.mlm.patience,
        seed=cfg.seed + 1,
        max_steps=max_steps,
        log=log,
    )
    save_checkpoint(
        artifacts / "text_mlm.pt",
        state.model,
        vocab,
        head=state.head,
        extras={"stage": "mlm", "best_val_loss": state.best_val_loss,
                "best_epoch": state.best_epoch, "history": state.history},
    )
    return state


def stage_rsm(cfg: RunConfig, dataset_dir, artifacts, log=None):
    artifacts = Path(artifacts)
    model, vocab, _, _ = load_checkpoint(artifacts / "text_mlm.pt")
    _, train, valid = _split_reports(dataset_dir, artifacts)
    rng = np.random.default_rng(cfg.seed + 2)
    train_pairs = sample_section_pairs(train, cfg.rsm.n_pairs, cfg.rsm.true_fraction, rng)
    val_pairs = sample_section_pairs(valid, max(cfg.rsm.n_pairs // 5, 8), cfg.rsm.true_fraction, rng)
    state = train_rsm(
        train_pairs,
        val_pairs,
        model,
        vocab,
        epochs=cfg.rsm.epochs,
        batch_size=cfg.rsm.batch_size,
        lr=cfg.rsm.lr,
        warmup_steps=cfg.rsm.warmup_steps,
        seed=cfg.seed + 3,
        log=log,
    )
    save_checkpoint(
        artifacts / "text_encoder.pt",
        state.model,
        vocab,
        extras={"stage": "rsm", "best_val_loss": state.best_val_loss,
                "best_epoch": state.best_epoch, "history": state.history},
    )
    return state


def stage_embed_reports(cfg: RunConfig, dataset_dir, artifacts, log=None):
    artifacts = Path(artifacts)
    model, vocab, _, _ = load_checkpoint(artifacts / "text_encoder.pt")
    model.eval()
    reports = read_reports_jsonl(Path(dataset_dir) / "reports.jsonl")
    out = artifacts / "report_embeddings.jsonl"
    with open(out, "w", encoding="utf-8") as f:
        for r in reports:
            vec = embed_report(r.full_text, model, vocab)
            f.write(json.dumps({"report_id": r.report_id, "exam_id": r.exam_id,
                                "vector": [float(x) for x in vec]}) + "\n")
    if log:
        log(f"embedded {len(reports)} reports")
    return out


def stage_preprocess(cfg: RunConfig, dataset_dir, artifacts, log=None):
    dataset_dir = Path(dataset_dir)
    cache = Path(artifacts) / "cache"
    cache.mkdir(parents=True, exist_ok=True)
    exams = read_exams_json(dataset_dir / "exams.json")
    n = 0
    for exam in exams:
        for seq, ref in exam.sequences.items():
            data, spacing = load_volume_file(dataset_dir / ref)
            raw = RawVolume(data, spacing, seq, exam.patient_age_years)
            canon = preprocess(raw, canonical_shape=tuple(cfg.canonical_shape))
            np.save(cache / f"{exam.exam_id}_{seq.value}.npy",
                    np.asarray(canon.data, dtype=np.float32))
            n += 1
    (cache / "manifest.json").write_text(
        to_json({"canonical_shape": list(cfg.canonical_shape), "n_volumes": n})
    )
    if log:
        log(f"preprocessed {n} volumes to {tuple(cfg.canonical_shape)}")
    return cache


def stage_train_vision(cfg: RunConfig, dataset_dir, artifacts, sequences=None, log=None):
    artifacts = Path(artifacts)
    cache = artifacts / "cache"
    exams = {e.exam_id: e for e in read_exams_json(Path(dataset_dir) / "exams.json")}
    splits = load_splits(artifacts / "splits.json")
    embeddings = load_report_embeddings(artifacts / "report_embeddings.jsonl")
    report_vec = {}
    reports = read_reports_jsonl(Path(dataset_dir) / "reports.jsonl")
    for r in reports:
        if r.report_id in embeddings:
            report_vec[r.exam_id] = embeddings[r.report_id]

    sequences = sequences or cfg.sequence_types()
    states = {}
    for i, seq in enumerate(sequences):
        def gather(exam_ids):
            vols, ages, targets = [], [], []
            for exam_id in exam_ids:
                exam = exams[exam_id]
                if seq not in exam.sequences or exam_id not in report_vec:
                    continue
                path = cache / f"{exam_id}_{seq.value}.npy"
                if not path.exists():
                    continue
                vols.append(np.load(path))
                ages.append(exam.patient_age_years)
                targets.append(report_vec[exam_id])
            if not vols:
                return np.empty((0,) + tuple(cfg.canonical_shape), dtype=np.float32), np.empty(0), np.empty((0, cfg.embed_dim))
            return (np.stack(vols).astype(np.float32), np.asarray(ages, dtype=np.float32),
                    np.stack(targets).astype(np.float32))

        t_vol, t_age, t_tgt = gather(splits["train"])
        v_vol, v_age, v_tgt = gather(splits["valid"])
        age_mean = float(t_age.mean()) if len(t_age) else 54.0
        age_std = float(t_age.std()) if len(t_age) and t_age.std() > 0 else 21.0
        vcfg = cfg.vision_config(age_mean, age_std)
        state = train_vision(
            t_vol, t_age, t_tgt, v_vol, v_age, v_tgt, vcfg,
            cfg.vision_train_config(), seed=cfg.seed + 10 + i,
            log=(lambda msg, s=seq: log(f"[{s.value}] {msg}")) if log else None,
        )
        save_vision_checkpoint(
            artifacts / f"vision_{seq.value}.pt", state.model, seq,
            extras={"best_val_loss": state.best_val_loss, "n_train": len(t_vol),
                    "age_mean": age_mean, "age_std": age_std},
        )
        states[seq] = state
        if log:
            log(f"vision[{seq.value}]: best val MSE {state.best_val_loss:.5f} over {len(t_vol)} pairs")
    return states


def stage_build_index(cfg: RunConfig, dataset_dir, artifacts, subset: str = "test", log=None):
    artifacts = Path(artifacts)
    runtime = Runtime(artifacts, dataset_dir)
    splits = load_splits(artifacts / "splits.json")
    exam_ids = splits[subset] if subset in splits else sorted(runtime.exams)
    index = runtime.build_index_for(exam_ids)
    index.save(artifacts / "index")
    if log:
        log(f"index: {len(index)} embeddings over {len(exam_ids)} exams")
    return index


def youden_threshold(scores, labels) -> float:
    curve = roc_curve(scores, labels)
    j = np.asarray(curve.tpr) - np.asarray(curve.fpr)
    best = int(np.argmax(j))
    thr = curve.thresholds[best]
    return float(thr) if np.isfinite(thr) else 1.0


def _exam_scores(runtime: Runtime, exam_ids, query_texts):
    """One pass over exams computing abnormality and per-query ensemble scores."""
    out = {}
    for exam_id in exam_ids:
        exam = runtime.exam(exam_id)
        seqs = runtime._sequences_for(exam)
        embeddings = {s: runtime.image_embedding(exam_id, s) for s in seqs}
        normal = runtime.normal_query()
        from .inference import abnormality_score, ensemble, similarity

        ab = {s: abnormality_score(embeddings[s], normal) for s in seqs}
        ab_val, _ = ensemble(ab)
        per_query = {}
        for text in query_texts:
            q = runtime.query(text)
            sims = {s: similarity(embeddings[s], q).value for s in seqs}
            val, _ = ensemble(sims)
            per_query[text] = val
        out[exam_id] = {"abnormality": ab, "abnormality_ensemble": ab_val, "queries": per_query}
    return out


def stage_evaluate(cfg: RunConfig, dataset_dir, artifacts, out_path=None, task: str = "all", log=None) -> dict:
    artifacts = Path(artifacts)
    runtime = Runtime(artifacts, dataset_dir)
    splits = load_splits(artifacts / "splits.json")
    truths = {t.exam_id: t for t in read_ground_truth(Path(dataset_dir) / "ground_truth.jsonl")}
    task_queries = runtime.queries.get("synthetic_tasks", {})
    query_texts = sorted(set(task_queries.values()))

    test_ids = [e for e in splits["test"] if e in truths]
    valid_ids = [e for e in splits["valid"] if e in truths]
    test_scores = _exam_scores(runtime, test_ids, query_texts)
    valid_scores = _exam_scores(runtime, valid_ids, [])

    labels = np.array([int(truths[e].is_abnormal) for e in test_ids])
    ens = np.array([test_scores[e]["abnormality_ensemble"] for e in test_ids])

    valid_labels = np.array([int(truths[e].is_abnormal) for e in valid_ids])
    valid_ens = np.array([valid_scores[e]["abnormality_ensemble"] for e in valid_ids])
    threshold = youden_threshold(valid_ens, valid_labels) if len(set(valid_labels)) == 2 else 0.5

    precision, recall, f1 = macro_prf(ens, labels, threshold)
    ens_curve = roc_curve(ens, labels) if len(set(labels)) == 2 else None
    per_sequence = {}
    for seq in runtime.vision_models:
        ids = [e for e in test_ids if seq in runtime.exam(e).sequences]
        seq_scores = np.array([test_scores[e]["abnormality"][seq] for e in ids])
        seq_labels = np.array([int(truths[e].is_abnormal) for e in ids])
        if len(set(seq_labels)) != 2:
            continue
        v_ids = [e for e in valid_ids if seq in runtime.exam(e).sequences]
        v_scores = np.array([valid_scores[e]["abnormality"][seq] for e in v_ids])
        v_labels = np.array([int(truths[e].is_abnormal) for e in v_ids])
        seq_thr = youden_threshold(v_scores, v_labels) if len(set(v_labels)) == 2 else threshold
        seq_p, seq_r, seq_f = macro_prf(seq_scores, seq_labels, seq_thr)
        per_sequence[seq.value] = {
            "auc": auc(seq_scores, seq_labels),
            "precision": seq_p,
            "recall": seq_r,
            "f1": seq_f,
            "threshold": seq_thr,
            "n": len(ids),
        }

    # exams whose lesion hides on at least one acquired sequence, plus normals
    subset_ids = []
    for e in test_ids:
        t = truths[e]
        if not t.is_abnormal:
            subset_ids.append(e)
        else:
            acquired = [s for s in runtime.exam(e).sequences]
            if any(not t.visibility.get(s, False) for s in acquired):
                subset_ids.append(e)
    visibility_subset = {}
    sub_labels = np.array([int(truths[e].is_abnormal) for e in subset_ids])
    if len(set(sub_labels)) == 2:
        sub_ens = np.array([test_scores[e]["abnormality_ensemble"] for e in subset_ids])
        per_seq_sub = {}
        for seq in runtime.vision_models:
            ids = [e for e in subset_ids if seq in runtime.exam(e).sequences]
            s_scores = np.array([test_scores[e]["abnormality"][seq] for e in ids])
            s_labels = np.array([int(truths[e].is_abnormal) for e in ids])
            if len(set(s_labels)) == 2:
                per_seq_sub[seq.value] = auc(s_scores, s_labels)
        visibility_subset = {
            "ensemble_auc": auc(sub_ens, sub_labels),
            "per_sequence_auc": per_seq_sub,
            "n": len(subset_ids),
        }

    specialised = {}
    for label, text in sorted(task_queries.items()):
        task_labels = np.array([int(truths[e].label == label) for e in test_ids])
        task_scores = np.array([test_scores[e]["queries"][text] for e in test_ids])
        if len(set(task_labels)) == 2:
            specialised[label] = {
                "auc": auc(task_scores, task_labels),
                "n_pos": int(task_labels.sum()),
                "query": text,
            }

    retrieval = {}
    if runtime.index is not None and len(runtime.index):
        k = 15
        precisions = []
        for label, text in sorted(task_queries.items()):
            result = op_retrieve(runtime.query(text), runtime.index, None, k)
            flags = [int(truths[e].label == label) for e, _ in result.ranked if e in truths]
            from .metrics import precision_at_k

            p = precision_at_k(flags, min(k, max(len(flags), 1)))
            retrieval[label] = {"precision_at_15": p, "retrieved": len(flags)}
            precisions.append(p)
        if precisions:
            retrieval["mean_precision_at_15"] = float(np.mean(precisions))

    metrics = {
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "n_test": len(test_ids),
        "task_normal_vs_abnormal": {
            "ensemble": {
                "auc": auc(ens, labels) if len(set(labels)) == 2 else None,
                "precision": precision,
                "recall": recall,
                "f1": f1,
                "threshold": threshold,
            },
            "ensemble_roc": {
                "fpr": [float(x) for x in ens_curve.fpr],
                "tpr": [float(x) for x in ens_curve.tpr],
            }
            if ens_curve is not None
            else None,
            "per_sequence": per_sequence,
            "visibility_subset": visibility_subset,
        },
        "task_specialised": specialised,
        "task_retrieval": retrieval,
    }
    keep = {
        "all": None,
        "normal-vs-abnormal": "task_normal_vs_abnormal",
        "specialised": "task_specialised",
        "retrieval": "task_retrieval",
    }
    if task not in keep:
        raise ValueError(f"unknown evaluation task {task!r}")
    if keep[task] is not None:
        for key in ("task_normal_vs_abnormal", "task_specialised", "task_retrieval"):
            if key != keep[task]:
                del metrics[key]
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(to_json(metrics))
    if log and "task_normal_vs_abnormal" in metrics:
        ens_auc = metrics["task_normal_vs_abnormal"]["ensemble"]["auc"]
        log(f"evaluate: ensemble AUC {ens_auc}")
    return metrics


def run_pipeline(cfg: RunConfig, workdir, n_exams: int, log=None, mlm_max_steps=None) -> dict:
    """All stages in order; returns the evaluation metrics dict."""
    workdir = Path(workdir)
    dataset = workdir / "dataset"
    artifacts = workdir / "artifacts"
    dataset.mkdir(parents=True, exist_ok=True)
    artifacts.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(max(torch.get_num_threads(), 1))

    stage_synth(cfg, dataset, n_exams, log=log)
    stage_splits(cfg, dataset, artifacts, log=log)
    stage_tokenizer(cfg, dataset, artifacts, log=log)
    stage_mlm(cfg, dataset, artifacts, max_steps=mlm_max_steps, log=log)
    stage_rsm(cfg, dataset, artifacts, log=log)
    stage_embed_reports(cfg, dataset, artifacts, log=log)
    stage_preprocess(cfg, dataset, artifacts, log=log)
    stage_train_vision(cfg, dataset, artifacts, log=log)
    stage_build_index(cfg, dataset, artifacts, log=log)
    metrics = stage_evaluate(cfg, dataset, artifacts, workdir / "metrics.json", log=log)
    write_manifest(artifacts / "run_manifest.json", cfg, command="pipeline",
                   extra={"n_exams": n_exams})
    return metrics
