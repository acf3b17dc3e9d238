"""Artifact store and the one inference path shared by the CLI and the service.

Layout under an artifact directory:

    vocab.txt                 trained WordPiece vocabulary
    text_mlm.pt               MLM checkpoint (encoder + prediction head)
    text_encoder.pt           final text encoder after section matching
    report_embeddings.jsonl   {report_id, exam_id, vector}
    splits.json               {train, valid, test} exam id lists
    cache/                    canonical float32 volumes, one .npy per (exam, seq)
    vision_<seq>.pt           one frozen encoder per sequence
    index.npy / index.json    image-embedding index over the test split
    queries.json              task -> query sentence(s)
    dataset_ref.json          pointer to the dataset directory
"""

from __future__ import annotations

import base64
import json
from functools import lru_cache
from pathlib import Path

import numpy as np

from .config import RunConfig, load_query_config
from .corpus import (
    CorpusError,
    Examination,
    patient_level_split,
    read_exams_json,
    read_reports_jsonl,
)
from .inference import (
    EmbeddingIndex,
    ImageEmbedding,
    InferenceError,
    Query,
    abnormality_score,
    build_index,
    discrepancy_check,
    ensemble,
    retrieve,
    similarity,
)
from .nifti import load_volume_file, write_nifti
from .saliency import SmoothGradConfig, compute_saliency, render_heatmap_png
from .text_encoder import TextEncoder, embed_report, load_checkpoint
from .tokenizer import Vocabulary
from .vision import VolumeEncoder, load_vision_checkpoint
from .volumes import CanonicalVolume, RawVolume, SequenceType, preprocess


def to_json(payload) -> str:
    """The one JSON serialization used for every exported artifact/response."""
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def make_splits(exams, test_fraction: float, ratios, seed: int):
    """Designate a patient-level test set, then split the rest train/valid."""
    if not 0 <= test_fraction < 1:
        raise CorpusError("test_fraction must lie in [0, 1)")
    rng = np.random.default_rng([seed, 902_113])
    patients = sorted({e.patient_id for e in exams})
    rng.shuffle(patients)
    n_test_target = int(round(test_fraction * len(exams)))
    test_exams: set[str] = set()
    by_patient: dict[str, list[str]] = {}
    for e in exams:
        by_patient.setdefault(e.patient_id, []).append(e.exam_id)
    for p in patients:
        if len(test_exams) >= n_test_target:
            break
        test_exams.update(by_patient[p])
    return patient_level_split(exams, ratios, seed=seed, test_exam_ids=test_exams)


def save_splits(split, path) -> None:
    Path(path).write_text(
        to_json(
            {
                "train": sorted(split.train),
                "valid": sorted(split.valid),
                "test": sorted(split.test),
            }
        )
    )


def load_splits(path) -> dict[str, list[str]]:
    return json.loads(Path(path).read_text())


def load_report_embeddings(path) -> dict[str, np.ndarray]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                obj = json.loads(line)
                out[obj["report_id"]] = np.asarray(obj["vector"], dtype=np.float64)
    return out


class Runtime:
    """Frozen artifacts plus read-only scoring/retrieval/saliency operations."""

    def __init__(self, artifacts_dir, dataset_dir=None):
        self.artifacts = Path(artifacts_dir)
        if dataset_dir is None:
            ref = self.artifacts / "dataset_ref.json"
            if not ref.exists():
                raise InferenceError(f"no dataset reference in {self.artifacts}")
            dataset_dir = json.loads(ref.read_text())["dataset_dir"]
        self.dataset = Path(dataset_dir)

        self.text_model, self.vocab = self._load_text()
        self.vision_models = self._load_vision()
        self.queries = load_query_config(
            self.artifacts / "queries.json" if (self.artifacts / "queries.json").exists() else None
        )
        self.exams = {e.exam_id: e for e in read_exams_json(self.dataset / "exams.json")}
        index_path = self.artifacts / "index"
        self.index = EmbeddingIndex.load(index_path) if index_path.with_suffix(".json").exists() else None
        self._canonical_shape = None
        manifest = self.artifacts / "cache" / "manifest.json"
        if manifest.exists():
            self._canonical_shape = tuple(json.loads(manifest.read_text())["canonical_shape"])

    def _load_text(self) -> tuple[TextEncoder, Vocabulary]:
        path = self.artifacts / "text_encoder.pt"
        if not path.exists():
            raise InferenceError(f"missing text encoder checkpoint {path}")
        model, vocab, _, _ = load_checkpoint(path)
        model.eval()
        return model, vocab

    def _load_vision(self) -> dict[SequenceType, VolumeEncoder]:
        models = {}
        for path in sorted(self.artifacts.glob("vision_*.pt")):
            model, seq, _ = load_vision_checkpoint(path)
            model.eval()
            models[seq] = model
        if not models:
            raise InferenceError(f"no vision checkpoints under {self.artifacts}")
        return models

    # -- text ---------------------------------------------------------------

    @lru_cache(maxsize=512)
    def _query_cached(self, text: str) -> bytes:
        return embed_report(text, self.text_model, self.vocab).astype(np.float64).tobytes()

    def query(self, text: str) -> Query:
        vec = np.frombuffer(self._query_cached(text), dtype=np.float64).copy()
        return Query(text=text, embedding=vec)

    def normal_query(self) -> Query:
        return self.query(self.queries["normal"])

    def embed_text(self, text: str) -> np.ndarray:
        return embed_report(text, self.text_model, self.vocab)

    # -- volumes ------------------------------------------------------------

    def canonical(self, exam: Examination, seq: SequenceType) -> CanonicalVolume:
        cache = self.artifacts / "cache" / f"{exam.exam_id}_{seq.value}.npy"
        if cache.exists():
            return CanonicalVolume(
                data=np.load(cache), sequence=seq, patient_age_years=exam.patient_age_years
            )
        ref = exam.sequences.get(seq)
        if ref is None:
            raise InferenceError(f"{exam.exam_id} has no {seq.value} volume")
        data, spacing = load_volume_file(self.dataset / ref)
        raw = RawVolume(data, spacing, seq, exam.patient_age_years)
        shape = self._canonical_shape or tuple(self.vision_models[seq].cfg.input_shape)
        return preprocess(raw, canonical_shape=shape)

    def exam(self, exam_id: str) -> Examination:
        if exam_id not in self.exams:
            raise KeyError(exam_id)
        return self.exams[exam_id]

    # -- scoring ------------------------------------------------------------

    def image_embedding(self, exam_id: str, seq: SequenceType) -> ImageEmbedding:
        exam = self.exam(exam_id)
        model = self.vision_models.get(seq)
        if model is None:
            raise InferenceError(f"no encoder for sequence {seq.value}")
        from .vision import encode_volume

        vec = encode_volume(model, self.canonical(exam, seq))
        return ImageEmbedding(vector=vec, exam_id=exam_id, sequence=seq)

    def _sequences_for(self, exam: Examination) -> list[SequenceType]:
        return [s for s in exam.sequences if s in self.vision_models]

    def score_exam(self, exam_id: str, query_texts: list[str]) -> dict:
        """Per-sequence and ensemble similarity for each query, plus abnormality."""
        if not query_texts:
            raise InferenceError("queries must be non-empty")
        exam = self.exam(exam_id)
        seqs = self._sequences_for(exam)
        if not seqs:
            raise InferenceError(f"{exam_id} has no scorable sequences")
        embeddings = {s: self.image_embedding(exam_id, s) for s in seqs}

        normal = self.normal_query()
        abnormality = {
            s.value: abnormality_score(embeddings[s], normal) for s in seqs
        }
        ab_value, ab_seq = ensemble({s: abnormality[s.value] for s in seqs})

        out_queries = []
        for text in query_texts:
            q = self.query(text)
            per_seq = {s.value: similarity(embeddings[s], q).value for s in seqs}
            value, arg = ensemble({s: per_seq[s.value] for s in seqs})
            out_queries.append(
                {
                    "query": text,
                    "per_sequence": per_seq,
                    "ensemble": {"value": value, "sequence": arg.value},
                }
            )
        return {
            "exam_id": exam_id,
            "queries": out_queries,
            "abnormality": {
                "per_sequence": abnormality,
                "ensemble": {"value": ab_value, "sequence": ab_seq.value},
            },
        }

    def abnormality_scores(self, exam_id: str) -> tuple[dict[SequenceType, float], float, SequenceType]:
        exam = self.exam(exam_id)
        seqs = self._sequences_for(exam)
        if not seqs:
            raise InferenceError(f"{exam_id} has no scorable sequences")
        normal = self.normal_query()
        per_seq = {s: abnormality_score(self.image_embedding(exam_id, s), normal) for s in seqs}
        value, arg = ensemble(per_seq)
        return per_seq, value, arg

    def triage(self, exam_ids) -> list[dict]:
        rows = []
        for exam_id in exam_ids:
            per_seq, value, arg = self.abnormality_scores(exam_id)
            rows.append(
                {
                    "exam_id": exam_id,
                    "ensemble_abnormality": value,
                    "top_sequence": arg.value,
                    "per_sequence": {s.value: v for s, v in per_seq.items()},
                }
            )
        rows.sort(key=lambda r: (-r["ensemble_abnormality"], r["exam_id"]))
        return rows

    # -- retrieval ----------------------------------------------------------

    def retrieve(self, query_text: str, sequence: SequenceType | None, k: int = 15) -> dict:
        if self.index is None:
            raise InferenceError("no image index loaded")
        result = retrieve(self.query(query_text), self.index, sequence, k)
        return {
            "query": query_text,
            "sequence": sequence.value if sequence else None,
            "k": k,
            "results": [
                {"exam_id": exam_id, "cosine": value} for exam_id, value in result.ranked
            ],
        }

    # -- saliency -----------------------------------------------------------

    def saliency(
        self,
        exam_id: str,
        seq: SequenceType,
        query_text: str,
        smooth: SmoothGradConfig | None = None,
        axis: int | None = None,
        save_volume_to=None,
    ) -> dict:
        from .saliency import DEFAULT_SLICE_AXIS

        if axis is None:
            axis = DEFAULT_SLICE_AXIS[seq]
        exam = self.exam(exam_id)
        model = self.vision_models.get(seq)
        if model is None:
            raise InferenceError(f"no encoder for sequence {seq.value}")
        vol = self.canonical(exam, seq)
        result = compute_saliency(model, vol, self.query(query_text), smooth=smooth, axis=axis)
        scan_slice = np.take(np.asarray(vol.data), result.key_slice, axis=axis)
        png = render_heatmap_png(scan_slice, result.heatmap)
        payload = {
            "exam_id": exam_id,
            "sequence": seq.value,
            "query": query_text,
            "axis": axis,
            "key_slice": result.key_slice,
            "n_slices": int(np.asarray(vol.data).shape[axis]),
            "lineout": [float(x) for x in result.lineout],
            "heatmap_png_base64": base64.b64encode(png).decode("ascii"),
            "metadata": result.metadata,
        }
        if save_volume_to is not None:
            out = Path(save_volume_to)
            out.parent.mkdir(parents=True, exist_ok=True)
            write_nifti(out, result.volume.astype(np.float32))
            payload["saliency_volume"] = str(out)
        return payload

    # -- discrepancy --------------------------------------------------------

    def discrepancy(
        self,
        exam_id: str,
        report_text: str,
        templates: list[str] | None = None,
        theta_scan: float = 0.5,
        theta_report: float = 0.3,
    ) -> dict:
        if not report_text:
            raise InferenceError("report text must be non-empty")
        if templates is None:
            templates = sorted(self.queries.get("synthetic_tasks", {}).values())
        queries = [self.query(t) for t in templates]
        exam = self.exam(exam_id)
        seqs = self._sequences_for(exam)
        embeddings = {s: self.image_embedding(exam_id, s) for s in seqs}
        scan_scores = {}
        for q in queries:
            per_seq = {s: similarity(embeddings[s], q).value for s in seqs}
            value, _ = ensemble(per_seq)
            scan_scores[q.text] = value
        report_emb = self.embed_text(report_text)
        flags = discrepancy_check(scan_scores, report_emb, queries, theta_scan, theta_report)
        return {
            "exam_id": exam_id,
            "theta_scan": theta_scan,
            "theta_report": theta_report,
            "flags": [
                {
                    "query": f.query_text,
                    "scan_similarity": f.scan_similarity,
                    "report_similarity": f.report_similarity,
                    "flagged": f.flagged,
                }
                for f in flags
            ],
        }

    # -- index construction -------------------------------------------------

    def build_index_for(self, exam_ids, log=None) -> EmbeddingIndex:
        exams = [self.exam(e) for e in exam_ids]
        encoders = self.vision_models
        index = build_index(exams, encoders, self.canonical, log=log)
        self.index = index
        return index
