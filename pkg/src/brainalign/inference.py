"""Zero-shot scoring, ensembling, retrieval, and report-discrepancy checks.

Scores are clipped cosines in [0, 1] and are used like probabilities.
Abnormality is one minus the similarity to the normality query; examination
ensembles take the highest available single-sequence score. Retrieval ranks
raw cosines (clipping cannot change order above zero and candidates are ranked
directly).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .text_encoder import cosine
from .volumes import SEQUENCE_ORDER, SequenceType

NORMAL_QUERY_TEXT = "there are normal intracranial appearances"


class InferenceError(ValueError):
    pass


@dataclass(frozen=True)
class Query:
    text: str
    embedding: np.ndarray

    def __post_init__(self):
        if not self.text:
            raise InferenceError("query text must be non-empty")
        emb = np.asarray(self.embedding, dtype=np.float64)
        object.__setattr__(self, "embedding", emb)


@dataclass(frozen=True)
class ImageEmbedding:
    vector: np.ndarray
    exam_id: str
    sequence: SequenceType

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float64)
        if not np.isfinite(vec).all():
            raise InferenceError(f"{self.exam_id}: non-finite image embedding")
        object.__setattr__(self, "vector", vec)


@dataclass(frozen=True)
class SimilarityScore:
    value: float
    exam_id: str
    sequence: SequenceType
    query_text: str

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise InferenceError("similarity score outside [0, 1]")


@dataclass(frozen=True)
class RetrievalResult:
    query_text: str
    ranked: tuple[tuple[str, float], ...]  # (exam_id, raw cosine), non-increasing
    k: int


@dataclass(frozen=True)
class DiscrepancyFlag:
    query_text: str
    scan_similarity: float
    report_similarity: float
    flagged: bool


def similarity(img: ImageEmbedding, q: Query) -> SimilarityScore:
    """max(0, cosine) between an image embedding and a query embedding."""
    value = max(0.0, cosine(img.vector, q.embedding))
    return SimilarityScore(value=value, exam_id=img.exam_id, sequence=img.sequence,
                           query_text=q.text)


def abnormality_score(img: ImageEmbedding, normal_query: Query) -> float:
    """1 - similarity to the normality sentence, in [0, 1]."""
    return 1.0 - similarity(img, normal_query).value


def ensemble(scores: dict[SequenceType, float]) -> tuple[float, SequenceType]:
    """Highest single-sequence score; ties resolve to canonical sequence order."""
    if not scores:
        raise InferenceError("ensemble of zero sequences")
    best_seq = None
    best = -np.inf
    for seq in SEQUENCE_ORDER:
        if seq in scores and scores[seq] > best:
            best = scores[seq]
            best_seq = seq
    return best, best_seq


def classify(scores: dict[SequenceType, float], threshold: float) -> tuple[str, float, SequenceType]:
    """Threshold the ensemble score; score >= threshold is positive."""
    if not 0 <= threshold <= 1:
        raise InferenceError("threshold must lie in [0, 1]")
    if not scores:
        raise InferenceError("no usable sequences")
    value, seq = ensemble(scores)
    label = "positive" if value >= threshold else "negative"
    return label, value, seq


class EmbeddingIndex:
    """Per-sequence store of image embeddings; immutable once frozen."""

    def __init__(self):
        self._buckets: dict[SequenceType, list[ImageEmbedding]] = {}
        self._keys: set[tuple[str, SequenceType]] = set()
        self._frozen = False
        self.skipped: list[tuple[str, str, str]] = []

    def add(self, emb: ImageEmbedding) -> None:
        if self._frozen:
            raise InferenceError("index is frozen")
        key = (emb.exam_id, emb.sequence)
        if key in self._keys:
            raise InferenceError(f"duplicate index entry {key}")
        self._keys.add(key)
        self._buckets.setdefault(emb.sequence, []).append(emb)

    def freeze(self) -> "EmbeddingIndex":
        self._frozen = True
        return self

    def bucket(self, seq: SequenceType) -> list[ImageEmbedding]:
        return list(self._buckets.get(seq, []))

    def sequences(self) -> list[SequenceType]:
        return [s for s in SEQUENCE_ORDER if s in self._buckets]

    def exam_ids(self) -> list[str]:
        ids = {e.exam_id for bucket in self._buckets.values() for e in bucket}
        return sorted(ids)

    def __len__(self):
        return sum(len(b) for b in self._buckets.values())

    def save(self, path):
        import json
        from pathlib import Path

        path = Path(path)
        entries = []
        vectors = []
        for seq in self.sequences():
            for e in self._buckets[seq]:
                entries.append({"exam_id": e.exam_id, "sequence": seq.value})
                vectors.append(np.asarray(e.vector, dtype=np.float32))
        np.save(path.with_suffix(".npy"), np.stack(vectors) if vectors else np.empty((0, 0)))
        path.with_suffix(".json").write_text(json.dumps(entries))

    @classmethod
    def load(cls, path) -> "EmbeddingIndex":
        import json
        from pathlib import Path

        path = Path(path)
        entries = json.loads(path.with_suffix(".json").read_text())
        vectors = np.load(path.with_suffix(".npy"))
        index = cls()
        for entry, vec in zip(entries, vectors):
            index.add(ImageEmbedding(vector=vec.astype(np.float64),
                                     exam_id=entry["exam_id"],
                                     sequence=SequenceType(entry["sequence"])))
        return index.freeze()


def build_index(exams, encoders, load_canonical, log=None) -> EmbeddingIndex:
    """Encode every available (exam, sequence) volume with the frozen encoders.

    `load_canonical(exam, seq)` must return a CanonicalVolume; failures skip the
    volume with a recorded warning. Rebuilds are deterministic.
    """
    import warnings as _warnings

    from .vision import encode_volume

    index = EmbeddingIndex()
    skipped = []
    for exam in exams:
        for seq in exam.sequences:
            model = encoders.get(seq)
            if model is None:
                continue
            try:
                vol = load_canonical(exam, seq)
                vec = encode_volume(model, vol)
            except Exception as err:  # noqa: BLE001 - skip-and-record contract
                skipped.append((exam.exam_id, seq.value, str(err)))
                _warnings.warn(f"skipping {exam.exam_id}/{seq.value}: {err}")
                continue
            index.add(ImageEmbedding(vector=vec, exam_id=exam.exam_id, sequence=seq))
            if log:
                log(f"indexed {exam.exam_id}/{seq.value}")
    index.skipped = skipped
    return index.freeze()


def retrieve(q: Query, index: EmbeddingIndex, seq_type: SequenceType | None, k: int = 15) -> RetrievalResult:
    """Rank candidates by raw cosine (descending, exam_id tie-break); top K.

    With seq_type None, candidates pool across sequences and each exam is
    ranked by its maximum per-sequence cosine.
    """
    if k < 1:
        raise InferenceError("k must be >= 1")
    if seq_type is not None:
        candidates = index.bucket(seq_type)
        if not candidates:
            raise InferenceError(f"index empty for sequence {seq_type.value}")
        scored = [(e.exam_id, cosine(e.vector, q.embedding)) for e in candidates]
    else:
        per_exam: dict[str, float] = {}
        for seq in index.sequences():
            for e in index.bucket(seq):
                c = cosine(e.vector, q.embedding)
                if e.exam_id not in per_exam or c > per_exam[e.exam_id]:
                    per_exam[e.exam_id] = c
        if not per_exam:
            raise InferenceError("index is empty")
        scored = list(per_exam.items())
    scored.sort(key=lambda item: (-item[1], item[0]))
    return RetrievalResult(query_text=q.text, ranked=tuple(scored[:k]), k=k)


def discrepancy_check(
    scan_scores: dict[str, float],
    report_embedding: np.ndarray,
    templates: list[Query],
    theta_scan: float = 0.5,
    theta_report: float = 0.3,
) -> list[DiscrepancyFlag]:
    """Flag templates with high scan similarity but low report similarity.

    scan_scores maps template text to the exam's max-over-sequences similarity.
    """
    if not templates:
        raise InferenceError("no discrepancy templates supplied")
    flags = []
    for template in templates:
        scan_sim = scan_scores.get(template.text)
        if scan_sim is None:
            raise InferenceError(f"missing scan score for template {template.text!r}")
        report_sim = max(0.0, cosine(report_embedding, template.embedding))
        flagged = scan_sim >= theta_scan and report_sim <= theta_report
        flags.append(
            DiscrepancyFlag(
                query_text=template.text,
                scan_similarity=float(scan_sim),
                report_similarity=float(report_sim),
                flagged=bool(flagged),
            )
        )
    return flags
