"""Report ingestion, section splitting, pair sampling, and patient-level splits."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volumes import SequenceType


class CorpusError(ValueError):
    pass


# Header synonyms: reports in the wild label the image-description section
# "Findings"/"Report"/"Description" and the recapitulation
# "Summary"/"Conclusion"/"Impression". A header is a synonym at the start of a
# line (colon optional) or anywhere followed by a colon.
_FINDINGS_WORDS = "findings|report|description"
_SUMMARY_WORDS = "summary|conclusion|impression"


def _header_re(words: str) -> re.Pattern:
    return re.compile(
        rf"(?:(?:^|\n)\s*(?:{words})\b\s*:?\s*)|(?:\b(?:{words})\s*:\s*)",
        re.IGNORECASE,
    )


_FINDINGS_RE = _header_re(_FINDINGS_WORDS)
_SUMMARY_RE = _header_re(_SUMMARY_WORDS)


@dataclass
class Report:
    report_id: str
    exam_id: str
    patient_id: str
    patient_age_years: float
    full_text: str
    findings: str = ""
    summary: str = ""
    age_floor: float = 18.0

    def __post_init__(self):
        if not self.full_text:
            raise CorpusError(f"{self.report_id}: full_text must be non-empty")
        if self.patient_age_years < self.age_floor:
            raise CorpusError(
                f"{self.report_id}: patient age {self.patient_age_years} below floor {self.age_floor}"
            )
        for name, section in (("findings", self.findings), ("summary", self.summary)):
            if section and section not in self.full_text:
                raise CorpusError(f"{self.report_id}: {name} section not a substring of full_text")

    def has_both_sections(self) -> bool:
        return bool(self.findings) and bool(self.summary)


@dataclass
class Examination:
    exam_id: str
    patient_id: str
    patient_age_years: float
    report_id: str
    sequences: dict[SequenceType, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.sequences:
            raise CorpusError(f"{self.exam_id}: at least one sequence required")


@dataclass(frozen=True)
class SectionPair:
    findings_text: str
    summary_text: str
    label: int
    findings_report_id: str = ""
    summary_report_id: str = ""

    def __post_init__(self):
        if self.label not in (0, 1):
            raise CorpusError("pair label must be 0 or 1")


@dataclass(frozen=True)
class CorpusSplit:
    train: frozenset
    valid: frozenset
    test: frozenset

    def __post_init__(self):
        if self.train & self.valid or self.train & self.test or self.valid & self.test:
            raise CorpusError("splits must be disjoint")


def split_sections(raw: str) -> tuple[str, str]:
    """Extract (findings, summary) section bodies; missing header -> empty string."""
    if not raw:
        raise CorpusError("empty report text")
    f_match = _FINDINGS_RE.search(raw)
    s_match = _SUMMARY_RE.search(raw)
    findings, summary = "", ""
    if s_match is not None:
        summary = raw[s_match.end() :].strip()
    if f_match is not None:
        end = s_match.start() if s_match is not None and s_match.start() >= f_match.end() else len(raw)
        findings = raw[f_match.end() : end].strip()
    return findings, summary


def sample_section_pairs(reports, n: int, true_fraction: float, rng: np.random.Generator):
    """Sample true (same-report) and false (cross-report) Findings/Summary pairs."""
    if not 0 < true_fraction < 1:
        raise CorpusError("true_fraction must lie strictly between 0 and 1")
    eligible = [r for r in reports if r.has_both_sections()]
    if len(eligible) < 2:
        raise CorpusError("insufficient corpus: need >= 2 reports with both sections")
    n_true = int(math.floor(n * true_fraction + 0.5))
    pairs = []
    for _ in range(n_true):
        r = eligible[rng.integers(len(eligible))]
        pairs.append(
            SectionPair(r.findings, r.summary, 1, r.report_id, r.report_id)
        )
    for _ in range(n - n_true):
        i = int(rng.integers(len(eligible)))
        j = int(rng.integers(len(eligible) - 1))
        if j >= i:
            j += 1
        a, b = eligible[i], eligible[j]
        pairs.append(SectionPair(a.findings, b.summary, 0, a.report_id, b.report_id))
    order = rng.permutation(len(pairs))
    return [pairs[i] for i in order]


def patient_level_split(exams, ratios=(0.85, 0.15), seed: int = 0, test_exam_ids=()) -> CorpusSplit:
    """Split exams into train/valid keyed by patient; test exams are pre-designated.

    Every exam of a patient lands in one split; patients owning a test exam
    contribute all their exams to the test split.
    """
    if not exams:
        raise CorpusError("empty examination list")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise CorpusError("train/valid ratios must sum to 1")
    test_exam_ids = set(test_exam_ids)
    test_patients = {e.patient_id for e in exams if e.exam_id in test_exam_ids}
    test = {e.exam_id for e in exams if e.patient_id in test_patients}

    by_patient: dict[str, list[str]] = {}
    for e in exams:
        if e.patient_id in test_patients:
            continue
        by_patient.setdefault(e.patient_id, []).append(e.exam_id)
    patients = sorted(by_patient)
    rng = np.random.default_rng(seed)
    rng.shuffle(patients)

    n_remaining = sum(len(v) for v in by_patient.values())
    target_train = int(round(ratios[0] * n_remaining))
    train, valid = set(), set()
    for p in patients:
        bucket = train if len(train) < target_train else valid
        bucket.update(by_patient[p])
    return CorpusSplit(train=frozenset(train), valid=frozenset(valid), test=frozenset(test))


def write_reports_jsonl(reports, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in reports:
            f.write(
                json.dumps(
                    {
                        "report_id": r.report_id,
                        "exam_id": r.exam_id,
                        "patient_id": r.patient_id,
                        "patient_age_years": r.patient_age_years,
                        "full_text": r.full_text,
                        "findings": r.findings,
                        "summary": r.summary,
                    }
                )
                + "\n"
            )


def read_reports_jsonl(path, age_floor: float = 18.0) -> list[Report]:
    reports = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            obj = json.loads(line)
            reports.append(
                Report(
                    report_id=obj["report_id"],
                    exam_id=obj["exam_id"],
                    patient_id=obj["patient_id"],
                    patient_age_years=float(obj["patient_age_years"]),
                    full_text=obj["full_text"],
                    findings=obj.get("findings", ""),
                    summary=obj.get("summary", ""),
                    age_floor=age_floor,
                )
            )
    return reports


def write_exams_json(exams, path) -> None:
    payload = {
        e.exam_id: {
            "patient_id": e.patient_id,
            "patient_age_years": e.patient_age_years,
            "report_id": e.report_id,
            "sequences": {seq.value: ref for seq, ref in e.sequences.items()},
        }
        for e in exams
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def read_exams_json(path) -> list[Examination]:
    payload = json.loads(Path(path).read_text())
    exams = []
    for exam_id in sorted(payload):
        obj = payload[exam_id]
        exams.append(
            Examination(
                exam_id=exam_id,
                patient_id=obj["patient_id"],
                patient_age_years=float(obj["patient_age_years"]),
                report_id=obj["report_id"],
                sequences={SequenceType(k): v for k, v in obj["sequences"].items()},
            )
        )
    return exams
