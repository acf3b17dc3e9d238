"""Synthetic paired corpus: ellipsoid-brain volumes plus templated reports.

Each exam gets one anatomy (brain + ventricles, ventricle size drifting with
age) rendered per sequence with sequence-specific tissue contrasts. Abnormal
exams carry one lesion drawn from a small taxonomy; the lesion is rendered
only on sequences its visibility mask allows, mirroring how real findings are
conspicuous on some sequences and invisible on others. Reports are assembled
from a phrase bank consistent with the inserted lesion.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import CorpusError, Examination, Report, split_sections
from .nifti import write_nifti, write_raw
from .volumes import SequenceType

DEFAULT_SEQUENCES = (
    SequenceType.AX_T2,
    SequenceType.AX_DWI,
    SequenceType.AX_GRE,
    SequenceType.COR_T1,
)

# per-sequence synthetic contrasts (arbitrary units, background 0)
TISSUE_INTENSITY = {
    SequenceType.AX_T2: 0.65,
    SequenceType.AX_DWI: 0.45,
    SequenceType.COR_T2_FLAIR: 0.60,
    SequenceType.AX_GRE: 0.55,
    SequenceType.COR_T1: 0.85,
    SequenceType.AX_T1_POST: 0.90,
    SequenceType.AX_T2_FLAIR: 0.60,
    SequenceType.COR_T1_POST: 0.90,
}
CSF_INTENSITY = {
    SequenceType.AX_T2: 1.00,
    SequenceType.AX_DWI: 0.15,
    SequenceType.COR_T2_FLAIR: 0.20,
    SequenceType.AX_GRE: 0.75,
    SequenceType.COR_T1: 0.12,
    SequenceType.AX_T1_POST: 0.12,
    SequenceType.AX_T2_FLAIR: 0.15,
    SequenceType.COR_T1_POST: 0.12,
}

# intensity offsets applied inside the lesion mask, per visible sequence
# (kept clear of CSF and background so lesions stay distinguishable from
# ventricles and from the skull edge)
LESION_DELTA = {
    "mass": {**dict.fromkeys(SequenceType, 0.45), SequenceType.AX_T2: 0.60,
             SequenceType.COR_T2_FLAIR: 0.60, SequenceType.AX_T2_FLAIR: 0.60,
             SequenceType.COR_T1: 0.75, SequenceType.AX_T1_POST: 0.75,
             SequenceType.COR_T1_POST: 0.75},
    "acute_stroke": {SequenceType.AX_DWI: 0.55},
    # bright blooming on GRE, dark on DWI: sign-separable from stroke blobs
    "microhaemorrhage": {SequenceType.AX_GRE: 0.55, SequenceType.AX_DWI: -0.35},
    "meningioma": {SequenceType.AX_T2: 0.30, SequenceType.COR_T1: 0.70,
                   SequenceType.COR_T1_POST: 0.70, SequenceType.AX_T1_POST: 0.70},
}


@dataclass(frozen=True)
class Lesion:
    label: str
    geometry: str  # blob | dots | rim | ventricle_dilation
    visibility: dict[SequenceType, bool]


@dataclass(frozen=True)
class PhraseSet:
    findings: tuple[str, ...]
    summary: tuple[str, ...]


def _vis(sequences, visible) -> dict[SequenceType, bool]:
    visible = set(visible)
    return {s: s in visible for s in sequences}


def default_lesions(sequences=DEFAULT_SEQUENCES) -> tuple[Lesion, ...]:
    all_seq = set(sequences)
    return (
        Lesion("mass", "blob", _vis(sequences, all_seq)),
        Lesion("acute_stroke", "blob", _vis(sequences, {SequenceType.AX_DWI})),
        Lesion(
            "microhaemorrhage",
            "dots",
            _vis(sequences, {SequenceType.AX_GRE, SequenceType.AX_DWI}),
        ),
        Lesion(
            "meningioma",
            "rim",
            _vis(
                sequences,
                {SequenceType.AX_T2, SequenceType.COR_T1,
                 SequenceType.AX_T1_POST, SequenceType.COR_T1_POST},
            ),
        ),
        Lesion("hydrocephalus", "ventricle_dilation", _vis(sequences, all_seq)),
    )


OPENINGS = (
    "Comparison is made with the previous examination.",
    "All routine sequences were acquired.",
    "The study is of diagnostic quality.",
)

DEFAULT_PHRASES: dict[str, PhraseSet] = {
    "normal": PhraseSet(
        findings=(
            "The brain volume is normal for age. The ventricles are normal in size. No focal abnormality is seen.",
            "There is preserved grey white matter differentiation. The ventricles and sulci are unremarkable. No mass lesion is identified.",
            "Normal appearances of the brain parenchyma. The ventricular system is within normal limits.",
        ),
        summary=(
            "There are normal intracranial appearances.",
            "Normal study. There are normal intracranial appearances.",
        ),
    ),
    "mass": PhraseSet(
        findings=(
            "There is a {size} mm enhancing mass lesion in the {side} {region} lobe with surrounding vasogenic oedema.",
            "A large heterogeneous mass is centred in the {side} {region} lobe measuring {size} mm with local mass effect and oedema.",
        ),
        summary=(
            "Appearances are in keeping with a {side} {region} mass lesion.",
            "There is a large intra axial mass lesion with surrounding oedema.",
        ),
    ),
    "acute_stroke": PhraseSet(
        findings=(
            "There is a focus of restricted diffusion in the {side} {region} lobe in keeping with an acute infarct.",
            "Restricted diffusion is demonstrated in the {side} {region} territory consistent with acute infarction.",
        ),
        summary=(
            "There is restricted diffusion in keeping with acute infarction.",
            "Acute {side} {region} infarct.",
        ),
    ),
    "microhaemorrhage": PhraseSet(
        findings=(
            "There are multiple foci of susceptibility artefact in the {side} {region} lobe in keeping with microhaemorrhages.",
            "Several punctate areas of blooming are seen in the {side} hemisphere consistent with cerebral microhaemorrhages.",
        ),
        summary=(
            "Appearances are in keeping with a recent bleed.",
            "Multiple cerebral microhaemorrhages are present.",
        ),
    ),
    "meningioma": PhraseSet(
        findings=(
            "There is a {size} mm extra axial dural based mass arising from the {side} convexity with avid enhancement.",
            "An avidly enhancing extra axial lesion is noted over the {side} {region} convexity in keeping with a meningioma.",
        ),
        summary=(
            "Appearances are in keeping with a meningioma.",
            "Stable {side} convexity meningioma.",
        ),
    ),
    "hydrocephalus": PhraseSet(
        findings=(
            "The lateral ventricles are markedly dilated out of proportion to the sulci.",
            "There is enlargement of the ventricular system with dilatation of the lateral and third ventricles.",
        ),
        summary=(
            "Appearances are in keeping with hydrocephalus.",
            "There is ventricular dilatation in keeping with hydrocephalus.",
        ),
    ),
}

# neuroradiological jargon used by the phrase bank; the tokenizer adaptation
# check tracks these against a generic-English vocabulary
DOMAIN_WORDS = (
    "intracranial",
    "ventricles",
    "ventricular",
    "parenchyma",
    "sulci",
    "oedema",
    "infarct",
    "infarction",
    "diffusion",
    "microhaemorrhages",
    "susceptibility",
    "meningioma",
    "hydrocephalus",
)

SIDES = ("left", "right")
REGIONS = ("frontal", "parietal", "temporal", "occipital")


def best_saliency_sequence(lesion: Lesion) -> SequenceType:
    """The visible sequence with the strongest positive lesion contrast.

    Guided backpropagation favours positive evidence, so the probe prefers the
    sequence where the anomaly is brightest: intensity lesions rank by delta,
    the ventricle-dilation geometry by how much brighter CSF is than tissue.
    """
    visible = [s for s, v in lesion.visibility.items() if v]
    if lesion.geometry == "ventricle_dilation":
        return max(visible, key=lambda s: CSF_INTENSITY[s] - TISSUE_INTENSITY[s])
    deltas = LESION_DELTA[lesion.label]
    return max(visible, key=lambda s: deltas.get(s, 0.0))


@dataclass
class SyntheticSpec:
    n_exams: int = 100
    volume_shape: tuple[int, int, int] = (32, 32, 32)
    lesions: tuple[Lesion, ...] = ()
    phrases: dict[str, PhraseSet] = field(default_factory=lambda: dict(DEFAULT_PHRASES))
    seed: int = 0
    sequences: tuple[SequenceType, ...] = DEFAULT_SEQUENCES
    abnormal_fraction: float = 0.5
    noise_sigma: float = 0.05  # fraction of the tissue intensity range
    age_range: tuple[float, float] = (18.0, 90.0)

    def __post_init__(self):
        if not self.lesions:
            self.lesions = default_lesions(self.sequences)
        if self.n_exams < 1:
            raise CorpusError("n_exams must be >= 1")
        if len(self.volume_shape) != 3 or min(self.volume_shape) < 8:
            raise CorpusError("volume_shape must be a 3D shape of at least 8 voxels per axis")
        if not 0 <= self.abnormal_fraction <= 1:
            raise CorpusError("abnormal_fraction must lie in [0, 1]")
        labels = {l.label for l in self.lesions} | {"normal"}
        for label in labels:
            ps = self.phrases.get(label)
            if ps is None or not ps.findings or not ps.summary:
                raise CorpusError(f"phrase bank must cover label {label!r}")
        for lesion in self.lesions:
            missing = [s for s in self.sequences if s not in lesion.visibility]
            if missing:
                raise CorpusError(
                    f"lesion {lesion.label!r} visibility mask missing {missing}"
                )


@dataclass
class GroundTruth:
    exam_id: str
    label: str
    is_abnormal: bool
    lesion_center: tuple[int, int, int] | None
    lesion_radius: float
    visibility: dict[SequenceType, bool]


@dataclass
class _Layout:
    """Per-exam anatomy; rendering is a pure function of this plus the lesion."""

    brain_center: np.ndarray
    brain_axes: np.ndarray
    vent_center: np.ndarray
    vent_axes: np.ndarray
    noise_seed: int
    lesion_centers: np.ndarray | None  # (k, 3) voxel coords
    lesion_radius: float
    vent_scale: np.ndarray  # per-axis dilation, >1 for hydrocephalus


def _ellipsoid_mask(shape, center, axes):
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    dist = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, center, axes))
    return dist <= 1.0


def _sphere_mask(shape, center, radius):
    return _ellipsoid_mask(shape, center, (radius, radius, radius))


def _sample_layout(spec: SyntheticSpec, rng: np.random.Generator, age: float, lesion: Lesion | None) -> _Layout:
    shape = np.asarray(spec.volume_shape, dtype=np.float64)
    brain_center = shape / 2 + rng.uniform(-0.05, 0.05, 3) * shape
    brain_axes = rng.uniform(0.30, 0.38, 3) * shape
    age_lo, age_hi = spec.age_range
    age_factor = 1.0 + 0.35 * (age - age_lo) / max(age_hi - age_lo, 1e-9)
    vent_axes = rng.uniform(0.07, 0.10, 3) * shape * age_factor
    vent_center = brain_center + rng.uniform(-0.02, 0.02, 3) * shape

    lesion_centers = None
    lesion_radius = 0.0
    vent_scale = np.ones(3)
    if lesion is not None:
        if lesion.geometry == "blob":
            lesion_radius = rng.uniform(0.11, 0.16) * float(shape.min())
            offset = rng.uniform(-0.5, 0.5, 3) * brain_axes
            lesion_centers = (brain_center + offset)[None, :]
        elif lesion.geometry == "dots":
            lesion_radius = rng.uniform(0.055, 0.07) * float(shape.min())
            n_dots = int(rng.integers(4, 7))
            base = brain_center + rng.uniform(-0.45, 0.45, 3) * brain_axes
            offsets = rng.uniform(-0.18, 0.18, (n_dots, 3)) * shape
            offsets[:, 2] = rng.uniform(-0.04, 0.04, n_dots) * shape[2]  # keep dots in a thin slab
            lesion_centers = base[None, :] + offsets
        elif lesion.geometry == "rim":
            lesion_radius = rng.uniform(0.11, 0.15) * float(shape.min())
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            lesion_centers = (brain_center + direction * brain_axes * 0.95)[None, :]
        elif lesion.geometry == "ventricle_dilation":
            # trapped-ventricle pattern: a focal CSF-filled ballooning of the
            # ventricular system, compact enough for slice localization
            vent_scale = np.ones(3)
            lesion_centers = vent_center[None, :]
            lesion_radius = rng.uniform(0.14, 0.17) * float(shape.min())
        else:
            raise CorpusError(f"unknown lesion geometry {lesion.geometry!r}")

    return _Layout(
        brain_center=brain_center,
        brain_axes=brain_axes,
        vent_center=vent_center,
        vent_axes=vent_axes,
        noise_seed=int(rng.integers(2**31 - 1)),
        lesion_centers=lesion_centers,
        lesion_radius=lesion_radius,
        vent_scale=vent_scale,
    )


def _lesion_mask(layout: _Layout, shape) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for center in layout.lesion_centers:
        mask |= _sphere_mask(shape, center, layout.lesion_radius)
    return mask


def render_volume(
    spec: SyntheticSpec, layout: _Layout, seq: SequenceType, lesion: Lesion | None
) -> np.ndarray:
    """Render one sequence volume; noise depends only on (layout, seq)."""
    shape = spec.volume_shape
    vol = np.zeros(shape, dtype=np.float64)
    brain = _ellipsoid_mask(shape, layout.brain_center, layout.brain_axes)
    vol[brain] = TISSUE_INTENSITY[seq]
    dilating = lesion is not None and lesion.geometry == "ventricle_dilation"
    vent_scale = layout.vent_scale if dilating else np.ones(3)
    vent = _ellipsoid_mask(shape, layout.vent_center, layout.vent_axes * vent_scale)
    if dilating:
        vent |= _sphere_mask(shape, layout.lesion_centers[0], layout.lesion_radius)
    vol[vent & brain] = CSF_INTENSITY[seq]

    if (
        lesion is not None
        and lesion.geometry != "ventricle_dilation"
        and lesion.visibility.get(seq, False)
    ):
        delta = LESION_DELTA[lesion.label].get(seq, 0.0)
        vol[_lesion_mask(layout, shape)] += delta

    seq_index = list(SequenceType).index(seq)
    noise_rng = np.random.default_rng([layout.noise_seed, seq_index])
    vol += noise_rng.normal(0.0, spec.noise_sigma, shape)
    return vol.astype(np.float32)


def _fill(template: str, rng: np.random.Generator) -> str:
    return template.format(
        side=SIDES[rng.integers(2)],
        region=REGIONS[rng.integers(len(REGIONS))],
        size=int(rng.integers(8, 26)),
    )


def _compose_report(spec: SyntheticSpec, rng: np.random.Generator, label: str) -> str:
    phrases = spec.phrases[label]
    opening = OPENINGS[rng.integers(len(OPENINGS))]
    findings_body = _fill(phrases.findings[rng.integers(len(phrases.findings))], rng)
    summary_body = _fill(phrases.summary[rng.integers(len(phrases.summary))], rng)
    return f"Findings: {opening} {findings_body} Summary: {summary_body}"


def generate_synthetic(spec: SyntheticSpec):
    """Build the full in-memory dataset.

    Returns (exams, reports, truths, volumes) where volumes maps
    (exam_id, SequenceType) to a float32 array and exam sequence references use
    mem:// URIs.
    """
    exams, reports, truths = [], [], []
    volumes = {}
    patient_id = None
    age = None
    for i in range(spec.n_exams):
        rng = np.random.default_rng([spec.seed, i])
        new_patient = not (i % 12 == 11 and patient_id is not None)
        if new_patient:
            patient_id = f"pat-{i:05d}"
            age = float(np.round(rng.uniform(*spec.age_range), 1))
        exam_id = f"exam-{i:05d}"
        report_id = f"rep-{i:05d}"

        abnormal = bool(rng.random() < spec.abnormal_fraction)
        lesion = spec.lesions[rng.integers(len(spec.lesions))] if abnormal else None
        label = lesion.label if lesion else "normal"
        layout = _sample_layout(spec, rng, age, lesion)

        seq_refs = {}
        for seq in spec.sequences:
            vol = render_volume(spec, layout, seq, lesion)
            volumes[(exam_id, seq)] = vol
            seq_refs[seq] = f"mem://{exam_id}/{seq.value}"

        text = _compose_report(spec, rng, label)
        findings, summary = split_sections(text)
        reports.append(
            Report(
                report_id=report_id,
                exam_id=exam_id,
                patient_id=patient_id,
                patient_age_years=age,
                full_text=text,
                findings=findings,
                summary=summary,
                age_floor=spec.age_range[0],
            )
        )
        exams.append(
            Examination(
                exam_id=exam_id,
                patient_id=patient_id,
                patient_age_years=age,
                report_id=report_id,
                sequences=seq_refs,
            )
        )
        center = None
        if layout.lesion_centers is not None:
            center = tuple(int(round(c)) for c in layout.lesion_centers.mean(axis=0))
        truths.append(
            GroundTruth(
                exam_id=exam_id,
                label=label,
                is_abnormal=abnormal,
                lesion_center=center,
                lesion_radius=layout.lesion_radius,
                visibility=dict(lesion.visibility) if lesion else dict.fromkeys(spec.sequences, False),
            )
        )
    return exams, reports, truths, volumes


def write_synthetic_dataset(spec: SyntheticSpec, out_dir, volume_format: str = "nii"):
    """Generate and persist the dataset; returns (exams, reports, truths)."""
    out_dir = Path(out_dir)
    vol_dir = out_dir / "volumes"
    vol_dir.mkdir(parents=True, exist_ok=True)
    exams, reports, truths, volumes = generate_synthetic(spec)
    for exam in exams:
        refs = {}
        for seq in spec.sequences:
            vol = volumes[(exam.exam_id, seq)]
            if volume_format == "nii" or volume_format == "nii.gz":
                name = f"{exam.exam_id}_{seq.value}.{volume_format}"
                write_nifti(vol_dir / name, vol, spacing=(1.0, 1.0, 1.0))
            elif volume_format == "raw":
                name = f"{exam.exam_id}_{seq.value}.f32"
                write_raw(vol_dir / name, vol, spacing=(1.0, 1.0, 1.0))
            else:
                raise CorpusError(f"unknown volume format {volume_format!r}")
            refs[seq] = str(Path("volumes") / name)
        exam.sequences = refs

    from .corpus import write_exams_json, write_reports_jsonl

    write_reports_jsonl(reports, out_dir / "reports.jsonl")
    write_exams_json(exams, out_dir / "exams.json")
    with open(out_dir / "ground_truth.jsonl", "w", encoding="utf-8") as f:
        for t in truths:
            f.write(
                json.dumps(
                    {
                        "exam_id": t.exam_id,
                        "label": t.label,
                        "is_abnormal": t.is_abnormal,
                        "lesion_center": list(t.lesion_center) if t.lesion_center else None,
                        "lesion_radius": t.lesion_radius,
                        "visibility": {s.value: v for s, v in t.visibility.items()},
                    }
                )
                + "\n"
            )
    return exams, reports, truths


def read_ground_truth(path) -> list[GroundTruth]:
    truths = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            obj = json.loads(line)
            truths.append(
                GroundTruth(
                    exam_id=obj["exam_id"],
                    label=obj["label"],
                    is_abnormal=obj["is_abnormal"],
                    lesion_center=tuple(obj["lesion_center"]) if obj["lesion_center"] else None,
                    lesion_radius=obj["lesion_radius"],
                    visibility={SequenceType(k): v for k, v in obj["visibility"].items()},
                )
            )
    return truths
