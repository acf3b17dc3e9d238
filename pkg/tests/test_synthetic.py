import numpy as np
import pytest

from brainalign.corpus import CorpusError, split_sections
from brainalign.synthetic import (
    DEFAULT_PHRASES,
    DOMAIN_WORDS,
    GroundTruth,
    Lesion,
    SyntheticSpec,
    _lesion_mask,
    _sample_layout,
    default_lesions,
    generate_synthetic,
    read_ground_truth,
    render_volume,
    write_synthetic_dataset,
)
from brainalign.volumes import SequenceType


@pytest.fixture(scope="module")
def small_dataset():
    spec = SyntheticSpec(n_exams=40, seed=123)
    return spec, generate_synthetic(spec)


def test_spec_validation_missing_phrases():
    phrases = {k: v for k, v in DEFAULT_PHRASES.items() if k != "meningioma"}
    with pytest.raises(CorpusError):
        SyntheticSpec(n_exams=5, phrases=phrases)


def test_spec_validation_visibility_coverage():
    bad = Lesion("mass", "blob", {SequenceType.AX_T2: True})  # misses other sequences
    with pytest.raises(CorpusError):
        SyntheticSpec(n_exams=5, lesions=(bad,))


def test_determinism_byte_identical(small_dataset):
    spec, (exams, reports, truths, volumes) = small_dataset
    exams2, reports2, truths2, volumes2 = generate_synthetic(SyntheticSpec(n_exams=40, seed=123))
    assert [r.full_text for r in reports] == [r.full_text for r in reports2]
    for key, vol in volumes.items():
        assert vol.tobytes() == volumes2[key].tobytes()
    assert [t.label for t in truths] == [t.label for t in truths2]


def test_normal_exams_match_lesion_free_render(small_dataset):
    spec, (exams, reports, truths, volumes) = small_dataset
    normals = [t for t in truths if t.label == "normal"]
    assert normals, "seed produced no normal exams"
    assert all(t.lesion_center is None for t in normals)


def test_visibility_mask_semantics():
    spec = SyntheticSpec(n_exams=1, seed=0)
    micro = next(l for l in spec.lesions if l.label == "microhaemorrhage")
    rng = np.random.default_rng(42)
    layout = _sample_layout(spec, rng, age=50.0, lesion=micro)
    for seq in spec.sequences:
        with_lesion = render_volume(spec, layout, seq, micro)
        without = render_volume(spec, layout, seq, None)
        if micro.visibility[seq]:
            assert not np.array_equal(with_lesion, without)
        else:
            # lesion absent from sequences outside the visibility mask
            assert np.array_equal(with_lesion, without)
    assert micro.visibility[SequenceType.AX_GRE] and micro.visibility[SequenceType.AX_DWI]
    assert not micro.visibility[SequenceType.AX_T2]


def test_abnormal_exam_differs_inside_lesion_region():
    spec = SyntheticSpec(n_exams=1, seed=0)
    for lesion in spec.lesions:
        rng = np.random.default_rng(7)
        layout = _sample_layout(spec, rng, age=40.0, lesion=lesion)
        diffs = []
        for seq in spec.sequences:
            with_lesion = render_volume(spec, layout, seq, lesion)
            without = render_volume(spec, layout, seq, None)
            diffs.append(np.abs(with_lesion - without).max())
        assert max(diffs) > 3 * spec.noise_sigma, lesion.label


def test_lesion_delta_confined_to_mask():
    spec = SyntheticSpec(n_exams=1, seed=0)
    mass = next(l for l in spec.lesions if l.label == "mass")
    layout = _sample_layout(spec, np.random.default_rng(3), age=60.0, lesion=mass)
    mask = _lesion_mask(layout, spec.volume_shape)
    with_lesion = render_volume(spec, layout, SequenceType.AX_T2, mass)
    without = render_volume(spec, layout, SequenceType.AX_T2, None)
    delta = np.abs(with_lesion - without)
    assert delta[~mask].max() == 0.0
    assert delta[mask].max() > 0.3


def test_reports_are_sectioned_and_consistent(small_dataset):
    spec, (exams, reports, truths, volumes) = small_dataset
    by_exam = {t.exam_id: t for t in truths}
    label_words = {
        "mass": "mass",
        "acute_stroke": "diffusion",
        "microhaemorrhage": "haemorrhage",
        "meningioma": "meningioma",
        "hydrocephalus": ("hydrocephalus", "ventric"),
    }
    for r in reports:
        f, s = split_sections(r.full_text)
        assert f == r.findings and s == r.summary
        assert r.has_both_sections()
        truth = by_exam[r.exam_id]
        if truth.label == "normal":
            assert "normal" in r.summary.lower()
        else:
            words = label_words[truth.label]
            words = (words,) if isinstance(words, str) else words
            assert any(w in r.full_text.lower() for w in words), (truth.label, r.full_text)


def test_patient_reuse_rule(small_dataset):
    spec, (exams, reports, truths, volumes) = small_dataset
    assert exams[11].patient_id == exams[10].patient_id
    assert exams[11].patient_age_years == exams[10].patient_age_years
    assert exams[12].patient_id != exams[11].patient_id


def test_write_dataset_roundtrip(tmp_path):
    spec = SyntheticSpec(n_exams=6, seed=5)
    exams, reports, truths = write_synthetic_dataset(spec, tmp_path)
    from brainalign.nifti import read_nifti

    _, _, _, volumes = generate_synthetic(spec)
    for exam in exams:
        for seq, ref in exam.sequences.items():
            data, spacing = read_nifti(tmp_path / ref)
            assert spacing == (1.0, 1.0, 1.0)
            assert np.array_equal(data, volumes[(exam.exam_id, seq)])
    loaded = read_ground_truth(tmp_path / "ground_truth.jsonl")
    assert [t.exam_id for t in loaded] == [t.exam_id for t in truths]
    assert all(isinstance(t, GroundTruth) for t in loaded)


def test_domain_words_present_in_phrase_bank():
    bank_text = " ".join(
        " ".join(ps.findings + ps.summary) for ps in DEFAULT_PHRASES.values()
    ).lower()
    for word in DOMAIN_WORDS:
        assert word in bank_text, word


def test_default_lesion_labels_cover_phrases():
    labels = {l.label for l in default_lesions()}
    assert labels == {"mass", "acute_stroke", "microhaemorrhage", "meningioma", "hydrocephalus"}
