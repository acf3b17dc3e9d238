import numpy as np
import pytest

from brainalign.inference import (
    DiscrepancyFlag,
    EmbeddingIndex,
    ImageEmbedding,
    InferenceError,
    NORMAL_QUERY_TEXT,
    Query,
    abnormality_score,
    classify,
    discrepancy_check,
    ensemble,
    retrieve,
    similarity,
)
from brainalign.text_encoder import cosine
from brainalign.volumes import SequenceType

RNG = np.random.default_rng(0)


def img(vec, exam="exam-0", seq=SequenceType.AX_T2):
    return ImageEmbedding(vector=np.asarray(vec, dtype=float), exam_id=exam, sequence=seq)


def query(vec, text="q"):
    return Query(text=text, embedding=np.asarray(vec, dtype=float))


class TestSimilarity:
    def test_negative_cosine_clipped(self):
        s = similarity(img([1.0, 0.0]), query([-1.0, 0.3]))
        assert s.value == 0.0

    def test_parallel_is_one(self):
        s = similarity(img([2.0, 2.0]), query([1.0, 1.0]))
        assert s.value == pytest.approx(1.0)

    def test_orthogonal_is_zero(self):
        s = similarity(img([1.0, 0.0]), query([0.0, 1.0]))
        assert s.value == pytest.approx(0.0)

    def test_zero_embedding_rejected(self):
        with pytest.raises(Exception):
            similarity(img([0.0, 0.0]), query([1.0, 0.0]))

    def test_metadata_carried(self):
        s = similarity(img([1.0, 1.0], exam="e7", seq=SequenceType.AX_GRE),
                       query([1.0, 0.0], text="there is a mass"))
        assert (s.exam_id, s.sequence, s.query_text) == ("e7", SequenceType.AX_GRE, "there is a mass")


class TestAbnormality:
    def test_complement(self):
        normal = query([1.0, 0.0], NORMAL_QUERY_TEXT)
        assert abnormality_score(img([1.0, 0.0]), normal) == pytest.approx(0.0)
        assert abnormality_score(img([0.0, 1.0]), normal) == pytest.approx(1.0)

    def test_negative_cosine_gives_abnormality_one(self):
        normal = query([1.0, 0.0], NORMAL_QUERY_TEXT)
        assert abnormality_score(img([-1.0, 0.0]), normal) == pytest.approx(1.0)

    def test_point_nine_gives_point_one(self):
        # cosine 0.9 arranged analytically
        v = np.array([0.9, np.sqrt(1 - 0.81)])
        normal = query([1.0, 0.0], NORMAL_QUERY_TEXT)
        assert abnormality_score(img(v), normal) == pytest.approx(0.1)


class TestEnsemble:
    def test_max_and_argmax(self):
        scores = {SequenceType.AX_T2: 0.2, SequenceType.AX_DWI: 0.7, SequenceType.AX_GRE: 0.4}
        value, seq = ensemble(scores)
        assert value == 0.7 and seq is SequenceType.AX_DWI

    def test_single_sequence_identity(self):
        value, seq = ensemble({SequenceType.COR_T1: 0.55})
        assert value == 0.55 and seq is SequenceType.COR_T1

    def test_permutation_invariant(self):
        a = {SequenceType.AX_T2: 0.1, SequenceType.AX_GRE: 0.9}
        b = dict(reversed(list(a.items())))
        assert ensemble(a) == ensemble(b)

    def test_tie_break_canonical_order(self):
        scores = {SequenceType.AX_GRE: 0.5, SequenceType.AX_T2: 0.5}
        _, seq = ensemble(scores)
        assert seq is SequenceType.AX_T2  # first in canonical order

    def test_empty_rejected(self):
        with pytest.raises(InferenceError):
            ensemble({})

    def test_dominates_components(self):
        for _ in range(200):
            scores = {s: float(RNG.random()) for s in list(SequenceType)[: RNG.integers(1, 9)]}
            value, seq = ensemble(scores)
            assert all(value >= v for v in scores.values())
            assert value == scores[seq]


class TestClassify:
    def test_positive_above_threshold(self):
        label, value, _ = classify({SequenceType.AX_T2: 0.8}, 0.5)
        assert label == "positive" and value == 0.8

    def test_boundary_is_positive(self):
        label, _, _ = classify({SequenceType.AX_T2: 0.5}, 0.5)
        assert label == "positive"

    def test_negative_below(self):
        label, _, _ = classify({SequenceType.AX_T2: 0.2}, 0.5)
        assert label == "negative"

    def test_monotone_transform_invariance(self):
        scores = {SequenceType.AX_T2: 0.3, SequenceType.AX_DWI: 0.6}
        thr = 0.5
        base, *_ = classify(scores, thr)
        squash = lambda x: x**2  # strictly increasing on [0, 1]
        squashed, *_ = classify({k: squash(v) for k, v in scores.items()}, squash(thr))
        assert base == squashed

    def test_validation(self):
        with pytest.raises(InferenceError):
            classify({}, 0.5)
        with pytest.raises(InferenceError):
            classify({SequenceType.AX_T2: 0.5}, 1.5)


def build_random_index(n, dim=8, seq=SequenceType.AX_T2, rng=None):
    rng = rng or RNG
    index = EmbeddingIndex()
    for i in range(n):
        index.add(img(rng.standard_normal(dim), exam=f"exam-{i:03d}", seq=seq))
    return index.freeze()


class TestRetrieve:
    def test_single_item_index(self):
        index = build_random_index(1)
        q = query(RNG.standard_normal(8))
        out = retrieve(q, index, SequenceType.AX_T2, k=15)
        assert len(out.ranked) == 1

    def test_scale_invariance(self):
        index = build_random_index(30)
        v = RNG.standard_normal(8)
        a = retrieve(query(v), index, SequenceType.AX_T2, k=10)
        b = retrieve(query(3.7 * v), index, SequenceType.AX_T2, k=10)
        assert [e for e, _ in a.ranked] == [e for e, _ in b.ranked]

    def test_matches_full_sort_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            n = int(rng.integers(2, 40))
            index = build_random_index(n, rng=rng)
            qv = rng.standard_normal(8)
            k = int(rng.integers(1, 20))
            got = retrieve(query(qv), index, SequenceType.AX_T2, k=k)
            oracle = sorted(
                ((e.exam_id, cosine(e.vector, qv)) for e in index.bucket(SequenceType.AX_T2)),
                key=lambda item: (-item[1], item[0]),
            )[:k]
            assert [e for e, _ in got.ranked] == [e for e, _ in oracle]
            assert np.allclose([c for _, c in got.ranked], [c for _, c in oracle])

    def test_cosines_non_increasing(self):
        index = build_random_index(50)
        out = retrieve(query(RNG.standard_normal(8)), index, SequenceType.AX_T2, k=50)
        values = [c for _, c in out.ranked]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_all_sequence_mode_takes_exam_max(self):
        index = EmbeddingIndex()
        index.add(img([1.0, 0.0], exam="e1", seq=SequenceType.AX_T2))
        index.add(img([0.0, 1.0], exam="e1", seq=SequenceType.AX_DWI))
        index.add(img([0.7, 0.7], exam="e2", seq=SequenceType.AX_T2))
        index.freeze()
        out = retrieve(query([1.0, 0.0]), index, None, k=2)
        assert out.ranked[0][0] == "e1"  # exam max over sequences is cosine 1

    def test_empty_bucket_rejected(self):
        index = build_random_index(3)
        with pytest.raises(InferenceError):
            retrieve(query(RNG.standard_normal(8)), index, SequenceType.COR_T1, k=5)


class TestIndex:
    def test_duplicate_rejected(self):
        index = EmbeddingIndex()
        index.add(img([1.0, 0.0]))
        with pytest.raises(InferenceError):
            index.add(img([0.5, 0.5]))

    def test_frozen_rejects_insertion(self):
        index = build_random_index(2)
        with pytest.raises(InferenceError):
            index.add(img([1.0, 0.0], exam="new"))

    def test_bucket_sizes(self):
        index = EmbeddingIndex()
        for i in range(5):
            index.add(img(RNG.standard_normal(4), exam=f"e{i}", seq=SequenceType.AX_T2))
        assert len(index.bucket(SequenceType.AX_T2)) == 5
        assert len(index) == 5

    def test_save_load_identical(self, tmp_path):
        index = build_random_index(7, dim=5)
        index.save(tmp_path / "index")
        loaded = EmbeddingIndex.load(tmp_path / "index")
        for seq in index.sequences():
            for a, b in zip(index.bucket(seq), loaded.bucket(seq)):
                assert a.exam_id == b.exam_id
                assert np.allclose(a.vector, b.vector, atol=1e-7)


class TestDiscrepancy:
    def test_flagging_rule(self):
        t = query([1.0, 0.0], "there is a mass")
        report_emb = np.array([0.0, 1.0])  # orthogonal: report similarity 0
        flags = discrepancy_check({"there is a mass": 0.9}, report_emb, [t], 0.5, 0.3)
        assert flags[0].flagged and flags[0].scan_similarity == 0.9

    def test_not_flagged_when_report_agrees(self):
        t = query([1.0, 0.0], "there is a mass")
        report_emb = np.array([1.0, 0.1])
        flags = discrepancy_check({"there is a mass": 0.9}, report_emb, [t], 0.5, 0.3)
        assert not flags[0].flagged
        assert flags[0].report_similarity > 0.9

    def test_invariant_matches_definition(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            t = query(rng.standard_normal(4), "t")
            rep = rng.standard_normal(4)
            scan = float(rng.random())
            theta_scan, theta_report = rng.random(), rng.random()
            (flag,) = discrepancy_check({"t": scan}, rep, [t], theta_scan, theta_report)
            expected = flag.scan_similarity >= theta_scan and flag.report_similarity <= theta_report
            assert flag.flagged == expected

    def test_empty_templates_rejected(self):
        with pytest.raises(InferenceError):
            discrepancy_check({}, np.ones(4), [], 0.5, 0.3)


class TestScoreAlgebraProperty:
    def test_random_embedding_sweep(self):
        rng = np.random.default_rng(99)
        normal = query(rng.standard_normal(16), NORMAL_QUERY_TEXT)
        for _ in range(1000):
            image = img(rng.standard_normal(16))
            s = similarity(image, normal)
            a = abnormality_score(image, normal)
            assert 0 <= s.value <= 1
            assert a == pytest.approx(1 - s.value)
