import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_recall, flat_oracle, random_instance

from ccattn.metrics import (
    AlignmentAnnotation,
    AttentionInstance,
    MetricThresholds,
    Phrase,
    attended_set,
    corpus_attention_report,
    f1_combine,
    iou,
    recall_at_k,
    relevant_set,
    rsum,
    word_metrics,
    write_phrase_csv,
    write_summary_json,
)

BASE_ROW = [67.4, 90.7, 94.9, 47.8, 77.4, 85.3]
CONSTRAINED_ROW = [70.8, 92.7, 95.9, 52.6, 79.8, 85.3]


class TestIoU:
    def test_identical(self):
        assert iou((1, 2, 3, 4), (1, 2, 3, 4)) == 1.0

    def test_disjoint(self):
        assert iou((0, 0, 1, 1), (5, 5, 1, 1)) == 0.0

    def test_hand_case(self):
        assert iou((0, 0, 2, 2), (1, 0, 2, 2)) == pytest.approx(1 / 3, abs=1e-15)

    def test_touching_edges(self):
        assert iou((0, 0, 1, 1), (1, 0, 1, 1)) == 0.0

    def test_zero_area(self):
        with pytest.raises(ValueError):
            iou((0, 0, 0, 1), (0, 0, 1, 1))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 50), min_size=2, max_size=2), st.lists(st.floats(0.5, 50), min_size=2, max_size=2),
           st.lists(st.floats(0, 50), min_size=2, max_size=2), st.lists(st.floats(0.5, 50), min_size=2, max_size=2))
    def test_symmetric_and_bounded(self, p1, s1, p2, s2):
        a, b = (*p1, *s1), (*p2, *s2)
        v = iou(a, b)
        assert 0.0 <= v <= 1.0
        assert v == pytest.approx(iou(b, a), abs=1e-15)


class TestSets:
    boxes = np.array([[0, 0, 10, 10], [1, 1, 10, 10], [50, 50, 5, 5]], float)
    ann = AlignmentAnnotation([Phrase((0, 2), (0,))])

    def test_unlinked_word_is_empty(self):
        assert relevant_set(self.boxes, self.ann, 2) == set()

    def test_gt_box_included(self):
        assert 0 in relevant_set(self.boxes, self.ann, 0, t_iou=0.99)

    def test_iou_scan(self):
        rng = np.random.default_rng(0)
        boxes = np.column_stack([rng.uniform(0, 50, (12, 2)), rng.uniform(5, 30, (12, 2))])
        ann = AlignmentAnnotation([Phrase((0, 1), (0, 3))])
        want = {i for i in range(12) if max(iou(boxes[i], boxes[0]), iou(boxes[i], boxes[3])) > 0.3}
        assert relevant_set(boxes, ann, 0, 0.3) == want

    def test_zero_threshold_attends_all_positive(self):
        assert attended_set(np.array([[0.5, 0.3, 0.2]]), 0, 0.0) == {0, 1, 2}

    def test_uniform_threshold_is_strict(self):
        assert attended_set(np.full((1, 4), 0.25), 0) == set()


class TestWordMetrics:
    def test_hand_case(self):
        ap, ar, af = word_metrics({0, 1}, {1, 2})
        assert (ap, ar) == (0.5, 0.5)
        assert af == 0.25
        assert f1_combine(0.5, 0.5, "standard") == 0.5

    def test_third(self):
        ap, ar, af = word_metrics({0}, {0, 1})
        assert af == pytest.approx(1 / 3, abs=1e-15)

    def test_empty_attended(self):
        assert word_metrics(set(), {1}) == (0.0, 0.0, 0.0)

    def test_empty_relevant(self):
        with pytest.raises(ValueError):
            word_metrics({1}, set())

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0, 1), st.floats(0, 1))
    def test_f1_bounds(self, ap, ar):
        std = f1_combine(ap, ar, "standard")
        assert f1_combine(ap, ar, "paper") == pytest.approx(std / 2, abs=1e-15)
        assert std <= max(ap, ar) + 1e-15
        assert std >= min(ap, ar) - 1e-15 or min(ap, ar) == 0 or std >= 0


class TestCorpusReport:
    def test_phrase_value_is_max_over_words(self):
        boxes = np.array([[0, 0, 10, 10], [20, 0, 10, 10], [40, 0, 10, 10]], float)
        w = np.array([[0.1, 0.1, 0.8], [0.6, 0.3, 0.1]])
        inst = AttentionInstance("x", w, boxes, AlignmentAnnotation([Phrase((0, 2), (0,))]))
        rep = corpus_attention_report([inst])
        assert (rep.precision, rep.recall, rep.f1_paper) == (1.0, 1.0, 0.5)
        assert rep.f1 == 0.5 and rep.phrases[0].phrase_id == "x:0"

    def test_no_scorable_phrase(self):
        inst = AttentionInstance("x", np.full((1, 2), 0.5), np.ones((2, 4)), AlignmentAnnotation([]))
        with pytest.raises(ValueError):
            corpus_attention_report([inst])

    @pytest.mark.parametrize("t_att", ["uniform", 0.0, 0.2])
    def test_matches_flat_oracle(self, t_att):
        rng = np.random.default_rng(7)
        insts = [random_instance(rng, i) for i in range(300)]
        rep = corpus_attention_report(insts, MetricThresholds(0.5, t_att))
        want, per_phrase = flat_oracle(insts, 0.5, t_att)
        assert [(p.ap, p.ar) for p in rep.phrases] == [v[:2] for v in per_phrase]
        got = [rep.precision, rep.recall, rep.f1_paper, rep.f1_standard]
        np.testing.assert_allclose(got, want, atol=1e-12, rtol=0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_instance_order_invariant(self, seed):
        rng = np.random.default_rng(seed)
        insts = [random_instance(rng, i) for i in range(20)]
        try:
            a = corpus_attention_report(insts)
        except ValueError:
            return
        b = corpus_attention_report(insts[::-1])
        assert (a.precision, a.recall, a.f1_paper, a.f1_standard) == (b.precision, b.recall, b.f1_paper, b.f1_standard)

    def test_bounds_and_f1_relation(self):
        rng = np.random.default_rng(8)
        rep = corpus_attention_report([random_instance(rng, i) for i in range(100)], f1="standard")
        for v in (rep.precision, rep.recall, rep.f1_paper, rep.f1_standard):
            assert 0.0 <= v <= 1.0
        assert rep.f1 == rep.f1_standard
        assert rep.f1_standard == pytest.approx(2 * rep.f1_paper, abs=1e-12)


class TestRecall:
    def test_identity_scores(self):
        rep = recall_at_k(np.eye(12))
        assert rep.sentence == {1: 100.0, 5: 100.0, 10: 100.0} == rep.image
        assert rep.rsum == 600.0

    def test_ties_keep_lower_index(self):
        rep = recall_at_k(np.ones((3, 3)), ks=(1,))
        assert rep.sentence[1] == pytest.approx(100 / 3)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            n = int(rng.integers(2, 15))
            s = rng.integers(0, 4, (n, n)).astype(float)  # many ties
            rep = recall_at_k(s)
            want_s, want_i = brute_recall(s.tolist(), (1, 5, 10))
            assert rep.sentence == pytest.approx(want_s, abs=1e-12)
            assert rep.image == pytest.approx(want_i, abs=1e-12)

    def test_many_captions_per_image(self):
        s = np.array([[0.9, 0.1, 0.8, 0.0], [0.2, 0.7, 0.3, 0.6]])
        rep = recall_at_k(s, [{0, 2}, {1, 3}], ks=(1,))
        assert rep.sentence[1] == 100.0 and rep.image[1] == 100.0

    def test_non_square_needs_truth(self):
        with pytest.raises(ValueError):
            recall_at_k(np.zeros((2, 3)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_monotone_in_k_and_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        s = rng.standard_normal((8, 8))
        rep = recall_at_k(s, ks=(1, 2, 5, 8))
        assert list(rep.sentence.values()) == sorted(rep.sentence.values())
        assert rep.sentence[8] == 100.0
        perm = rng.permutation(8)
        assert recall_at_k(s[perm][:, perm], ks=(1, 2, 5, 8)).sentence == rep.sentence


class TestRsum:
    def test_known_rows_exact(self):
        assert rsum(BASE_ROW) == 463.5
        assert rsum(CONSTRAINED_ROW) == 477.1

    def test_order_independent(self):
        assert rsum(BASE_ROW[::-1]) == rsum(BASE_ROW)


def test_output_files(tmp_path):
    rng = np.random.default_rng(10)
    att = corpus_attention_report([random_instance(rng, i) for i in range(10)], f1="standard")
    ret = recall_at_k(np.eye(4))
    write_phrase_csv(att, tmp_path / "phrases.csv")
    write_summary_json(tmp_path / "s.json", att, ret)
    rows = list(csv.reader(open(tmp_path / "phrases.csv")))
    assert rows[0] == ["phrase_id", "ap", "ar", "af"]
    assert len(rows) == len(att.phrases) + 1
    assert float(rows[1][3]) == att.phrases[0].af_standard
    summary = json.loads((tmp_path / "s.json").read_text())
    assert summary["rsum"] == 600.0 and summary["f1_standard"] == att.f1_standard
