import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dapt import metrics as M
from dapt.datasets import DependencyTree
from dapt.metrics import MetricsError, Span


def worked_dep_pair():
    """Five tokens, the last is punctuation; heads all right, one label wrong
    and the punctuation token wrong in both head and label."""
    tokens = ["We", "train", "a", "model", "."]
    gold = DependencyTree(tokens, [2, 0, 4, 2, 2], ["nsubj", "root", "det", "obj", "punct"],
                          [False, False, False, False, True])
    pred = DependencyTree(tokens, [2, 0, 4, 2, 4], ["nsubj", "root", "amod", "obj", "dep"],
                          [False, False, False, False, True])
    return gold, pred


class TestSpans:
    def test_single_span(self):
        assert M.spans_from_bio(["B-PER", "I-PER", "O"]) == {Span(0, 1, "PER")}

    def test_empty(self):
        assert M.spans_from_bio(["O", "O"]) == set()

    def test_repair(self, caplog):
        spans, repaired = M.extract_spans(["O", "I-LOC"])
        assert spans == {Span(1, 1, "LOC")} and repaired
        with caplog.at_level("WARNING"):
            M.spans_from_bio(["O", "I-LOC"])
        assert "repaired" in caplog.text

    def test_type_change_opens_span(self):
        assert M.spans_from_bio(["B-A", "I-B"]) == {Span(0, 0, "A"), Span(1, 1, "B")}

    def test_unknown_tag(self):
        with pytest.raises(MetricsError):
            M.spans_from_bio(["S-PER"])


class TestSpanF1:
    def test_perfect(self):
        g = [{Span(0, 1, "A")}, {Span(2, 2, "B")}]
        assert M.span_f1_macro(g, g).value == 1.0

    def test_boundary_strict(self):
        assert M.span_f1_macro([{Span(1, 2, "PER")}], [{Span(1, 3, "PER")}]).value == 0.0

    def test_macro_over_types(self):
        gold = [{Span(0, 0, "A"), Span(2, 2, "B")}]
        pred = [{Span(0, 0, "A")}]
        assert abs(M.span_f1_macro(gold, pred).value - 0.5) <= 1e-9

    def test_sentence_order_invariant(self):
        gold = [{Span(0, 0, "A")}, {Span(1, 2, "B")}, set()]
        pred = [{Span(0, 0, "A")}, {Span(1, 1, "B")}, {Span(0, 0, "A")}]
        a = M.span_f1_macro(gold, pred).value
        b = M.span_f1_macro(gold[::-1], pred[::-1]).value
        assert a == b


class TestTokenF1:
    def test_identical(self):
        tags = ["B-P", "I-P", "O", "B-I"]
        assert M.token_f1_macro(tags, tags).value == 1.0

    def test_all_o(self):
        assert M.token_f1_macro(["B-P", "O"], ["O", "O"]).value == 0.0

    def test_one_class_perfect_one_missed(self):
        gold = ["B-P", "I-P", "B-I", "O"]
        pred = ["B-P", "I-P", "O", "O"]
        assert abs(M.token_f1_macro(gold, pred).value - 0.5) <= 1e-9

    def test_length_mismatch(self):
        with pytest.raises(MetricsError):
            M.token_f1_macro([["O", "O"]], [["O"]])


class TestSentenceF1:
    def test_perfect(self):
        y = ["a", "b", "c"]
        assert M.sentence_f1(y, y, "macro").value == M.sentence_f1(y, y, "micro").value == 1.0

    def test_macro_below_micro(self):
        gold = ["a", "a", "b", "b", "c", "c"]
        pred = ["a", "a", "b", "b", "b", "b"]
        macro = M.sentence_f1(gold, pred, "macro").value
        micro = M.sentence_f1(gold, pred, "micro").value
        assert abs(macro - 5 / 9) <= 1e-9 and abs(micro - 2 / 3) <= 1e-9
        assert macro < micro

    def test_undeclared_label(self):
        with pytest.raises(MetricsError, match="'z'"):
            M.sentence_f1(["a"], ["z"], labels=["a", "b"])

    @given(st.lists(st.tuples(st.sampled_from("abcd"), st.sampled_from("abcd")), min_size=1, max_size=40))
    def test_micro_is_accuracy(self, pairs):
        gold, pred = zip(*pairs)
        assert abs(M.sentence_f1(gold, pred, "micro").value - M.accuracy(gold, pred)) <= 1e-12


class TestAttachment:
    def test_identical(self):
        gold, _ = worked_dep_pair()
        assert M.attachment_scores([gold], [gold]) == {"uas": 1.0, "las": 1.0}

    def test_worked_example_excludes_punct(self):
        gold, pred = worked_dep_pair()
        s = M.attachment_scores([gold], [pred])
        assert abs(s["uas"] - 1.0) <= 1e-9 and abs(s["las"] - 0.75) <= 1e-9
        assert M.attachment_counts([gold], [pred]) == (4, 4, 3)

    def test_all_heads_wrong(self):
        tokens = ["a", "b", "c"]
        gold = DependencyTree(tokens, [0, 1, 2], ["x"] * 3)
        pred = DependencyTree(tokens, [3, 3, 0], ["x"] * 3)
        assert M.attachment_scores([gold], [pred]) == {"uas": 0.0, "las": 0.0}

    def test_misaligned(self):
        gold, _ = worked_dep_pair()
        other = DependencyTree(["x"], [0], ["root"])
        with pytest.raises(MetricsError, match="sentence 1"):
            M.attachment_scores([gold, gold], [gold, other])


class TestBootstrap:
    def test_constant_metric(self):
        y = ["a", "b", "a", "c"]
        assert M.bootstrap_ci(lambda g, p: M.accuracy(g, p), y, y) == (1.0, 1.0)

    def test_deterministic_and_contains_estimate(self):
        rng = np.random.default_rng(0)
        gold = list(rng.choice(list("ab"), 50))
        pred = [g if rng.random() < 0.7 else "b" for g in gold]
        fn = lambda g, p: M.sentence_f1(g, p, "macro")
        r1 = M.with_ci(fn, gold, pred, resamples=300, seed=1)
        r2 = M.with_ci(fn, gold, pred, resamples=300, seed=1)
        r3 = M.with_ci(fn, gold, pred, resamples=300, seed=2)
        assert (r1.ci_low, r1.ci_high) == (r2.ci_low, r2.ci_high)
        assert (r1.ci_low, r1.ci_high) != (r3.ci_low, r3.ci_high)
        for r in (r1, r3):
            assert r.ci_low <= r.value <= r.ci_high

    def test_too_few_units(self):
        with pytest.raises(MetricsError):
            M.bootstrap_ci(M.accuracy, ["a"], ["a"])

    def test_per_class_csv(self, tmp_path):
        res = M.sentence_f1(["a", "b"], ["a", "a"])
        res.write_per_class_csv(tmp_path / "pc.csv")
        rows = list(csv.reader(open(tmp_path / "pc.csv")))
        assert rows[0] == ["class", "precision", "recall", "f1", "support"]
        assert [r[0] for r in rows[1:]] == ["a", "b"]


def test_prf_zero_convention():
    assert M.prf(0, 0, 0) == (0.0, 0.0, 0.0)
    assert M.prf(0, 3, 0)[2] == 0.0
