import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dapt.corpus import (
    CorpusError,
    CorpusStats,
    Document,
    SentenceList,
    corpus_stats,
    ingest_jsonl,
    split_sentences,
)


def write_lines(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


class TestIngest:
    def test_order_preserved(self, tmp_path):
        p = write_lines(tmp_path / "c.jsonl", [json.dumps({"id": "a", "title": "", "text": "One."}),
                                               json.dumps({"id": "b", "title": "T", "text": "Two."})])
        docs = list(ingest_jsonl(p))
        assert [d.id for d in docs] == ["a", "b"]
        assert docs[0].domain_tag.value == "other"

    def test_missing_title_and_text_reports_line(self, tmp_path):
        p = write_lines(tmp_path / "c.jsonl", [json.dumps({"id": "a", "text": "ok"}), '{"id":"x"}'])
        with pytest.raises(CorpusError, match=":2:"):
            list(ingest_jsonl(p))

    def test_malformed_json_reports_line(self, tmp_path):
        p = write_lines(tmp_path / "c.jsonl", ["{not json"])
        with pytest.raises(CorpusError, match=":1:"):
            list(ingest_jsonl(p))

    def test_duplicate_id_named(self, tmp_path):
        p = write_lines(tmp_path / "c.jsonl", [json.dumps({"id": "dup", "text": "a"})] * 2)
        with pytest.raises(CorpusError, match="dup"):
            list(ingest_jsonl(p))

    def test_empty_file(self, tmp_path):
        p = tmp_path / "empty.jsonl"
        p.write_bytes(b"")
        assert list(ingest_jsonl(p)) == []

    def test_domain_tag(self, tmp_path):
        p = write_lines(tmp_path / "c.jsonl", [json.dumps({"id": "a", "text": "x", "domain": "biomedical"})])
        assert next(ingest_jsonl(p)).domain_tag.value == "biomedical"


class TestSplitSentences:
    def test_two_sentences(self):
        assert split_sentences("We train a model. It works.") == ["We train a model.", "It works."]

    def test_empty(self):
        assert split_sentences("") == []

    def test_no_terminator(self):
        assert split_sentences("No terminator here") == ["No terminator here"]

    @pytest.mark.parametrize("text", [
        "Results follow Smith et al. The effect holds.",
        "See Fig. 3 for details.",
        "Use e.g. Adam here.",
        "Written by J. Smith in 2019.",
    ])
    def test_abbreviations_do_not_split(self, text):
        assert split_sentences(text) == [text]

    def test_lowercase_follower_does_not_split(self):
        assert split_sentences("Values near 3. were kept.") == ["Values near 3. were kept."]

    def test_digit_follower_splits(self):
        assert split_sentences("It ended. 42 runs followed.") == ["It ended.", "42 runs followed."]

    @settings(max_examples=200, deadline=None)
    @given(st.text(alphabet=st.sampled_from(list("abAB .!?\n19")), max_size=60))
    def test_no_character_loss_and_idempotent(self, text):
        out = split_sentences(text)
        assert all(s.strip() for s in out)
        assert "".join(out).replace(" ", "").replace("\n", "") == "".join(text.split())
        for s in out:
            assert split_sentences(s) == [s]


class TestStats:
    def test_mean_sentences(self):
        docs = [SentenceList("a", ("x.",) * 3), SentenceList("b", ("y.",) * 5)]
        assert corpus_stats(docs).mean_sentences_per_doc == 4.0

    def test_empty(self):
        s = corpus_stats([])
        assert (s.document_count, s.sentence_count, s.token_count) == (0, 0, 0)
        assert s.mean_sentences_per_doc == 0 and s.mean_tokens_per_doc == 0

    def test_whitespace_tokens(self):
        assert corpus_stats([SentenceList("a", ("a b c",))]).token_count == 3

    def test_documents_are_split(self):
        s = corpus_stats([Document("d", "Title here", "First one. Second one.")])
        assert s.sentence_count == 3
        assert s.token_count == 6

    def test_additive(self):
        left = [SentenceList("a", ("a b", "c"))]
        right = [SentenceList("b", ("d e f",)), SentenceList("c", ("g",))]
        assert corpus_stats(left + right) == corpus_stats(left).merge(corpus_stats(right))

    def test_means_are_exact_ratios(self):
        s = CorpusStats(3, 10, 7)
        assert s.mean_sentences_per_doc == 10 / 3 and s.mean_tokens_per_doc == 7 / 3
