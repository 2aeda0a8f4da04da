import numpy as np
import pytest

from dapt import tensor as T
from dapt.datasets import ClsExample, DependencyTree, RelExample, TaggedSentence
from dapt.heads import (
    E1,
    BiaffineScorer,
    ClassifierModel,
    CrfTagger,
    HeadError,
    LabelSet,
    LinearClassifier,
    ParserModel,
    RelationModel,
    TaggerModel,
    classify_cls,
    default_casing,
    encode_words,
    mark_entities,
    parse_biaffine,
    tag_sequence,
)
from dapt.synthetic import toy_cls_examples, toy_ner_sentences
from dapt.tasks import fit_finetune, training_accuracy
from dapt.tensor import Tensor
from dapt.vocab import Casing
from helpers import micro_encoder, toy_vocab

VOCAB = toy_vocab()
TAGS = LabelSet.from_tags([["B-CHEM", "I-CHEM", "O", "B-DIS", "I-DIS"]])
DEPS = LabelSet.from_labels(["root", "dep", "punct"])


def vectors(shape, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=shape), requires_grad=True)


class TestLabelSet:
    def test_from_tags_pairs_types(self):
        assert TAGS.labels == ("O", "B-CHEM", "I-CHEM", "B-DIS", "I-DIS")
        assert TAGS.scheme.value == "bio"

    def test_orphan_inside_tag(self):
        with pytest.raises(HeadError, match="B-X"):
            LabelSet(("O", "I-X"), "bio")

    def test_unknown_label(self):
        with pytest.raises(HeadError, match="'zzz'"):
            DEPS.index("zzz")


class TestMarkEntities:
    def test_worked_example(self):
        out = mark_entities(["aspirin", "treats", "fever"], (0, 0), (2, 2))
        assert out == ["[E1]", "aspirin", "[/E1]", "treats", "[E2]", "fever", "[/E2]"]

    def test_reverse_order_and_length(self):
        tokens = ["a", "b", "c", "d", "e"]
        out = mark_entities(tokens, (3, 4), (0, 1))
        assert out == ["[E2]", "a", "b", "[/E2]", "c", "[E1]", "d", "e", "[/E1]"]
        assert len(out) == len(tokens) + 4

    @pytest.mark.parametrize("s1, s2", [((0, 1), (1, 2)), ((0, 3), (1, 1)), ((0, 5), (6, 6))])
    def test_rejects_overlap_or_range(self, s1, s2):
        with pytest.raises(HeadError):
            mark_entities(list("abcdef"), s1, s2)


class TestEncodeWords:
    def test_alignment_and_wrapping(self):
        enc = encode_words(VOCAB, ["the", "protein", "binds"], 64)
        assert enc.token_ids[0] == VOCAB.cls_id and enc.token_ids[-1] == VOCAB.sep_id
        assert len(enc.first_subword) == 3 and enc.first_subword[0] == 1

    def test_overlong_rejected_with_hint(self):
        with pytest.raises(HeadError, match="shorter windows"):
            encode_words(VOCAB, ["protein"] * 80, 64)

    def test_truncation_keeps_sep(self):
        enc = encode_words(VOCAB, ["protein"] * 80, 64, truncate=True)
        assert len(enc.token_ids) == 64 and enc.token_ids[-1] == VOCAB.sep_id


class TestClassifier:
    def test_untrained_is_near_uniform(self):
        labels = LabelSet.from_labels(["a", "b", "c"])
        model = ClassifierModel(micro_encoder(len(VOCAB)), VOCAB, labels, seed=0)
        probs = classify_cls(model, "the protein binds the receptor")
        assert set(probs) == {"a", "b", "c"}
        assert sum(probs.values()) == pytest.approx(1.0, abs=1e-9)
        assert all(abs(p - 1 / 3) <= 0.15 for p in probs.values())

    def test_empty_text(self):
        model = ClassifierModel(micro_encoder(len(VOCAB)), VOCAB, LabelSet.from_labels(["a", "b"]))
        with pytest.raises(HeadError):
            classify_cls(model, "  ")

    def test_linear_head_gradients(self):
        head = LinearClassifier(6, LabelSet.from_labels(["a", "b", "c"]), dtype=np.float64, dropout=0.0)
        x = vectors((4, 6))
        gold = ["a", "c", "b", "a"]
        err = T.grad_check(lambda *_: head.loss(x, gold), [x, *head.params.values()])
        assert err < 1e-5

    def test_overfits_tiny_set(self):
        data = [ClsExample(e["text"], e["label"]) for e in toy_cls_examples(16, seed=3)]
        model = ClassifierModel(micro_encoder(len(VOCAB), hidden_size=32, num_heads=2, ff_size=64),
                                VOCAB, LabelSet.from_labels(["neg", "pos"]), dropout=0.0)
        fit_finetune(model, data, epochs=40, lr=2e-3, batch_size=8)
        assert training_accuracy("cls", model, data) == 1.0


class TestRelation:
    def test_markers_added_to_vocab(self):
        model = RelationModel(micro_encoder(len(VOCAB)), VOCAB, LabelSet.from_labels(["x", "y"]))
        assert E1 in model.vocab and len(model.vocab) == len(VOCAB) + 4
        assert model.encoder.config.vocab_size >= len(model.vocab)
        ex = RelExample(["aspirin", "treats", "fever"], (0, 0), (2, 2), "x")
        assert model.vocab.index[E1] in model.inputs(ex)
        assert model.predict([ex])[0] in ("x", "y")


class TestTagger:
    def test_one_label_per_word(self):
        model = TaggerModel(micro_encoder(len(VOCAB)), VOCAB, TAGS)
        words = ["aspirin", "p53-dependent", "fever", "the", "protein"]
        tags = tag_sequence(model, words)
        assert len(tags) == 5 and set(tags) <= set(TAGS.labels)

    def test_output_is_valid_bio(self):
        model = TaggerModel(micro_encoder(len(VOCAB), seed=4), VOCAB, TAGS)
        for seed in range(5):
            tags = tag_sequence(model, [t for t, _ in toy_ner_sentences(1, seed)][0])
            for prev, cur in zip(["O"] + tags, tags):
                if cur.startswith("I-"):
                    assert prev[2:] == cur[2:]

    def test_crf_head_gradients(self):
        head = CrfTagger(5, TAGS, dtype=np.float64, dropout=0.0)
        x = vectors((2, 4, 5))
        mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=bool)
        gold = [["B-CHEM", "I-CHEM", "O", "B-DIS"], ["O", "B-DIS"]]
        err = T.grad_check(lambda *_: head.loss(x, mask, gold), [x, *head.params.values()])
        assert err < 1e-5

    def test_needs_bio(self):
        with pytest.raises(HeadError):
            CrfTagger(4, DEPS)

    def test_overfits_ten_sentences(self):
        data = [TaggedSentence(t, g) for t, g in toy_ner_sentences(10, seed=5)]
        model = TaggerModel(micro_encoder(len(VOCAB), hidden_size=32, num_heads=2, ff_size=64),
                            VOCAB, LabelSet.from_tags([s.tags for s in data]), dropout=0.0)
        fit_finetune(model, data, epochs=60, lr=3e-3, batch_size=10)
        assert model.predict(data) == [list(s.tags) for s in data]


class TestParser:
    def test_single_token_attaches_to_root(self):
        model = ParserModel(micro_encoder(len(VOCAB)), VOCAB, DEPS)
        tree = parse_biaffine(model, ["protein"])
        assert list(tree.heads) == [0]

    def test_output_is_tree(self):
        model = ParserModel(micro_encoder(len(VOCAB), seed=2), VOCAB, DEPS)
        for n in range(2, 8):
            tree = parse_biaffine(model, ["the", "gene", "data", "model", "signal", "method", "result"][:n])
            assert sum(h == 0 for h in tree.heads) == 1 and len(tree.labels) == n

    def test_biaffine_gradients(self):
        head = BiaffineScorer(4, DEPS, dtype=np.float64, dropout=0.0)
        x = vectors((1, 4, 4))
        mask = np.ones((1, 4), dtype=bool)
        gold = [DependencyTree(["a", "b", "c"], [2, 0, 2], ["dep", "root", "punct"])]
        params = [x] + [p for k, p in head.params.items() if not k.endswith(".bias")]
        assert T.grad_check(lambda *_: head.loss(x, mask, gold), params, sample=15) < 1e-4


def test_default_casing():
    assert default_casing("ner") is Casing.CASED and default_casing("dep") is Casing.CASED
    assert default_casing("cls") is Casing.UNCASED and default_casing("rel") is Casing.UNCASED
