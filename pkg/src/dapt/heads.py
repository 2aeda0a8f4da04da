"""Task heads on top of encoder vectors: classification, relation classification
with entity markers, CRF tagging and biaffine dependency parsing.

The scoring components (:class:`LinearClassifier`, :class:`CrfTagger`,
:class:`BiaffineScorer`) only see vectors, so the frozen-embedding models
reuse them on BiLSTM outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from . import tensor as T
from .crf import CrfParams, crf_decode, crf_nll
from .datasets import ClsExample, DependencyTree, TaggedSentence
from .encoder import EncoderModel, encode, extend_vocab, truncated_normal
from .tensor import NEG_INF, Tensor
from .trees import chu_liu_edmonds
from .vocab import Casing, Vocabulary, normalize, tokenize_words, pre_split

E1, E1_END, E2, E2_END = "[E1]", "[/E1]", "[E2]", "[/E2]"
ENTITY_MARKERS = (E1, E1_END, E2, E2_END)
BIAFFINE_DIM = 100
FINETUNE_DROPOUT = 0.1


class HeadError(ValueError):
    pass


class Scheme(str, Enum):
    PLAIN = "plain"
    BIO = "bio"


@dataclass(frozen=True)
class LabelSet:
    labels: tuple[str, ...]
    scheme: Scheme = Scheme.PLAIN

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if not self.labels:
            raise HeadError("label set is empty")
        if len(set(self.labels)) != len(self.labels):
            raise HeadError("labels must be unique")
        if self.scheme is Scheme.BIO:
            if "O" not in self.labels:
                raise HeadError("a BIO label set needs 'O'")
            for lab in self.labels:
                if lab == "O":
                    continue
                if lab[:2] not in ("B-", "I-") or len(lab) < 3:
                    raise HeadError(f"label {lab!r} is not O, B-X or I-X")
                partner = ("I-" if lab[0] == "B" else "B-") + lab[2:]
                if partner not in self.labels:
                    raise HeadError(f"label {lab!r} has no matching {partner!r}")

    @classmethod
    def from_labels(cls, labels) -> LabelSet:
        return cls(tuple(sorted(set(labels))), Scheme.PLAIN)

    @classmethod
    def from_tags(cls, tag_sequences) -> LabelSet:
        """BIO label set covering every entity type seen: O, then B-/I- pairs by type."""
        types = sorted({t[2:] for tags in tag_sequences for t in tags if t != "O"})
        labels = ["O"] + [p + t for t in types for p in ("B-", "I-")]
        return cls(tuple(labels), Scheme.BIO)

    def __len__(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise HeadError(f"unknown label {label!r}") from None

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "scheme": self.scheme.value}


# --- input preparation -----------------------------------------------------

def mark_entities(tokens: Sequence[str], span1: Sequence[int], span2: Sequence[int]) -> list[str]:
    """Wrap two end-inclusive word spans in [E1]..[/E1] and [E2]..[/E2]."""
    n = len(tokens)
    (s1, e1), (s2, e2) = span1, span2
    for s, e in ((s1, e1), (s2, e2)):
        if not 0 <= s <= e < n:
            raise HeadError(f"span ({s}, {e}) out of range for {n} tokens")
    if s1 <= e2 and s2 <= e1:
        raise HeadError(f"spans ({s1}, {e1}) and ({s2}, {e2}) overlap")
    opens = {s1: E1, s2: E2}
    closes = {e1: E1_END, e2: E2_END}
    out = []
    for i, tok in enumerate(tokens):
        if i in opens:
            out.append(opens[i])
        out.append(tok)
        if i in closes:
            out.append(closes[i])
    return out


def prepare_rel_vocab(model: EncoderModel, vocab: Vocabulary, seed: int = 0) -> tuple[EncoderModel, Vocabulary]:
    """Append the entity markers to the vocabulary's special region and grow the
    word-embedding table to match."""
    vocab = vocab.with_specials(ENTITY_MARKERS)
    return extend_vocab(model, max(len(vocab), model.config.vocab_size), seed), vocab


@dataclass
class WordEncoding:
    token_ids: list[int]
    first_subword: list[int]  # position of each word's first subword, counting [CLS]


def encode_words(vocab: Vocabulary, words: Sequence[str], max_len: int, truncate: bool = False) -> WordEncoding:
    """[CLS] pieces [SEP] for a list of words, normalized for the vocabulary's casing.

    Words that normalize to several pre-split pieces (e.g. ``"p53-dependent"``)
    keep a single alignment slot pointing at their first subword. When the
    result exceeds ``max_len`` it is either truncated (keeping [CLS] and
    [SEP]) or rejected.
    """
    specials = vocab.specials
    ids = [vocab.cls_id]
    first = []
    for w in words:
        if w in specials:
            pieces = [vocab.index[w]]
        else:
            sub = pre_split(normalize(w, vocab.casing)) or [w]
            pieces = tokenize_words(vocab, sub).token_ids or [vocab.unk_id]
        first.append(len(ids))
        ids.extend(pieces)
    ids.append(vocab.sep_id)
    if len(ids) > max_len:
        if not truncate:
            raise HeadError(
                f"{len(words)} words become {len(ids)} subwords, over the encoder limit of {max_len}; "
                "split the input into shorter windows")
        ids = ids[: max_len - 1] + [vocab.sep_id]
        first = [p for p in first if p < max_len - 1]
    return WordEncoding(ids, first)


def encode_text(vocab: Vocabulary, text: str, max_len: int) -> list[int]:
    if not text or not text.strip():
        raise HeadError("empty text")
    words = pre_split(normalize(text, vocab.casing))
    return encode_words(vocab, words, max_len, truncate=True).token_ids


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    n = max(len(s) for s in seqs)
    ids = np.full((len(seqs), n), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), n), dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = 1
    return ids, mask


def gather_words(seq: Tensor, encodings: Sequence[WordEncoding], with_root: bool = False) -> tuple[Tensor, np.ndarray]:
    """Pick each word's first-subword vector into ``(batch, max_words, hidden)``.

    With ``with_root`` the [CLS] vector is prepended as the virtual root.
    Returns the gathered tensor and a 0/1 mask over word slots.
    """
    offset = 1 if with_root else 0
    width = max(len(e.first_subword) for e in encodings) + offset
    cols = np.zeros((len(encodings), width), dtype=np.int64)
    mask = np.zeros((len(encodings), width), dtype=bool)
    for i, e in enumerate(encodings):
        cols[i, offset: offset + len(e.first_subword)] = e.first_subword
        mask[i, : offset + len(e.first_subword)] = True
    rows = np.arange(len(encodings))[:, None]
    return seq[np.broadcast_to(rows, cols.shape), cols], mask


# --- scoring components ----------------------------------------------------

def _dense(rng, prefix: str, n_in: int, n_out: int, dtype) -> dict[str, Tensor]:
    return {
        f"{prefix}.weight": Tensor(truncated_normal(rng, (n_in, n_out), dtype=dtype), requires_grad=True),
        f"{prefix}.bias": Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True),
    }


def linear(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    return T.add(T.matmul(x, params[f"{prefix}.weight"]), params[f"{prefix}.bias"])


class LinearClassifier:
    """Dropout then a single linear layer over a feature vector."""

    def __init__(self, input_dim: int, labels: LabelSet, seed: int = 0, dtype=np.float32,
                 dropout: float = FINETUNE_DROPOUT, prefix: str = "cls"):
        self.labels = labels
        self.dropout = dropout
        self.prefix = prefix
        self.params = _dense(np.random.default_rng([seed, 11]), f"{prefix}.out", input_dim, len(labels), dtype)

    def logits(self, features: Tensor, train: bool = False, rng=None) -> Tensor:
        return linear(T.dropout(features, self.dropout, rng, train), self.params, f"{self.prefix}.out")

    def loss(self, features: Tensor, gold: Sequence[str], train: bool = False, rng=None) -> Tensor:
        targets = np.array([self.labels.index(g) for g in gold])
        return T.cross_entropy(self.logits(features, train, rng), targets)


class CrfTagger:
    """Per-word emissions from a linear layer, scored by a BIO-constrained CRF."""

    def __init__(self, input_dim: int, labels: LabelSet, seed: int = 0, dtype=np.float32,
                 dropout: float = FINETUNE_DROPOUT, prefix: str = "tag"):
        if labels.scheme is not Scheme.BIO:
            raise HeadError("the CRF tagger needs a BIO label set")
        self.labels = labels
        self.dropout = dropout
        self.prefix = prefix
        self.params = _dense(np.random.default_rng([seed, 12]), f"{prefix}.emit", input_dim, len(labels), dtype)
        self.crf = CrfParams.create(labels.labels, constrained=True, dtype=dtype)
        self.params[f"{prefix}.crf.transitions"] = self.crf.transitions

    def emissions(self, vectors: Tensor, train: bool = False, rng=None) -> Tensor:
        return linear(T.dropout(vectors, self.dropout, rng, train), self.params, f"{self.prefix}.emit")

    def loss(self, vectors: Tensor, mask: np.ndarray, gold: Sequence[Sequence[str]], train=False, rng=None) -> Tensor:
        self.crf.transitions = self.params[f"{self.prefix}.crf.transitions"]
        tags = np.zeros(mask.shape, dtype=np.int64)
        for i, g in enumerate(gold):
            tags[i, : len(g)] = [self.labels.index(t) for t in g]
        return crf_nll(self.emissions(vectors, train, rng), tags, self.crf, mask)

    def decode(self, vectors: Tensor, mask: np.ndarray) -> list[list[str]]:
        self.crf.transitions = self.params[f"{self.prefix}.crf.transitions"]
        em = self.emissions(vectors).data
        out = []
        for i in range(em.shape[0]):
            n = int(mask[i].sum())
            out.append([self.labels.labels[j] for j in crf_decode(em[i, :n], self.crf)])
        return out


class BiaffineScorer:
    """Arc and label biaffine scoring over ``(batch, 1 + words, dim)`` vectors
    whose slot 0 stands for the virtual root.

    ``arc[b, i, j] = [d_i; 1]ᵀ U_arc h_j`` scores token ``i`` taking head ``j``.
    ``lab[b, i, l] = [d_i; 1]ᵀ U_lab[:, l, :] [h_head(i); 1]``.
    """

    def __init__(self, input_dim: int, labels: LabelSet, seed: int = 0, dtype=np.float32,
                 dropout: float = FINETUNE_DROPOUT, prefix: str = "dep"):
        self.labels = labels
        self.dropout = dropout
        self.prefix = prefix
        rng = np.random.default_rng([seed, 13])
        d = BIAFFINE_DIM
        p = {}
        for name in ("arc_dep", "arc_head", "lab_dep", "lab_head"):
            p.update(_dense(rng, f"{prefix}.{name}", input_dim, d, dtype))
        p[f"{prefix}.U_arc"] = Tensor(truncated_normal(rng, (d + 1, d), dtype=dtype), requires_grad=True)
        p[f"{prefix}.U_lab"] = Tensor(truncated_normal(rng, (d + 1, len(labels), d + 1), dtype=dtype),
                                      requires_grad=True)
        self.params = p

    def _proj(self, x: Tensor, name: str, train: bool, rng) -> Tensor:
        h = T.relu(linear(x, self.params, f"{self.prefix}.{name}"))
        return T.dropout(h, self.dropout, rng, train)

    @staticmethod
    def _augment(x: Tensor) -> Tensor:
        ones = Tensor(np.ones(x.shape[:-1] + (1,), dtype=x.dtype))
        return T.concat([x, ones], axis=-1)

    def arc_scores(self, vectors: Tensor, mask: np.ndarray, train: bool = False, rng=None) -> Tensor:
        b, n, _ = vectors.shape
        dep = self._augment(self._proj(vectors, "arc_dep", train, rng))
        head = self._proj(vectors, "arc_head", train, rng)
        scores = T.matmul(T.matmul(dep, self.params[f"{self.prefix}.U_arc"]), T.transpose(head, (0, 2, 1)))
        invalid = ~mask[:, None, :] | np.eye(n, dtype=bool)[None]
        return T.add(scores, Tensor(np.where(invalid, NEG_INF, 0.0).astype(vectors.dtype)))

    def label_scores(self, vectors: Tensor, heads: np.ndarray, train: bool = False, rng=None) -> Tensor:
        """``(batch, slots, labels)`` label scores for the arcs ``heads[b, i] -> i``."""
        b, n, _ = vectors.shape
        d = BIAFFINE_DIM
        L = len(self.labels)
        dep = self._augment(self._proj(vectors, "lab_dep", train, rng))
        head_all = self._augment(self._proj(vectors, "lab_head", train, rng))
        rows = np.broadcast_to(np.arange(b)[:, None], heads.shape)
        head = head_all[rows, heads]
        u = T.reshape(self.params[f"{self.prefix}.U_lab"], (d + 1, L * (d + 1)))
        left = T.reshape(T.matmul(T.reshape(dep, (b * n, d + 1)), u), (b * n, L, d + 1))
        right = T.broadcast_to(T.reshape(head, (b * n, 1, d + 1)), (b * n, L, d + 1))
        return T.reshape(T.tsum(T.mul(left, right), axis=-1), (b, n, L))

    def loss(self, vectors: Tensor, mask: np.ndarray, gold: Sequence[DependencyTree], train=False, rng=None) -> Tensor:
        b, n, _ = vectors.shape
        heads = np.zeros((b, n), dtype=np.int64)
        head_t = np.full((b, n), -100, dtype=np.int64)
        lab_t = np.full((b, n), -100, dtype=np.int64)
        for i, tree in enumerate(gold):
            k = len(tree)
            heads[i, 1: k + 1] = tree.heads
            head_t[i, 1: k + 1] = tree.heads
            lab_t[i, 1: k + 1] = [self.labels.index(lab) for lab in tree.labels]
        arcs = self.arc_scores(vectors, mask, train, rng)
        arc_loss = T.cross_entropy(T.reshape(arcs, (b * n, n)), head_t.reshape(-1))
        labs = self.label_scores(vectors, heads, train, rng)
        lab_loss = T.cross_entropy(T.reshape(labs, (b * n, len(self.labels))), lab_t.reshape(-1))
        return T.add(arc_loss, lab_loss)

    def decode(self, vectors: Tensor, mask: np.ndarray) -> list[tuple[list[int], list[str]]]:
        arcs = self.arc_scores(vectors, mask).data
        out_heads = np.zeros(mask.shape, dtype=np.int64)
        lengths = mask.sum(axis=1) - 1
        decoded = []
        for i, k in enumerate(lengths):
            k = int(k)
            heads = chu_liu_edmonds(arcs[i, : k + 1, : k + 1])
            out_heads[i, 1: k + 1] = heads
            decoded.append(heads)
        labs = self.label_scores(vectors, out_heads).data
        return [
            (heads, [self.labels.labels[j] for j in labs[i, 1: len(heads) + 1].argmax(axis=1)])
            for i, heads in enumerate(decoded)
        ]


# --- finetuned task models -------------------------------------------------

class FinetuneModel:
    """Encoder plus one head; every parameter is trainable."""

    task = ""

    def __init__(self, encoder: EncoderModel, vocab: Vocabulary):
        self.encoder = encoder
        self.vocab = vocab

    @property
    def dtype(self):
        return self.encoder.dtype

    @property
    def max_len(self) -> int:
        return self.encoder.config.max_positions

    def head_params(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def params(self) -> dict[str, Tensor]:
        return {**{f"encoder.{k}": v for k, v in self.encoder.params.items()}, **self.head_params()}

    def _run(self, seqs, train, rng):
        ids, mask = pad_batch(seqs, self.vocab.pad_id)
        return encode(self.encoder, ids, None, mask, train, rng)


class ClassifierModel(FinetuneModel):
    """Sentence classification from the pooled [CLS] vector."""

    task = "cls"

    def __init__(self, encoder, vocab, labels: LabelSet, seed: int = 0, dropout: float = FINETUNE_DROPOUT):
        super().__init__(encoder, vocab)
        self.head = LinearClassifier(encoder.config.hidden_size, labels, seed, encoder.dtype, dropout)

    @property
    def labels(self) -> LabelSet:
        return self.head.labels

    def head_params(self):
        return self.head.params

    def inputs(self, example) -> list[int]:
        return encode_text(self.vocab, example.text, self.max_len)

    def logits(self, examples, train=False, rng=None) -> Tensor:
        _, pooled = self._run([self.inputs(e) for e in examples], train, rng)
        return self.head.logits(pooled, train, rng)

    def loss(self, examples, train=False, rng=None) -> Tensor:
        _, pooled = self._run([self.inputs(e) for e in examples], train, rng)
        return self.head.loss(pooled, [e.label for e in examples], train, rng)

    def predict_proba(self, examples) -> np.ndarray:
        return T.softmax(self.logits(examples)).data

    def predict(self, examples) -> list[str]:
        return [self.labels.labels[i] for i in self.predict_proba(examples).argmax(axis=1)]


class RelationModel(ClassifierModel):
    """Relation classification: entity markers inserted, then [CLS] classification."""

    task = "rel"

    def __init__(self, encoder, vocab, labels: LabelSet, seed: int = 0, dropout: float = FINETUNE_DROPOUT):
        if E1 not in vocab:
            encoder, vocab = prepare_rel_vocab(encoder, vocab, seed)
        super().__init__(encoder, vocab, labels, seed, dropout)

    def inputs(self, example) -> list[int]:
        marked = mark_entities(example.tokens, example.e1, example.e2)
        return encode_words(self.vocab, marked, self.max_len, truncate=True).token_ids


class TaggerModel(FinetuneModel):
    task = "ner"

    def __init__(self, encoder, vocab, labels: LabelSet, seed: int = 0, dropout: float = FINETUNE_DROPOUT):
        super().__init__(encoder, vocab)
        self.head = CrfTagger(encoder.config.hidden_size, labels, seed, encoder.dtype, dropout)

    @property
    def labels(self) -> LabelSet:
        return self.head.labels

    def head_params(self):
        return self.head.params

    def _vectors(self, sentences, train, rng):
        encs = [encode_words(self.vocab, s.tokens, self.max_len) for s in sentences]
        seq, _ = self._run([e.token_ids for e in encs], train, rng)
        return gather_words(seq, encs)

    def loss(self, sentences, train=False, rng=None) -> Tensor:
        vecs, mask = self._vectors(sentences, train, rng)
        return self.head.loss(vecs, mask, [s.tags for s in sentences], train, rng)

    def predict(self, sentences) -> list[list[str]]:
        vecs, mask = self._vectors(sentences, False, None)
        return self.head.decode(vecs, mask)


class ParserModel(FinetuneModel):
    task = "dep"

    def __init__(self, encoder, vocab, labels: LabelSet, seed: int = 0, dropout: float = FINETUNE_DROPOUT):
        super().__init__(encoder, vocab)
        self.head = BiaffineScorer(encoder.config.hidden_size, labels, seed, encoder.dtype, dropout)

    @property
    def labels(self) -> LabelSet:
        return self.head.labels

    def head_params(self):
        return self.head.params

    def _vectors(self, trees, train, rng):
        encs = [encode_words(self.vocab, t.tokens, self.max_len) for t in trees]
        seq, _ = self._run([e.token_ids for e in encs], train, rng)
        return gather_words(seq, encs, with_root=True)

    def loss(self, trees, train=False, rng=None) -> Tensor:
        vecs, mask = self._vectors(trees, train, rng)
        return self.head.loss(vecs, mask, trees, train, rng)

    def predict(self, trees) -> list[DependencyTree]:
        vecs, mask = self._vectors(trees, False, None)
        return [DependencyTree(t.tokens, h, labs, t.is_punct)
                for t, (h, labs) in zip(trees, self.head.decode(vecs, mask))]


# --- single-input conveniences ---------------------------------------------

def classify_cls(model: ClassifierModel, text: str) -> dict[str, float]:
    """Label distribution for one text."""
    probs = model.predict_proba([ClsExample(text, model.labels.labels[0])])[0]
    return dict(zip(model.labels.labels, map(float, probs)))


def tag_sequence(model: TaggerModel, tokens: Sequence[str]) -> list[str]:
    if not tokens:
        raise HeadError("empty token sequence")
    return model.predict([TaggedSentence(tokens, ["O"] * len(tokens))])[0]


def parse_biaffine(model: ParserModel, tokens: Sequence[str], is_punct=None) -> DependencyTree:
    if not tokens:
        raise HeadError("empty token sequence")
    placeholder = DependencyTree(tokens, [0] * len(tokens), ["_"] * len(tokens), is_punct, validate=False)
    return model.predict([placeholder])[0]


def default_casing(task: str) -> Casing:
    """Cased vocabularies for entity and dependency tasks, uncased otherwise."""
    return Casing.CASED if task in ("ner", "dep") else Casing.UNCASED
