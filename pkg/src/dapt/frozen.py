"""Task models over fixed encoder vectors: a 2-layer BiLSTM feeding an MLP
classifier, a CRF tagger or the biaffine parser."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .datasets import ClsExample, DependencyTree, TaggedSentence
from .encoder import EncoderModel, encode
from .heads import (
    E1,
    BiaffineScorer,
    CrfTagger,
    HeadError,
    LabelSet,
    _dense,
    encode_words,
    linear,
    mark_entities,
    pad_batch,
    prepare_rel_vocab,
)
from .tensor import Tensor
from .vocab import Vocabulary, normalize, pre_split

FROZEN_DROPOUT = 0.5
LSTM_HIDDEN = 200
LSTM_LAYERS = 2
MLP_HIDDEN = 200


class FrozenEmbedder:
    """Final-layer encoder vectors with no gradient path back to the encoder.

    With ``cache="per_sentence"`` results are memoized on
    ``(encoder checksum, casing, words, with_root)``; ``encoder_calls`` counts
    actual encoder runs.
    """

    def __init__(self, encoder: EncoderModel, vocab: Vocabulary, cache: str = "per_sentence"):
        if cache not in ("none", "per_sentence"):
            raise ValueError(f"cache must be 'none' or 'per_sentence', got {cache!r}")
        self.encoder = encoder
        self.vocab = vocab
        self.cache_policy = cache
        self.checksum = T.checksum(encoder.params)
        self._cache: dict[tuple, np.ndarray] = {}
        self.encoder_calls = 0

    @property
    def hidden_size(self) -> int:
        return self.encoder.config.hidden_size

    def _key(self, words, with_root):
        return (self.checksum, self.vocab.casing.value, tuple(words), with_root)

    def embed_many(self, sentences: Sequence[Sequence[str]], with_root: bool = False) -> list[np.ndarray]:
        """One ``(len, hidden)`` array per sentence (``len + 1`` rows with the
        [CLS] vector first when ``with_root``)."""
        results: list[np.ndarray | None] = [None] * len(sentences)
        todo = []
        for i, words in enumerate(sentences):
            if not words:
                raise HeadError("cannot embed an empty sentence")
            hit = self._cache.get(self._key(words, with_root)) if self.cache_policy != "none" else None
            if hit is not None:
                results[i] = hit
            else:
                todo.append(i)
        if todo:
            max_len = self.encoder.config.max_positions
            encs = [encode_words(self.vocab, sentences[i], max_len) for i in todo]
            ids, mask = pad_batch([e.token_ids for e in encs], self.vocab.pad_id)
            self.encoder_calls += 1
            seq, _ = encode(self.encoder, ids, None, mask, train=False)
            data = seq.data
            for row, (i, e) in enumerate(zip(todo, encs)):
                cols = ([0] if with_root else []) + e.first_subword
                vec = data[row, cols].copy()
                vec.setflags(write=False)
                results[i] = vec
                if self.cache_policy != "none":
                    self._cache.setdefault(self._key(sentences[i], with_root), vec)
        return results  # type: ignore[return-value]

    def embed(self, words: Sequence[str], with_root: bool = False) -> np.ndarray:
        return self.embed_many([words], with_root)[0]


def embed_frozen(embedder: FrozenEmbedder, tokens: Sequence[str]) -> np.ndarray:
    return embedder.embed(tokens)


def stack_padded(arrays: Sequence[np.ndarray], dtype) -> tuple[Tensor, np.ndarray]:
    n = max(a.shape[0] for a in arrays)
    out = np.zeros((len(arrays), n, arrays[0].shape[1]), dtype=dtype)
    mask = np.zeros((len(arrays), n), dtype=bool)
    for i, a in enumerate(arrays):
        out[i, : len(a)] = a
        mask[i, : len(a)] = True
    return Tensor(out), mask


class BiLstmStack:
    """Stacked bidirectional LSTM over left-aligned padded batches.

    The backward direction runs on each sequence reversed within its own
    length, so padding never leaks into real positions.
    """

    def __init__(self, input_size: int, hidden: int = LSTM_HIDDEN, num_layers: int = LSTM_LAYERS,
                 seed: int = 0, dtype=np.float32, dropout: float = FROZEN_DROPOUT, prefix: str = "lstm"):
        self.hidden = hidden
        self.num_layers = num_layers
        self.dropout = dropout
        self.prefix = prefix
        rng = np.random.default_rng([seed, 21])
        self.params: dict[str, Tensor] = {}
        size = input_size
        for layer in range(num_layers):
            for direction in ("fw", "bw"):
                name = f"{prefix}.{layer}.{direction}"
                scale = 1.0 / np.sqrt(hidden)
                self.params[f"{name}.wx"] = Tensor(rng.uniform(-scale, scale, (size, 4 * hidden)).astype(dtype),
                                                   requires_grad=True)
                self.params[f"{name}.wh"] = Tensor(rng.uniform(-scale, scale, (hidden, 4 * hidden)).astype(dtype),
                                                   requires_grad=True)
                bias = np.zeros(4 * hidden, dtype=dtype)
                bias[hidden: 2 * hidden] = 1.0  # forget gate starts open
                self.params[f"{name}.b"] = Tensor(bias, requires_grad=True)
            size = 2 * hidden

    @property
    def output_size(self) -> int:
        return 2 * self.hidden

    def _direction(self, x: Tensor, mask: np.ndarray, name: str) -> Tensor:
        b, n, _ = x.shape
        hd = self.hidden
        p = self.params
        xw = T.add(T.matmul(x, p[f"{name}.wx"]), p[f"{name}.b"])
        h = Tensor(np.zeros((b, hd), dtype=x.dtype))
        c = Tensor(np.zeros((b, hd), dtype=x.dtype))
        outs = []
        for t in range(n):
            z = T.add(xw[:, t], T.matmul(h, p[f"{name}.wh"]))
            i = T.sigmoid(z[:, :hd])
            f = T.sigmoid(z[:, hd: 2 * hd])
            g = T.tanh(z[:, 2 * hd: 3 * hd])
            o = T.sigmoid(z[:, 3 * hd:])
            c_new = T.add(T.mul(f, c), T.mul(i, g))
            h_new = T.mul(o, T.tanh(c_new))
            keep = mask[:, t]
            if keep.all():
                h, c = h_new, c_new
            else:
                m = Tensor(np.broadcast_to(keep[:, None], (b, hd)).astype(x.dtype))
                inv = Tensor(1.0 - m.data)
                h = T.add(T.mul(h_new, m), T.mul(h, inv))
                c = T.add(T.mul(c_new, m), T.mul(c, inv))
            outs.append(h)
        return T.stack(outs, axis=1)

    @staticmethod
    def _reverse_index(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        b, n = mask.shape
        lengths = mask.sum(axis=1)
        cols = np.tile(np.arange(n), (b, 1))
        for i, k in enumerate(lengths):
            cols[i, :k] = np.arange(k)[::-1]
        return np.broadcast_to(np.arange(b)[:, None], (b, n)), cols

    def __call__(self, x: Tensor, mask: np.ndarray, train: bool = False, rng=None) -> Tensor:
        rows, rev = self._reverse_index(mask)
        for layer in range(self.num_layers):
            x = T.dropout(x, self.dropout, rng, train)
            fw = self._direction(x, mask, f"{self.prefix}.{layer}.fw")
            bw = self._direction(x[rows, rev], mask, f"{self.prefix}.{layer}.bw")[rows, rev]
            x = T.concat([fw, bw], axis=-1)
        return x


class FrozenModel:
    """Base for frozen-encoder task models: only BiLSTM and head parameters train."""

    task = ""

    def __init__(self, embedder: FrozenEmbedder, seed: int = 0, dropout: float = FROZEN_DROPOUT):
        self.embedder = embedder
        self.dtype = embedder.encoder.dtype
        self.lstm = BiLstmStack(embedder.hidden_size, seed=seed, dtype=self.dtype, dropout=dropout)
        self.dropout = dropout

    def head_params(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def params(self) -> dict[str, Tensor]:
        return {**self.lstm.params, **self.head_params()}

    def _features(self, word_lists, train, rng, with_root=False):
        vecs, mask = stack_padded(self.embedder.embed_many(word_lists, with_root), self.dtype)
        return self.lstm(vecs, mask, train, rng), mask


class FrozenClassifier(FrozenModel):
    """BiLSTM over frozen vectors; [first; last] outputs (800) -> MLP 200 -> labels."""

    task = "cls"

    def __init__(self, embedder, labels: LabelSet, seed: int = 0, dropout: float = FROZEN_DROPOUT):
        super().__init__(embedder, seed, dropout)
        self.labels = labels
        rng = np.random.default_rng([seed, 22])
        feat = 2 * self.lstm.output_size
        self.mlp = {**_dense(rng, "mlp.hidden", feat, MLP_HIDDEN, self.dtype),
                    **_dense(rng, "mlp.out", MLP_HIDDEN, len(labels), self.dtype)}

    def head_params(self):
        return self.mlp

    def words(self, example) -> list[str]:
        if not example.text or not example.text.strip():
            raise HeadError("empty text")
        return pre_split(normalize(example.text, self.embedder.vocab.casing))

    def features(self, examples, train=False, rng=None) -> Tensor:
        out, mask = self._features([self.words(e) for e in examples], train, rng)
        b = len(examples)
        last = mask.sum(axis=1) - 1
        rows = np.arange(b)
        return T.concat([out[rows, np.zeros(b, dtype=np.int64)], out[rows, last]], axis=-1)

    def logits(self, examples, train=False, rng=None) -> Tensor:
        h = T.relu(linear(self.features(examples, train, rng), self.mlp, "mlp.hidden"))
        h = T.dropout(h, self.dropout, rng, train)
        return linear(h, self.mlp, "mlp.out")

    def loss(self, examples, train=False, rng=None) -> Tensor:
        targets = np.array([self.labels.index(e.label) for e in examples])
        return T.cross_entropy(self.logits(examples, train, rng), targets)

    def predict_proba(self, examples) -> np.ndarray:
        return T.softmax(self.logits(examples)).data

    def predict(self, examples) -> list[str]:
        return [self.labels.labels[i] for i in self.predict_proba(examples).argmax(axis=1)]


class FrozenRelationClassifier(FrozenClassifier):
    task = "rel"

    def __init__(self, embedder, labels: LabelSet, seed: int = 0, dropout: float = FROZEN_DROPOUT):
        if E1 not in embedder.vocab:
            encoder, vocab = prepare_rel_vocab(embedder.encoder, embedder.vocab, seed)
            embedder = FrozenEmbedder(encoder, vocab, embedder.cache_policy)
        super().__init__(embedder, labels, seed, dropout)

    def words(self, example) -> list[str]:
        return mark_entities(example.tokens, example.e1, example.e2)


class FrozenTagger(FrozenModel):
    task = "ner"

    def __init__(self, embedder, labels: LabelSet, seed: int = 0, dropout: float = FROZEN_DROPOUT):
        super().__init__(embedder, seed, dropout)
        self.head = CrfTagger(self.lstm.output_size, labels, seed, self.dtype, dropout=0.0)

    @property
    def labels(self) -> LabelSet:
        return self.head.labels

    def head_params(self):
        return self.head.params

    def loss(self, sentences, train=False, rng=None) -> Tensor:
        out, mask = self._features([s.tokens for s in sentences], train, rng)
        return self.head.loss(out, mask, [s.tags for s in sentences], train, rng)

    def predict(self, sentences) -> list[list[str]]:
        out, mask = self._features([s.tokens for s in sentences], False, None)
        return self.head.decode(out, mask)


class FrozenParser(FrozenModel):
    """BiLSTM over [root; words] frozen vectors feeding the biaffine scorer."""

    task = "dep"

    def __init__(self, embedder, labels: LabelSet, seed: int = 0, dropout: float = FROZEN_DROPOUT):
        super().__init__(embedder, seed, dropout)
        self.head = BiaffineScorer(self.lstm.output_size, labels, seed, self.dtype, dropout=0.0)

    @property
    def labels(self) -> LabelSet:
        return self.head.labels

    def head_params(self):
        return self.head.params

    def loss(self, trees, train=False, rng=None) -> Tensor:
        out, mask = self._features([t.tokens for t in trees], train, rng, with_root=True)
        return self.head.loss(out, mask, trees, train, rng)

    def predict(self, trees) -> list[DependencyTree]:
        out, mask = self._features([t.tokens for t in trees], False, None, with_root=True)
        return [DependencyTree(t.tokens, h, labs, t.is_punct)
                for t, (h, labs) in zip(trees, self.head.decode(out, mask))]


def frozen_classify(model: FrozenClassifier, text: str) -> dict[str, float]:
    probs = model.predict_proba([ClsExample(text, model.labels.labels[0])])[0]
    return dict(zip(model.labels.labels, map(float, probs)))


def frozen_tag(model: FrozenTagger, tokens: Sequence[str]) -> list[str]:
    if not tokens:
        raise HeadError("empty token sequence")
    return model.predict([TaggedSentence(tokens, ["O"] * len(tokens))])[0]


def frozen_parse(model: FrozenParser, tokens: Sequence[str], is_punct=None) -> DependencyTree:
    if not tokens:
        raise HeadError("empty token sequence")
    placeholder = DependencyTree(tokens, [0] * len(tokens), ["_"] * len(tokens), is_punct, validate=False)
    return model.predict([placeholder])[0]
