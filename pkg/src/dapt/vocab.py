"""WordPiece vocabularies: training, tokenization, overlap and file I/O."""

from __future__ import annotations

import heapq
import json
import unicodedata
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import SentenceList

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = (PAD, UNK, CLS, SEP, MASK)
PREFIX = "##"
MAX_WORD_CHARS = 100


class Casing(str, Enum):
    CASED = "cased"
    UNCASED = "uncased"


class VocabError(ValueError):
    pass


def normalize(text: str, casing: Casing | str) -> str:
    """Collapse whitespace; for uncased text also lowercase and drop accents."""
    casing = Casing(casing)
    if casing is Casing.UNCASED:
        text = unicodedata.normalize("NFD", text.lower())
        text = "".join(ch for ch in text if unicodedata.category(ch) != "Mn")
    return " ".join(text.split())


def _is_punct(ch: str) -> bool:
    cp = ord(ch)
    # ASCII symbols count as punctuation too, as in the BERT basic tokenizer.
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(ch).startswith("P")


def pre_split(text: str) -> list[str]:
    """Whitespace split, then every punctuation character becomes its own word."""
    words = []
    for chunk in text.split():
        current = []
        for ch in chunk:
            if _is_punct(ch):
                if current:
                    words.append("".join(current))
                    current = []
                words.append(ch)
            else:
                current.append(ch)
        if current:
            words.append("".join(current))
    return words


@dataclass(frozen=True)
class Vocabulary:
    entries: tuple[str, ...]
    casing: Casing = Casing.UNCASED
    extra_specials: tuple[str, ...] = ()
    index: dict = field(init=False, repr=False, compare=False)
    specials: frozenset = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "casing", Casing(self.casing))
        if tuple(self.entries[:5]) != SPECIALS:
            raise VocabError(f"the first five entries must be {', '.join(SPECIALS)}")
        index = {}
        for i, tok in enumerate(self.entries):
            if not tok:
                raise VocabError(f"empty entry at id {i}")
            if tok in index:
                raise VocabError(f"duplicate entry {tok!r} at id {i}")
            index[tok] = i
        for tok in self.extra_specials:
            if tok not in index:
                raise VocabError(f"extra special {tok!r} is not in the vocabulary")
        object.__setattr__(self, "index", index)
        object.__setattr__(self, "specials", frozenset(SPECIALS) | frozenset(self.extra_specials))

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __getitem__(self, token: str) -> int:
        return self.index[token]

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(self.index[t] for t in self.specials)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    @property
    def cls_id(self) -> int:
        return 2

    @property
    def sep_id(self) -> int:
        return 3

    @property
    def mask_id(self) -> int:
        return 4

    def with_specials(self, tokens: Sequence[str]) -> Vocabulary:
        """Return a copy with ``tokens`` appended as atomic special tokens."""
        new = [t for t in tokens if t not in self.index]
        return Vocabulary(
            self.entries + tuple(new),
            self.casing,
            self.extra_specials + tuple(t for t in tokens if t not in self.extra_specials),
        )


@dataclass(frozen=True)
class Encoding:
    token_ids: list[int]
    tokens: list[str]
    # (first token index, number of subwords) per source word
    word_spans: list[tuple[int, int]]

    def __len__(self) -> int:
        return len(self.token_ids)


def wordpiece(word: str, vocab: Vocabulary) -> list[str] | None:
    """Greedy longest-match-first segmentation; ``None`` if no full cover exists."""
    if len(word) > MAX_WORD_CHARS:
        return None
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        match = None
        while end > start:
            piece = word[start:end] if start == 0 else PREFIX + word[start:end]
            if piece in vocab.index and piece not in vocab.specials:
                match = piece
                break
            end -= 1
        if match is None:
            return None
        pieces.append(match)
        start = end
    return pieces


def tokenize_words(vocab: Vocabulary, words: Sequence[str]) -> Encoding:
    """Segment already-split words. Extra specials (e.g. entity markers) stay atomic."""
    ids, toks, spans = [], [], []
    extra = set(vocab.extra_specials)
    for word in words:
        if word in extra:
            pieces = [word]
        else:
            pieces = wordpiece(word, vocab) or [UNK]
        spans.append((len(toks), len(pieces)))
        toks.extend(pieces)
        ids.extend(vocab.index[p] for p in pieces)
    return Encoding(ids, toks, spans)


def tokenize(vocab: Vocabulary, text: str) -> Encoding:
    return tokenize_words(vocab, pre_split(normalize(text, vocab.casing)))


def _words_from(corpus: Iterable[SentenceList | str], casing: Casing) -> Counter:
    counts: Counter = Counter()
    for item in corpus:
        sentences = item.sentences if isinstance(item, SentenceList) else [item]
        for sentence in sentences:
            counts.update(pre_split(normalize(sentence, casing)))
    return counts


def _merge_symbol(left: str, right: str) -> str:
    return left + (right[len(PREFIX):] if right.startswith(PREFIX) else right)


def alphabet_of(words: Iterable[str]) -> set[str]:
    units = set()
    for w in words:
        units.add(w[0])
        units.update(PREFIX + ch for ch in w[1:])
    return units


def train_vocab(
    corpus: Iterable[SentenceList | str],
    target_size: int,
    min_frequency: int = 1,
    casing: Casing | str = Casing.UNCASED,
) -> Vocabulary:
    """Build a WordPiece vocabulary by repeated most-frequent-pair merges.

    The alphabet holds every character in the form it occurs (word-initial or
    ``##``-continuation). Merges are taken in descending pair frequency; ties go
    to the lexicographically smallest merged string, then the smallest
    ``(left, right)`` pair. Words longer than ``MAX_WORD_CHARS`` are ignored
    since the tokenizer maps them to ``[UNK]`` anyway.
    """
    casing = Casing(casing)
    if min_frequency < 1:
        raise VocabError("min_frequency must be at least 1")
    counts = _words_from(corpus, casing)
    counts = Counter({w: c for w, c in counts.items() if len(w) <= MAX_WORD_CHARS and w not in SPECIALS})
    if not counts:
        raise VocabError("cannot train a vocabulary on an empty corpus")
    alphabet = sorted(alphabet_of(counts))
    minimum = len(SPECIALS) + len(alphabet)
    if target_size < minimum:
        raise VocabError(
            f"target size {target_size} is too small: the character alphabet needs "
            f"at least {minimum} entries ({len(alphabet)} characters + {len(SPECIALS)} specials)"
        )

    entries = list(SPECIALS) + alphabet
    present = set(entries)

    words = sorted(counts)
    freq = [counts[w] for w in words]
    symbols = [[w[0]] + [PREFIX + ch for ch in w[1:]] for w in words]
    pair_count: Counter = Counter()
    where: dict[tuple[str, str], set[int]] = defaultdict(set)
    for i, syms in enumerate(symbols):
        for pair in zip(syms, syms[1:]):
            pair_count[pair] += freq[i]
            where[pair].add(i)

    heap = [(-c, _merge_symbol(*p), p) for p, c in pair_count.items()]
    heapq.heapify(heap)

    while len(entries) < target_size and heap:
        neg, merged, pair = heapq.heappop(heap)
        current = pair_count.get(pair, 0)
        if current != -neg:
            continue
        if current < min_frequency:
            break
        if merged not in present:
            entries.append(merged)
            present.add(merged)
        left, right = pair
        touched: set[tuple[str, str]] = set()
        for i in sorted(where.pop(pair, ())):
            syms = symbols[i]
            for p in zip(syms, syms[1:]):
                pair_count[p] -= freq[i]
                where[p].discard(i)
                touched.add(p)
            out, j = [], 0
            while j < len(syms):
                if j + 1 < len(syms) and syms[j] == left and syms[j + 1] == right:
                    out.append(merged)
                    j += 2
                else:
                    out.append(syms[j])
                    j += 1
            symbols[i] = out
            for p in zip(out, out[1:]):
                pair_count[p] += freq[i]
                where[p].add(i)
                touched.add(p)
        for p in touched:
            c = pair_count.get(p, 0)
            if c <= 0:
                pair_count.pop(p, None)
                where.pop(p, None)
            elif p != pair:
                heapq.heappush(heap, (-c, _merge_symbol(*p), p))
        pair_count.pop(pair, None)
    return Vocabulary(tuple(entries), casing)


@dataclass(frozen=True)
class OverlapReport:
    size_a: int
    size_b: int
    shared: int
    overlap_fraction: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def vocab_overlap(a: Vocabulary, b: Vocabulary) -> OverlapReport:
    """Shared non-special entries as a fraction of ``a``'s non-special entries."""
    ea = set(a.entries) - a.specials - b.specials
    eb = set(b.entries) - a.specials - b.specials
    shared = len(ea & eb)
    return OverlapReport(len(ea), len(eb), shared, shared / len(ea) if ea else 0.0)


def save_vocab(vocab: Vocabulary, path) -> None:
    data = "".join(tok + "\n" for tok in vocab.entries)
    Path(path).write_bytes(data.encode("utf-8"))


def infer_casing(entries: Iterable[str]) -> Casing:
    for tok in entries:
        if tok not in SPECIALS and any(ch.isupper() for ch in tok):
            return Casing.CASED
    return Casing.UNCASED


def load_vocab(path, casing: Casing | str | None = None) -> Vocabulary:
    """Read a one-token-per-line file (line number = id).

    Casing is not stored in the file; when not given it is inferred as cased
    iff some non-special entry contains an uppercase letter.
    """
    raw = Path(path).read_bytes().decode("utf-8")
    lines = raw.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    seen: dict[str, int] = {}
    for lineno, tok in enumerate(lines, start=1):
        if tok.endswith("\r"):
            raise VocabError(f"{path}:{lineno}: CR line endings are not allowed")
        if not tok:
            raise VocabError(f"{path}:{lineno}: empty line")
        if tok in seen:
            raise VocabError(f"{path}:{lineno}: duplicate token {tok!r} (first seen on line {seen[tok]})")
        seen[tok] = lineno
    for i, special in enumerate(SPECIALS):
        if special not in seen:
            raise VocabError(f"{path}: missing special token {special}")
        if seen[special] != i + 1:
            raise VocabError(f"{path}:{seen[special]}: {special} must be on line {i + 1}")
    return Vocabulary(tuple(lines), Casing(casing) if casing else infer_casing(lines))
