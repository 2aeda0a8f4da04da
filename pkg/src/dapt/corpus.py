"""Document ingestion, rule-based sentence splitting and corpus statistics."""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator


class Domain(str, Enum):
    BIOMEDICAL = "biomedical"
    COMPUTER_SCIENCE = "computer_science"
    OTHER = "other"


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Document:
    id: str
    title: str
    body: str
    domain_tag: Domain = Domain.OTHER

    def __post_init__(self):
        if not self.id:
            raise CorpusError("document id must be non-empty")
        if not self.body and not self.title:
            raise CorpusError(f"document {self.id!r} has neither title nor text")

    @property
    def text(self) -> str:
        """Title and body joined as one block of running text."""
        if self.title and self.body:
            return f"{self.title}\n{self.body}"
        return self.title or self.body


@dataclass(frozen=True)
class SentenceList:
    document_id: str
    sentences: tuple[str, ...]

    def __post_init__(self):
        for s in self.sentences:
            if not s.strip():
                raise CorpusError(f"empty sentence in document {self.document_id!r}")


def ingest_jsonl(path) -> Iterator[Document]:
    """Yield one :class:`Document` per line of a JSONL file, in file order.

    Keys: ``id``, ``title``, ``text`` and optionally ``domain``. Blank lines are
    skipped; anything else that fails to parse raises with its line number.
    """
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise CorpusError(f"{path}:{lineno}: expected a JSON object")
            doc_id = obj.get("id")
            if not isinstance(doc_id, str) or not doc_id:
                raise CorpusError(f"{path}:{lineno}: missing or empty 'id'")
            title, text = obj.get("title", ""), obj.get("text", "")
            if not isinstance(title, str) or not isinstance(text, str):
                raise CorpusError(f"{path}:{lineno}: 'title' and 'text' must be strings")
            if not title and not text:
                raise CorpusError(f"{path}:{lineno}: document {doc_id!r} has neither title nor text")
            try:
                domain = Domain(obj.get("domain", "other"))
            except ValueError:
                raise CorpusError(f"{path}:{lineno}: unknown domain {obj.get('domain')!r}") from None
            if doc_id in seen:
                raise CorpusError(f"{path}:{lineno}: duplicate document id {doc_id!r}")
            seen.add(doc_id)
            yield Document(doc_id, title, text, domain)


# Lower-cased tokens that end with a period but do not end a sentence.
ABBREVIATIONS = frozenset(
    """
    al. e.g. i.e. etc. fig. figs. eq. eqs. ref. refs. sec. tab. vs. cf. approx.
    dr. mr. mrs. ms. prof. no. vol. pp. ch. resp. ca. viz. incl. et. st. jr. sr.
    """.split()
)

_BOUNDARY = re.compile(r"[.!?]+[\"')\]]*(\s+)")


def _protected(text: str, stop: int) -> bool:
    """True when the period ending at ``stop`` belongs to an abbreviation or initial."""
    if text[stop - 1] != ".":
        return False
    start = stop - 1
    while start > 0 and not text[start - 1].isspace():
        start -= 1
    word = text[start:stop].lower().lstrip("([\"'")
    if word in ABBREVIATIONS:
        return True
    # single-letter initials such as "J." in "J. Smith"
    return len(word) == 2 and word[0].isalpha()


def split_sentences(text: str) -> list[str]:
    """Split running text into sentences with a fixed rule set.

    A boundary is a run of ``.``, ``!`` or ``?`` (optionally followed by closing
    quotes or brackets), then whitespace, then an uppercase letter or a digit.
    Periods closing a known abbreviation or a single-letter initial never split.
    """
    sentences = []
    start = 0
    for m in _BOUNDARY.finditer(text):
        nxt = m.end()
        if nxt >= len(text):
            continue
        follower = text[nxt]
        if not (follower.isupper() or follower.isdigit()):
            continue
        term_end = m.start(1)
        punct_end = m.start() + len(m.group(0).rstrip().rstrip("\"')]"))
        if _protected(text, punct_end):
            continue
        piece = text[start:term_end].strip()
        if piece:
            sentences.append(piece)
        start = nxt
    tail = text[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences


def split_document(doc: Document) -> SentenceList:
    sentences: list[str] = []
    for block in doc.text.split("\n"):
        sentences.extend(split_sentences(block))
    return SentenceList(doc.id, tuple(sentences))


@dataclass(frozen=True)
class CorpusStats:
    document_count: int = 0
    sentence_count: int = 0
    token_count: int = 0
    mean_sentences_per_doc: float = field(init=False)
    mean_tokens_per_doc: float = field(init=False)

    def __post_init__(self):
        n = self.document_count
        object.__setattr__(self, "mean_sentences_per_doc", self.sentence_count / n if n else 0.0)
        object.__setattr__(self, "mean_tokens_per_doc", self.token_count / n if n else 0.0)

    def merge(self, other: CorpusStats) -> CorpusStats:
        return CorpusStats(
            self.document_count + other.document_count,
            self.sentence_count + other.sentence_count,
            self.token_count + other.token_count,
        )

    __add__ = merge

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def _as_sentence_lists(docs: Iterable[Document | SentenceList]) -> Iterator[SentenceList]:
    for d in docs:
        yield d if isinstance(d, SentenceList) else split_document(d)


def corpus_stats(docs: Iterable[Document | SentenceList]) -> CorpusStats:
    """Single-pass counts; tokens are whitespace-delimited within split sentences."""
    n_docs = n_sents = n_tokens = 0
    for sl in _as_sentence_lists(docs):
        n_docs += 1
        n_sents += len(sl.sentences)
        n_tokens += sum(len(s.split()) for s in sl.sentences)
    return CorpusStats(n_docs, n_sents, n_tokens)


def read_sentence_lists(path) -> Iterator[SentenceList]:
    return _as_sentence_lists(ingest_jsonl(Path(path)))
