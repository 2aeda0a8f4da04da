"""Readers and writers for the downstream task file formats.

* Tagging (NER/PICO): ``token<TAB>tag`` per line, blank line between sentences.
  IOBES and IOB1 inputs are converted to BIO on read.
* Dependencies: ``index<TAB>form<TAB>head<TAB>label<TAB>is_punct`` (0/1).
* Classification: JSONL ``{"text", "label"}``.
* Relations: JSONL ``{"tokens", "e1": [start, end], "e2": [start, end], "label"}``
  with end-inclusive word indices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class TaggedSentence:
    tokens: tuple[str, ...]
    tags: tuple[str, ...]

    def __init__(self, tokens: Sequence[str], tags: Sequence[str]):
        if len(tokens) != len(tags):
            raise DatasetError(f"{len(tokens)} tokens but {len(tags)} tags")
        object.__setattr__(self, "tokens", tuple(tokens))
        object.__setattr__(self, "tags", tuple(tags))

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class ClsExample:
    text: str
    label: str


@dataclass(frozen=True)
class RelExample:
    tokens: tuple[str, ...]
    e1: tuple[int, int]
    e2: tuple[int, int]
    label: str

    def __init__(self, tokens: Sequence[str], e1: Sequence[int], e2: Sequence[int], label: str):
        object.__setattr__(self, "tokens", tuple(tokens))
        object.__setattr__(self, "e1", (int(e1[0]), int(e1[1])))
        object.__setattr__(self, "e2", (int(e2[0]), int(e2[1])))
        object.__setattr__(self, "label", label)


def tree_problem(heads: Sequence[int]) -> str | None:
    """Describe why ``heads`` is not a single-rooted spanning tree, or None if it is."""
    n = len(heads)
    if n == 0:
        return "empty sentence"
    bad = [h for h in heads if not 0 <= h <= n]
    if bad:
        return f"head index {bad[0]} out of range"
    roots = sum(1 for h in heads if h == 0)
    if roots != 1:
        return f"{roots} tokens attached to root, expected exactly 1"
    full = [0, *heads]
    for start in range(1, n + 1):
        node, steps = start, 0
        while node != 0:
            node = full[node]
            steps += 1
            if steps > n:
                return f"token {start} is on a cycle"
    return None


@dataclass(frozen=True)
class DependencyTree:
    """Heads are 1-based token indices with 0 for the virtual root."""

    tokens: tuple[str, ...]
    heads: tuple[int, ...]
    labels: tuple[str, ...]
    is_punct: tuple[bool, ...] = field(default=())

    def __init__(self, tokens, heads, labels, is_punct=None, validate: bool = True):
        n = len(tokens)
        is_punct = [False] * n if is_punct is None else list(is_punct)
        if not (len(heads) == len(labels) == len(is_punct) == n):
            raise DatasetError("tokens, heads, labels and is_punct must have equal length")
        object.__setattr__(self, "tokens", tuple(tokens))
        object.__setattr__(self, "heads", tuple(int(h) for h in heads))
        object.__setattr__(self, "labels", tuple(labels))
        object.__setattr__(self, "is_punct", tuple(bool(p) for p in is_punct))
        if validate:
            problem = tree_problem(self.heads)
            if problem:
                raise DatasetError(f"invalid dependency tree: {problem}")

    def __len__(self) -> int:
        return len(self.tokens)


def tree_from_dict(d: dict) -> DependencyTree:
    return DependencyTree(d["tokens"], d["heads"], d["labels"], d.get("is_punct"))


# --- tag schemes -----------------------------------------------------------

def detect_scheme(tag_sequences: Iterable[Sequence[str]]) -> str:
    """``"iobes"`` if any S-/E- tag appears, else ``"bio"``."""
    for tags in tag_sequences:
        for t in tags:
            if t[:2] in ("S-", "E-"):
                return "iobes"
    return "bio"


def iobes_to_bio(tags: Sequence[str]) -> list[str]:
    out = []
    for t in tags:
        prefix, typ = t[:2], t[2:]
        if prefix == "S-":
            out.append("B-" + typ)
        elif prefix == "E-":
            out.append("I-" + typ)
        else:
            out.append(t)
    return out


def bio_to_iobes(tags: Sequence[str]) -> list[str]:
    out = []
    for i, t in enumerate(tags):
        nxt = tags[i + 1] if i + 1 < len(tags) else "O"
        continues = nxt == "I-" + t[2:]
        if t.startswith("B-"):
            out.append(t if continues else "S-" + t[2:])
        elif t.startswith("I-"):
            out.append(t if continues else "E-" + t[2:])
        else:
            out.append(t)
    return out


# --- CoNLL tagging ---------------------------------------------------------

def read_conll(path) -> list[TaggedSentence]:
    raw: list[tuple[list[str], list[str]]] = []
    tokens: list[str] = []
    tags: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                if tokens:
                    raw.append((tokens, tags))
                    tokens, tags = [], []
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise DatasetError(f"{path}:{lineno}: expected 'token<TAB>tag', got {line!r}")
            tokens.append(parts[0])
            tags.append(parts[1])
    if tokens:
        raw.append((tokens, tags))
    if detect_scheme(t for _, t in raw) == "iobes":
        raw = [(tok, iobes_to_bio(tg)) for tok, tg in raw]
    return [TaggedSentence(tok, tg) for tok, tg in raw]


def write_conll(path, sentences: Iterable[TaggedSentence]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in sentences:
            for tok, tag in zip(s.tokens, s.tags):
                fh.write(f"{tok}\t{tag}\n")
            fh.write("\n")


# --- dependency trees ------------------------------------------------------

def read_dep(path, validate: bool = True) -> list[DependencyTree]:
    trees: list[DependencyTree] = []
    rows: list[tuple[str, int, str, bool]] = []
    start_line = 1

    def flush():
        if rows:
            try:
                trees.append(DependencyTree([r[0] for r in rows], [r[1] for r in rows],
                                            [r[2] for r in rows], [r[3] for r in rows], validate=validate))
            except DatasetError as exc:
                raise DatasetError(f"{path}: sentence starting at line {start_line}: {exc}") from None
            rows.clear()

    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                flush()
                continue
            if not rows:
                start_line = lineno
            parts = line.split("\t")
            if len(parts) != 5:
                raise DatasetError(f"{path}:{lineno}: expected 5 tab-separated columns, got {len(parts)}")
            try:
                index, head = int(parts[0]), int(parts[2])
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: index and head must be integers") from None
            if index != len(rows) + 1:
                raise DatasetError(f"{path}:{lineno}: expected token index {len(rows) + 1}, got {index}")
            if parts[4] not in ("0", "1"):
                raise DatasetError(f"{path}:{lineno}: is_punct must be 0 or 1")
            rows.append((parts[1], head, parts[3], parts[4] == "1"))
    flush()
    return trees


def write_dep(path, trees: Iterable[DependencyTree]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in trees:
            for i, (tok, h, lab, p) in enumerate(zip(t.tokens, t.heads, t.labels, t.is_punct), 1):
                fh.write(f"{i}\t{tok}\t{h}\t{lab}\t{int(p)}\n")
            fh.write("\n")


# --- JSONL classification / relations --------------------------------------

def _jsonl(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DatasetError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def read_cls(path) -> list[ClsExample]:
    out = []
    for lineno, obj in _jsonl(path):
        if not isinstance(obj.get("text"), str) or "label" not in obj:
            raise DatasetError(f"{path}:{lineno}: need string 'text' and 'label'")
        out.append(ClsExample(obj["text"], str(obj["label"])))
    return out


def write_cls(path, examples: Iterable[ClsExample]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in examples:
            fh.write(json.dumps({"text": e.text, "label": e.label}) + "\n")


def read_rel(path) -> list[RelExample]:
    out = []
    for lineno, obj in _jsonl(path):
        try:
            ex = RelExample(obj["tokens"], obj["e1"], obj["e2"], str(obj["label"]))
        except (KeyError, TypeError, IndexError, ValueError):
            raise DatasetError(f"{path}:{lineno}: need 'tokens', 'e1', 'e2' and 'label'") from None
        out.append(ex)
    return out


def write_rel(path, examples: Iterable[RelExample]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in examples:
            fh.write(json.dumps({"tokens": list(e.tokens), "e1": list(e.e1), "e2": list(e.e2),
                                 "label": e.label}) + "\n")


TASK_FORMATS = {"ner": "conll", "pico": "conll", "dep": "dep", "cls": "cls", "rel": "rel"}


def read_task(task: str, path):
    """Load a file in the format used by ``task``."""
    fmt = TASK_FORMATS.get(task)
    if fmt is None:
        raise DatasetError(f"unknown task {task!r}; expected one of {sorted(TASK_FORMATS)}")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing {task} file: {path}")
    return {"conll": read_conll, "dep": read_dep, "cls": read_cls, "rel": read_rel}[fmt](path)
