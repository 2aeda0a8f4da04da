"""Small deterministic corpora and task sets for smoke runs and tests."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import datasets
from .corpus import SentenceList

_SUBJECTS = ["the protein", "the enzyme", "our model", "the parser", "the cell line", "the network"]
_VERBS = {
    "the protein": "binds",
    "the enzyme": "cleaves",
    "our model": "predicts",
    "the parser": "labels",
    "the cell line": "expresses",
    "the network": "encodes",
}
_OBJECTS = ["the receptor", "each token", "the substrate", "a dependency tree", "the gene", "the signal"]
_ADVERBS = ["rapidly", "reliably", "in vitro", "at scale", "under stress", "with high accuracy"]


def toy_sentence(rng: np.random.Generator) -> str:
    subj = _SUBJECTS[rng.integers(len(_SUBJECTS))]
    obj = _OBJECTS[rng.integers(len(_OBJECTS))]
    adv = _ADVERBS[rng.integers(len(_ADVERBS))]
    return f"{subj.capitalize()} {_VERBS[subj]} {obj} {adv} and the result is stable."


def toy_corpus(n_docs: int = 5, sentences_per_doc: int = 10, seed: int = 0) -> list[SentenceList]:
    """Documents of templated sentences; the verb is fixed by the subject."""
    rng = np.random.default_rng(seed)
    return [
        SentenceList(f"doc{d}", tuple(toy_sentence(rng) for _ in range(sentences_per_doc)))
        for d in range(n_docs)
    ]


def write_corpus_jsonl(docs: list[SentenceList], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sl in docs:
            fh.write(json.dumps({"id": sl.document_id, "title": "", "text": " ".join(sl.sentences)}) + "\n")


_POS_WORDS = ["binds", "activates", "improves", "supports", "confirms"]
_NEG_WORDS = ["blocks", "inhibits", "degrades", "refutes", "weakens"]
_FILLER = ["the", "protein", "model", "result", "method", "gene", "data", "signal"]


def toy_cls_examples(n: int, seed: int = 0, noise: float = 0.0, filler: tuple[int, int] = (3, 7)) -> list[dict]:
    """Two classes keyed by a single cue word among ``filler`` (low, high-exclusive)
    random words; ``noise`` flips that fraction of labels."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        label = int(rng.integers(2))
        cue = (_POS_WORDS if label else _NEG_WORDS)[rng.integers(5)]
        words = [_FILLER[i] for i in rng.integers(len(_FILLER), size=int(rng.integers(*filler)))]
        words.insert(int(rng.integers(len(words) + 1)), cue)
        if rng.random() < noise:
            label = 1 - label
        out.append({"text": " ".join(words), "label": "pos" if label else "neg"})
    return out


_ENTITY_WORDS = {"CHEM": ["aspirin", "caffeine", "insulin"], "DIS": ["asthma", "fever", "cancer"]}


def toy_ner_sentences(n: int, seed: int = 0) -> list[tuple[list[str], list[str]]]:
    """Sentences whose entities come from fixed word lists (BIO tags)."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        tokens, tags = [], []
        for _ in range(int(rng.integers(3, 7))):
            r = rng.random()
            if r < 0.3:
                typ = "CHEM" if rng.random() < 0.5 else "DIS"
                words = _ENTITY_WORDS[typ]
                span = int(rng.integers(1, 3))
                for j in range(span):
                    tokens.append(words[rng.integers(len(words))])
                    tags.append(("B-" if j == 0 else "I-") + typ)
            else:
                tokens.append(_FILLER[rng.integers(len(_FILLER))])
                tags.append("O")
        out.append((tokens, tags))
    return out


def toy_rel_examples(n: int, seed: int = 0) -> list[dict]:
    """Relation label is decided by the word between the two entities."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        label = int(rng.integers(2))
        e1 = _ENTITY_WORDS["CHEM"][rng.integers(3)]
        e2 = _ENTITY_WORDS["DIS"][rng.integers(3)]
        cue = "treats" if label else "causes"
        tokens = ["we", "find", e1, cue, e2, "here"]
        out.append({"tokens": tokens, "e1": [2, 2], "e2": [4, 4], "label": "treats" if label else "causes"})
    return out


def toy_dep_sentences(n: int, seed: int = 0) -> list[dict]:
    """Right-branching chains: every word heads the next, the first hangs off root."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        k = int(rng.integers(2, 6))
        words = [_FILLER[i] for i in rng.integers(len(_FILLER), size=k)] + ["."]
        heads = [0] + list(range(1, k)) + [1]
        labels = ["root"] + ["dep"] * (k - 1) + ["punct"]
        punct = [False] * k + [True]
        out.append({"tokens": words, "heads": heads, "labels": labels, "is_punct": punct})
    return out


def write_task_files(task: str, directory, sizes=(64, 32, 32), seed: int = 0, noise: float = 0.0) -> dict[str, Path]:
    """Write train/dev/test files for a toy task in the on-disk formats."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, n, offset in zip(("train", "dev", "test"), sizes, (0, 1, 2)):
        s = seed * 10 + offset
        if task == "cls":
            path = directory / f"{split}.jsonl"
            datasets.write_cls(path, [datasets.ClsExample(e["text"], e["label"])
                                      for e in toy_cls_examples(n, s, noise)])
        elif task == "rel":
            path = directory / f"{split}.jsonl"
            datasets.write_rel(path, [datasets.RelExample(e["tokens"], tuple(e["e1"]), tuple(e["e2"]), e["label"])
                                      for e in toy_rel_examples(n, s)])
        elif task in ("ner", "pico"):
            path = directory / f"{split}.conll"
            datasets.write_conll(path, [datasets.TaggedSentence(t, g) for t, g in toy_ner_sentences(n, s)])
        elif task == "dep":
            path = directory / f"{split}.dep"
            datasets.write_dep(path, [datasets.tree_from_dict(d) for d in toy_dep_sentences(n, s)])
        else:
            raise ValueError(f"unknown task {task!r}")
        paths[split] = path
    return paths
