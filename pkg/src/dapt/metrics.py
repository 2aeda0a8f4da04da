"""Evaluation metrics: span/token/sentence F1, attachment scores, bootstrap CIs."""

from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from .datasets import DependencyTree

log = logging.getLogger(__name__)


class MetricsError(ValueError):
    pass


class Span(NamedTuple):
    start: int
    end: int  # inclusive
    type: str


@dataclass
class MetricResult:
    name: str
    value: float
    per_class: dict[str, tuple[float, float, float, int]] = field(default_factory=dict)
    ci_low: float | None = None
    ci_high: float | None = None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "value": self.value,
            "per_class": {k: list(v) for k, v in self.per_class.items()},
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
        }

    def write_per_class_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "precision", "recall", "f1", "support"])
            for cls, (p, r, f, s) in sorted(self.per_class.items()):
                w.writerow([cls, p, r, f, s])


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Precision, recall, F1 with 0/0 read as 0."""
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


# --- spans -----------------------------------------------------------------

def _split_tag(tag: str) -> tuple[str, str | None]:
    if tag == "O":
        return "O", None
    if len(tag) > 2 and tag[:2] in ("B-", "I-"):
        return tag[0], tag[2:]
    raise MetricsError(f"unknown tag {tag!r}; expected O, B-X or I-X")


def extract_spans(tags: Sequence[str]) -> tuple[set[Span], bool]:
    """Spans from a BIO sequence plus whether an ill-formed I-X had to be repaired.

    An I-X that does not continue an X span opens a new span.
    """
    spans: set[Span] = set()
    repaired = False
    start, typ = None, None
    for i, tag in enumerate(tags):
        prefix, t = _split_tag(tag)
        if prefix == "I" and typ == t:
            continue
        if start is not None:
            spans.add(Span(start, i - 1, typ))
            start, typ = None, None
        if prefix == "O":
            continue
        if prefix == "I":
            repaired = True
        start, typ = i, t
    if start is not None:
        spans.add(Span(start, len(tags) - 1, typ))
    return spans, repaired


def spans_from_bio(tags: Sequence[str]) -> set[Span]:
    spans, repaired = extract_spans(tags)
    if repaired:
        log.warning("repaired ill-formed BIO sequence %s", list(tags))
    return spans


def span_f1_macro(gold: Sequence[Iterable[Span]], pred: Sequence[Iterable[Span]]) -> MetricResult:
    """Exact-match span F1 per type, averaged over the types present in gold."""
    if len(gold) != len(pred):
        raise MetricsError(f"{len(gold)} gold sentences but {len(pred)} predicted")
    tp, fp, fn = Counter(), Counter(), Counter()
    for g, p in zip(gold, pred):
        g, p = set(g), set(p)
        for s in g & p:
            tp[s.type] += 1
        for s in p - g:
            fp[s.type] += 1
        for s in g - p:
            fn[s.type] += 1
    gold_types = {t for t in tp} | {t for t in fn}
    per_class = {}
    for t in sorted(gold_types | set(fp)):
        per_class[t] = (*prf(tp[t], fp[t], fn[t]), tp[t] + fn[t])
    if not gold_types:
        value = 1.0 if not fp else 0.0
    else:
        value = float(np.mean([per_class[t][2] for t in sorted(gold_types)]))
    return MetricResult("span_f1_macro", value, per_class)


def span_f1_from_tags(gold_tags: Sequence[Sequence[str]], pred_tags: Sequence[Sequence[str]]) -> MetricResult:
    return span_f1_macro([spans_from_bio(t) for t in gold_tags], [spans_from_bio(t) for t in pred_tags])


def _strip(tag: str) -> str:
    return tag[2:] if tag[:2] in ("B-", "I-") else tag


def token_f1_macro(gold_tags: Sequence[Sequence[str]], pred_tags: Sequence[Sequence[str]]) -> MetricResult:
    """Token-level F1 per non-O class (B-/I- prefixes dropped), averaged over gold classes.

    Accepts either a flat tag list or a list of per-sentence tag lists.
    """
    if gold_tags and isinstance(gold_tags[0], str):
        gold_tags, pred_tags = [gold_tags], [pred_tags]
    if len(gold_tags) != len(pred_tags):
        raise MetricsError(f"{len(gold_tags)} gold sentences but {len(pred_tags)} predicted")
    tp, fp, fn = Counter(), Counter(), Counter()
    for i, (g, p) in enumerate(zip(gold_tags, pred_tags)):
        if len(g) != len(p):
            raise MetricsError(f"sentence {i}: {len(g)} gold tags but {len(p)} predicted")
        for gt, pt in zip(g, p):
            gt, pt = _strip(gt), _strip(pt)
            if gt == pt:
                if gt != "O":
                    tp[gt] += 1
                continue
            if pt != "O":
                fp[pt] += 1
            if gt != "O":
                fn[gt] += 1
    gold_classes = set(tp) | set(fn)
    per_class = {c: (*prf(tp[c], fp[c], fn[c]), tp[c] + fn[c]) for c in sorted(gold_classes | set(fp))}
    if not gold_classes:
        value = 1.0 if not fp else 0.0
    else:
        value = float(np.mean([per_class[c][2] for c in sorted(gold_classes)]))
    return MetricResult("token_f1_macro", value, per_class)


def sentence_f1(
    gold_labels: Sequence[str],
    pred_labels: Sequence[str],
    mode: str = "macro",
    labels: Sequence[str] | None = None,
) -> MetricResult:
    """Single-label classification F1.

    ``macro`` averages per-class F1 over ``labels`` (default: every label seen
    in gold or predictions). ``micro`` pools counts, which equals accuracy.
    """
    if len(gold_labels) != len(pred_labels):
        raise MetricsError(f"{len(gold_labels)} gold labels but {len(pred_labels)} predicted")
    if mode not in ("macro", "micro"):
        raise MetricsError(f"mode must be 'macro' or 'micro', got {mode!r}")
    if labels is not None:
        declared = set(labels)
        for x in list(gold_labels) + list(pred_labels):
            if x not in declared:
                raise MetricsError(f"label {x!r} is not in the declared label set")
        classes = list(labels)
    else:
        classes = sorted(set(gold_labels) | set(pred_labels))
    tp, fp, fn = Counter(), Counter(), Counter()
    for g, p in zip(gold_labels, pred_labels):
        if g == p:
            tp[g] += 1
        else:
            fp[p] += 1
            fn[g] += 1
    per_class = {c: (*prf(tp[c], fp[c], fn[c]), tp[c] + fn[c]) for c in classes}
    if mode == "micro":
        value = prf(sum(tp.values()), sum(fp.values()), sum(fn.values()))[2]
    else:
        value = float(np.mean([per_class[c][2] for c in classes])) if classes else 0.0
    return MetricResult(f"sentence_f1_{mode}", value, per_class)


def accuracy(gold_labels: Sequence, pred_labels: Sequence) -> float:
    if len(gold_labels) != len(pred_labels):
        raise MetricsError("length mismatch")
    if not gold_labels:
        return 0.0
    return sum(g == p for g, p in zip(gold_labels, pred_labels)) / len(gold_labels)


# --- dependencies ----------------------------------------------------------

def attachment_counts(gold: Sequence[DependencyTree], pred: Sequence[DependencyTree]) -> tuple[int, int, int]:
    """(scored tokens, correct heads, correct heads and labels); punctuation excluded."""
    if len(gold) != len(pred):
        raise MetricsError(f"{len(gold)} gold trees but {len(pred)} predicted")
    total = heads_ok = both_ok = 0
    for i, (g, p) in enumerate(zip(gold, pred)):
        if len(g) != len(p) or (p.tokens and g.tokens != p.tokens):
            raise MetricsError(f"sentence {i}: gold and predicted tokens are not aligned")
        for j in range(len(g)):
            if g.is_punct[j]:
                continue
            total += 1
            if g.heads[j] == p.heads[j]:
                heads_ok += 1
                if g.labels[j] == p.labels[j]:
                    both_ok += 1
    return total, heads_ok, both_ok


def attachment_scores(gold: Sequence[DependencyTree], pred: Sequence[DependencyTree]) -> dict[str, float]:
    total, heads_ok, both_ok = attachment_counts(gold, pred)
    if total == 0:
        return {"uas": 0.0, "las": 0.0}
    return {"uas": heads_ok / total, "las": both_ok / total}


# --- bootstrap -------------------------------------------------------------

def _value(x) -> float:
    return float(getattr(x, "value", x))


def bootstrap_ci(
    metric_fn: Callable[[Sequence, Sequence], float | MetricResult],
    gold: Sequence,
    pred: Sequence,
    resamples: int = 1000,
    level: float = 0.95,
    seed: int = 0,
) -> tuple[float, float]:
    """Percentile interval from resampling evaluation units with replacement."""
    n = len(gold)
    if n < 2:
        raise MetricsError("bootstrap needs at least 2 evaluation units")
    if len(pred) != n:
        raise MetricsError("gold and predictions differ in length")
    rng = np.random.default_rng(seed)
    values = np.empty(resamples)
    for r in range(resamples):
        idx = rng.integers(0, n, size=n)
        values[r] = _value(metric_fn([gold[i] for i in idx], [pred[i] for i in idx]))
    alpha = (1.0 - level) / 2.0
    low, high = np.percentile(values, [100 * alpha, 100 * (1 - alpha)])
    return float(low), float(high)


def with_ci(
    metric_fn: Callable[[Sequence, Sequence], float | MetricResult],
    gold: Sequence,
    pred: Sequence,
    resamples: int = 1000,
    seed: int = 0,
) -> MetricResult:
    """Point estimate plus bootstrap interval, widened if needed to contain the estimate."""
    point = metric_fn(gold, pred)
    result = point if isinstance(point, MetricResult) else MetricResult(getattr(metric_fn, "__name__", "metric"), float(point))
    if len(gold) >= 2:
        low, high = bootstrap_ci(metric_fn, gold, pred, resamples=resamples, seed=seed)
        result.ci_low = min(low, result.value)
        result.ci_high = max(high, result.value)
    return result


def uas_fn(gold, pred) -> float:
    return attachment_scores(gold, pred)["uas"]


def las_fn(gold, pred) -> float:
    return attachment_scores(gold, pred)["las"]
