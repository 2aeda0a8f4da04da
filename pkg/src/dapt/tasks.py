"""Training and evaluation loops that connect task models, the optimizer and metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import metrics as M
from . import tensor as T
from .encoder import EncoderModel, copy_model
from .frozen import (
    FrozenClassifier,
    FrozenEmbedder,
    FrozenParser,
    FrozenRelationClassifier,
    FrozenTagger,
)
from .heads import (
    ClassifierModel,
    LabelSet,
    ParserModel,
    RelationModel,
    TaggerModel,
    default_casing,
)
from .trainer import (
    Adam,
    AdamConfig,
    EarlyStopConfig,
    GridSpec,
    RunReport,
    TriangularSchedule,
    early_stop_loop,
    lr_at,
    run_grid,
)
from .vocab import Vocabulary

log = logging.getLogger(__name__)

TASKS = ("ner", "pico", "cls", "rel", "dep")
FROZEN_LR = 1e-3
FROZEN_BATCH = 32
FROZEN_PATIENCE = 10
PREDICT_BATCH = 64


def check_task(task: str) -> None:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {', '.join(TASKS)}")


def label_set_for(task: str, data: Sequence) -> LabelSet:
    if task in ("ner", "pico"):
        return LabelSet.from_tags([s.tags for s in data])
    if task == "dep":
        return LabelSet.from_labels(lab for t in data for lab in t.labels)
    return LabelSet.from_labels(e.label for e in data)


def casing_warning(task: str, vocab: Vocabulary) -> str | None:
    """Message when the checkpoint's casing differs from the task's usual choice."""
    want = default_casing(task)
    if vocab.casing != want:
        return (f"task {task!r} conventionally uses a {want.value} vocabulary but the checkpoint is "
                f"{vocab.casing.value}")
    return None


def batches(n: int, size: int, rng: np.random.Generator | None) -> list[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i: i + size] for i in range(0, n, size)]


# --- models ----------------------------------------------------------------

def build_finetune_model(task: str, encoder: EncoderModel, vocab: Vocabulary, labels: LabelSet,
                         seed: int = 0, dropout: float = 0.1):
    check_task(task)
    enc = copy_model(encoder)
    if task in ("ner", "pico"):
        model = TaggerModel(enc, vocab, labels, seed, dropout)
    elif task == "dep":
        model = ParserModel(enc, vocab, labels, seed, dropout)
    elif task == "rel":
        model = RelationModel(enc, vocab, labels, seed, dropout)
    else:
        model = ClassifierModel(enc, vocab, labels, seed, dropout)
    model.task = task
    return model


def build_frozen_model(task: str, embedder: FrozenEmbedder, labels: LabelSet, seed: int = 0, dropout: float = 0.5):
    check_task(task)
    if task in ("ner", "pico"):
        model = FrozenTagger(embedder, labels, seed, dropout)
    elif task == "dep":
        model = FrozenParser(embedder, labels, seed, dropout)
    elif task == "rel":
        model = FrozenRelationClassifier(embedder, labels, seed, dropout)
    else:
        model = FrozenClassifier(embedder, labels, seed, dropout)
    model.task = task
    return model


# --- training --------------------------------------------------------------

@dataclass
class FitTrace:
    lrs: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    epochs_run: int = 0
    best_epoch: int | None = None


def fit_finetune(model, train: Sequence, epochs: int, lr: float, batch_size: int = 32, seed: int = 0,
                 warmup_fraction: float = 0.1) -> FitTrace:
    """Adam under the linear warmup/decay schedule; the k-th update uses ``lr_at(k)``."""
    per_epoch = math.ceil(len(train) / batch_size)
    total = max(2, epochs * per_epoch)
    schedule = TriangularSchedule(lr, total, warmup_fraction)
    opt = Adam(model.params(), AdamConfig(lr=lr))
    trace = FitTrace()
    step = 0
    for epoch in range(epochs):
        rng = np.random.default_rng([seed, epoch])
        for idx in batches(len(train), batch_size, rng):
            step += 1
            opt.zero_grad()
            loss = model.loss([train[i] for i in idx], train=True, rng=rng)
            loss.backward()
            lr_t = lr_at(schedule, min(step, total))
            opt.step(lr_t)
            trace.lrs.append(lr_t)
            trace.losses.append(loss.item())
    trace.epochs_run = epochs
    return trace


def fit_frozen(model, train: Sequence, dev: Sequence, max_epochs: int = 100, lr: float = FROZEN_LR,
               batch_size: int = FROZEN_BATCH, patience: int = FROZEN_PATIENCE, seed: int = 0) -> FitTrace:
    """Constant-lr Adam with early stopping on the dev metric; restores the best epoch."""
    params = model.params()
    opt = Adam(params, AdamConfig(lr=lr))
    trace = FitTrace()

    def train_epoch(epoch: int) -> None:
        rng = np.random.default_rng([seed, epoch])
        for idx in batches(len(train), batch_size, rng):
            opt.zero_grad()
            loss = model.loss([train[i] for i in idx], train=True, rng=rng)
            loss.backward()
            opt.step(lr)
            trace.lrs.append(lr)
            trace.losses.append(loss.item())

    def snapshot():
        return {k: v.data.copy() for k, v in params.items()}

    def dev_score():
        # the dev loss only breaks ties in the task metric, which are common on small dev sets
        return (evaluate(model.task, model, dev).value, -mean_loss(model, dev))

    result = early_stop_loop(train_epoch, dev_score, EarlyStopConfig(patience), max_epochs, snapshot)
    for k, arr in result.checkpoint.items():
        params[k].data[...] = arr
    trace.epochs_run, trace.best_epoch = result.epochs_run, result.best_epoch
    return trace


# --- prediction and scoring ------------------------------------------------

def mean_loss(model, data: Sequence) -> float:
    total = 0.0
    for i in range(0, len(data), PREDICT_BATCH):
        chunk = list(data[i: i + PREDICT_BATCH])
        total += model.loss(chunk).item() * len(chunk)
    return total / len(data)


def predict(model, data: Sequence) -> list:
    out: list = []
    for i in range(0, len(data), PREDICT_BATCH):
        out.extend(model.predict(list(data[i: i + PREDICT_BATCH])))
    return out


def metric_fn(task: str, rel_mode: str = "macro"):
    """``f(gold_units, pred_units) -> MetricResult`` for the task's headline metric."""
    check_task(task)
    if task == "ner":
        return lambda g, p: M.span_f1_from_tags([s.tags for s in g], p)
    if task == "pico":
        return lambda g, p: M.token_f1_macro([list(s.tags) for s in g], p)
    if task == "dep":
        def las(g, p):
            scores = M.attachment_scores(g, p)
            res = M.MetricResult("las", scores["las"])
            res.per_class = {"uas": (scores["uas"], scores["uas"], scores["uas"], 0)}
            return res
        return las
    mode = rel_mode if task == "rel" else "macro"
    return lambda g, p: M.sentence_f1([e.label for e in g], p, mode)


def evaluate(task: str, model, data: Sequence, with_interval: bool = False, resamples: int = 1000,
             seed: int = 0, rel_mode: str = "macro") -> M.MetricResult:
    preds = predict(model, data)
    fn = metric_fn(task, rel_mode)
    if not with_interval:
        return fn(list(data), preds)
    return M.with_ci(fn, list(data), preds, resamples=resamples, seed=seed)


# --- grid runs -------------------------------------------------------------

@dataclass
class TaskData:
    train: Sequence
    dev: Sequence
    test: Sequence


def run_task(
    task: str,
    encoder: EncoderModel,
    vocab: Vocabulary,
    data: TaskData,
    grid: GridSpec,
    seeds: Sequence[int] = (0, 1, 2),
    mode: str = "finetune",
    dataset: str = "",
    max_frozen_epochs: int = 100,
    resamples: int = 1000,
    rel_mode: str = "macro",
    test_counter: dict | None = None,
    warn_casing: bool = True,
) -> RunReport:
    """Dev-grid selection then a single test evaluation per seed of the chosen config.

    ``test_counter`` (if given) is incremented on every test evaluation, which
    lets callers verify that test data is never used for selection.
    """
    check_task(task)
    if not data.dev:
        raise ValueError("the grid protocol needs a non-empty dev set")
    labels = label_set_for(task, list(data.train) + list(data.dev))
    warning = casing_warning(task, vocab) if warn_casing else None
    if warning:
        log.warning(warning)
    traces: list[tuple[dict, int, FitTrace]] = []

    if mode == "finetune":
        def train_fn(cfg: dict, seed: int):
            model = build_finetune_model(task, encoder, vocab, labels, seed)
            traces.append((cfg, seed, fit_finetune(model, data.train, cfg["epochs"], cfg["lr"],
                                                   cfg["batch_size"], seed)))
            return model
        configs = None
    elif mode == "frozen":
        embedder = FrozenEmbedder(encoder, vocab)
        before = T.checksum(encoder.params)

        def train_fn(cfg: dict, seed: int):
            model = build_frozen_model(task, embedder, labels, seed)
            traces.append((cfg, seed, fit_frozen(model, data.train, data.dev, cfg["epochs"], cfg["lr"],
                                                 cfg["batch_size"], seed=seed)))
            return model
        configs = [{"epochs": max_frozen_epochs, "lr": FROZEN_LR, "batch_size": FROZEN_BATCH}]
        grid = GridSpec((max_frozen_epochs,), (FROZEN_LR,), FROZEN_BATCH)
    else:
        raise ValueError(f"mode must be 'finetune' or 'frozen', got {mode!r}")

    def dev_fn(model) -> float:
        return evaluate(task, model, data.dev, rel_mode=rel_mode).value

    def test_fn(model):
        if test_counter is not None:
            test_counter["count"] = test_counter.get("count", 0) + 1
        return evaluate(task, model, data.test, with_interval=len(data.test) >= 2,
                        resamples=resamples, rel_mode=rel_mode)

    _, report = run_grid(train_fn, dev_fn, test_fn, grid, list(seeds), task, dataset, configs, mode)
    report.extra["labels"] = labels.to_dict()
    report.extra["casing"] = vocab.casing.value
    if warning:
        report.extra["casing_warning"] = warning
    report.extra["bootstrap_unit"] = "sentence"
    report.extra["train_traces"] = [
        {"config": dict(cfg), "seed": seed, "lrs": t.lrs, "losses": t.losses,
         "epochs_run": t.epochs_run, "best_epoch": t.best_epoch}
        for cfg, seed, t in traces
    ]
    if mode == "frozen":
        after = T.checksum(encoder.params)
        report.extra.update({"encoder_checksum_before": before, "encoder_checksum_after": after,
                             "encoder_unchanged": before == after})
    return report


def training_accuracy(task: str, model, data: Sequence) -> float:
    return evaluate(task, model, data).value

