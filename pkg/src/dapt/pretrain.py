"""Masked-LM + next-sentence pretraining data and the two-phase length curriculum."""

from __future__ import annotations

import json
import math
import shutil
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import tensor as T
from .corpus import SentenceList
from .encoder import (
    EncoderModel,
    encode,
    extend_positions,
    load_encoder,
    save_encoder,
    truncated_normal,
)
from .tensor import Tensor
from .trainer import Adam, AdamConfig
from .vocab import Vocabulary, tokenize

IGNORE = -100


class PretrainError(ValueError):
    pass


@dataclass(frozen=True)
class PretrainExample:
    token_ids: tuple[int, ...]
    segment_ids: tuple[int, ...]
    is_next: bool
    mlm_positions: tuple[int, ...] = ()
    mlm_labels: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.token_ids)


def _doc_rng(seed: int, doc_id: str, round_: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(doc_id.encode("utf-8")), round_])


def _truncate_pair(a: list[int], b: list[int], budget: int) -> None:
    while len(a) + len(b) > budget:
        longer = a if len(a) > len(b) else b
        longer.pop()


def _layout(a: Sequence[int], b: Sequence[int], vocab: Vocabulary, is_next: bool) -> PretrainExample:
    ids = (vocab.cls_id, *a, vocab.sep_id, *b, vocab.sep_id)
    segs = (0,) * (len(a) + 2) + (1,) * (len(b) + 1)
    return PretrainExample(ids, segs, is_next)


def make_nsp_pairs(
    docs: Iterable[SentenceList],
    vocab: Vocabulary,
    max_len: int,
    seed: int,
    dupe_factor: int = 1,
) -> Iterator[PretrainExample]:
    """Pack sentences into ``[CLS] A [SEP] B [SEP]`` pairs (pre-masking).

    Each document is walked sentence by sentence, accumulating a chunk until
    it fills ``max_len - 3`` tokens. The chunk is cut at a random sentence
    boundary into A and the true continuation; with probability 0.5 that
    continuation is replaced by sentences drawn from a different document.
    Randomness is derived per (seed, document id, round), so the output does
    not depend on how documents are scheduled.
    """
    if max_len < 5:
        raise PretrainError("max_len must leave room for three specials and two tokens")
    tokenized = []
    for sl in docs:
        sents = [tokenize(vocab, s).token_ids for s in sl.sentences]
        sents = [s for s in sents if s]
        if sents:
            tokenized.append((sl.document_id, sents))
    if len(tokenized) < 2:
        raise PretrainError("need at least two non-empty documents to draw not-next pairs")
    target = max_len - 3
    for round_ in range(dupe_factor):
        for d, (doc_id, sents) in enumerate(tokenized):
            rng = _doc_rng(seed, doc_id, round_)
            chunk: list[list[int]] = []
            length = 0
            for i, sent in enumerate(sents):
                chunk.append(sent)
                length += len(sent)
                if i != len(sents) - 1 and length < target:
                    continue
                a_end = 1 if len(chunk) < 2 else int(rng.integers(1, len(chunk)))
                a = [t for s in chunk[:a_end] for t in s]
                if len(chunk) == 1 or rng.random() < 0.5:
                    is_next = False
                    other = int(rng.integers(0, len(tokenized) - 1))
                    other += other >= d
                    other_sents = tokenized[other][1]
                    start = int(rng.integers(0, len(other_sents)))
                    b: list[int] = []
                    for s in other_sents[start:]:
                        b.extend(s)
                        if len(b) >= target - len(a):
                            break
                else:
                    is_next = True
                    b = [t for s in chunk[a_end:] for t in s]
                _truncate_pair(a, b, target)
                yield _layout(a, b, vocab, is_next)
                chunk, length = [], 0


def apply_mlm_mask(
    example: PretrainExample,
    vocab: Vocabulary,
    rate: float = 0.15,
    rng: np.random.Generator | int = 0,
) -> PretrainExample:
    """Select ``rate`` of the non-special positions and corrupt them 80/10/10.

    The number selected is ``floor(rate * n)`` plus one more with probability
    equal to the fractional part, so every position is chosen with marginal
    probability ``rate`` and the count never exceeds ``ceil(rate * n)``.
    """
    if not 0.0 <= rate <= 1.0:
        raise PretrainError("mask rate must lie in [0, 1]")
    if example.mlm_positions:
        raise PretrainError("example is already masked")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    special = vocab.special_ids
    candidates = [i for i, t in enumerate(example.token_ids) if t not in special]
    expected = rate * len(candidates)
    k = int(math.floor(expected))
    if rng.random() < expected - k:
        k += 1
    if k == 0:
        return example
    positions = sorted(int(p) for p in rng.choice(candidates, size=k, replace=False))
    ids = list(example.token_ids)
    labels = []
    n_vocab = len(vocab)
    for pos in positions:
        labels.append(ids[pos])
        r = rng.random()
        if r < 0.8:
            ids[pos] = vocab.mask_id
        elif r < 0.9:
            while True:
                cand = int(rng.integers(0, n_vocab))
                if cand not in special:
                    break
            ids[pos] = cand
    return replace(example, token_ids=tuple(ids), mlm_positions=tuple(positions), mlm_labels=tuple(labels))


def build_examples(
    docs: Sequence[SentenceList],
    vocab: Vocabulary,
    max_len: int,
    seed: int,
    dupe_factor: int = 1,
    rate: float = 0.15,
) -> list[PretrainExample]:
    """Pairs plus static masking, deterministic in ``seed``."""
    out = []
    for i, ex in enumerate(make_nsp_pairs(docs, vocab, max_len, seed, dupe_factor)):
        out.append(apply_mlm_mask(ex, vocab, rate, np.random.default_rng([seed, 7, i])))
    return out


# Binary example cache: magic, uint32 count, then per record
#   uint16 n, uint16 m, uint8 is_next, n*uint32 ids, n*uint8 segments,
#   m*uint16 positions, m*uint32 labels.   All little-endian.
_MAGIC = b"DAPTEX1\0"


def save_examples(examples: Sequence[PretrainExample], path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(examples)))
        for ex in examples:
            n, m = len(ex.token_ids), len(ex.mlm_positions)
            fh.write(struct.pack("<HHB", n, m, int(ex.is_next)))
            fh.write(np.asarray(ex.token_ids, dtype="<u4").tobytes())
            fh.write(np.asarray(ex.segment_ids, dtype="u1").tobytes())
            fh.write(np.asarray(ex.mlm_positions, dtype="<u2").tobytes())
            fh.write(np.asarray(ex.mlm_labels, dtype="<u4").tobytes())


def load_examples(path) -> list[PretrainExample]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise PretrainError(f"{path}: not an example cache")
    (count,) = struct.unpack_from("<I", raw, 8)
    off = 12
    out = []
    for _ in range(count):
        n, m, nxt = struct.unpack_from("<HHB", raw, off)
        off += 5
        ids = np.frombuffer(raw, "<u4", n, off); off += 4 * n
        segs = np.frombuffer(raw, "u1", n, off); off += n
        pos = np.frombuffer(raw, "<u2", m, off); off += 2 * m
        lab = np.frombuffer(raw, "<u4", m, off); off += 4 * m
        out.append(PretrainExample(
            tuple(int(x) for x in ids), tuple(int(x) for x in segs), bool(nxt),
            tuple(int(x) for x in pos), tuple(int(x) for x in lab),
        ))
    return out


@dataclass
class Batch:
    token_ids: np.ndarray
    segment_ids: np.ndarray
    attention_mask: np.ndarray
    mlm_rows: np.ndarray
    mlm_cols: np.ndarray
    mlm_labels: np.ndarray
    nsp_labels: np.ndarray

    @property
    def max_len(self) -> int:
        return self.token_ids.shape[1]


def collate(examples: Sequence[PretrainExample], pad_id: int = 0) -> Batch:
    n = max(len(e) for e in examples)
    b = len(examples)
    ids = np.full((b, n), pad_id, dtype=np.int64)
    segs = np.zeros((b, n), dtype=np.int64)
    mask = np.zeros((b, n), dtype=np.int64)
    rows, cols, labels = [], [], []
    for i, e in enumerate(examples):
        k = len(e)
        ids[i, :k] = e.token_ids
        segs[i, :k] = e.segment_ids
        mask[i, :k] = 1
        rows.extend([i] * len(e.mlm_positions))
        cols.extend(e.mlm_positions)
        labels.extend(e.mlm_labels)
    nsp = np.array([0 if e.is_next else 1 for e in examples], dtype=np.int64)
    return Batch(ids, segs, mask, np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64),
                 np.array(labels, dtype=np.int64), nsp)


class PretrainHeads:
    """MLM transform + output bias (decoder tied to word embeddings) and the NSP classifier."""

    def __init__(self, hidden: int, vocab_size: int, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng([seed, 31])
        p = {
            "mlm.transform.weight": truncated_normal(rng, (hidden, hidden), dtype=dtype),
            "mlm.transform.bias": np.zeros(hidden, dtype=dtype),
            "mlm.ln.gain": np.ones(hidden, dtype=dtype),
            "mlm.ln.bias": np.zeros(hidden, dtype=dtype),
            "mlm.output_bias": np.zeros(vocab_size, dtype=dtype),
            "nsp.weight": truncated_normal(rng, (hidden, 2), dtype=dtype),
            "nsp.bias": np.zeros(2, dtype=dtype),
        }
        self.params = {k: Tensor(v, requires_grad=True) for k, v in p.items()}


def pretrain_losses(
    model: EncoderModel,
    heads: PretrainHeads,
    batch: Batch,
    train: bool = True,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Forward pass only: (mlm loss, nsp loss) as scalar tensors."""
    seq, pooled = encode(model, batch.token_ids, batch.segment_ids, batch.attention_mask, train, rng)
    hp = heads.params
    if len(batch.mlm_rows):
        picked = seq[batch.mlm_rows, batch.mlm_cols]
        h = T.gelu(T.add(T.matmul(picked, hp["mlm.transform.weight"]), hp["mlm.transform.bias"]))
        h = T.layer_norm(h, hp["mlm.ln.gain"], hp["mlm.ln.bias"])
        logits = T.add(T.matmul(h, T.transpose(model.params["embeddings.word"])), hp["mlm.output_bias"])
        mlm = T.cross_entropy(logits, batch.mlm_labels)
    else:
        mlm = Tensor(np.zeros((), dtype=model.dtype))
    nsp_logits = T.add(T.matmul(pooled, hp["nsp.weight"]), hp["nsp.bias"])
    nsp = T.cross_entropy(nsp_logits, batch.nsp_labels)
    return mlm, nsp


def pretrain_step(
    model: EncoderModel,
    heads: PretrainHeads,
    batch: Batch,
    rng: np.random.Generator | None = None,
    train: bool = True,
) -> dict[str, float]:
    """Forward + backward; gradients are left on the parameters."""
    mlm, nsp = pretrain_losses(model, heads, batch, train, rng)
    total = T.add(mlm, nsp)
    total.backward()
    return {"mlm": mlm.item(), "nsp": nsp.item(), "total": total.item()}


@dataclass(frozen=True)
class PhasePlan:
    phase1_max_len: int = 128
    phase2_max_len: int = 512
    plateau_window: int = 50
    plateau_epsilon: float = 1e-3
    max_phase1_steps: int = 2000
    phase2_steps: int = 200

    def __post_init__(self):
        if self.phase1_max_len >= self.phase2_max_len:
            raise PretrainError("phase1_max_len must be below phase2_max_len")
        if self.plateau_window < 1:
            raise PretrainError("plateau_window must be at least 1")


@dataclass(frozen=True)
class PretrainConfig:
    batch_size: int = 8
    lr: float = 1e-3
    warmup_steps: int = 20
    dupe_factor: int = 5
    mask_rate: float = 0.15
    checkpoint_every: int = 0


@dataclass
class TrainingLog:
    records: list[dict] = field(default_factory=list)
    switch_step: int | None = None
    plateau_reached: bool = False
    phase2_max_example_len: int = 0

    def losses(self, key: str = "total", phase: int | None = None) -> list[float]:
        return [r[key] for r in self.records if phase is None or r["phase"] == phase]

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")


def plateaued(losses: Sequence[float], window: int, epsilon: float) -> bool:
    """True when the latest window's mean improved on the one before by a
    relative amount below ``epsilon`` (increases count as zero improvement)."""
    if len(losses) < 2 * window:
        return False
    prev = float(np.mean(losses[-2 * window: -window]))
    cur = float(np.mean(losses[-window:]))
    improvement = max(0.0, prev - cur) / abs(prev) if prev else 0.0
    return improvement < epsilon


def _batch_for(pool: Sequence[PretrainExample], batch_size: int, seed: int, phase: int, step: int) -> Batch:
    rng = np.random.default_rng([seed, phase, step])
    idx = rng.choice(len(pool), size=min(batch_size, len(pool)), replace=False)
    return collate([pool[i] for i in sorted(idx)])


class Curriculum:
    """Two-phase run: short sequences until the loss plateaus, then long ones.

    Batches and dropout masks are drawn from generators seeded by
    ``(seed, phase, step)``, so a run resumed from a checkpoint replays the
    uninterrupted run exactly.
    """

    def __init__(
        self,
        model: EncoderModel,
        vocab: Vocabulary,
        docs: Sequence[SentenceList],
        plan: PhasePlan = PhasePlan(),
        config: PretrainConfig = PretrainConfig(),
        seed: int = 0,
        heads: PretrainHeads | None = None,
        checkpoint_dir=None,
    ):
        if model.config.max_positions < plan.phase1_max_len:
            raise PretrainError(
                f"model supports {model.config.max_positions} positions, phase 1 needs {plan.phase1_max_len}")
        self.model = model
        self.vocab = vocab
        self.docs = list(docs)
        self.plan = plan
        self.config = config
        self.seed = seed
        self.heads = heads or PretrainHeads(model.config.hidden_size, model.config.vocab_size, seed, model.dtype)
        self.optimizer = Adam({**model.params, **self.heads.params}, AdamConfig(lr=config.lr))
        self.log = TrainingLog()
        self.phase = 1
        self.phase_step = 0
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self._pools: dict[int, list[PretrainExample]] = {}

    def pool(self, phase: int) -> list[PretrainExample]:
        if phase not in self._pools:
            max_len = self.plan.phase1_max_len if phase == 1 else self.plan.phase2_max_len
            self._pools[phase] = build_examples(
                self.docs, self.vocab, max_len, self.seed + 1000 * phase, self.config.dupe_factor,
                self.config.mask_rate)
        return self._pools[phase]

    def _lr(self, global_step: int) -> float:
        warm = self.config.warmup_steps
        return self.config.lr * min(1.0, global_step / warm) if warm else self.config.lr

    def _switch_phase(self) -> None:
        self.log.switch_step = len(self.log.records)
        self.phase, self.phase_step = 2, 0
        if self.model.config.max_positions < self.plan.phase2_max_len:
            self.model = extend_positions(self.model, self.plan.phase2_max_len, self.seed + 2)
            self.optimizer.replace_param("embeddings.position", self.model.params["embeddings.position"])

    def step(self) -> dict:
        pool = self.pool(self.phase)
        batch = _batch_for(pool, self.config.batch_size, self.seed, self.phase, self.phase_step)
        rng = np.random.default_rng([self.seed, self.phase, self.phase_step, 1])
        global_step = len(self.log.records) + 1
        lr = self._lr(global_step)
        self.optimizer.zero_grad()
        losses = pretrain_step(self.model, self.heads, batch, rng)
        self.optimizer.step(lr)
        rec = {"step": global_step, "phase": self.phase, "mlm_loss": losses["mlm"],
               "nsp_loss": losses["nsp"], "lr": lr, "max_len": batch.max_len}
        self.log.records.append(rec)
        if self.phase == 2:
            self.log.phase2_max_example_len = max(self.log.phase2_max_example_len, batch.max_len)
        self.phase_step += 1
        return rec

    def finished(self) -> bool:
        if self.phase == 1:
            return False
        return self.phase_step >= self.plan.phase2_steps

    def run(self) -> tuple[EncoderModel, TrainingLog]:
        plan = self.plan
        while True:
            if self.phase == 1:
                totals = [r["mlm_loss"] + r["nsp_loss"] for r in self.log.records]
                if plateaued(totals, plan.plateau_window, plan.plateau_epsilon):
                    self.log.plateau_reached = True
                    self._switch_phase()
                    self.save_checkpoint()
                    continue
                if self.phase_step >= plan.max_phase1_steps:
                    break
            elif self.finished():
                break
            self.step()
            every = self.config.checkpoint_every
            if every and len(self.log.records) % every == 0:
                self.save_checkpoint()
        self.save_checkpoint()
        return self.model, self.log

    # -- checkpointing -----------------------------------------------------

    def save_checkpoint(self) -> None:
        if self.checkpoint_dir is None:
            return
        root = self.checkpoint_dir
        tmp = root / "latest.tmp"
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        save_encoder(self.model, tmp / "encoder")
        wide = "<f8" if self.model.dtype == np.float64 else "<f4"
        T.save_params(self.heads.params, tmp / "heads", dtype=wide)
        st = self.optimizer.state
        T.save_params({f"m/{k}": Tensor(v) for k, v in st.m.items()}
                      | {f"v/{k}": Tensor(v) for k, v in st.v.items()}, tmp / "adam", dtype="<f8")
        state = {"adam_step": st.step, "phase": self.phase, "phase_step": self.phase_step,
                 "switch_step": self.log.switch_step, "plateau_reached": self.log.plateau_reached,
                 "phase2_max_example_len": self.log.phase2_max_example_len,
                 "records": self.log.records}
        (tmp / "state.json").write_text(json.dumps(state) + "\n", encoding="utf-8")
        final = root / "latest"
        if final.exists():
            shutil.rmtree(final)
        tmp.rename(final)

    def restore(self, directory) -> None:
        directory = Path(directory)
        self.model = load_encoder(directory / "encoder", dtype=self.model.dtype)
        arrays = T.load_params(directory / "heads", dtype=self.model.dtype)
        self.heads.params = {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}
        self.optimizer = Adam({**self.model.params, **self.heads.params}, self.optimizer.config)
        adam = T.load_params(directory / "adam", dtype=np.float64)
        state = json.loads((directory / "state.json").read_text(encoding="utf-8"))
        dt = self.model.dtype
        self.optimizer.state.step = state["adam_step"]
        self.optimizer.state.m = {k[2:]: v.astype(dt) for k, v in adam.items() if k.startswith("m/")}
        self.optimizer.state.v = {k[2:]: v.astype(dt) for k, v in adam.items() if k.startswith("v/")}
        self.phase, self.phase_step = state["phase"], state["phase_step"]
        self.log = TrainingLog(state["records"], state["switch_step"], state["plateau_reached"],
                               state["phase2_max_example_len"])


def run_curriculum(
    model: EncoderModel,
    plan: PhasePlan,
    corpus: Sequence[SentenceList],
    vocab: Vocabulary,
    config: PretrainConfig = PretrainConfig(),
    seed: int = 0,
    checkpoint_dir=None,
) -> tuple[EncoderModel, TrainingLog]:
    """Phase 1 at ``phase1_max_len`` until plateau, then ``phase2_steps`` at
    ``phase2_max_len`` (positions extended if needed). If phase 1 exhausts its
    step budget first the log's ``plateau_reached`` stays False and phase 2 is
    skipped."""
    return Curriculum(model, vocab, corpus, plan, config, seed, checkpoint_dir=checkpoint_dir).run()
