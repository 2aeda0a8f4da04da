"""Linear-chain CRF with virtual start/end states and optional BIO constraints."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import NEG_INF, Tensor


def bio_allowed(labels: Sequence[str]) -> np.ndarray:
    """Boolean ``(L+2, L+2)`` matrix, ``[from, to]``; index L is START, L+1 is END.

    Forbidden: START -> I-X, O -> I-X, and B-X/I-X -> I-Y with X != Y.
    """
    n = len(labels)
    start, end = n, n + 1
    allowed = np.zeros((n + 2, n + 2), dtype=bool)
    allowed[:n, :n] = True
    allowed[start, :n] = True
    allowed[:n, end] = True
    for j, to in enumerate(labels):
        if not to.startswith("I-"):
            continue
        typ = to[2:]
        allowed[start, j] = False
        for i, frm in enumerate(labels):
            if frm == "O" or (frm[:2] in ("B-", "I-") and frm[2:] != typ):
                allowed[i, j] = False
    return allowed


def unconstrained(num_labels: int) -> np.ndarray:
    n = num_labels
    allowed = np.zeros((n + 2, n + 2), dtype=bool)
    allowed[:n, :n] = True
    allowed[n, :n] = True
    allowed[:n, n + 1] = True
    return allowed


@dataclass
class CrfParams:
    transitions: Tensor
    constraint_mask: np.ndarray  # True where the transition is allowed

    @property
    def num_labels(self) -> int:
        return self.transitions.shape[0] - 2

    @classmethod
    def create(cls, labels: Sequence[str] | int, constrained: bool = True, dtype=np.float32) -> CrfParams:
        if isinstance(labels, int):
            n, mask = labels, unconstrained(labels)
        else:
            n = len(labels)
            mask = bio_allowed(labels) if constrained else unconstrained(n)
        return cls(Tensor(np.zeros((n + 2, n + 2), dtype=dtype), requires_grad=True), mask)

    def effective(self) -> Tensor:
        """Transitions with forbidden entries pushed to ``NEG_INF``."""
        penalty = np.where(self.constraint_mask, 0.0, NEG_INF).astype(self.transitions.dtype)
        return T.add(self.transitions, Tensor(penalty))


def _as_batch(emissions: Tensor, mask):
    if emissions.ndim == 2:
        emissions = T.reshape(emissions, (1,) + emissions.shape)
    b, n, _ = emissions.shape
    mask = np.ones((b, n), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask[:, 0].all():
        raise ValueError("every sequence needs at least one position")
    return emissions, mask


def crf_log_partition(emissions: Tensor, crf: CrfParams, mask=None) -> Tensor:
    """Forward algorithm in log space.

    ``emissions`` is ``(len, L)`` (returns a scalar) or ``(batch, len, L)``
    with a left-aligned 0/1 ``mask`` (returns ``(batch,)``).
    """
    single = emissions.ndim == 2
    emissions, mask = _as_batch(emissions, mask)
    b, n, L = emissions.shape
    trans = crf.effective()
    inner, start, end = trans[:L, :L], trans[L, :L], trans[:L, L + 1]
    inner_b = T.broadcast_to(inner, (b, L, L))
    alpha = T.add(emissions[:, 0], start)
    dt = emissions.dtype
    for t in range(1, n):
        scores = T.add(
            T.add(T.broadcast_to(T.reshape(alpha, (b, L, 1)), (b, L, L)), inner_b),
            T.broadcast_to(T.reshape(emissions[:, t], (b, 1, L)), (b, L, L)),
        )
        nxt = T.logsumexp(scores, axis=1)
        keep = np.broadcast_to(mask[:, t:t + 1], (b, L)).astype(dt)
        if keep.all():
            alpha = nxt
        else:
            alpha = T.add(T.mul(nxt, Tensor(keep)), T.mul(alpha, Tensor(1.0 - keep)))
    logz = T.logsumexp(T.add(alpha, end), axis=1)
    return T.reshape(logz, ()) if single else logz


def crf_path_score(emissions: Tensor, tags, crf: CrfParams, mask=None) -> Tensor:
    """Unnormalized score of the given label paths (same shapes as the partition)."""
    single = emissions.ndim == 2
    emissions, mask = _as_batch(emissions, mask)
    b, n, L = emissions.shape
    tags = np.asarray(tags).reshape(b, n)
    tags = np.where(mask, tags, 0)
    m = mask.astype(emissions.dtype)
    trans = crf.effective()
    rows = np.arange(b)[:, None]
    emit = T.tsum(T.mul(emissions[rows, np.arange(n)[None, :], tags], Tensor(m)), axis=1)
    score = T.add(emit, trans[np.full(b, L), tags[:, 0]])
    if n > 1:
        pair = trans[tags[:, :-1], tags[:, 1:]]
        score = T.add(score, T.tsum(T.mul(pair, Tensor(m[:, 1:])), axis=1))
    last = tags[np.arange(b), mask.sum(axis=1) - 1]
    score = T.add(score, trans[last, np.full(b, L + 1)])
    return T.reshape(score, ()) if single else score


def crf_nll(emissions: Tensor, tags, crf: CrfParams, mask=None) -> Tensor:
    """Mean over sequences of ``log Z - score(gold)``."""
    logz = crf_log_partition(emissions, crf, mask)
    gold = crf_path_score(emissions, tags, crf, mask)
    return T.mean(T.sub(logz, gold))


def crf_decode(emissions, crf: CrfParams) -> list[int]:
    """Viterbi over allowed paths; ties go to the lowest label index."""
    e = np.asarray(emissions.data if isinstance(emissions, Tensor) else emissions, dtype=np.float64)
    n, L = e.shape
    trans = np.where(crf.constraint_mask, crf.transitions.data.astype(np.float64), -np.inf)
    inner, start, end = trans[:L, :L], trans[L, :L], trans[:L, L + 1]
    score = start + e[0]
    back = []
    for t in range(1, n):
        cand = score[:, None] + inner
        best_prev = cand.argmax(axis=0)
        score = cand[best_prev, np.arange(L)] + e[t]
        back.append(best_prev)
    path = [int(np.argmax(score + end))]
    for bp in reversed(back):
        path.append(int(bp[path[-1]]))
    return path[::-1]
