"""Maximum spanning arborescence decoding (Chu-Liu/Edmonds) for dependency arcs.

Score matrices are indexed ``scores[dependent, head]`` over ``n + 1`` nodes,
node 0 being the virtual root.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np


def _find_cycle(heads: np.ndarray) -> list[int] | None:
    n = len(heads)
    color = np.zeros(n, dtype=np.int8)  # 0 new, 1 on current walk, 2 done
    color[0] = 2
    for start in range(1, n):
        if color[start]:
            continue
        walk = []
        node = start
        while color[node] == 0:
            color[node] = 1
            walk.append(node)
            node = heads[node]
        if color[node] == 1:
            return walk[walk.index(node):]
        for w in walk:
            color[w] = 2
    return None


def _mst(scores: np.ndarray) -> np.ndarray:
    n = scores.shape[0]
    s = scores.copy()
    np.fill_diagonal(s, -np.inf)
    s[0, :] = -np.inf
    heads = s.argmax(axis=1)
    heads[0] = 0
    cycle = _find_cycle(heads)
    if cycle is None:
        return heads

    in_cycle = np.zeros(n, dtype=bool)
    in_cycle[cycle] = True
    cyc = np.array(sorted(cycle))
    rest = [i for i in range(n) if not in_cycle[i]]
    m = len(rest)
    contracted = np.full((m + 1, m + 1), -np.inf)
    rest_idx = np.array(rest)
    contracted[:m, :m] = s[np.ix_(rest_idx, rest_idx)]

    # rest dependent <- some cycle node as head
    out_block = s[np.ix_(rest_idx, cyc)]
    out_choice = cyc[out_block.argmax(axis=1)]
    contracted[:m, m] = out_block.max(axis=1)

    # cycle dependent <- rest head: gain of breaking the cycle at that dependent
    kept = s[cyc, heads[cyc]]
    with np.errstate(invalid="ignore"):
        in_block = s[np.ix_(cyc, rest_idx)] - kept[:, None]
    in_choice = cyc[in_block.argmax(axis=0)]
    contracted[m, :m] = in_block.max(axis=0)

    sub = _mst(contracted)
    result = heads.copy()
    for i in range(1, m):
        h = sub[i]
        result[rest[i]] = rest[h] if h < m else out_choice[i]
    entry_head = sub[m]
    result[in_choice[entry_head]] = rest[entry_head]
    return result


def chu_liu_edmonds(scores: np.ndarray, single_root: bool = True) -> list[int]:
    """Heads for nodes ``1..n`` of the maximum arborescence rooted at node 0.

    With ``single_root`` every root arc is penalized by more than the spread
    of any two trees' scores, which makes the optimum use exactly one root arc
    while leaving the ranking among single-root trees unchanged.
    """
    s = np.array(scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"score matrix must be square, got {s.shape}")
    n = s.shape[0] - 1
    if n < 1:
        raise ValueError("need at least one token")
    if not np.all(np.isfinite(s[1:])):
        raise ValueError("scores must be finite")
    if n == 1:
        return [0]
    if single_root:
        body = s[1:]
        spread = float(body.max() - body.min())
        s[1:, 0] -= n * spread + 1.0
    return [int(h) for h in _mst(s)[1:]]


def is_tree(heads: Sequence[int]) -> bool:
    """Exactly one root attachment, every token reaches the root, no cycles."""
    n = len(heads)
    if n == 0 or sum(1 for h in heads if h == 0) != 1:
        return False
    if any(not 0 <= h <= n for h in heads):
        return False
    full = [0] + list(heads)
    for start in range(1, n + 1):
        node, steps = start, 0
        while node != 0:
            node = full[node]
            steps += 1
            if steps > n:
                return False
    return True


def tree_score(scores: np.ndarray, heads: Sequence[int]) -> float:
    return float(sum(scores[i + 1, h] for i, h in enumerate(heads)))
