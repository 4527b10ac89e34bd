"""Negative sampling for contrastive link training.

Two corruption schemes over a batch of n positive triples with k negatives
each: independent corruption draws a fresh entity per negative (up to
2n + kn distinct endpoints), joint corruption shares one pool of n corrupted
entities across all positives (at most 3n distinct endpoints touched, which
is what keeps the encoder workload per step bounded).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .graph import HeteroGraph, _as_rng


@dataclass
class TripletBatch:
    """Positives first (label +1), then k negatives per positive in order
    (label -1); row n + i*k + j is negative j of positive i."""

    rels: np.ndarray
    heads: np.ndarray
    tails: np.ndarray
    labels: np.ndarray
    positives_count: int
    negatives_per_positive: int
    distinct_endpoints: int
    corrupt_fallback: bool = False

    def __len__(self) -> int:
        return int(self.rels.shape[0])


def endpoint_types(graph: HeteroGraph, rels: np.ndarray):
    """(head_type, tail_type) index arrays for a relation-index array."""
    head_t = np.array([graph.type_index(r.src_type) for r in graph.relations],
                      dtype=np.int64)
    tail_t = np.array([graph.type_index(r.dst_type) for r in graph.relations],
                      dtype=np.int64)
    rels = np.asarray(rels, dtype=np.int64)
    if rels.size and (rels.min() < 0 or rels.max() >= len(graph.relations)):
        raise IndexError(f"relation index out of range [0, {len(graph.relations)})")
    return head_t[rels], tail_t[rels]


def count_distinct_endpoints(graph: HeteroGraph, rels, heads, tails) -> int:
    """Number of distinct (type, local id) nodes appearing as head or tail."""
    head_types, tail_types = endpoint_types(graph, rels)
    seen = set(zip(head_types.tolist(), np.asarray(heads).tolist()))
    seen.update(zip(tail_types.tolist(), np.asarray(tails).tolist()))
    return len(seen)


def _uniform_other(rng, n: int, exclude: int) -> int | None:
    """Uniform over [0, n) minus one value; None when the type has one node."""
    if n <= 1:
        return None
    u = int(rng.integers(n - 1))
    return u + 1 if u >= exclude else u


def _check_positives(graph, rels, heads, tails, k):
    rels = np.asarray(rels, dtype=np.int64)
    heads = np.asarray(heads, dtype=np.int64)
    tails = np.asarray(tails, dtype=np.int64)
    if not (rels.shape == heads.shape == tails.shape) or rels.ndim != 1:
        raise ContractError("rels, heads, tails must be equal-length 1-D arrays")
    if rels.size == 0:
        raise ContractError("need at least one positive triple")
    if k < 1:
        raise ContractError("negatives_per_positive must be >= 1")
    return rels, heads, tails


def _assemble(graph, rels, heads, tails, k, neg_rels, neg_heads, neg_tails, fallback):
    n = rels.size
    all_rels = np.concatenate([rels, neg_rels])
    all_heads = np.concatenate([heads, neg_heads])
    all_tails = np.concatenate([tails, neg_tails])
    labels = np.concatenate([np.ones(n), -np.ones(n * k)])
    distinct = count_distinct_endpoints(graph, all_rels, all_heads, all_tails)
    return TripletBatch(all_rels, all_heads, all_tails, labels, n, k,
                        distinct, fallback)


def corrupt_independent(graph: HeteroGraph, rels, heads, tails, k: int,
                        rng=0) -> TripletBatch:
    """k negatives per positive, each corrupting head or tail (fair coin) with
    a fresh uniform draw over the other nodes of that type.  A type with a
    single node forces the other side; if both sides are singletons the
    positive is emitted unchanged and the batch is flagged corrupt_fallback.
    """
    rels, heads, tails = _check_positives(graph, rels, heads, tails, k)
    rng = _as_rng(rng)
    head_types, tail_types = endpoint_types(graph, rels)
    n = rels.size
    neg_heads = np.repeat(heads, k)
    neg_tails = np.repeat(tails, k)
    neg_rels = np.repeat(rels, k)
    fallback = False
    for i in range(n):
        nh = graph.node_counts[head_types[i]]
        nt = graph.node_counts[tail_types[i]]
        for j in range(k):
            row = i * k + j
            corrupt_head = bool(rng.random() < 0.5)
            if corrupt_head:
                repl = _uniform_other(rng, nh, int(heads[i]))
                if repl is None:
                    repl = _uniform_other(rng, nt, int(tails[i]))
                    if repl is None:
                        fallback = True
                        continue
                    neg_tails[row] = repl
                else:
                    neg_heads[row] = repl
            else:
                repl = _uniform_other(rng, nt, int(tails[i]))
                if repl is None:
                    repl = _uniform_other(rng, nh, int(heads[i]))
                    if repl is None:
                        fallback = True
                        continue
                    neg_heads[row] = repl
                else:
                    neg_tails[row] = repl
    return _assemble(graph, rels, heads, tails, k, neg_rels, neg_heads,
                     neg_tails, fallback)


def corrupt_joint(graph: HeteroGraph, rels, heads, tails, k: int,
                  rng=0) -> TripletBatch:
    """k negatives per positive drawn from one shared pool of n corrupted
    entities, so the whole batch touches at most 3n distinct endpoints.

    Pool slot s corrupts positive s's head or tail (fair coin).  Negative j of
    positive i reuses pool slots cyclically, taking the next k type-compatible
    entries; a positive with no compatible pool entry is a contract error.
    """
    rels, heads, tails = _check_positives(graph, rels, heads, tails, k)
    rng = _as_rng(rng)
    head_types, tail_types = endpoint_types(graph, rels)
    n = rels.size

    pool_types = np.empty(n, dtype=np.int64)
    pool_ids = np.empty(n, dtype=np.int64)
    pool_ok = np.zeros(n, dtype=bool)
    for s in range(n):
        corrupt_head = bool(rng.random() < 0.5)
        t = head_types[s] if corrupt_head else tail_types[s]
        orig = int(heads[s]) if corrupt_head else int(tails[s])
        repl = _uniform_other(rng, graph.node_counts[t], orig)
        if repl is None:  # singleton type; try the other side of this slot
            t = tail_types[s] if corrupt_head else head_types[s]
            orig = int(tails[s]) if corrupt_head else int(heads[s])
            repl = _uniform_other(rng, graph.node_counts[t], orig)
            if repl is None:
                continue
        pool_types[s] = t
        pool_ids[s] = repl
        pool_ok[s] = True

    neg_rels = np.repeat(rels, k)
    neg_heads = np.repeat(heads, k)
    neg_tails = np.repeat(tails, k)
    for i in range(n):
        ht, tt = int(head_types[i]), int(tail_types[i])
        taken = 0
        for step in range(n):
            s = (i + 1 + step) % n
            if not pool_ok[s]:
                continue
            pt = int(pool_types[s])
            row = i * k + taken
            if pt == tt:
                neg_tails[row] = pool_ids[s]
            elif pt == ht:
                neg_heads[row] = pool_ids[s]
            else:
                continue
            taken += 1
            if taken == k:
                break
        if taken < k:
            # wrap around the pool again: reuse is fine, emptiness is not
            compatible = [s for s in range(n)
                          if pool_ok[s] and int(pool_types[s]) in (ht, tt)]
            if not compatible:
                raise ContractError(
                    f"joint pool has no entity compatible with positive {i} "
                    f"(types {graph.node_types[ht]}/{graph.node_types[tt]})")
            c = 0
            while taken < k:
                s = compatible[c % len(compatible)]
                pt = int(pool_types[s])
                row = i * k + taken
                if pt == tt:
                    neg_tails[row] = pool_ids[s]
                else:
                    neg_heads[row] = pool_ids[s]
                taken += 1
                c += 1
    return _assemble(graph, rels, heads, tails, k, neg_rels, neg_heads,
                     neg_tails, fallback=False)


def sample_eval_negatives(graph: HeteroGraph, rel: int, head: int, tail: int,
                          count: int, rng=0, filtered: bool = True,
                          max_retries: int = 10):
    """Negative tail ids for ranking one positive (head, rel, tail).

    Draws uniformly over the tail type excluding the true tail; with
    filtered=True, draws landing on known (head, tail') edges are resampled up
    to max_retries then dropped, so fewer than count ids may come back.
    Returns (tail_ids, dropped_count).
    """
    if count < 1:
        raise ContractError("count must be >= 1")
    rng = _as_rng(rng)
    _, tail_types = endpoint_types(graph, np.array([rel]))
    n = graph.node_counts[tail_types[0]]
    known = graph.known_pairs(rel) if filtered else None
    out = []
    dropped = 0
    for _ in range(count):
        cand = _uniform_other(rng, n, int(tail))
        if cand is None:
            dropped += 1
            continue
        if known is not None:
            tries = 0
            while (int(head), int(cand)) in known:
                tries += 1
                if tries > max_retries:
                    cand = None
                    break
                cand = _uniform_other(rng, n, int(tail))
            if cand is None:
                dropped += 1
                continue
        out.append(int(cand))
    return np.array(out, dtype=np.int64), dropped


def full_eval_negatives(graph: HeteroGraph, rel: int, head: int, tail: int,
                        filtered: bool = True) -> np.ndarray:
    """Every candidate tail id except the true one; filtered drops known edges."""
    _, tail_types = endpoint_types(graph, np.array([rel]))
    n = graph.node_counts[tail_types[0]]
    cands = np.arange(n, dtype=np.int64)
    mask = cands != int(tail)
    if filtered:
        known = graph.known_pairs(rel)
        h = int(head)
        keep = np.array([(h, int(c)) not in known for c in cands], dtype=bool)
        keep[int(tail)] = False
        mask &= keep
    return cands[mask]
