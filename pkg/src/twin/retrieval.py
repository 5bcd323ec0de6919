"""First-stage retrievers (GSUs) and the consistency measurements.

The consistency-preserved GSU ranks behaviors with exactly the relevance
scores the attention stage uses, one ranking per head, and merges the heads
round-robin until ``k`` unique behaviors are collected.  The baselines filter
by category (hard) or by inner product of frozen embeddings (soft).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .attention import TwinParams, relevance_scores
from .features import (BehaviorArrays, EmbeddingTable, FeatureSchema, TargetItem,
                       assemble_K, cross_block, embed_target)
from .numerics import full_ranking, matmul, topk_indices

DEFAULT_K = 100


class GsuKind(str, enum.Enum):
    TWIN_CP = "TwinCP"
    SIM_HARD = "SimHard"
    SIM_SOFT = "SimSoft"
    ORACLE = "Oracle"


class CacheMiss(LookupError):
    """Strict-policy cache lookup found ids that are not covered."""

    def __init__(self, ids):
        self.ids = list(ids)
        super().__init__(f"{len(self.ids)} video ids not in projection cache: {self.ids[:10]}")


@dataclass
class RetrievalResult:
    indices: np.ndarray
    per_head_scores: np.ndarray | None = None  # n_heads x L
    provenance: list[tuple[int, ...]] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.indices.size)

    def as_set(self) -> set[int]:
        return set(int(i) for i in self.indices)


# ---------------------------------------------------------------------------
# multi-head union

def round_robin_order(scores: np.ndarray, k: int) -> tuple[np.ndarray, list[tuple[int, ...]]]:
    """Merge per-head rankings in fixed head order until ``k`` unique indices.

    Each turn a head takes its next-best index not yet collected.  Heads that
    pass over an already collected index are appended to its provenance.
    """
    scores = np.atleast_2d(scores)
    n_heads, L = scores.shape
    k = min(k, L)
    # a head consumes at most (k - 1) skips + ceil(k / n_heads) picks
    depth = min(L, 2 * k)
    rankings = [topk_indices(s, depth) for s in scores]
    ptr = [0] * n_heads
    pos_of: dict[int, int] = {}
    order: list[int] = []
    prov: list[list[int]] = []
    while len(order) < k:
        for h in range(n_heads):
            if len(order) >= k:
                break
            rank = rankings[h]
            while True:
                if ptr[h] >= rank.size:
                    rankings[h] = rank = full_ranking(scores[h])
                idx = int(rank[ptr[h]])
                ptr[h] += 1
                if idx in pos_of:
                    if h not in prov[pos_of[idx]]:
                        prov[pos_of[idx]].append(h)
                    continue
                pos_of[idx] = len(order)
                order.append(idx)
                prov.append([h])
                break
    return np.array(order, dtype=np.int64), [tuple(p) for p in prov]


def select_from_scores(scores: np.ndarray, k: int = DEFAULT_K) -> RetrievalResult:
    """CP-GSU selection given precomputed per-head scores (n_heads x L)."""
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    L = scores.shape[1]
    if L == 0:
        raise ValueError("retrieval over an empty behavior sequence")
    order, prov = round_robin_order(scores, k)
    if L <= k:
        by_head0 = full_ranking(scores[0])
        where = {int(i): p for i, p in zip(order, prov)}
        order = by_head0
        prov = [where[int(i)] for i in order]
    return RetrievalResult(order, scores, prov)


def head_scores(q, K_h, K_c, params: TwinParams, *, keys=None) -> np.ndarray:
    """Relevance scores for every head, shape n_heads x L.

    ``keys``, when given, is the (L, n_heads*d_k) concatenation of cached
    ``K_h W_h`` rows and replaces the projection of ``K_h``.
    """
    cfg = params.config
    out = []
    for a, head in enumerate(params.heads):
        if keys is None:
            s = relevance_scores(q, K_h, K_c, head, cross_bias=cfg.cross_bias)
        else:
            block = keys[:, a * cfg.d_k:(a + 1) * cfg.d_k]
            s = relevance_scores(q, block, K_c, head, precomputed=True, cross_bias=cfg.cross_bias)
        out.append(s)
    return np.stack(out)


def cp_gsu_retrieve(target: TargetItem, behaviors: BehaviorArrays, schema: FeatureSchema,
                    tables: Mapping[str, EmbeddingTable], params: TwinParams, *,
                    key_source=None, k: int = DEFAULT_K) -> RetrievalResult:
    """Consistency-preserved GSU.

    ``key_source`` is ``None`` for freshly projected keys, or any object with
    ``lookup(video_ids) -> (rows, miss_count)`` (a projection cache handle).
    """
    if len(behaviors) == 0:
        raise ValueError("retrieval over an empty behavior sequence")
    q = embed_target(target, schema, tables)
    K_c = cross_block(behaviors.cross, schema, tables) if schema.J else np.zeros((len(behaviors), 0))
    if key_source is None:
        K_h, _ = assemble_K(behaviors, schema, tables)
        scores = head_scores(q, K_h, K_c, params)
    else:
        rows, _ = key_source.lookup(behaviors.video_id)
        scores = head_scores(q, None, K_c, params, keys=rows)
    return select_from_scores(scores, k)


def oracle_topk(target: TargetItem, behaviors: BehaviorArrays, schema: FeatureSchema,
                tables: Mapping[str, EmbeddingTable], esu_params: TwinParams,
                k: int = DEFAULT_K, *, key_source=None) -> RetrievalResult:
    """The ESU's own metric applied to the whole sequence: "the real top-k".

    ``key_source`` may supply freshly projected rows (e.g. projected once for
    the whole pool); it must hold the current parameters' projections.
    """
    return cp_gsu_retrieve(target, behaviors, schema, tables, esu_params, key_source=key_source, k=k)


def recency_order(behaviors: BehaviorArrays) -> np.ndarray:
    """Most recent first; equal timestamps put the later position first."""
    L = len(behaviors)
    return np.lexsort((-np.arange(L), -behaviors.event_time))


def hard_gsu(target: TargetItem, behaviors: BehaviorArrays, k: int = DEFAULT_K,
             feature: str = "category") -> RetrievalResult:
    """Same-category behaviors, most recent first, padded with recent others."""
    if len(behaviors) == 0:
        raise ValueError("retrieval over an empty behavior sequence")
    order = recency_order(behaviors)
    same = behaviors.inherent[feature][order] == target.inherent[feature]
    ranked = np.concatenate([order[same], order[~same]])
    return RetrievalResult(ranked[:k])


def soft_gsu(target: TargetItem, behaviors: BehaviorArrays, pretrained, k: int = DEFAULT_K) -> RetrievalResult:
    """Top-k by inner product of frozen pre-trained video embeddings."""
    if len(behaviors) == 0:
        raise ValueError("retrieval over an empty behavior sequence")
    E = pretrained.weights if isinstance(pretrained, EmbeddingTable) else np.asarray(pretrained)
    ids = behaviors.video_id
    if ids.max() >= E.shape[0] or ids.min() < 0 or not 0 <= target.video_id < E.shape[0]:
        raise KeyError("video id missing from pre-trained embeddings")
    scores = matmul(E[ids], E[target.video_id])
    return RetrievalResult(topk_indices(scores, k), scores[None, :])


# ---------------------------------------------------------------------------
# consistency

def hit_rate(candidate: RetrievalResult, oracle: RetrievalResult) -> float:
    """Fraction of the oracle set that the candidate also retrieved."""
    truth = oracle.as_set()
    if not truth:
        return 1.0
    return len(candidate.as_set() & truth) / len(truth)


@dataclass
class RetrievalCase:
    """One (user, target) pair for consistency measurements."""

    target: TargetItem
    behaviors: BehaviorArrays


def gsu_ordering(gsu: GsuKind, case: RetrievalCase, schema: FeatureSchema, *,
                 tables, params: TwinParams, cache=None, pretrained=None,
                 hard_feature: str = "category") -> np.ndarray:
    """Full retrieval order for a method; its top-n output is the n-prefix."""
    L = len(case.behaviors)
    if gsu in (GsuKind.TWIN_CP, GsuKind.ORACLE):
        source = cache if gsu is GsuKind.TWIN_CP else None
        q = embed_target(case.target, schema, tables)
        K_c = cross_block(case.behaviors.cross, schema, tables) if schema.J else np.zeros((L, 0))
        if source is None:
            K_h, _ = assemble_K(case.behaviors, schema, tables)
            scores = head_scores(q, K_h, K_c, params)
        else:
            rows, _ = source.lookup(case.behaviors.video_id)
            scores = head_scores(q, None, K_c, params, keys=rows)
        return round_robin_order(scores, L)[0]
    if gsu is GsuKind.SIM_HARD:
        return hard_gsu(case.target, case.behaviors, L, feature=hard_feature).indices
    if gsu is GsuKind.SIM_SOFT:
        if pretrained is None:
            raise ValueError("SimSoft needs pre-trained embeddings")
        return soft_gsu(case.target, case.behaviors, pretrained, L).indices
    raise ValueError(f"unknown GSU {gsu!r}")


def hit_rate_curve(gsu: GsuKind, n_values: Sequence[int], cases: Sequence[RetrievalCase],
                   schema: FeatureSchema, *, tables, esu_params: TwinParams,
                   cache=None, pretrained=None,
                   k_oracle: int = DEFAULT_K) -> list[tuple[int, float, float]]:
    """Mean hit rate of the method's top-n against its own oracle top-k.

    ``tables``/``esu_params`` drive the oracle (fresh ESU parameters);
    ``cache`` feeds TwinCP its possibly stale keys.  Returns
    ``(n, mean, stderr)`` per requested n, with n clipped to each case's L.
    """
    n_values = list(n_values)
    if n_values != sorted(n_values):
        raise ValueError("n_values must be sorted ascending")
    rates = np.zeros((len(cases), len(n_values)))
    for c, case in enumerate(cases):
        oracle = oracle_topk(case.target, case.behaviors, schema, tables, esu_params, k_oracle).as_set()
        order = gsu_ordering(gsu, case, schema, tables=tables, params=esu_params,
                             cache=cache, pretrained=pretrained)
        for j, n in enumerate(n_values):
            got = set(int(i) for i in order[:n])
            rates[c, j] = len(got & oracle) / len(oracle)
    out = []
    for j, n in enumerate(n_values):
        col = rates[:, j]
        se = float(col.std(ddof=1) / np.sqrt(col.size)) if col.size > 1 else 0.0
        out.append((int(n), float(col.mean()), se))
    return out
