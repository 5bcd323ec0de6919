"""End-to-end CTR model over long behavior sequences, trained with numpy.

The model retrieves ``k`` behaviors from each user's long sequence with a
GSU, pools them with the multi-head target attention (the ESU), and feeds
the pooled vector together with the target embedding, context embeddings and
a short-term mean-pooled vector into a two-layer ReLU network.

Retrieval is a hard, non-differentiated choice; gradients flow through the
attention over the selected behaviors, the predictor and every embedding row
that was touched.  Embeddings are updated with AdaGrad and dense weights with
Adam.
"""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .attention import AttentionConfig, DenseWeights, TwinParams, build_equivalent_dense
from .features import (CROSS_DIM, MULTI_HOT, BehaviorArrays, EmbeddingTable, FeatureSchema,
                       FeatureSpec, VideoCatalog, init_tables)
from .numerics import topk_indices
from .retrieval import DEFAULT_K, GsuKind, hard_gsu, select_from_scores

log = logging.getLogger(__name__)

EPS_CLAMP = 1e-12
CONTEXT_FEATURES = (FeatureSpec("ctx_hour", "cross", 24), FeatureSpec("ctx_page", "cross", 10))

TWIN = "twin"
NO_BIAS = "nobias"
RAW = "raw"
ATTENTION_KINDS = (TWIN, NO_BIAS, RAW)


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# metrics

def auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs both classes")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class GaucResult:
    value: float
    users_used: int
    users_excluded: int


def gauc(scores, labels, users) -> GaucResult:
    """Per-user AUC averaged with sample-count weights.

    Users whose samples are all one class are excluded and counted.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    users = np.asarray(users)
    num = den = 0.0
    used = excluded = 0
    for u in np.unique(users):
        m = users == u
        y = labels[m]
        if y.min() == y.max():
            excluded += 1
            continue
        num += m.sum() * auc(scores[m], y)
        den += m.sum()
        used += 1
    return GaucResult(num / den if den else float("nan"), used, excluded)


# ---------------------------------------------------------------------------
# loss

@dataclass
class LossStats:
    clamped: int = 0


def loss(yhat, y, stats: LossStats | None = None) -> float:
    """Mean negative log-likelihood; predictions clamped to [1e-12, 1-1e-12]."""
    yhat = np.asarray(yhat, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any((yhat < 0) | (yhat > 1)):
        raise ValueError("predictions must lie in [0, 1]")
    p = np.clip(yhat, EPS_CLAMP, 1.0 - EPS_CLAMP)
    n_clamped = int(np.sum(p != yhat))
    if n_clamped:
        if stats is not None:
            stats.clamped += n_clamped
        log.warning("loss: clamped %d predictions at the boundary", n_clamped)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ---------------------------------------------------------------------------
# data

@dataclass
class CtrSample:
    user: int
    video_id: int
    label: int
    context: Mapping[str, int] = field(default_factory=dict)


@dataclass
class CtrDataset:
    schema: FeatureSchema
    catalog: VideoCatalog
    histories: Mapping[int, BehaviorArrays]
    samples: Sequence[CtrSample]

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, idx) -> "CtrDataset":
        return CtrDataset(self.schema, self.catalog, self.histories, [self.samples[i] for i in idx])

    @classmethod
    def from_log(cls, world, synthetic_log) -> "CtrDataset":
        samples = [CtrSample(s.user, s.video_id, s.label, s.context) for s in synthetic_log.samples]
        return cls(world.schema, world.catalog, synthetic_log.behaviors, samples)

    def split(self, test_fraction: float = 0.2) -> tuple["CtrDataset", "CtrDataset"]:
        """Per user, the last ``test_fraction`` of samples go to test."""
        by_user: dict[int, list[int]] = {}
        for i, s in enumerate(self.samples):
            by_user.setdefault(s.user, []).append(i)
        train, test = [], []
        for u in sorted(by_user):
            idx = by_user[u]
            n_test = int(round(len(idx) * test_fraction))
            train.extend(idx[:len(idx) - n_test])
            test.extend(idx[len(idx) - n_test:])
        return self.subset(train), self.subset(test)


# ---------------------------------------------------------------------------
# model

@dataclass
class ModelConfig:
    attention: AttentionConfig
    kind: str = TWIN
    hidden: tuple = (64, 32)
    k: int = DEFAULT_K
    gsu_input_len: int = 10000
    short_term: int = 50  # 0 disables the short-term mean-pooled block

    def __post_init__(self):
        if self.kind not in ATTENTION_KINDS:
            raise ValueError(f"unknown attention kind {self.kind!r}")
        self.hidden = tuple(int(h) for h in self.hidden)
        if len(self.hidden) != 2:
            raise ValueError("predictor has exactly two hidden layers")


@dataclass
class ModelParams:
    tables: dict[str, EmbeddingTable]
    attn: TwinParams | DenseWeights
    mlp: dict[str, np.ndarray]

    def dense_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        if isinstance(self.attn, TwinParams):
            out.update({f"attn.{k}": v for k, v in self.attn.tensors().items()})
        else:
            for a, h in enumerate(self.attn.heads):
                for k, v in h.arrays().items():
                    out[f"attn.head{a}.{k}"] = v
            out["attn.W_o"] = self.attn.W_o
        out.update({f"mlp.{k}": v for k, v in self.mlp.items()})
        return out

    def embedding_arrays(self) -> dict[str, np.ndarray]:
        return {f"emb.{k}": t.weights for k, t in self.tables.items()}

    def arrays(self) -> dict[str, np.ndarray]:
        return {**self.embedding_arrays(), **self.dense_arrays()}

    def copy(self) -> "ModelParams":
        tables = {k: EmbeddingTable(k, t.weights.copy()) for k, t in self.tables.items()}
        return ModelParams(tables, self.attn.copy(), {k: v.copy() for k, v in self.mlp.items()})


def predictor_input_dim(cfg: ModelConfig, schema: FeatureSchema) -> int:
    d = cfg.attention.output_dim + schema.H + CROSS_DIM * len(CONTEXT_FEATURES)
    if cfg.short_term:
        d += schema.H + schema.C
    return d


def init_params(cfg: ModelConfig, schema: FeatureSchema, rng: np.random.Generator) -> ModelParams:
    tables = init_tables(schema, rng)
    for f in CONTEXT_FEATURES:
        tables[f.name] = EmbeddingTable(f.name, rng.normal(0.0, 0.05, (f.vocab, f.dim)))
    attn = TwinParams.init(cfg.attention, rng)
    for head in attn.heads:
        # tied query/key projections: a behavior identical to the target scores
        # highest from the first step, so retrieval is meaningful before training
        head.W_q[...] = head.W_h
        head.beta[...] = 0.0
    if cfg.kind == RAW:
        attn = build_equivalent_dense(attn)
    d_in = predictor_input_dim(cfg, schema)
    h1, h2 = cfg.hidden
    mlp = {
        "W1": rng.normal(0, math.sqrt(2.0 / d_in), (d_in, h1)), "b1": np.zeros(h1),
        "W2": rng.normal(0, math.sqrt(2.0 / h1), (h1, h2)), "b2": np.zeros(h2),
        "W3": rng.normal(0, math.sqrt(1.0 / h2), (h2, 1)), "b3": np.zeros(1),
    }
    return ModelParams(tables, attn, mlp)


def inherent_rows(schema, tables, attrs: Mapping[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([tables[f.name].weights[attrs[f.name]] for f in schema.inherent], axis=-1)


def cross_rows(schema, tables, cross: Mapping[str, np.ndarray]) -> np.ndarray:
    cols = []
    for f in schema.cross:
        w = tables[f.name].weights
        v = cross[f.name]
        cols.append(v.astype(float) @ w if f.encoding == MULTI_HOT else w[v])
    if not cols:
        shape = next(iter(cross.values())).shape[:1] if cross else (0,)
        return np.zeros(shape + (0,))
    return np.concatenate(cols, axis=-1)


class GsuScorer:
    """Scores whole behavior sequences with the model's current parameters.

    Inherent keys are projected once for the whole video pool per parameter
    state; the cross bias collapses to a per-vocabulary scalar table for each
    cross feature, so a sequence costs one gather and an (L x d) dot per head.
    """

    def __init__(self, cfg: ModelConfig, schema: FeatureSchema, catalog: VideoCatalog,
                 params: ModelParams):
        self.cfg, self.schema, self.params = cfg, schema, params
        acfg = cfg.attention
        K_pool = inherent_rows(schema, params.tables, catalog.inherent)
        if cfg.kind == RAW:
            W = np.concatenate([h.W_k[:acfg.H] for h in params.attn.heads], axis=1)
        else:
            W = np.concatenate([h.W_h for h in params.attn.heads], axis=1)
        self.pool_keys = K_pool @ W
        heads = params.attn.heads
        if cfg.kind == RAW:
            self.width = heads[0].W_k.shape[1]
            self.W_q = np.stack([h.W_q[:acfg.H] for h in heads])  # A x H x d
            self.b_q = np.stack([h.b_q for h in heads])
            self.W_kc = np.stack([h.W_k[acfg.H:] for h in heads])  # A x C x d
            self.scale = np.array([h.scale for h in heads])
        else:
            self.width = acfg.d_k
            self.W_q = np.stack([h.W_q for h in heads])
            self.bias_tables = None
            if cfg.kind == TWIN and acfg.J:
                u = np.stack([(h.w_c * h.beta[:, None]).reshape(-1) for h in heads])  # A x C
                self.bias_tables = self._vocab_tables(u)

    def _vocab_tables(self, u: np.ndarray) -> dict[str, np.ndarray]:
        """Per cross feature, the scalar each vocabulary entry adds per head (A x vocab)."""
        off = self.schema.offsets("cross")
        return {f.name: u[:, off[f.name]] @ self.params.tables[f.name].weights.T for f in self.schema.cross}

    def project(self, video_ids) -> np.ndarray:
        return self.pool_keys[np.asarray(video_ids)]

    def scores(self, q: np.ndarray, hist: BehaviorArrays, keys: np.ndarray | None = None) -> np.ndarray:
        """Per-head relevance of every behavior in ``hist`` (n_heads x L)."""
        acfg = self.cfg.attention
        if keys is None:
            keys = self.project(hist.video_id)
        L, A = len(hist), acfg.n_heads
        keys = keys.reshape(L, A, self.width).transpose(1, 0, 2)
        qp = np.matmul(q, self.W_q)  # A x d
        if self.cfg.kind == RAW:
            qp = qp + self.b_q
            alpha = np.matmul(keys, qp[:, :, None])[:, :, 0]
            u = np.matmul(self.W_kc, qp[:, :, None])[:, :, 0]  # A x C
            alpha = alpha + self._bias(hist, self._vocab_tables(u))
            return alpha * self.scale[:, None]
        alpha = np.matmul(keys, qp[:, :, None])[:, :, 0] / math.sqrt(acfg.d_k)
        if self.bias_tables is not None:
            alpha = alpha + self._bias(hist, self.bias_tables)
        return alpha

    def _bias(self, hist: BehaviorArrays, tables: Mapping[str, np.ndarray]) -> np.ndarray:
        total = 0.0
        for f in self.schema.cross:
            t = tables[f.name]
            v = hist.cross[f.name]
            if f.encoding == MULTI_HOT:
                total = total + t @ v.T.astype(float)
            else:
                total = total + t[:, v]
        return total


@dataclass
class ForwardCache:
    sel: list[np.ndarray]
    mask: np.ndarray
    tensors: dict


class CtrModel:
    """Forward/backward over batches for one model configuration."""

    def __init__(self, cfg: ModelConfig, schema: FeatureSchema, params: ModelParams):
        self.cfg, self.schema, self.params = cfg, schema, params

    # -- retrieval ---------------------------------------------------------

    def retrieve(self, batch: CtrDataset, gsu: GsuKind, *, pretrained=None, cache=None) -> list[np.ndarray]:
        """Indices (into each sample's GSU input window) of the ESU behaviors."""
        cfg = self.cfg
        scorer = None
        if gsu is GsuKind.SIM_SOFT and pretrained is None:
            raise ValueError("SimSoft retrieval needs pre-trained video embeddings")
        if gsu in (GsuKind.TWIN_CP, GsuKind.ORACLE):
            scorer = GsuScorer(cfg, self.schema, batch.catalog, self.params)
            if gsu is GsuKind.TWIN_CP and cache is not None:
                # the projector rebuilds the cache from the current parameters
                cache.refresh(scorer.project, np.arange(len(batch.catalog)))
        out = []
        for s in batch.samples:
            hist = batch.histories[s.user].tail(cfg.gsu_input_len)
            target = batch.catalog.target(s.video_id)
            if gsu is GsuKind.SIM_HARD:
                idx = hard_gsu(target, hist, cfg.k).indices
            elif gsu is GsuKind.SIM_SOFT:
                E = pretrained.weights if isinstance(pretrained, EmbeddingTable) else pretrained
                idx = topk_indices(E[hist.video_id] @ E[s.video_id], cfg.k)
            else:
                q = inherent_rows(self.schema, self.params.tables, batch.catalog.attributes([s.video_id]))[0]
                keys = None
                if gsu is GsuKind.TWIN_CP and cache is not None:
                    keys, _ = cache.lookup(hist.video_id)
                idx = select_from_scores(scorer.scores(q, hist, keys), cfg.k).indices
            out.append(np.asarray(idx, dtype=np.int64))
        return out

    # -- forward -----------------------------------------------------------

    def forward(self, batch: CtrDataset, gsu: GsuKind = GsuKind.TWIN_CP, *, selected=None,
                pretrained=None, cache=None) -> tuple[np.ndarray, ForwardCache]:
        cfg, schema, P = self.cfg, self.schema, self.params
        acfg = cfg.attention
        tables = P.tables
        if len(batch) == 0:
            raise ValueError("empty batch")
        if selected is None:
            selected = self.retrieve(batch, gsu, pretrained=pretrained, cache=cache)
        B, k = len(batch), cfg.k
        C = schema.C
        mask = np.zeros((B, k), dtype=bool)
        vid = np.zeros((B, k), dtype=np.int64)
        cross_vals = {f.name: (np.zeros((B, k, f.vocab), dtype=np.uint8) if f.encoding == MULTI_HOT
                               else np.zeros((B, k), dtype=np.int64)) for f in schema.cross}
        recent_attrs, recent_cross, recent_n = [], [], np.zeros(B)
        for b, s in enumerate(batch.samples):
            hist = batch.histories[s.user]
            if len(hist) == 0:
                raise ValueError(f"user {s.user} has no behaviors")
            window = hist.tail(cfg.gsu_input_len)
            idx = selected[b]
            n = idx.size
            mask[b, :n] = True
            vid[b, :n] = window.video_id[idx]
            for f in schema.cross:
                cross_vals[f.name][b, :n] = window.cross[f.name][idx]
            if cfg.short_term:
                recent = hist.tail(cfg.short_term)
                recent_attrs.append(recent.inherent)
                recent_cross.append(recent.cross)
                recent_n[b] = len(recent)

        attrs_sel = batch.catalog.attributes(vid)
        Xh = inherent_rows(schema, tables, attrs_sel)  # B k H
        Xc = cross_rows(schema, tables, cross_vals) if schema.J else np.zeros((B, k, 0))
        X = np.concatenate([Xh, Xc], axis=-1)
        tgt = np.array([s.video_id for s in batch.samples])
        attrs_tgt = batch.catalog.attributes(tgt)
        q = inherent_rows(schema, tables, attrs_tgt)  # B H

        heads, head_cache = [], []
        for head in P.attn.heads:
            # scores as X . (W_k qp): the query is mapped into the key input space
            # once per sample instead of projecting every selected row
            cc = None
            if cfg.kind == RAW:
                qt = np.concatenate([q, np.zeros((B, C))], axis=1)
                qp = qt @ head.W_q + head.b_q
                r = (qp @ head.W_k.T) * head.scale
                alpha = _bdot(X, r)
            else:
                qp = q @ head.W_q
                r = (qp @ head.W_h.T) / math.sqrt(acfg.d_k)
                alpha = _bdot(Xh, r)
                if cfg.kind == TWIN and acfg.J:
                    cc = (Xc.reshape(B, k, acfg.J, CROSS_DIM) * head.w_c).sum(axis=-1)
                    alpha = alpha + cc @ head.beta
            alpha = np.where(mask, alpha, -np.inf)
            alpha = alpha - alpha.max(axis=1, keepdims=True)
            e = np.where(mask, np.exp(alpha), 0.0)
            att = e / e.sum(axis=1, keepdims=True)
            pooled = _bpool(att, X)
            heads.append(pooled @ head.W_v)
            head_cache.append({"qp": qp, "r": r, "cc": cc, "att": att, "pooled": pooled})
        Hcat = np.concatenate(heads, axis=1)
        twin_out = Hcat @ P.attn.W_o

        ctx_ids = {f.name: np.array([s.context.get(f.name[4:], 0) for s in batch.samples], dtype=np.int64)
                   for f in CONTEXT_FEATURES}
        ctx = np.concatenate([tables[f.name].weights[ctx_ids[f.name]] for f in CONTEXT_FEATURES], axis=1)
        parts = [twin_out, q, ctx]
        if cfg.short_term:
            recent_attrs = {f.name: np.concatenate([r[f.name] for r in recent_attrs]) for f in schema.inherent}
            recent_cross = {f.name: np.concatenate([r[f.name] for r in recent_cross]) for f in schema.cross}
            rows = inherent_rows(schema, tables, recent_attrs)
            if schema.J:
                rows = np.concatenate([rows, cross_rows(schema, tables, recent_cross)], axis=1)
            starts = np.concatenate([[0], np.cumsum(recent_n)[:-1]]).astype(np.int64)
            parts.append(np.add.reduceat(rows, starts, axis=0) / recent_n[:, None])
        z0 = np.concatenate(parts, axis=1)
        m = P.mlp
        a1 = z0 @ m["W1"] + m["b1"]
        h1 = np.maximum(a1, 0.0)
        a2 = h1 @ m["W2"] + m["b2"]
        h2 = np.maximum(a2, 0.0)
        logit = (h2 @ m["W3"] + m["b3"])[:, 0]
        yhat = sigmoid(logit)
        cache = ForwardCache(selected, mask, {
            "vid": vid, "cross_vals": cross_vals, "attrs_sel": attrs_sel, "attrs_tgt": attrs_tgt,
            "Xh": Xh, "Xc": Xc, "X": X, "q": q, "heads": head_cache, "Hcat": Hcat,
            "ctx_ids": ctx_ids, "z0": z0, "a1": a1, "h1": h1, "a2": a2, "h2": h2,
            "recent_attrs": recent_attrs, "recent_cross": recent_cross, "recent_n": recent_n,
            "twin_out": twin_out,
        })
        return yhat, cache

    # -- backward ----------------------------------------------------------

    def backward(self, cache: ForwardCache, yhat: np.ndarray, y) -> dict[str, np.ndarray]:
        """Gradients of the mean NLL w.r.t. every array in :meth:`ModelParams.arrays`."""
        cfg, schema, P = self.cfg, self.schema, self.params
        acfg = cfg.attention
        T = cache.tensors
        y = np.asarray(y, dtype=float)
        B = y.size
        H, C = schema.H, schema.C
        grads = {name: np.zeros_like(arr) for name, arr in P.arrays().items()}

        dlogit = (yhat - y) / B
        m = P.mlp
        grads["mlp.W3"] = T["h2"].T @ dlogit[:, None]
        grads["mlp.b3"] = np.array([dlogit.sum()])
        dh2 = dlogit[:, None] @ m["W3"].T
        da2 = dh2 * (T["a2"] > 0)
        grads["mlp.W2"] = T["h1"].T @ da2
        grads["mlp.b2"] = da2.sum(axis=0)
        dh1 = da2 @ m["W2"].T
        da1 = dh1 * (T["a1"] > 0)
        grads["mlp.W1"] = T["z0"].T @ da1
        grads["mlp.b1"] = da1.sum(axis=0)
        dz0 = da1 @ m["W1"].T

        o = acfg.output_dim
        d_out = dz0[:, :o]
        dq = dz0[:, o:o + H].copy()
        pos = o + H
        dctx = dz0[:, pos:pos + CROSS_DIM * len(CONTEXT_FEATURES)]
        pos += CROSS_DIM * len(CONTEXT_FEATURES)
        dshort = dz0[:, pos:pos + H + C] if cfg.short_term else None

        grads["attn.W_o"] = T["Hcat"].T @ d_out
        dHcat = d_out @ P.attn.W_o.T
        X, Xh, Xc, q = T["X"], T["Xh"], T["Xc"], T["q"]
        row_w, row_v = [], []
        dv = acfg.d_v
        for a, (head, hc) in enumerate(zip(P.attn.heads, T["heads"])):
            dh = dHcat[:, a * dv:(a + 1) * dv]
            att, pooled, qp, r = hc["att"], hc["pooled"], hc["qp"], hc["r"]
            grads[f"attn.head{a}.W_v"] = pooled.T @ dh
            dpooled = dh @ head.W_v.T
            datt = _bdot(X, dpooled)
            dalpha = att * (datt - np.sum(att * datt, axis=1, keepdims=True))
            row_w.append(att)
            row_v.append(dpooled)
            if cfg.kind == RAW:
                row_w.append(dalpha)
                row_v.append(r)
                dr = _bpool(dalpha, X) * head.scale
                grads[f"attn.head{a}.W_k"] = dr.T @ qp
                dqp = dr @ head.W_k
                qt = np.concatenate([q, np.zeros((B, C))], axis=1)
                grads[f"attn.head{a}.W_q"] = qt.T @ dqp
                grads[f"attn.head{a}.b_q"] = dqp.sum(axis=0)
                dq += (dqp @ head.W_q.T)[:, :H]
                continue
            u = np.concatenate([r, np.zeros((B, C))], axis=1)
            dr = _bpool(dalpha, Xh) / math.sqrt(acfg.d_k)
            grads[f"attn.head{a}.W_h"] = dr.T @ qp
            dqp = dr @ head.W_h
            grads[f"attn.head{a}.W_q"] = q.T @ dqp
            dq += dqp @ head.W_q.T
            if hc["cc"] is not None:
                J = acfg.J
                grads[f"attn.head{a}.beta"] = _bpool(dalpha, hc["cc"]).sum(axis=0)
                sc = _bpool(dalpha, Xc).sum(axis=0).reshape(J, CROSS_DIM)
                grads[f"attn.head{a}.w_c"] = head.beta[:, None] * sc
                u[:, H:] = (head.beta[:, None] * head.w_c).reshape(-1)
            row_w.append(dalpha)
            row_v.append(u)
        # every head contributes rank-one (B, k) x (B, H+C) terms to dX
        dX = np.matmul(np.stack(row_w, axis=2), np.stack(row_v, axis=1))

        dX[~cache.mask] = 0.0
        self._scatter_inherent(grads, T["attrs_sel"], dX[:, :, :H])
        self._scatter_cross(grads, T["cross_vals"], dX[:, :, H:])
        self._scatter_inherent(grads, T["attrs_tgt"], dq)
        col = 0
        for f in CONTEXT_FEATURES:
            scatter_add(grads[f"emb.{f.name}"], T["ctx_ids"][f.name], dctx[:, col:col + CROSS_DIM])
            col += CROSS_DIM
        if dshort is not None:
            n = T["recent_n"]
            g = np.repeat(dshort / n[:, None], n.astype(np.int64), axis=0)
            self._scatter_inherent(grads, T["recent_attrs"], g[:, :H])
            self._scatter_cross(grads, T["recent_cross"], g[:, H:])
        return grads

    def _scatter_inherent(self, grads, attrs, d):
        off = self.schema.offsets("inherent")
        for f in self.schema.inherent:
            sl = off[f.name]
            scatter_add(grads[f"emb.{f.name}"], attrs[f.name].reshape(-1), d[..., sl].reshape(-1, f.dim))

    def _scatter_cross(self, grads, vals, d):
        off = self.schema.offsets("cross")
        for f in self.schema.cross:
            g = d[..., off[f.name]].reshape(-1, f.dim)
            v = vals[f.name]
            if f.encoding == MULTI_HOT:
                grads[f"emb.{f.name}"] += v.reshape(-1, f.vocab).T.astype(float) @ g
            else:
                scatter_add(grads[f"emb.{f.name}"], v.reshape(-1), g)


def finite_difference_errors(model: CtrModel, batch: CtrDataset, selected, eps: float = 1e-5) -> dict[str, float]:
    """Relative error between backward and central differences, per parameter array.

    The error of an array is ``|g - n| / max(|g| + |n|, tiny)`` over its
    flattened entries (Euclidean norms).  Retrieval is fixed by ``selected``.
    """
    y = np.array([s.label for s in batch.samples], dtype=float)
    yhat, fc = model.forward(batch, selected=selected)
    grads = model.backward(fc, yhat, y)
    out = {}
    for name, arr in model.params.arrays().items():
        num = np.zeros_like(arr)
        flat, nflat = arr.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = loss(model.forward(batch, selected=selected)[0], y)
            flat[i] = old - eps
            down = loss(model.forward(batch, selected=selected)[0], y)
            flat[i] = old
            nflat[i] = (up - down) / (2 * eps)
        g = grads[name]
        denom = max(np.linalg.norm(g) + np.linalg.norm(num), 1e-12)
        out[name] = float(np.linalg.norm(g - num) / denom)
    return out


def scatter_add(target: np.ndarray, ids: np.ndarray, rows: np.ndarray) -> None:
    """``target[ids] += rows`` with repeated ids accumulated, in a fixed order."""
    if ids.size == 0:
        return
    order = np.argsort(ids, kind="stable")
    uniq, starts = np.unique(ids[order], return_index=True)
    target[uniq] += np.add.reduceat(rows[order], starts, axis=0)


def _bdot(A, v):
    """(B, k, d) . (B, d) -> (B, k)"""
    return np.matmul(A, v[:, :, None])[:, :, 0]


def _bpool(w, A):
    """(B, k) weights over (B, k, d) rows -> (B, d)"""
    return np.matmul(w[:, None, :], A)[:, 0, :]


# ---------------------------------------------------------------------------
# optimizers

@dataclass
class OptimState:
    """AdaGrad accumulators for embeddings, Adam moments for dense weights."""

    accum: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, params: ModelParams, adagrad_init: float = 0.1) -> "OptimState":
        emb = params.embedding_arrays()
        dense = params.dense_arrays()
        return cls({k: np.full_like(a, adagrad_init) for k, a in emb.items()},
                   {k: np.zeros_like(a) for k, a in dense.items()},
                   {k: np.zeros_like(a) for k, a in dense.items()})


def apply_updates(params: ModelParams, grads: Mapping[str, np.ndarray], state: OptimState, *,
                  lr_embedding: float = 0.05, lr_dense: float = 5e-6,
                  betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """One in-place optimizer step over every parameter array."""
    state.step += 1
    for name, w in params.embedding_arrays().items():
        g = grads[name]
        acc = state.accum[name]
        acc += g * g
        w -= lr_embedding * g / np.sqrt(acc)
    b1, b2 = betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, w in params.dense_arrays().items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        w -= lr_dense * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 256
    lr_embedding: float = 0.05
    lr_dense: float = 5e-6
    adagrad_init: float = 0.1
    seed: int = 0


@dataclass
class TrainResult:
    params: ModelParams
    losses: list[float]
    clamped: int = 0


def train(dataset: CtrDataset, model_cfg: ModelConfig, train_cfg: TrainConfig, gsu: GsuKind, *,
          params: ModelParams | None = None, pretrained=None, cache=None,
          metrics_path=None, eval_set: CtrDataset | None = None) -> TrainResult:
    """Minibatch training; deterministic given ``train_cfg.seed`` and ``params``."""
    gsu = GsuKind(gsu)
    rng = np.random.default_rng([train_cfg.seed, 17])
    if params is None:
        params = init_params(model_cfg, dataset.schema, np.random.default_rng([train_cfg.seed, 3]))
    else:
        params = params.copy()
    model = CtrModel(model_cfg, dataset.schema, params)
    state = OptimState.init(params, train_cfg.adagrad_init)
    stats = LossStats()
    losses: list[float] = []
    n = len(dataset)
    writer = _MetricsWriter(metrics_path) if metrics_path else None
    for epoch in range(train_cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, train_cfg.batch_size):
            batch = dataset.subset(perm[start:start + train_cfg.batch_size])
            y = np.array([s.label for s in batch.samples], dtype=float)
            yhat, fc = model.forward(batch, gsu, pretrained=pretrained, cache=cache)
            value = loss(yhat, y, stats)
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"loss became {value} at epoch {epoch}, step {len(losses)}; "
                    f"lr_dense={train_cfg.lr_dense}, lr_embedding={train_cfg.lr_embedding}")
            losses.append(value)
            grads = model.backward(fc, yhat, y)
            apply_updates(params, grads, state, lr_embedding=train_cfg.lr_embedding,
                          lr_dense=train_cfg.lr_dense)
            if writer:
                writer.row(len(losses), value)
        if writer and eval_set is not None:
            ev = evaluate(model, eval_set, gsu, pretrained=pretrained, cache=cache)
            writer.row(len(losses), losses[-1], ev["auc"], ev["gauc"])
    if writer:
        writer.close()
    return TrainResult(params, losses, stats.clamped)


class _MetricsWriter:
    def __init__(self, path):
        exists = os.path.exists(path) and os.path.getsize(path) > 0
        self._fh = open(path, "a", newline="")
        self._w = csv.writer(self._fh)
        if not exists:
            self._w.writerow(["step", "loss", "auc", "gauc"])

    def row(self, step, value, a="", g=""):
        self._w.writerow([step, repr(float(value)), a if a == "" else repr(a), g if g == "" else repr(g)])

    def close(self):
        self._fh.close()


def predict(model: CtrModel, dataset: CtrDataset, gsu: GsuKind, *, batch_size: int = 512,
            pretrained=None, cache=None) -> np.ndarray:
    out = []
    for start in range(0, len(dataset), batch_size):
        batch = dataset.subset(range(start, min(start + batch_size, len(dataset))))
        out.append(model.forward(batch, GsuKind(gsu), pretrained=pretrained, cache=cache)[0])
    return np.concatenate(out)


def evaluate(model: CtrModel, dataset: CtrDataset, gsu: GsuKind, *, pretrained=None, cache=None) -> dict:
    yhat = predict(model, dataset, gsu, pretrained=pretrained, cache=cache)
    y = np.array([s.label for s in dataset.samples])
    users = np.array([s.user for s in dataset.samples])
    g = gauc(yhat, y, users)
    return {"auc": auc(yhat, y), "gauc": g.value, "users_used": g.users_used,
            "users_excluded": g.users_excluded, "loss": loss(yhat, y)}
