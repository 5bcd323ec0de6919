"""Split multi-head target attention and its dense reference.

Per head ``a`` the relevance of each behavior to the target is

    alpha = (K_h W_h)(q W_q)^T / sqrt(d_k) + (K_c W_c) beta

where ``K_c W_c`` compresses every 8-wide cross feature slice to a scalar with
its own weight vector.  The pooled head output is ``softmax(alpha) K W_v`` and
the module output concatenates the heads and applies ``W_o``.

The dense reference (:func:`raw_mhta_forward`) projects the full ``K`` with
unconstrained key/query matrices.  :func:`build_equivalent_dense` writes the
split parameters in that form so both paths can be compared directly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .features import CROSS_DIM
from .numerics import ShapeError, block_matvec, matmul, phase, rowwise_matmul, softmax


@dataclass(frozen=True)
class AttentionConfig:
    H: int
    J: int
    d_k: int = 32
    d_v: int = 32
    n_heads: int = 4
    d_out: int = 0  # raw-MHTA key width; 0 means d_k
    output_dim: int = 32
    cross_bias: bool = True

    def __post_init__(self):
        if self.d_out == 0:
            object.__setattr__(self, "d_out", self.d_k)
        for name in ("H", "d_k", "d_v", "n_heads", "d_out", "output_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"AttentionConfig.{name} must be >= 1")
        if self.J < 0:
            raise ValueError("AttentionConfig.J must be >= 0")

    @property
    def C(self) -> int:
        return CROSS_DIM * self.J

    @classmethod
    def for_schema(cls, schema, **kw) -> "AttentionConfig":
        return cls(H=schema.H, J=schema.J, **kw)


@dataclass
class HeadParams:
    W_q: np.ndarray  # H x d_k
    W_h: np.ndarray  # H x d_k
    w_c: np.ndarray  # J x 8
    beta: np.ndarray  # J
    W_v: np.ndarray  # (H+C) x d_v

    @classmethod
    def init(cls, cfg: AttentionConfig, rng: np.random.Generator) -> "HeadParams":
        HC = cfg.H + cfg.C
        return cls(
            W_q=rng.normal(0, 1 / math.sqrt(cfg.H), (cfg.H, cfg.d_k)),
            W_h=rng.normal(0, 1 / math.sqrt(cfg.H), (cfg.H, cfg.d_k)),
            w_c=rng.normal(0, 1 / math.sqrt(CROSS_DIM), (cfg.J, CROSS_DIM)),
            beta=rng.normal(0, 1.0, cfg.J),
            W_v=rng.normal(0, 1 / math.sqrt(HC), (HC, cfg.d_v)),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {"W_q": self.W_q, "W_h": self.W_h, "w_c": self.w_c, "beta": self.beta, "W_v": self.W_v}

    def copy(self) -> "HeadParams":
        return HeadParams(**{k: v.copy() for k, v in self.arrays().items()})


@dataclass
class TwinParams:
    config: AttentionConfig
    heads: list[HeadParams]
    W_o: np.ndarray  # (n_heads*d_v) x output_dim

    def __post_init__(self):
        if len(self.heads) != self.config.n_heads:
            raise ShapeError(f"{len(self.heads)} heads for n_heads={self.config.n_heads}")
        cfg = self.config
        for h in self.heads:
            _expect(h.W_q, (cfg.H, cfg.d_k), "W_q")
            _expect(h.W_h, (cfg.H, cfg.d_k), "W_h")
            _expect(h.w_c, (cfg.J, CROSS_DIM), "w_c")
            _expect(h.beta, (cfg.J,), "beta")
            _expect(h.W_v, (cfg.H + cfg.C, cfg.d_v), "W_v")
        _expect(self.W_o, (cfg.n_heads * cfg.d_v, cfg.output_dim), "W_o")

    @classmethod
    def init(cls, cfg: AttentionConfig, rng: np.random.Generator) -> "TwinParams":
        heads = [HeadParams.init(cfg, rng) for _ in range(cfg.n_heads)]
        W_o = rng.normal(0, 1 / math.sqrt(cfg.n_heads * cfg.d_v), (cfg.n_heads * cfg.d_v, cfg.output_dim))
        return cls(cfg, heads, W_o)

    @classmethod
    def zeros(cls, cfg: AttentionConfig) -> "TwinParams":
        p = cls.init(cfg, np.random.default_rng(0))
        for h in p.heads:
            for arr in h.arrays().values():
                arr[...] = 0.0
        p.W_o[...] = 0.0
        return p

    def copy(self) -> "TwinParams":
        return TwinParams(self.config, [h.copy() for h in self.heads], self.W_o.copy())

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for a, h in enumerate(self.heads):
            for k, v in h.arrays().items():
                out[f"head{a}.{k}"] = v
        out["W_o"] = self.W_o
        return out

    @classmethod
    def from_tensors(cls, cfg: AttentionConfig, tensors) -> "TwinParams":
        heads = [HeadParams(**{k: np.asarray(tensors[f"head{a}.{k}"], dtype=float).copy()
                               for k in ("W_q", "W_h", "w_c", "beta", "W_v")})
                 for a in range(cfg.n_heads)]
        return cls(cfg, heads, np.asarray(tensors["W_o"], dtype=float).copy())


def _expect(arr: np.ndarray, shape: tuple, name: str) -> None:
    if arr.shape != shape:
        raise ShapeError(f"{name} has shape {arr.shape}, expected {shape}")


# ---------------------------------------------------------------------------
# split path

def project_inherent(K_h, head: HeadParams) -> np.ndarray:
    """K_h W_h, the per-video unit that the serving cache stores."""
    K_h = np.asarray(K_h, dtype=float)
    if K_h.shape[-1] != head.W_h.shape[0]:
        raise ShapeError(f"K_h width {K_h.shape[-1]} != H {head.W_h.shape[0]}")
    return rowwise_matmul(K_h, head.W_h)


def compress_cross(K_c, head: HeadParams) -> np.ndarray:
    """Column j is the j-th 8-wide slice of K_c times w_c[j]; shape L x J."""
    K_c = np.asarray(K_c, dtype=float)
    if K_c.shape[-1] != CROSS_DIM * head.w_c.shape[0]:
        raise ShapeError(f"K_c width {K_c.shape[-1]} != 8*J = {CROSS_DIM * head.w_c.shape[0]}")
    return block_matvec(K_c, head.w_c)


def relevance_scores(q, K_h, K_c, head: HeadParams, *, precomputed: bool = False,
                     cross_bias: bool = True) -> np.ndarray:
    """Relevance of every behavior to the target, for one head.

    With ``precomputed=True`` the second argument is already ``K_h W_h``
    (L x d_k), e.g. rows gathered from the projection cache.
    """
    q = np.asarray(q, dtype=float)
    if q.shape != (head.W_q.shape[0],):
        raise ShapeError(f"q has shape {q.shape}, expected ({head.W_q.shape[0]},)")
    d_k = head.W_q.shape[1]
    with phase("query"):
        qp = matmul(q, head.W_q)
    if precomputed:
        keys = np.asarray(K_h, dtype=float)
        if keys.ndim != 2 or keys.shape[1] != d_k:
            raise ShapeError(f"precomputed keys have shape {keys.shape}, expected (L, {d_k})")
    else:
        with phase("projection"):
            keys = project_inherent(K_h, head)
    with phase("scoring"):
        alpha = matmul(keys, qp) / math.sqrt(d_k)
        if cross_bias and head.beta.size:
            K_c = np.asarray(K_c, dtype=float)
            if K_c.shape[0] != keys.shape[0]:
                raise ShapeError("K_h and K_c disagree on L")
            alpha = alpha + matmul(compress_cross(K_c, head), head.beta)
    return alpha


def head_attention(q, K_h, K_c, head: HeadParams, *, cross_bias: bool = True) -> np.ndarray:
    """softmax(alpha) (K W_v) over the given (retrieved) behaviors."""
    K_h = np.asarray(K_h, dtype=float)
    K_c = np.asarray(K_c, dtype=float)
    if K_h.shape[0] == 0:
        raise ShapeError("attention over an empty behavior set")
    alpha = relevance_scores(q, K_h, K_c, head, cross_bias=cross_bias)
    K = np.concatenate([K_h, K_c], axis=1)
    with phase("value"):
        values = matmul(K, head.W_v)
        return matmul(softmax(alpha), values)


def twin_forward(q, K_h, K_c, params: TwinParams) -> np.ndarray:
    """Concat(head_1..head_n) W_o over the retrieved behaviors."""
    if np.asarray(K_h).shape[0] == 0:
        raise ShapeError("twin_forward needs at least one behavior")
    cb = params.config.cross_bias
    heads = [head_attention(q, K_h, K_c, h, cross_bias=cb) for h in params.heads]
    with phase("output"):
        return matmul(np.concatenate(heads), params.W_o)


# ---------------------------------------------------------------------------
# dense reference

@dataclass
class DenseHead:
    W_q: np.ndarray  # (H+C) x d
    b_q: np.ndarray  # d
    W_k: np.ndarray  # (H+C) x d
    W_v: np.ndarray  # (H+C) x d_v
    scale: float

    def arrays(self) -> dict[str, np.ndarray]:
        return {"W_q": self.W_q, "b_q": self.b_q, "W_k": self.W_k, "W_v": self.W_v}


@dataclass
class DenseWeights:
    heads: list[DenseHead]
    W_o: np.ndarray

    @classmethod
    def init(cls, cfg: AttentionConfig, rng: np.random.Generator) -> "DenseWeights":
        HC = cfg.H + cfg.C
        heads = [DenseHead(
            W_q=rng.normal(0, 1 / math.sqrt(cfg.H), (HC, cfg.d_out)),
            b_q=np.zeros(cfg.d_out),
            W_k=rng.normal(0, 1 / math.sqrt(HC), (HC, cfg.d_out)),
            W_v=rng.normal(0, 1 / math.sqrt(HC), (HC, cfg.d_v)),
            scale=1 / math.sqrt(cfg.d_out),
        ) for _ in range(cfg.n_heads)]
        W_o = rng.normal(0, 1 / math.sqrt(cfg.n_heads * cfg.d_v), (cfg.n_heads * cfg.d_v, cfg.output_dim))
        return cls(heads, W_o)

    def copy(self) -> "DenseWeights":
        return DenseWeights([replace(h, **{k: v.copy() for k, v in h.arrays().items()}) for h in self.heads],
                            self.W_o.copy())


def pad_query(q, C: int) -> np.ndarray:
    """Target has no cross features: its cross block is zero."""
    return np.concatenate([np.asarray(q, dtype=float), np.zeros(C)])


def raw_scores(q, K, head: DenseHead) -> np.ndarray:
    K = np.asarray(K, dtype=float)
    q_pad = pad_query(q, K.shape[1] - len(q)) if len(q) < K.shape[1] else np.asarray(q, dtype=float)
    if q_pad.shape[0] != head.W_q.shape[0] or K.shape[1] != head.W_k.shape[0]:
        raise ShapeError("raw MHTA operand widths disagree with weights")
    with phase("query"):
        qp = matmul(q_pad, head.W_q) + head.b_q
    with phase("projection"):
        keys = matmul(K, head.W_k)
    with phase("scoring"):
        return matmul(keys, qp) * head.scale


def raw_mhta_forward(q, K, dense: DenseWeights) -> np.ndarray:
    """Conventional multi-head target attention over the full (H+C)-wide K."""
    K = np.asarray(K, dtype=float)
    if K.ndim != 2 or K.shape[0] == 0:
        raise ShapeError("raw_mhta_forward needs a non-empty L x (H+C) matrix")
    outs = []
    for head in dense.heads:
        alpha = raw_scores(q, K, head)
        with phase("value"):
            outs.append(matmul(softmax(alpha), matmul(K, head.W_v)))
    with phase("output"):
        return matmul(np.concatenate(outs), dense.W_o)


def build_equivalent_dense(params: TwinParams) -> DenseWeights:
    """Dense weights whose raw scoring reproduces the split scores exactly.

    Key projection is ``[[W_h, 0], [0, blockdiag(w_c)]]`` (width d_k + J).
    The query projection reads only the inherent block; ``sqrt(d_k) * beta``
    sits in the query bias so the shared ``1/sqrt(d_k)`` scale cancels on the
    cross part.
    """
    cfg = params.config
    H, C, J, d_k = cfg.H, cfg.C, cfg.J, cfg.d_k
    heads = []
    for h in params.heads:
        W_k = np.zeros((H + C, d_k + J))
        W_k[:H, :d_k] = h.W_h
        W_q = np.zeros((H + C, d_k + J))
        W_q[:H, :d_k] = h.W_q
        b_q = np.zeros(d_k + J)
        if cfg.cross_bias:
            for j in range(J):
                W_k[H + CROSS_DIM * j:H + CROSS_DIM * (j + 1), d_k + j] = h.w_c[j]
            b_q[d_k:] = math.sqrt(d_k) * h.beta
        heads.append(DenseHead(W_q=W_q, b_q=b_q, W_k=W_k, W_v=h.W_v.copy(), scale=1 / math.sqrt(d_k)))
    return DenseWeights(heads, params.W_o.copy())
