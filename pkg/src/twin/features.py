"""Feature schema, hot encoding, embedding lookup and the split behavior matrix.

Every feature is categorical.  Inherent features describe a video and are
shared by every user who watched it; cross features describe one user's
interaction with one video.  A behavior sequence becomes two matrices: ``K_h``
(L x H, inherent embeddings) and ``K_c`` (L x C, cross embeddings), columns
laid out in schema order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

INHERENT = "inherent"
CROSS = "cross"
ONE_HOT = "one-hot"
MULTI_HOT = "multi-hot"

ID_DIM = 64
SMALL_DIM = 8
CROSS_DIM = 8


class SchemaError(ValueError):
    """Bad schema declaration or a value that does not fit it."""


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str
    vocab: int
    encoding: str = ONE_HOT
    dim: int = 0  # 0 -> 64 for *_id features, 8 otherwise

    def __post_init__(self):
        if self.kind not in (INHERENT, CROSS):
            raise SchemaError(f"{self.name}: kind must be inherent|cross, got {self.kind!r}")
        if self.encoding not in (ONE_HOT, MULTI_HOT):
            raise SchemaError(f"{self.name}: unknown encoding {self.encoding!r}")
        if self.vocab < 1:
            raise SchemaError(f"{self.name}: vocab must be positive")
        if self.dim == 0:
            object.__setattr__(self, "dim", ID_DIM if self.name.endswith("_id") else SMALL_DIM)
        if self.dim < 1:
            raise SchemaError(f"{self.name}: dim must be positive")
        if self.kind == CROSS and self.dim != CROSS_DIM:
            raise SchemaError(f"{self.name}: cross features are {CROSS_DIM}-dimensional")

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureSpec":
        return cls(
            name=str(d["name"]),
            kind=str(d["kind"]),
            vocab=int(d["vocab"]),
            encoding=str(d.get("encoding", ONE_HOT)),
            dim=int(d.get("dim", 0)),
        )

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "encoding": self.encoding,
                "vocab": self.vocab, "dim": self.dim}


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[FeatureSpec, ...]

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate feature names")
        if not self.inherent:
            raise SchemaError("schema needs at least one inherent feature")

    @classmethod
    def from_dicts(cls, items: Iterable[Mapping]) -> "FeatureSchema":
        return cls(tuple(FeatureSpec.from_dict(d) for d in items))

    def to_dicts(self) -> list[dict]:
        return [f.to_dict() for f in self.features]

    @property
    def inherent(self) -> tuple[FeatureSpec, ...]:
        return tuple(f for f in self.features if f.kind == INHERENT)

    @property
    def cross(self) -> tuple[FeatureSpec, ...]:
        return tuple(f for f in self.features if f.kind == CROSS)

    @property
    def H(self) -> int:
        return sum(f.dim for f in self.inherent)

    @property
    def J(self) -> int:
        return len(self.cross)

    @property
    def C(self) -> int:
        return CROSS_DIM * self.J

    def __getitem__(self, name: str) -> FeatureSpec:
        for f in self.features:
            if f.name == name:
                return f
        raise KeyError(name)

    def offsets(self, kind: str) -> dict[str, slice]:
        """Column slice of each feature inside K_h (inherent) or K_c (cross)."""
        out, pos = {}, 0
        for f in self.features:
            if f.kind == kind:
                out[f.name] = slice(pos, pos + f.dim)
                pos += f.dim
        return out


def default_schema(n_videos: int, n_authors: int, n_categories: int = 37,
                   n_durations: int = 8) -> FeatureSchema:
    """Two id features (64) + two small inherent (8) and five 8-wide cross features.

    H = 144, J = 5, C = 40.
    """
    return FeatureSchema((
        FeatureSpec("video_id", INHERENT, n_videos),
        FeatureSpec("author_id", INHERENT, n_authors),
        FeatureSpec("category", INHERENT, n_categories),
        FeatureSpec("duration_bucket", INHERENT, n_durations),
        FeatureSpec("timestamp_bucket", CROSS, 24),
        FeatureSpec("playtime_bucket", CROSS, 10),
        FeatureSpec("page_position", CROSS, 10),
        FeatureSpec("interaction_flags", CROSS, 4, encoding=MULTI_HOT),
        FeatureSpec("recency_bucket", CROSS, 16),
    ))


# ---------------------------------------------------------------------------
# records

@dataclass(frozen=True)
class TargetItem:
    video_id: int
    inherent: Mapping[str, int]


@dataclass(frozen=True)
class BehaviorRecord:
    video_id: int
    inherent: Mapping[str, int]
    cross: Mapping[str, Union[int, tuple]]
    event_time: float = 0.0

    def target(self) -> TargetItem:
        return TargetItem(self.video_id, dict(self.inherent))


@dataclass
class BehaviorArrays:
    """Columnar behavior sequence, the working form for long sequences.

    One-hot features hold an int array of shape (L,); multi-hot features hold
    a 0/1 matrix of shape (L, vocab).
    """

    video_id: np.ndarray
    event_time: np.ndarray
    inherent: dict[str, np.ndarray]
    cross: dict[str, np.ndarray]

    def __len__(self) -> int:
        return int(self.video_id.shape[0])

    def take(self, idx) -> "BehaviorArrays":
        idx = np.asarray(idx)
        return BehaviorArrays(
            video_id=self.video_id[idx],
            event_time=self.event_time[idx],
            inherent={k: v[idx] for k, v in self.inherent.items()},
            cross={k: v[idx] for k, v in self.cross.items()},
        )

    def tail(self, n: int) -> "BehaviorArrays":
        """The ``n`` most recent behaviors (sequences are stored oldest first)."""
        L = len(self)
        return self if n >= L else self.take(np.arange(L - n, L))

    @classmethod
    def from_records(cls, records: Sequence[BehaviorRecord], schema: FeatureSchema) -> "BehaviorArrays":
        if not records:
            raise SchemaError("empty behavior sequence")
        inherent = {f.name: np.array([r.inherent[f.name] for r in records], dtype=np.int64)
                    for f in schema.inherent}
        cross = {}
        for f in schema.cross:
            if f.encoding == MULTI_HOT:
                cross[f.name] = np.stack([encode_hot(r.cross[f.name], f) for r in records])
            else:
                cross[f.name] = np.array([r.cross[f.name] for r in records], dtype=np.int64)
        return cls(
            video_id=np.array([r.video_id for r in records], dtype=np.int64),
            event_time=np.array([r.event_time for r in records], dtype=float),
            inherent=inherent,
            cross=cross,
        )

    def to_records(self, schema: FeatureSchema) -> list[BehaviorRecord]:
        out = []
        for i in range(len(self)):
            cross = {}
            for f in schema.cross:
                col = self.cross[f.name]
                if f.encoding == MULTI_HOT:
                    cross[f.name] = tuple(int(j) for j in np.flatnonzero(col[i]))
                else:
                    cross[f.name] = int(col[i])
            out.append(BehaviorRecord(
                video_id=int(self.video_id[i]),
                inherent={f.name: int(self.inherent[f.name][i]) for f in schema.inherent},
                cross=cross,
                event_time=float(self.event_time[i]),
            ))
        return out


# ---------------------------------------------------------------------------
# encoding and lookup

@dataclass
class EmbeddingTable:
    """Embedding dictionary for one feature.

    ``weights`` is stored vocab-major (v_A x d_A) so a lookup is a row
    gather; ``matrix`` is the d_A x v_A view that multiplies hot vectors.
    """

    name: str
    weights: np.ndarray

    @property
    def matrix(self) -> np.ndarray:
        return self.weights.T

    @property
    def vocab(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


def init_tables(schema: FeatureSchema, rng: np.random.Generator,
                scale: float = 0.05) -> dict[str, EmbeddingTable]:
    return {f.name: EmbeddingTable(f.name, rng.normal(0.0, scale, size=(f.vocab, f.dim)))
            for f in schema.features}


def encode_hot(values, feature: FeatureSpec) -> np.ndarray:
    """One-hot (single int) or multi-hot (iterable of ints) code of length vocab."""
    hot = np.zeros(feature.vocab, dtype=np.uint8)
    if feature.encoding == ONE_HOT:
        idx = [values]
    else:
        idx = list(values)
    for v in idx:
        v = int(v)
        if not 0 <= v < feature.vocab:
            raise SchemaError(f"{feature.name}: value {v} outside vocab {feature.vocab}")
        hot[v] = 1
    return hot


def embed(hot, table: EmbeddingTable) -> np.ndarray:
    """E_A @ x_hot: the selected column, or the sum of selected columns."""
    hot = np.asarray(hot, dtype=float)
    if hot.shape != (table.vocab,):
        raise SchemaError(f"{table.name}: hot vector length {hot.shape} != vocab {table.vocab}")
    return table.matrix @ hot


def _check_range(name: str, values: np.ndarray, vocab: int) -> None:
    if values.size and (values.min() < 0 or values.max() >= vocab):
        raise SchemaError(f"{name}: value outside vocab {vocab}")


def inherent_block(inherent: Mapping[str, np.ndarray], schema: FeatureSchema,
                   tables: Mapping[str, EmbeddingTable]) -> np.ndarray:
    cols = []
    for f in schema.inherent:
        ids = np.asarray(inherent[f.name], dtype=np.int64)
        _check_range(f.name, ids, f.vocab)
        cols.append(tables[f.name].weights[ids])
    return np.concatenate(cols, axis=-1)


def cross_block(cross: Mapping[str, np.ndarray], schema: FeatureSchema,
                tables: Mapping[str, EmbeddingTable]) -> np.ndarray:
    cols = []
    for f in schema.cross:
        col = np.asarray(cross[f.name])
        w = tables[f.name].weights
        if f.encoding == MULTI_HOT:
            if col.shape[-1] != f.vocab:
                raise SchemaError(f"{f.name}: multi-hot width {col.shape[-1]} != vocab {f.vocab}")
            cols.append(col.astype(float) @ w)
        else:
            _check_range(f.name, col, f.vocab)
            cols.append(w[col])
    if not cols:
        lead = np.asarray(next(iter(cross.values()))).shape[:1] if cross else (0,)
        return np.zeros(lead + (0,))
    return np.concatenate(cols, axis=-1)


def assemble_K(behaviors, schema: FeatureSchema,
               tables: Mapping[str, EmbeddingTable]) -> tuple[np.ndarray, np.ndarray]:
    """Build ``(K_h, K_c)`` for a behavior sequence (records or arrays)."""
    if not isinstance(behaviors, BehaviorArrays):
        behaviors = BehaviorArrays.from_records(list(behaviors), schema)
    if len(behaviors) == 0:
        raise SchemaError("empty behavior sequence")
    K_h = inherent_block(behaviors.inherent, schema, tables)
    if schema.J:
        K_c = cross_block(behaviors.cross, schema, tables)
    else:
        K_c = np.zeros((len(behaviors), 0))
    return K_h, K_c


def embed_target(target: TargetItem, schema: FeatureSchema,
                 tables: Mapping[str, EmbeddingTable]) -> np.ndarray:
    """Concatenated inherent embeddings of the target item: q in R^H."""
    inherent = {f.name: np.array([target.inherent[f.name]]) for f in schema.inherent}
    return inherent_block(inherent, schema, tables)[0]


@dataclass
class VideoCatalog:
    """Inherent attributes of every video in the pool, indexed by video id."""

    inherent: dict[str, np.ndarray]
    popularity_rank: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return int(next(iter(self.inherent.values())).shape[0])

    def target(self, video_id: int) -> TargetItem:
        return TargetItem(int(video_id), {k: int(v[video_id]) for k, v in self.inherent.items()})

    def attributes(self, video_ids) -> dict[str, np.ndarray]:
        video_ids = np.asarray(video_ids, dtype=np.int64)
        return {k: v[video_ids] for k, v in self.inherent.items()}
