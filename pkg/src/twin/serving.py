"""Deployment simulator: projection cache, parameter sync cadence, FLOP model.

Time is virtual minutes.  The trainer's parameters follow a seeded Gaussian
random walk; the online model copies them every ``param_sync_period`` and the
offline projector rebuilds the inherent-feature cache every
``cache_refresh_period`` from the parameters synced at that moment.  CP-GSU
scores with cached (possibly stale) ``K_h W_h`` rows and fresh query and
cross-feature terms; the oracle applies the fresh online metric end to end.
"""
from __future__ import annotations

import csv
import json
import math
import threading
from dataclasses import asdict, dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .attention import AttentionConfig, DenseWeights, TwinParams, project_inherent, raw_scores
from .datagen import World, generate_behaviors, sample_targets
from .features import EmbeddingTable, FeatureSchema, inherent_block
from .numerics import FlopCounter, count_flops, phase, record_reads
from .retrieval import (DEFAULT_K, CacheMiss, GsuKind, cp_gsu_retrieve, hard_gsu,
                        head_scores, hit_rate, oracle_topk, soft_gsu)

STRICT = "strict"
COMPUTE_ON_MISS = "compute-on-miss"


@dataclass(frozen=True)
class SyncSchedule:
    """Minutes between parameter syncs and cache rebuilds.

    A refresh period of 0 rebuilds the cache before every request; in the
    simulator that is a rebuild whenever the synced parameters changed.
    """

    param_sync_period: float = 5.0
    cache_refresh_period: float = 15.0
    coverage_fraction: float = 0.97

    def __post_init__(self):
        if not self.param_sync_period > 0:
            raise ValueError("param_sync_period must be > 0")
        if self.cache_refresh_period < 0:
            raise ValueError("cache_refresh_period must be >= 0")
        if not 0.0 < self.coverage_fraction <= 1.0:
            raise ValueError("coverage_fraction must be in (0, 1]")

    def last_sync(self, t: float) -> float:
        return math.floor(t / self.param_sync_period) * self.param_sync_period

    def last_refresh(self, t: float) -> float:
        if self.cache_refresh_period == 0:
            return self.last_sync(t)
        return math.floor(t / self.cache_refresh_period) * self.cache_refresh_period


class VirtualClock:
    def __init__(self, start: float = 0.0):
        self._now = float(start)

    @property
    def now(self) -> float:
        return self._now

    def advance_to(self, t: float) -> float:
        if t < self._now:
            raise ValueError(f"clock cannot run backwards ({t} < {self._now})")
        self._now = float(t)
        return self._now


# ---------------------------------------------------------------------------
# projection cache

@dataclass(frozen=True)
class CacheVersion:
    """One fully built, immutable cache generation."""

    version: int
    built_at: float
    param_version: int
    row_of: np.ndarray  # video id -> row, -1 if not covered
    rows: np.ndarray  # covered ids x (n_heads * d_k)

    def covers(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        inside = (ids >= 0) & (ids < self.row_of.size)
        out = np.zeros(ids.shape, dtype=bool)
        out[inside] = self.row_of[ids[inside]] >= 0
        return out


class CacheHandle:
    """A reader's view of a single version, used for a whole request."""

    def __init__(self, version: CacheVersion, policy: str, fallback: Callable | None):
        self.entry = version
        self.policy = policy
        self.fallback = fallback
        self.misses = 0

    @property
    def version(self) -> int:
        return self.entry.version

    def lookup(self, video_ids) -> tuple[np.ndarray, int]:
        """Projected rows for ``video_ids`` and how many were not cached.

        The gather is recorded as one memory read per id.
        """
        ids = np.asarray(video_ids, dtype=np.int64)
        hit = self.entry.covers(ids)
        record_reads(ids.size)
        out = np.empty((ids.size, self.entry.rows.shape[1]))
        out[hit] = self.entry.rows[self.entry.row_of[ids[hit]]]
        missed = np.flatnonzero(~hit)
        if missed.size:
            if self.policy == STRICT or self.fallback is None:
                raise CacheMiss(np.unique(ids[missed]).tolist())
            with phase("miss"):
                out[missed] = self.fallback(ids[missed])
        self.misses += int(missed.size)
        return out, int(missed.size)


class ProjectionCache:
    """Versioned key-value store of inherent-feature projections.

    One writer builds a complete new :class:`CacheVersion` off to the side and
    publishes it by swapping a single reference under a lock; readers take a
    handle to the current version and never see a partial build.
    """

    def __init__(self, policy: str = COMPUTE_ON_MISS, fallback: Callable | None = None):
        if policy not in (STRICT, COMPUTE_ON_MISS):
            raise ValueError(f"unknown coverage policy {policy!r}")
        self.policy = policy
        self.fallback = fallback
        self._lock = threading.Lock()
        self._current: CacheVersion | None = None
        self._next_version = 1

    @property
    def version(self) -> int:
        return 0 if self._current is None else self._current.version

    def refresh(self, projector: Callable[[np.ndarray], np.ndarray], ids, *, built_at: float = 0.0,
                param_version: int = 0, n_ids: int | None = None) -> int:
        """Project ``ids`` with ``projector`` and publish the result as a new version."""
        ids = np.asarray(ids, dtype=np.int64)
        n = int(n_ids if n_ids is not None else (ids.max() + 1 if ids.size else 0))
        rows = np.asarray(projector(ids), dtype=float)
        if rows.shape[0] != ids.size:
            raise ValueError("projector returned the wrong number of rows")
        row_of = np.full(n, -1, dtype=np.int64)
        row_of[ids] = np.arange(ids.size)
        rows.setflags(write=False)
        row_of.setflags(write=False)
        with self._lock:
            entry = CacheVersion(self._next_version, float(built_at), int(param_version), row_of, rows)
            self._next_version += 1
            self._current = entry
        return entry.version

    def acquire(self) -> CacheHandle:
        with self._lock:
            entry = self._current
        if entry is None:
            raise LookupError("projection cache has no published version")
        return CacheHandle(entry, self.policy, self.fallback)

    def lookup(self, video_ids) -> tuple[np.ndarray, int]:
        return self.acquire().lookup(video_ids)


def covered_ids(popularity_rank: np.ndarray, coverage_fraction: float) -> np.ndarray:
    """The most popular ``ceil(coverage * n)`` ids, in id order."""
    n = popularity_rank.size
    keep = int(math.ceil(coverage_fraction * n - 1e-9))
    return np.flatnonzero(popularity_rank < keep)


def inherent_projector(schema: FeatureSchema, tables: Mapping[str, EmbeddingTable], params: TwinParams,
                       catalog) -> Callable[[np.ndarray], np.ndarray]:
    """ids -> concatenated per-head ``K_h W_h`` rows (n_heads * d_k wide)."""
    def project(ids):
        K_h = inherent_block(catalog.attributes(np.asarray(ids, dtype=np.int64)), schema, tables)
        return np.concatenate([project_inherent(K_h, h) for h in params.heads], axis=1)
    return project


def refresh_cache(cache: ProjectionCache, world: World, tables, params: TwinParams,
                  schedule: SyncSchedule, *, built_at: float = 0.0, param_version: int = 0) -> int:
    ids = covered_ids(world.catalog.popularity_rank, schedule.coverage_fraction)
    proj = inherent_projector(world.schema, tables, params, world.catalog)
    return cache.refresh(proj, ids, built_at=built_at, param_version=param_version,
                         n_ids=len(world.catalog))


# ---------------------------------------------------------------------------
# cost model

@dataclass(frozen=True)
class FlopModel:
    L: int
    H: int
    C: int
    J: int
    d_k: int = 32
    d_out: int = 32
    n_heads: int = 4

    def __post_init__(self):
        for name in ("H", "d_k", "d_out", "n_heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"FlopModel.{name} must be positive")
        for name in ("L", "C", "J"):
            if getattr(self, name) < 0:
                raise ValueError(f"FlopModel.{name} must be non-negative")


@dataclass(frozen=True)
class FlopBreakdown:
    """Multiply-adds of one scoring pass over L behaviors, itemized.

    ``total`` is the per-behavior arithmetic the comparison is stated over;
    ``query`` (a per-request constant) and ``reads`` are reported beside it.
    """

    total: int
    projection: int = 0
    dot: int = 0
    cross: int = 0
    bias: int = 0
    query: int = 0
    reads: int = 0

    @property
    def all_macs(self) -> int:
        return self.projection + self.dot + self.cross + self.bias + self.query


def flops_raw(m: FlopModel) -> FlopBreakdown:
    """Projecting the full (H+C)-wide K per head; the L x d_out dot is itemized."""
    proj = m.n_heads * m.L * (m.H + m.C) * m.d_out
    return FlopBreakdown(total=proj, projection=proj, dot=m.n_heads * m.L * m.d_out,
                         query=m.n_heads * (m.H + m.C) * m.d_out)


def flops_twin_online(m: FlopModel) -> FlopBreakdown:
    """Cached inherent keys: query-key dots, cross compression and bias only."""
    dot = m.n_heads * m.L * m.d_k
    cross = m.n_heads * m.L * m.C if m.J else 0
    bias = m.n_heads * m.L * m.J if m.J else 0
    return FlopBreakdown(total=dot + cross + bias, dot=dot, cross=cross, bias=bias,
                         query=m.n_heads * m.H * m.d_k, reads=m.L)


def reduction_ratio(m: FlopModel) -> float:
    return 1.0 - flops_twin_online(m).total / flops_raw(m).total


@dataclass
class MeasuredFlops:
    raw: FlopCounter
    twin: FlopCounter
    refresh: FlopCounter

    def raw_breakdown(self) -> FlopBreakdown:
        c = self.raw.macs
        return FlopBreakdown(total=c["projection"], projection=c["projection"], dot=c["scoring"],
                             query=c["query"])

    def twin_breakdown(self) -> FlopBreakdown:
        c = self.twin.macs
        return FlopBreakdown(total=c["scoring"] + c["projection"], projection=c["projection"],
                             query=c["query"], reads=self.twin.total_reads)


def measured_flops(m: FlopModel, seed: int = 0) -> MeasuredFlops:
    """Run both scoring paths on a random instance of the given shape with counting on."""
    rng = np.random.default_rng(seed)
    J = m.J
    if m.C != 8 * J:
        raise ValueError("cross width must be 8 per cross feature")
    cfg = AttentionConfig(H=m.H, J=J, d_k=m.d_k, n_heads=m.n_heads, d_out=m.d_out)
    params = TwinParams.init(cfg, rng)
    dense = DenseWeights.init(cfg, rng)
    q = rng.normal(size=m.H)
    K_h = rng.normal(size=(m.L, m.H))
    K_c = rng.normal(size=(m.L, m.C))
    ids = np.arange(m.L)
    cache = ProjectionCache(STRICT)
    with count_flops() as refresh:
        cache.refresh(lambda i: np.concatenate([project_inherent(K_h[i], h) for h in params.heads], axis=1),
                      ids, n_ids=m.L)
    with count_flops() as twin:
        if m.L:
            rows, _ = cache.lookup(ids)
            head_scores(q, None, K_c, params, keys=rows)
    with count_flops() as raw:
        if m.L:
            K = np.concatenate([K_h, K_c], axis=1)
            for h in dense.heads:
                raw_scores(q, K, h)
    return MeasuredFlops(raw, twin, refresh)


# ---------------------------------------------------------------------------
# scenarios

@dataclass(frozen=True)
class Request:
    index: int
    user: int
    video_id: int
    time: float


def sample_requests(world: World, n: int, horizon: float, seed: int = 0) -> list[Request]:
    """``n`` requests at uniform times in ``[0, horizon)``, sorted by time."""
    rng = np.random.default_rng([seed, 0x5E7])
    users = rng.integers(0, len(world.users), n)
    times = np.sort(rng.uniform(0.0, horizon, n))
    out = []
    for i, (u, t) in enumerate(zip(users, times)):
        vid = int(sample_targets(world, world.users[int(u)], 1, rng)[0])
        out.append(Request(i, int(u), vid, float(t)))
    return out


class DriftingParams:
    """Trainer parameters as a seeded random walk, materialized at sync times.

    Each tensor takes steps of ``drift_rate * rms(initial tensor) * sqrt(dt)``
    standard deviation per entry, so the drift is scale-free per tensor.
    """

    def __init__(self, tables: Mapping[str, EmbeddingTable], params: TwinParams, drift_rate: float,
                 period: float, seed: int):
        if drift_rate < 0:
            raise ValueError("drift_rate must be >= 0")
        self.drift_rate = float(drift_rate)
        self.period = float(period)
        self._rng = np.random.default_rng([seed, 0xD41F7])
        self._tables = [dict(tables)]
        self._params = [params]
        self._rms = {k: float(np.sqrt(np.mean(t.weights ** 2))) for k, t in tables.items()}
        self._prms = {k: float(np.sqrt(np.mean(v ** 2))) for k, v in params.tensors().items()}

    def at(self, version: int) -> tuple[dict[str, EmbeddingTable], TwinParams]:
        while len(self._params) <= version:
            self._step()
        return self._tables[version], self._params[version]

    def _step(self) -> None:
        tables, params = self._tables[-1], self._params[-1]
        if self.drift_rate == 0:
            self._tables.append(tables)
            self._params.append(params)
            return
        scale = self.drift_rate * math.sqrt(self.period)
        new_tables = {}
        for name in sorted(tables):
            w = tables[name].weights
            new_tables[name] = EmbeddingTable(name, w + self._rng.normal(0.0, scale * self._rms[name], w.shape))
        tensors = {}
        for name, v in sorted(params.tensors().items()):
            tensors[name] = v + self._rng.normal(0.0, scale * self._prms[name], v.shape)
        self._tables.append(new_tables)
        self._params.append(TwinParams.from_tensors(params.config, tensors))


@dataclass
class ScenarioReport:
    rows: list[dict]
    summary: dict

    def write_csv(self, path) -> None:
        if not self.rows:
            raise ValueError("empty report")
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(self.rows[0]))
            w.writeheader()
            w.writerows(self.rows)

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary, fh, indent=2, sort_keys=True)

    def hits(self, gsu: GsuKind | str) -> np.ndarray:
        key = f"hit_{GsuKind(gsu).value}"
        return np.array([r[key] for r in self.rows], dtype=float)


class _PoolProjection:
    """Fresh projections of the whole pool for one parameter version.

    Rows equal per-request projection bit for bit (the projection kernel is
    row-wise), so lookups stand in for projecting each request's sequence.
    """

    def __init__(self, project: Callable, n: int):
        self.rows = project(np.arange(n))

    def lookup(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        return self.rows[ids], 0


def run_scenario(world: World, tables: Mapping[str, EmbeddingTable], params: TwinParams,
                 schedule: SyncSchedule, requests: Sequence[Request], drift_rate: float, *,
                 pretrained: EmbeddingTable | None = None, seed: int = 0, k: int = DEFAULT_K,
                 policy: str = COMPUTE_ON_MISS, methods: Sequence[GsuKind] | None = None,
                 histories: dict | None = None) -> ScenarioReport:
    """Replay ``requests`` against a drifting model with periodic sync and refresh.

    ``pretrained`` (SimSoft's embeddings) stays frozen at its initial value;
    by default the initial ``video_id`` table.
    """
    methods = list(methods) if methods is not None else list(GsuKind)
    schema = world.schema
    n_pool = len(world.catalog)
    walk = DriftingParams(tables, params, drift_rate, schedule.param_sync_period, seed)
    frozen = pretrained if pretrained is not None else tables["video_id"]
    clock = VirtualClock()
    histories = {} if histories is None else histories
    fresh: dict[int, _PoolProjection] = {}

    def fresh_pool(version: int) -> _PoolProjection:
        if version not in fresh:
            fresh.clear()
            t, p = walk.at(version)
            fresh[version] = _PoolProjection(inherent_projector(schema, t, p, world.catalog), n_pool)
        return fresh[version]

    cache = ProjectionCache(policy)
    built_for = None
    rows, macs, reads, misses = [], 0, 0, 0
    for req in requests:
        clock.advance_to(req.time)
        param_version = int(round(schedule.last_sync(clock.now) / schedule.param_sync_period))
        t_tab, t_par = walk.at(param_version)
        refresh_t = schedule.last_refresh(clock.now)
        refresh_version = min(int(math.floor(refresh_t / schedule.param_sync_period + 1e-9)), param_version)
        if built_for != refresh_version:
            pool = fresh_pool(refresh_version)
            cache.refresh(lambda ids: pool.rows[ids],
                          covered_ids(world.catalog.popularity_rank, schedule.coverage_fraction),
                          built_at=refresh_t, param_version=refresh_version, n_ids=n_pool)
            built_for = refresh_version
        if policy == COMPUTE_ON_MISS:
            cache.fallback = inherent_projector(schema, t_tab, t_par, world.catalog)

        if req.user not in histories:
            histories[req.user] = generate_behaviors(world, world.users[req.user])
        hist = histories[req.user]
        target = world.catalog.target(req.video_id)
        oracle = oracle_topk(target, hist, schema, t_tab, t_par, k, key_source=fresh_pool(param_version))
        row = {"request": req.index, "user": req.user, "video_id": req.video_id,
               "time": round(req.time, 6), "L": len(hist),
               "staleness": round(clock.now - refresh_t, 6),
               "param_version": param_version, "cache_version": cache.version}
        handle = cache.acquire()
        for gsu in methods:
            if gsu is GsuKind.ORACLE:
                res = oracle
            elif gsu is GsuKind.TWIN_CP:
                with count_flops() as fc:
                    res = cp_gsu_retrieve(target, hist, schema, t_tab, t_par, key_source=handle, k=k)
                macs += fc.macs["scoring"]
                reads += fc.total_reads
            elif gsu is GsuKind.SIM_SOFT:
                res = soft_gsu(target, hist, frozen, k)
            else:
                res = hard_gsu(target, hist, k)
            row[f"hit_{gsu.value}"] = hit_rate(res, oracle)
        row["misses"] = handle.misses
        misses += handle.misses
        rows.append(row)

    summary = {"requests": len(rows), "drift_rate": drift_rate, "seed": seed, "k": k,
               "schedule": asdict(schedule), "policy": policy,
               "twin_scoring_macs": int(macs), "twin_gather_reads": int(reads),
               "cache_misses": int(misses), "cache_versions": cache.version,
               "mean_staleness": float(np.mean([r["staleness"] for r in rows])) if rows else 0.0}
    for gsu in methods:
        h = np.array([r[f"hit_{gsu.value}"] for r in rows], dtype=float)
        summary[f"hit_{gsu.value}_mean"] = float(h.mean()) if h.size else float("nan")
        summary[f"hit_{gsu.value}_stderr"] = float(h.std(ddof=1) / math.sqrt(h.size)) if h.size > 1 else 0.0
    return ScenarioReport(rows, summary)
