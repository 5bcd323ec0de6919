"""Seeded synthetic world: videos, users with planted long-term interests, logs.

Each video belongs to a latent topic; authors publish in one topic; topics
roll up into coarse categories.  A user has a few interest topics, each with
a base affinity and an "era" in the timeline where it is most active, plus a
share of low-engagement noise views.  Noise views go to topics by popularity
or, optionally, to "sibling" topics that share a category with an interest;
sibling browsing follows the static affinity, so it outlives the interest.

The click label depends on the target's topic through the user's static
affinity, the number of same-topic behaviors *older* than the most recent 100
(optionally weighted by playtime) and a recency-weighted playtime sum.  A
model that only sees the recent past, or retrieves the wrong behaviors,
loses signal.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator

import numpy as np

from .attention import AttentionConfig, TwinParams
from .features import (MULTI_HOT, BehaviorArrays, EmbeddingTable, FeatureSchema,
                       VideoCatalog, default_schema)

RECENT_WINDOW = 100
N_PLAYTIME = 10
N_FLAGS = 4
N_POSITIONS = 10
N_RECENCY = 16
N_HOURS = 24


@dataclass(frozen=True)
class WorldConfig:
    n_users: int = 2000
    n_videos: int = 20000
    n_authors: int = 300
    n_categories: int = 37
    n_topics: int = 150
    n_durations: int = 8
    mean_behaviors: int = 2000
    min_behaviors: int = 200
    max_behaviors: int = 10000
    interests_per_user: int = 4
    noise_fraction: float = 0.4
    topic_drift: float = 1.0
    topic_zipf: float = 1.0
    video_zipf: float = 1.0
    window_minutes: float = 180 * 24 * 60.0
    samples_per_user: int = 20
    interest_target_fraction: float = 0.5
    sibling_noise_fraction: float = 0.0
    sibling_target_fraction: float = 0.0
    label_bias: float = -2.0
    w_affinity: float = 2.0
    w_long_term: float = 0.6
    long_term_engaged: bool = False  # weight old same-topic views by playtime
    w_playtime: float = 0.8
    playtime_half_life_days: float = 30.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_users", "n_videos", "n_authors", "n_categories", "n_topics",
                     "n_durations", "mean_behaviors", "min_behaviors", "max_behaviors",
                     "interests_per_user"):
            if getattr(self, name) < 1:
                raise ValueError(f"WorldConfig.{name} must be positive")
        if self.samples_per_user < 0:
            raise ValueError("WorldConfig.samples_per_user must be >= 0")
        if not 0.0 <= self.noise_fraction < 1.0:
            raise ValueError("WorldConfig.noise_fraction must be in [0, 1)")
        for name in ("interest_target_fraction", "sibling_noise_fraction", "sibling_target_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"WorldConfig.{name} must be in [0, 1]")
        if self.interest_target_fraction + self.sibling_target_fraction > 1.0:
            raise ValueError("interest and sibling target fractions exceed 1")
        if self.min_behaviors > self.max_behaviors:
            raise ValueError("min_behaviors exceeds max_behaviors")
        if self.n_authors < self.n_topics:
            raise ValueError("need at least one author per topic")
        if self.n_videos < self.n_authors:
            raise ValueError("need at least one video per author")

    @classmethod
    def from_dict(cls, d) -> "WorldConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown world keys: {sorted(unknown)}")
        return cls(**d)

    def schema(self) -> FeatureSchema:
        return default_schema(self.n_videos, self.n_authors, self.n_categories, self.n_durations)


@dataclass
class UserProfile:
    user_id: int
    topics: np.ndarray  # interest topic ids
    affinity: np.ndarray  # base weight per interest topic, sums to 1
    era: np.ndarray  # timeline position in [0, 1] where each interest peaks
    length: int

    def affinity_to(self, topic: int) -> float:
        hit = np.flatnonzero(self.topics == topic)
        return float(self.affinity[hit].sum()) if hit.size else 0.0


@dataclass
class Sample:
    user: int
    video_id: int
    label: int
    context: dict = field(default_factory=dict)


@dataclass
class World:
    config: WorldConfig
    schema: FeatureSchema
    catalog: VideoCatalog
    video_topic: np.ndarray
    topic_category: np.ndarray
    author_topic: np.ndarray
    video_popularity: np.ndarray
    users: list[UserProfile]

    @property
    def topic_popularity(self) -> np.ndarray:
        return _zipf(self.config.n_topics, self.config.topic_zipf)

    def topic_videos(self, topic: int) -> np.ndarray:
        return self._by_topic()[topic]

    def siblings(self, profile: "UserProfile") -> np.ndarray:
        """Topics sharing a category with one of the user's interests, minus the interests."""
        cats = np.unique(self.topic_category[profile.topics])
        sib = np.flatnonzero(np.isin(self.topic_category, cats))
        return np.setdiff1d(sib, profile.topics)

    def _by_topic(self) -> list[np.ndarray]:
        cached = getattr(self, "_topic_index", None)
        if cached is None:
            order = np.argsort(self.video_topic, kind="stable")
            bounds = np.searchsorted(self.video_topic[order], np.arange(self.config.n_topics + 1))
            cached = [order[bounds[t]:bounds[t + 1]] for t in range(self.config.n_topics)]
            self._topic_index = cached
        return cached


@dataclass
class SyntheticLog:
    """Per-user behavior sequences (oldest first) and labelled samples."""

    behaviors: dict[int, BehaviorArrays]
    samples: list[Sample]


def _zipf(n: int, s: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


def _user_rng(seed: int, user: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, user, stream])


def generate_world(config: WorldConfig) -> World:
    """Videos with topic/category/author/duration/popularity, and user profiles."""
    rng = np.random.default_rng([config.seed, 0xC0FFEE])
    T = config.n_topics
    topic_category = np.concatenate([np.arange(config.n_categories),
                                     rng.integers(0, config.n_categories, max(0, T - config.n_categories))])[:T]
    topic_category = rng.permutation(topic_category)
    # every topic gets at least one author
    author_topic = np.concatenate([np.arange(T), rng.integers(0, T, config.n_authors - T)])
    author_topic = rng.permutation(author_topic)

    topic_pop = _zipf(T, config.topic_zipf)
    video_author = np.concatenate([np.arange(config.n_authors),
                                   rng.integers(0, config.n_authors, config.n_videos - config.n_authors)])
    video_author = rng.permutation(video_author)
    video_topic = author_topic[video_author]
    # topic-dependent duration profile
    dur_center = rng.integers(0, config.n_durations, T)
    dur = dur_center[video_topic] + rng.integers(-1, 2, config.n_videos)
    duration = np.clip(dur, 0, config.n_durations - 1)

    within = rng.permutation(config.n_videos).astype(float) + 1.0
    popularity = topic_pop[video_topic] / within ** (config.video_zipf * 0.5)
    popularity_rank = np.empty(config.n_videos, dtype=np.int64)
    popularity_rank[np.lexsort((np.arange(config.n_videos), -popularity))] = np.arange(config.n_videos)

    catalog = VideoCatalog(
        inherent={
            "video_id": np.arange(config.n_videos, dtype=np.int64),
            "author_id": video_author.astype(np.int64),
            "category": topic_category[video_topic].astype(np.int64),
            "duration_bucket": duration.astype(np.int64),
        },
        popularity_rank=popularity_rank,
    )
    world = World(config, config.schema(), catalog, video_topic.astype(np.int64),
                  topic_category.astype(np.int64), author_topic.astype(np.int64), popularity, [])
    world.users = [_make_user(config, u) for u in range(config.n_users)]
    return world


def _make_user(config: WorldConfig, user: int) -> UserProfile:
    rng = _user_rng(config.seed, user, 1)
    n = min(config.interests_per_user, config.n_topics)
    topics = rng.choice(config.n_topics, size=n, replace=False)
    affinity = rng.dirichlet(np.ones(n))
    era = rng.uniform(0.0, 1.0, n)
    length = int(np.clip(rng.geometric(1.0 / max(config.mean_behaviors - config.min_behaviors + 1, 1))
                         + config.min_behaviors - 1, config.min_behaviors, config.max_behaviors))
    return UserProfile(user, topics.astype(np.int64), affinity, era, length)


def interest_weights(profile: UserProfile, position: np.ndarray, drift: float) -> np.ndarray:
    """Unnormalised interest intensity at timeline positions (L x n_interests)."""
    d = (position[:, None] - profile.era[None, :]) / 0.25
    return profile.affinity[None, :] * np.exp(-drift * d * d)


def _sample_videos(world: World, topics: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = np.empty(topics.size, dtype=np.int64)
    pop = world.video_popularity
    for t in np.unique(topics):
        pos = np.flatnonzero(topics == t)
        vids = world.topic_videos(int(t))
        w = pop[vids]
        out[pos] = rng.choice(vids, size=pos.size, p=w / w.sum())
    return out


def generate_behaviors(world: World, profile: UserProfile, length: int | None = None) -> BehaviorArrays:
    """Behavior log of one user, oldest first."""
    cfg = world.config
    L = profile.length if length is None else int(length)
    rng = _user_rng(cfg.seed, profile.user_id, 2)
    schema = world.schema
    if L == 0:
        return BehaviorArrays(
            video_id=np.zeros(0, dtype=np.int64), event_time=np.zeros(0),
            inherent={f.name: np.zeros(0, dtype=np.int64) for f in schema.inherent},
            cross={f.name: (np.zeros((0, f.vocab), dtype=np.uint8) if f.encoding == MULTI_HOT
                            else np.zeros(0, dtype=np.int64)) for f in schema.cross})
    position = np.sort(rng.uniform(0.0, 1.0, L))
    event_time = position * cfg.window_minutes
    noise = rng.uniform(size=L) < cfg.noise_fraction

    w = interest_weights(profile, position, cfg.topic_drift)
    w = w / w.sum(axis=1, keepdims=True)
    u = rng.uniform(size=L)
    pick = (w.cumsum(axis=1) < u[:, None]).sum(axis=1)
    pick = np.minimum(pick, profile.topics.size - 1)
    topic = profile.topics[pick]
    topic_pop = world.topic_popularity
    topic[noise] = rng.choice(cfg.n_topics, size=int(noise.sum()), p=topic_pop)
    siblings = world.siblings(profile)
    if cfg.sibling_noise_fraction > 0 and siblings.size:
        # browsing next to an interest: same category, other topic, little engagement
        # anchored on the static affinity, not the active era, so the browsing
        # outlives the interest
        near = noise & (rng.uniform(size=L) < cfg.sibling_noise_fraction)
        anchor = rng.choice(profile.topics, size=int(near.sum()), p=profile.affinity)
        topic[near] = _sibling_of(world, anchor, siblings, rng)
    video = _sample_videos(world, topic, rng)

    # engagement: interest views play long and attract interactions
    engaged = ~noise
    strength = np.where(engaged, profile.affinity[pick], 0.0)
    play_mean = np.where(engaged, 5.0 + 4.0 * strength, 1.0)
    playtime = np.clip(np.rint(rng.normal(play_mean, 1.2)), 0, N_PLAYTIME - 1).astype(np.int64)
    p_flag = np.where(engaged, 0.15 + 0.5 * strength, 0.03)
    flags = (rng.uniform(size=(L, N_FLAGS)) < p_flag[:, None]).astype(np.uint8)
    page = rng.integers(0, N_POSITIONS, L)
    hour = (event_time // 60).astype(np.int64) % N_HOURS
    age_hours = (cfg.window_minutes - event_time) / 60.0
    recency = np.minimum(np.floor(np.log2(1.0 + age_hours)), N_RECENCY - 1).astype(np.int64)

    attrs = world.catalog.attributes(video)
    return BehaviorArrays(
        video_id=video,
        event_time=event_time,
        inherent={f.name: attrs[f.name] for f in schema.inherent},
        cross={
            "timestamp_bucket": hour,
            "playtime_bucket": playtime,
            "page_position": page,
            "interaction_flags": flags,
            "recency_bucket": recency,
        },
    )


def label_probability(world: World, profile: UserProfile, video_id: int,
                      history: BehaviorArrays) -> float:
    """Click probability of a user on a target, given the full history."""
    cfg = world.config
    topic = int(world.video_topic[video_id])
    affinity = profile.affinity_to(topic)
    same = world.video_topic[history.video_id] == topic
    L = len(history)
    old = same[:max(L - RECENT_WINDOW, 0)]
    if cfg.long_term_engaged:
        old_play = history.cross["playtime_bucket"][:old.size] / (N_PLAYTIME - 1)
        long_term = float(np.sum(old_play[old]))
    else:
        long_term = float(old.sum())
    age_days = (cfg.window_minutes - history.event_time[same]) / (60.0 * 24.0)
    play = history.cross["playtime_bucket"][same] / (N_PLAYTIME - 1)
    rwp = float(np.sum(play * 0.5 ** (age_days / cfg.playtime_half_life_days)))
    logit = (cfg.label_bias + cfg.w_affinity * affinity + cfg.w_long_term * math.log1p(long_term)
             + cfg.w_playtime * math.log1p(rwp))
    return 1.0 / (1.0 + math.exp(-logit))


def label_click(world: World, profile: UserProfile, video_id: int, history: BehaviorArrays,
                rng: np.random.Generator) -> int:
    return int(rng.uniform() < label_probability(world, profile, video_id, history))


def _sibling_of(world: World, interest_topics: np.ndarray, siblings: np.ndarray,
                rng: np.random.Generator) -> np.ndarray:
    """A sibling topic in the category of each given interest topic (any sibling if none)."""
    out = np.empty(interest_topics.size, dtype=np.int64)
    sib_cat = world.topic_category[siblings]
    for t in np.unique(interest_topics):
        pos = np.flatnonzero(interest_topics == t)
        pool = siblings[sib_cat == world.topic_category[t]]
        if pool.size == 0:
            pool = siblings
        out[pos] = rng.choice(pool, size=pos.size)
    return out


def sample_targets(world: World, profile: UserProfile, n: int, rng: np.random.Generator) -> np.ndarray:
    """Targets from the user's interests, from sibling topics, and by popularity."""
    cfg = world.config
    u = rng.uniform(size=n)
    from_interest = u < cfg.interest_target_fraction
    topics = rng.choice(cfg.n_topics, size=n, p=world.topic_popularity)
    k = int(from_interest.sum())
    topics[from_interest] = rng.choice(profile.topics, size=k, p=profile.affinity)
    siblings = world.siblings(profile)
    if cfg.sibling_target_fraction > 0 and siblings.size:
        near = (~from_interest) & (u < cfg.interest_target_fraction + cfg.sibling_target_fraction)
        anchor = rng.choice(profile.topics, size=int(near.sum()), p=profile.affinity)
        topics[near] = _sibling_of(world, anchor, siblings, rng)
    return _sample_videos(world, topics, rng)


def generate_log(world: World, users=None) -> SyntheticLog:
    cfg = world.config
    users = world.users if users is None else [world.users[u] for u in users]
    behaviors, samples = {}, []
    for profile in users:
        hist = generate_behaviors(world, profile)
        behaviors[profile.user_id] = hist
        rng = _user_rng(cfg.seed, profile.user_id, 3)
        targets = sample_targets(world, profile, cfg.samples_per_user, rng)
        for v in targets:
            y = label_click(world, profile, int(v), hist, rng)
            ctx = {"hour": int(rng.integers(0, N_HOURS)), "page": int(rng.integers(0, N_POSITIONS))}
            samples.append(Sample(profile.user_id, int(v), y, ctx))
    return SyntheticLog(behaviors, samples)


def long_term_scores(world: World, log: SyntheticLog) -> np.ndarray:
    """Reference scorer: same-topic behaviors older than the recent window."""
    out = np.empty(len(log.samples))
    for i, s in enumerate(log.samples):
        hist = log.behaviors[s.user]
        topic = world.video_topic[s.video_id]
        older = hist.video_id[:max(len(hist) - RECENT_WINDOW, 0)]
        out[i] = float(np.sum(world.video_topic[older] == topic))
    return out


# ---------------------------------------------------------------------------
# planted relevance parameters

def planted_params(world: World, cfg: AttentionConfig, seed: int = 0,
                   topic_scale: float = 1.0, noise_scale: float = 0.5,
                   playtime_weight: float = 1.0) -> tuple[dict[str, EmbeddingTable], TwinParams]:
    """Embeddings and attention weights whose relevance tracks latent topics.

    Video and author embeddings are a shared topic vector plus noise, and every
    head uses ``W_q = W_h`` so same-topic behaviors score high; the cross bias
    rewards long playtime.  Used as the ESU parameters in serving simulations.
    """
    rng = np.random.default_rng([seed, 0xE5])
    schema = world.schema
    topic_vec = rng.normal(0.0, topic_scale, (world.config.n_topics, 64))
    tables = {}
    for f in schema.features:
        w = rng.normal(0.0, noise_scale, (f.vocab, f.dim))
        if f.name == "video_id":
            w += topic_vec[world.video_topic]
        elif f.name == "author_id":
            w += topic_vec[world.author_topic]
        elif f.name == "playtime_bucket":
            w[:, 0] += np.linspace(-1.0, 1.0, f.vocab) * 2.0
        tables[f.name] = EmbeddingTable(f.name, w)
    params = TwinParams.init(cfg, rng)
    for h in params.heads:
        h.W_q[...] = h.W_h
        h.w_c[...] = rng.normal(0.0, 0.1, h.w_c.shape)
        h.beta[...] = 0.0
        names = [f.name for f in schema.cross]
        if "playtime_bucket" in names:
            j = names.index("playtime_bucket")
            h.w_c[j, 0] = 1.0
            h.beta[j] = playtime_weight
    return tables, params


# ---------------------------------------------------------------------------
# JSON-Lines round trip

def _behavior_row(user: int, i: int, b: BehaviorArrays, schema: FeatureSchema) -> dict:
    cross = {}
    for f in schema.cross:
        col = b.cross[f.name]
        cross[f.name] = [int(j) for j in np.flatnonzero(col[i])] if f.encoding == MULTI_HOT else int(col[i])
    return {
        "kind": "behavior",
        "user": int(user),
        "video_id": int(b.video_id[i]),
        "event_time": float(b.event_time[i]),
        "inherent": {f.name: int(b.inherent[f.name][i]) for f in schema.inherent},
        "cross": cross,
    }


def iter_rows(log: SyntheticLog, schema: FeatureSchema) -> Iterator[dict]:
    for user in sorted(log.behaviors):
        b = log.behaviors[user]
        for i in range(len(b)):
            yield _behavior_row(user, i, b, schema)
    for s in log.samples:
        yield {"kind": "sample", "user": s.user, "video_id": s.video_id, "label": s.label,
               "context": dict(sorted(s.context.items()))}


def export_log(log: SyntheticLog, schema: FeatureSchema, path) -> None:
    """One JSON object per line, keys sorted; re-export is byte-identical."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in iter_rows(log, schema):
            fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")))
            fh.write("\n")


class LogFormatError(ValueError):
    pass


def import_log(path, schema: FeatureSchema) -> SyntheticLog:
    per_user: dict[int, list[dict]] = {}
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                kind = row["kind"]
                if kind == "behavior":
                    per_user.setdefault(int(row["user"]), []).append(row)
                elif kind == "sample":
                    label = int(row["label"])
                    if label not in (0, 1):
                        raise ValueError(f"label {label} not binary")
                    samples.append(Sample(int(row["user"]), int(row["video_id"]), label,
                                          dict(row.get("context", {}))))
                else:
                    raise ValueError(f"unknown row kind {kind!r}")
            except (ValueError, KeyError, TypeError) as exc:
                raise LogFormatError(f"{path}:{lineno}: {exc}") from exc
    behaviors = {}
    for user, rows in per_user.items():
        cross = {}
        for f in schema.cross:
            if f.encoding == MULTI_HOT:
                m = np.zeros((len(rows), f.vocab), dtype=np.uint8)
                for i, r in enumerate(rows):
                    m[i, r["cross"][f.name]] = 1
                cross[f.name] = m
            else:
                cross[f.name] = np.array([r["cross"][f.name] for r in rows], dtype=np.int64)
        behaviors[user] = BehaviorArrays(
            video_id=np.array([r["video_id"] for r in rows], dtype=np.int64),
            event_time=np.array([r["event_time"] for r in rows], dtype=float),
            inherent={f.name: np.array([r["inherent"][f.name] for r in rows], dtype=np.int64)
                      for f in schema.inherent},
            cross=cross,
        )
    return SyntheticLog(behaviors, samples)


def world_config_dict(cfg: WorldConfig) -> dict:
    return asdict(cfg)
