import numpy as np
import pytest

from twin.attention import AttentionConfig
from twin.datagen import WorldConfig, generate_log, generate_world
from twin.features import CROSS, INHERENT, MULTI_HOT, BehaviorArrays, FeatureSchema, FeatureSpec, VideoCatalog
from twin.training import CtrDataset, CtrSample, ModelConfig, TWIN, init_params

TINY_WORLD = dict(n_users=30, n_videos=600, n_authors=60, n_categories=8, n_topics=40,
                  mean_behaviors=300, min_behaviors=120, max_behaviors=600, samples_per_user=10)


def tiny_schema(multi_hot: bool = False) -> FeatureSchema:
    """H = 8, C = 8 (or 16 with a multi-hot cross feature)."""
    feats = [FeatureSpec("video_id", INHERENT, 12, dim=4), FeatureSpec("category", INHERENT, 3, dim=4),
             FeatureSpec("playtime_bucket", CROSS, 5)]
    if multi_hot:
        feats.append(FeatureSpec("interaction_flags", CROSS, 3, encoding=MULTI_HOT))
    return FeatureSchema(tuple(feats))


def tiny_problem(seed: int, L: int = 8, n_users: int = 3, per_user: int = 2, multi_hot: bool = False):
    """A hand-sized dataset over :func:`tiny_schema`."""
    rng = np.random.default_rng(seed)
    schema = tiny_schema(multi_hot)
    catalog = VideoCatalog({"video_id": np.arange(12), "category": rng.integers(0, 3, 12)},
                           popularity_rank=np.arange(12))
    histories, samples = {}, []
    for u in range(n_users):
        vids = rng.integers(0, 12, L)
        cross = {"playtime_bucket": rng.integers(0, 5, L)}
        if multi_hot:
            cross["interaction_flags"] = rng.integers(0, 2, (L, 3)).astype(np.uint8)
        histories[u] = BehaviorArrays(vids, np.arange(L, dtype=float),
                                      {"video_id": vids, "category": catalog.inherent["category"][vids]}, cross)
        for _ in range(per_user):
            samples.append(CtrSample(u, int(rng.integers(0, 12)), int(rng.integers(0, 2)),
                                     {"hour": int(rng.integers(0, 24)), "page": int(rng.integers(0, 10))}))
    return CtrDataset(schema, catalog, histories, samples)


def tiny_model_config(schema: FeatureSchema, kind: str = TWIN, n_heads: int = 1, k: int = 8,
                      short_term: int = 4) -> ModelConfig:
    acfg = AttentionConfig.for_schema(schema, d_k=2, d_v=3, n_heads=n_heads, output_dim=4)
    return ModelConfig(acfg, kind=kind, hidden=(5, 3), k=k, gsu_input_len=100, short_term=short_term)


def randomize(params, rng, scale=0.5):
    """Non-degenerate weights: biases and embeddings away from their inits."""
    for arr in params.arrays().values():
        arr[...] = rng.normal(0.0, scale, arr.shape)
    return params


@pytest.fixture(scope="session")
def tiny_world():
    return generate_world(WorldConfig(**TINY_WORLD))


@pytest.fixture(scope="session")
def tiny_log(tiny_world):
    return generate_log(tiny_world)


__all__ = ["tiny_problem", "tiny_schema", "tiny_model_config", "randomize", "init_params"]
