import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twin.features import (CROSS, INHERENT, MULTI_HOT, BehaviorArrays, BehaviorRecord, EmbeddingTable,
                           FeatureSchema, FeatureSpec, SchemaError, TargetItem, assemble_K, default_schema,
                           embed, embed_target, encode_hot, init_tables)

SCHEMA = default_schema(n_videos=50, n_authors=10)


def record(rng, schema=SCHEMA):
    inherent = {f.name: int(rng.integers(0, f.vocab)) for f in schema.inherent}
    cross = {}
    for f in schema.cross:
        if f.encoding == MULTI_HOT:
            cross[f.name] = tuple(int(i) for i in np.flatnonzero(rng.integers(0, 2, f.vocab)))
        else:
            cross[f.name] = int(rng.integers(0, f.vocab))
    return BehaviorRecord(inherent["video_id"], inherent, cross, float(rng.uniform(0, 100)))


@pytest.fixture
def tables():
    return init_tables(SCHEMA, np.random.default_rng(0), scale=1.0)


class TestSchema:
    def test_default_dimensions(self):
        assert SCHEMA.H == 64 + 64 + 8 + 8 == 144
        assert SCHEMA.J == 5
        assert SCHEMA.C == 40

    def test_id_features_default_to_64(self):
        assert SCHEMA["video_id"].dim == 64
        assert SCHEMA["author_id"].dim == 64
        assert SCHEMA["category"].dim == 8

    def test_category_vocab_default(self):
        assert SCHEMA["category"].vocab == 37

    def test_dict_round_trip(self):
        assert FeatureSchema.from_dicts(SCHEMA.to_dicts()) == SCHEMA

    def test_offsets_follow_schema_order(self):
        off = SCHEMA.offsets(INHERENT)
        assert off["video_id"] == slice(0, 64)
        assert off["author_id"] == slice(64, 128)
        assert off["duration_bucket"] == slice(136, 144)

    @pytest.mark.parametrize("kw", [dict(kind="other"), dict(encoding="bag"), dict(vocab=0), dict(dim=-1),
                                    dict(kind=CROSS, dim=4)])
    def test_bad_spec_rejected(self, kw):
        base = dict(name="x", kind=INHERENT, vocab=3)
        with pytest.raises(SchemaError):
            FeatureSpec(**{**base, **kw})

    def test_duplicate_names_rejected(self):
        f = FeatureSpec("a", INHERENT, 3)
        with pytest.raises(SchemaError):
            FeatureSchema((f, f))

    def test_needs_inherent_feature(self):
        with pytest.raises(SchemaError):
            FeatureSchema((FeatureSpec("c", CROSS, 3),))


class TestEncodeHot:
    def test_weekday_monday(self):
        weekday = FeatureSpec("weekday", INHERENT, 7)
        np.testing.assert_array_equal(encode_hot(0, weekday), [1, 0, 0, 0, 0, 0, 0])

    def test_multi_hot(self):
        f = FeatureSpec("flags", CROSS, 5, encoding=MULTI_HOT)
        np.testing.assert_array_equal(encode_hot({1, 3}, f), [0, 1, 0, 1, 0])

    def test_empty_multi_hot(self):
        f = FeatureSpec("flags", CROSS, 5, encoding=MULTI_HOT)
        np.testing.assert_array_equal(encode_hot((), f), np.zeros(5))

    @pytest.mark.parametrize("value", [-1, 7])
    def test_out_of_vocab(self, value):
        with pytest.raises(SchemaError):
            encode_hot(value, FeatureSpec("weekday", INHERENT, 7))


class TestEmbed:
    def test_one_hot_selects_column(self):
        t = EmbeddingTable("a", np.arange(12.0).reshape(4, 3))
        np.testing.assert_array_equal(embed([0, 0, 1, 0], t), t.matrix[:, 2])

    def test_multi_hot_sums_columns(self):
        t = EmbeddingTable("a", np.arange(12.0).reshape(4, 3))
        np.testing.assert_array_equal(embed([1, 1, 0, 0], t), t.matrix[:, 0] + t.matrix[:, 1])

    def test_id_feature_length(self, tables):
        hot = encode_hot(3, SCHEMA["video_id"])
        assert embed(hot, tables["video_id"]).shape == (64,)

    def test_length_mismatch(self, tables):
        with pytest.raises(SchemaError):
            embed(np.ones(3), tables["category"])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 1), min_size=6, max_size=6), st.lists(st.integers(0, 1), min_size=6,
                                                                          max_size=6))
    def test_linear(self, a, b):
        t = EmbeddingTable("a", np.random.default_rng(4).normal(size=(6, 3)))
        a, b = np.array(a, float), np.array(b, float)
        np.testing.assert_allclose(embed(a + b, t), embed(a, t) + embed(b, t), rtol=0, atol=1e-12)


class TestAssembleK:
    def test_single_behavior_matches_embed(self, tables):
        rec = record(np.random.default_rng(1))
        K_h, K_c = assemble_K([rec], SCHEMA, tables)
        assert K_h.shape == (1, 144) and K_c.shape == (1, 40)
        inh = np.concatenate([embed(encode_hot(rec.inherent[f.name], f), tables[f.name]) for f in SCHEMA.inherent])
        crs = np.concatenate([embed(encode_hot(rec.cross[f.name], f), tables[f.name]) for f in SCHEMA.cross])
        np.testing.assert_allclose(K_h[0], inh, rtol=0, atol=1e-12)
        np.testing.assert_allclose(K_c[0], crs, rtol=0, atol=1e-12)

    def test_empty_rejected(self, tables):
        with pytest.raises(SchemaError):
            assemble_K([], SCHEMA, tables)

    def test_records_and_arrays_agree(self, tables):
        rng = np.random.default_rng(2)
        recs = [record(rng) for _ in range(9)]
        arrays = BehaviorArrays.from_records(recs, SCHEMA)
        a, b = assemble_K(recs, SCHEMA, tables), assemble_K(arrays, SCHEMA, tables)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])
        assert arrays.to_records(SCHEMA) == recs

    def test_out_of_vocab_rejected(self, tables):
        rec = record(np.random.default_rng(3))
        bad = BehaviorRecord(rec.video_id, {**rec.inherent, "category": 99}, rec.cross)
        with pytest.raises(SchemaError):
            assemble_K([bad], SCHEMA, tables)

    def test_no_cross_features(self):
        schema = FeatureSchema((FeatureSpec("video_id", INHERENT, 5, dim=3),))
        t = init_tables(schema, np.random.default_rng(0))
        K_h, K_c = assemble_K([BehaviorRecord(1, {"video_id": 1}, {})], schema, t)
        assert K_h.shape == (1, 3) and K_c.shape == (1, 0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.integers(2, 12))
    def test_permutation_equivariant(self, seed, L):
        rng = np.random.default_rng(seed)
        t = init_tables(SCHEMA, rng)
        recs = [record(rng) for _ in range(L)]
        perm = rng.permutation(L)
        K_h, K_c = assemble_K(recs, SCHEMA, t)
        P_h, P_c = assemble_K([recs[i] for i in perm], SCHEMA, t)
        np.testing.assert_array_equal(P_h, K_h[perm])
        np.testing.assert_array_equal(P_c, K_c[perm])


class TestEmbedTarget:
    def test_shares_encoder_with_behaviors(self, tables):
        rng = np.random.default_rng(5)
        recs = [record(rng) for _ in range(4)]
        K_h, _ = assemble_K(recs, SCHEMA, tables)
        q = embed_target(recs[2].target(), SCHEMA, tables)
        np.testing.assert_array_equal(q, K_h[2])
        assert q.shape == (SCHEMA.H,)

    def test_unknown_id_rejected(self, tables):
        target = TargetItem(10_000, {"video_id": 10_000, "author_id": 0, "category": 0, "duration_bucket": 0})
        with pytest.raises(SchemaError):
            embed_target(target, SCHEMA, tables)
