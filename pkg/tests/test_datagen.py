import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY_WORLD
from twin.datagen import (RECENT_WINDOW, LogFormatError, SyntheticLog, WorldConfig, export_log, generate_behaviors,
                          generate_log, generate_world, import_log, label_click, label_probability,
                          long_term_scores, sample_targets)
from twin.training import auc


def world_with(**over):
    return generate_world(WorldConfig(**{**TINY_WORLD, **over}))


def assert_logs_equal(a: SyntheticLog, b: SyntheticLog):
    assert sorted(a.behaviors) == sorted(b.behaviors)
    for u, x in a.behaviors.items():
        y = b.behaviors[u]
        np.testing.assert_array_equal(x.video_id, y.video_id)
        np.testing.assert_array_equal(x.event_time, y.event_time)
        for k in x.inherent:
            np.testing.assert_array_equal(x.inherent[k], y.inherent[k])
        for k in x.cross:
            np.testing.assert_array_equal(x.cross[k], y.cross[k])
    assert a.samples == b.samples


class TestWorldConfig:
    def test_default_category_vocab(self):
        cfg = WorldConfig()
        assert cfg.n_categories == 37
        assert cfg.schema()["category"].vocab == 37

    def test_desk_total_within_budget(self):
        cfg = WorldConfig()
        assert cfg.n_users * cfg.mean_behaviors <= 10**7
        assert cfg.max_behaviors == 10_000

    @pytest.mark.parametrize("key", ["n_users", "n_videos", "n_categories", "n_topics", "mean_behaviors"])
    def test_positive_counts(self, key):
        with pytest.raises(ValueError):
            WorldConfig(**{key: 0})

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="bogus"):
            WorldConfig.from_dict({"bogus": 1})


class TestWorld:
    def test_same_seed_same_world(self):
        a, b = world_with(), world_with()
        np.testing.assert_array_equal(a.video_topic, b.video_topic)
        np.testing.assert_array_equal(a.catalog.popularity_rank, b.catalog.popularity_rank)
        for x, y in zip(a.users, b.users):
            np.testing.assert_array_equal(x.topics, y.topics)
            np.testing.assert_array_equal(x.affinity, y.affinity)

    def test_other_seed_differs(self):
        assert not np.array_equal(world_with().video_topic, world_with(seed=1).video_topic)

    def test_every_video_attributed(self, tiny_world):
        n = tiny_world.config.n_videos
        for name in ("video_id", "author_id", "category", "duration_bucket"):
            assert tiny_world.catalog.inherent[name].shape == (n,)
        assert sorted(tiny_world.catalog.popularity_rank) == list(range(n))
        # category follows the topic, topic follows the author
        np.testing.assert_array_equal(tiny_world.catalog.inherent["category"],
                                      tiny_world.topic_category[tiny_world.video_topic])
        np.testing.assert_array_equal(tiny_world.video_topic,
                                      tiny_world.author_topic[tiny_world.catalog.inherent["author_id"]])

    def test_user_mixture_sparse(self, tiny_world):
        for u in tiny_world.users:
            assert u.topics.size == tiny_world.config.interests_per_user
            assert np.unique(u.topics).size == u.topics.size
            assert u.affinity.sum() == pytest.approx(1.0)

    def test_topic_marginals(self):
        w = world_with(topic_drift=0.0)
        u = w.users[0]
        n = 100_000
        b = generate_behaviors(w, u, n)
        freq = np.bincount(w.video_topic[b.video_id], minlength=w.config.n_topics) / n
        nf = w.config.noise_fraction
        expect = nf * w.topic_popularity
        expect[u.topics] += (1 - nf) * u.affinity
        se = np.sqrt(expect * (1 - expect) / n)
        assert np.all(np.abs(freq - expect) <= 5 * se + 1e-12)


class TestBehaviors:
    def test_zero_length(self, tiny_world):
        b = generate_behaviors(tiny_world, tiny_world.users[0], 0)
        assert len(b) == 0
        assert b.cross["interaction_flags"].shape[0] == 0

    def test_deterministic(self, tiny_world):
        a = generate_behaviors(tiny_world, tiny_world.users[3])
        b = generate_behaviors(tiny_world, tiny_world.users[3])
        np.testing.assert_array_equal(a.video_id, b.video_id)
        np.testing.assert_array_equal(a.cross["interaction_flags"], b.cross["interaction_flags"])

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 29), st.integers(1, 400))
    def test_times_non_decreasing(self, user, length):
        w = world_with()
        b = generate_behaviors(w, w.users[user], length)
        assert len(b) == length
        assert np.all(np.diff(b.event_time) >= 0)
        assert 0 <= b.event_time.min() and b.event_time.max() <= w.config.window_minutes

    def test_length_bounds(self, tiny_world):
        cfg = tiny_world.config
        for u in tiny_world.users:
            assert cfg.min_behaviors <= u.length <= cfg.max_behaviors

    def test_drift_zero_stationary(self):
        w = world_with(topic_drift=0.0, noise_fraction=0.0)
        u = w.users[1]
        n = 40_000
        topics = w.video_topic[generate_behaviors(w, u, n).video_id]
        first = np.array([np.mean(topics[:n // 2] == t) for t in u.topics])
        second = np.array([np.mean(topics[n // 2:] == t) for t in u.topics])
        se = np.sqrt(2 * u.affinity * (1 - u.affinity) / (n // 2))
        assert np.all(np.abs(first - second) <= 5 * se)

    def test_drift_moves_interests(self):
        w = world_with(topic_drift=4.0, noise_fraction=0.0)
        u = w.users[1]
        n = 40_000
        topics = w.video_topic[generate_behaviors(w, u, n).video_id]
        first = np.array([np.mean(topics[:n // 2] == t) for t in u.topics])
        second = np.array([np.mean(topics[n // 2:] == t) for t in u.topics])
        assert np.max(np.abs(first - second)) > 0.1

    def test_playtime_higher_on_interest(self, tiny_world):
        u = tiny_world.users[2]
        b = generate_behaviors(tiny_world, u, 10_000)
        on = np.isin(tiny_world.video_topic[b.video_id], u.topics)
        play = b.cross["playtime_bucket"]
        assert play[on].mean() > play[~on].mean() + 1.0


class TestLabels:
    def test_static_affinity_only(self):
        w = world_with(w_long_term=0.0, w_playtime=0.0)
        u = w.users[0]
        h_long, h_short = generate_behaviors(w, u), generate_behaviors(w, u, 5)
        for v in range(0, w.config.n_videos, 37):
            aff = u.affinity_to(int(w.video_topic[v]))
            expect = 1.0 / (1.0 + np.exp(-(w.config.label_bias + w.config.w_affinity * aff)))
            assert label_probability(w, u, v, h_long) == pytest.approx(expect, abs=1e-15)
            assert label_probability(w, u, v, h_short) == label_probability(w, u, v, h_long)

    def test_only_old_behaviors_count_for_long_term(self):
        w = world_with(w_affinity=0.0, w_playtime=0.0)
        u = w.users[0]
        h = generate_behaviors(w, u)
        v = int(h.video_id[-1])
        recent_only = h.take(np.arange(len(h) - RECENT_WINDOW, len(h)))
        base = 1.0 / (1.0 + np.exp(-w.config.label_bias))
        assert label_probability(w, u, v, recent_only) == pytest.approx(base, abs=1e-15)
        assert label_probability(w, u, v, h) > base

    def test_click_rate_matches_mean_p(self, tiny_world):
        rng = np.random.default_rng(0)
        pairs = []
        for u in tiny_world.users[:10]:
            h = generate_behaviors(tiny_world, u)
            for v in sample_targets(tiny_world, u, 20, rng):
                pairs.append((u, int(v), h))
        p = np.array([label_probability(tiny_world, u, v, h) for u, v, h in pairs])
        n = 100_000
        idx = np.arange(n) % len(pairs)
        draws = np.array([label_click(tiny_world, *pairs[i], rng) for i in idx])
        stderr = np.sqrt(p[idx].mean() * (1 - p[idx].mean()) / n)
        assert abs(draws.mean() - p[idx].mean()) <= 2 * stderr

    def test_label_click_is_bernoulli(self, tiny_world):
        u = tiny_world.users[0]
        h = generate_behaviors(tiny_world, u)
        p = label_probability(tiny_world, u, 5, h)
        rng = np.random.default_rng(3)
        ys = [label_click(tiny_world, u, 5, h, rng) for _ in range(4000)]
        assert set(ys) <= {0, 1}
        assert abs(np.mean(ys) - p) <= 4 * np.sqrt(p * (1 - p) / 4000)

    def test_identical_history_and_seed_same_label(self, tiny_world):
        u = tiny_world.users[0]
        h = generate_behaviors(tiny_world, u)
        a = [label_click(tiny_world, u, v, h, np.random.default_rng(9)) for v in range(50)]
        b = [label_click(tiny_world, u, v, h.take(np.arange(len(h))), np.random.default_rng(9)) for v in range(50)]
        assert a == b

    def test_log_deterministic(self, tiny_world, tiny_log):
        assert_logs_equal(generate_log(tiny_world), tiny_log)

    def test_per_user_independent_of_subset(self, tiny_world, tiny_log):
        sub = generate_log(tiny_world, users=[4, 7])
        np.testing.assert_array_equal(sub.behaviors[7].video_id, tiny_log.behaviors[7].video_id)
        assert sub.samples == [s for s in tiny_log.samples if s.user in (4, 7)]

    @pytest.mark.slow
    def test_planted_signal_recoverable_on_default(self):
        w = generate_world(WorldConfig())
        log = generate_log(w)
        assert auc(long_term_scores(w, log), [s.label for s in log.samples]) >= 0.75


class TestExport:
    def test_round_trip(self, tiny_world, tiny_log, tmp_path):
        sub = generate_log(tiny_world, users=[0, 1, 2, 3, 4])
        rows = sum(len(b) for b in sub.behaviors.values()) + len(sub.samples)
        assert rows >= 1000
        export_log(sub, tiny_world.schema, tmp_path / "log.jsonl")
        back = import_log(tmp_path / "log.jsonl", tiny_world.schema)
        assert_logs_equal(back, sub)

    def test_re_export_byte_identical(self, tiny_world, tiny_log, tmp_path):
        export_log(tiny_log, tiny_world.schema, tmp_path / "a.jsonl")
        export_log(import_log(tmp_path / "a.jsonl", tiny_world.schema), tiny_world.schema, tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    @pytest.mark.parametrize("bad", ["{not json", '{"kind": "sample", "user": 0, "video_id": 1, "label": 2}',
                                     '{"kind": "other"}', '{"user": 1}'])
    def test_malformed_line_named(self, tiny_world, tmp_path, bad):
        sub = generate_log(tiny_world, users=[0])
        path = tmp_path / "log.jsonl"
        export_log(sub, tiny_world.schema, path)
        lines = path.read_text().splitlines()
        lines[5] = bad
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(LogFormatError, match=r":6:"):
            import_log(path, tiny_world.schema)

    def test_samples_keep_context(self, tiny_world, tmp_path):
        sub = generate_log(tiny_world, users=[0])
        export_log(dataclasses.replace(sub, behaviors={}), tiny_world.schema, tmp_path / "s.jsonl")
        back = import_log(tmp_path / "s.jsonl", tiny_world.schema)
        assert back.samples == sub.samples and back.behaviors == {}
