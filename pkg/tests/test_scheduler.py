import math

import numpy as np
import pytest

from mixserve.cache import CacheEntry, SemanticCache, ThresholdTable, normalize
from mixserve.scheduler import (
    QueuePair,
    Request,
    STATUS_DONE,
    STATUS_QUEUED_HIT,
    STATUS_QUEUED_MISS,
    STATUS_RUNNING,
    classify,
    dispatch,
    on_completion,
)


def exact_sim_query(s):
    """2-d unit query whose dot with (1, 0) is exactly s."""
    return np.array([s, math.sqrt(1.0 - s * s)])


def make_cache(policy="all", capacity=8):
    c = SemanticCache(capacity=capacity, dim=2, policy=policy)
    return c


def seeded_cache():
    c = make_cache()
    c.insert(CacheEntry("base", np.array([1.0, 0.0]), "large", 0, 0.0))
    return c


def request(rid="r0", t=0.0, q=None):
    return Request(rid, t, q if q is not None else exact_sim_query(0.31))


class TestClassify:
    def test_empty_cache_goes_to_miss_queue(self):
        queues = QueuePair()
        r = classify(request(), make_cache(), ThresholdTable.default(), queues)
        assert r.status == STATUS_QUEUED_MISS
        assert list(queues.miss) == [r] and not queues.hit

    def test_similar_query_goes_to_hit_queue_with_k(self):
        queues = QueuePair()
        r = classify(request(q=exact_sim_query(0.31)), seeded_cache(), ThresholdTable.default(), queues)
        assert r.status == STATUS_QUEUED_HIT
        assert r.k == 30
        assert r.source_entry_id == "base"
        assert r.similarity == pytest.approx(0.31)
        assert list(queues.hit) == [r]

    def test_exact_threshold_is_a_hit(self):
        queues = QueuePair()
        r = classify(request(q=exact_sim_query(0.25)), seeded_cache(), ThresholdTable.default(), queues)
        assert r.status == STATUS_QUEUED_HIT
        assert r.k == 5

    def test_hit_keeps_source_embedding_and_age(self):
        queues = QueuePair()
        r = classify(
            request(t=12.0, q=exact_sim_query(0.29)),
            seeded_cache(),
            ThresholdTable.default(),
            queues,
        )
        assert np.array_equal(r.source_embedding, np.array([1.0, 0.0]))
        assert r.source_age_s == pytest.approx(12.0)


class TestDispatch:
    def fill(self):
        queues = QueuePair()
        cache = seeded_cache()
        table = ThresholdTable.default()
        m1 = classify(request("m1", q=exact_sim_query(0.0)), cache, table, queues)
        h1 = classify(request("h1", q=exact_sim_query(0.31)), cache, table, queues)
        m2 = classify(request("m2", q=exact_sim_query(-0.5)), cache, table, queues)
        h2 = classify(request("h2", q=exact_sim_query(0.27)), cache, table, queues)
        return queues, (m1, h1, m2, h2)

    def test_large_prioritizes_misses(self):
        queues, (m1, h1, m2, h2) = self.fill()
        assert dispatch("large", queues, "quality") is m1
        assert dispatch("large", queues, "quality") is m2
        assert dispatch("large", queues, "quality") is h1

    def test_small_serves_hits_only(self):
        queues, (m1, h1, m2, h2) = self.fill()
        assert dispatch("small", queues, "throughput") is h1
        assert dispatch("small", queues, "throughput") is h2
        assert dispatch("small", queues, "throughput") is None
        assert list(queues.miss) == [m1, m2]

    def test_large_skips_hits_without_work_conservation(self):
        queues, (m1, h1, m2, h2) = self.fill()
        dispatch("large", queues, "throughput", work_conservation=False)
        dispatch("large", queues, "throughput", work_conservation=False)
        assert dispatch("large", queues, "throughput", work_conservation=False) is None
        assert list(queues.hit) == [h1, h2]

    def test_large_takes_hits_with_work_conservation(self):
        queues, (m1, h1, m2, h2) = self.fill()
        dispatch("large", queues, "throughput", work_conservation=True)
        dispatch("large", queues, "throughput", work_conservation=True)
        assert dispatch("large", queues, "throughput", work_conservation=True) is h1

    def test_fifo_within_class(self):
        queues = QueuePair()
        cache = make_cache()
        table = ThresholdTable.default()
        rs = [
            classify(request(f"m{i}", t=float(i), q=exact_sim_query(0.0)), cache, table, queues)
            for i in range(5)
        ]
        popped = [dispatch("large", queues, "quality") for _ in range(5)]
        assert popped == rs


class TestOnCompletion:
    def done_request(self):
        r = request()
        r._advance(STATUS_QUEUED_MISS)
        r._advance(STATUS_RUNNING)
        r._advance(STATUS_DONE)
        return r

    def test_cache_all_stores_small_output(self):
        cache = make_cache(policy="all")
        assert on_completion(self.done_request(), cache, normalize([0.5, 0.5]), "small", 9.0)
        assert len(cache) == 1
        assert cache.entries()[0].producer == "small"
        assert cache.entries()[0].inserted_at == 9.0

    def test_cache_large_skips_small_output(self):
        cache = make_cache(policy="large")
        assert not on_completion(self.done_request(), cache, normalize([0.5, 0.5]), "small", 9.0)
        assert len(cache) == 0

    def test_disabled_stores_nothing(self):
        cache = make_cache(policy="disabled")
        assert not on_completion(self.done_request(), cache, normalize([0.5, 0.5]), "large", 9.0)
        assert len(cache) == 0

    def test_requires_done_status(self):
        cache = make_cache()
        with pytest.raises(RuntimeError):
            on_completion(request(), cache, normalize([0.5, 0.5]), "large", 9.0)


class TestStatusTransitions:
    def test_forward_only(self):
        r = request()
        r._advance(STATUS_QUEUED_HIT)
        r._advance(STATUS_RUNNING)
        with pytest.raises(RuntimeError):
            r._advance(STATUS_QUEUED_MISS)
        r._advance(STATUS_DONE)
        with pytest.raises(RuntimeError):
            r._advance(STATUS_RUNNING)
