"""Request intake: hit/miss classification, queueing, and dispatch rules."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .allocator import QUALITY
from .cache import SemanticCache, ThresholdTable

STATUS_NEW = "new"
STATUS_QUEUED_HIT = "queued_hit"
STATUS_QUEUED_MISS = "queued_miss"
STATUS_RUNNING = "running"
STATUS_DONE = "done"

_STATUS_ORDER = {
    STATUS_NEW: 0,
    STATUS_QUEUED_HIT: 1,
    STATUS_QUEUED_MISS: 1,
    STATUS_RUNNING: 2,
    STATUS_DONE: 3,
}


@dataclass
class Request:
    """One image-generation request and its lifecycle bookkeeping.

    On a cache hit the retrieved entry's embedding is kept on the request,
    so later eviction of the entry cannot invalidate the dispatch.
    """

    id: str
    arrival_time: float
    query_embedding: np.ndarray
    status: str = STATUS_NEW
    k: int | None = None
    source_entry_id: str | None = None
    source_embedding: np.ndarray | None = None
    source_age_s: float | None = None
    similarity: float | None = None
    dispatch_time: float | None = None
    completion_time: float | None = None
    worker_id: int | None = None
    serving_model: str | None = None

    @property
    def is_hit(self) -> bool:
        return self.k is not None

    def _advance(self, status: str) -> None:
        if _STATUS_ORDER[status] <= _STATUS_ORDER[self.status]:
            raise RuntimeError(f"request {self.id}: illegal transition {self.status} -> {status}")
        self.status = status


@dataclass
class QueuePair:
    """FIFO hit and miss queues; a request sits in at most one."""

    hit: deque[Request] = field(default_factory=deque)
    miss: deque[Request] = field(default_factory=deque)

    def __len__(self) -> int:
        return len(self.hit) + len(self.miss)


def classify(
    r: Request, cache: SemanticCache, table: ThresholdTable, queues: QueuePair
) -> Request:
    """Route a new request into the hit or miss queue.

    Runs one retrieval against the current cache state; the decision is
    not revisited while the request waits.
    """
    result = cache.retrieve(r.query_embedding, table)
    r.similarity = result.similarity
    if result.hit:
        r.k = result.k
        r.source_entry_id = result.entry.id
        r.source_embedding = result.entry.embedding
        r.source_age_s = r.arrival_time - result.entry.inserted_at
        r._advance(STATUS_QUEUED_HIT)
        queues.hit.append(r)
    else:
        r._advance(STATUS_QUEUED_MISS)
        queues.miss.append(r)
    return r


def dispatch(
    worker_class: str,
    queues: QueuePair,
    mode: str,
    work_conservation: bool = True,
) -> Request | None:
    """Pop the next request an idle worker of this class may serve.

    Large workers drain misses first and fall back to hits when the mode
    permits (always in quality mode, only under work conservation in
    throughput mode). Small workers serve hits exclusively.
    """
    if worker_class == "large":
        if queues.miss:
            return queues.miss.popleft()
        if queues.hit and (mode == QUALITY or work_conservation):
            return queues.hit.popleft()
        return None
    if queues.hit:
        return queues.hit.popleft()
    return None


def on_completion(
    r: Request,
    cache: SemanticCache,
    image_embedding: np.ndarray,
    producer: str,
    now: float,
) -> bool:
    """Offer a finished request's image to the cache; True if stored."""
    if r.status != STATUS_DONE:
        raise RuntimeError(f"request {r.id} not done (status {r.status})")
    if not cache.admits(producer):
        return False
    cache.add(r.id, image_embedding, producer, now)
    return True
