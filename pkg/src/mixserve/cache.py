"""Embedding-keyed FIFO cache of generated images with cosine retrieval.

Entries carry image-side embeddings; lookups compute cosine similarity
against a query embedding and map the best score to a number of denoising
steps that may be skipped when refining the retrieved image.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

DEFAULT_DIM = 512
STEP_CHOICES = (5, 10, 15, 20, 25, 30)
DEFAULT_THRESHOLDS = ((5, 0.25), (10, 0.26), (15, 0.27), (20, 0.28), (25, 0.29), (30, 0.30))

LARGE = "large"
SMALL = "small"

POLICY_ALL = "all"
POLICY_LARGE = "large"
POLICY_DISABLED = "disabled"
POLICIES = (POLICY_ALL, POLICY_LARGE, POLICY_DISABLED)

NORM_TOL = 1e-6


class EmbeddingError(ValueError):
    """Raised for vectors that cannot serve as embeddings."""


def normalize(v: Sequence[float] | np.ndarray) -> np.ndarray:
    """Scale a vector to unit Euclidean norm, preserving direction.

    Rejects zero and non-finite input.
    """
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise EmbeddingError(f"expected 1-d vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise EmbeddingError("vector has non-finite components")
    norm = float(np.linalg.norm(arr))
    if norm == 0.0:
        raise EmbeddingError("cannot normalize the zero vector")
    return arr / norm


def cosine(q: np.ndarray, e: np.ndarray) -> float:
    """Cosine similarity of two unit-norm embeddings (their dot product)."""
    if q.shape != e.shape:
        raise EmbeddingError(f"dimension mismatch: {q.shape} vs {e.shape}")
    return float(np.dot(q, e))


def is_normalized(v: np.ndarray, tol: float = NORM_TOL) -> bool:
    return abs(float(np.linalg.norm(v)) - 1.0) <= tol


@dataclass(frozen=True)
class CacheEntry:
    """A cached generated image: its embedding plus provenance."""

    id: str
    embedding: np.ndarray
    producer: str  # LARGE or SMALL
    seq: int
    inserted_at: float  # simulated seconds


class ThresholdTable:
    """Ordered (k, tau_k) pairs mapping similarity to skippable steps.

    tau_k must rise with k: the more steps skipped, the closer the cached
    image has to be. The smallest tau doubles as the global hit threshold.
    """

    def __init__(self, pairs: Iterable[tuple[int, float]], total_steps: int = 50):
        rows = [(int(k), float(t)) for k, t in pairs]
        if not rows:
            raise ValueError("threshold table must not be empty")
        ks = [k for k, _ in rows]
        taus = [t for _, t in rows]
        if any(b <= a for a, b in zip(ks, ks[1:])):
            raise ValueError(f"k values must be strictly increasing: {ks}")
        if any(b <= a for a, b in zip(taus, taus[1:])):
            raise ValueError(f"thresholds must be strictly increasing: {taus}")
        if any(not -1.0 <= t <= 1.0 for t in taus):
            raise ValueError(f"thresholds must lie in [-1, 1]: {taus}")
        if ks[-1] >= total_steps:
            raise ValueError(f"max k {ks[-1]} must stay below total steps {total_steps}")
        if any(k <= 0 for k in ks):
            raise ValueError(f"k values must be positive: {ks}")
        self.pairs = tuple(rows)
        self.total_steps = int(total_steps)

    @classmethod
    def default(cls, total_steps: int = 50) -> "ThresholdTable":
        return cls(DEFAULT_THRESHOLDS, total_steps=total_steps)

    @property
    def tau(self) -> float:
        """Global hit threshold: the lowest per-k threshold."""
        return self.pairs[0][1]

    @property
    def step_choices(self) -> tuple[int, ...]:
        return tuple(k for k, _ in self.pairs)

    def select_k(self, similarity: float) -> int | None:
        """Largest k whose threshold the similarity meets, or None."""
        for k, tau_k in reversed(self.pairs):
            if similarity >= tau_k:
                return k
        return None


@dataclass(frozen=True)
class RetrievalResult:
    """Outcome of a cache lookup; entry and k are absent on a miss."""

    entry: CacheEntry | None
    similarity: float | None
    k: int | None

    @property
    def hit(self) -> bool:
        return self.entry is not None


class SemanticCache:
    """FIFO store of CacheEntry records with exhaustive cosine retrieval.

    Capacity eviction drops the oldest entries first; an optional max age
    additionally drops entries older than the window at insert time. The
    insertion policy decides which producers get cached at all:

    - "all": every entry is stored
    - "large": only large-model entries are stored (others are no-ops)
    - "disabled": nothing is stored

    Retrieval is an exact linear scan. Many readers or one writer.
    """

    def __init__(
        self,
        capacity: int,
        dim: int = DEFAULT_DIM,
        policy: str = POLICY_ALL,
        max_age_s: float | None = None,
    ):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        if policy not in POLICIES:
            raise ValueError(f"unknown cache policy {policy!r}, expected one of {POLICIES}")
        if max_age_s is not None and max_age_s <= 0:
            raise ValueError(f"max_age_s must be positive, got {max_age_s}")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.policy = policy
        self.max_age_s = max_age_s
        self._store: deque[CacheEntry] = deque()
        self._buf = np.empty((min(self.capacity, 1024), self.dim), dtype=np.float64)
        self._lo = 0
        self._hi = 0
        self._next_seq = 0

    def __len__(self) -> int:
        return len(self._store)

    def entries(self) -> list[CacheEntry]:
        """Live entries, oldest first."""
        return list(self._store)

    @property
    def next_seq(self) -> int:
        return self._next_seq

    def _append_row(self, embedding: np.ndarray) -> None:
        if self._hi == self._buf.shape[0]:
            live = self._hi - self._lo
            if live <= self._buf.shape[0] // 2:
                self._buf[:live] = self._buf[self._lo:self._hi]
            else:
                grown = np.empty((max(2 * self._buf.shape[0], 1024), self.dim), dtype=np.float64)
                grown[:live] = self._buf[self._lo:self._hi]
                self._buf = grown
            self._lo, self._hi = 0, live
        self._buf[self._hi] = embedding
        self._hi += 1

    def _evict_front(self) -> CacheEntry:
        self._lo += 1
        return self._store.popleft()

    def admits(self, producer: str) -> bool:
        """Whether the insertion policy stores entries from this producer."""
        if self.policy == POLICY_DISABLED:
            return False
        if self.policy == POLICY_LARGE:
            return producer == LARGE
        return True

    def insert(self, entry: CacheEntry) -> list[CacheEntry]:
        """Store an entry, returning whatever got evicted (oldest first).

        Entries rejected by the policy are silently dropped (no eviction).
        """
        if not self.admits(entry.producer):
            return []
        if entry.producer not in (LARGE, SMALL):
            raise ValueError(f"unknown producer {entry.producer!r}")
        if entry.embedding.shape != (self.dim,):
            raise EmbeddingError(
                f"entry embedding has shape {entry.embedding.shape}, cache dim is {self.dim}"
            )
        if not is_normalized(entry.embedding):
            raise EmbeddingError(f"entry {entry.id!r} embedding is not unit norm")
        if self._store and entry.seq <= self._store[-1].seq:
            raise ValueError(
                f"seq must increase: got {entry.seq} after {self._store[-1].seq}"
            )
        evicted: list[CacheEntry] = []
        if self.max_age_s is not None:
            horizon = entry.inserted_at - self.max_age_s
            while self._store and self._store[0].inserted_at < horizon:
                evicted.append(self._evict_front())
        self._store.append(entry)
        self._append_row(entry.embedding)
        while len(self._store) > self.capacity:
            evicted.append(self._evict_front())
        self._next_seq = max(self._next_seq, entry.seq + 1)
        return evicted

    def add(
        self, id: str, embedding: np.ndarray, producer: str, inserted_at: float
    ) -> list[CacheEntry]:
        """insert() with the sequence number minted internally."""
        entry = CacheEntry(id, embedding, producer, self._next_seq, inserted_at)
        return self.insert(entry)

    def retrieve(self, q: np.ndarray, table: ThresholdTable) -> RetrievalResult:
        """Best-similarity lookup over all live entries.

        Misses when the cache is empty or the best score falls below the
        table's hit threshold. Equal scores resolve to the newest entry.
        """
        if q.shape != (self.dim,):
            raise EmbeddingError(f"query has shape {q.shape}, cache dim is {self.dim}")
        if not self._store:
            return RetrievalResult(None, None, None)
        sims = self._buf[self._lo:self._hi] @ q
        # argmax of the reversed view lands on the newest among ties
        idx = sims.shape[0] - 1 - int(np.argmax(sims[::-1]))
        best = float(sims[idx])
        if best < table.tau:
            return RetrievalResult(None, best, None)
        return RetrievalResult(self._store[idx], best, table.select_k(best))

    def export_jsonl(self, path) -> None:
        """One JSON object per live entry, oldest first."""
        with open(path, "w", encoding="utf-8") as fh:
            for e in self._store:
                fh.write(
                    json.dumps(
                        {
                            "id": e.id,
                            "seq": e.seq,
                            "inserted_at": e.inserted_at,
                            "producer": e.producer,
                            "embedding": [float(x) for x in e.embedding],
                        }
                    )
                )
                fh.write("\n")

    def import_jsonl(self, path) -> int:
        """Replay a snapshot through insert(); returns entries accepted."""
        count = 0
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                    entry = CacheEntry(
                        id=str(rec["id"]),
                        embedding=np.asarray(rec["embedding"], dtype=np.float64),
                        producer=str(rec["producer"]),
                        seq=int(rec["seq"]),
                        inserted_at=float(rec["inserted_at"]),
                    )
                except (KeyError, ValueError, TypeError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad snapshot record: {exc}") from exc
                seq_before = self._next_seq
                self.insert(entry)
                if self._next_seq != seq_before:
                    count += 1
        return count


def linear_sigma_schedule(total_steps: int) -> np.ndarray:
    """Noise scale per timestep: 1 at step 0 falling linearly to 0 at T."""
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    return 1.0 - np.arange(total_steps + 1, dtype=np.float64) / total_steps


def validate_sigma_schedule(schedule: np.ndarray) -> None:
    """Check the full schedule contract: endpoints and monotonicity."""
    sched = np.asarray(schedule, dtype=np.float64)
    if sched.ndim != 1 or sched.shape[0] < 2:
        raise ValueError("schedule must be a 1-d table over timesteps 0..T")
    if sched[0] != 1.0 or sched[-1] != 0.0:
        raise ValueError("schedule must start at 1.0 and end at 0.0")
    if np.any(np.diff(sched) > 0):
        raise ValueError("schedule must be non-increasing")
    if np.any(sched < 0.0) or np.any(sched > 1.0):
        raise ValueError("schedule values must lie in [0, 1]")


def noise_reentry_level(k: int, schedule: np.ndarray) -> float:
    """Noise scale for re-entering denoising after skipping k steps.

    At sigma 1 the cached image is fully replaced by noise (fresh
    generation); at sigma 0 it is returned untouched.
    """
    total = len(schedule) - 1
    if not 0 <= k <= total:
        raise ValueError(f"k={k} outside the schedule range [0, {total}]")
    return float(schedule[k])
