"""Global-similarity ranking and confidence-weighted re-ranking.

Per-candidate scores are computed in chunks (optionally on a thread pool) and merged
in candidate order before a single sort, so the output never depends on the number
of workers. All reductions are explicit multiply-and-sum over the last axis, whose
per-row result is the same whatever the chunk size.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .confidence import Transform, confidence, paired_cosines
from .core import (
    MismatchedK,
    PrototypeSet,
    RankedList,
    WeightVector,
    ZeroNormVector,
    check_nonzero,
    row_norms,
)

log = logging.getLogger(__name__)

THREADS_ENV = "PECM_THREADS"
DEFAULT_CHUNK = 512


def default_workers() -> int:
    """Worker count from ``PECM_THREADS``; 0 or unset means one per CPU."""
    raw = os.environ.get(THREADS_ENV, "0").strip() or "0"
    n = int(raw)
    if n < 0:
        raise ValueError(f"{THREADS_ENV} must be >= 0, got {n}")
    return n or (os.cpu_count() or 1)


def weighted_sum(z: np.ndarray, w: WeightVector) -> np.ndarray:
    """``sum_k w_k z[..., k, :]`` accumulated in k order (no 1/K factor)."""
    if z.shape[-2] != w.K:
        raise MismatchedK(f"{z.shape[-2]} prototypes but {w.K} weights")
    h = w.w[0] * z[..., 0, :]
    for k in range(1, w.K):
        h = h + w.w[k] * z[..., k, :]
    return h


def global_embedding(z: PrototypeSet, w: WeightVector) -> np.ndarray:
    return weighted_sum(z.prototypes, w)


@dataclass(frozen=True)
class RerankScore:
    initial: float
    confidence: float
    final: float


@dataclass(frozen=True)
class RerankedList:
    """Re-ranked candidates, descending by final score with id tie-break."""

    query_id: str
    entries: tuple[tuple[str, RerankScore], ...]

    @property
    def ranked(self) -> RankedList:
        return RankedList(self.query_id, tuple((cid, s.final) for cid, s in self.entries))

    @property
    def ids(self) -> list[str]:
        return [e[0] for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


class CandidatePool:
    """Candidates stacked into one (N, K, d) array with cached global embeddings.

    Build once per weight vector and reuse across queries.
    """

    def __init__(self, candidates: Sequence[PrototypeSet], w: WeightVector):
        if not candidates:
            raise ValueError("candidate list is empty")
        self.ids = [c.item_id for c in candidates]
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate candidate ids")
        shapes = {c.prototypes.shape for c in candidates}
        if len(shapes) != 1:
            raise MismatchedK(f"candidates disagree on (K, d): {sorted(shapes)}")
        self._init(np.stack([c.prototypes for c in candidates]), w)

    @classmethod
    def from_array(cls, ids: Sequence[str], z: np.ndarray, w: WeightVector) -> "CandidatePool":
        """Pool over an existing (N, K, d) float64 array, without per-item copies."""
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 3 or z.shape[0] != len(ids) or len(set(ids)) != len(ids):
            raise ValueError("need unique ids and a matching (N, K, d) array")
        pool = cls.__new__(cls)
        pool.ids = [str(i) for i in ids]
        pool._init(z, w)
        return pool

    def _init(self, z: np.ndarray, w: WeightVector) -> None:
        if z.shape[1] != w.K:
            raise MismatchedK(f"candidates have K={z.shape[1]} but weights have K={w.K}")
        self.w = w
        self.z = z
        self.h = weighted_sum(z, w)
        self.h_norm = row_norms(self.h)
        check_nonzero(self.h_norm, "candidate global embedding")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def K(self) -> int:
        return self.z.shape[1]


def _as_pool(candidates, w: WeightVector) -> CandidatePool:
    if isinstance(candidates, CandidatePool):
        if candidates.w is not w and candidates.w != w:
            raise ValueError("candidate pool was built with different weights")
        return candidates
    return CandidatePool(list(candidates), w)


def _query_global(query: PrototypeSet, pool: CandidatePool) -> tuple[np.ndarray, float]:
    if query.prototypes.shape != pool.z.shape[1:]:
        raise MismatchedK(f"query shape {query.prototypes.shape} vs candidates {pool.z.shape[1:]}")
    hq = global_embedding(query, pool.w)
    nq = float(row_norms(hq))
    if nq == 0.0:
        raise ZeroNormVector(f"query {query.item_id!r} has a zero-norm global embedding")
    return hq, nq


def _chunks(n: int, size: int) -> list[slice]:
    return [slice(a, min(a + size, n)) for a in range(0, n, size)]


def _map_chunks(fn, n: int, workers: int, chunk: int) -> np.ndarray:
    parts = _chunks(n, chunk)
    if workers <= 1 or len(parts) == 1:
        out = [fn(s) for s in parts]
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            out = list(ex.map(fn, parts))
    return np.concatenate(out)


def initial_scores(query: PrototypeSet, pool: CandidatePool, workers: int = 1, chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    """Cosine of the query's global embedding with every candidate's, in pool order."""
    hq, nq = _query_global(query, pool)

    def score(s: slice) -> np.ndarray:
        return np.clip((pool.h[s] * hq).sum(axis=-1) / (pool.h_norm[s] * nq), -1.0, 1.0)

    return _map_chunks(score, len(pool), workers, chunk)


def confidence_scores(
    query: PrototypeSet,
    pool: CandidatePool,
    transform: Transform | str = Transform.SHIFTED,
    rows: np.ndarray | None = None,
    workers: int = 1,
    chunk: int = DEFAULT_CHUNK,
) -> np.ndarray:
    """Confidence of the query against each candidate (or the subset ``rows``)."""
    qz = query.prototypes

    def score(s: slice) -> np.ndarray:
        z = pool.z[s] if rows is None else pool.z[rows[s]]
        return confidence(paired_cosines(z, qz), pool.w, transform)

    n = len(pool) if rows is None else len(rows)
    return _map_chunks(score, n, workers, chunk)


def initial_rank(query: PrototypeSet, candidates, w: WeightVector, workers: int = 1) -> RankedList:
    pool = _as_pool(candidates, w)
    return RankedList.from_scores(query.item_id, pool.ids, initial_scores(query, pool, workers))


def _order(ids: list[str], scores: np.ndarray) -> list[int]:
    return sorted(range(len(ids)), key=lambda j: (-scores[j], ids[j]))


def rerank(
    query: PrototypeSet,
    candidates,
    w: WeightVector,
    transform: Transform | str = Transform.SHIFTED,
    shortlist: int | None = None,
    workers: int = 1,
) -> RerankedList:
    """Re-rank by ``initial * confidence``.

    With ``shortlist=M`` only the top M candidates of the initial ranking are
    re-scored and returned; by default every candidate is.
    """
    pool = _as_pool(candidates, w)
    init = initial_scores(query, pool, workers)
    if shortlist is not None:
        if shortlist < 1:
            raise ValueError(f"shortlist must be >= 1, got {shortlist}")
        rows = np.array(sorted(_order(pool.ids, init)[:shortlist]), dtype=np.intp)
        init = init[rows]
        ids = [pool.ids[j] for j in rows]
    else:
        rows = None
        ids = pool.ids
    conf = confidence_scores(query, pool, transform, rows=rows, workers=workers)
    final = init * conf
    flipped = (np.sign(final) != np.sign(init)) & (init != 0.0) & (final != 0.0)
    if np.any(flipped):
        log.warning(
            "query %s: %d final scores changed sign relative to the initial similarity (transform=%s)",
            query.item_id, int(flipped.sum()), Transform(transform).value,
        )
    entries = tuple(
        (ids[j], RerankScore(float(init[j]), float(conf[j]), float(final[j])))
        for j in _order(ids, final)
    )
    return RerankedList(query.item_id, entries)


def rank_queries(queries: Sequence[PrototypeSet], pool: CandidatePool, fn, workers: int | None = None) -> list:
    """Apply ``fn(query, pool)`` to every query on a bounded pool; results keep query order."""
    workers = default_workers() if workers is None else workers
    if workers <= 1 or len(queries) <= 1:
        return [fn(q, pool) for q in queries]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(lambda q: fn(q, pool), queries))
