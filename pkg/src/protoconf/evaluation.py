"""Recall@K (capped), Precision@K and micro/macro aggregation."""

from __future__ import annotations

import enum
from collections import defaultdict
from typing import Iterable, Sequence

from .core import ProtoconfError, RankedList


class EmptyRelevance(ProtoconfError, ValueError):
    pass


class MissingLabels(ProtoconfError, ValueError):
    pass


class Aggregation(str, enum.Enum):
    MICRO = "micro"
    MACRO = "macro"


def _top_ids(ranked: RankedList | Sequence[str], k: int) -> list[str]:
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if isinstance(ranked, RankedList):
        return ranked.top(k)
    return list(ranked[:k])


def recall_at_k(ranked: RankedList | Sequence[str], relevant: Iterable[str], k: int) -> float:
    """Hits in the top ``k`` divided by ``min(k, |relevant|)``.

    The cap lets a query with more relevant items than ``k`` still reach 1.0.
    """
    relevant = set(relevant)
    if not relevant:
        raise EmptyRelevance("recall needs at least one relevant id")
    hits = len(relevant.intersection(_top_ids(ranked, k)))
    return hits / min(k, len(relevant))


def precision_at_k(ranked: RankedList | Sequence[str], relevant: Iterable[str], k: int) -> float:
    relevant = set(relevant)
    return len(relevant.intersection(_top_ids(ranked, k))) / k


def aggregate(per_query: Sequence[tuple[str, str | None, float]], mode: Aggregation | str) -> float:
    """Mean of ``(query_id, class_label, value)`` rows.

    ``micro`` averages over queries; ``macro`` averages the per-class means.
    """
    mode = Aggregation(mode)
    if not per_query:
        raise ValueError("nothing to aggregate")
    if mode is Aggregation.MICRO:
        return sum(v for _, _, v in per_query) / len(per_query)
    by_class: dict[str, list[float]] = defaultdict(list)
    for qid, label, value in per_query:
        if label is None:
            raise MissingLabels(f"query {qid!r} has no class label for macro aggregation")
        by_class[label].append(value)
    means = [sum(v) / len(v) for _, v in sorted(by_class.items())]
    return sum(means) / len(means)
