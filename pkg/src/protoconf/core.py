"""Domain types and numeric primitives shared across the package."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np


class ProtoconfError(Exception):
    """Base class for every error raised by this package."""


class ZeroNormVector(ProtoconfError, ValueError):
    pass


class MismatchedK(ProtoconfError, ValueError):
    pass


class InvalidK(ProtoconfError, ValueError):
    pass


class Modality(enum.Enum):
    IMAGE = "image"
    REPORT = "report"


def as_embedding(values) -> np.ndarray:
    """Copy ``values`` into a read-only 1-D float64 array, rejecting non-finite entries."""
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 1:
        raise ValueError(f"embedding must be a non-empty 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("embedding contains NaN or Inf")
    arr.setflags(write=False)
    return arr


def cosine(a, b) -> float:
    """Cosine similarity of two equal-length vectors, clamped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = math.sqrt(float(np.dot(a, a)))
    nb = math.sqrt(float(np.dot(b, b)))
    if na == 0.0 or nb == 0.0:
        raise ZeroNormVector("cosine of a zero-norm vector is undefined")
    c = float(np.dot(a, b)) / (na * nb)
    return min(1.0, max(-1.0, c))


def row_norms(x: np.ndarray) -> np.ndarray:
    """Euclidean norm along the last axis.

    Uses an explicit multiply-and-reduce so each row's value does not depend on how
    many rows are processed together (BLAS kernels do not guarantee that).
    """
    return np.sqrt((x * x).sum(axis=-1))


def check_nonzero(norms: np.ndarray, what: str) -> None:
    if np.any(norms == 0.0):
        idx = np.argwhere(norms == 0.0)[0]
        raise ZeroNormVector(f"{what} has zero norm at index {tuple(int(i) for i in idx)}")


@dataclass(frozen=True, eq=False)
class PrototypeSet:
    """K prototype embeddings for one item; rows 0..K-2 regional, row K-1 global.

    ``K == 1`` is accepted for the global-only ablation (no regional prototypes).
    """

    item_id: str
    modality: Modality
    prototypes: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.prototypes, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"{self.item_id}: prototypes must be a (K, d) matrix, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{self.item_id}: prototypes contain NaN or Inf")
        arr.setflags(write=False)
        object.__setattr__(self, "prototypes", arr)
        object.__setattr__(self, "modality", Modality(self.modality))

    @property
    def K(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    @property
    def regional(self) -> np.ndarray:
        return self.prototypes[:-1]

    @property
    def global_prototype(self) -> np.ndarray:
        return self.prototypes[-1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, PrototypeSet):
            return NotImplemented
        return (
            self.item_id == other.item_id
            and self.modality == other.modality
            and np.array_equal(self.prototypes, other.prototypes)
        )

    def __hash__(self) -> int:
        return hash((self.item_id, self.modality, self.prototypes.tobytes()))


def _softmax_times_k(theta: np.ndarray) -> np.ndarray:
    K = theta.shape[0]
    e = np.exp(theta - theta.max())
    w = K * e / e.sum()
    # one renormalization pass pulls sum(w) to K within a few ulps
    return w * (K / w.sum())


@dataclass(frozen=True, eq=False)
class WeightVector:
    """Shared prototype weights ``w = K * softmax(theta)``; positive, summing to K."""

    theta: np.ndarray
    w: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        theta = np.array(self.theta, dtype=np.float64).reshape(-1)
        if theta.size < 1:
            raise InvalidK("weight vector needs at least one parameter")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta contains NaN or Inf")
        theta.setflags(write=False)
        w = _softmax_times_k(theta)
        w.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "w", w)

    @classmethod
    def uniform(cls, K: int) -> "WeightVector":
        return cls(np.zeros(K))

    @property
    def K(self) -> int:
        return self.theta.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, WeightVector):
            return NotImplemented
        return np.array_equal(self.theta, other.theta)

    def __hash__(self) -> int:
        return hash(self.theta.tobytes())


@dataclass(frozen=True)
class RankedList:
    """Candidates in descending score order; ties go to the smaller candidate id."""

    query_id: str
    entries: tuple[tuple[str, float], ...]

    @classmethod
    def from_scores(cls, query_id: str, ids: Sequence[str], scores: Iterable[float]) -> "RankedList":
        pairs = [(str(i), float(s)) for i, s in zip(ids, scores)]
        if len({p[0] for p in pairs}) != len(pairs):
            raise ValueError(f"duplicate candidate ids in ranking for {query_id}")
        pairs.sort(key=lambda p: (-p[1], p[0]))
        return cls(query_id, tuple(pairs))

    @property
    def ids(self) -> list[str]:
        return [e[0] for e in self.entries]

    @property
    def scores(self) -> list[float]:
        return [e[1] for e in self.entries]

    def top(self, k: int) -> list[str]:
        return [e[0] for e in self.entries[:k]]

    def __len__(self) -> int:
        return len(self.entries)


class CorpusError(ProtoconfError, ValueError):
    pass


class DanglingPairing(CorpusError):
    pass


@dataclass(frozen=True)
class Corpus:
    """Image and report prototype sets plus the report -> images ground truth.

    ``labels`` (item id -> class) and ``ambiguous`` (report ids whose pair was
    deliberately corrupted) are optional annotations; synthetic corpora fill them.
    """

    images: Mapping[str, PrototypeSet]
    reports: Mapping[str, PrototypeSet]
    pairing: Mapping[str, frozenset]
    labels: Mapping[str, str] = field(default_factory=dict)
    ambiguous: frozenset = frozenset()

    def __post_init__(self) -> None:
        pairing = {str(r): frozenset(str(i) for i in imgs) for r, imgs in self.pairing.items()}
        object.__setattr__(self, "pairing", pairing)
        object.__setattr__(self, "ambiguous", frozenset(self.ambiguous))
        if not self.images or not self.reports:
            raise CorpusError("corpus needs at least one image and one report")
        owner: dict[str, str] = {}
        for rid, imgs in pairing.items():
            if rid not in self.reports:
                raise DanglingPairing(f"pairing references unknown report id {rid!r}")
            if not imgs:
                raise CorpusError(f"report {rid!r} has an empty pairing set")
            for iid in imgs:
                if iid not in self.images:
                    raise DanglingPairing(f"report {rid!r} references unknown image id {iid!r}")
                if iid in owner:
                    raise CorpusError(f"image {iid!r} paired with both {owner[iid]!r} and {rid!r}")
                owner[iid] = rid
        unpaired = sorted(set(self.images) - set(owner))
        if unpaired:
            raise DanglingPairing(f"image {unpaired[0]!r} is not paired with any report")
        shapes = {p.prototypes.shape for p in self.images.values()}
        shapes |= {p.prototypes.shape for p in self.reports.values()}
        if len(shapes) != 1:
            raise MismatchedK(f"prototype sets disagree on (K, d): {sorted(shapes)}")
        for key, ps in self.images.items():
            if ps.item_id != key or ps.modality is not Modality.IMAGE:
                raise CorpusError(f"image entry {key!r} is not an image prototype set with that id")
        for key, ps in self.reports.items():
            if ps.item_id != key or ps.modality is not Modality.REPORT:
                raise CorpusError(f"report entry {key!r} is not a report prototype set with that id")

    @property
    def K(self) -> int:
        return next(iter(self.images.values())).K

    @property
    def dim(self) -> int:
        return next(iter(self.images.values())).dim

    @property
    def report_of(self) -> dict[str, str]:
        return {iid: rid for rid, imgs in self.pairing.items() for iid in imgs}

    def pairs(self) -> list[tuple[PrototypeSet, PrototypeSet]]:
        """Matched (image, report) pairs in sorted image-id order."""
        owner = self.report_of
        return [(self.images[i], self.reports[owner[i]]) for i in sorted(owner)]
