"""Per-prototype similarity vectors and the weighted confidence score."""

from __future__ import annotations

import enum

import numpy as np

from .core import MismatchedK, Modality, PrototypeSet, WeightVector, check_nonzero, row_norms


class Transform(str, enum.Enum):
    """How similarities enter the confidence average.

    ``raw`` uses cosines as-is, so confidence lies in [-1, 1]. ``shifted`` maps each
    cosine to ``(s + 1) / 2`` first, keeping confidence in [0, 1] so that the
    similarity x confidence product never flips the sign of a score.
    """

    RAW = "raw"
    SHIFTED = "shifted"


def similarity_vector(zi: PrototypeSet, zr: PrototypeSet) -> np.ndarray:
    if zi.modality is not Modality.IMAGE or zr.modality is not Modality.REPORT:
        raise ValueError("similarity_vector expects (image, report) prototype sets")
    if zi.prototypes.shape != zr.prototypes.shape:
        raise MismatchedK(f"prototype shapes differ: {zi.prototypes.shape} vs {zr.prototypes.shape}")
    return paired_cosines(zi.prototypes, zr.prototypes)


def paired_cosines(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine of ``a[..., k, :]`` with ``b[..., k, :]``; broadcasts over leading axes."""
    na = row_norms(a)
    nb = row_norms(b)
    check_nonzero(na, "prototype")
    check_nonzero(nb, "prototype")
    s = (a * b).sum(axis=-1) / (na * nb)
    return np.clip(s, -1.0, 1.0)


def transformed(sims: np.ndarray, transform: Transform | str) -> np.ndarray:
    transform = Transform(transform)
    if transform is Transform.SHIFTED:
        return (sims + 1.0) / 2.0
    return sims


def confidence(sims, w: WeightVector, transform: Transform | str = Transform.SHIFTED):
    """Weighted mean ``(1/K) * sum_k t(s_k) * w_k``; accepts (K,) or (..., K) similarities."""
    sims = np.asarray(sims, dtype=np.float64)
    if sims.shape[-1] != w.K:
        raise MismatchedK(f"{sims.shape[-1]} similarities but {w.K} weights")
    c = (transformed(sims, transform) * w.w).sum(axis=-1) / w.K
    return float(c) if c.ndim == 0 else c
