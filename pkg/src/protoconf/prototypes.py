"""Build prototype sets from patch grids and sentence embeddings.

Images: the patch grid is cut into non-overlapping rectangular blocks, each block is
mean-pooled into one regional prototype, and the encoder's global token goes last.
A 14x14 grid with group size 3 gives ragged blocks ``[3, 3, 3, 3, 2]`` per axis,
i.e. 25 regions plus the global prototype.

Reports: sentences are split into contiguous, near-equal groups in reading order and
mean-pooled; the document embedding goes last.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import InvalidK, Modality, PrototypeSet


@dataclass(frozen=True, eq=False)
class PatchGrid:
    rows: int
    cols: int
    patches: np.ndarray  # (rows * cols, d), row-major
    global_embedding: np.ndarray  # (d,)

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")
        patches = np.asarray(self.patches, dtype=np.float64)
        g = np.asarray(self.global_embedding, dtype=np.float64)
        if patches.ndim == 3:
            patches = patches.reshape(-1, patches.shape[-1])
        if patches.shape[0] != self.rows * self.cols:
            raise ValueError(f"expected {self.rows * self.cols} patches, got {patches.shape[0]}")
        if g.shape != (patches.shape[1],):
            raise ValueError(f"global embedding shape {g.shape} does not match patch dim {patches.shape[1]}")
        object.__setattr__(self, "patches", patches)
        object.__setattr__(self, "global_embedding", g)

    @property
    def dim(self) -> int:
        return self.patches.shape[1]


@dataclass(frozen=True, eq=False)
class SentenceSet:
    sentences: np.ndarray  # (n_sentences, d)
    global_embedding: np.ndarray  # (d,)

    def __post_init__(self) -> None:
        s = np.asarray(self.sentences, dtype=np.float64)
        g = np.asarray(self.global_embedding, dtype=np.float64)
        if s.ndim != 2 or s.shape[0] < 1:
            raise ValueError(f"need at least one sentence embedding, got shape {s.shape}")
        if g.shape != (s.shape[1],):
            raise ValueError(f"global embedding shape {g.shape} does not match sentence dim {s.shape[1]}")
        object.__setattr__(self, "sentences", s)
        object.__setattr__(self, "global_embedding", g)


def partition_axis(n: int, g: int) -> list[int]:
    """Sizes of consecutive blocks of length ``g`` covering ``n`` cells; the last may be short.

    >>> partition_axis(14, 3)
    [3, 3, 3, 3, 2]
    """
    if n < 1 or g < 1:
        raise ValueError(f"partition_axis needs n >= 1 and g >= 1, got n={n}, g={g}")
    full, rest = divmod(n, g)
    return [g] * full + ([rest] if rest else [])


def build_image_prototypes(grid: PatchGrid, group_size: int = 3, item_id: str = "") -> PrototypeSet:
    if group_size < 1:
        raise ValueError(f"group_size must be >= 1, got {group_size}")
    cube = grid.patches.reshape(grid.rows, grid.cols, grid.dim)
    row_edges = np.cumsum([0] + partition_axis(grid.rows, group_size))
    col_edges = np.cumsum([0] + partition_axis(grid.cols, group_size))
    regions = [
        cube[r0:r1, c0:c1].reshape(-1, grid.dim).mean(axis=0)
        for r0, r1 in zip(row_edges[:-1], row_edges[1:])
        for c0, c1 in zip(col_edges[:-1], col_edges[1:])
    ]
    return PrototypeSet(item_id, Modality.IMAGE, np.vstack(regions + [grid.global_embedding]))


def sentence_groups(n: int, n_groups: int) -> list[int]:
    """Contiguous near-equal group sizes, larger groups first."""
    base, extra = divmod(n, n_groups)
    return [base + 1] * extra + [base] * (n_groups - extra)


def build_report_prototypes(sentences: SentenceSet, K: int, item_id: str = "") -> PrototypeSet:
    if K < 2:
        raise InvalidK(f"report prototypes need K >= 2, got {K}")
    s = sentences.sentences
    n_groups = min(K - 1, s.shape[0])
    edges = np.cumsum([0] + sentence_groups(s.shape[0], n_groups))
    regions = [s[a:b].mean(axis=0) for a, b in zip(edges[:-1], edges[1:])]
    # short reports repeat their last group so every report has K - 1 regional prototypes
    regions += [regions[-1]] * (K - 1 - n_groups)
    return PrototypeSet(item_id, Modality.REPORT, np.vstack(regions + [sentences.global_embedding]))
