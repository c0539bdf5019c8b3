"""Embedding files, pairing/label files, weight checkpoints and synthetic corpora.

Binary embedding file (little-endian throughout)::

    magic      4 bytes   b"PECM"
    version    uint16    1
    modality   uint8     0 = image patch grids, 1 = report sentences, 2 = prototype sets
    item_count uint32    >= 1
    dim        uint32    >= 1
    layout               modality 0: rows uint32, cols uint32
                         modality 1: item_count x uint32 sentence counts
                         modality 2: K uint32
    ids                  item_count x (uint16 byte length, UTF-8 bytes)
    payload              float32, item by item, row-major:
                         modality 0: rows*cols patches then the global embedding
                         modality 1: that item's sentences then the document embedding
                         modality 2: K prototypes, global last

A line-delimited JSON alternative (``*.jsonl``) holds one item per line with keys
``id`` plus either ``prototypes``, ``rows``/``cols``/``patches``/``global`` or
``sentences``/``global``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import (
    Corpus,
    CorpusError,
    DanglingPairing,
    Modality,
    PrototypeSet,
    ProtoconfError,
    WeightVector,
)
from .prototypes import PatchGrid, SentenceSet, build_image_prototypes, build_report_prototypes

MAGIC = b"PECM"
VERSION = 1
GRID, SENTENCES, PROTOTYPES = 0, 1, 2
_HEADER = struct.Struct("<4sHBII")


class FormatError(ProtoconfError, ValueError):
    pass


class BadMagic(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class DimensionMismatch(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class ParseError(FormatError):
    pass


class KMismatch(ProtoconfError, ValueError):
    pass


class InvalidSpec(ProtoconfError, ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingFileHeader:
    modality: int
    item_count: int
    dim: int
    rows: int = 0
    cols: int = 0
    K: int = 0
    sentence_counts: tuple[int, ...] = ()
    version: int = VERSION


@dataclass(frozen=True, eq=False)
class EmbeddingFile:
    header: EmbeddingFileHeader
    ids: list[str]
    items: list  # PatchGrid, SentenceSet or (K, d) arrays, matching header.modality


class _Reader:
    def __init__(self, data: bytes, name: str):
        self.data = data
        self.pos = 0
        self.name = name

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFile(
                f"{self.name}: truncated at byte {self.pos} reading {what} "
                f"(need {n} bytes, {len(self.data) - self.pos} left)"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def floats(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(4 * count, what), dtype="<f4").astype(np.float64)


def read_embedding_file(path) -> EmbeddingFile:
    path = Path(path)
    if path.suffix == ".jsonl":
        return _read_jsonl(path)
    r = _Reader(path.read_bytes(), str(path))
    magic, version, modality, count, dim = _HEADER.unpack(r.take(_HEADER.size, "header"))
    if magic != MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r} at byte 0, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatch(f"{path}: file version {version}, reader supports {VERSION}")
    if modality not in (GRID, SENTENCES, PROTOTYPES):
        raise FormatError(f"{path}: unknown modality byte {modality} at byte 6")
    if count < 1 or dim < 1:
        raise FormatError(f"{path}: item_count and dim must be >= 1, got {count}, {dim}")
    rows = cols = K = 0
    counts: tuple[int, ...] = ()
    if modality == GRID:
        rows, cols = r.u32("rows"), r.u32("cols")
        if rows < 1 or cols < 1:
            raise FormatError(f"{path}: grid must be at least 1x1, got {rows}x{cols}")
    elif modality == SENTENCES:
        counts = tuple(r.u32(f"sentence count {i}") for i in range(count))
        bad = [i for i, c in enumerate(counts) if c < 1]
        if bad:
            raise FormatError(f"{path}: item {bad[0]} has no sentences")
    else:
        K = r.u32("K")
        if K < 1:
            raise FormatError(f"{path}: K must be >= 1")
    header = EmbeddingFileHeader(modality, count, dim, rows, cols, K, counts, version)
    ids = []
    for i in range(count):
        n = struct.unpack("<H", r.take(2, f"id length {i}"))[0]
        raw = r.take(n, f"id {i}")
        try:
            ids.append(raw.decode("utf-8"))
        except UnicodeDecodeError as e:
            raise ParseError(f"{path}: id {i} at byte {r.pos - n} is not UTF-8") from e
    if len(set(ids)) != len(ids):
        raise FormatError(f"{path}: duplicate item ids")
    items: list = []
    for i, item_id in enumerate(ids):
        what = f"payload of item {item_id!r}"
        if modality == GRID:
            v = r.floats((rows * cols + 1) * dim, what).reshape(rows * cols + 1, dim)
            items.append(PatchGrid(rows, cols, v[:-1], v[-1]))
        elif modality == SENTENCES:
            v = r.floats((counts[i] + 1) * dim, what).reshape(counts[i] + 1, dim)
            items.append(SentenceSet(v[:-1], v[-1]))
        else:
            items.append(r.floats(K * dim, what).reshape(K, dim))
    if r.pos != len(r.data):
        raise FormatError(f"{path}: {len(r.data) - r.pos} trailing bytes after byte {r.pos}")
    return EmbeddingFile(header, ids, items)


def _read_jsonl(path: Path) -> EmbeddingFile:
    ids: list[str] = []
    items: list = []
    kinds = set()
    with path.open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                item_id = str(rec["id"])
                if "prototypes" in rec:
                    kinds.add(PROTOTYPES)
                    items.append(np.asarray(rec["prototypes"], dtype=np.float64))
                elif "patches" in rec:
                    kinds.add(GRID)
                    items.append(PatchGrid(int(rec["rows"]), int(rec["cols"]), rec["patches"], rec["global"]))
                elif "sentences" in rec:
                    kinds.add(SENTENCES)
                    items.append(SentenceSet(rec["sentences"], rec["global"]))
                else:
                    raise KeyError("prototypes/patches/sentences")
            except (ValueError, KeyError, TypeError) as e:
                raise ParseError(f"{path}:{lineno}: {e}") from e
            ids.append(item_id)
    if not ids:
        raise FormatError(f"{path}: no items")
    if len(kinds) != 1:
        raise FormatError(f"{path}: mixes item kinds")
    if len(set(ids)) != len(ids):
        raise FormatError(f"{path}: duplicate item ids")
    modality = kinds.pop()
    first = items[0]
    if modality == GRID:
        header = EmbeddingFileHeader(GRID, len(ids), first.dim, first.rows, first.cols)
    elif modality == SENTENCES:
        header = EmbeddingFileHeader(SENTENCES, len(ids), first.sentences.shape[1],
                                     sentence_counts=tuple(s.sentences.shape[0] for s in items))
    else:
        if first.ndim != 2:
            raise ParseError(f"{path}: prototypes must be a list of vectors")
        header = EmbeddingFileHeader(PROTOTYPES, len(ids), first.shape[1], K=first.shape[0])
    return EmbeddingFile(header, ids, items)


def _write(path, blob: bytes) -> None:
    Path(path).write_bytes(blob)


def _id_table(ids: Sequence[str]) -> bytes:
    out = bytearray()
    for i in ids:
        raw = i.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"item id too long: {i[:40]!r}...")
        out += struct.pack("<H", len(raw)) + raw
    return bytes(out)


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def write_prototype_file(path, sets: Sequence[PrototypeSet]) -> None:
    if not sets:
        raise ValueError("nothing to write")
    K, d = sets[0].prototypes.shape
    blob = _HEADER.pack(MAGIC, VERSION, PROTOTYPES, len(sets), d) + struct.pack("<I", K)
    blob += _id_table([s.item_id for s in sets])
    blob += b"".join(_f32(s.prototypes) for s in sets)
    _write(path, blob)


def write_grid_file(path, ids: Sequence[str], grids: Sequence[PatchGrid]) -> None:
    g0 = grids[0]
    blob = _HEADER.pack(MAGIC, VERSION, GRID, len(grids), g0.dim) + struct.pack("<II", g0.rows, g0.cols)
    blob += _id_table(ids)
    blob += b"".join(_f32(np.vstack([g.patches, g.global_embedding])) for g in grids)
    _write(path, blob)


def write_sentence_file(path, ids: Sequence[str], docs: Sequence[SentenceSet]) -> None:
    d = docs[0].sentences.shape[1]
    blob = _HEADER.pack(MAGIC, VERSION, SENTENCES, len(docs), d)
    blob += b"".join(struct.pack("<I", s.sentences.shape[0]) for s in docs)
    blob += _id_table(ids)
    blob += b"".join(_f32(np.vstack([s.sentences, s.global_embedding])) for s in docs)
    _write(path, blob)


def _image_sets(f: EmbeddingFile, group_size: int) -> list[PrototypeSet]:
    if f.header.modality == GRID:
        return [build_image_prototypes(g, group_size, i) for i, g in zip(f.ids, f.items)]
    if f.header.modality == PROTOTYPES:
        return [PrototypeSet(i, Modality.IMAGE, z) for i, z in zip(f.ids, f.items)]
    raise FormatError("image file must hold patch grids or prototype sets, not sentences")


def _report_sets(f: EmbeddingFile, K: int) -> list[PrototypeSet]:
    if f.header.modality == SENTENCES:
        return [build_report_prototypes(s, K, i) for i, s in zip(f.ids, f.items)]
    if f.header.modality == PROTOTYPES:
        return [PrototypeSet(i, Modality.REPORT, z) for i, z in zip(f.ids, f.items)]
    raise FormatError("report file must hold sentence sets or prototype sets, not patch grids")


def read_pairing(path) -> dict[str, set[str]]:
    pairing: dict[str, set[str]] = {}
    with Path(path).open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise ParseError(f"{path}:{lineno}: expected 'report_id<TAB>image_id'")
            pairing.setdefault(parts[0], set()).add(parts[1])
    return pairing


def write_pairing(path, pairing: Mapping[str, Iterable[str]]) -> None:
    lines = [f"{r}\t{i}\n" for r in sorted(pairing) for i in sorted(pairing[r])]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_labels(path) -> tuple[dict[str, str], set[str]]:
    """``item_id<TAB>label[<TAB>ambiguous]`` lines; returns labels and the ambiguous ids."""
    labels: dict[str, str] = {}
    ambiguous: set[str] = set()
    with Path(path).open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3):
                raise ParseError(f"{path}:{lineno}: expected 'item_id<TAB>label[<TAB>ambiguous]'")
            labels[parts[0]] = parts[1]
            if len(parts) == 3 and parts[2] not in ("0", ""):
                ambiguous.add(parts[0])
    return labels, ambiguous


def write_labels(path, corpus: Corpus) -> None:
    ids = sorted(corpus.images) + sorted(corpus.reports)
    lines = [f"{i}\t{corpus.labels.get(i, '')}\t{int(i in corpus.ambiguous)}\n" for i in ids]
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_corpus(image_path, report_path, pairing_path, group_size: int = 3, labels_path=None) -> Corpus:
    fi = read_embedding_file(image_path)
    fr = read_embedding_file(report_path)
    if fi.header.dim != fr.header.dim:
        raise DimensionMismatch(f"image dim {fi.header.dim} != report dim {fr.header.dim}")
    images = _image_sets(fi, group_size)
    K = images[0].K
    reports = _report_sets(fr, K)
    if reports[0].K != K:
        raise DimensionMismatch(f"image prototype sets have K={K}, report sets have K={reports[0].K}")
    for s in images + reports:
        if s.prototypes.shape != (K, fi.header.dim):
            raise DimensionMismatch(f"item {s.item_id!r} has shape {s.prototypes.shape}, expected {(K, fi.header.dim)}")
    pairing = read_pairing(pairing_path)
    image_ids = {s.item_id for s in images}
    report_ids = {s.item_id for s in reports}
    for rid in sorted(pairing):
        if rid not in report_ids:
            raise DanglingPairing(f"{pairing_path}: unknown report id {rid!r}")
        missing = sorted(pairing[rid] - image_ids)
        if missing:
            raise DanglingPairing(f"{pairing_path}: report {rid!r} references unknown image id {missing[0]!r}")
    labels, ambiguous = read_labels(labels_path) if labels_path else ({}, set())
    return Corpus(
        images={s.item_id: s for s in images},
        reports={s.item_id: s for s in reports},
        pairing=pairing,
        labels=labels,
        ambiguous=ambiguous,
    )


def save_corpus(corpus: Corpus, image_path, report_path, pairing_path, labels_path=None) -> None:
    """Write prototype-set files (modality 2) plus the pairing, and labels if a path is given."""
    write_prototype_file(image_path, [corpus.images[i] for i in sorted(corpus.images)])
    write_prototype_file(report_path, [corpus.reports[r] for r in sorted(corpus.reports)])
    write_pairing(pairing_path, corpus.pairing)
    if labels_path is not None:
        write_labels(labels_path, corpus)


# weight checkpoints: UTF-8 "key=value" lines

def save_weights(w: WeightVector, path) -> None:
    theta = ",".join(format(float(t), ".17g") for t in w.theta)
    Path(path).write_text(f"format=pecm-weights\nversion=1\nK={w.K}\ntheta={theta}\n", encoding="utf-8")


def load_weights(path, expected_K: int | None = None) -> WeightVector:
    fields: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ParseError(f"{path}:{lineno}: expected key=value")
        fields[key.strip()] = value.strip()
    try:
        if fields.get("format") != "pecm-weights":
            raise ValueError(f"unexpected format {fields.get('format')!r}")
        if int(fields.get("version", "0")) != 1:
            raise ValueError(f"unsupported version {fields.get('version')!r}")
        K = int(fields["K"])
        theta = [float(t) for t in fields["theta"].split(",")]
    except (KeyError, ValueError) as e:
        raise ParseError(f"{path}: {e}") from e
    if len(theta) != K or not all(math.isfinite(t) for t in theta):
        raise ParseError(f"{path}: theta must hold {K} finite values, got {len(theta)}")
    if expected_K is not None and K != expected_K:
        raise KMismatch(f"{path}: checkpoint has K={K}, corpus has K={expected_K}")
    return WeightVector(np.array(theta))


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of a synthetic paired corpus.

    ``instance_sigma`` spreads pairs of one class around the class center so that
    matched pairs are distinguishable from same-class distractors.
    """

    n_pairs: int = 1000
    n_classes: int = 50
    dim: int = 32
    K: int = 6
    noise_sigma: float = 0.5
    ambiguity_fraction: float = 0.0
    ambiguity_sigma: float = 3.0
    seed: int = 0
    instance_sigma: float = 1.0

    def validate(self) -> None:
        ints = {"n_pairs": self.n_pairs, "n_classes": self.n_classes, "dim": self.dim, "K": self.K}
        for name, v in ints.items():
            if int(v) != v or v < 1:
                raise InvalidSpec(f"{name} must be a positive integer, got {v}")
        if self.n_classes > self.n_pairs:
            raise InvalidSpec(f"n_classes ({self.n_classes}) exceeds n_pairs ({self.n_pairs})")
        for name in ("noise_sigma", "ambiguity_sigma", "instance_sigma"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise InvalidSpec(f"{name} must be finite and >= 0, got {v}")
        if not (0.0 <= self.ambiguity_fraction <= 1.0):
            raise InvalidSpec(f"ambiguity_fraction must be in [0, 1], got {self.ambiguity_fraction}")
        if not (0 <= self.seed < 2**64):
            raise InvalidSpec(f"seed must be an unsigned 64-bit integer, got {self.seed}")


def generate_synthetic(spec: SyntheticSpec) -> Corpus:
    """Deterministic synthetic corpus; one image per report.

    Draw order from ``numpy.random.Generator(PCG64(seed))``:

    1. class centers, standard normal, shape (n_classes, K, dim)
    2. class of each pair: permutation of ``arange(n_pairs) % n_classes``
    3. pair latents: center + instance_sigma * standard normal (n_pairs, K, dim)
    4. image noise, then report noise: noise_sigma * standard normal, same shape
    5. ambiguous pairs: ``choice(n_pairs, round(fraction * n_pairs), replace=False)``,
       sorted; for each in ascending order draw ``choice(K, max(1, K // 2),
       replace=False)`` prototype rows, then image noise and report noise of scale
       ambiguity_sigma for those rows
    6. values are rounded to float32 so the corpus survives a save/load unchanged
    """
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    n, K, d = spec.n_pairs, spec.K, spec.dim
    centers = rng.standard_normal((spec.n_classes, K, d))
    classes = rng.permutation(np.arange(n) % spec.n_classes)
    latent = centers[classes] + spec.instance_sigma * rng.standard_normal((n, K, d))
    img = latent + spec.noise_sigma * rng.standard_normal((n, K, d))
    rep = latent + spec.noise_sigma * rng.standard_normal((n, K, d))
    n_amb = int(round(spec.ambiguity_fraction * n))
    amb = np.sort(rng.choice(n, size=n_amb, replace=False)) if n_amb else np.array([], dtype=int)
    half = max(1, K // 2)
    for i in amb:
        rows = rng.choice(K, size=half, replace=False)
        img[i, rows] += spec.ambiguity_sigma * rng.standard_normal((half, d))
        rep[i, rows] += spec.ambiguity_sigma * rng.standard_normal((half, d))
    img = img.astype(np.float32).astype(np.float64)
    rep = rep.astype(np.float32).astype(np.float64)

    width = max(5, len(str(n - 1)))
    img_ids = [f"img{i:0{width}d}" for i in range(n)]
    rep_ids = [f"rep{i:0{width}d}" for i in range(n)]
    labels = {}
    for i in range(n):
        labels[img_ids[i]] = labels[rep_ids[i]] = f"c{int(classes[i]):03d}"
    ambiguous = {img_ids[i] for i in amb} | {rep_ids[i] for i in amb}
    return Corpus(
        images={img_ids[i]: PrototypeSet(img_ids[i], Modality.IMAGE, img[i]) for i in range(n)},
        reports={rep_ids[i]: PrototypeSet(rep_ids[i], Modality.REPORT, rep[i]) for i in range(n)},
        pairing={rep_ids[i]: {img_ids[i]} for i in range(n)},
        labels=labels,
        ambiguous=ambiguous,
    )


__all__ = [
    "BadMagic",
    "CorpusError",
    "DanglingPairing",
    "DimensionMismatch",
    "EmbeddingFile",
    "EmbeddingFileHeader",
    "FormatError",
    "InvalidSpec",
    "KMismatch",
    "ParseError",
    "SyntheticSpec",
    "TruncatedFile",
    "VersionMismatch",
    "generate_synthetic",
    "load_corpus",
    "load_weights",
    "read_embedding_file",
    "read_labels",
    "read_pairing",
    "save_corpus",
    "save_weights",
    "write_grid_file",
    "write_labels",
    "write_pairing",
    "write_prototype_file",
    "write_sentence_file",
]
