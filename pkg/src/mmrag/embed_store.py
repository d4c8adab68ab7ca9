"""Per-modality embedding matrices and their on-disk formats.

Two formats are supported:

* JSON Lines, one ``{"id": <int>, "vec": [<float>, ...]}`` object per line.
* ``EMB1`` binary: ``b"EMB1"``, u16 version, u16 dim, u64 count, then ``count``
  records of (u64 item id, ``dim`` x f32), all little-endian, followed by a u32
  CRC32 of the record payload.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

EMB_MAGIC = b"EMB1"
EMB_VERSION = 1
_HEADER = struct.Struct("<4sHHQ")
HEADER_SIZE = _HEADER.size  # 16
CRC_SIZE = 4
MAX_DIM = 65_535


class EmbeddingError(ValueError):
    pass


class Modality(str, Enum):
    TEXTUAL = "textual"
    VISUAL = "visual"
    AUDIO = "audio"


@dataclass(frozen=True)
class ModalityTag:
    name: Modality
    variant: str = ""

    def __str__(self) -> str:
        return f"{self.name.value}:{self.variant}" if self.variant else self.name.value


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """Row ``k`` of ``vectors`` belongs to item ``ids[k]``."""

    modality: ModalityTag
    ids: np.ndarray
    vectors: np.ndarray
    _row: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        vecs = np.asarray(self.vectors)
        if vecs.ndim != 2 or vecs.shape[0] != ids.shape[0]:
            raise EmbeddingError(f"vectors shape {vecs.shape} does not match {ids.shape[0]} ids")
        if not np.issubdtype(vecs.dtype, np.floating):
            vecs = vecs.astype(np.float64)
        if not np.all(np.isfinite(vecs)):
            bad = int(ids[np.nonzero(~np.all(np.isfinite(vecs), axis=1))[0][0]])
            raise EmbeddingError(f"non-finite component in vector for item {bad}")
        row = {int(i): k for k, i in enumerate(ids)}
        if len(row) != len(ids):
            raise EmbeddingError("duplicate item ids")
        ids.setflags(write=False)
        vecs = vecs.copy() if vecs.flags.writeable else vecs
        vecs.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "vectors", vecs)
        object.__setattr__(self, "_row", row)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.ids.shape[0]

    def __contains__(self, item_id: int) -> bool:
        return int(item_id) in self._row

    def __getitem__(self, item_id: int) -> np.ndarray:
        return self.vectors[self._row[int(item_id)]]

    def restrict(self, item_ids: Sequence[int]) -> "EmbeddingMatrix":
        rows = [self._row[int(i)] for i in item_ids]
        return EmbeddingMatrix(self.modality, np.asarray(item_ids, dtype=np.int64), self.vectors[rows])


def load_embeddings_jsonl(path: str | Path, modality: ModalityTag) -> EmbeddingMatrix:
    ids: list[int] = []
    rows: list[list[float]] = []
    dim = None
    seen: set[int] = set()
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                item_id = obj["id"]
                vec = obj["vec"]
            except (ValueError, KeyError, TypeError):
                raise EmbeddingError(f"{path}: line {lineno}: expected {{\"id\": int, \"vec\": [...]}}") from None
            if not isinstance(item_id, int) or isinstance(item_id, bool) or not isinstance(vec, list):
                raise EmbeddingError(f"{path}: line {lineno}: bad id or vec type")
            if dim is None:
                dim = len(vec)
                if dim == 0:
                    raise EmbeddingError(f"{path}: line {lineno}: empty vector")
            elif len(vec) != dim:
                raise EmbeddingError(f"{path}: line {lineno}: dimension {len(vec)} != {dim}")
            if item_id in seen:
                raise EmbeddingError(f"{path}: line {lineno}: duplicate id {item_id}")
            try:
                fvec = [float(x) for x in vec]
            except (TypeError, ValueError):
                raise EmbeddingError(f"{path}: line {lineno}: non-numeric component") from None
            if not all(math.isfinite(x) for x in fvec):
                raise EmbeddingError(f"{path}: line {lineno}: non-finite component")
            seen.add(item_id)
            ids.append(item_id)
            rows.append(fvec)
    vectors = np.asarray(rows, dtype=np.float64).reshape(len(rows), dim or 0)
    return EmbeddingMatrix(modality, np.asarray(ids, dtype=np.int64), vectors)


def save_embeddings_jsonl(m: EmbeddingMatrix, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for item_id, vec in zip(m.ids.tolist(), m.vectors.tolist()):
            # float repr round-trips exactly
            fh.write(json.dumps({"id": item_id, "vec": vec}) + "\n")


def save_embeddings_binary(m: EmbeddingMatrix, path: str | Path) -> None:
    if m.dim > MAX_DIM:
        raise EmbeddingError(f"dim {m.dim} exceeds {MAX_DIM}")
    if len(m) and int(m.ids.min()) < 0:
        raise EmbeddingError("EMB1 stores ids as u64; negative ids are not representable")
    rec = np.dtype([("id", "<u8"), ("vec", "<f4", (m.dim,))])
    records = np.empty(len(m), dtype=rec)
    records["id"] = m.ids
    records["vec"] = m.vectors
    payload = records.tobytes()
    with Path(path).open("wb") as fh:
        fh.write(_HEADER.pack(EMB_MAGIC, EMB_VERSION, m.dim, len(m)))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def load_embeddings_binary(path: str | Path, modality: ModalityTag | None = None) -> EmbeddingMatrix:
    data = Path(path).read_bytes()
    if len(data) < HEADER_SIZE:
        raise EmbeddingError(f"{path}: truncated header")
    magic, version, dim, count = _HEADER.unpack_from(data)
    if magic != EMB_MAGIC:
        raise EmbeddingError(f"{path}: bad magic {magic!r}")
    if version != EMB_VERSION:
        raise EmbeddingError(f"{path}: unsupported version {version}")
    rec = np.dtype([("id", "<u8"), ("vec", "<f4", (dim,))])
    expected = HEADER_SIZE + count * rec.itemsize + CRC_SIZE
    if len(data) != expected:
        raise EmbeddingError(f"{path}: truncated or oversized file ({len(data)} bytes, expected {expected})")
    payload = data[HEADER_SIZE:-CRC_SIZE]
    (crc,) = struct.unpack("<I", data[-CRC_SIZE:])
    if zlib.crc32(payload) != crc:
        raise EmbeddingError(f"{path}: checksum mismatch")
    records = np.frombuffer(payload, dtype=rec, count=count)
    vectors = np.array(records["vec"], dtype=np.float32).reshape(count, dim)
    return EmbeddingMatrix(modality or ModalityTag(Modality.TEXTUAL), records["id"].astype(np.int64), vectors)


def load_embeddings(path: str | Path, modality: ModalityTag) -> EmbeddingMatrix:
    """Dispatch on extension: ``.jsonl`` is JSON Lines, anything else is ``EMB1``."""
    if Path(path).suffix.lower() in (".jsonl", ".json"):
        return load_embeddings_jsonl(path, modality)
    return load_embeddings_binary(path, modality)


def save_embeddings(m: EmbeddingMatrix, path: str | Path) -> None:
    if Path(path).suffix.lower() in (".jsonl", ".json"):
        save_embeddings_jsonl(m, path)
    else:
        save_embeddings_binary(m, path)


class Alignment(NamedTuple):
    ids: frozenset[int]
    matrices: list[EmbeddingMatrix]
    dropped: dict[str, int]


def align_ids(ms: Sequence[EmbeddingMatrix]) -> Alignment:
    """Restrict every matrix to the common id set, rows in ascending id order."""
    if len(ms) < 2:
        raise EmbeddingError("align_ids needs at least two matrices")
    common = set(ms[0].ids.tolist())
    for m in ms[1:]:
        common &= set(m.ids.tolist())
    if not common:
        sizes = ", ".join(f"{m.modality}={len(m)}" for m in ms)
        raise EmbeddingError(f"no item is present in every modality ({sizes})")
    order = sorted(common)
    dropped = {str(m.modality): len(m) - len(order) for m in ms}
    return Alignment(frozenset(order), [m.restrict(order) for m in ms], dropped)
