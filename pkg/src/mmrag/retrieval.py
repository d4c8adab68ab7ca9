"""Exact cosine top-N candidate retrieval."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .fusion import FusedSpace
from .profiles import UserVector


class RetrievalError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CosineIndex:
    ids: np.ndarray  # ascending
    unit_vectors: np.ndarray
    zero_norm_ids: frozenset[int]

    def __len__(self) -> int:
        return self.ids.shape[0]


@dataclass(frozen=True)
class CandidateList:
    user_id: int
    entries: tuple[tuple[int, float], ...]
    depth: int

    @property
    def item_ids(self) -> list[int]:
        return [i for i, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def to_json(self) -> str:
        return json.dumps({"user": self.user_id, "candidates": [[i, s] for i, s in self.entries]})

    @classmethod
    def from_json(cls, line: str, depth: int | None = None) -> "CandidateList":
        obj = json.loads(line)
        entries = tuple((int(i), float(s)) for i, s in obj["candidates"])
        return cls(int(obj["user"]), entries, depth if depth is not None else len(entries))


def build_index(space: FusedSpace) -> CosineIndex:
    if len(space) == 0:
        raise RetrievalError("cannot index an empty space")
    order = np.argsort(space.ids, kind="stable")
    ids = space.ids[order]
    vecs = np.asarray(space.vectors, dtype=np.float64)[order]
    norms = np.linalg.norm(vecs, axis=1)
    ok = norms > 0
    if not ok.any():
        raise RetrievalError("every item vector has zero norm")
    unit = vecs[ok] / norms[ok, None]
    return CosineIndex(ids[ok].copy(), unit, frozenset(int(i) for i in ids[~ok]))


def query_topn(index: CosineIndex, p_u: UserVector, n: int, exclude: Iterable[int] = ()) -> CandidateList:
    """Exact top-``n`` items by cosine to ``p_u``; ties go to the smaller id."""
    if n < 1:
        raise RetrievalError("n must be >= 1")
    q = np.asarray(p_u.vec, dtype=np.float64)
    norm = np.linalg.norm(q)
    if not norm > 0:
        raise RetrievalError(f"user {p_u.user_id} has a zero-norm vector")
    scores = index.unit_vectors @ (q / norm)
    excl = np.fromiter((int(i) for i in exclude), dtype=np.int64)
    eligible = ~np.isin(index.ids, excl) if excl.size else np.ones(len(index), dtype=bool)
    cand = np.nonzero(eligible)[0]
    # ids ascending, so a stable sort on -score breaks ties by id
    order = cand[np.argsort(-scores[cand], kind="stable")][:n]
    entries = tuple((int(index.ids[k]), float(np.clip(scores[k], -1.0, 1.0))) for k in order)
    return CandidateList(p_u.user_id, entries, n)


def query_all(
    index: CosineIndex,
    profiles: Mapping[int, UserVector],
    n: int,
    exclude_by_user: Mapping[int, Iterable[int]],
) -> dict[int, CandidateList]:
    return {u: query_topn(index, profiles[u], n, exclude_by_user.get(u, ())) for u in sorted(profiles)}


def write_candidates(cands: Mapping[int, CandidateList], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for u in sorted(cands):
            fh.write(cands[u].to_json() + "\n")


def read_candidates(path: str | Path, depth: int | None = None) -> dict[int, CandidateList]:
    out = {}
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                c = CandidateList.from_json(line, depth)
                out[c.user_id] = c
    return out
