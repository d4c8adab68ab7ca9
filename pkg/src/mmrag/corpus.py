"""Interaction logs and item metadata: loading, filtering, stratification, splits.

Ratings follow the MovieLens CSV layout (``userId,movieId,rating,timestamp``).
All functions are pure; returned containers are immutable.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

DEFAULT_SCALE = (0.5, 5.0)
RATING_HEADERS = (("userId", "movieId", "rating", "timestamp"), ("userId", "itemId", "rating", "timestamp"))


class CorpusError(ValueError):
    """Raised for malformed input files or invalid corpus operations."""


@dataclass(frozen=True)
class Interaction:
    user_id: int
    item_id: int
    rating: float
    timestamp: int


@dataclass(frozen=True)
class ItemMeta:
    item_id: int
    title: str
    genres: tuple[str, ...] = ()
    tags: tuple[str, ...] = ()
    description: str | None = None
    augmented_description: str | None = None
    metadata_missing: bool = False

    @property
    def best_description(self) -> str | None:
        return self.augmented_description or self.description


class Stratum(str, Enum):
    HEAD = "Head"
    MID_TAIL = "MidTail"
    LONG_TAIL = "LongTail"


@dataclass(frozen=True)
class PopularityStratum:
    item_id: int
    stratum: Stratum
    train_count: int


@dataclass(frozen=True)
class SplitDataset:
    train: tuple[Interaction, ...]
    test: tuple[Interaction, ...]
    users: frozenset[int]
    items: frozenset[int]
    dropped_users: tuple[int, ...] = field(default=())

    def train_by_user(self) -> dict[int, list[Interaction]]:
        return group_by_user(self.train)

    def test_by_user(self) -> dict[int, list[Interaction]]:
        return group_by_user(self.test)


def group_by_user(log: Iterable[Interaction]) -> dict[int, list[Interaction]]:
    out: dict[int, list[Interaction]] = defaultdict(list)
    for row in log:
        out[row.user_id].append(row)
    return dict(out)


def train_counts(train: Iterable[Interaction]) -> Counter:
    return Counter(row.item_id for row in train)


def _chrono_key(row: Interaction) -> tuple[int, int]:
    return (row.timestamp, row.item_id)


def load_ratings(path: str | Path, scale: tuple[float, float] = DEFAULT_SCALE) -> list[Interaction]:
    """Parse a ratings CSV into interactions.

    Row numbers in error messages are 1-based file lines (the header is line 1).
    """
    path = Path(path)
    if not path.is_file():
        raise CorpusError(f"ratings file not found: {path}")
    lo, hi = scale
    out: list[Interaction] = []
    seen: set[tuple[int, int, int]] = set()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return out
        if tuple(h.strip() for h in header) not in RATING_HEADERS:
            raise CorpusError(f"{path}: unexpected header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise CorpusError(f"{path}: row {lineno}: expected 4 fields, got {len(row)}")
            try:
                user, item = int(row[0]), int(row[1])
                rating = float(row[2])
                ts = int(row[3])
            except ValueError as exc:
                raise CorpusError(f"{path}: row {lineno}: {exc}") from None
            if not lo <= rating <= hi:
                raise CorpusError(f"{path}: row {lineno}: rating {rating} outside scale [{lo}, {hi}]")
            if ts <= 0:
                raise CorpusError(f"{path}: row {lineno}: non-positive timestamp {ts}")
            key = (user, item, ts)
            if key in seen:
                raise CorpusError(f"{path}: row {lineno}: duplicate interaction {key}")
            seen.add(key)
            out.append(Interaction(user, item, rating, ts))
    return out


def save_ratings(log: Iterable[Interaction], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RATING_HEADERS[0])
        for r in log:
            writer.writerow([r.user_id, r.item_id, repr(float(r.rating)), r.timestamp])


def load_metadata(path: str | Path, tags_path: str | Path | None = None) -> dict[int, ItemMeta]:
    """Load ``movieId,title,genres`` rows, optionally merging a tags CSV.

    MovieLens writes ``(no genres listed)`` for missing genres; such items get an
    empty genre tuple and ``metadata_missing=True``.
    """
    path = Path(path)
    if not path.is_file():
        raise CorpusError(f"metadata file not found: {path}")
    tag_map: dict[int, list[str]] = defaultdict(list)
    if tags_path is not None:
        tags_path = Path(tags_path)
        if not tags_path.is_file():
            raise CorpusError(f"tags file not found: {tags_path}")
        with tags_path.open(newline="", encoding="utf-8") as fh:
            for lineno, row in enumerate(csv.DictReader(fh), start=2):
                try:
                    tag_map[int(row["movieId"])].append(row["tag"].strip())
                except (KeyError, ValueError, AttributeError):
                    raise CorpusError(f"{tags_path}: row {lineno}: malformed tag row") from None

    items: dict[int, ItemMeta] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"movieId", "title", "genres"} <= set(reader.fieldnames):
            raise CorpusError(f"{path}: expected header movieId,title,genres")
        for lineno, row in enumerate(reader, start=2):
            try:
                item_id = int(row["movieId"])
            except (TypeError, ValueError):
                raise CorpusError(f"{path}: row {lineno}: bad movieId") from None
            if item_id in items:
                raise CorpusError(f"{path}: row {lineno}: duplicate movieId {item_id}")
            raw = (row["genres"] or "").strip()
            genres = () if raw in ("", "(no genres listed)") else tuple(g for g in raw.split("|") if g)
            items[item_id] = ItemMeta(
                item_id=item_id,
                title=(row["title"] or "").strip(),
                genres=genres,
                tags=tuple(dict.fromkeys(t for t in tag_map.get(item_id, ()) if t)),
                metadata_missing=not genres,
            )
    return items


def load_augmented(path: str | Path) -> dict[int, tuple[str, str | None]]:
    """Read augmented descriptions from JSON Lines: ``{"id", "description", "rationale"}``."""
    out: dict[int, tuple[str, str | None]] = {}
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                item_id = int(obj["id"])
                desc = obj["description"]
            except (ValueError, KeyError, TypeError):
                raise CorpusError(f"{path}: line {lineno}: malformed augmentation record") from None
            if not isinstance(desc, str):
                raise CorpusError(f"{path}: line {lineno}: description must be a string")
            out[item_id] = (desc, obj.get("rationale"))
    return out


def save_augmented(records: Mapping[int, tuple[str, str | None]], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for item_id in sorted(records):
            desc, why = records[item_id]
            fh.write(json.dumps({"id": item_id, "description": desc, "rationale": why}, ensure_ascii=False) + "\n")


def apply_augmented(meta: Mapping[int, ItemMeta], records: Mapping[int, tuple[str, str | None]]) -> dict[int, ItemMeta]:
    return {
        i: replace(m, augmented_description=records[i][0]) if i in records else m
        for i, m in meta.items()
    }


def filter_users_by_activity(
    log: Sequence[Interaction],
    min_count: int = 0,
    max_count: float = math.inf,
    mode: str = "keep",
) -> list[Interaction]:
    """Filter users on their interaction count ``c``.

    ``mode="keep"`` retains users with ``min_count <= c <= max_count``;
    ``mode="drop"`` removes exactly those users instead.
    """
    if min_count > max_count:
        raise CorpusError(f"activity filter: min {min_count} > max {max_count}")
    if mode not in ("keep", "drop"):
        raise CorpusError(f"activity filter: unknown mode {mode!r}")
    counts = Counter(r.user_id for r in log)
    in_band = {u for u, c in counts.items() if min_count <= c <= max_count}
    if mode == "keep":
        return [r for r in log if r.user_id in in_band]
    return [r for r in log if r.user_id not in in_band]


def chronological_split(log: Sequence[Interaction], train_frac: float = 0.7) -> SplitDataset:
    """Per-user chronological split: earliest ``ceil(train_frac * n_u)`` rows train.

    Users with fewer than two interactions, or whose test slice would be empty,
    are dropped and listed in ``dropped_users``.
    """
    if not 0.0 < train_frac < 1.0:
        raise CorpusError(f"train_frac must be in (0, 1), got {train_frac}")
    train: list[Interaction] = []
    test: list[Interaction] = []
    dropped: list[int] = []
    for user, rows in sorted(group_by_user(log).items()):
        n = len(rows)
        # round() guards against 0.7 * n landing a hair above an integer
        n_train = math.ceil(round(train_frac * n, 9))
        if n < 2 or n_train >= n:
            dropped.append(user)
            continue
        rows = sorted(rows, key=_chrono_key)
        train.extend(rows[:n_train])
        test.extend(rows[n_train:])
    users = frozenset(r.user_id for r in train)
    items = frozenset(r.item_id for r in train) | frozenset(r.item_id for r in test)
    return SplitDataset(tuple(train), tuple(test), users, items, tuple(dropped))


def annotate_popularity(train: Iterable[Interaction], catalog: Iterable[int]) -> list[PopularityStratum]:
    """Rank the catalog by training count and cut it 10% / 40% / 50%.

    Ranking ties (including all-zero counts) resolve by ascending item id, so the
    Head and MidTail quotas are always filled.
    """
    catalog = set(catalog)
    if not catalog:
        raise CorpusError("annotate_popularity: empty catalog")
    counts = train_counts(train)
    ranked = sorted(catalog, key=lambda i: (-counts.get(i, 0), i))
    n_head = math.floor(0.10 * len(ranked))
    n_top = math.floor(0.50 * len(ranked))
    out = []
    for rank, item in enumerate(ranked):
        if rank < n_head:
            s = Stratum.HEAD
        elif rank < n_top:
            s = Stratum.MID_TAIL
        else:
            s = Stratum.LONG_TAIL
        out.append(PopularityStratum(item, s, counts.get(item, 0)))
    return out


def sample_eval_users(split: SplitDataset, n: int, seed: int) -> frozenset[int]:
    users = sorted(split.users)
    if n > len(users):
        raise CorpusError(f"cannot sample {n} users from {len(users)}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(users), size=n, replace=False)
    return frozenset(users[i] for i in idx)
