"""Item description augmentation and user profile documents."""

from __future__ import annotations

import json
import time
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, Mapping

from ..corpus import Interaction, ItemMeta
from .backends import LlmBackend, TransportError, complete_with_retries

AUGMENT_TEMPLATE = "Given the title {title} and genres {genres}, write a short paragraph summarizing the film's plot, themes, and style."
AUGMENT_TEMPLATE_NO_GENRES = "Given the title {title}, write a short paragraph summarizing the film's plot, themes, and style."


class AugmentationFailed(RuntimeError):
    pass


class UnknownUser(LookupError):
    pass


class ProfileGenerationFailed(RuntimeError):
    pass


class Provenance(str, Enum):
    MANUAL = "Manual"
    LLM_GENERATED = "LlmGenerated"


@dataclass(frozen=True)
class ProfileCaps:
    genres: int = 5
    tags: int = 10
    items: int = 20


@dataclass(frozen=True)
class UserProfileDoc:
    user_id: int
    genres: tuple[str, ...]
    tags: tuple[str, ...]
    top_items: tuple[tuple[str, float], ...]
    taste_synopsis: str
    provenance: Provenance

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "genres": list(self.genres),
            "tags": list(self.tags),
            "top_items": [[t, r] for t, r in self.top_items],
            "taste_synopsis": self.taste_synopsis,
            "provenance": self.provenance.value,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: Mapping) -> "UserProfileDoc":
        return cls(
            int(d["user_id"]),
            tuple(d["genres"]),
            tuple(d["tags"]),
            tuple((str(t), float(r)) for t, r in d["top_items"]),
            d["taste_synopsis"],
            Provenance(d["provenance"]),
        )


def augmentation_prompt(meta: ItemMeta) -> str:
    if not meta.title.strip():
        raise ValueError(f"item {meta.item_id} has an empty title")
    if meta.genres:
        return AUGMENT_TEMPLATE.format(title=meta.title, genres=", ".join(meta.genres))
    return AUGMENT_TEMPLATE_NO_GENRES.format(title=meta.title)


def augment_description(
    meta: ItemMeta,
    backend: LlmBackend,
    *,
    temperature: float = 0.7,
    max_tokens: int = 200,
    seed: int | None = None,
    attempts: int = 3,
    backoff_s: float = 1.0,
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    """Ask the backend for a plot/themes/style paragraph about one item.

    Empty completions are retried like transport errors.
    """
    prompt = augmentation_prompt(meta)
    cause: Exception | None = None
    for attempt in range(attempts):
        try:
            text = backend.complete(prompt, temperature=temperature, max_tokens=max_tokens, seed=seed).strip()
            if text:
                return text
        except TransportError as exc:
            cause = exc
        if attempt + 1 < attempts and backoff_s > 0:
            sleep(backoff_s * 2**attempt)
    raise AugmentationFailed(f"no description for item {meta.item_id} after {attempts} attempts") from cause


def augment_catalog(
    meta: Mapping[int, ItemMeta], backend: LlmBackend, item_ids: Iterable[int] | None = None, **gen
) -> dict[int, tuple[str, str | None]]:
    """Augment many items; result feeds :func:`mmrag.corpus.save_augmented`."""
    ids = sorted(meta) if item_ids is None else sorted(item_ids)
    return {i: (augment_description(meta[i], backend, **gen), None) for i in ids}


def _user_rows(train: Iterable[Interaction], u: int) -> list[Interaction]:
    rows = [r for r in train if r.user_id == u]
    if not rows:
        raise UnknownUser(f"user {u} has no training interactions")
    return rows


def _ranked(counter: Counter, cap: int) -> tuple[str, ...]:
    return tuple(k for k, _ in sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))[:cap])


def _title(meta: Mapping[int, ItemMeta], item_id: int) -> str:
    m = meta.get(item_id)
    return m.title if m is not None and m.title else f"Item {item_id}"


def manual_synopsis(genres: tuple[str, ...], top_items: tuple[tuple[str, float], ...]) -> str:
    parts = []
    if genres:
        parts.append("Enjoys " + _join(genres[:3]) + " films")
    else:
        parts.append("No dominant genre")
    if top_items:
        parts.append("highest rated: " + _join([t for t, _ in top_items[:3]]))
    return "; ".join(parts) + "."


def _join(words) -> str:
    words = list(words)
    if len(words) <= 1:
        return "".join(words)
    return ", ".join(words[:-1]) + " and " + words[-1]


def build_manual_profile(
    train: Iterable[Interaction],
    meta: Mapping[int, ItemMeta],
    u: int,
    caps: ProfileCaps = ProfileCaps(),
    threshold: float = 4.0,
) -> UserProfileDoc:
    """Rule-based profile from a user's training history.

    Genres and tags are counted over positively rated items (ties alphabetical);
    top items are ordered by rating, then most recent first.
    """
    rows = _user_rows(train, u)
    positives = [r for r in rows if r.rating >= threshold]
    genre_counts: Counter = Counter()
    tag_counts: Counter = Counter()
    for r in positives:
        m = meta.get(r.item_id)
        if m is not None:
            genre_counts.update(m.genres)
            tag_counts.update(m.tags)
    ordered = sorted(rows, key=lambda r: (-r.rating, -r.timestamp, r.item_id))
    top_items = tuple((_title(meta, r.item_id), float(r.rating)) for r in ordered[: caps.items])
    genres = _ranked(genre_counts, caps.genres)
    return UserProfileDoc(
        u, genres, _ranked(tag_counts, caps.tags), top_items, manual_synopsis(genres, top_items), Provenance.MANUAL
    )


def history_prompt(rows: list[Interaction], meta: Mapping[int, ItemMeta], cap: int = 20) -> str:
    """Most recent ``cap`` interactions, newest first, one ``title | genres | rating`` line each."""
    recent = sorted(rows, key=lambda r: (-r.timestamp, r.item_id))[:cap]
    lines = []
    for r in recent:
        m = meta.get(r.item_id)
        genres = ", ".join(m.genres) if m is not None else ""
        lines.append(f"{_title(meta, r.item_id)} | {genres} | {r.rating:g}")
    return (
        "Here is a user's recent movie history (title | genres | rating):\n"
        + "\n".join(lines)
        + "\nIn one or two sentences, describe this user's taste in movies."
    )


def build_llm_profile(
    train: Iterable[Interaction],
    meta: Mapping[int, ItemMeta],
    u: int,
    backend: LlmBackend,
    caps: ProfileCaps = ProfileCaps(),
    threshold: float = 4.0,
    **gen,
) -> UserProfileDoc:
    """Manual profile fields plus a backend-written taste synopsis.

    ``gen`` is forwarded to :func:`complete_with_retries`. Transport exhaustion
    raises :class:`ProfileGenerationFailed`.
    """
    rows = _user_rows(train, u)
    base = build_manual_profile(rows, meta, u, caps, threshold)
    prompt = history_prompt(rows, meta, caps.items)
    try:
        synopsis = complete_with_retries(backend, prompt, **gen).strip()
    except TransportError as exc:
        raise ProfileGenerationFailed(f"user {u}: {exc}") from exc
    return UserProfileDoc(u, base.genres, base.tags, base.top_items, synopsis, Provenance.LLM_GENERATED)
