"""User vectors in the fused item space: random, average, temporal."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Union

import numpy as np
from scipy.special import expit

from .corpus import Interaction
from .fusion import FusedSpace

DEFAULT_THRESHOLD = 4.0


class ColdStartUser(LookupError):
    """No positively rated item of the user is present in the fused space."""


@dataclass(frozen=True)
class Random:
    seed: int = 0


@dataclass(frozen=True)
class Average:
    rating_threshold: float = DEFAULT_THRESHOLD


@dataclass(frozen=True)
class Temporal:
    rating_threshold: float = DEFAULT_THRESHOLD
    alpha: float = 1.0
    standardize_time: bool = True

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")


ProfileStrategy = Union[Random, Average, Temporal]


@dataclass(frozen=True, eq=False)
class UserVector:
    user_id: int
    vec: np.ndarray
    support: int


def positive_items(train: Iterable[Interaction], u: int, threshold: float = DEFAULT_THRESHOLD) -> set[int]:
    return {r.item_id for r in train if r.user_id == u and r.rating >= threshold}


def _contributions(space: FusedSpace, train, u, threshold) -> tuple[np.ndarray, np.ndarray]:
    """Rows of ``space`` and interaction times for ``u``'s positive items.

    An item rated positively more than once contributes once, at its latest time.
    """
    latest: dict[int, int] = {}
    for r in train:
        if r.user_id == u and r.rating >= threshold:
            latest[r.item_id] = max(latest.get(r.item_id, r.timestamp), r.timestamp)
    rows = space.row_index()
    items = sorted(i for i in latest if i in rows)
    if not items:
        raise ColdStartUser(f"user {u} has no positive items in the fused space")
    return np.array([rows[i] for i in items]), np.array([latest[i] for i in items], dtype=np.float64)


def build_average(space: FusedSpace, train: Iterable[Interaction], u: int, threshold: float = DEFAULT_THRESHOLD) -> UserVector:
    idx, _ = _contributions(space, train, u, threshold)
    return UserVector(u, space.vectors[idx].mean(axis=0), len(idx))


def temporal_weights(times: np.ndarray, alpha: float, standardize: bool = True) -> np.ndarray:
    """Logistic recency weights centred on the mean time.

    With ``standardize`` the offsets are divided by the population std of
    ``times`` (floored at one second) before applying ``alpha``.
    """
    times = np.asarray(times, dtype=np.float64)
    offset = times - times.mean()
    if standardize:
        offset = offset / max(float(times.std()), 1.0)
    return expit(alpha * offset)


def build_temporal(
    space: FusedSpace,
    train: Iterable[Interaction],
    u: int,
    threshold: float = DEFAULT_THRESHOLD,
    alpha: float = 1.0,
    standardize_time: bool = True,
) -> UserVector:
    idx, times = _contributions(space, train, u, threshold)
    w = temporal_weights(times, alpha, standardize_time)
    vec = (w[:, None] * space.vectors[idx]).sum(axis=0) / w.sum()
    return UserVector(u, vec, len(idx))


def build_random(dim: int, seed: int, user_id: int = 0) -> UserVector:
    if dim < 1:
        raise ValueError("dim must be >= 1")
    rng = np.random.default_rng([seed, user_id])
    return UserVector(user_id, rng.standard_normal(dim), 0)


def build_profile(space: FusedSpace, train, u: int, strategy: ProfileStrategy) -> UserVector:
    if isinstance(strategy, Random):
        return build_random(space.dim, strategy.seed, u)
    if isinstance(strategy, Average):
        return build_average(space, train, u, strategy.rating_threshold)
    if isinstance(strategy, Temporal):
        return build_temporal(space, train, u, strategy.rating_threshold, strategy.alpha, strategy.standardize_time)
    raise TypeError(f"unknown profile strategy {strategy!r}")


def build_profiles(
    space: FusedSpace,
    train_by_user: Mapping[int, list[Interaction]],
    users: Iterable[int],
    strategy: ProfileStrategy,
    cold_start: str = "error",
    seed: int = 0,
) -> dict[int, UserVector]:
    """Profiles for ``users`` in ascending id order.

    ``cold_start="random"`` substitutes a seeded random vector for users without
    usable positives; ``"skip"`` leaves them out; ``"error"`` re-raises.
    """
    out = {}
    for u in sorted(users):
        try:
            out[u] = build_profile(space, train_by_user.get(u, ()), u, strategy)
        except ColdStartUser:
            if cold_start == "random":
                out[u] = build_random(space.dim, seed, u)
            elif cold_start != "skip":
                raise
    return out
