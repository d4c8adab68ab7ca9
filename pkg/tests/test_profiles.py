import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmrag.corpus import Interaction
from mmrag.fusion import Concat, FusedSpace, FusionModel
from mmrag.profiles import (
    Average,
    ColdStartUser,
    Random,
    Temporal,
    build_average,
    build_profiles,
    build_random,
    build_temporal,
    positive_items,
    temporal_weights,
)


def space(ids, vecs):
    vecs = np.asarray(vecs, dtype=np.float64)
    model = FusionModel(Concat(), (vecs.shape[1],), vecs.shape[1], {})
    return FusedSpace(np.asarray(ids), vecs, model)


def test_average_of_two_items():
    s = space([1, 2, 3], [[1.0, 0.0], [0.0, 1.0], [9.0, 9.0]])
    log = [Interaction(7, 1, 5.0, 10), Interaction(7, 2, 4.0, 20), Interaction(7, 3, 2.0, 30)]
    uv = build_average(s, log, 7)
    assert uv.vec.tolist() == [0.5, 0.5] and uv.support == 2


def test_positive_threshold_inclusive():
    log = [Interaction(1, 1, 4.0, 1), Interaction(1, 2, 3.5, 2), Interaction(2, 3, 5.0, 3)]
    assert positive_items(log, 1) == {1}


def test_temporal_alpha_to_zero_equals_average():
    rng = np.random.default_rng(0)
    s = space(np.arange(30), rng.standard_normal((30, 5)))
    log = [Interaction(1, i, 4.5, int(t)) for i, t in enumerate(rng.integers(0, 10**9, 30))]
    avg = build_average(s, log, 1).vec
    tmp = build_temporal(s, log, 1, alpha=1e-8).vec
    assert np.max(np.abs(avg - tmp)) < 1e-6


def test_temporal_matches_weighted_mean_oracle():
    rng = np.random.default_rng(1)
    vecs = rng.standard_normal((12, 4))
    s = space(np.arange(12), vecs)
    times = rng.integers(1_000_000, 2_000_000, 12)
    log = [Interaction(3, i, 4.0 + (i % 2), int(t)) for i, t in enumerate(times)]
    uv = build_temporal(s, log, 3, alpha=1.7)
    # scalar re-derivation of the logistic weighting
    mean = sum(times) / 12
    std = math.sqrt(sum((t - mean) ** 2 for t in times) / 12)
    w = [1 / (1 + math.exp(-1.7 * (t - mean) / std)) for t in times]
    oracle = [sum(w[i] * vecs[i, j] for i in range(12)) / sum(w) for j in range(4)]
    assert np.max(np.abs(uv.vec - oracle)) < 1e-12


def test_weight_is_half_at_mean_time():
    w = temporal_weights(np.array([0.0, 50.0, 100.0]), alpha=3.0)
    assert w[1] == 0.5
    assert w[2] > 0.5 > w[0]
    assert abs(w[0] + w[2] - 1.0) < 1e-15


def test_raw_time_mode():
    w = temporal_weights(np.array([0.0, 2.0]), alpha=1.0, standardize=False)
    assert abs(w[1] - 1 / (1 + math.exp(-1.0))) < 1e-15


@given(st.lists(st.integers(0, 10**9), min_size=1, max_size=40), st.floats(1e-3, 50))
@settings(max_examples=80, deadline=None)
def test_weights_bounded_and_monotone(times, alpha):
    t = np.array(sorted(times), dtype=np.float64)
    w = temporal_weights(t, alpha)
    assert np.all((w > 0) & (w < 1) | np.isclose(w, 1) | np.isclose(w, 0))
    assert np.all(np.diff(w) >= 0)


def test_temporal_favours_recent():
    s = space([1, 2], [[1.0, 0.0], [0.0, 1.0]])
    log = [Interaction(1, 1, 5.0, 100), Interaction(1, 2, 5.0, 200)]
    vec = build_temporal(s, log, 1, alpha=2.0).vec
    assert vec[1] > vec[0]


def test_repeated_item_counted_once_at_latest_time():
    s = space([1, 2], [[1.0, 0.0], [0.0, 1.0]])
    log = [Interaction(1, 1, 5.0, 100), Interaction(1, 2, 5.0, 200), Interaction(1, 1, 4.0, 300)]
    uv = build_temporal(s, log, 1)
    assert uv.support == 2 and uv.vec[0] > uv.vec[1]


def test_random_deterministic_and_centred():
    a = build_random(64, seed=7, user_id=3).vec
    assert np.array_equal(a, build_random(64, seed=7, user_id=3).vec)
    assert not np.array_equal(a, build_random(64, seed=7, user_id=4).vec)
    draws = np.stack([build_random(8, seed=1, user_id=u).vec for u in range(10_000)])
    assert np.abs(draws.mean(axis=0)).max() < 0.05


def test_cold_start_policies():
    s = space([1], [[1.0, 2.0]])
    train = {1: [Interaction(1, 1, 5.0, 1)], 2: [Interaction(2, 1, 2.0, 1)], 3: [Interaction(3, 99, 5.0, 1)]}
    with pytest.raises(ColdStartUser):
        build_profiles(s, train, [1, 2], Average())
    with pytest.raises(ColdStartUser):
        build_average(s, train[3], 3)  # positive item absent from the space
    assert list(build_profiles(s, train, [3, 1, 2], Temporal(), cold_start="skip")) == [1]
    rnd = build_profiles(s, train, [1, 2], Average(), cold_start="random", seed=4)
    assert np.array_equal(rnd[2].vec, build_random(2, 4, 2).vec)


def test_random_strategy_ignores_history():
    s = space([1], [[1.0, 2.0, 3.0]])
    out = build_profiles(s, {}, [5], Random(seed=2))
    assert out[5].vec.shape == (3,) and out[5].support == 0


def test_alpha_must_be_positive():
    with pytest.raises(ValueError):
        Temporal(alpha=0.0)


def test_temporal_inside_convex_hull_and_ignores_negatives():
    rng = np.random.default_rng(3)
    vecs = rng.standard_normal((40, 2))
    s = space(np.arange(40), vecs)
    log = [Interaction(1, i, 4.0 if i < 20 else 2.0, int(t)) for i, t in enumerate(rng.integers(0, 10**6, 40))]
    uv = build_temporal(s, log, 1, alpha=3.0)
    # convex combination of the positive rows: inside their bounding box
    pos = vecs[:20]
    assert np.all(uv.vec >= pos.min(axis=0)) and np.all(uv.vec <= pos.max(axis=0))
    moved = space(np.arange(40), np.vstack([vecs[:20], 100 * vecs[20:]]))
    assert np.array_equal(build_temporal(moved, log, 1, alpha=3.0).vec, uv.vec)
