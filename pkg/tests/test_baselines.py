import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otmf.baselines import (
    BaselineConfig,
    continual_swa,
    continual_task_arithmetic,
    continual_ties,
    run_baseline,
    ties_merge_pair,
)
from otmf.errors import ConfigError, DataError
from otmf.params import ParamVector


def random_vectors(seed, count, layout=(("w", (3, 2)), ("b", (4,)))):
    rng = np.random.default_rng(seed)
    return [
        ParamVector({n: rng.normal(size=s) for n, s in layout}) for _ in range(count)
    ]


def reference_ties(a_flat, b_flat, trim_fraction):
    """Independent elementwise reimplementation of trim / elect / merge."""

    def trim(v):
        keep = math.ceil(trim_fraction * v.size)
        out = np.zeros_like(v)
        if keep >= v.size:
            return v.copy()
        idx = np.argsort(np.abs(v), kind="stable")[v.size - keep :]
        out[idx] = v[idx]
        return out

    a, b = trim(a_flat), trim(b_flat)
    out = np.zeros_like(a)
    for i in range(a.size):
        pos = max(a[i], 0.0) + max(b[i], 0.0)
        neg = max(-a[i], 0.0) + max(-b[i], 0.0)
        sign = 1.0 if pos >= neg else -1.0
        vals = [v for v in (a[i], b[i]) if v != 0.0 and np.sign(v) == sign]
        out[i] = sum(vals) / len(vals) if vals else 0.0
    return out


def test_config_validation():
    with pytest.raises(ConfigError):
        BaselineConfig(method="magic")
    with pytest.raises(ConfigError):
        BaselineConfig(trim_fraction=0.0)
    with pytest.raises(ConfigError):
        BaselineConfig(scaling=float("inf"))


def test_swa_equals_batch_mean():
    vecs = random_vectors(0, 7)
    theta0 = vecs[0]
    avg = continual_swa(theta0, vecs)
    for n in theta0.layers():
        stacked = np.stack([v[n] for v in vecs])
        np.testing.assert_allclose(avg[n], stacked.mean(axis=0), atol=1e-12)


def test_swa_identical_vectors_identity():
    v = random_vectors(1, 1)[0]
    merged = continual_swa(v, [v, v, v])
    assert merged == v


def test_task_arithmetic_is_scaled_sum():
    vecs = random_vectors(2, 4)
    merged = continual_task_arithmetic(vecs[0], vecs, 0.3)
    for n in vecs[0].layers():
        np.testing.assert_allclose(merged[n], 0.3 * sum(v[n] for v in vecs), atol=1e-12)


@given(st.integers(0, 99), st.sampled_from([0.2, 0.5, 1.0]))
@settings(deadline=None, max_examples=50)
def test_ties_pair_matches_reference(seed, trim_fraction):
    a, b = random_vectors(seed, 2)
    merged = ties_merge_pair(a, b, trim_fraction)
    ref = reference_ties(a.flatten(), b.flatten(), trim_fraction)
    np.testing.assert_array_equal(merged.flatten(), ref)


def test_ties_sign_tie_elects_positive():
    a = ParamVector({"w": np.array([1.0, -1.0])})
    b = ParamVector({"w": np.array([-1.0, 1.0])})
    merged = ties_merge_pair(a, b, 1.0)
    # equal positive and negative mass at every entry: positive wins
    np.testing.assert_array_equal(merged["w"], np.array([1.0, 1.0]))


def test_continual_ties_is_left_fold():
    vecs = random_vectors(5, 3)
    step = ties_merge_pair(ties_merge_pair(vecs[0], vecs[1], 0.4), vecs[2], 0.4)
    assert continual_ties(vecs[0], vecs, 0.4) == step


def test_input_validation():
    v = random_vectors(0, 1)[0]
    with pytest.raises(DataError):
        continual_swa(v, [])
    with pytest.raises(DataError):
        continual_task_arithmetic(v, [], 0.3)
    with pytest.raises(DataError):
        continual_ties(v, [v], 0.2)


def test_run_baseline_dispatch():
    vecs = random_vectors(3, 3)
    assert run_baseline(vecs[0], vecs, BaselineConfig(method="swa")) == continual_swa(
        vecs[0], vecs
    )
    assert run_baseline(
        vecs[0], vecs, BaselineConfig(method="task_arithmetic", scaling=0.3)
    ) == continual_task_arithmetic(vecs[0], vecs, 0.3)
    assert run_baseline(
        vecs[0], vecs, BaselineConfig(method="ties", trim_fraction=0.2)
    ) == continual_ties(vecs[0], vecs, 0.2)
