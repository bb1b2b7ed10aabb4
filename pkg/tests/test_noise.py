import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ks_2samp

from conftest import PROPERTY_CASES
from rconley.noise import NoiseError, NoiseModel, NoisePath, draw_at, sample_path, shift

U01 = NoiseModel.uniform([0.0], [1.0])


def test_model_validation():
    with pytest.raises(NoiseError):
        NoiseModel.uniform([1.0], [0.0])
    with pytest.raises(NoiseError):
        NoiseModel.discrete([[0.0], [1.0]], [0.5, 0.6])
    with pytest.raises(NoiseError):
        NoiseModel.discrete([[0.0], [1.0]], [1.0, 0.0])
    NoiseModel.discrete([[0.0], [1.0]], [0.5, 0.5 + 1e-13])


def test_constant_path():
    p = sample_path(NoiseModel.constant([0.7, -1.0]), 123, 5)
    assert p.values.shape == (10, 2)
    assert np.all(p.values == [0.7, -1.0])


def test_determinism_and_length():
    a = sample_path(U01, 9, 8)
    b = sample_path(U01, 9, 8)
    assert np.array_equal(a.values, b.values)
    assert a.values.tobytes() == b.values.tobytes()
    assert len(a.values) == 16


def test_window_extension_preserves_values():
    short, long = sample_path(U01, 4, 5), sample_path(U01, 4, 12)
    for t in short.steps:
        assert np.array_equal(short.value(t), long.value(t))


def test_negative_indices_have_their_own_stream():
    p = sample_path(U01, 1, 4)
    assert not np.array_equal(p.value(-1), p.value(0))


def test_monte_carlo_mean_at_zero():
    vals = np.array([draw_at(U01, s, 0)[0] for s in range(100_000)])
    assert abs(vals.mean() - 0.5) < 0.01


def test_discrete_draws_only_support_values():
    m = NoiseModel.discrete([[1.5], [2.5]], [0.25, 0.75])
    p = sample_path(m, 0, 200)
    assert set(np.unique(p.values)) <= {1.5, 2.5}
    assert abs(np.mean(p.values == 2.5) - 0.75) < 0.05


def test_value_outside_window():
    p = sample_path(U01, 0, 3)
    with pytest.raises(NoiseError, match="window exhausted"):
        p.value(3)


def test_shift_examples():
    p = sample_path(U01, 2, 8)
    assert shift(p, 0) is p
    q = shift(p, 2)
    assert np.array_equal(q.value(-1), p.value(1))
    assert q.T == 6 and q.offset == 2
    back = shift(shift(p, 1), -1)
    for t in back.steps:
        assert np.array_equal(back.value(t), p.value(t))
    with pytest.raises(NoiseError, match="window exhausted"):
        shift(p, 8)


@settings(max_examples=PROPERTY_CASES)
@given(st.integers(0, 2**32), st.integers(4, 12), st.integers(-11, 11), st.integers(-11, 11))
def test_shift_group_law(seed, T, a, b):
    p = sample_path(U01, seed, T)
    if abs(a) >= T:
        return
    pa = shift(p, a)
    if abs(b) >= pa.T:
        return
    lhs = shift(pa, b)
    # every index of the composite reads p at t + a + b
    for t in lhs.steps:
        assert np.array_equal(lhs.value(t), p.value(t + a + b))
    if abs(a + b) < T:
        direct = shift(p, a + b)
        for t in lhs.steps:
            assert np.array_equal(lhs.value(t), direct.value(t))


def test_stationarity_ks():
    seeds = range(10_000)
    base = np.array([draw_at(U01, s, 0)[0] for s in seeds])
    shifted = np.array([shift(sample_path(U01, s, 4), 3).value(0)[0] for s in range(10_000, 20_000)])
    assert ks_2samp(base, shifted).pvalue > 0.01


def test_json_round_trip():
    p = shift(sample_path(NoiseModel.uniform([1.5, 1.5], [2.5, 2.5]), 5, 6), 1)
    q = NoisePath.from_json(json.loads(p.dumps()))
    assert q == p
    assert q.offset == 1


def test_from_values():
    p = NoisePath.from_values([[0.1], [0.2], [0.3], [0.4]])
    assert p.T == 2 and p.value(-2)[0] == 0.1
    with pytest.raises(NoiseError):
        NoisePath.from_values([[0.1], [0.2], [0.3]])


def test_models_are_ergodic_by_construction():
    assert U01.ergodic and NoiseModel.constant([1.0]).ergodic
