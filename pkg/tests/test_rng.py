import numpy as np
import pytest

from delaysde.rng import (
    batch_increments,
    coarsen_increments,
    normal_increments,
    path_generator,
)


def test_same_key_same_stream():
    a = normal_increments(7, 3, 64, 2, 0.01)
    b = normal_increments(7, 3, 64, 2, 0.01)
    np.testing.assert_array_equal(a, b)


def test_distinct_paths_distinct_streams():
    a = normal_increments(7, 0, 64, 1, 0.01)
    b = normal_increments(7, 1, 64, 1, 0.01)
    assert np.max(np.abs(a - b)) > 1e-3


def test_distinct_base_seeds_distinct_streams():
    a = normal_increments(0, 5, 64, 1, 0.01)
    b = normal_increments(1, 5, 64, 1, 0.01)
    assert np.max(np.abs(a - b)) > 1e-3


def test_negative_key_rejected():
    with pytest.raises(ValueError):
        path_generator(-1, 0)
    with pytest.raises(ValueError):
        path_generator(0, -2)


def test_increment_shape_and_scale():
    h = 1.0 / 64
    dw = normal_increments(11, 0, 50_000, 1, h)
    assert dw.shape == (50_000, 1)
    # N(0, h): sample variance within 5% at this size
    assert abs(dw.var() / h - 1.0) < 0.05
    assert abs(dw.mean()) < 4 * np.sqrt(h / 50_000)
    assert np.all(np.isfinite(dw))


def test_batch_matches_per_path():
    got = batch_increments(3, 10, 4, 16, 2, 0.25)
    for i in range(4):
        np.testing.assert_array_equal(got[i], normal_increments(3, 10 + i, 16, 2, 0.25))


def test_coarsen_sums_consecutive_pairs():
    dw = normal_increments(1, 0, 32, 3, 0.125)
    c = coarsen_increments(dw, 4)
    assert c.shape == (8, 3)
    np.testing.assert_allclose(c[0], dw[:4].sum(axis=0), rtol=0, atol=0)
    np.testing.assert_allclose(c[-1], dw[28:].sum(axis=0), rtol=0, atol=0)


def test_coarsen_batch_axis():
    dw = batch_increments(1, 0, 5, 8, 2, 0.5)
    c = coarsen_increments(dw, 2)
    assert c.shape == (5, 4, 2)
    np.testing.assert_array_equal(c[:, 0], dw[:, 0] + dw[:, 1])


def test_coarsen_identity_factor():
    dw = normal_increments(1, 0, 8, 1, 0.5)
    np.testing.assert_array_equal(coarsen_increments(dw, 1), dw)


def test_coarsen_rejects_bad_factor():
    dw = normal_increments(1, 0, 10, 1, 0.5)
    with pytest.raises(ValueError):
        coarsen_increments(dw, 3)
    with pytest.raises(ValueError):
        coarsen_increments(dw, 0)
