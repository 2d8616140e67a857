import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pinfer.errors import ContractViolation, DegenerateGeometryError
from pinfer.geometry import SpatialHashGrid, neighbor_pairs, pairwise_distances, shape_match


def _brute_pairs(x, radius):
    d = pairwise_distances(x)
    r, s = np.nonzero((d <= radius) & ~np.eye(len(x), dtype=bool))
    order = np.lexsort((s, r))
    return np.stack([s[order], r[order]], axis=1)


def _rot_z(deg):
    a = np.deg2rad(deg)
    return np.array([[np.cos(a), -np.sin(a), 0.0], [np.sin(a), np.cos(a), 0.0], [0.0, 0.0, 1.0]])


def test_two_close_particles():
    pairs = neighbor_pairs(np.array([[0.0, 0.0, 0.0], [0.05, 0.0, 0.0]]), 0.08)
    assert pairs.tolist() == [[1, 0], [0, 1]]


def test_single_and_empty_inputs():
    assert neighbor_pairs(np.zeros((1, 3)), 0.1).shape == (0, 2)
    assert neighbor_pairs(np.zeros((0, 3)), 0.1).shape == (0, 2)


def test_radius_must_be_positive():
    with pytest.raises(ContractViolation):
        neighbor_pairs(np.zeros((2, 3)), 0.0)


def test_query_radius_bounded_by_cell():
    grid = SpatialHashGrid(0.1).build(np.zeros((2, 3)))
    with pytest.raises(ContractViolation):
        grid.query_pairs(0.2)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 200), st.floats(0.05, 0.5), st.integers(0, 2 ** 32 - 1))
def test_neighbor_pairs_match_bruteforce(n, radius, seed):
    x = np.random.default_rng(seed).uniform(-1.0, 1.0, size=(n, 3))
    got = neighbor_pairs(x, radius)
    expect = _brute_pairs(x, radius) if n else np.zeros((0, 2), dtype=np.int64)
    np.testing.assert_array_equal(got, expect)


def test_shape_match_identity():
    rest = np.random.default_rng(0).normal(size=(10, 3))
    rot, trans = shape_match(rest, rest)
    np.testing.assert_allclose(rot, np.eye(3), atol=1e-9)
    np.testing.assert_allclose(trans, np.zeros(3), atol=1e-9)


def test_shape_match_recovers_transform():
    rest = np.random.default_rng(1).normal(size=(12, 3))
    rot = _rot_z(30.0)
    cur = rest @ rot.T + np.array([1.0, 2.0, 3.0])
    got_rot, got_t = shape_match(cur, rest)
    np.testing.assert_allclose(got_rot, rot, atol=1e-9)
    np.testing.assert_allclose(got_t, [1.0, 2.0, 3.0], atol=1e-9)


def test_shape_match_noisy_is_proper_rotation():
    rng = np.random.default_rng(2)
    rest = rng.normal(size=(20, 3))
    cur = rest @ _rot_z(75.0).T + rng.normal(scale=0.3, size=rest.shape)
    rot, _ = shape_match(cur, rest)
    np.testing.assert_allclose(rot.T @ rot, np.eye(3), atol=1e-9)
    assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-9)


def test_shape_match_reflection_gives_rotation():
    rest = np.random.default_rng(3).normal(size=(8, 3))
    mirrored = rest * np.array([1.0, 1.0, -1.0])
    rot, _ = shape_match(mirrored, rest)
    assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-9)


def test_shape_match_degenerate():
    line = np.stack([np.arange(5.0), np.zeros(5), np.zeros(5)], axis=1)
    with pytest.raises(DegenerateGeometryError):
        shape_match(line, line)
    with pytest.raises(DegenerateGeometryError):
        shape_match(line[:2], line[:2])
