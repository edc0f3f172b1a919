"""GAF encoder tests: frozen hand values, round trips, invariants."""

import math

import numpy as np
import pytest

from candledp import gaf
from candledp import market_data as md
from candledp.errors import DomainError


def test_minmax_basic():
    np.testing.assert_allclose(gaf.minmax_scale([3, 4, 5]), [0, 0.5, 1])


def test_minmax_constant_series_maps_to_half():
    np.testing.assert_array_equal(gaf.minmax_scale([7, 7, 7]), [0.5, 0.5, 0.5])


def test_minmax_endpoints_fixed():
    np.testing.assert_allclose(gaf.minmax_scale([0, 1]), [0, 1])


def test_minmax_affine_invariance():
    rng = np.random.default_rng(0)
    for _ in range(50):
        s = rng.normal(size=rng.integers(2, 30))
        alpha, beta = rng.uniform(0.1, 5.0), rng.uniform(-10, 10)
        np.testing.assert_allclose(gaf.minmax_scale(alpha * s + beta),
                                   gaf.minmax_scale(s), atol=1e-12)


def test_minmax_rejects_empty():
    with pytest.raises(DomainError):
        gaf.minmax_scale([])


def test_to_angles_endpoints_and_midpoint():
    angles = gaf.to_angles([1.0, 0.0, 0.5])
    assert angles.phi[0] == pytest.approx(0.0, abs=1e-15)
    assert angles.phi[1] == pytest.approx(math.pi / 2, abs=1e-12)
    assert angles.phi[2] == pytest.approx(math.pi / 3, abs=1e-12)
    np.testing.assert_allclose(angles.radius, [1 / 3, 2 / 3, 1.0])


def test_to_angles_monotone_decreasing_in_value():
    x = np.linspace(0, 1, 20)
    phi = gaf.to_angles(x).phi
    assert np.all(np.diff(phi) < 0)


def test_to_angles_domain_error():
    with pytest.raises(DomainError):
        gaf.to_angles([0.0, 1.1])
    with pytest.raises(DomainError):
        gaf.to_angles([-0.01])
    # within tolerance is clipped, not rejected
    gaf.to_angles([1.0 + 1e-13, -1e-13])


def test_gaf_single_point():
    m = gaf.gaf_matrix(gaf.to_angles([1.0]))
    np.testing.assert_allclose(m, [[1.0]])


def test_gaf_hand_values_series_123():
    # minmax([1,2,3]) = [0, .5, 1] -> phi = [pi/2, pi/3, 0]
    m = gaf.encode_series([1, 2, 3])
    assert m[0, 0] == pytest.approx(-1.0)
    assert m[0, 1] == pytest.approx(math.cos(5 * math.pi / 6))  # -0.8660254
    assert m[1, 1] == pytest.approx(-0.5)
    assert m[0, 2] == pytest.approx(0.0, abs=1e-15)
    assert m[2, 2] == pytest.approx(1.0)


def test_gaf_symmetry_and_range_randomized():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        s = rng.normal(size=rng.integers(2, 64))
        m = gaf.encode_series(s)
        np.testing.assert_allclose(m, m.T, atol=1e-15)
        assert np.all(np.abs(m) <= 1.0 + 1e-12)


def test_diagonal_is_cos_2phi():
    s = [5.0, 2.0, 9.0, 4.0]
    phi = gaf.to_angles(gaf.minmax_scale(s)).phi
    m = gaf.gaf_matrix(gaf.to_angles(gaf.minmax_scale(s)))
    np.testing.assert_allclose(np.diagonal(m), np.cos(2 * phi), atol=1e-15)


def test_decode_endpoints_and_mid():
    np.testing.assert_allclose(
        gaf.decode_diagonal(np.diag([-1.0, 1.0, 0.0])),
        [0.0, 1.0, math.sqrt(0.5)])


def test_decode_domain_error():
    with pytest.raises(DomainError):
        gaf.decode_diagonal(np.diag([-1.01]))


def test_round_trip_property():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        s = rng.normal(size=rng.integers(2, 64)) * rng.uniform(0.1, 100)
        normalized = gaf.minmax_scale(s)
        decoded = gaf.decode_diagonal(gaf.gaf_matrix(gaf.to_angles(normalized)))
        np.testing.assert_allclose(decoded, normalized, atol=1e-9)


def test_diagonal_preserves_value_order():
    rng = np.random.default_rng(3)
    for _ in range(100):
        s = rng.normal(size=16)
        x = gaf.minmax_scale(s)
        d = np.diagonal(gaf.encode_series(s))
        pairs = [(i, j) for i in range(16) for j in range(16) if x[i] < x[j]]
        assert all(d[i] < d[j] for i, j in pairs)


def window_from_channels(channels) -> md.Window:
    o, h, l, c = channels
    return md.Window(tuple(
        md.OhlcBar(1609459200 + 60 * i, o[i], h[i], l[i], c[i])
        for i in range(len(o))))


def test_encode_window_shape(small_dataset):
    t = gaf.encode_window(small_dataset.train[0].window)
    assert t.shape == (10, 10, 4)
    for k in range(4):
        plane = t[:, :, k]
        np.testing.assert_allclose(plane, plane.T, atol=1e-15)
        assert np.all(np.abs(plane) <= 1.0 + 1e-12)


def test_encode_window_joint_handles_constant_channel():
    # High pinned constant; joint min/max still spans the other series.
    o = [100.0, 101.0, 102.0, 101.5]
    h = [103.0] * 4
    l = [99.0, 100.0, 100.5, 100.2]
    c = [101.0, 102.0, 101.2, 102.5]
    t = gaf.encode_window(window_from_channels([o, h, l, c]), mode="joint")
    plane = t[:, :, 1]
    # the constant channel maps to one angle, not the 0.5 fallback
    assert np.allclose(plane, plane[0, 0])
    assert plane[0, 0] == pytest.approx(1.0)  # high == joint max -> phi = 0


def test_encode_window_per_series_round_trip(small_dataset):
    w = small_dataset.train[3].window
    t = gaf.encode_window(w, mode="per-series")
    for k in range(4):
        decoded = gaf.decode_diagonal(t[:, :, k])
        assert decoded.min() == pytest.approx(0.0, abs=1e-12)
        assert decoded.max() == pytest.approx(1.0, abs=1e-12)


def test_encode_window_joint_shares_normalization(small_dataset):
    w = small_dataset.train[5].window
    channels = w.channels()
    lo, hi = channels.min(), channels.max()
    t = gaf.encode_window(w, mode="joint")
    for k in range(4):
        decoded = gaf.decode_diagonal(t[:, :, k])
        np.testing.assert_allclose(decoded, (channels[k] - lo) / (hi - lo),
                                   atol=1e-9)


def test_encode_window_rejects_unknown_mode(small_dataset):
    with pytest.raises(DomainError):
        gaf.encode_window(small_dataset.train[0].window, mode="zscore")


def test_encoded_cache_round_trip(tmp_path, small_dataset):
    x, y = gaf.encode_dataset(small_dataset.test, mode="joint")
    assert x.shape == (len(small_dataset.test), 10, 10, 4)
    path = tmp_path / "cache.npz"
    gaf.save_encoded(path, x, y, "joint")
    x2, y2, mode = gaf.load_encoded(path)
    assert mode == "joint"
    assert x2.tobytes() == x.tobytes()  # bit-exact
    np.testing.assert_array_equal(y2, y)
