"""Parity between the numba kernels and their pure-numpy twins."""

import numpy as np
import pytest

from fuzzyoc import kernels
from fuzzyoc.kernels import implementations

from conftest import random_simplex

NAMES = ("ce_rows", "ce_inverse_rows", "mi_from_joint", "joint_mi", "contingency",
         "augment_batch", "sobel_batch")


@pytest.mark.parametrize("name", NAMES)
def test_registry_has_both_paths(name):
    impl = implementations(name)
    assert set(impl) == {"numba", "numpy"}
    assert impl["numba"] is not impl["numpy"]


def _both(name, *args):
    impl = implementations(name)
    return impl["numba"](*args), impl["numpy"](*args)


def _close(a, b, tol):
    if isinstance(a, tuple):
        for x, y in zip(a, b):
            _close(x, y, tol)
    else:
        np.testing.assert_allclose(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64),
                                   rtol=tol, atol=tol)


def test_ce_parity(rng):
    p = random_simplex(rng, 40, 7)
    p[0, 3] = 0.0
    t = random_simplex(rng, 40, 7)
    _close(*_both("ce_rows", p, t, 1e-12), 1e-12)


def test_ce_inverse_parity(rng):
    p = random_simplex(rng, 40, 7)
    q = random_simplex(rng, 40, 7)
    q[1] = np.eye(7)[2]  # hits the eps clamp
    _close(*_both("ce_inverse_rows", p, q, 1e-6), 1e-12)


def test_mi_parity(rng):
    u, v = random_simplex(rng, 30, 5), random_simplex(rng, 30, 5)
    q = u.T @ v / 30
    P = 0.5 * (q + q.T)
    _close(*_both("mi_from_joint", P, 1e-12), 1e-12)
    _close(*_both("joint_mi", u, v, 1e-12), 1e-10)


def test_contingency_parity(rng):
    a = rng.integers(0, 9, 200)
    t = rng.integers(0, 4, 200)
    nb, npy = _both("contingency", a, t, 9, 4)
    assert nb.dtype == npy.dtype == np.int64
    np.testing.assert_array_equal(nb, npy)
    assert nb.sum() == 200


def _aug_args(rng, n=6, h=12, w=12, c=3):
    images = rng.random((n, h, w, c), dtype=np.float32)
    crop = np.column_stack([rng.uniform(0, 4, n), rng.uniform(0, 4, n), rng.uniform(0.6, 1.0, n)])
    flip = rng.random(n) < 0.5
    bright = rng.uniform(0.75, 1.25, n)
    hue = rng.uniform(-18, 18, n)
    return images, crop, flip, bright, hue


def test_augment_parity(rng):
    nb, npy = _both("augment_batch", *_aug_args(rng))
    assert nb.shape == npy.shape == (6, 12, 12, 3)
    _close(nb, npy, 1e-5)


def test_augment_identity_is_exact(rng):
    images = rng.random((3, 8, 8, 3), dtype=np.float32)
    crop = np.tile([0.0, 0.0, 1.0], (3, 1))
    out = kernels.augment_batch(images, crop, np.zeros(3, bool), np.ones(3), np.zeros(3))
    np.testing.assert_allclose(out, images, atol=1e-6)


def test_augment_flip_mirrors(rng):
    images = rng.random((1, 5, 7, 1), dtype=np.float32)
    crop = np.array([[0.0, 0.0, 1.0]])
    out = kernels.augment_batch(images, crop, np.array([True]), np.ones(1), np.zeros(1))
    np.testing.assert_allclose(out, images[:, :, ::-1], atol=1e-6)


def test_hue_rotation_by_120_maps_red_to_green():
    img = np.zeros((1, 2, 2, 3), np.float32)
    img[..., 0] = 1.0
    crop = np.array([[0.0, 0.0, 1.0]])
    for name in ("numba", "numpy"):
        out = implementations("augment_batch")[name](img, crop, np.zeros(1, bool), np.ones(1), np.array([120.0]))
        np.testing.assert_allclose(out[0, 0, 0], [0.0, 1.0, 0.0], atol=1e-5)


def test_sobel_parity_and_oracle(rng):
    images = rng.random((2, 9, 9, 3), dtype=np.float32)
    nb, npy = _both("sobel_batch", images)
    _close(nb, npy, 1e-5)
    # vertical step edge: horizontal gradient 4 at the boundary columns, zero vertical gradient
    step = np.zeros((1, 5, 6, 1), np.float32)
    step[..., 3:, 0] = 1.0
    g = kernels.sobel_batch(step)
    np.testing.assert_allclose(g[0, 2, :, 0], [0, 0, 4, 4, 0, 0], atol=1e-6)
    np.testing.assert_allclose(g[..., 1], 0.0, atol=1e-6)


def test_backend_flag_consistent():
    from fuzzyoc._accel import NUMBA_ENABLED

    assert kernels.BACKEND == ("numba" if NUMBA_ENABLED else "numpy")
    assert kernels.ce_rows is implementations("ce_rows")[kernels.BACKEND]
