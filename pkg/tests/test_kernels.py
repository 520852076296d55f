import numpy as np
import pytest

from spinefm import kernels


@pytest.fixture
def both_backends():
    """Restore whatever path was active after the test."""
    before = kernels.active_backend()
    yield
    kernels.set_backend(before)


def test_gaussian_kernel_normalized():
    for sigma in (0.5, 1.0, 2.0, 3.7):
        k = kernels.gaussian_kernel(sigma)
        assert k.size == 2 * int(np.ceil(3 * sigma)) + 1
        assert abs(k.sum() - 1.0) < 1e-12
        assert np.array_equal(k, k[::-1])


def test_paths_bitwise_identical(both_backends, rng):
    try:
        kernels.set_backend("numba")
    except ImportError:
        pytest.skip("numba unavailable")
    cases = []
    for _ in range(25):
        n = int(rng.integers(3, 12))
        vx = rng.uniform(-2, 30, n)
        vy = rng.uniform(-2, 30, n)
        field = rng.random((int(rng.integers(1, 40)), int(rng.integers(1, 40))))
        k = kernels.gaussian_kernel(float(rng.uniform(0.5, 3.0)))
        a = rng.random((int(rng.integers(1, 30)), int(rng.integers(1, 30)))) < 0.5
        b = rng.random((int(rng.integers(1, 30)), int(rng.integers(1, 30)))) < 0.5
        dx, dy = int(rng.integers(-10, 10)), int(rng.integers(-10, 10))
        cases.append((vx, vy, field, k, a, b, dx, dy))

    results_nb = [
        (kernels.polygon_fill(vx, vy, 0, 0, 28, 28),
         kernels.gaussian_blur(field, k),
         kernels.overlap_counts(a, b, dx, dy))
        for vx, vy, field, k, a, b, dx, dy in cases
    ]
    kernels.set_backend("numpy")
    results_np = [
        (kernels.polygon_fill(vx, vy, 0, 0, 28, 28),
         kernels.gaussian_blur(field, k),
         kernels.overlap_counts(a, b, dx, dy))
        for vx, vy, field, k, a, b, dx, dy in cases
    ]
    for (f1, b1, c1), (f2, b2, c2) in zip(results_nb, results_np):
        assert np.array_equal(f1, f2)
        assert np.array_equal(b1, b2)  # bitwise, not approx
        assert c1 == c2


def test_blur_constant_field_preserved_by_normalized_division():
    field = np.ones((20, 17))
    k = kernels.gaussian_kernel(2.0)
    num = kernels.gaussian_blur(field, k)
    den = kernels.gaussian_blur(np.ones_like(field), k)
    assert np.array_equal(num / den, np.ones_like(field))


def test_blur_single_pixel_peak_value():
    # interior impulse: peak equals the squared center tap of the 1d kernel
    field = np.zeros((31, 31))
    field[15, 15] = 1.0
    k = kernels.gaussian_kernel(2.0)
    out = kernels.gaussian_blur(field, k)
    assert out[15, 15] == pytest.approx(k[k.size // 2] ** 2, rel=1e-12)
    assert out[15, 15] == pytest.approx(1 / (2 * np.pi * 4.0), rel=0.02)


def test_overlap_counts_brute(rng):
    for _ in range(100):
        a = rng.random((int(rng.integers(1, 20)), int(rng.integers(1, 20)))) < 0.5
        b = rng.random((int(rng.integers(1, 20)), int(rng.integers(1, 20)))) < 0.5
        dx, dy = int(rng.integers(-8, 8)), int(rng.integers(-8, 8))
        na, nb, inter = kernels.overlap_counts(a, b, dx, dy)
        sa = {(x, y) for y, x in zip(*np.nonzero(a))}
        sb = {(x + dx, y + dy) for y, x in zip(*np.nonzero(b))}
        assert (na, nb, inter) == (len(sa), len(sb), len(sa & sb))


def test_set_backend_rejects_unknown():
    with pytest.raises(ValueError):
        kernels.set_backend("cuda")
