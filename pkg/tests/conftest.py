import numpy as np
import pytest

from spinefm.geometry import BinaryMask


def mask_from_pixels(pixels, offset=(0, 0)):
    """Build a BinaryMask from parent-grid (x, y) pixel coordinates."""
    xs = [p[0] for p in pixels]
    ys = [p[1] for p in pixels]
    x0, y0 = min(xs), min(ys)
    bits = np.zeros((max(ys) - y0 + 1, max(xs) - x0 + 1), dtype=bool)
    for x, y in pixels:
        bits[y - y0, x - x0] = True
    return BinaryMask(bits, (x0 + offset[0], y0 + offset[1]))


def pixel_set(mask: BinaryMask) -> set[tuple[int, int]]:
    ys, xs = np.nonzero(mask.bits)
    ox, oy = mask.offset
    return {(int(x) + ox, int(y) + oy) for x, y in zip(xs, ys)}


def brute_counts(a: BinaryMask, b: BinaryMask):
    """Set-based pixel enumeration, independent of the kernel implementations."""
    sa, sb = pixel_set(a), pixel_set(b)
    return len(sa), len(sb), len(sa & sb)


def random_mask(rng, max_side=32, density=0.4, offset_range=8):
    h = int(rng.integers(1, max_side + 1))
    w = int(rng.integers(1, max_side + 1))
    bits = rng.random((h, w)) < density
    off = (int(rng.integers(-offset_range, offset_range + 1)),
           int(rng.integers(-offset_range, offset_range + 1)))
    return BinaryMask(bits, off)


@pytest.fixture
def rng():
    return np.random.default_rng(20240812)
