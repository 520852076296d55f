"""Hot raster kernels: polygon fill, separable blur, mask overlap counts.

Every kernel has a pure-numpy implementation and a numba ``@njit`` twin that
performs the same arithmetic in the same order, so the two paths return
bit-identical results. The active path is picked once at import time from the
``SPINEFM_NUMBA`` environment variable:

    SPINEFM_NUMBA=0   force the pure-numpy path
    SPINEFM_NUMBA=1   require numba (raise if it cannot be imported)
    unset or auto     use numba when importable, numpy otherwise

``benchmarks/bench_kernels.py`` compares the two paths; ``set_backend`` exists
so the benchmark and the equality tests can flip paths at runtime.
"""

from __future__ import annotations

import os

import numpy as np

# ---------------------------------------------------------------------------
# numpy implementations (the reference path)
# ---------------------------------------------------------------------------


def _polygon_fill_np(vx: np.ndarray, vy: np.ndarray, x0: int, y0: int, w: int, h: int) -> np.ndarray:
    """Even-odd fill of a polygon over a w*h grid starting at (x0, y0).

    A pixel (i, j) is foreground iff its center (x0+i+0.5, y0+j+0.5) lies
    inside the polygon under the even-odd crossing rule.
    """
    px = x0 + np.arange(w, dtype=np.float64) + 0.5
    py = y0 + np.arange(h, dtype=np.float64) + 0.5
    inside = np.zeros((h, w), dtype=np.bool_)
    n = vx.size
    j = n - 1
    for i in range(n):
        crosses = (vy[i] > py) != (vy[j] > py)
        if crosses.any():
            with np.errstate(divide="ignore", invalid="ignore"):
                xc = (vx[j] - vx[i]) * (py - vy[i]) / (vy[j] - vy[i]) + vx[i]
            inside ^= crosses[:, None] & (px[None, :] < xc[:, None])
        j = i
    return inside


def _correlate_rows_np(field: np.ndarray, kern: np.ndarray) -> np.ndarray:
    h, w = field.shape
    r = kern.size // 2
    pad = np.zeros((h, w + 2 * r), dtype=np.float64)
    pad[:, r:r + w] = field
    out = np.zeros((h, w), dtype=np.float64)
    for t in range(kern.size):
        out += kern[t] * pad[:, t:t + w]
    return out


def _correlate_cols_np(field: np.ndarray, kern: np.ndarray) -> np.ndarray:
    h, w = field.shape
    r = kern.size // 2
    pad = np.zeros((h + 2 * r, w), dtype=np.float64)
    pad[r:r + h, :] = field
    out = np.zeros((h, w), dtype=np.float64)
    for t in range(kern.size):
        out += kern[t] * pad[t:t + h, :]
    return out


def _gaussian_blur_np(field: np.ndarray, kern: np.ndarray) -> np.ndarray:
    return _correlate_cols_np(_correlate_rows_np(field, kern), kern)


def _overlap_counts_np(a: np.ndarray, b: np.ndarray, dx: int, dy: int) -> tuple[int, int, int]:
    """Pixel counts |A|, |B|, |A n B| for two grids; b sits at (dx, dy) in a's frame."""
    na = int(np.count_nonzero(a))
    nb = int(np.count_nonzero(b))
    ah, aw = a.shape
    bh, bw = b.shape
    x_lo, x_hi = max(0, dx), min(aw, dx + bw)
    y_lo, y_hi = max(0, dy), min(ah, dy + bh)
    if x_lo >= x_hi or y_lo >= y_hi:
        return na, nb, 0
    sub_a = a[y_lo:y_hi, x_lo:x_hi]
    sub_b = b[y_lo - dy:y_hi - dy, x_lo - dx:x_hi - dx]
    return na, nb, int(np.count_nonzero(sub_a & sub_b))


_NUMPY_IMPL = {
    "polygon_fill": _polygon_fill_np,
    "gaussian_blur": _gaussian_blur_np,
    "overlap_counts": _overlap_counts_np,
}

# ---------------------------------------------------------------------------
# numba twins
# ---------------------------------------------------------------------------


def _build_numba_impl():
    from numba import njit

    @njit(cache=True)
    def _polygon_fill_nb(vx, vy, x0, y0, w, h):
        inside = np.zeros((h, w), dtype=np.bool_)
        n = vx.size
        for jj in range(h):
            py = y0 + jj + 0.5
            for ii in range(w):
                px = x0 + ii + 0.5
                flag = False
                j = n - 1
                for i in range(n):
                    if (vy[i] > py) != (vy[j] > py):
                        xc = (vx[j] - vx[i]) * (py - vy[i]) / (vy[j] - vy[i]) + vx[i]
                        if px < xc:
                            flag = not flag
                    j = i
                inside[jj, ii] = flag
        return inside

    @njit(cache=True)
    def _gaussian_blur_nb(field, kern):
        h, w = field.shape
        r = kern.size // 2
        tmp = np.zeros((h, w), dtype=np.float64)
        for y in range(h):
            for x in range(w):
                acc = 0.0
                for t in range(kern.size):
                    xx = x + t - r
                    if 0 <= xx < w:
                        acc += kern[t] * field[y, xx]
                tmp[y, x] = acc
        out = np.zeros((h, w), dtype=np.float64)
        for y in range(h):
            for x in range(w):
                acc = 0.0
                for t in range(kern.size):
                    yy = y + t - r
                    if 0 <= yy < h:
                        acc += kern[t] * tmp[yy, x]
                out[y, x] = acc
        return out

    @njit(cache=True)
    def _overlap_counts_nb(a, b, dx, dy):
        na = 0
        ah, aw = a.shape
        for y in range(ah):
            for x in range(aw):
                if a[y, x]:
                    na += 1
        nb = 0
        bh, bw = b.shape
        for y in range(bh):
            for x in range(bw):
                if b[y, x]:
                    nb += 1
        inter = 0
        x_lo, x_hi = max(0, dx), min(aw, dx + bw)
        y_lo, y_hi = max(0, dy), min(ah, dy + bh)
        for y in range(y_lo, y_hi):
            for x in range(x_lo, x_hi):
                if a[y, x] and b[y - dy, x - dx]:
                    inter += 1
        return na, nb, inter

    def overlap_counts(a, b, dx, dy):
        na, nb, inter = _overlap_counts_nb(a, b, dx, dy)
        return int(na), int(nb), int(inter)

    return {
        "polygon_fill": _polygon_fill_nb,
        "gaussian_blur": _gaussian_blur_nb,
        "overlap_counts": overlap_counts,
    }


# ---------------------------------------------------------------------------
# path selection
# ---------------------------------------------------------------------------

_active = dict(_NUMPY_IMPL)
_active_name = "numpy"


def set_backend(name: str) -> str:
    """Switch kernel path at runtime; returns the active path name."""
    global _active, _active_name
    if name == "numpy":
        _active = dict(_NUMPY_IMPL)
        _active_name = "numpy"
    elif name == "numba":
        _active = _build_numba_impl()
        _active_name = "numba"
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    return _active_name


def active_backend() -> str:
    return _active_name


def _init_from_env() -> None:
    flag = os.environ.get("SPINEFM_NUMBA", "auto").strip().lower()
    if flag in ("0", "off", "numpy"):
        set_backend("numpy")
    elif flag in ("1", "on", "require", "numba"):
        set_backend("numba")
    else:
        try:
            set_backend("numba")
        except ImportError:
            set_backend("numpy")


def polygon_fill(vx: np.ndarray, vy: np.ndarray, x0: int, y0: int, w: int, h: int) -> np.ndarray:
    vx = np.ascontiguousarray(vx, dtype=np.float64)
    vy = np.ascontiguousarray(vy, dtype=np.float64)
    return _active["polygon_fill"](vx, vy, int(x0), int(y0), int(w), int(h))


def gaussian_blur(field: np.ndarray, kern: np.ndarray) -> np.ndarray:
    field = np.ascontiguousarray(field, dtype=np.float64)
    kern = np.ascontiguousarray(kern, dtype=np.float64)
    return _active["gaussian_blur"](field, kern)


def overlap_counts(a: np.ndarray, b: np.ndarray, dx: int, dy: int) -> tuple[int, int, int]:
    a = np.ascontiguousarray(a, dtype=np.bool_)
    b = np.ascontiguousarray(b, dtype=np.bool_)
    return _active["overlap_counts"](a, b, int(dx), int(dy))


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1D Gaussian, radius ceil(3*sigma)."""
    r = int(np.ceil(3.0 * sigma))
    xs = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return k / k.sum()


_init_from_env()
