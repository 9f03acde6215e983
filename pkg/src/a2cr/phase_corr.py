"""Integer translation estimation by phase correlation.

Transforms use an iterative radix-2 Cooley-Tukey FFT (bit-reversal
permutation followed by in-place butterflies), vectorised across rows, so
frame sides must be powers of two.

Shift convention: ``estimate_shift(prev, next)`` returns ``(dx, dy)`` with
``next[y, x] ≈ prev[y + dy, x + dx]``.  A camera that scrolls right by
``d`` pixels moves content left and yields ``dx = +d``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ShapeError

_EPS_MAG = 1e-12


def _check_pow2(n: int, what: str) -> None:
    if n < 1 or n & (n - 1):
        raise ShapeError(f"{what} must be a power of two, got {n}")


@lru_cache(maxsize=32)
def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=64)
def _twiddles(m: int, inverse: bool) -> np.ndarray:
    sign = 1.0 if inverse else -1.0
    return np.exp(sign * 2j * np.pi * np.arange(m // 2) / m)


def _fft_last_axis(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Unnormalised radix-2 DIT transform along the last axis."""
    n = x.shape[-1]
    _check_pow2(n, "transform length")
    a = np.array(x[..., _bit_reverse(n)], dtype=np.complex128)
    lead = a.shape[:-1]
    m = 2
    while m <= n:
        half = m // 2
        blocks = a.reshape(*lead, n // m, m)
        u = blocks[..., :half].copy()
        t = blocks[..., half:] * _twiddles(m, inverse)
        blocks[..., :half] = u + t
        blocks[..., half:] = u - t
        m *= 2
    return a


def fft(x) -> np.ndarray:
    return _fft_last_axis(np.asarray(x))


def ifft(x) -> np.ndarray:
    x = np.asarray(x)
    return _fft_last_axis(x, inverse=True) / x.shape[-1]


def fft2(grid) -> np.ndarray:
    """2-D DFT, F[v, u] = Σ_y Σ_x g[y, x]·exp(-2πi(ux/W + vy/H))."""
    g = np.asarray(grid)
    if g.ndim != 2:
        raise ShapeError(f"fft2 expects a 2-d grid, got shape {g.shape}")
    _check_pow2(g.shape[0], "grid height")
    _check_pow2(g.shape[1], "grid width")
    rows = _fft_last_axis(g)
    return _fft_last_axis(rows.T).T


def ifft2(spec) -> np.ndarray:
    s = np.asarray(spec)
    if s.ndim != 2:
        raise ShapeError(f"ifft2 expects a 2-d grid, got shape {s.shape}")
    _check_pow2(s.shape[0], "grid height")
    _check_pow2(s.shape[1], "grid width")
    rows = _fft_last_axis(s, inverse=True)
    return _fft_last_axis(rows.T, inverse=True).T / s.size


def hamming_window_2d(width: int, height: int) -> np.ndarray:
    """Outer product of 1-D Hamming windows, shape (height, width)."""
    if width < 2 or height < 2:
        raise ValueError("window sides must be at least 2")

    def ham(n):
        k = np.arange(n)
        return 0.54 - 0.46 * np.cos(2 * np.pi * k / (n - 1))

    return np.outer(ham(height), ham(width))


def cross_power_spectrum(f1: np.ndarray, f2: np.ndarray) -> np.ndarray:
    """Unit-magnitude ``f1·conj(f2) / |f1·conj(f2)|``; near-empty bins map to 0."""
    f1 = np.asarray(f1)
    f2 = np.asarray(f2)
    if f1.shape != f2.shape:
        raise ShapeError(f"spectra differ in shape: {f1.shape} vs {f2.shape}")
    prod = f1 * np.conj(f2)
    mag = np.abs(prod)
    out = np.zeros_like(prod)
    nz = mag >= _EPS_MAG
    out[nz] = prod[nz] / mag[nz]
    return out


@dataclass(frozen=True)
class ShiftEstimate:
    dx: int
    dy: int
    peak_value: float
    peak_sharpness: float

    @property
    def low_confidence(self) -> bool:
        return self.peak_sharpness == 0.0


def correlation_surface(prev, nxt) -> np.ndarray:
    """|ifft2(R)| for the windowed pair; the peak sits at the wrapped shift."""
    a = np.asarray(prev, dtype=np.float64)
    b = np.asarray(nxt, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"frames must be equal-shape 2-d arrays, got {a.shape} and {b.shape}")
    h, w = a.shape
    _check_pow2(h, "grid height")
    _check_pow2(w, "grid width")
    win = hamming_window_2d(w, h)
    # both frames go through one batched 2-d transform
    pair = _fft_last_axis(np.stack([a * win, b * win]))
    pair = _fft_last_axis(pair.transpose(0, 2, 1)).transpose(0, 2, 1)
    r = cross_power_spectrum(pair[0], pair[1])
    return np.abs(ifft2(r))


def estimate_shift(prev, nxt) -> ShiftEstimate:
    """Integer (dx, dy) such that ``nxt[y, x] ≈ prev[y + dy, x + dx]``."""
    surface = correlation_surface(prev, nxt)
    mean = surface.mean()
    if mean < _EPS_MAG:
        return ShiftEstimate(0, 0, 0.0, 0.0)
    h, w = surface.shape
    iy, ix = np.unravel_index(int(np.argmax(surface)), surface.shape)
    # with R = F(prev)·conj(F(next)) the peak lands at (+dy, +dx) directly
    dx = ix - w if ix > w // 2 else ix
    dy = iy - h if iy > h // 2 else iy
    peak = float(surface[iy, ix])
    return ShiftEstimate(int(dx), int(dy), peak, peak / mean)
