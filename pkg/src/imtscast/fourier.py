"""Real-input Fourier transforms along matrix rows, in a packed-real layout.

Layout for even row length ``d``:

    [Re_0, Re_1, ..., Re_{d/2}, Im_1, ..., Im_{d/2-1}]

The DC and Nyquist bins of a real signal have zero imaginary parts, so the
spectrum occupies exactly ``d`` reals and the transform is an invertible
linear map R^d -> R^d. The forward transform is unnormalized; the inverse
carries the 1/d factor, so ``irfft_rows(rfft_rows(x)) == x``.

Power-of-two lengths use an iterative radix-2 butterfly (vectorized across
rows); other even lengths fall back to the direct O(d^2) summation. The
independent test oracle ``naive_dft_rows`` always uses per-bin direct
summation and shares nothing with the fast path.
"""

from __future__ import annotations

import numpy as np

from .tape import ShapeError, Tensor


def _check_rows(x: np.ndarray) -> int:
    if x.ndim != 2:
        raise ShapeError(f"spectral transform expects a matrix, got shape {x.shape}")
    d = x.shape[1]
    if d < 2 or d % 2 != 0:
        raise ShapeError(f"spectral transform needs an even row length >= 2, got {d}")
    return d


def _is_pow2(n: int) -> bool:
    return n & (n - 1) == 0


def _bit_reverse_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for _ in range(bits):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    return rev


def _fft_pow2(re: np.ndarray, im: np.ndarray, inverse: bool):
    """Iterative radix-2 complex FFT over the last axis (rows independent)."""
    n = re.shape[-1]
    order = _bit_reverse_indices(n)
    re = re[..., order].copy()
    im = im[..., order].copy()
    rows = re.shape[0]
    size = 2
    sign = 1.0 if inverse else -1.0
    while size <= n:
        half = size // 2
        ang = sign * 2.0 * np.pi * np.arange(half) / size
        wr, wi = np.cos(ang), np.sin(ang)
        rb = re.reshape(rows, n // size, size)
        ib = im.reshape(rows, n // size, size)
        er, ei = rb[..., :half], ib[..., :half]
        orr, oi = rb[..., half:], ib[..., half:]
        tr = wr * orr - wi * oi
        ti = wr * oi + wi * orr
        rb[..., :half], rb[..., half:] = er + tr, er - tr
        ib[..., :half], ib[..., half:] = ei + ti, ei - ti
        size *= 2
    return re, im


def _pack(re: np.ndarray, im: np.ndarray, d: int) -> np.ndarray:
    out = np.empty((re.shape[0], d))
    out[:, : d // 2 + 1] = re[:, : d // 2 + 1]
    out[:, d // 2 + 1 :] = im[:, 1 : d // 2]
    return out


def _unpack(packed: np.ndarray):
    """Expand packed rows to full-length complex (re, im) using symmetry."""
    d = _check_rows(packed)
    half = d // 2
    re = np.empty((packed.shape[0], d))
    im = np.zeros((packed.shape[0], d))
    re[:, : half + 1] = packed[:, : half + 1]
    im[:, 1:half] = packed[:, half + 1 :]
    re[:, half + 1 :] = re[:, 1:half][:, ::-1]
    im[:, half + 1 :] = -im[:, 1:half][:, ::-1]
    return re, im


def rfft_mat(x: np.ndarray) -> np.ndarray:
    """Forward packed transform of each row (plain numpy, unnormalized)."""
    x = np.asarray(x, dtype=np.float64)
    d = _check_rows(x)
    if _is_pow2(d):
        re, im = _fft_pow2(x, np.zeros_like(x), inverse=False)
        return _pack(re, im, d)
    return _direct_forward(x)


def irfft_mat(packed: np.ndarray) -> np.ndarray:
    """Inverse packed transform of each row (1/d normalization)."""
    packed = np.asarray(packed, dtype=np.float64)
    d = _check_rows(packed)
    re, im = _unpack(packed)
    if _is_pow2(d):
        rr, _ = _fft_pow2(re, im, inverse=True)
        return rr / d
    return _direct_inverse(packed)


def _direct_forward(x: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    grid = np.arange(d)
    out = np.empty((x.shape[0], d))
    for j in range(d // 2 + 1):
        ang = 2.0 * np.pi * j * grid / d
        out[:, j] = x @ np.cos(ang)
        if 1 <= j <= d // 2 - 1:
            out[:, d // 2 + j] = -(x @ np.sin(ang))
    return out


def _direct_inverse(packed: np.ndarray) -> np.ndarray:
    d = packed.shape[1]
    half = d // 2
    grid = np.arange(d)
    out = np.empty((packed.shape[0], d))
    for l in range(d):
        acc = packed[:, 0] + packed[:, half] * ((-1.0) ** l)
        for j in range(1, half):
            ang = 2.0 * np.pi * j * l / d
            acc = acc + 2.0 * (
                packed[:, j] * np.cos(ang) - packed[:, half + j] * np.sin(ang)
            )
        out[:, l] = acc
    return out / d


def naive_dft_rows(x: np.ndarray) -> np.ndarray:
    """O(d^2) reference transform in the same packing; test oracle only."""
    x = np.asarray(x, dtype=np.float64)
    d = _check_rows(x)
    grid = np.arange(d)
    out = np.empty((x.shape[0], d))
    for j in range(d // 2 + 1):
        ang = 2.0 * np.pi * j * grid / d
        out[:, j] = x @ np.cos(ang)
    for j in range(1, d // 2):
        ang = 2.0 * np.pi * j * grid / d
        out[:, d // 2 + j] = -(x @ np.sin(ang))
    return out


def spectrum_energy(packed: np.ndarray) -> np.ndarray:
    """Per-row sum of |X_j|^2 over all d complex bins (for Parseval checks)."""
    re, im = _unpack(np.asarray(packed, dtype=np.float64))
    return (re * re + im * im).sum(axis=1)


def rfft_rows(t: Tensor) -> Tensor:
    """Tape-recorded forward transform of each row."""
    d = _check_rows(t.data)
    half = d // 2

    def vjp(g):
        scaled = g.copy()
        scaled[:, 1:half] *= 0.5
        scaled[:, half + 1 :] *= 0.5
        return (irfft_mat(scaled) * d,)

    return t.tape.record("rfft_rows", rfft_mat(t.data), (t,), vjp)


def irfft_rows(t: Tensor) -> Tensor:
    """Tape-recorded inverse transform of each row."""
    d = _check_rows(t.data)
    half = d // 2

    def vjp(g):
        out = rfft_mat(g)
        out[:, 1:half] *= 2.0
        out[:, half + 1 :] *= 2.0
        return (out / d,)

    return t.tape.record("irfft_rows", irfft_mat(t.data), (t,), vjp)
