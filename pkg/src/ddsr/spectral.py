"""2D discrete Fourier transforms over feature maps.

The transform is orthonormal (``1/sqrt(H*W)`` in both directions), so the
forward map is unitary and Parseval holds exactly. Lengths are arbitrary:
composite lengths are split by their smallest prime factor (mixed-radix
Cooley-Tukey) down to a direct DFT matrix product for lengths <= 64, and larger
primes go through Bluestein's chirp-z reformulation on a power-of-two grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor import Tensor, make_op

_DIRECT_LIMIT = 64


@lru_cache(maxsize=None)
def _smallest_factor(n: int) -> int:
    if n % 2 == 0:
        return 2
    f = 3
    while f * f <= n:
        if n % f == 0:
            return f
        f += 2
    return n


@lru_cache(maxsize=None)
def _dft_matrix(n: int, sign: int, ctype=np.complex128) -> np.ndarray:
    jk = np.outer(np.arange(n), np.arange(n)) % n
    return np.exp(sign * 2j * np.pi * jk / n).astype(ctype)


@lru_cache(maxsize=None)
def _twiddles(p: int, m: int, sign: int, ctype=np.complex128) -> np.ndarray:
    n = p * m
    jk = np.outer(np.arange(p), np.arange(m)) % n
    return np.exp(sign * 2j * np.pi * jk / n).astype(ctype)


@lru_cache(maxsize=None)
def _bluestein_plan(n: int, sign: int, ctype=np.complex128):
    k = np.arange(n)
    # k^2 mod 2n keeps the chirp argument small
    chirp = np.exp(sign * 1j * np.pi * ((k * k) % (2 * n)) / n)
    size = 1
    while size < 2 * n - 1:
        size *= 2
    b = np.zeros(size, dtype=np.complex128)
    b[:n] = np.conj(chirp)
    b[size - n + 1:] = np.conj(chirp[1:])[::-1]
    return chirp.astype(ctype), size, _fft_last(b, -1).astype(ctype)


def _fft_last(x: np.ndarray, sign: int) -> np.ndarray:
    """Unnormalized DFT along the last axis: ``X[k] = sum_j x[j] exp(sign*2*pi*i*j*k/n)``."""
    n = x.shape[-1]
    ctype = x.dtype.type
    if n == 1:
        return x.copy()
    if n <= _DIRECT_LIMIT:
        return np.ascontiguousarray(x) @ _dft_matrix(n, sign, ctype)
    p = _smallest_factor(n)
    if p == n:
        return _bluestein(x, sign)
    m = n // p
    # j = p*j1 + j2: sub-transforms of length m over each residue class j2
    sub = np.swapaxes(x.reshape(x.shape[:-1] + (m, p)), -1, -2)
    y = _fft_last(sub, sign) * _twiddles(p, m, sign, ctype)  # [..., j2, k1]
    w = _dft_matrix(p, sign, ctype)
    z = np.empty_like(y)  # [..., k2, k1], k = k1 + m*k2
    for k2 in range(p):
        acc = y[..., 0, :].copy()
        for j2 in range(1, p):
            acc += w[k2, j2] * y[..., j2, :]
        z[..., k2, :] = acc
    return z.reshape(x.shape[:-1] + (n,))


def _bluestein(x: np.ndarray, sign: int) -> np.ndarray:
    n = x.shape[-1]
    chirp, size, b_hat = _bluestein_plan(n, sign, x.dtype.type)
    a = np.zeros(x.shape[:-1] + (size,), dtype=x.dtype)
    a[..., :n] = x * chirp
    conv = _fft_last(_fft_last(a, -1) * b_hat, 1) / size
    return conv[..., :n] * chirp


def dft2(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Orthonormal 2D DFT over the last two axes of a real or complex array.

    Single-precision inputs are transformed in complex64, everything else in
    complex128.
    """
    x = np.asarray(x)
    single = x.dtype in (np.float32, np.complex64)
    ctype = np.complex64 if single else np.complex128
    H, W = x.shape[-2:]
    sign = 1 if inverse else -1
    y = _fft_last(x.astype(ctype), sign)
    y = np.swapaxes(_fft_last(np.swapaxes(y, -1, -2), sign), -1, -2)
    return y * ctype(1.0 / np.sqrt(H * W))


@dataclass
class ComplexSpectrum:
    """Real and imaginary planes of a 2D spectrum, each ``[N, C, H, W]``."""

    real: Tensor
    imag: Tensor

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ValueError(f"real {self.real.shape} and imag {self.imag.shape} shapes differ")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.real.shape

    def to_complex(self) -> np.ndarray:
        ctype = np.complex64 if self.real.dtype == np.float32 else np.complex128
        z = np.empty(self.real.shape, dtype=ctype)
        z.real = self.real.data
        z.imag = self.imag.data
        return z

    def stacked(self) -> Tensor:
        """Real block followed by imaginary block along channels."""
        from .tensor import ops

        return ops.concat([self.real, self.imag], axis=1)

    @classmethod
    def from_complex(cls, z: np.ndarray, dtype=np.float64) -> ComplexSpectrum:
        return cls(Tensor(z.real.astype(dtype)), Tensor(z.imag.astype(dtype)))


def fft2(x: Tensor) -> ComplexSpectrum:
    """Differentiable orthonormal FFT of a real map."""
    z = dft2(x.data)
    dtype = x.dtype

    def backward_real(g):
        return (dft2(g, inverse=True).real.astype(dtype),)

    def backward_imag(g):
        # d/dx of Im(Fx) contracted with g: Re(conj(F) (i g)) = -Im(conj(F) g)
        return ((-dft2(g, inverse=True).imag).astype(dtype),)

    real = make_op(np.ascontiguousarray(z.real, dtype=dtype), (x,), backward_real, "fft2.real")
    imag = make_op(np.ascontiguousarray(z.imag, dtype=dtype), (x,), backward_imag, "fft2.imag")
    return ComplexSpectrum(real, imag)


def ifft2(spec: ComplexSpectrum, return_residue: bool = False):
    """Differentiable inverse orthonormal FFT keeping the real part.

    With ``return_residue`` also returns the largest absolute imaginary
    component that was dropped.
    """
    z = dft2(spec.to_complex(), inverse=True)
    dtype = spec.real.dtype

    def backward(g):
        gz = dft2(g)
        return gz.real.astype(dtype), gz.imag.astype(dtype)

    out = make_op(np.ascontiguousarray(z.real, dtype=dtype), (spec.real, spec.imag), backward, "ifft2")
    if return_residue:
        return out, float(np.abs(z.imag).max(initial=0.0))
    return out


def fftshift2(a: np.ndarray) -> np.ndarray:
    """Move the zero-frequency bin to the center of the last two axes."""
    H, W = a.shape[-2:]
    return np.roll(a, (H // 2, W // 2), axis=(-2, -1))


def amplitude_map(spec: ComplexSpectrum, log_scale: bool = True) -> Tensor:
    """Per-bin magnitude, optionally ``log(1 + |z|)``, with DC moved to the center."""
    amp = np.sqrt(spec.real.data ** 2 + spec.imag.data ** 2)
    if log_scale:
        amp = np.log1p(amp)
    return Tensor(fftshift2(amp))


def radial_frequency(H: int, W: int) -> np.ndarray:
    """Normalized radial frequency per unshifted bin; 1.0 at the Nyquist edge of each axis."""
    fy = np.fft.fftfreq(H) * 2.0
    fx = np.fft.fftfreq(W) * 2.0
    return np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)


def high_band_amplitude_error(pred: np.ndarray, target: np.ndarray, cutoff: float = 0.5) -> float:
    """Mean absolute amplitude difference over bins with radial frequency above ``cutoff``."""
    H, W = pred.shape[-2:]
    mask = radial_frequency(H, W) > cutoff
    ap = np.abs(dft2(pred))
    at = np.abs(dft2(target))
    return float(np.abs(ap - at)[..., mask].mean())


def ring_means(amp: np.ndarray, n_rings: int = 8) -> np.ndarray:
    """Mean amplitude within concentric rings of an unshifted ``[H, W]`` map."""
    H, W = amp.shape[-2:]
    r = radial_frequency(H, W) / np.sqrt(2.0)
    edges = np.linspace(0.0, 1.0 + 1e-9, n_rings + 1)
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (r >= lo) & (r < hi)
        out.append(amp[..., sel].mean() if sel.any() else np.nan)
    return np.array(out)
