"""Real FFT, frequency-band masking and the time/frequency masking ablations.

All transforms operate on the last axis and broadcast over leading axes.
The forward transform is unnormalized and the inverse carries the 1/L factor.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MASK_KINDS = ("multi_freq", "random_freq", "patch", "multi_patch")

_REALITY_TOL = 1e-9


@dataclass(frozen=True)
class Spectrum:
    bins: np.ndarray  # complex, shape (..., L/2+1)
    origin_length: int

    def __post_init__(self):
        if self.bins.shape[-1] != self.origin_length // 2 + 1:
            raise ValueError(
                f"{self.bins.shape[-1]} bins do not match origin length {self.origin_length}"
            )


@dataclass(frozen=True)
class MaskBatch:
    rows: np.ndarray  # (K_f, L/2+1) of {0, 1}
    thresholds: np.ndarray  # (K_f,) in [0, a)
    flips: np.ndarray  # (K_f,) in {0, 1}

    @property
    def n_bins(self) -> int:
        return self.rows.shape[-1]

    @property
    def length(self) -> int:
        return 2 * (self.n_bins - 1)


@dataclass(frozen=True)
class MaskedSeriesSet:
    series: np.ndarray  # (..., K_f, L)
    source: np.ndarray
    mask: MaskBatch


# --------------------------------------------------------------------------
# complex FFT kernels


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _fft_radix2(z: np.ndarray) -> np.ndarray:
    n = z.shape[-1]
    out = z[..., _bit_reverse(n)].astype(np.complex128, copy=True)
    lead = out.shape[:-1]
    half = 1
    while half < n:
        size = 2 * half
        tw = np.exp(-2j * np.pi * np.arange(half) / size)
        blocks = out.reshape(*lead, n // size, size)
        even = blocks[..., :half].copy()
        odd = blocks[..., half:] * tw
        blocks[..., :half] = even + odd
        blocks[..., half:] = even - odd
        out = blocks.reshape(*lead, n)
        half = size
    return out


def _fft_bluestein(z: np.ndarray) -> np.ndarray:
    n = z.shape[-1]
    m = 1 << (2 * n - 1).bit_length()
    k = np.arange(n)
    chirp = np.exp(-1j * np.pi * (k * k % (2 * n)) / n)
    a = np.zeros(z.shape[:-1] + (m,), dtype=np.complex128)
    a[..., :n] = z * chirp
    b = np.zeros(m, dtype=np.complex128)
    b[:n] = np.conj(chirp)
    b[m - n + 1:] = np.conj(chirp[1:])[::-1]
    conv = _ifft(_fft_radix2(a) * _fft_radix2(b))
    return conv[..., :n] * chirp


def _fft(z: np.ndarray) -> np.ndarray:
    n = z.shape[-1]
    if n == 1:
        return z.astype(np.complex128, copy=True)
    if _is_pow2(n):
        return _fft_radix2(z)
    return _fft_bluestein(z)


def _ifft(z: np.ndarray) -> np.ndarray:
    return np.conj(_fft(np.conj(z))) / z.shape[-1]


# --------------------------------------------------------------------------
# real transforms


def rfft(x) -> Spectrum:
    """Unnormalized real FFT over the last axis; L must be even."""
    x = np.asarray(x, dtype=np.float64)
    length = x.shape[-1]
    if length < 2 or length % 2:
        raise ValueError(f"rfft needs an even length >= 2, got {length}")
    half = length // 2
    # pack even/odd samples into one half-length complex transform
    packed = _fft(x[..., 0::2] + 1j * x[..., 1::2])
    packed = np.concatenate([packed, packed[..., :1]], axis=-1)
    mirrored = np.conj(packed[..., ::-1])
    even = 0.5 * (packed + mirrored)
    odd = -0.5j * (packed - mirrored)
    twiddle = np.exp(-2j * np.pi * np.arange(half + 1) / length)
    bins = even + twiddle * odd
    # bins 0 and L/2 are real by construction
    bins[..., 0] = bins[..., 0].real
    bins[..., half] = bins[..., half].real
    return Spectrum(bins=bins, origin_length=length)


def irfft(spec: Spectrum) -> np.ndarray:
    """Inverse of :func:`rfft` (1/L scaled)."""
    bins = np.asarray(spec.bins, dtype=np.complex128)
    length = spec.origin_length
    half = length // 2
    scale = max(1.0, float(np.max(np.abs(bins)))) if bins.size else 1.0
    edge = np.maximum(np.abs(bins[..., 0].imag), np.abs(bins[..., half].imag))
    if np.any(edge > _REALITY_TOL * scale):
        raise ValueError("spectrum violates the reality constraint at DC/Nyquist")
    bins = bins.copy()
    bins[..., 0] = bins[..., 0].real
    bins[..., half] = bins[..., half].real
    mirrored = np.conj(bins[..., ::-1])
    even = 0.5 * (bins + mirrored)[..., :half]
    twiddle = np.exp(2j * np.pi * np.arange(half) / length)
    odd = (0.5 * (bins - mirrored))[..., :half] * twiddle
    packed = _ifft(even + 1j * odd)
    out = np.empty(bins.shape[:-1] + (length,), dtype=np.float64)
    out[..., 0::2] = packed.real
    out[..., 1::2] = packed.imag
    return out


# --------------------------------------------------------------------------
# multi-frequency masking


def mask_rows(thresholds, flips, n_bins: int) -> np.ndarray:
    """Keep flags: bin j takes mu for j < tau and 1 - mu otherwise."""
    tau = np.asarray(thresholds, dtype=np.float64)[..., None]
    mu = np.asarray(flips, dtype=np.int64)[..., None]
    below = np.arange(n_bins) < tau
    return np.where(below, mu, 1 - mu).astype(np.float64)


def sample_mask_batch(length: int, k_f: int, a: float, p: float, rng: np.random.Generator) -> MaskBatch:
    n_bins = length // 2 + 1
    if not 0 < a < n_bins:
        raise ValueError(f"threshold bound a must lie in (0, {n_bins}), got {a}")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"bernoulli p must lie in [0, 1], got {p}")
    if k_f < 1:
        raise ValueError("k_f must be >= 1")
    tau = rng.uniform(0.0, a, size=k_f)
    mu = (rng.random(k_f) < p).astype(np.int64)
    return MaskBatch(rows=mask_rows(tau, mu, n_bins), thresholds=tau, flips=mu)


def apply_masks(x, mask: MaskBatch) -> MaskedSeriesSet:
    """One inverse-transformed series per mask row: shape (..., K_f, L)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != mask.length:
        raise ValueError(f"series length {x.shape[-1]} does not match mask length {mask.length}")
    spec = rfft(x)
    masked = spec.bins[..., None, :] * mask.rows
    series = irfft(Spectrum(masked, mask.length))
    return MaskedSeriesSet(series=series, source=x, mask=mask)


def multi_freq_views(x, k_f: int, a: float, p: float, rng: np.random.Generator) -> np.ndarray:
    """Fresh mask batch per window of a (B, L) batch -> (B, K_f, L)."""
    x = np.asarray(x, dtype=np.float64)
    length = x.shape[-1]
    rows = np.stack([sample_mask_batch(length, k_f, a, p, rng).rows for _ in range(x.shape[0])])
    return irfft(Spectrum(rfft(x).bins[:, None, :] * rows, length))


# --------------------------------------------------------------------------
# ablation masks


def random_freq_mask(x, mask_ratio: float, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not 0.0 <= mask_ratio <= 1.0:
        raise ValueError("mask_ratio must lie in [0, 1]")
    spec = rfft(x)
    n_bins = spec.bins.shape[-1]
    drop = rng.choice(n_bins, size=int(np.floor(mask_ratio * n_bins)), replace=False)
    bins = spec.bins.copy()
    bins[..., drop] = 0.0
    return irfft(Spectrum(bins, spec.origin_length))


def patch_mask(x, patch_len: int, mask_ratio: float, rng: np.random.Generator):
    """Zero a random subset of whole patches; returns (series, masked-patch flags)."""
    x = np.asarray(x, dtype=np.float64)
    length = x.shape[-1]
    if patch_len < 1 or length % patch_len:
        raise ValueError(f"length {length} is not divisible by patch_len {patch_len}")
    if not 0.0 <= mask_ratio <= 1.0:
        raise ValueError("mask_ratio must lie in [0, 1]")
    n_patches = length // patch_len
    flags = np.zeros(n_patches, dtype=bool)
    flags[rng.choice(n_patches, size=int(np.floor(mask_ratio * n_patches)), replace=False)] = True
    out = x.copy().reshape(*x.shape[:-1], n_patches, patch_len)
    out[..., flags, :] = 0.0
    return out.reshape(x.shape), flags


def multi_patch_mask(x, patch_len: int, mask_ratio: float, k_f: int, rng: np.random.Generator):
    draws = [patch_mask(x, patch_len, mask_ratio, rng) for _ in range(k_f)]
    return np.stack([d[0] for d in draws], axis=-2), np.stack([d[1] for d in draws])


def masked_views(kind: str, x, rng: np.random.Generator, *, k_f: int, a: float, p: float,
                 patch_len: int, mask_ratio: float) -> np.ndarray:
    """Reconstruction-task inputs for a (B, L) batch under any masking scheme -> (B, K, L).

    Single-view schemes (random_freq, patch) return K = 1.
    """
    x = np.asarray(x, dtype=np.float64)
    if kind == "multi_freq":
        return multi_freq_views(x, k_f, a, p, rng)
    if kind == "random_freq":
        return np.stack([random_freq_mask(row, mask_ratio, rng) for row in x])[:, None, :]
    if kind == "patch":
        return np.stack([patch_mask(row, patch_len, mask_ratio, rng)[0] for row in x])[:, None, :]
    if kind == "multi_patch":
        return np.stack([multi_patch_mask(row, patch_len, mask_ratio, k_f, rng)[0] for row in x])
    raise ValueError(f"unknown mask kind {kind!r}; expected one of {MASK_KINDS}")
