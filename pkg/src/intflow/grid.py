"""Integer-lattice tensors and the reshaping plumbing shared by all flow layers.

A ``GridTensor`` stores one integer code per element; the real value it
represents is ``code / 2**bits``.  All reshaping here (space-to-depth, channel
splits, channel permutations) moves codes around without ever touching their
values, so every operation is exactly invertible in integer arithmetic.

Layout is batch-height-width-channels throughout, which keeps channel splits
and concatenations contiguous.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import DimensionError

_MASK64 = (1 << 64) - 1


def _splitmix64(state: int) -> tuple[int, int]:
    # SplitMix64: tiny, portable PRNG used only to derive permutations, so
    # serialized seeds reproduce the same permutation on any platform.
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _fisher_yates(n: int, seed: int) -> np.ndarray:
    perm = np.arange(n, dtype=np.int64)
    state = seed & _MASK64
    for i in range(n - 1, 0, -1):
        state, draw = _splitmix64(state)
        j = draw % (i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return perm


@dataclass(frozen=True)
class GridTensor:
    """Batch of integer-coded images on the lattice ``Z / 2**bits``."""

    codes: np.ndarray
    bits: int

    def __post_init__(self) -> None:
        codes = np.asarray(self.codes)
        if codes.ndim != 4:
            raise DimensionError(f"codes must be 4-D (B,H,W,C), got shape {codes.shape}")
        if not np.issubdtype(codes.dtype, np.integer):
            raise DimensionError(f"codes must be integers, got dtype {codes.dtype}")
        if self.bits < 1:
            raise DimensionError(f"bits must be >= 1, got {self.bits}")
        object.__setattr__(self, "codes", codes.astype(np.int64, copy=False))

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.codes.shape

    @property
    def batch(self) -> int:
        return self.codes.shape[0]

    @property
    def height(self) -> int:
        return self.codes.shape[1]

    @property
    def width(self) -> int:
        return self.codes.shape[2]

    @property
    def channels(self) -> int:
        return self.codes.shape[3]

    @property
    def bin_width(self) -> float:
        return 2.0 ** -self.bits

    def reals(self) -> np.ndarray:
        """Real values represented by the codes (float64, codes / 2**bits)."""
        return self.codes.astype(np.float64) * self.bin_width

    def with_codes(self, codes: np.ndarray) -> "GridTensor":
        return GridTensor(codes, self.bits)


@dataclass(frozen=True)
class ChannelPermutation:
    """Channel shuffle with its precomputed inverse and originating seed."""

    perm: np.ndarray
    inv: np.ndarray = field(default=None)  # type: ignore[assignment]
    seed: int = -1

    def __post_init__(self) -> None:
        perm = np.asarray(self.perm, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(perm.size)):
            raise DimensionError(f"perm is not a bijection on 0..{perm.size - 1}: {perm}")
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size, dtype=np.int64)
        object.__setattr__(self, "perm", perm)
        object.__setattr__(self, "inv", inv)

    @classmethod
    def from_seed(cls, channels: int, seed: int) -> "ChannelPermutation":
        return cls(_fisher_yates(channels, seed), seed=seed)

    @classmethod
    def reverse(cls, channels: int) -> "ChannelPermutation":
        return cls(np.arange(channels - 1, -1, -1, dtype=np.int64))

    @classmethod
    def identity(cls, channels: int) -> "ChannelPermutation":
        return cls(np.arange(channels, dtype=np.int64))

    def __len__(self) -> int:
        return self.perm.size


def space_to_depth_array(x: np.ndarray, factor: int) -> np.ndarray:
    """Array-level block-to-channel move for any (B, H, W, C) ndarray."""
    if factor == 1:
        return x
    b, h, w, c = x.shape
    if h % factor or w % factor:
        raise DimensionError(f"spatial dims {(h, w)} not divisible by factor {factor}")
    out = x.reshape(b, h // factor, factor, w // factor, factor, c)
    return out.transpose(0, 1, 3, 2, 4, 5).reshape(
        b, h // factor, w // factor, factor * factor * c
    )


def depth_to_space_array(x: np.ndarray, factor: int) -> np.ndarray:
    """Exact inverse of :func:`space_to_depth_array`."""
    if factor == 1:
        return x
    b, h, w, c = x.shape
    if c % (factor * factor):
        raise DimensionError(f"channels {c} not divisible by factor^2 {factor * factor}")
    cout = c // (factor * factor)
    out = x.reshape(b, h, w, factor, factor, cout)
    return out.transpose(0, 1, 3, 2, 4, 5).reshape(b, h * factor, w * factor, cout)


def space_to_depth(t: GridTensor, factor: int) -> GridTensor:
    """Move ``factor x factor`` spatial blocks into channels.

    Block-scan order is row-major within each block, blocks scanned row-major:
    output channel ``(di*factor + dj)*C + c`` holds input pixel offset
    ``(di, dj)`` of channel ``c``.  This order is recorded in the model file so
    that serialized streams stay portable.
    """
    if factor == 1:
        return t
    return t.with_codes(space_to_depth_array(t.codes, factor))


def depth_to_space(t: GridTensor, factor: int) -> GridTensor:
    """Exact inverse of :func:`space_to_depth`."""
    if factor == 1:
        return t
    return t.with_codes(depth_to_space_array(t.codes, factor))


def split_channels(t: GridTensor, fraction: Fraction) -> tuple[GridTensor, GridTensor]:
    """Split off the leading ``fraction`` of channels; exact inverse is concat."""
    c = t.channels
    size = Fraction(c) * Fraction(fraction)
    if size.denominator != 1 or not 0 < size.numerator < c:
        raise DimensionError(f"fraction {fraction} of {c} channels is not a proper integer split")
    n = int(size)
    return t.with_codes(t.codes[..., :n]), t.with_codes(t.codes[..., n:])


def concat_channels(a: GridTensor, b: GridTensor) -> GridTensor:
    if a.bits != b.bits:
        raise DimensionError(f"bit depths differ: {a.bits} vs {b.bits}")
    if a.shape[:3] != b.shape[:3]:
        raise DimensionError(f"batch/spatial shapes differ: {a.shape} vs {b.shape}")
    return a.with_codes(np.concatenate([a.codes, b.codes], axis=-1))


def apply_permutation(t: GridTensor, p: ChannelPermutation, inverse: bool = False) -> GridTensor:
    """Reorder channels: output channel ``i`` takes input channel ``perm[i]``."""
    if t.channels != len(p):
        raise DimensionError(f"permutation length {len(p)} != channels {t.channels}")
    idx = p.inv if inverse else p.perm
    return t.with_codes(t.codes[..., idx])
