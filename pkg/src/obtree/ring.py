"""Arithmetic in Z_{2^l} with two's-complement fixed-point encoding.

All share arithmetic in this package happens in a power-of-two ring so that
addition and multiplication wrap for free on unsigned machine words.  Values
are stored as numpy uint64 regardless of the ring width; every operation
masks back down to ``width`` bits.  Scalars (Python ints) are accepted and
returned wherever a single element is more natural than an array.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

SUPPORTED_WIDTHS = (8, 32, 64)

Scalar = Union[int, np.integer]


class RingError(ValueError):
    pass


@dataclass(frozen=True)
class Ring:
    """The ring Z_{2^width} for width in {8, 32, 64}."""

    width: int

    def __post_init__(self) -> None:
        if self.width not in SUPPORTED_WIDTHS:
            raise RingError(f"unsupported ring width {self.width}; expected one of {SUPPORTED_WIDTHS}")

    @property
    def mask(self) -> int:
        return (1 << self.width) - 1

    @property
    def modulus(self) -> int:
        return 1 << self.width

    @property
    def half(self) -> int:
        return 1 << (self.width - 1)

    @property
    def nbytes(self) -> int:
        return self.width // 8

    def reduce(self, x):
        """Map ints or arrays into [0, 2^width)."""
        if isinstance(x, np.ndarray):
            return x.astype(np.uint64, copy=False) & np.uint64(self.mask)
        return int(x) & self.mask

    def add(self, a, b):
        if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
            return (np.asarray(a, dtype=np.uint64) + np.asarray(b, dtype=np.uint64)) & np.uint64(self.mask)
        return (int(a) + int(b)) & self.mask

    def sub(self, a, b):
        if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
            return (np.asarray(a, dtype=np.uint64) - np.asarray(b, dtype=np.uint64)) & np.uint64(self.mask)
        return (int(a) - int(b)) & self.mask

    def neg(self, a):
        if isinstance(a, np.ndarray):
            return (-a.astype(np.uint64, copy=False)) & np.uint64(self.mask)
        return (-int(a)) & self.mask

    def mul(self, a, b):
        if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
            return (np.asarray(a, dtype=np.uint64) * np.asarray(b, dtype=np.uint64)) & np.uint64(self.mask)
        return (int(a) * int(b)) & self.mask

    def to_signed(self, x):
        """Two's-complement interpretation of canonical values."""
        if isinstance(x, np.ndarray):
            x = x.astype(np.uint64, copy=False) & np.uint64(self.mask)
            if self.width == 64:
                return x.astype(np.int64)
            out = x.astype(np.int64)
            out[out >= self.half] -= self.modulus
            return out
        x = int(x) & self.mask
        return x - self.modulus if x >= self.half else x

    def uniform(self, rng: np.random.Generator, shape) -> np.ndarray:
        """Uniform ring elements from a numpy Generator (test plumbing)."""
        raw = rng.integers(0, 1 << 63, size=shape, dtype=np.uint64)
        raw ^= rng.integers(0, 1 << 63, size=shape, dtype=np.uint64) << np.uint64(1)
        return raw & np.uint64(self.mask)


RING8 = Ring(8)
RING32 = Ring(32)
RING64 = Ring(64)


def check_tau(tau: int, ring: Ring) -> None:
    if not 0 <= tau < ring.width - 2:
        raise RingError(f"fixed-point precision tau={tau} must satisfy 0 <= tau < {ring.width - 2}")


def encode_fixed(x, tau: int, ring: Ring):
    """Encode a real value as round(x * 2^tau) in two's complement.

    Raises if the scaled magnitude does not fit the signed range.
    """
    check_tau(tau, ring)
    if isinstance(x, np.ndarray):
        scaled = np.rint(np.asarray(x, dtype=np.float64) * float(1 << tau)).astype(np.int64)
        if np.any(scaled >= ring.half) or np.any(scaled < -ring.half):
            raise RingError("fixed-point overflow: value outside representable range")
        return scaled.astype(np.uint64) & np.uint64(ring.mask)
    scaled = int(round(float(x) * (1 << tau)))
    if scaled >= ring.half or scaled < -ring.half:
        raise RingError(f"fixed-point overflow: {x} outside representable range at tau={tau}")
    return scaled & ring.mask


def decode_fixed(v, tau: int, ring: Ring):
    """Decode two's-complement fixed point back to float."""
    check_tau(tau, ring)
    signed = ring.to_signed(v)
    if isinstance(signed, np.ndarray):
        return signed.astype(np.float64) / float(1 << tau)
    return signed / float(1 << tau)
