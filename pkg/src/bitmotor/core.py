"""Bit-level primitives: sign binarization, straight-through gradients,
{+1,-1} <-> packed-bit conversion, and the XNOR-popcount dot product.

Encoding convention used everywhere in this package:

    bit 1  <->  +1
    bit 0  <->  -1

so that XNOR of two bits equals the sign of the product of the two values,
and a +-1 dot product of length n becomes ``2 * popcount(XNOR(a, b)) - n``.
Bits are stored LSB-first inside little-endian 64-bit words, row-major over
the logical tensor. Tail bits past the logical length are always zero; the
popcount arithmetic relies on that.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "BitTensor",
    "as_dense",
    "sign_forward",
    "sign_values",
    "ste_backward",
    "pack",
    "unpack",
    "xnor_popcount_dot",
    "popcount",
]

_WORD_BITS = 64

if hasattr(np, "bitwise_count"):
    def popcount(words):
        """Per-element population count of a uint64 array."""
        return np.bitwise_count(words)
else:  # numpy < 2.0
    _PC8 = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)

    def popcount(words):
        """Per-element population count of a uint64 array (byte-LUT fallback)."""
        b = np.ascontiguousarray(words).view(np.uint8)
        return _PC8[b].reshape(*words.shape, 8).sum(axis=-1, dtype=np.uint64)


def as_dense(data, shape=None):
    """Validate and return a float32 row-major array.

    Rejects NaN/Inf at construction so downstream sign/compare logic stays
    total. This is the construction point for dense tensors; internally the
    package just passes numpy arrays around.
    """
    x = np.ascontiguousarray(data, dtype=np.float32)
    if shape is not None:
        x = x.reshape(shape)
    if not np.all(np.isfinite(x)):
        raise ValueError("dense tensor must be finite (got NaN or Inf)")
    return x


class BitTensor:
    """Shape-tagged bit-packed array of {+1,-1} values.

    ``words`` is a flat uint64 array of length ceil(prod(shape)/64); bit i of
    the logical row-major flattening lives at words[i >> 6], position i & 63
    (LSB first). Tail bits are kept at zero.
    """

    __slots__ = ("shape", "words")

    def __init__(self, shape, words):
        shape = tuple(int(d) for d in shape)
        if any(d < 1 for d in shape):
            raise ValueError(f"dimensions must be >= 1, got {shape}")
        n = 1
        for d in shape:
            n *= d
        words = np.ascontiguousarray(words, dtype=np.uint64).ravel()
        expect = (n + _WORD_BITS - 1) // _WORD_BITS
        if words.size != expect:
            raise ValueError(f"need {expect} words for {n} bits, got {words.size}")
        tail = n & 63
        if tail and (words[-1] >> np.uint64(tail)) != 0:
            raise ValueError("tail padding bits must be zero")
        self.shape = shape
        self.words = words

    @property
    def nbits(self):
        n = 1
        for d in self.shape:
            n *= d
        return n

    def bits(self):
        """Logical bits as a uint8 array of 0/1, length nbits."""
        b = np.unpackbits(self.words.view(np.uint8), bitorder="little")
        return b[: self.nbits]

    def reshape(self, shape):
        shape = tuple(int(d) for d in shape)
        n = 1
        for d in shape:
            n *= d
        if n != self.nbits:
            raise ValueError(f"cannot reshape {self.shape} -> {shape}")
        return BitTensor(shape, self.words)

    def __eq__(self, other):
        return (
            isinstance(other, BitTensor)
            and self.shape == other.shape
            and np.array_equal(self.words, other.words)
        )

    def __repr__(self):
        return f"BitTensor(shape={self.shape}, nbits={self.nbits})"

    @staticmethod
    def from_bits(bits, shape):
        """Pack an array of 0/1 values (row-major) into a BitTensor."""
        bits = np.ascontiguousarray(bits, dtype=np.uint8).ravel()
        n = 1
        for d in shape:
            n *= int(d)
        if bits.size != n:
            raise ValueError(f"got {bits.size} bits for shape {tuple(shape)}")
        nwords = (n + _WORD_BITS - 1) // _WORD_BITS
        padded = np.zeros(nwords * _WORD_BITS, dtype=np.uint8)
        padded[:n] = bits
        words = np.packbits(padded, bitorder="little").view(np.uint64)
        return BitTensor(shape, words)


def sign_values(x):
    """Elementwise sign with sign(0) = +1, as float32 +-1.0 values."""
    x = np.asarray(x)
    return np.where(x >= 0, np.float32(1.0), np.float32(-1.0))


def sign_forward(x):
    """Binarize a finite real tensor: +1 where x >= 0, else -1 (packed)."""
    x = as_dense(x)
    return BitTensor.from_bits((x >= 0).reshape(-1), x.shape)


def ste_backward(x, upstream_grad):
    """Straight-through gradient of the sign node.

    Passes the upstream gradient where the pre-binarization activation has
    |x| < 1 (strictly) and zeroes it elsewhere.
    """
    x = np.asarray(x, dtype=np.float32)
    g = np.asarray(upstream_grad, dtype=np.float32)
    if x.shape != g.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {g.shape}")
    return np.where(np.abs(x) < 1.0, g, np.float32(0.0))


def pack(signs):
    """Pack a tensor of exact +-1 values into a BitTensor."""
    x = as_dense(signs)
    if not np.all(np.abs(x) == 1.0):
        raise ValueError("pack() input must contain only +1/-1 values")
    return BitTensor.from_bits((x > 0).reshape(-1), x.shape)


def unpack(b):
    """Expand a BitTensor back to float32 +-1.0 values."""
    if not isinstance(b, BitTensor):
        raise TypeError("unpack() expects a BitTensor")
    out = b.bits().astype(np.float32)
    out = out * 2.0 - 1.0
    return out.reshape(b.shape).astype(np.float32)


def xnor_popcount_dot(a, b):
    """Integer dot product of two +-1 bit vectors of equal logical length.

    Computed as 2 * popcount(XNOR masked to n bits) - n, which equals
    sum(a_i * b_i) under the bit encoding above.
    """
    if not isinstance(a, BitTensor) or not isinstance(b, BitTensor):
        raise TypeError("xnor_popcount_dot() expects BitTensors")
    n = a.nbits
    if n != b.nbits:
        raise ValueError(f"length mismatch: {n} vs {b.nbits}")
    x = np.bitwise_xor(a.words, b.words)
    np.bitwise_not(x, out=x)
    tail = n & 63
    if tail:
        x[-1] &= np.uint64((1 << tail) - 1)
    matches = int(popcount(x).sum())
    return 2 * matches - n
