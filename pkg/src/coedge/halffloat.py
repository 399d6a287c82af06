"""IEEE 754 binary16 conversion with round-to-nearest-even.

The scalar routines are the normative definition (pure integer bit
manipulation on the binary32 pattern); the array routines are a vectorized
fast path for activation payloads and are tested bit-exact against the
scalar path over the whole binary16 domain.

NaN encodes to the canonical quiet pattern 0x7E00. Values beyond the
binary16 range (|x| >= 65520 after rounding) map to signed infinity.
Subnormals are preserved, not flushed.
"""

from __future__ import annotations

import math
import struct

import numpy as np

F16_SIGN = 0x8000
F16_POS_INF = 0x7C00
F16_NEG_INF = 0xFC00
F16_CANONICAL_NAN = 0x7E00
F16_MAX_FINITE = 65504.0


def _round_shift_even(value: int, shift: int) -> int:
    """Right-shift with IEEE round-to-nearest, ties-to-even."""
    if shift <= 0:
        return value << -shift
    floor = value >> shift
    rem = value & ((1 << shift) - 1)
    half = 1 << (shift - 1)
    if rem > half or (rem == half and floor & 1):
        floor += 1
    return floor


def encode_f16(x: float) -> int:
    """binary32 value -> binary16 bit pattern (as an int in [0, 0xFFFF])."""
    (bits32,) = struct.unpack("<I", struct.pack("<f", x))
    sign = (bits32 >> 31) << 15
    exp32 = (bits32 >> 23) & 0xFF
    mant32 = bits32 & 0x7FFFFF

    if exp32 == 0xFF:
        if mant32:
            return F16_CANONICAL_NAN
        return sign | F16_POS_INF

    unbiased = exp32 - 127
    if exp32 == 0:
        # binary32 subnormals are far below the binary16 subnormal range
        return sign

    if unbiased < -14:
        # subnormal (or zero) in binary16: significand unit is 2^-24
        full = 0x800000 | mant32  # 24-bit significand, value = full * 2^(unbiased-23)
        shift = -(unbiased + 1)
        if shift > 40:
            return sign
        mant16 = _round_shift_even(full, shift)
        # mant16 == 0x400 overflows into the smallest normal; the bit layout
        # already encodes that correctly.
        return sign | mant16

    exp16 = unbiased + 15
    combined = (exp16 << 23) | mant32
    rounded = _round_shift_even(combined, 13)
    if rounded >= F16_POS_INF:
        return sign | F16_POS_INF
    return sign | rounded


def decode_f16(bits: int) -> float:
    """binary16 bit pattern -> exact float value (inf/NaN included)."""
    if not (0 <= bits <= 0xFFFF):
        raise ValueError(f"not a 16-bit pattern: {bits}")
    sign = -1.0 if bits & F16_SIGN else 1.0
    exp = (bits >> 10) & 0x1F
    mant = bits & 0x3FF
    if exp == 0x1F:
        if mant:
            return math.nan
        return sign * math.inf
    if exp == 0:
        return sign * mant * 2.0**-24
    return sign * (1.0 + mant / 1024.0) * 2.0 ** (exp - 15)


def encode_f16_array(values: np.ndarray) -> np.ndarray:
    """Vectorized float32 -> binary16 patterns (uint16), canonical NaN."""
    arr = np.asarray(values, dtype=np.float32)
    with np.errstate(over="ignore"):
        bits = arr.astype(np.float16).view(np.uint16)
    nan_mask = np.isnan(arr)
    if nan_mask.any():
        bits = bits.copy()
        bits[nan_mask] = F16_CANONICAL_NAN
    return bits


def decode_f16_array(bits: np.ndarray) -> np.ndarray:
    """Vectorized binary16 patterns (uint16) -> float32."""
    return np.asarray(bits, dtype=np.uint16).view(np.float16).astype(np.float32)


def pack_f16(values: np.ndarray) -> bytes:
    """float32 array -> little-endian binary16 payload bytes."""
    return np.ascontiguousarray(encode_f16_array(values), dtype="<u2").tobytes()


def unpack_f16(payload: bytes) -> np.ndarray:
    if len(payload) % 2:
        raise ValueError("binary16 payload length must be even")
    return decode_f16_array(np.frombuffer(payload, dtype="<u2"))


def pack_f32(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype="<f4").tobytes()


def unpack_f32(payload: bytes) -> np.ndarray:
    if len(payload) % 4:
        raise ValueError("binary32 payload length must be a multiple of 4")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32)
