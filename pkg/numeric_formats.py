#!/usr/bin/env python3
"""
Bit-level codecs: software binary16 conversion and signed int4 nibble packing.

The f16 routines follow the classic halffloat bit manipulation (sign, 5-bit
exponent, 10-bit mantissa) vectorized over numpy arrays, with
round-to-nearest-even and overflow to infinity.
"""

import numpy as np

F16_MAX = 65504.0


def float32_to_float16_bits(x) -> np.ndarray:
    """Convert f32 values to binary16 bit patterns (uint16), RNE"""
    f = np.ascontiguousarray(np.asarray(x, dtype=np.float32))
    u = f.view(np.uint32).astype(np.int64)

    sign = (u >> 16) & 0x8000
    f_exp = (u >> 23) & 0xFF
    f_sig = u & 0x007FFFFF
    h_exp = f_exp - 127 + 15

    # Normal range: keep top 10 mantissa bits, round on the 13 dropped bits.
    # A carry out of the mantissa bumps the exponent, which is the right answer.
    normal = (h_exp << 10) | (f_sig >> 13)
    rem = f_sig & 0x1FFF
    round_up = (rem > 0x1000) | ((rem == 0x1000) & ((normal & 1) == 1))
    normal = normal + round_up
    normal = np.where(h_exp >= 31, 0x7C00, normal)
    normal = np.minimum(normal, 0x7C00)

    # Subnormal / underflow: shift the full significand into 2^-24 units
    shift = np.clip(14 - h_exp, 1, 40)
    full_sig = f_sig | 0x00800000
    sub = full_sig >> shift
    sub_rem = full_sig & ((np.int64(1) << shift) - 1)
    half = np.int64(1) << (shift - 1)
    sub_up = (sub_rem > half) | ((sub_rem == half) & ((sub & 1) == 1))
    sub = np.where(shift > 25, 0, sub + sub_up)

    bits = np.where(h_exp <= 0, sub, normal)
    bits = np.where(f_exp == 0, 0, bits)  # f32 zeros and denormals flush to signed zero

    is_nan = (f_exp == 0xFF) & (f_sig != 0)
    is_inf = (f_exp == 0xFF) & (f_sig == 0)
    bits = np.where(is_inf, 0x7C00, bits)
    bits = np.where(is_nan, 0x7E00, bits)

    return (bits | sign).astype(np.uint16)


def float16_bits_to_float32(bits) -> np.ndarray:
    """Widen binary16 bit patterns (uint16) to f32 exactly"""
    b = np.asarray(bits, dtype=np.uint16).astype(np.int64)
    sign = np.where((b & 0x8000) != 0, -1.0, 1.0)
    h_exp = (b >> 10) & 0x1F
    h_sig = b & 0x03FF

    subnormal = np.ldexp(h_sig.astype(np.float64), -24)
    normal = np.ldexp((h_sig | 0x0400).astype(np.float64), (h_exp - 25).astype(np.int32))
    special = np.where(h_sig == 0, np.inf, np.nan)

    mag = np.where(h_exp == 0, subnormal, np.where(h_exp == 31, special, normal))
    return (sign * mag).astype(np.float32)


def round_to_float16(x) -> np.ndarray:
    """f32 -> f16 -> f32 in software"""
    return float16_bits_to_float32(float32_to_float16_bits(x))


def int4_row_bytes(row_len: int) -> int:
    return (int(row_len) + 1) // 2


def pack_int4(values) -> np.ndarray:
    """Pack signed int4 values along the innermost axis, low nibble first.

    Each innermost row is padded to a whole number of bytes.
    """
    v = np.asarray(values)
    if v.size and (v.min() < -8 or v.max() > 7):
        raise ValueError("int4 values must lie in [-8, 7]")
    if v.ndim == 0:
        v = v.reshape(1)
    row_len = v.shape[-1]
    if row_len % 2:
        pad = [(0, 0)] * (v.ndim - 1) + [(0, 1)]
        v = np.pad(v, pad)
    nibbles = (v.astype(np.int16) & 0x0F).astype(np.uint8)
    return (nibbles[..., 0::2] | (nibbles[..., 1::2] << 4)).astype(np.uint8)


def unpack_int4(packed, row_len: int) -> np.ndarray:
    """Inverse of pack_int4: sign-extend nibbles back to int8"""
    p = np.asarray(packed, dtype=np.uint8)
    lo = (p & 0x0F).astype(np.int8)
    hi = (p >> 4).astype(np.int8)
    out = np.empty(p.shape[:-1] + (p.shape[-1] * 2,), dtype=np.int8)
    out[..., 0::2] = lo
    out[..., 1::2] = hi
    out = np.where(out > 7, out - 16, out).astype(np.int8)
    return out[..., :row_len]
