"""Reduced floating-point formats emulated on float64 carriers.

Values always travel through the interpreter as float64; a format only
defines the rounding and range behaviour applied at operation
boundaries.  ``round_to_format`` implements round-to-nearest-even at the
format's mantissa width, gradual underflow below its normal range, and
overflow to +-inf past its largest finite value.  NaN is preserved and
fp64 is the identity, so a float64 value is always a faithful carrier
for any narrower format.

The tf32 entry models a 19-bit tensor format: 8 exponent bits, 10
mantissa bits, stored in a 4-byte word.  Its arithmetic therefore
rounds like a 10-bit-mantissa format while its memory footprint matches
fp32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "PrecisionFormat",
    "FP16",
    "TF32",
    "FP32",
    "FP64",
    "FORMATS",
    "FORMAT_ORDER",
    "round_to_format",
    "bytes_of",
]


@dataclass(frozen=True)
class PrecisionFormat:
    """One member of the candidate format set.

    Formats are totally ordered by width: fp16 < tf32 < fp32 < fp64.
    The order is the index into ``FORMAT_ORDER``, exposed as ``level``.
    """

    name: str
    exponent_bits: int
    mantissa_bits: int
    storage_bytes: int

    @property
    def max_exponent(self) -> int:
        return 2 ** (self.exponent_bits - 1) - 1

    @property
    def min_exponent(self) -> int:
        # Unbiased exponent of the smallest normal value (1.m * 2^e form).
        return 2 - 2 ** (self.exponent_bits - 1)

    @property
    def max_finite(self) -> float:
        return float((2.0 - 2.0 ** -self.mantissa_bits) * 2.0 ** self.max_exponent)

    @property
    def smallest_subnormal(self) -> float:
        return float(2.0 ** (self.min_exponent - self.mantissa_bits))

    @property
    def level(self) -> int:
        return FORMAT_ORDER.index(self.name)

    def __lt__(self, other: "PrecisionFormat") -> bool:
        return self.level < other.level

    def __le__(self, other: "PrecisionFormat") -> bool:
        return self.level <= other.level

    def __repr__(self) -> str:  # pragma: no cover - cosmetic
        return f"PrecisionFormat({self.name})"


FP16 = PrecisionFormat("fp16", exponent_bits=5, mantissa_bits=10, storage_bytes=2)
TF32 = PrecisionFormat("tf32", exponent_bits=8, mantissa_bits=10, storage_bytes=4)
FP32 = PrecisionFormat("fp32", exponent_bits=8, mantissa_bits=23, storage_bytes=4)
FP64 = PrecisionFormat("fp64", exponent_bits=11, mantissa_bits=52, storage_bytes=8)

FORMAT_ORDER = ("fp16", "tf32", "fp32", "fp64")
FORMATS = {f.name: f for f in (FP16, TF32, FP32, FP64)}


def round_to_format(x, fmt: PrecisionFormat):
    """Round float64 value(s) to ``fmt`` and return them as float64.

    Rounding is round-to-nearest, ties to even, applied at the format's
    mantissa width.  Magnitudes that round past ``fmt.max_finite`` become
    +-inf; values below the normal range underflow gradually through the
    format's subnormal grid down to (signed) zero.  NaN passes through
    unchanged, as do +-inf.  Idempotent: rounding a rounded value is the
    identity.

    Scalars in give a Python float back; arrays give a float64 array.
    """
    if not isinstance(fmt, PrecisionFormat):
        raise TypeError(f"fmt must be a PrecisionFormat, got {type(fmt).__name__}")
    arr = np.asarray(x, dtype=np.float64)
    if fmt.name == "fp64":
        out = arr
    else:
        with np.errstate(all="ignore"):
            _, e = np.frexp(arr)
            # ulp exponent: 2^(E - p) for normals with 1.m exponent E,
            # clamped at the subnormal grid 2^(emin - p).
            k = np.maximum(e - 1, fmt.min_exponent) - fmt.mantissa_bits
            k = k.astype(np.int64, copy=False)
            y = np.ldexp(np.rint(np.ldexp(arr, -k)), k)
            out = np.where(np.abs(y) > fmt.max_finite, np.copysign(np.inf, arr), y)
    if np.ndim(x) == 0 and not isinstance(x, np.ndarray):
        return float(out)
    return out


def bytes_of(shape, fmt: PrecisionFormat) -> int:
    """Storage bytes of a tensor of ``shape`` held at ``fmt``.

    An empty shape is a scalar (one element).  The count is computed in
    unbounded integers and refuses to exceed a signed 64-bit range so an
    absurd shape is a loud error instead of a silent wraparound.
    """
    total = 1
    for extent in shape:
        if int(extent) != extent or extent < 1:
            raise ValueError(f"shape extents must be positive integers, got {shape!r}")
        total *= int(extent)
    total *= fmt.storage_bytes
    if total > 2**63 - 1:
        raise OverflowError(
            f"byte count {total} for shape {tuple(shape)!r} at {fmt.name} exceeds int64"
        )
    return total
