"""Quantization grids, bit-packing, and the round-to-nearest baseline.

Weight grids are affine: ``value = (code - zero_point) * scale`` with
unsigned codes in ``[0, 2^bits)``.  Groups run along the input-feature
axis (matrix columns), ``group_size`` consecutive weights per group, one
scale/zero-point pair each.  ``bits=16`` is a passthrough that stores the
original values verbatim.

Packed code layout (part of the on-disk model format, bit-exact):
each (row, group) is packed as an independent little-endian bitstream.
Code ``i`` of a group occupies bits ``[i*bits, (i+1)*bits)`` of the
stream; bit ``j`` of the stream is bit ``j % 8`` of byte ``j // 8``.
Groups are padded with zero codes up to the smallest count that fills
whole bytes (multiples of 4/8/2/1 codes for 2/3/4/8 bits); padding is
ignored when unpacking.  Group blocks are concatenated in row-major
order: (row 0, group 0), (row 0, group 1), ..., (row 1, group 0), ...
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import PackFormatError, ShapeError
from .linalg import as_matrix

SCALE_FLOOR = 1e-12
WEIGHT_BITS = (2, 3, 4, 8, 16)
ACT_BITS = (8, 16)

# Codes needed to fill whole bytes for each supported bit width.
_PAD_MULTIPLE = {2: 4, 3: 8, 4: 2, 8: 1}


@dataclass(frozen=True)
class QuantConfig:
    """Bit widths and grouping shared by every quantization method."""

    w_bits: int = 4
    a_bits: int = 16
    group_size: int = 128
    scheme: str = "asymmetric"
    sequential_mode: str = "layer_sequential"

    def __post_init__(self):
        if self.w_bits not in WEIGHT_BITS:
            raise ValueError(f"w_bits must be one of {WEIGHT_BITS}, got {self.w_bits}")
        if self.a_bits not in ACT_BITS:
            raise ValueError(f"a_bits must be one of {ACT_BITS}, got {self.a_bits}")
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        if self.scheme not in ("asymmetric", "symmetric"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.sequential_mode not in ("layer_sequential", "block_sequential"):
            raise ValueError(f"unknown sequential_mode {self.sequential_mode!r}")


@dataclass(frozen=True)
class GroupParams:
    scale: float
    zero_point: int


def fit_group(values, bits: int, scheme: str = "asymmetric") -> GroupParams:
    """Fit an affine grid to one group of values.

    asymmetric: scale = (max - min) / (2^bits - 1), zero_point rounds -min
    onto the grid.  symmetric: scale = max|v| / (2^(bits-1) - 1) with
    zero_point 0.  Scales are floored at 1e-12 so constant groups stay
    well defined.

    The asymmetric range is widened to include zero (lo = min(v, 0),
    hi = max(v, 0)); otherwise the zero_point clamp pins one-sided groups
    to an unreachable grid and constant groups cannot round-trip.
    """
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ValueError("cannot fit a grid to an empty group")
    if not np.all(np.isfinite(v)):
        raise ValueError("group contains non-finite values")
    levels = (1 << bits) - 1
    if scheme == "asymmetric":
        lo = min(float(v.min()), 0.0)
        hi = max(float(v.max()), 0.0)
        scale = max((hi - lo) / levels, SCALE_FLOOR)
        zp = int(np.clip(_round_half_away(-lo / scale), 0, levels))
        return GroupParams(scale=scale, zero_point=zp)
    if scheme == "symmetric":
        scale = max(float(np.max(np.abs(v))) / ((1 << (bits - 1)) - 1), SCALE_FLOOR)
        return GroupParams(scale=scale, zero_point=0)
    raise ValueError(f"unknown scheme {scheme!r}")


def _round_half_away(x):
    """Round half away from zero (numpy rounds half to even)."""
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def quantize_value(x, p: GroupParams, bits: int):
    """Map values onto grid codes: clamp(round(x / scale) + zero_point).

    Accepts scalars or arrays; rounding is half away from zero.
    """
    y = _round_half_away(np.asarray(x, dtype=np.float64) / p.scale) + p.zero_point
    y = np.clip(y, 0, (1 << bits) - 1)
    if np.ndim(x) == 0:
        return int(y)
    return y.astype(np.int64)


def dequantize_codes(codes, p: GroupParams) -> np.ndarray:
    """Scalar grid inverse: (code - zero_point) * scale."""
    return (np.asarray(codes, dtype=np.float64) - p.zero_point) * p.scale


def pack_codes(codes, bits: int) -> bytes:
    """Pack one group's codes into a little-endian bitstream (see module doc)."""
    if bits not in _PAD_MULTIPLE:
        raise ValueError(f"cannot pack {bits}-bit codes")
    c = np.asarray(codes, dtype=np.int64).reshape(-1)
    if c.size and (c.min() < 0 or c.max() >= (1 << bits)):
        raise PackFormatError(f"code out of range for {bits}-bit packing")
    mult = _PAD_MULTIPLE[bits]
    padded = c
    if c.size % mult:
        padded = np.concatenate([c, np.zeros(mult - c.size % mult, dtype=np.int64)])
    # Expand each code to its bits (LSB first), then pack the bitstream.
    shifts = np.arange(bits, dtype=np.int64)
    bit_rows = (padded[:, None] >> shifts[None, :]) & 1
    return np.packbits(bit_rows.astype(np.uint8).reshape(-1), bitorder="little").tobytes()


def unpack_codes(buf: bytes, n_codes: int, bits: int) -> np.ndarray:
    """Inverse of pack_codes; drops the zero-code padding."""
    if bits not in _PAD_MULTIPLE:
        raise ValueError(f"cannot unpack {bits}-bit codes")
    mult = _PAD_MULTIPLE[bits]
    padded_n = n_codes + (-n_codes) % mult
    need = padded_n * bits // 8
    if len(buf) != need:
        raise PackFormatError(f"expected {need} packed bytes, got {len(buf)}")
    stream = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")
    bit_rows = stream[: padded_n * bits].reshape(padded_n, bits).astype(np.int64)
    shifts = np.arange(bits, dtype=np.int64)
    return (bit_rows << shifts[None, :]).sum(axis=1)[:n_codes]


def group_slices(cols: int, group_size: int) -> list[slice]:
    """Column ranges of each group along the input-feature axis."""
    return [slice(j, min(j + group_size, cols)) for j in range(0, cols, group_size)]


@dataclass
class QuantizedTensor:
    """Bit-packed weight matrix plus everything needed to replay it.

    ``codes`` holds the per-group packed blocks, row-major.  ``scales`` and
    ``zero_points`` have one entry per (row, group).  ``outliers`` is a
    sparse (row, col, exact value) list whose positions override the packed
    codes on dequantize.  ``input_scales``, when present, is a per-input-
    channel divisor applied to activations at inference time (the stored
    codes then describe the column-scaled weights), and ``act_bits`` asks
    the consuming layer to fake-quantize its input per token.
    ``bits=16`` keeps the raw values in ``values`` instead of codes.
    """

    rows: int
    cols: int
    bits: int
    group_size: int
    scheme: str = "asymmetric"
    codes: bytes = b""
    scales: Optional[np.ndarray] = None          # (rows, n_groups) float64
    zero_points: Optional[np.ndarray] = None     # (rows, n_groups) int64
    outliers: list = field(default_factory=list)
    input_scales: Optional[np.ndarray] = None    # (cols,) float64
    act_bits: int = 16
    values: Optional[np.ndarray] = None          # passthrough payload

    @property
    def n_groups(self) -> int:
        return (self.cols + self.group_size - 1) // self.group_size

    @property
    def outlier_count(self) -> int:
        return len(self.outliers)

    def group_block_bytes(self, width: int) -> int:
        mult = _PAD_MULTIPLE[self.bits]
        return (width + (-width) % mult) * self.bits // 8

    def unpack_code_matrix(self) -> np.ndarray:
        """All codes as an int64 (rows, cols) matrix."""
        if self.bits == 16:
            raise PackFormatError("passthrough tensors carry no codes")
        slices = group_slices(self.cols, self.group_size)
        out = np.empty((self.rows, self.cols), dtype=np.int64)
        pos = 0
        for r in range(self.rows):
            for s in slices:
                width = s.stop - s.start
                nbytes = self.group_block_bytes(width)
                out[r, s] = unpack_codes(self.codes[pos : pos + nbytes], width, self.bits)
                pos += nbytes
        if pos != len(self.codes):
            raise PackFormatError(
                f"packed payload has {len(self.codes)} bytes, expected {pos}"
            )
        return out

    def dequantize(self) -> np.ndarray:
        """Reconstruct the stored matrix: (code - zero_point) * scale,
        with outlier positions taking their exact stored value."""
        if self.bits == 16:
            return np.array(self.values, dtype=np.float64, copy=True)
        codes = self.unpack_code_matrix()
        out = np.empty((self.rows, self.cols), dtype=np.float64)
        for k, s in enumerate(group_slices(self.cols, self.group_size)):
            out[:, s] = (
                codes[:, s] - self.zero_points[:, k : k + 1]
            ) * self.scales[:, k : k + 1]
        for r, c, v in self.outliers:
            out[r, c] = v
        return out

    def effective_weight(self) -> np.ndarray:
        """Dequantized matrix with any input scaling folded back in.

        This is the matrix a layer effectively multiplies by once the
        per-channel input divisor is accounted for.
        """
        w = self.dequantize()
        if self.input_scales is not None:
            w = w / self.input_scales[None, :]
        return w


def _fit_groups_matrix(w: np.ndarray, bits: int, group_size: int, scheme: str):
    """Vectorized per-(row, group) grid fit; mirrors fit_group exactly."""
    rows, cols = w.shape
    slices = group_slices(cols, group_size)
    scales = np.empty((rows, len(slices)), dtype=np.float64)
    zps = np.zeros((rows, len(slices)), dtype=np.int64)
    levels = (1 << bits) - 1
    for k, s in enumerate(slices):
        block = w[:, s]
        if scheme == "asymmetric":
            lo = np.minimum(block.min(axis=1), 0.0)
            hi = np.maximum(block.max(axis=1), 0.0)
            sc = np.maximum((hi - lo) / levels, SCALE_FLOOR)
            zp = np.clip(_round_half_away(-lo / sc), 0, levels).astype(np.int64)
        else:
            sc = np.maximum(
                np.abs(block).max(axis=1) / ((1 << (bits - 1)) - 1), SCALE_FLOOR
            )
            zp = np.zeros(rows, dtype=np.int64)
        scales[:, k] = sc
        zps[:, k] = zp
    return scales, zps


def _pack_code_matrix(codes: np.ndarray, bits: int, group_size: int) -> bytes:
    rows, cols = codes.shape
    parts = []
    for r in range(rows):
        for s in group_slices(cols, group_size):
            parts.append(pack_codes(codes[r, s], bits))
    return b"".join(parts)


def quantize_matrix(
    w: np.ndarray,
    bits: int,
    group_size: int,
    scheme: str,
    scales: np.ndarray,
    zero_points: np.ndarray,
) -> np.ndarray:
    """Codes for ``w`` under pre-fitted group params (int64 matrix)."""
    rows, cols = w.shape
    codes = np.empty((rows, cols), dtype=np.int64)
    levels = (1 << bits) - 1
    for k, s in enumerate(group_slices(cols, group_size)):
        y = _round_half_away(w[:, s] / scales[:, k : k + 1]) + zero_points[:, k : k + 1]
        codes[:, s] = np.clip(y, 0, levels).astype(np.int64)
    return codes


def passthrough_tensor(w: np.ndarray, act_bits: int = 16) -> QuantizedTensor:
    w = as_matrix(w, "w")
    return QuantizedTensor(
        rows=w.shape[0],
        cols=w.shape[1],
        bits=16,
        group_size=w.shape[1],
        act_bits=act_bits,
        values=w.copy(),
    )


def rtn_quantize(w, cfg: QuantConfig) -> QuantizedTensor:
    """Round-to-nearest per group: the no-compensation baseline."""
    w = as_matrix(w, "w")
    if cfg.w_bits == 16:
        return passthrough_tensor(w, act_bits=cfg.a_bits)
    scales, zps = _fit_groups_matrix(w, cfg.w_bits, cfg.group_size, cfg.scheme)
    codes = quantize_matrix(w, cfg.w_bits, cfg.group_size, cfg.scheme, scales, zps)
    return QuantizedTensor(
        rows=w.shape[0],
        cols=w.shape[1],
        bits=cfg.w_bits,
        group_size=cfg.group_size,
        scheme=cfg.scheme,
        codes=_pack_code_matrix(codes, cfg.w_bits, cfg.group_size),
        scales=scales,
        zero_points=zps,
        act_bits=cfg.a_bits,
    )


def quantize_activations_dynamic(x, a_bits: int) -> np.ndarray:
    """Per-token symmetric fake quantization of an activation matrix.

    Each row is quantized to signed integers in [-(2^(b-1)-1), 2^(b-1)-1]
    with its own absmax scale and immediately dequantized.  ``a_bits=16``
    is the identity.
    """
    if a_bits not in ACT_BITS:
        raise ValueError(f"a_bits must be one of {ACT_BITS}")
    x = as_matrix(x, "x")
    if a_bits == 16:
        return x.copy()
    qmax = (1 << (a_bits - 1)) - 1
    scale = np.maximum(np.abs(x).max(axis=1, keepdims=True) / qmax, SCALE_FLOOR)
    q = np.clip(_round_half_away(x / scale), -qmax, qmax)
    return q * scale
