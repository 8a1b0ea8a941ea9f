"""Offline packing of ternary weights for deployment.

Every three ternary weights form a triple encoded as a 4-bit index into a
canonical table of 14 patterns plus one sign bit. The 26 nonzero triples
split into 13 pairs related by negation; the canonical table keeps the
member whose first nonzero element is +1, plus the all-zero triple, in
lexicographic order (-1 < 0 < +1), which puts the zero pattern at index 0:

    0:(0,0,0)   1:(0,0,+)   2:(0,+,-)   3:(0,+,0)   4:(0,+,+)
    5:(+,-,-)   6:(+,-,0)   7:(+,-,+)   8:(+,0,-)   9:(+,0,0)
   10:(+,0,+)  11:(+,+,-)  12:(+,+,0)  13:(+,+,+)

Indices 14 and 15 are invalid and rejected when reading a file.

On-disk "TQLA" layout (all little-endian):

    magic "TQLA" | version u32 | lambda f32 | n_layers u32
    per layer:
      rows u32 | cols u32 (pre-padding) | group_size u32 (0 = per-tensor)
      indices: ceil(rows*S/2) bytes, two 4-bit codes per byte, low nibble
               first, row-major over S = ceil(cols/3) triples per row
      signs:   ceil(rows*S/8) bytes, bit k%8 of byte k/8, set bit = negative
      scales:  f32 per group (1 for per-tensor, rows*ceil(cols/group_size)
               otherwise, row-major)
      bias:    f32 per row (the frozen deadzone bias)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InvalidCode, InvalidParam, InvalidShape
from .quantizer import (
    PER_TENSOR,
    DeadzoneMask,
    Granularity,
    QuantizedTensor,
    tequila_bias,
)

MAGIC = b"TQLA"
FORMAT_VERSION = 1
N_PATTERNS = 14


def _build_patterns() -> np.ndarray:
    pats = [(0, 0, 0)]
    for a in (-1, 0, 1):
        for b in (-1, 0, 1):
            for c in (-1, 0, 1):
                t = (a, b, c)
                first = next((v for v in t if v != 0), 0)
                if first == 1:
                    pats.append(t)
    pats = [pats[0]] + sorted(pats[1:])
    return np.array(pats, dtype=np.int8)


PATTERNS = _build_patterns()

# key = 9*(a+1) + 3*(b+1) + (c+1) for any triple -> (index, sign)
_KEY_TO_INDEX = np.zeros(27, dtype=np.uint8)
_KEY_TO_SIGN = np.zeros(27, dtype=np.int8)
for _i, _p in enumerate(PATTERNS):
    for _s in (1, -1):
        _t = _s * _p
        _key = 9 * (_t[0] + 1) + 3 * (_t[1] + 1) + (_t[2] + 1)
        _KEY_TO_INDEX[_key] = _i
        _KEY_TO_SIGN[_key] = _s
_KEY_TO_SIGN[9 * 1 + 3 * 1 + 1] = 1  # zero triple is canonically positive


@dataclass(frozen=True)
class TripleCode:
    """4-bit pattern index plus sign; index 0 is the zero pattern, sign +1."""

    index: int
    sign: int

    def __post_init__(self):
        if not 0 <= self.index < N_PATTERNS:
            raise InvalidCode(f"index must be in [0, {N_PATTERNS}), got {self.index}")
        if self.sign not in (-1, 1):
            raise InvalidCode(f"sign must be +1 or -1, got {self.sign}")
        if self.index == 0 and self.sign != 1:
            raise InvalidCode("the zero pattern always carries sign +1")


def canonical_code(triple) -> TripleCode:
    """Encode three ternary values as (canonical index, sign)."""
    t = np.asarray(triple)
    if t.shape != (3,):
        raise InvalidCode(f"expected 3 elements, got shape {t.shape}")
    if not np.isin(t, (-1, 0, 1)).all():
        raise InvalidCode(f"elements must be in {{-1, 0, +1}}, got {t.tolist()}")
    key = 9 * (int(t[0]) + 1) + 3 * (int(t[1]) + 1) + (int(t[2]) + 1)
    return TripleCode(index=int(_KEY_TO_INDEX[key]), sign=int(_KEY_TO_SIGN[key]))


def decode(code: TripleCode) -> np.ndarray:
    """Invert canonical_code: sign times the canonical pattern."""
    if not 0 <= code.index < N_PATTERNS:
        raise InvalidCode(f"index must be in [0, {N_PATTERNS}), got {code.index}")
    return (code.sign * PATTERNS[code.index]).astype(np.int8)


def _encode_matrix(codes: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    """Vectorized triple encoding of a (rows, cols) code matrix.

    Returns (indices (rows, S) uint8, signs (rows, S) int8, padded_cols).
    """
    rows, cols = codes.shape
    n_triples = -(-cols // 3)
    padded = 3 * n_triples
    full = np.zeros((rows, padded), dtype=np.int8)
    full[:, :cols] = codes
    t = full.reshape(rows, n_triples, 3).astype(np.int64)
    keys = 9 * (t[:, :, 0] + 1) + 3 * (t[:, :, 1] + 1) + (t[:, :, 2] + 1)
    return _KEY_TO_INDEX[keys], _KEY_TO_SIGN[keys], padded


@dataclass
class PackedLayer:
    """One layer in deployment form: packed codes, scales, frozen bias."""

    rows: int
    cols: int
    group_size: int  # 0 encodes per-tensor granularity
    index_bytes: np.ndarray  # uint8, two 4-bit codes each
    sign_bytes: np.ndarray  # uint8, one bit per triple
    scales: np.ndarray  # float32, one per group
    bias: np.ndarray  # float32, one per row

    @property
    def n_triples_per_row(self) -> int:
        return -(-self.cols // 3)

    @property
    def padded_cols(self) -> int:
        return 3 * self.n_triples_per_row

    @property
    def groups_per_row(self) -> int:
        if self.group_size == 0:
            return 1
        return -(-self.cols // self.group_size)

    @property
    def n_scales(self) -> int:
        if self.group_size == 0:
            return 1
        return self.rows * self.groups_per_row

    def granularity(self) -> Granularity:
        if self.group_size == 0:
            return Granularity(kind=PER_TENSOR)
        return Granularity(kind="per-group", group_size=self.group_size)

    def unpack_indices(self) -> tuple[np.ndarray, np.ndarray]:
        """(indices (rows, S) uint8, signs (rows, S) int8 in {+1, -1})."""
        n = self.rows * self.n_triples_per_row
        low = self.index_bytes & 0x0F
        high = self.index_bytes >> 4
        nibbles = np.empty(self.index_bytes.size * 2, dtype=np.uint8)
        nibbles[0::2] = low
        nibbles[1::2] = high
        idx = nibbles[:n].reshape(self.rows, self.n_triples_per_row)
        bits = np.unpackbits(self.sign_bytes, bitorder="little")[:n]
        signs = np.where(bits == 1, -1, 1).astype(np.int8)
        return idx, signs.reshape(self.rows, self.n_triples_per_row)

    def unpack_codes(self) -> np.ndarray:
        """Ternary codes (rows, padded_cols), padding columns included."""
        idx, signs = self.unpack_indices()
        pats = PATTERNS[idx]  # (rows, S, 3)
        out = np.where(signs[:, :, None] < 0, -pats, pats)
        return out.reshape(self.rows, self.padded_cols)


@dataclass
class PackedModel:
    """A stack of packed layers plus the reactivation strength they froze."""

    lam: float
    layers: list
    version: int = FORMAT_VERSION


def _granularity_to_group_size(granularity: Granularity, cols: int) -> int:
    if granularity.kind == PER_TENSOR:
        return 0
    if granularity.kind == "per-channel":
        return cols
    return granularity.group_size


def _pack_codes(idx: np.ndarray, signs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flat = idx.reshape(-1)
    if flat.size % 2:
        flat = np.append(flat, np.uint8(0))
    index_bytes = (flat[0::2] | (flat[1::2] << 4)).astype(np.uint8)
    sign_bits = (signs.reshape(-1) < 0).astype(np.uint8)
    sign_bytes = np.packbits(sign_bits, bitorder="little")
    return index_bytes, sign_bytes


def _pack_layer(q: QuantizedTensor, bias: np.ndarray) -> PackedLayer:
    bias = np.asarray(bias, dtype=np.float64)
    if bias.shape != (q.rows,):
        raise InvalidShape(f"bias shape {bias.shape} does not match rows {q.rows}")
    idx, signs, _ = _encode_matrix(q.codes)
    index_bytes, sign_bytes = _pack_codes(idx, signs)
    return PackedLayer(
        rows=q.rows,
        cols=q.cols,
        group_size=_granularity_to_group_size(q.granularity, q.cols),
        index_bytes=index_bytes,
        sign_bytes=sign_bytes,
        scales=q.scales.astype(np.float32),
        bias=bias.astype(np.float32),
    )


def pack_model(layers, lam: float) -> PackedModel:
    """Pack (QuantizedTensor, shadow weights, DeadzoneMask) triples.

    The per-row bias is the deadzone sum of the final shadow weights scaled
    by ``lam``, frozen here for inference. Codes are padded to a multiple
    of three columns with zeros; packing is lossless for codes and within
    float32 rounding for scales and biases.
    """
    lam = float(lam)
    if not np.isfinite(lam):
        raise InvalidParam(f"lambda must be finite, got {lam}")
    packed = []
    for q, shadow, mask in layers:
        shadow = np.asarray(shadow, dtype=np.float64)
        if shadow.shape != q.codes.shape:
            raise InvalidShape(
                f"shadow weights {shadow.shape} do not match codes {q.codes.shape}"
            )
        if not isinstance(mask, DeadzoneMask) or mask.mask.shape != shadow.shape:
            raise InvalidShape("deadzone mask does not match layer shape")
        bias = tequila_bias(shadow, mask, lam)
        packed.append(_pack_layer(q, bias))
    return PackedModel(lam=lam, layers=packed)


_HEADER = struct.Struct("<4sIfI")
_LAYER_HEADER = struct.Struct("<III")


def write_packed(model: PackedModel, path) -> None:
    """Serialize to the TQLA binary layout; identical models give identical bytes."""
    blob = bytearray()
    blob += _HEADER.pack(MAGIC, model.version, np.float32(model.lam), len(model.layers))
    for layer in model.layers:
        blob += _LAYER_HEADER.pack(layer.rows, layer.cols, layer.group_size)
        blob += layer.index_bytes.tobytes()
        blob += layer.sign_bytes.tobytes()
        blob += layer.scales.astype("<f4").tobytes()
        blob += layer.bias.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def _take(blob: bytes, offset: int, count: int, what: str) -> tuple[bytes, int]:
    if offset + count > len(blob):
        raise FormatError(f"file truncated while reading {what}", offset=offset)
    return blob[offset : offset + count], offset + count


def read_packed(path) -> PackedModel:
    """Parse and validate a TQLA file; malformed input raises FormatError."""
    with open(path, "rb") as fh:
        blob = fh.read()
    raw, offset = _take(blob, 0, _HEADER.size, "header")
    magic, version, lam, n_layers = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", offset=4)
    layers = []
    for _ in range(n_layers):
        raw, offset = _take(blob, offset, _LAYER_HEADER.size, "layer header")
        rows, cols, group_size = _LAYER_HEADER.unpack(raw)
        if rows < 1 or cols < 1:
            raise FormatError(
                f"layer shape must be at least 1x1, got {rows}x{cols}",
                offset=offset - _LAYER_HEADER.size,
            )
        n_triples = rows * (-(-cols // 3))
        idx_offset = offset
        raw, offset = _take(blob, offset, (n_triples + 1) // 2, "packed indices")
        index_bytes = np.frombuffer(raw, dtype=np.uint8)
        _validate_indices(index_bytes, n_triples, idx_offset)
        raw, offset = _take(blob, offset, (n_triples + 7) // 8, "packed signs")
        sign_bytes = np.frombuffer(raw, dtype=np.uint8)
        if group_size == 0:
            n_scales = 1
        else:
            n_scales = rows * (-(-cols // group_size))
        raw, offset = _take(blob, offset, 4 * n_scales, "scales")
        scales = np.frombuffer(raw, dtype="<f4")
        raw, offset = _take(blob, offset, 4 * rows, "bias")
        bias = np.frombuffer(raw, dtype="<f4")
        layers.append(
            PackedLayer(
                rows=rows,
                cols=cols,
                group_size=group_size,
                index_bytes=index_bytes.copy(),
                sign_bytes=sign_bytes.copy(),
                scales=scales.astype(np.float32),
                bias=bias.astype(np.float32),
            )
        )
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes", offset=offset)
    return PackedModel(lam=float(lam), layers=layers, version=version)


def _validate_indices(index_bytes: np.ndarray, n_triples: int, base_offset: int) -> None:
    low = index_bytes & 0x0F
    high = index_bytes >> 4
    nibbles = np.empty(index_bytes.size * 2, dtype=np.uint8)
    nibbles[0::2] = low
    nibbles[1::2] = high
    bad = np.flatnonzero(nibbles[:n_triples] >= N_PATTERNS)
    if bad.size:
        k = int(bad[0])
        raise FormatError(
            f"invalid pattern index {int(nibbles[k])}",
            offset=base_offset + k // 2,
        )
    if n_triples % 2 and index_bytes.size and nibbles[n_triples] != 0:
        raise FormatError(
            "nonzero padding nibble", offset=base_offset + n_triples // 2
        )
