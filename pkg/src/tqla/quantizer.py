"""Ternary weight quantization.

Pure functions mapping full-precision weight matrices to ternary codes with
per-group scales and thresholds, plus deadzone identification and the
deadzone-sum bias used by the tequila scheme.

Weight matrices are plain 2-D float64 numpy arrays (rows = output channels,
cols = input features). Group statistics are accumulated strictly
left-to-right (``np.add.accumulate``) so that results are bit-identical to a
naive scalar loop over the same elements; the test suite relies on this.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParam, InvalidShape, InvalidThreshold, UnsupportedScheme

PER_TENSOR = "per-tensor"
PER_CHANNEL = "per-channel"
PER_GROUP = "per-group"
GRANULARITY_KINDS = (PER_TENSOR, PER_CHANNEL, PER_GROUP)

DEFAULT_GROUP_SIZE = 128

#: Schemes with fully static (alpha, delta) estimators.
STATIC_SCHEMES = ("absmean", "twn")


@dataclass(frozen=True)
class Granularity:
    """How a weight matrix is partitioned into quantization groups.

    ``per-tensor`` is a single group spanning the whole matrix,
    ``per-channel`` is one group per output row, and ``per-group`` slices
    each row into contiguous blocks of ``group_size`` columns (the last
    block may be short). ``per-channel`` is identical to ``per-group`` with
    ``group_size == cols``.
    """

    kind: str = PER_GROUP
    group_size: int = DEFAULT_GROUP_SIZE

    def __post_init__(self):
        if self.kind not in GRANULARITY_KINDS:
            raise InvalidParam(f"unknown granularity kind: {self.kind!r}")
        if self.kind == PER_GROUP and self.group_size < 1:
            raise InvalidParam(f"group_size must be >= 1, got {self.group_size}")

    def to_dict(self):
        return {"kind": self.kind, "group_size": self.group_size}

    @classmethod
    def from_dict(cls, d):
        return cls(kind=d["kind"], group_size=int(d.get("group_size", DEFAULT_GROUP_SIZE)))


class GroupLayout:
    """A granularity resolved against a concrete matrix shape.

    Groups are numbered row-major: group ``(r, k)`` covers columns
    ``starts[k] : starts[k] + lens[k]`` of row ``r`` and has flat id
    ``r * groups_per_row + k``. The per-tensor case is a single group
    (id 0) spanning the whole matrix.
    """

    def __init__(self, granularity: Granularity, rows: int, cols: int):
        if rows < 1 or cols < 1:
            raise InvalidShape(f"matrix must be at least 1x1, got {rows}x{cols}")
        self.granularity = granularity
        self.rows = rows
        self.cols = cols
        self.spans_matrix = granularity.kind == PER_TENSOR
        if self.spans_matrix:
            self.groups_per_row = 1
            self.starts = np.array([0], dtype=np.int64)
            self.lens = np.array([cols], dtype=np.int64)
            self.n_groups = 1
            return
        if granularity.kind == PER_CHANNEL:
            size = cols
        else:
            size = granularity.group_size
        starts = np.arange(0, cols, size, dtype=np.int64)
        lens = np.minimum(starts + size, cols) - starts
        self.groups_per_row = len(starts)
        self.starts = starts
        self.lens = lens
        self.n_groups = rows * self.groups_per_row

    @property
    def uniform(self) -> bool:
        """True when every column block has the same length."""
        return bool(self.lens.min() == self.lens.max())

    def expand(self, per_group: np.ndarray) -> np.ndarray:
        """Broadcast one value per group to a full (rows, cols) matrix."""
        per_group = np.asarray(per_group)
        if per_group.shape != (self.n_groups,):
            raise InvalidShape(
                f"expected {self.n_groups} per-group values, got shape {per_group.shape}"
            )
        if self.spans_matrix:
            return np.full((self.rows, self.cols), per_group[0])
        table = per_group.reshape(self.rows, self.groups_per_row)
        return np.repeat(table, self.lens, axis=1)

    def reduce_sum(self, elem: np.ndarray) -> np.ndarray:
        """Sum a (rows, cols) matrix over each group; returns (n_groups,)."""
        if elem.shape != (self.rows, self.cols):
            raise InvalidShape(f"expected {(self.rows, self.cols)}, got {elem.shape}")
        if self.spans_matrix:
            return np.array([elem.sum()])
        if self.uniform:
            blocks = elem.reshape(self.rows, self.groups_per_row, self.lens[0])
            return blocks.sum(axis=2).reshape(-1)
        out = np.empty((self.rows, self.groups_per_row))
        for k, (s, n) in enumerate(zip(self.starts, self.lens)):
            out[:, k] = elem[:, s : s + n].sum(axis=1)
        return out.reshape(-1)

    def _seq_group_sums(self, elem: np.ndarray) -> np.ndarray:
        """Left-to-right sequential group sums, matching a scalar loop exactly."""
        if self.spans_matrix:
            flat = elem.reshape(-1)
            return np.add.accumulate(flat)[-1:].copy()
        if self.uniform:
            blocks = elem.reshape(self.rows, self.groups_per_row, self.lens[0])
            return np.add.accumulate(blocks, axis=2)[..., -1].reshape(-1)
        out = np.empty((self.rows, self.groups_per_row))
        for k, (s, n) in enumerate(zip(self.starts, self.lens)):
            out[:, k] = np.add.accumulate(elem[:, s : s + n], axis=1)[:, -1]
        return out.reshape(-1)


@dataclass
class QuantizedTensor:
    """Ternary codes plus one (scale, threshold) pair per group.

    ``codes`` is int8 in {-1, 0, +1}; ``scales`` and ``thresholds`` are
    float64 arrays indexed by flat group id. A group whose scale is zero is
    degenerate: its codes are all zero and it contributes nothing.
    """

    codes: np.ndarray
    scales: np.ndarray
    thresholds: np.ndarray
    granularity: Granularity

    @property
    def rows(self) -> int:
        return self.codes.shape[0]

    @property
    def cols(self) -> int:
        return self.codes.shape[1]

    def layout(self) -> GroupLayout:
        return GroupLayout(self.granularity, self.rows, self.cols)

    def element_scales(self) -> np.ndarray:
        return self.layout().expand(self.scales)

    def element_thresholds(self) -> np.ndarray:
        return self.layout().expand(self.thresholds)

    def to_dict(self):
        return {
            "codes": self.codes.tolist(),
            "scales": self.scales.tolist(),
            "thresholds": self.thresholds.tolist(),
            "granularity": self.granularity.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            codes=np.array(d["codes"], dtype=np.int8),
            scales=np.array(d["scales"], dtype=np.float64),
            thresholds=np.array(d["thresholds"], dtype=np.float64),
            granularity=Granularity.from_dict(d["granularity"]),
        )


@dataclass
class DeadzoneMask:
    """Boolean mask of weights strictly inside the deadzone (|w| < delta)."""

    mask: np.ndarray
    count_per_row: np.ndarray

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "DeadzoneMask":
        return cls(mask=mask, count_per_row=mask.sum(axis=1).astype(np.int64))


def _as_matrix(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1:
        w = w.reshape(1, -1)
    if w.ndim != 2 or w.size == 0:
        raise InvalidShape(f"expected a non-empty 2-D weight matrix, got shape {w.shape}")
    if not np.isfinite(w).all():
        raise InvalidParam("weight matrix contains NaN or Inf")
    return w


def _as_vector(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if w.size == 0:
        raise InvalidShape("expected a non-empty array")
    if not np.isfinite(w).all():
        raise InvalidParam("array contains NaN or Inf")
    return w


def _seq_sum(v: np.ndarray) -> float:
    """Strict left-to-right sum (matches an accumulator loop bit for bit)."""
    return float(np.add.accumulate(v)[-1])


def absmean_params(w) -> tuple[float, float]:
    """Absmean estimator: alpha = mean |w|, delta = alpha / 2."""
    w = _as_vector(w)
    alpha = _seq_sum(np.abs(w)) / w.size
    return alpha, alpha / 2.0


def twn_params(w) -> tuple[float, float]:
    """Threshold-first estimator: delta = 0.75 * mean |w|.

    Alpha is the mean of |w| over the elements at or outside the threshold,
    which minimizes the squared reconstruction error for that fixed delta.
    An empty outside set yields alpha = 0 (degenerate group).
    """
    w = _as_vector(w)
    a = np.abs(w)
    delta = 0.75 * (_seq_sum(a) / w.size)
    keep = a >= delta
    count = int(keep.sum())
    if count == 0:
        return 0.0, delta
    alpha = _seq_sum(np.where(keep, a, 0.0)) / count
    return alpha, delta


def ternarize(w, delta: float) -> np.ndarray:
    """Map weights to codes in {-1, 0, +1} for a single threshold.

    Branches are evaluated top-down: w >= delta -> +1, then |w| < delta -> 0,
    else -1. Values exactly at +-delta therefore quantize to +-1, and at
    delta == 0 a zero weight takes the first branch (+1).
    """
    delta = float(delta)
    if not np.isfinite(delta) or delta < 0:
        raise InvalidThreshold(f"threshold must be finite and >= 0, got {delta}")
    w = np.asarray(w, dtype=np.float64)
    if not np.isfinite(w).all():
        raise InvalidParam("weights contain NaN or Inf")
    return _ternarize_elementwise(w, delta)


def _ternarize_elementwise(w: np.ndarray, delta) -> np.ndarray:
    """Ternarize with a scalar or per-element threshold (no validation)."""
    return np.where(w >= delta, 1, np.where(np.abs(w) < delta, 0, -1)).astype(np.int8)


def _group_params(w: np.ndarray, scheme: str, layout: GroupLayout):
    """Per-group (alpha, delta) arrays for a static scheme."""
    a = np.abs(w)
    totals = layout._seq_group_sums(a)
    if layout.spans_matrix:
        counts = np.array([w.size], dtype=np.float64)
    elif layout.uniform:
        counts = np.full(layout.n_groups, layout.lens[0], dtype=np.float64)
    else:
        counts = np.tile(layout.lens.astype(np.float64), layout.rows)
    means = totals / counts
    if scheme == "absmean":
        return means, means / 2.0
    # twn: threshold first, then the mean of |w| over the kept elements
    deltas = 0.75 * means
    keep = a >= layout.expand(deltas)
    kept_totals = layout._seq_group_sums(np.where(keep, a, 0.0))
    if layout.spans_matrix:
        kept_counts = np.array([keep.sum()], dtype=np.float64)
    else:
        kept_counts = layout.reduce_sum(keep.astype(np.float64))
    alphas = np.divide(
        kept_totals, kept_counts, out=np.zeros_like(kept_totals), where=kept_counts > 0
    )
    return alphas, deltas


def quantize(w, scheme: str, granularity: Granularity) -> QuantizedTensor:
    """Quantize a weight matrix group-wise under a static scheme.

    Each group's (alpha, delta) comes from the scheme estimator, codes from
    the top-down ternarizer. Groups with alpha == 0 are forced to all-zero
    codes so the representation stays canonical.
    """
    if scheme not in STATIC_SCHEMES:
        raise UnsupportedScheme(
            f"unknown scheme {scheme!r}; static schemes are {STATIC_SCHEMES}"
        )
    w = _as_matrix(w)
    layout = GroupLayout(granularity, *w.shape)
    alphas, deltas = _group_params(w, scheme, layout)
    codes = _ternarize_elementwise(w, layout.expand(deltas))
    degenerate = layout.expand(alphas) == 0.0
    if degenerate.any():
        codes = np.where(degenerate, np.int8(0), codes)
    return QuantizedTensor(codes=codes, scales=alphas, thresholds=deltas, granularity=granularity)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """Reconstruct the quantized weights: element = code * group scale."""
    return q.codes.astype(np.float64) * q.element_scales()


def deadzone_mask(w, q: QuantizedTensor) -> DeadzoneMask:
    """Mask of elements with |w| strictly below their group threshold."""
    w = _as_matrix(w)
    if w.shape != q.codes.shape:
        raise InvalidShape(f"weights {w.shape} do not match codes {q.codes.shape}")
    mask = np.abs(w) < q.element_thresholds()
    return DeadzoneMask.from_mask(mask)


def tequila_bias(w, mask: DeadzoneMask, lam: float) -> np.ndarray:
    """Per-row deadzone bias: values[r] = lam * sum of deadzone weights in row r."""
    w = _as_matrix(w)
    if w.shape != mask.mask.shape:
        raise InvalidShape(f"weights {w.shape} do not match mask {mask.mask.shape}")
    lam = float(lam)
    if not np.isfinite(lam):
        raise InvalidParam(f"lambda must be finite, got {lam}")
    masked = np.where(mask.mask, w, 0.0)
    row_sums = np.add.accumulate(masked, axis=1)[:, -1]
    return lam * row_sums
