"""Deadzone-trapping diagnostics.

Quantifies how weights behave around the quantization deadzone during
training: occupancy of the deadzone, mass accumulated near its boundary,
and how often ternary codes flip between snapshots. Snapshot rows export
to CSV (one row per snapshot) and JSON (full histograms); both round-trip
losslessly.
"""

from __future__ import annotations

import csv
import json
import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateNormalization,
    InsufficientHistory,
    InvalidParam,
    InvalidShape,
    IoError,
)
from .quantizer import QuantizedTensor, _as_matrix

DEFAULT_BAND = 0.1
DEFAULT_BINS = 120
DEFAULT_HISTORY_WINDOW = 8
DEFAULT_SNAPSHOT_EVERY = 50
HISTOGRAM_RANGE = 3.0  # in units of the group threshold

CSV_COLUMNS = ("step", "loss", "deadzone_fraction", "boundary_fraction", "mean_flip_rate")


@dataclass
class Histogram:
    """Counts of threshold-normalized weights; end bins absorb overflow."""

    bin_edges: np.ndarray
    counts: np.ndarray
    normalized: bool = True  # False after the all-zero-threshold fallback

    def to_dict(self):
        return {
            "bin_edges": self.bin_edges.tolist(),
            "counts": self.counts.tolist(),
            "normalized": self.normalized,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            bin_edges=np.array(d["bin_edges"], dtype=np.float64),
            counts=np.array(d["counts"], dtype=np.int64),
            normalized=bool(d["normalized"]),
        )


@dataclass
class TrapReport:
    """One diagnostic snapshot of a training run."""

    step: int
    loss: float
    deadzone_fraction: float
    boundary_fraction: float
    mean_flip_rate: float
    histogram: Histogram

    def to_dict(self):
        return {
            "step": self.step,
            "loss": self.loss,
            "deadzone_fraction": self.deadzone_fraction,
            "boundary_fraction": self.boundary_fraction,
            "mean_flip_rate": self.mean_flip_rate,
            "histogram": self.histogram.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            step=int(d["step"]),
            loss=float(d["loss"]),
            deadzone_fraction=float(d["deadzone_fraction"]),
            boundary_fraction=float(d["boundary_fraction"]),
            mean_flip_rate=float(d["mean_flip_rate"]),
            histogram=Histogram.from_dict(d["histogram"]),
        )


@dataclass
class CodeHistory:
    """Ring buffer of ternary code snapshots for the monitored layers."""

    window: int = DEFAULT_HISTORY_WINDOW
    _snaps: deque = field(default_factory=deque, repr=False)

    def __post_init__(self):
        if self.window < 2:
            raise InvalidParam(f"history window must be >= 2, got {self.window}")
        self._snaps = deque(self._snaps, maxlen=self.window)

    def push(self, codes_per_layer):
        snap = [np.asarray(c, dtype=np.int8).copy() for c in codes_per_layer]
        if self._snaps:
            prev = self._snaps[-1]
            if len(prev) != len(snap) or any(a.shape != b.shape for a, b in zip(prev, snap)):
                raise InvalidShape("snapshot shapes differ from history")
        self._snaps.append(snap)

    def __len__(self):
        return len(self._snaps)


def _check_pair(w, q: QuantizedTensor):
    w = _as_matrix(w)
    if w.shape != q.codes.shape:
        raise InvalidShape(f"weights {w.shape} do not match codes {q.codes.shape}")
    return w


def deadzone_fraction(w, q: QuantizedTensor) -> float:
    """Share of weights strictly inside the deadzone of their group."""
    w = _check_pair(w, q)
    inside = np.abs(w) < q.element_thresholds()
    return float(inside.sum()) / w.size


def boundary_fraction(w, q: QuantizedTensor, band: float = DEFAULT_BAND) -> float:
    """Share of weights with |w| within a relative band of the threshold."""
    band = float(band)
    if not 0.0 < band < 1.0:
        raise InvalidParam(f"band must be in (0, 1), got {band}")
    w = _check_pair(w, q)
    a = np.abs(w)
    thr = q.element_thresholds()
    near = (a >= (1.0 - band) * thr) & (a <= (1.0 + band) * thr)
    return float(near.sum()) / w.size


def flip_rate(history: CodeHistory) -> float:
    """Mean per-weight frequency of code changes between adjacent snapshots."""
    snaps = list(history._snaps)
    if len(snaps) < 2:
        raise InsufficientHistory(f"need at least 2 snapshots, have {len(snaps)}")
    total_weights = sum(c.size for c in snaps[0])
    flips = 0
    for prev, cur in zip(snaps, snaps[1:]):
        for a, b in zip(prev, cur):
            flips += int((a != b).sum())
    return flips / ((len(snaps) - 1) * total_weights)


def _normalized_values(w: np.ndarray, thr: np.ndarray) -> np.ndarray:
    """w / threshold with zero-threshold elements mapped to 0 or +-inf."""
    out = np.zeros_like(w)
    nonzero = thr > 0
    np.divide(w, thr, out=out, where=nonzero)
    zero_thr = ~nonzero & (w != 0)
    out[zero_thr] = np.sign(w[zero_thr]) * np.inf
    return out


def weight_histogram(w, q: QuantizedTensor, bins: int = DEFAULT_BINS) -> Histogram:
    """Histogram of w / threshold over [-3, 3]; end bins absorb overflow.

    If every threshold is zero the normalization is degenerate: the raw
    weight values are binned instead and the result is flagged.
    """
    if bins < 2:
        raise InvalidParam(f"need at least 2 bins, got {bins}")
    w = _check_pair(w, q)
    thr = q.element_thresholds()
    if (thr == 0).all():
        warnings.warn(
            "all thresholds are zero; histogram uses raw weight values",
            DegenerateNormalization,
        )
        values = w
        normalized = False
    else:
        values = _normalized_values(w, thr)
        normalized = True
    edges = np.linspace(-HISTOGRAM_RANGE, HISTOGRAM_RANGE, bins + 1)
    clipped = np.clip(values, -HISTOGRAM_RANGE, HISTOGRAM_RANGE)
    idx = np.searchsorted(edges, clipped, side="right") - 1
    idx = np.clip(idx, 0, bins - 1)
    counts = np.bincount(idx.reshape(-1), minlength=bins).astype(np.int64)
    return Histogram(bin_edges=edges, counts=counts, normalized=normalized)


def _merge_histograms(parts: list[Histogram]) -> Histogram:
    merged = parts[0]
    for h in parts[1:]:
        merged = Histogram(
            bin_edges=merged.bin_edges,
            counts=merged.counts + h.counts,
            normalized=merged.normalized and h.normalized,
        )
    return merged


def take_snapshot(
    step: int,
    loss: float,
    pairs,
    history: CodeHistory | None = None,
    band: float = DEFAULT_BAND,
    bins: int = DEFAULT_BINS,
) -> TrapReport:
    """Aggregate trap metrics over (weights, quantized) pairs for one step.

    Pushes the current codes into ``history`` first; the flip rate is 0.0
    until the history holds a second snapshot.
    """
    pairs = list(pairs)
    if not pairs:
        raise InvalidParam("need at least one (weights, quantized) pair")
    total = sum(np.asarray(w).size for w, _ in pairs)
    dead = sum(deadzone_fraction(w, q) * np.asarray(w).size for w, q in pairs)
    near = sum(boundary_fraction(w, q, band) * np.asarray(w).size for w, q in pairs)
    all_degenerate = all((q.element_thresholds() == 0).all() for _, q in pairs)
    with warnings.catch_warnings():
        if all_degenerate:
            warnings.simplefilter("ignore", DegenerateNormalization)
        hist = _merge_histograms([weight_histogram(w, q, bins) for w, q in pairs])
    rate = 0.0
    if history is not None:
        history.push([q.codes for _, q in pairs])
        if len(history) >= 2:
            rate = flip_rate(history)
    return TrapReport(
        step=step,
        loss=float(loss),
        deadzone_fraction=dead / total,
        boundary_fraction=near / total,
        mean_flip_rate=rate,
        histogram=hist,
    )


def _fmt(value) -> str:
    """Shortest lossless decimal text for a float."""
    return repr(float(value))


def export_report(reports, base_path) -> tuple[str, str]:
    """Write snapshots to ``<base>.csv`` (metrics) and ``<base>.json`` (full).

    Returns the two paths. Both files round-trip through ``load_report``.
    """
    reports = list(reports)
    if not reports:
        raise InvalidParam("cannot export an empty report sequence")
    base = str(base_path)
    csv_path = base + ".csv"
    json_path = base + ".json"
    try:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for r in reports:
                writer.writerow(
                    [
                        r.step,
                        _fmt(r.loss),
                        _fmt(r.deadzone_fraction),
                        _fmt(r.boundary_fraction),
                        _fmt(r.mean_flip_rate),
                    ]
                )
        payload = {"schema_version": 1, "reports": [r.to_dict() for r in reports]}
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"failed to write report files at {base!r}: {exc}") from exc
    return csv_path, json_path


def load_report(base_path) -> list[TrapReport]:
    """Read back a report pair written by ``export_report``."""
    base = str(base_path)
    try:
        with open(base + ".json", "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise IoError(f"failed to read report files at {base!r}: {exc}") from exc
    return [TrapReport.from_dict(d) for d in payload["reports"]]
