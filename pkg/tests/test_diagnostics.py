import numpy as np
import pytest

from tqla import Granularity, quantize
from tqla.diagnostics import (
    CodeHistory,
    Histogram,
    TrapReport,
    boundary_fraction,
    deadzone_fraction,
    export_report,
    flip_rate,
    load_report,
    take_snapshot,
    weight_histogram,
)
from tqla.errors import (
    DegenerateNormalization,
    InsufficientHistory,
    InvalidParam,
    InvalidShape,
    IoError,
)

PT = Granularity("per-tensor")


def quantized_pair(rng, rows=5, cols=17, kind="per-group", group_size=None):
    gs = group_size or int(rng.integers(1, cols + 3))
    g = Granularity(kind, gs) if kind == "per-group" else Granularity(kind)
    w = rng.standard_normal((rows, cols))
    return w, quantize(w, "absmean", g)


def count_fraction_oracle(w, thresholds_elem, predicate):
    rows, cols = w.shape
    hits = 0
    for r in range(rows):
        for c in range(cols):
            if predicate(w[r, c], thresholds_elem[r, c]):
                hits += 1
    return hits / (rows * cols)


class TestDeadzoneFraction:
    def test_all_zero_weights(self):
        q = quantize(np.ones((2, 4)), "absmean", PT)
        assert deadzone_fraction(np.zeros((2, 4)), q) == 1.0

    def test_zero_threshold(self):
        w = np.ones((2, 4))
        q = quantize(w, "absmean", PT)
        q.thresholds[:] = 0.0
        assert deadzone_fraction(w, q) == 0.0

    def test_matches_counting_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            w, q = quantized_pair(rng)
            got = deadzone_fraction(w, q)
            ref = count_fraction_oracle(
                w, q.element_thresholds(), lambda v, t: abs(v) < t
            )
            assert got == ref

    def test_shape_mismatch(self):
        q = quantize(np.ones((2, 4)), "absmean", PT)
        with pytest.raises(InvalidShape):
            deadzone_fraction(np.ones((2, 5)), q)


class TestBoundaryFraction:
    def test_exactly_on_boundary(self):
        w = np.array([[0.5]])
        q = quantize(w, "absmean", PT)
        q.thresholds[:] = 0.5
        for band in (0.01, 0.1, 0.5):
            assert boundary_fraction(w, q, band) == 1.0

    def test_far_from_boundary(self):
        w = np.array([[10.0, -10.0, 0.001]])
        q = quantize(w, "absmean", PT)
        q.thresholds[:] = 1.0
        assert boundary_fraction(w, q, 0.1) == 0.0

    def test_matches_counting_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            w, q = quantized_pair(rng)
            band = float(rng.uniform(0.05, 0.5))
            got = boundary_fraction(w, q, band)
            ref = count_fraction_oracle(
                w,
                q.element_thresholds(),
                lambda v, t: (1 - band) * t <= abs(v) <= (1 + band) * t,
            )
            assert got == ref

    def test_band_out_of_range(self):
        w = np.ones((1, 2))
        q = quantize(w, "absmean", PT)
        for band in (0.0, 1.0, -0.3):
            with pytest.raises(InvalidParam):
                boundary_fraction(w, q, band)

    def test_invariant_under_joint_rescale(self):
        rng = np.random.default_rng(2)
        w, q = quantized_pair(rng)
        base_b = boundary_fraction(w, q)
        base_d = deadzone_fraction(w, q)
        for factor in (0.5, 3.0, 100.0):
            q2 = quantize(w * factor, "absmean", q.granularity)
            assert boundary_fraction(w * factor, q2) == base_b
            assert deadzone_fraction(w * factor, q2) == base_d


class TestFlipRate:
    def test_constant_codes(self):
        h = CodeHistory(window=4)
        codes = np.ones((2, 3), dtype=np.int8)
        for _ in range(4):
            h.push([codes])
        assert flip_rate(h) == 0.0

    def test_single_alternating_weight(self):
        # one weight flips 0,+1,0,+1 across 4 snapshots; N total weights
        n_rows, n_cols = 3, 4
        h = CodeHistory(window=8)
        for s in range(4):
            codes = np.zeros((n_rows, n_cols), dtype=np.int8)
            codes[0, 0] = s % 2
            h.push([codes])
        assert flip_rate(h) == pytest.approx(1.0 / (n_rows * n_cols))

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        snaps = [rng.integers(-1, 2, size=(4, 6)).astype(np.int8) for _ in range(5)]
        h1 = CodeHistory(window=8)
        for s in snaps:
            h1.push([s])
        perm = rng.permutation(4 * 6)
        h2 = CodeHistory(window=8)
        for s in snaps:
            h2.push([s.reshape(-1)[perm].reshape(4, 6)])
        assert flip_rate(h1) == flip_rate(h2)

    def test_insufficient_history(self):
        h = CodeHistory(window=4)
        with pytest.raises(InsufficientHistory):
            flip_rate(h)
        h.push([np.zeros((1, 1), dtype=np.int8)])
        with pytest.raises(InsufficientHistory):
            flip_rate(h)

    def test_window_bounds_buffer(self):
        h = CodeHistory(window=3)
        for _ in range(10):
            h.push([np.zeros((1, 1), dtype=np.int8)])
        assert len(h) == 3

    def test_shape_drift_rejected(self):
        h = CodeHistory(window=4)
        h.push([np.zeros((2, 2), dtype=np.int8)])
        with pytest.raises(InvalidShape):
            h.push([np.zeros((2, 3), dtype=np.int8)])


class TestWeightHistogram:
    def test_boundary_spikes_land_at_unit_bins(self):
        w = np.array([[0.5, -0.5, 0.5, -0.5]])
        q = quantize(w, "absmean", PT)
        q.thresholds[:] = 0.5
        h = weight_histogram(w, q, bins=12)
        centers = (h.bin_edges[:-1] + h.bin_edges[1:]) / 2
        hot = centers[h.counts > 0]
        assert len(hot) == 2
        assert np.abs(np.abs(hot) - 1.0).max() < 0.5

    def test_counts_conserved(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            w, q = quantized_pair(rng)
            h = weight_histogram(w, q)
            assert h.counts.sum() == w.size

    def test_uniform_values_roughly_flat(self):
        rng = np.random.default_rng(5)
        w = rng.uniform(-1, 1, size=(100, 100))
        q = quantize(w, "absmean", PT)
        h = weight_histogram(w, q, bins=10)
        assert h.counts.sum() == w.size
        inner = h.counts[1:-1]
        assert inner.min() > 0

    def test_overflow_goes_to_end_bins(self):
        w = np.array([[100.0, -100.0, 0.0]])
        q = quantize(w, "absmean", PT)
        q.thresholds[:] = 1.0
        h = weight_histogram(w, q, bins=6)
        assert h.counts[0] == 1 and h.counts[-1] == 1
        assert h.counts.sum() == 3

    def test_degenerate_normalization_falls_back(self):
        w = np.array([[0.25, -0.75]])
        q = quantize(w, "absmean", PT)
        q.thresholds[:] = 0.0
        with pytest.warns(DegenerateNormalization):
            h = weight_histogram(w, q, bins=6)
        assert not h.normalized
        assert h.counts.sum() == 2

    def test_too_few_bins(self):
        w = np.ones((1, 2))
        q = quantize(w, "absmean", PT)
        with pytest.raises(InvalidParam):
            weight_histogram(w, q, bins=1)

    def test_matches_counting_oracle(self):
        import bisect

        rng = np.random.default_rng(6)
        for _ in range(10):
            w, q = quantized_pair(rng)
            bins = int(rng.integers(3, 30))
            h = weight_histogram(w, q, bins=bins)
            thr = q.element_thresholds()
            edges = list(h.bin_edges)
            ref = [0] * bins
            for r in range(w.shape[0]):
                for c in range(w.shape[1]):
                    v = w[r, c] / thr[r, c] if thr[r, c] > 0 else 0.0
                    v = min(max(v, -3.0), 3.0)
                    k = min(max(bisect.bisect_right(edges, v) - 1, 0), bins - 1)
                    ref[k] += 1
            assert h.counts.tolist() == ref


class TestSnapshotAndExport:
    def make_reports(self, rng, n=3):
        history = CodeHistory(window=4)
        reports = []
        for step in range(n):
            w, q = quantized_pair(rng, rows=4, cols=9, kind="per-channel")
            reports.append(
                take_snapshot(step * 50, rng.uniform(0.1, 2.0), [(w, q)], history)
            )
        return reports

    def test_snapshot_aggregates_layers(self):
        rng = np.random.default_rng(7)
        w1, q1 = quantized_pair(rng, rows=2, cols=6)
        w2, q2 = quantized_pair(rng, rows=3, cols=4)
        rep = take_snapshot(0, 1.0, [(w1, q1), (w2, q2)])
        total = w1.size + w2.size
        expected = (
            deadzone_fraction(w1, q1) * w1.size + deadzone_fraction(w2, q2) * w2.size
        ) / total
        assert rep.deadzone_fraction == pytest.approx(expected, rel=1e-12)
        assert rep.histogram.counts.sum() == total

    def test_first_snapshot_has_zero_flip_rate(self):
        rng = np.random.default_rng(8)
        history = CodeHistory(window=4)
        w, q = quantized_pair(rng)
        rep = take_snapshot(0, 0.5, [(w, q)], history)
        assert rep.mean_flip_rate == 0.0
        assert len(history) == 1

    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(9)
        reports = self.make_reports(rng)
        base = tmp_path / "trap"
        csv_path, json_path = export_report(reports, base)
        loaded = load_report(base)
        assert len(loaded) == len(reports)
        for a, b in zip(reports, loaded):
            assert a.step == b.step
            assert a.loss == b.loss
            assert a.deadzone_fraction == b.deadzone_fraction
            assert a.boundary_fraction == b.boundary_fraction
            assert a.mean_flip_rate == b.mean_flip_rate
            assert np.array_equal(a.histogram.bin_edges, b.histogram.bin_edges)
            assert np.array_equal(a.histogram.counts, b.histogram.counts)
        # CSV: header plus one row per report, losslessly parseable
        lines = open(csv_path, encoding="utf-8").read().strip().split("\n")
        assert lines[0] == "step,loss,deadzone_fraction,boundary_fraction,mean_flip_rate"
        assert len(lines) == len(reports) + 1
        for line, rep in zip(lines[1:], reports):
            fields = line.split(",")
            assert int(fields[0]) == rep.step
            assert float(fields[1]) == rep.loss

    def test_one_report_one_row(self, tmp_path):
        rng = np.random.default_rng(10)
        reports = self.make_reports(rng, n=1)
        csv_path, _ = export_report(reports, tmp_path / "one")
        lines = open(csv_path, encoding="utf-8").read().strip().split("\n")
        assert len(lines) == 2

    def test_empty_sequence_rejected(self, tmp_path):
        with pytest.raises(InvalidParam):
            export_report([], tmp_path / "none")

    def test_io_error_surfaces(self, tmp_path):
        rng = np.random.default_rng(11)
        reports = self.make_reports(rng, n=1)
        with pytest.raises(IoError):
            export_report(reports, tmp_path / "missing_dir" / "trap")

    def test_report_dict_roundtrip(self):
        rng = np.random.default_rng(12)
        rep = self.make_reports(rng, n=1)[0]
        back = TrapReport.from_dict(rep.to_dict())
        assert back.step == rep.step and back.loss == rep.loss
        assert isinstance(back.histogram, Histogram)
