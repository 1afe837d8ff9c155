import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetsoc.hwmodel import Device, HardwareConfig, TensorShape
from hetsoc.modelspec import partitionable_shapes
from hetsoc.profiler import (
    CSV_COLUMNS,
    MissingProfileError,
    NeedsDecompositionError,
    ProfileEntry,
    ProfileError,
    ProfileKey,
    ProfileTable,
    Source,
    build_profile,
    estimate_latency,
    load_csv,
    save_csv,
)

FIVE_SHAPES = [TensorShape(6144, 4096), TensorShape(4096, 4096), TensorShape(14336, 4096),
               TensorShape(28672, 4096), TensorShape(4096, 14336)]
HEADER = ",".join(CSV_COLUMNS) + "\n"


def test_five_shapes_give_seventy_entries(hw):
    table = build_profile(hw, FIVE_SHAPES)
    assert len(table) == 5 * 7 * 2


def test_llama8b_has_four_distinct_shapes(hw, llama8b):
    # FFN up and gate share one kernel shape
    shapes = partitionable_shapes(llama8b)
    assert len(shapes) == 4
    assert len(build_profile(hw, shapes)) == 4 * 7 * 2


@pytest.mark.parametrize("lengths,expected", [([64], 4), ([1], 2), ([1, 64], 4)])
def test_single_shape_counts(hw, lengths, expected):
    assert len(build_profile(hw, [TensorShape(4096, 4096)], lengths)) == expected


def test_small_rows_skip_npu(hw):
    table = build_profile(hw, [TensorShape(16, 4096)], [32, 64], npu_min_subtensor=32)
    assert {k.device for k in table.entries} == {Device.GPU}


@pytest.mark.parametrize("shapes,lengths", [([], [32]), ([TensorShape(64, 64)], []), ([TensorShape(64, 64)], [64, 32])])
def test_build_rejects_bad_inputs(hw, shapes, lengths):
    with pytest.raises(ProfileError):
        build_profile(hw, shapes, lengths)


def test_build_is_fast(hw):
    t0 = time.perf_counter()
    build_profile(hw, FIVE_SHAPES)
    assert time.perf_counter() - t0 < 1.0


class TestCsv:
    def test_round_trip(self, hw):
        table = build_profile(hw, FIVE_SHAPES)
        again = load_csv(save_csv(table))
        assert again == table
        assert save_csv(again) == save_csv(table)

    def test_lf_and_header(self, hw):
        data = save_csv(build_profile(hw, [TensorShape(64, 64)], [32]))
        assert data.startswith(HEADER.encode())
        assert b"\r" not in data

    def test_imported_row(self):
        table = load_csv(HEADER + "NPU,4096,4096,256,1884,,Imported\n")
        e = table.lookup(Device.NPU, TensorShape(4096, 4096), 256)
        assert e.latency == 1884.0
        assert e.bandwidth_observed is None
        assert e.source is Source.IMPORTED

    @pytest.mark.parametrize("row,line", [
        ("NPU,4096,4096,0,1884,,Imported", 2),
        ("NPU,4096,4096,x,1884,,Imported", 2),
        ("TPU,4096,4096,256,1884,,Imported", 2),
        ("NPU,4096,4096,256,-3,,Imported", 2),
        ("NPU,4096,4096,256,1884,Imported", 2),
    ])
    def test_malformed_row_names_line(self, row, line):
        with pytest.raises(ProfileError, match=f"line {line}"):
            load_csv(HEADER + row + "\n")

    def test_duplicate_key(self):
        rows = "GPU,64,64,32,10,,Synthetic\nGPU,64,64,32,11,,Synthetic\n"
        with pytest.raises(ProfileError, match="line 3"):
            load_csv(HEADER + rows)

    def test_permuted_header_fails(self):
        cols = list(CSV_COLUMNS)
        cols[0], cols[1] = cols[1], cols[0]
        with pytest.raises(ProfileError, match="header"):
            load_csv(",".join(cols) + "\n")


def _imported(points):
    entries = [ProfileEntry(ProfileKey(Device(d), TensorShape(*s), n), lat, None, Source.IMPORTED)
               for d, s, n, lat in points]
    return ProfileTable.from_entries(entries)


class TestEstimate:
    def test_knot_exact(self, table8b):
        shape = TensorShape(4096, 4096)
        for n in (1, 32, 256, 1024):
            for dev in (Device.GPU, Device.NPU):
                assert estimate_latency(table8b, dev, shape, n) == table8b.lookup(dev, shape, n).latency

    def test_published_gpu_point_interpolates_to_synthetic(self, hw):
        shape = TensorShape(4096, 4096)
        synth = build_profile(hw, [shape], [512])
        gpu512 = synth.lookup(Device.GPU, shape, 512).latency
        t = _imported([("GPU", (4096, 4096), 256, 10841.0), ("GPU", (4096, 4096), 512, gpu512)])
        assert estimate_latency(t, Device.GPU, shape, 256) == 10841.0
        assert estimate_latency(t, Device.GPU, shape, 300) == pytest.approx(10841.0 + (gpu512 - 10841.0) * 44 / 256)

    @pytest.mark.parametrize("n", range(193, 257, 7))
    def test_npu_step_band(self, n):
        t = _imported([("NPU", (4096, 4096), 128, 912.0), ("NPU", (4096, 4096), 256, 1884.0)])
        assert estimate_latency(t, Device.NPU, TensorShape(4096, 4096), n) == 1884.0

    def test_npu_beyond_max_needs_decomposition(self, table8b):
        with pytest.raises(NeedsDecompositionError, match="requires decomposition or padding"):
            estimate_latency(table8b, Device.NPU, TensorShape(4096, 4096), 1025)

    def test_missing_shape(self, table8b):
        with pytest.raises(MissingProfileError):
            estimate_latency(table8b, Device.GPU, TensorShape(123, 456), 32)

    def test_gpu_extrapolates_last_slope(self):
        t = _imported([("GPU", (64, 64), 32, 100.0), ("GPU", (64, 64), 64, 150.0)])
        assert estimate_latency(t, Device.GPU, TensorShape(64, 64), 128) == 250.0

    @given(st.integers(1, 1024))
    def test_gpu_matches_numpy_interp(self, n):
        shape = TensorShape(14336, 4096)
        t = _TABLE
        xs = t.lengths_for(Device.GPU, shape)
        ys = [t.lookup(Device.GPU, shape, x).latency for x in xs]
        assert estimate_latency(t, Device.GPU, shape, n) == pytest.approx(float(np.interp(n, xs, ys)), rel=1e-12)

    @given(st.integers(1, 3000))
    def test_gpu_continuous_and_monotone(self, n):
        shape = TensorShape(4096, 14336)
        a = estimate_latency(_TABLE, Device.GPU, shape, n)
        b = estimate_latency(_TABLE, Device.GPU, shape, n + 1)
        assert a <= b
        # adjacent lengths differ by at most one step of the steepest segment
        assert b - a <= 200.0

    @given(st.integers(2, 1024))
    def test_npu_right_continuous_steps(self, n):
        shape = TensorShape(6144, 4096)
        lengths = _TABLE.lengths_for(Device.NPU, shape)
        hi = min(x for x in lengths if x >= n)
        assert estimate_latency(_TABLE, Device.NPU, shape, n) == _TABLE.lookup(Device.NPU, shape, hi).latency


_TABLE = build_profile(HardwareConfig(), FIVE_SHAPES)


def test_npu_entries_must_be_standard():
    e = ProfileEntry(ProfileKey(Device.NPU, TensorShape(64, 64), 48), 1.0)
    with pytest.raises(ProfileError):
        ProfileTable({e.key: e}, (32, 64))


def test_key_validation():
    with pytest.raises(ProfileError):
        ProfileKey(Device.CPU, TensorShape(4, 4), 1)
