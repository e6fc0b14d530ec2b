import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpumux.device import (DeviceProfile, ProfileError, load_profile,
                           occupancy_efficiency, op_byte_ratio,
                           roofline_duration)

V100 = load_profile("v100")


def test_preset_ratios():
    # op:byte ratios of the shipped presets, direct arithmetic.
    assert op_byte_ratio(V100) == pytest.approx(125e12 / 900e9)
    assert abs(op_byte_ratio(V100) - 139) <= 1
    assert abs(op_byte_ratio(load_profile("k80")) - 18) <= 1
    assert abs(op_byte_ratio(load_profile("tpu_v2_like")) - 300) <= 1
    assert abs(op_byte_ratio(load_profile("inferentia_like")) - 500) <= 1


def test_op_byte_ratio_unity():
    profile = DeviceProfile("unit", 1, 1, 1e12, 1e12, 1e12, 0)
    assert op_byte_ratio(profile) == 1.0


def test_unknown_preset():
    with pytest.raises(ProfileError):
        load_profile("h100")


def test_profile_file_roundtrip(tmp_path):
    path = tmp_path / "dev.json"
    path.write_text(json.dumps({
        "name": "toy", "sm_count": 4, "blocks_per_sm": 2,
        "peak_flops_dense": 1e12, "peak_flops_scalar": 5e11,
        "mem_bandwidth": 1e11, "context_switch_cost": 100}))
    profile = load_profile(str(path))
    assert profile.name == "toy"
    assert profile.block_capacity == 8


def test_profile_file_unknown_field(tmp_path):
    path = tmp_path / "dev.json"
    path.write_text(json.dumps({
        "name": "toy", "sm_count": 4, "blocks_per_sm": 2,
        "peak_flops_dense": 1e12, "peak_flops_scalar": 5e11,
        "mem_bandwidth": 1e11, "context_switch_cost": 100, "cache_mb": 6}))
    with pytest.raises(ProfileError, match="cache_mb"):
        load_profile(str(path))


def test_profile_file_missing_field(tmp_path):
    path = tmp_path / "dev.json"
    path.write_text(json.dumps({"name": "toy", "sm_count": 4}))
    with pytest.raises(ProfileError, match="mem_bandwidth"):
        load_profile(str(path))


def test_roofline_compute_bound():
    # Hand calculation: 2*1024^3 / 15.7e12 s = 136782.4 ns, ceil -> 136783;
    # memory term 12582912 / 900e9 s = 13981.0 ns. Compute-bound.
    dur = roofline_duration(V100, 2 * 1024**3, 12_582_912, 1.0, "scalar")
    assert dur == 136_783


def test_roofline_memory_bound_gemv():
    # 2*4096^2 / 15.7e12 = 2138 ns vs 67125248 / 900e9 = 74583.6 ns.
    dur = roofline_duration(V100, 2 * 4096**2, 67_125_248, 1.0, "scalar")
    assert dur == 74_584


def test_roofline_empty_kernel():
    assert roofline_duration(V100, 0, 0, 1.0) == 0


def test_roofline_bad_efficiency():
    for eff in (0.0, -0.5, 1.5):
        with pytest.raises(ValueError):
            roofline_duration(V100, 10, 10, eff)


def test_occupancy_examples():
    assert occupancy_efficiency(V100, 160, 1.0) == 1.0
    assert occupancy_efficiency(V100, 49, 1.0) == 49 / 160 == 0.30625
    assert occupancy_efficiency(V100, 10_000, 0.8) == 0.8


def test_occupancy_zero_blocks():
    with pytest.raises(ValueError):
        occupancy_efficiency(V100, 0, 1.0)


@settings(max_examples=300, deadline=None)
@given(flops=st.integers(1, 10**12), nbytes=st.integers(1, 10**10),
       eff=st.floats(0.05, 1.0), factor=st.floats(1.0, 8.0))
def test_duration_monotone(flops, nbytes, eff, factor):
    base = roofline_duration(V100, flops, nbytes, eff)
    assert roofline_duration(V100, int(flops * factor), nbytes, eff) >= base
    assert roofline_duration(V100, flops, int(nbytes * factor), eff) >= base
    # Non-increasing in efficiency.
    assert roofline_duration(V100, flops, nbytes, min(1.0, eff * factor)) <= base


@settings(max_examples=200, deadline=None)
@given(nbytes=st.integers(1000, 10**9), eff=st.floats(0.1, 1.0))
def test_roofline_crossover(nbytes, eff):
    # Below the crossover FLOP count the duration is memory-bound and thus
    # independent of flops.
    threshold = nbytes * V100.peak_flops_scalar * eff / V100.mem_bandwidth
    low = int(threshold * 0.5)
    lower = int(threshold * 0.1)
    if lower < 1:
        return
    assert (roofline_duration(V100, low, nbytes, eff)
            == roofline_duration(V100, lower, nbytes, eff)
            == roofline_duration(V100, 0, nbytes, eff))


def test_invalid_profile_values():
    with pytest.raises(ProfileError):
        DeviceProfile("bad", 0, 2, 1e12, 1e12, 1e11, 0)
    with pytest.raises(ProfileError):
        DeviceProfile("bad", 4, 2, 1e12, 1e12, 1e11, -1)
