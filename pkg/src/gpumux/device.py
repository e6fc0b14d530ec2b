"""Analytical GPU device model.

A device is a handful of rates and counts; kernel durations come from a
roofline bound max(compute time, memory time) scaled by an occupancy-derived
efficiency. Time is integer nanoseconds everywhere and divisions round up, so
every simulation is deterministic and platform-independent.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources

PRESET_NAMES = ("v100", "k80", "tpu_v2_like", "inferentia_like")

_PROFILE_FIELDS = (
    "name",
    "sm_count",
    "blocks_per_sm",
    "peak_flops_dense",
    "peak_flops_scalar",
    "mem_bandwidth",
    "context_switch_cost",
)


class ProfileError(ValueError):
    """Raised for unknown presets or malformed profile files."""


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    sm_count: int
    blocks_per_sm: int
    peak_flops_dense: float
    peak_flops_scalar: float
    mem_bandwidth: float
    context_switch_cost: int

    def __post_init__(self):
        for field in ("sm_count", "blocks_per_sm", "peak_flops_dense",
                      "peak_flops_scalar", "mem_bandwidth"):
            if getattr(self, field) <= 0:
                raise ProfileError(f"{field} must be strictly positive")
        if self.context_switch_cost < 0:
            raise ProfileError("context_switch_cost must be >= 0")

    @property
    def block_capacity(self) -> int:
        """Max concurrently resident thread blocks across the whole device."""
        return self.sm_count * self.blocks_per_sm

    def peak(self, path: str) -> float:
        if path == "dense":
            return self.peak_flops_dense
        if path == "scalar":
            return self.peak_flops_scalar
        raise ValueError(f"unknown throughput path {path!r}")


@dataclass(frozen=True)
class CostEstimate:
    flops: int
    bytes: int
    block_count: int
    efficiency: float
    duration: int  # nanoseconds


def _load_presets() -> dict:
    text = resources.files("gpumux.data").joinpath("presets.json").read_text()
    return json.loads(text)


_PRESETS = _load_presets()


def tuning_model_constants() -> dict:
    """Calibrated constants of the autotuner's analytical search space."""
    return dict(_PRESETS["tuning_model"])


def _profile_from_dict(raw: dict, origin: str) -> DeviceProfile:
    unknown = set(raw) - set(_PROFILE_FIELDS)
    if unknown:
        raise ProfileError(f"{origin}: unknown field(s) {sorted(unknown)}")
    missing = set(_PROFILE_FIELDS) - set(raw)
    if missing:
        raise ProfileError(f"{origin}: missing field(s) {sorted(missing)}")
    try:
        return DeviceProfile(
            name=str(raw["name"]),
            sm_count=int(raw["sm_count"]),
            blocks_per_sm=int(raw["blocks_per_sm"]),
            peak_flops_dense=float(raw["peak_flops_dense"]),
            peak_flops_scalar=float(raw["peak_flops_scalar"]),
            mem_bandwidth=float(raw["mem_bandwidth"]),
            context_switch_cost=int(raw["context_switch_cost"]),
        )
    except (TypeError, ValueError) as exc:
        raise ProfileError(f"{origin}: {exc}") from exc


def load_profile(source: str) -> DeviceProfile:
    """Load a device profile from a preset name or a JSON profile file."""
    if source in _PRESETS["profiles"]:
        return _profile_from_dict(_PRESETS["profiles"][source], f"preset {source}")
    try:
        with open(source) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ProfileError(
            f"unknown preset or missing file {source!r}; "
            f"presets are {', '.join(PRESET_NAMES)}"
        ) from None
    except json.JSONDecodeError as exc:
        raise ProfileError(f"{source}: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ProfileError(f"{source}: expected a JSON object")
    return _profile_from_dict(raw, source)


def op_byte_ratio(profile: DeviceProfile) -> float:
    return profile.peak_flops_dense / profile.mem_bandwidth


def occupancy_efficiency(profile: DeviceProfile, block_count: int,
                         tuning_efficiency_factor: float = 1.0) -> float:
    """Fraction of peak achievable given block-level parallelism."""
    if block_count < 1:
        raise ValueError(f"block_count must be >= 1, got {block_count}")
    if not 0.0 < tuning_efficiency_factor <= 1.0:
        raise ValueError("tuning_efficiency_factor must be in (0, 1]")
    return min(1.0, block_count / profile.block_capacity) * tuning_efficiency_factor


def roofline_duration(profile: DeviceProfile, flops: int, nbytes: int,
                      efficiency: float, path: str = "scalar") -> int:
    """max(compute time, memory time) in integer ns, divisions rounded up."""
    if not 0.0 < efficiency <= 1.0:
        raise ValueError(f"efficiency must be in (0, 1], got {efficiency}")
    if flops < 0 or nbytes < 0:
        raise ValueError("flops and bytes must be non-negative")
    peak = profile.peak(path)
    compute_ns = math.ceil(flops / (peak * efficiency) * 1e9) if flops else 0
    memory_ns = math.ceil(nbytes / profile.mem_bandwidth * 1e9) if nbytes else 0
    return max(compute_ns, memory_ns)
