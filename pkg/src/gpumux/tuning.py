"""Ahead-of-time blocking-parameter search per (shape cluster, co-tenancy).

The search space is a tiny grid of tile sizes and SM footprints, scored by an
analytical throughput model. The model constants are a calibration (see the
preset file), not a measurement: they are chosen so that tuning for two
tenants selects a "collaborative" config that gives up ~20% solo throughput
in exchange for a noticeably better two-tenant aggregate, while tuning for a
single tenant selects the "greedy" full-footprint config.

Model, for one instance at fair share s = 1/tenancy:
    throughput = peak * s * occupancy * tile_granularity * footprint_eff * mismatch
where occupancy saturates against the share's block capacity,
tile_granularity penalizes tiles away from the reference blocking area,
footprint_eff = base + slope * footprint (declared non-increasing in
1 - footprint), and mismatch = min(1, s / footprint) penalizes configs tuned
for more SMs than the share grants.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .device import DeviceProfile, tuning_model_constants
from .kernels import block_count, flop_count, validate_dims

TILE_GRID = (16, 32, 64, 128)

_MODEL = tuning_model_constants()


@dataclass(frozen=True)
class TuningConfig:
    tile_m: int
    tile_n: int
    sm_footprint: float = 1.0
    efficiency_factor: float = 1.0

    def __post_init__(self):
        if self.tile_m < 1 or self.tile_n < 1:
            raise ValueError("tiles must be >= 1")
        if not 0.0 < self.sm_footprint <= 1.0:
            raise ValueError("sm_footprint must be in (0, 1]")
        if not 0.0 < self.efficiency_factor <= 1.0:
            raise ValueError("efficiency_factor must be in (0, 1]")


DEFAULT_CONFIG = TuningConfig(tile_m=64, tile_n=64, sm_footprint=1.0,
                              efficiency_factor=1.0)


@dataclass(frozen=True)
class ClusterKey:
    """Identity of a shape cluster: operator, dtype, representative dims."""

    op_kind: str
    dtype: str
    dims: tuple

    def __post_init__(self):
        object.__setattr__(self, "dims", validate_dims(self.op_kind, self.dims))

    def as_string(self) -> str:
        return f"{self.op_kind}:{self.dtype}:{'x'.join(map(str, self.dims))}"

    @classmethod
    def from_string(cls, text: str) -> "ClusterKey":
        op_kind, dtype, dims = text.split(":")
        return cls(op_kind, dtype, tuple(int(d) for d in dims.split("x")))


def footprint_efficiency(sm_footprint: float) -> float:
    return _MODEL["base_efficiency"] + _MODEL["footprint_slope"] * sm_footprint


def _tile_granularity(op_kind: str, dims: tuple, tile_m: int, tile_n: int) -> float:
    # Peaks at the reference blocking area; too-small tiles waste per-block
    # efficiency, too-large tiles overrun register/shared-memory budgets.
    if op_kind == "gemm":
        m, n, _ = dims
        area = min(tile_m, m) * min(tile_n, n)
    elif op_kind == "gemv":
        area = min(tile_m, dims[0]) * tile_n
    else:
        area = tile_m * tile_n
    ref = _MODEL["reference_tile_area"]
    return min(area, ref) / max(area, ref)


def instance_throughput(config: TuningConfig, key: ClusterKey,
                        co_tenancy: int, profile: DeviceProfile) -> float:
    """Modeled FLOP/s of one instance among `co_tenancy` identical tenants."""
    if co_tenancy < 1:
        raise ValueError("co_tenancy must be >= 1")
    share = 1.0 / co_tenancy
    capacity = share * profile.block_capacity
    blocks = block_count(key.op_kind, key.dims, config.tile_m, config.tile_n)
    occupancy = min(1.0, blocks / capacity)
    granularity = _tile_granularity(key.op_kind, key.dims, config.tile_m, config.tile_n)
    mismatch = min(1.0, share / config.sm_footprint)
    peak = profile.peak("dense" if key.dtype == "fp16" else "scalar")
    return (peak * share * occupancy * granularity
            * footprint_efficiency(config.sm_footprint) * mismatch)


def aggregate_throughput(config: TuningConfig, key: ClusterKey,
                         co_tenancy: int, profile: DeviceProfile) -> float:
    return co_tenancy * instance_throughput(config, key, co_tenancy, profile)


def search_grid(co_tenancy: int) -> list:
    footprints = sorted({1.0} | {1.0 / t for t in range(1, co_tenancy + 1)})
    return [(tm, tn, f) for tm in TILE_GRID for tn in TILE_GRID for f in footprints]


def tune(cluster_key: ClusterKey, co_tenancy: int, profile: DeviceProfile,
         budget: int, seed: int = 0) -> TuningConfig:
    """Exhaustive grid search maximizing modeled aggregate throughput.

    Ties break toward larger footprint, then larger tiles. The seed only
    enters table provenance; the grid itself is deterministic.
    """
    grid = search_grid(co_tenancy)
    if budget < len(grid):
        raise ValueError(f"budget {budget} below grid size {len(grid)}")
    best = None
    best_rank = None
    for tm, tn, f in grid:
        config = TuningConfig(tile_m=tm, tile_n=tn, sm_footprint=f,
                              efficiency_factor=footprint_efficiency(f))
        agg = aggregate_throughput(config, cluster_key, co_tenancy, profile)
        rank = (agg, f, tm * tn, tm)
        if best_rank is None or rank > best_rank:
            best, best_rank = config, rank
    return best


class TuningTable:
    """(cluster key, co-tenancy) -> TuningConfig, with search provenance."""

    def __init__(self, entries: dict | None = None, provenance: dict | None = None):
        self.entries = dict(entries or {})
        self.provenance = dict(provenance or {})

    def put(self, key: ClusterKey, co_tenancy: int, config: TuningConfig):
        self.entries[(key, co_tenancy)] = config

    def max_tenancy(self, key: ClusterKey) -> int:
        levels = [t for (k, t) in self.entries if k == key]
        return max(levels) if levels else 0

    def lookup(self, key: ClusterKey, co_tenancy: int) -> TuningConfig | None:
        """Stored config, clamping tenancy above the tuned maximum; None on miss."""
        top = self.max_tenancy(key)
        if top == 0:
            return None
        return self.entries.get((key, min(co_tenancy, top)))

    def lookup_or_default(self, key: ClusterKey, co_tenancy: int) -> TuningConfig:
        return self.lookup(key, co_tenancy) or DEFAULT_CONFIG

    def to_dict(self) -> dict:
        out = {}
        for (key, tenancy), config in sorted(
                self.entries.items(), key=lambda kv: (kv[0][0].as_string(), kv[0][1])):
            out.setdefault(key.as_string(), {})[str(tenancy)] = {
                "tile_m": config.tile_m,
                "tile_n": config.tile_n,
                "sm_footprint": config.sm_footprint,
                "efficiency_factor": config.efficiency_factor,
            }
        return {"provenance": self.provenance, "entries": out}

    @classmethod
    def from_dict(cls, raw: dict) -> "TuningTable":
        table = cls(provenance=raw.get("provenance", {}))
        for key_text, levels in raw.get("entries", {}).items():
            key = ClusterKey.from_string(key_text)
            for tenancy, cfg in levels.items():
                table.put(key, int(tenancy), TuningConfig(**cfg))
        return table

    def save(self, path: str):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "TuningTable":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def build_table(keys: list, max_tenancy: int, profile: DeviceProfile,
                budget: int, seed: int = 0) -> TuningTable:
    """Tune every key at every tenancy level 1..max_tenancy."""
    table = TuningTable(provenance={
        "budget": budget, "seed": seed, "model_version": _MODEL,
        "profile": profile.name, "max_tenancy": max_tenancy,
    })
    for key in keys:
        for tenancy in range(1, max_tenancy + 1):
            table.put(key, tenancy, tune(key, tenancy, profile, budget, seed))
    return table
