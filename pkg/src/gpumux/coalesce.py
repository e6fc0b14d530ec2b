"""Shape clustering and superkernel formation.

Pending kernels that share an operator and dtype are greedily grouped by
dimensions; each group is padded to its per-dimension maxima and dispatched
as one batched superkernel. Admission into a cluster is governed by a padding
budget: the fraction of padded FLOPs that are padding must stay below a
configurable threshold. Padding is billed as materialized, so padded members
also pay padded memory traffic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .device import CostEstimate, DeviceProfile, occupancy_efficiency, roofline_duration
from .kernels import KernelSpec, block_count, bytes_moved, flop_count
from .tuning import DEFAULT_CONFIG, ClusterKey, TuningTable

DEFAULT_PAD_BUDGET = 0.25


@dataclass(frozen=True)
class ShapeCluster:
    op_kind: str
    dtype: str
    padded_dims: tuple
    members: tuple  # KernelSpecs, in admission order
    waste: float

    @property
    def key(self) -> ClusterKey:
        return ClusterKey(self.op_kind, self.dtype, self.padded_dims)

    @property
    def earliest_deadline(self) -> int:
        return min(k.deadline for k in self.members)


@dataclass(frozen=True)
class SuperKernel:
    super_id: str
    members: tuple
    padded_dims: tuple
    batch: int
    flops: int  # padded: batch * flops(padded_dims)
    bytes: int
    earliest_deadline: int
    cost: CostEstimate

    @property
    def useful_flops(self) -> int:
        return sum(k.flops for k in self.members)


def _padding_waste(op_kind: str, member_flops: list, padded_dims: tuple) -> float:
    padded = flop_count(op_kind, padded_dims)
    return 1.0 - sum(member_flops) / (len(member_flops) * padded)


def pad_cost(cluster: ShapeCluster) -> float:
    """Fraction of the padded FLOP volume that is padding."""
    if not cluster.members:
        raise ValueError("empty cluster")
    return _padding_waste(cluster.op_kind, [k.flops for k in cluster.members],
                          cluster.padded_dims)


def cluster_shapes(pending: list, pad_budget: float = DEFAULT_PAD_BUDGET) -> list:
    """Greedy deterministic partition of pending kernels into shape clusters.

    Kernels are sorted by (op_kind, dtype, dims descending, kernel_id); each
    unassigned kernel seeds a cluster and later kernels are admitted iff the
    recomputed waste stays within the padding budget. Singletons always have
    waste zero, so the result is a total partition.
    """
    if not 0.0 <= pad_budget < 1.0:
        raise ValueError(f"pad_budget must be in [0, 1), got {pad_budget}")
    order = sorted(pending, key=lambda k: (
        k.op_kind, k.dtype, tuple(-d for d in k.dims), k.kernel_id))
    assigned = set()
    clusters = []
    for i, seed in enumerate(order):
        if seed.kernel_id in assigned:
            continue
        members = [seed]
        flops = [seed.flops]
        padded = seed.dims
        assigned.add(seed.kernel_id)
        for cand in order[i + 1:]:
            if cand.kernel_id in assigned:
                continue
            if cand.op_kind != seed.op_kind or cand.dtype != seed.dtype:
                continue
            new_padded = tuple(max(a, b) for a, b in zip(padded, cand.dims))
            waste = _padding_waste(seed.op_kind, flops + [cand.flops], new_padded)
            if waste <= pad_budget:
                members.append(cand)
                flops.append(cand.flops)
                padded = new_padded
                assigned.add(cand.kernel_id)
        clusters.append(ShapeCluster(
            op_kind=seed.op_kind, dtype=seed.dtype, padded_dims=padded,
            members=tuple(members),
            waste=_padding_waste(seed.op_kind, flops, padded)))
    return clusters


def form_superkernel(cluster: ShapeCluster, tuning: TuningTable | None,
                     profile: DeviceProfile, co_tenancy: int = 1,
                     super_id: str | None = None) -> SuperKernel:
    """Cost a padded batched coalition; batching multiplies block parallelism."""
    config = (tuning.lookup_or_default(cluster.key, co_tenancy)
              if tuning is not None else DEFAULT_CONFIG)
    batch = len(cluster.members)
    per_blocks = block_count(cluster.op_kind, cluster.padded_dims,
                             config.tile_m, config.tile_n)
    blocks = batch * per_blocks
    flops = batch * flop_count(cluster.op_kind, cluster.padded_dims)
    nbytes = batch * bytes_moved(cluster.op_kind, cluster.padded_dims, cluster.dtype)
    eff = occupancy_efficiency(profile, blocks, config.efficiency_factor)
    path = "dense" if cluster.dtype == "fp16" else "scalar"
    duration = roofline_duration(profile, flops, nbytes, eff, path)
    if super_id is None:
        super_id = "sk-" + "-".join(str(k.kernel_id) for k in cluster.members)
    return SuperKernel(
        super_id=super_id, members=cluster.members,
        padded_dims=cluster.padded_dims, batch=batch, flops=flops, bytes=nbytes,
        earliest_deadline=cluster.earliest_deadline,
        cost=CostEstimate(flops=flops, bytes=nbytes, block_count=blocks,
                          efficiency=eff, duration=duration))
