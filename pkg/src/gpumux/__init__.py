"""SLO-aware GPU kernel scheduling simulator.

Simulates multi-tenant inference kernel streams against an analytical
roofline/occupancy device model, comparing a coalescing out-of-order JIT
policy against time-only and space-only multiplexing baselines.
"""

from .coalesce import ShapeCluster, SuperKernel, cluster_shapes, form_superkernel, pad_cost
from .device import (CostEstimate, DeviceProfile, load_profile,
                     occupancy_efficiency, op_byte_ratio, roofline_duration)
from .engine import (EventTrace, Metrics, RunResult, WorkloadSpec, compare,
                     generate_workload, percentile, run)
from .kernels import (InferenceRequest, KernelSpec, LatencyConstraint,
                      kernel_cost, lower_model, submit)
from .scheduler import (PolicyParams, Scheduler, SchedulerPolicy,
                        TimelineEntry, slack)
from .tuning import ClusterKey, TuningConfig, TuningTable, build_table, tune

__version__ = "0.1.0"
