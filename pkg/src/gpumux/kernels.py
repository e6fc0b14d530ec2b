"""Declarative kernel and request representation.

A kernel is declared by operator kind, dimensions, dtype, and a latency
constraint; no blocking/tiling is attached at submission time. Binding of
tile sizes and device placement is deferred to the scheduler (late binding).

Convolutions appear pre-lowered as GEMMs (im2col), so the model library only
contains gemm/gemv/elementwise shapes. The bytes model counts each operand
exactly once; there is no cache-reuse modeling.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources

from .device import CostEstimate, DeviceProfile, occupancy_efficiency, roofline_duration

OP_KINDS = ("gemm", "gemv", "elementwise")
DTYPE_SIZES = {"fp32": 4, "fp16": 2}

# Absolute-deadline sentinel for batch-class requests (no SLO).
NO_DEADLINE = 1 << 62

# Interactive SLOs span search-ranking-style 10ms budgets up to several seconds.
INTERACTIVE_SLO_MIN = 10_000_000
INTERACTIVE_SLO_MAX = 10_000_000_000

_OP_ARITY = {"gemm": 3, "gemv": 2, "elementwise": 1}


def validate_dims(op_kind: str, dims: tuple) -> tuple:
    if op_kind not in OP_KINDS:
        raise ValueError(f"unknown op_kind {op_kind!r}")
    dims = tuple(int(d) for d in dims)
    if len(dims) != _OP_ARITY[op_kind]:
        raise ValueError(f"{op_kind} expects {_OP_ARITY[op_kind]} dims, got {dims}")
    if any(d < 1 for d in dims):
        raise ValueError(f"all dims must be >= 1, got {dims}")
    return dims


def flop_count(op_kind: str, dims: tuple) -> int:
    """gemm: 2mnk, gemv: 2mn, elementwise: n."""
    dims = validate_dims(op_kind, dims)
    if op_kind == "gemm":
        m, n, k = dims
        return 2 * m * n * k
    if op_kind == "gemv":
        m, n = dims
        return 2 * m * n
    return dims[0]


def bytes_moved(op_kind: str, dims: tuple, dtype: str) -> int:
    """Each operand and the result counted once at dtype width."""
    dims = validate_dims(op_kind, dims)
    size = DTYPE_SIZES[dtype]
    if op_kind == "gemm":
        m, n, k = dims
        elems = m * k + k * n + m * n
    elif op_kind == "gemv":
        m, n = dims
        elems = m * n + n + m
    else:
        elems = 2 * dims[0]
    return size * elems


@dataclass(frozen=True)
class LatencyConstraint:
    """SLO relative to request arrival; batch class means no deadline."""

    slo: int
    cls: str = "interactive"

    def __post_init__(self):
        if self.cls not in ("interactive", "batch"):
            raise ValueError(f"unknown constraint class {self.cls!r}")
        if self.cls == "batch":
            object.__setattr__(self, "slo", NO_DEADLINE)
        elif not INTERACTIVE_SLO_MIN <= self.slo <= INTERACTIVE_SLO_MAX:
            raise ValueError(
                f"interactive slo must be within "
                f"[{INTERACTIVE_SLO_MIN}, {INTERACTIVE_SLO_MAX}] ns, got {self.slo}"
            )

    @classmethod
    def batch(cls) -> "LatencyConstraint":
        return cls(NO_DEADLINE, "batch")


@dataclass(frozen=True)
class KernelSpec:
    kernel_id: int
    stream_id: str
    op_kind: str
    dims: tuple
    dtype: str
    deps: frozenset = frozenset()
    arrival: int = 0
    deadline: int = NO_DEADLINE

    def __post_init__(self):
        object.__setattr__(self, "dims", validate_dims(self.op_kind, self.dims))
        if self.dtype not in DTYPE_SIZES:
            raise ValueError(f"unknown dtype {self.dtype!r}")
        if self.deadline <= self.arrival:
            raise ValueError("deadline must be later than arrival")
        object.__setattr__(self, "deps", frozenset(self.deps))

    @property
    def flops(self) -> int:
        return flop_count(self.op_kind, self.dims)

    @property
    def bytes(self) -> int:
        return bytes_moved(self.op_kind, self.dims, self.dtype)

    @property
    def path(self) -> str:
        return "dense" if self.dtype == "fp16" else "scalar"


@dataclass(frozen=True)
class InferenceRequest:
    request_id: int
    stream_id: str
    kernels: tuple
    arrival: int
    constraint: LatencyConstraint

    def __post_init__(self):
        ids = {k.kernel_id for k in self.kernels}
        for k in self.kernels:
            if not k.deps <= ids:
                raise ValueError("kernel deps must reference kernels in this request")
        object.__setattr__(self, "kernels", tuple(self.kernels))

    @property
    def deadline(self) -> int:
        return min(self.arrival + self.constraint.slo, NO_DEADLINE)


def submit(op_kind: str, dims: tuple, dtype: str, constraint: LatencyConstraint,
           stream_id: str, arrival: int = 0, kernel_id: int = 0,
           deps: frozenset = frozenset()) -> KernelSpec:
    """Declare one kernel; no blocking information is attached here."""
    deadline = min(arrival + constraint.slo, NO_DEADLINE)
    return KernelSpec(kernel_id=kernel_id, stream_id=stream_id, op_kind=op_kind,
                      dims=dims, dtype=dtype, deps=deps, arrival=arrival,
                      deadline=deadline)


def load_model_library(path: str | None = None) -> dict:
    """Model name -> list of {op_kind, dims, dtype}. Bundled library by default."""
    if path is None:
        text = resources.files("gpumux.data").joinpath("models.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    library = json.loads(text)
    for name, protos in library.items():
        for proto in protos:
            validate_dims(proto["op_kind"], proto["dims"])
    return library


_BUNDLED_LIBRARY = load_model_library()


def lower_model(model_name: str, batch: int = 1,
                library: dict | None = None) -> list:
    """Lower a model description to a linear dependency chain of kernels.

    Batching multiplies the gemm n-dim and the elementwise length; a batched
    gemv becomes a gemm with the batch as its n-dim.
    """
    library = _BUNDLED_LIBRARY if library is None else library
    if model_name not in library:
        raise KeyError(f"unknown model {model_name!r}")
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    chain = []
    for idx, proto in enumerate(library[model_name]):
        op_kind, dims, dtype = proto["op_kind"], tuple(proto["dims"]), proto["dtype"]
        if batch > 1:
            if op_kind == "gemm":
                dims = (dims[0], dims[1] * batch, dims[2])
            elif op_kind == "gemv":
                op_kind, dims = "gemm", (dims[0], batch, dims[1])
            else:
                dims = (dims[0] * batch,)
        deps = frozenset({idx - 1}) if idx > 0 else frozenset()
        chain.append(KernelSpec(kernel_id=idx, stream_id="", op_kind=op_kind,
                                dims=dims, dtype=dtype, deps=deps))
    return chain


def block_count(op_kind: str, dims: tuple, tile_m: int, tile_n: int) -> int:
    """Thread blocks implied by a tiling; tiles are clamped to problem dims."""
    if tile_m < 1 or tile_n < 1:
        raise ValueError("tile dims must be >= 1")
    if op_kind == "gemm":
        m, n, _ = dims
        return math.ceil(m / min(tile_m, m)) * math.ceil(n / min(tile_n, n))
    if op_kind == "gemv":
        m, _ = dims
        return math.ceil(m / min(tile_m, m))
    n = dims[0]
    return math.ceil(n / min(tile_m * tile_n, n))


def kernel_cost(spec: KernelSpec, tuning, profile: DeviceProfile) -> CostEstimate:
    """Bridge a declarative kernel to the device roofline model."""
    blocks = block_count(spec.op_kind, spec.dims, tuning.tile_m, tuning.tile_n)
    eff = occupancy_efficiency(profile, blocks, tuning.efficiency_factor)
    duration = roofline_duration(profile, spec.flops, spec.bytes, eff, spec.path)
    return CostEstimate(flops=spec.flops, bytes=spec.bytes, block_count=blocks,
                        efficiency=eff, duration=duration)
