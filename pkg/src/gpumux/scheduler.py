"""Scheduling policies over the device timeline.

Five policy variants share one state machine:

- fifo / edf: serialized single-kernel dispatch, ordered by arrival or
  deadline.
- time-mux: strict round-robin across streams, one context resident at a
  time, with a context-switch cost whenever the resident context changes.
- space-mux: concurrent fair-share co-residency with a synthetic
  interference model (kernels tuned for the whole device degrade when
  granted a slice, and per-kernel jitter widens when the tenant count is
  odd). The interference model is invented to reproduce the qualitative
  unpredictability of spatial sharing; it is a calibration, not a claim.
- ooo: the JIT policy. Ready kernels are clustered by shape, clusters are
  ordered by earliest member deadline, and a sub-saturating cluster whose
  members all have ample slack is withheld for one stagger interval to await
  coalescing partners before being dispatched as a padded superkernel.

The scheduler is a single-owner state machine advanced only by the engine's
event loop; given (state, now, seed) every decision is deterministic.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

from .coalesce import DEFAULT_PAD_BUDGET, cluster_shapes, form_superkernel
from .device import DeviceProfile
from .kernels import (NO_DEADLINE, InferenceRequest, KernelSpec, block_count,
                      kernel_cost)
from .rng import SplitMix64
from .tuning import DEFAULT_CONFIG, ClusterKey, TuningTable, footprint_efficiency

POLICY_VARIANTS = ("fifo", "edf", "ooo", "time-mux", "space-mux")


@dataclass(frozen=True)
class PolicyParams:
    pad_budget: float = DEFAULT_PAD_BUDGET
    max_delay_fraction: float = 0.5
    straggler_threshold: float = 2.0
    eviction_window: int = 32
    eviction_min_samples: int = 8
    jitter_width: float = 0.15
    stagger_horizon: int = 10_000  # ns a withheld cluster waits for partners
    duration_noise: float = 0.0  # decouples predicted from actual durations

    def __post_init__(self):
        if not 0.0 <= self.pad_budget < 1.0:
            raise ValueError("pad_budget must be in [0, 1)")
        if not 0.0 <= self.max_delay_fraction <= 1.0:
            raise ValueError("max_delay_fraction must be in [0, 1]")
        if self.straggler_threshold <= 0:
            raise ValueError("straggler_threshold must be positive")
        if self.stagger_horizon < 1:
            raise ValueError("stagger_horizon must be >= 1 ns")


@dataclass(frozen=True)
class SchedulerPolicy:
    variant: str
    params: PolicyParams = field(default_factory=PolicyParams)

    def __post_init__(self):
        if self.variant not in POLICY_VARIANTS:
            raise ValueError(
                f"unknown policy {self.variant!r}; choose from {POLICY_VARIANTS}")


@dataclass(frozen=True)
class TimelineEntry:
    start: int
    end: int
    sm_allocation: int
    payload: str  # kernel id list or superkernel id
    context_id: str


@dataclass
class Dispatch:
    dispatch_id: int
    kernel_ids: tuple
    super_id: str | None
    stream_ids: tuple
    start: int
    end: int
    sm_allocation: int
    context_id: str
    ctx_switch: bool
    useful_flops: int
    padded_flops: int
    predicted_duration: int
    duration: int
    infeasible: bool = False

    def timeline_entry(self) -> TimelineEntry:
        payload = self.super_id or ",".join(str(k) for k in self.kernel_ids)
        return TimelineEntry(start=self.start, end=self.end,
                             sm_allocation=self.sm_allocation,
                             payload=payload, context_id=self.context_id)


@dataclass
class EvictionRecord:
    stream_id: str
    time: int
    cancelled_dispatch_ids: tuple
    evicted_request_ids: tuple


@dataclass
class CompletionInfo:
    dispatch: Dispatch
    finished_requests: list  # (InferenceRequest, completion_time)


def slack(kernel: KernelSpec, now: int, predicted_remaining: int) -> int:
    """Deadline minus now minus predicted remaining critical-path work."""
    if predicted_remaining < 0:
        raise ValueError("predicted_remaining must be >= 0")
    return kernel.deadline - now - predicted_remaining


@dataclass
class _RequestState:
    request: InferenceRequest
    remaining: set
    evicted: bool = False
    completed_at: int | None = None


class Scheduler:
    """Owns queues, in-flight dispatches, and per-stream degradation stats."""

    def __init__(self, profile: DeviceProfile, policy: SchedulerPolicy,
                 tuning_table: TuningTable | None = None,
                 jitter_rng: SplitMix64 | None = None):
        self.profile = profile
        self.policy = policy
        self.params = policy.params
        self.table = tuning_table
        self.jitter_rng = jitter_rng or SplitMix64(0)

        self.requests: dict[int, _RequestState] = {}
        self.kernel_request: dict[int, int] = {}
        self.kernel_index: dict[int, int] = {}
        self.ready: dict[int, KernelSpec] = {}
        self.blocked: dict[int, KernelSpec] = {}
        self.pending_deps: dict[int, set] = {}
        self.completed_kernels: set = set()
        self.predicted: dict[int, int] = {}

        self.in_flight: dict[int, Dispatch] = {}
        self.free_sms = profile.sm_count
        self.last_context: str | None = None
        self.evicted_streams: set = set()
        self._rr_last: str | None = None
        self._withheld_signatures: set = set()
        self._withhold_times: dict = {}
        self._dispatch_seq = 0
        self._ratio_windows: dict[str, deque] = {}

    # ---- request intake -------------------------------------------------

    def add_request(self, request: InferenceRequest) -> bool:
        """Register a request; returns False if its stream was evicted."""
        state = _RequestState(request=request,
                              remaining={k.kernel_id for k in request.kernels})
        self.requests[request.request_id] = state
        if request.stream_id in self.evicted_streams:
            state.evicted = True
            return False
        for idx, kernel in enumerate(request.kernels):
            kid = kernel.kernel_id
            self.kernel_request[kid] = request.request_id
            self.kernel_index[kid] = idx
            self.predicted[kid] = kernel_cost(kernel, self._solo_config(kernel),
                                              self.profile).duration
            deps = set(kernel.deps)
            if deps:
                self.blocked[kid] = kernel
                self.pending_deps[kid] = deps
            else:
                self.ready[kid] = kernel
        return True

    def _solo_config(self, kernel: KernelSpec):
        if self.table is None:
            return DEFAULT_CONFIG
        key = ClusterKey(kernel.op_kind, kernel.dtype, kernel.dims)
        return self.table.lookup_or_default(key, 1)

    def predicted_remaining(self, kernel: KernelSpec) -> int:
        """Critical-path prediction: this kernel plus unfinished successors."""
        state = self.requests[self.kernel_request[kernel.kernel_id]]
        idx = self.kernel_index[kernel.kernel_id]
        total = 0
        for successor in state.request.kernels[idx:]:
            if successor.kernel_id not in self.completed_kernels:
                total += self.predicted[successor.kernel_id]
        return total

    def kernel_slack(self, kernel: KernelSpec, now: int) -> int:
        return slack(kernel, now, self.predicted_remaining(kernel))

    # ---- completion and eviction ---------------------------------------

    def complete(self, dispatch_id: int, now: int) -> CompletionInfo:
        dispatch = self.in_flight.pop(dispatch_id)
        self.free_sms += dispatch.sm_allocation
        finished = []
        ratio = dispatch.duration / max(dispatch.predicted_duration, 1)
        for kid in dispatch.kernel_ids:
            self.completed_kernels.add(kid)
            state = self.requests[self.kernel_request[kid]]
            state.remaining.discard(kid)
            if not state.remaining and state.completed_at is None:
                state.completed_at = now
                finished.append((state.request, now))
            self._unlock_dependents(kid, state)
        for stream in dispatch.stream_ids:
            self._ratio_windows.setdefault(
                stream, deque(maxlen=self.params.eviction_window)).append(ratio)
        return CompletionInfo(dispatch=dispatch, finished_requests=finished)

    def _unlock_dependents(self, done_kid: int, state: _RequestState):
        for kernel in state.request.kernels:
            kid = kernel.kernel_id
            if kid in self.pending_deps:
                self.pending_deps[kid].discard(done_kid)
                if not self.pending_deps[kid]:
                    del self.pending_deps[kid]
                    self.ready[kid] = self.blocked.pop(kid)

    def straggler_ratio(self, stream_id: str) -> float | None:
        """p99 of observed/predicted duration ratios over the sliding window."""
        window = self._ratio_windows.get(stream_id)
        if not window or len(window) < self.params.eviction_min_samples:
            return None
        ordered = sorted(window)
        rank = max(1, math.ceil(0.99 * len(ordered)))
        return ordered[rank - 1]

    def find_stragglers(self) -> list:
        out = []
        for stream in sorted(self._ratio_windows):
            if stream in self.evicted_streams:
                continue
            ratio = self.straggler_ratio(stream)
            if ratio is not None and ratio > self.params.straggler_threshold:
                out.append(stream)
        return out

    def evict_straggler(self, stream_id: str, now: int) -> EvictionRecord:
        """Cancel a degraded stream's in-flight work and drop its queues."""
        self.evicted_streams.add(stream_id)
        cancelled = []
        for did, dispatch in list(self.in_flight.items()):
            if set(dispatch.stream_ids) == {stream_id}:
                cancelled.append(did)
                del self.in_flight[did]
                self.free_sms += dispatch.sm_allocation
        evicted_requests = []
        for rid, state in self.requests.items():
            if state.request.stream_id != stream_id or state.completed_at is not None:
                continue
            if not state.evicted:
                state.evicted = True
                evicted_requests.append(rid)
            for kernel in state.request.kernels:
                self.ready.pop(kernel.kernel_id, None)
                self.blocked.pop(kernel.kernel_id, None)
                self.pending_deps.pop(kernel.kernel_id, None)
        return EvictionRecord(stream_id=stream_id, time=now,
                              cancelled_dispatch_ids=tuple(cancelled),
                              evicted_request_ids=tuple(sorted(evicted_requests)))

    # ---- dispatch helpers ----------------------------------------------

    def _active_streams(self) -> list:
        streams = {k.stream_id for k in self.ready.values()}
        for dispatch in self.in_flight.values():
            streams.update(dispatch.stream_ids)
        return sorted(streams - self.evicted_streams)

    def _noise_factor(self) -> float:
        w = self.params.duration_noise
        if w <= 0:
            return 1.0
        return 1.0 + self.jitter_rng.uniform(-w, w)

    def _make_dispatch(self, kernels, now, duration, predicted, alloc, context,
                       ctx_switch=False, super_id=None, useful=None, padded=None,
                       infeasible=False) -> Dispatch:
        self._dispatch_seq += 1
        start = now + (self.profile.context_switch_cost if ctx_switch else 0)
        useful = sum(k.flops for k in kernels) if useful is None else useful
        dispatch = Dispatch(
            dispatch_id=self._dispatch_seq,
            kernel_ids=tuple(k.kernel_id for k in kernels),
            super_id=super_id,
            stream_ids=tuple(sorted({k.stream_id for k in kernels})),
            start=start, end=start + duration, sm_allocation=alloc,
            context_id=context, ctx_switch=ctx_switch,
            useful_flops=useful,
            padded_flops=useful if padded is None else padded,
            predicted_duration=predicted, duration=duration,
            infeasible=infeasible)
        for k in kernels:
            self.ready.pop(k.kernel_id, None)
        self.in_flight[dispatch.dispatch_id] = dispatch
        self.free_sms -= alloc
        self.last_context = context
        return dispatch

    # ---- policy steps ---------------------------------------------------

    def step(self, now: int):
        """Advance the policy; returns (dispatches, withheld, wakeup_time)."""
        variant = self.policy.variant
        if variant in ("fifo", "edf"):
            return self._step_serial(now, by_deadline=(variant == "edf"))
        if variant == "time-mux":
            return self._step_time_mux(now)
        if variant == "space-mux":
            return self._step_space_mux(now)
        return self._step_ooo(now)

    def _ready_list(self) -> list:
        return [k for k in self.ready.values()
                if k.stream_id not in self.evicted_streams]

    def _step_serial(self, now, by_deadline):
        if self.in_flight or not self._ready_list():
            return [], [], None
        if by_deadline:
            kernel = min(self._ready_list(), key=lambda k: (k.deadline, k.kernel_id))
        else:
            kernel = min(self._ready_list(), key=lambda k: (k.arrival, k.kernel_id))
        cost = kernel_cost(kernel, self._solo_config(kernel), self.profile)
        duration = math.ceil(cost.duration * self._noise_factor())
        dispatch = self._make_dispatch(
            [kernel], now, duration, cost.duration, self.profile.sm_count,
            kernel.stream_id, infeasible=self.kernel_slack(kernel, now) < 0)
        return [dispatch], [], None

    def _step_time_mux(self, now):
        if self.in_flight:
            return [], [], None
        streams = sorted({k.stream_id for k in self._ready_list()})
        if not streams:
            return [], [], None
        # Strict round robin: first stream cyclically after the last served.
        if self._rr_last is None or self._rr_last >= streams[-1]:
            stream = streams[0]
        else:
            stream = next(s for s in streams if s > self._rr_last)
        self._rr_last = stream
        kernel = min((k for k in self._ready_list() if k.stream_id == stream),
                     key=lambda k: (k.arrival, k.kernel_id))
        cost = kernel_cost(kernel, self._solo_config(kernel), self.profile)
        duration = math.ceil(cost.duration * self._noise_factor())
        ctx_switch = self.last_context is not None and self.last_context != stream
        dispatch = self._make_dispatch(
            [kernel], now, duration, cost.duration, self.profile.sm_count,
            stream, ctx_switch=ctx_switch,
            infeasible=self.kernel_slack(kernel, now) < 0)
        return [dispatch], [], None

    def _shared_duration(self, kernel: KernelSpec, tenants: int) -> int:
        """Roofline duration on a fair 1/t device slice, with the synthetic
        degradation of a full-device-tuned kernel granted only a slice."""
        config = self._solo_config(kernel)
        if tenants <= 1:
            return kernel_cost(kernel, config, self.profile).duration
        share = 1.0 / tenants
        blocks = block_count(kernel.op_kind, kernel.dims, config.tile_m,
                             config.tile_n)
        capacity = share * self.profile.block_capacity
        occupancy = min(1.0, blocks / capacity)
        degradation = footprint_efficiency(share)
        peak = self.profile.peak(kernel.path) * share * occupancy * degradation
        compute_ns = math.ceil(kernel.flops / peak * 1e9)
        memory_ns = math.ceil(
            kernel.bytes / (self.profile.mem_bandwidth * share) * 1e9)
        return max(compute_ns, memory_ns)

    def _step_space_mux(self, now):
        active = self._active_streams()
        tenants = len(active)
        if tenants == 0:
            return [], [], None
        alloc = max(1, self.profile.sm_count // tenants)
        busy_streams = {s for d in self.in_flight.values() for s in d.stream_ids}
        width = self.params.jitter_width * (1 + tenants % 2) if tenants >= 2 else 0.0
        dispatches = []
        for stream in active:
            if stream in busy_streams:
                continue
            candidates = [k for k in self._ready_list() if k.stream_id == stream]
            if not candidates or self.free_sms < alloc:
                continue
            kernel = min(candidates, key=lambda k: (k.arrival, k.kernel_id))
            base = self._shared_duration(kernel, tenants)
            factor = 1.0 + (self.jitter_rng.uniform(0.0, width) if width else 0.0)
            duration = math.ceil(base * factor * self._noise_factor())
            dispatches.append(self._make_dispatch(
                [kernel], now, duration, base, alloc, stream,
                infeasible=self.kernel_slack(kernel, now) < 0))
        return dispatches, [], None

    def _step_ooo(self, now):
        ready = self._ready_list()
        if not ready:
            return [], [], None
        tenancy = max(1, len(self._active_streams()))
        clusters = cluster_shapes(ready, self.params.pad_budget)
        scored = []
        for cluster in clusters:
            slacks = {k.kernel_id: self.kernel_slack(k, now) for k in cluster.members}
            has_infeasible = any(s < 0 for s in slacks.values())
            scored.append((0 if has_infeasible else 1, cluster.earliest_deadline,
                           min(slacks), cluster, slacks, has_infeasible))
        scored.sort(key=lambda item: item[:3])
        dispatches, withheld, wakeups = [], [], []
        for _, _, _, cluster, slacks, has_infeasible in scored:
            sk = form_superkernel(cluster, self.table, self.profile, tenancy)
            signature = frozenset(k.kernel_id for k in cluster.members)
            can_delay = (not has_infeasible
                         and sk.cost.efficiency < 1.0
                         and all(self._delay_allowed(k, slacks[k.kernel_id])
                                 for k in cluster.members))
            if can_delay and signature not in self._withheld_signatures:
                # Stagger once per cluster composition, awaiting partners; an
                # unchanged cluster at the next look is dispatched as-is.
                self._withheld_signatures.add(signature)
                for k in cluster.members:
                    self._withhold_times.setdefault(k.kernel_id, now)
                withheld.append(tuple(k.kernel_id for k in cluster.members))
                wakeups.append(self._withhold_expiry(now, cluster))
                continue
            alloc = min(self.profile.sm_count,
                        math.ceil(sk.cost.block_count / self.profile.blocks_per_sm))
            if self.free_sms < alloc:
                continue
            duration = math.ceil(sk.cost.duration * self._noise_factor())
            dispatches.append(self._make_dispatch(
                list(cluster.members), now, duration, sk.cost.duration, alloc,
                "jit", super_id=sk.super_id, useful=sk.useful_flops,
                padded=sk.flops, infeasible=has_infeasible))
        wakeup = min(wakeups) if wakeups else None
        return dispatches, withheld, wakeup

    def _delay_allowed(self, kernel: KernelSpec, kernel_slack: int) -> bool:
        slo = kernel.deadline - self.requests[
            self.kernel_request[kernel.kernel_id]].request.arrival
        return kernel_slack >= self.params.max_delay_fraction * slo

    def _withhold_expiry(self, now: int, cluster) -> int:
        bound = now + self.params.stagger_horizon
        for kernel in cluster.members:
            if kernel.deadline >= NO_DEADLINE:
                continue
            slo = kernel.deadline - self.requests[
                self.kernel_request[kernel.kernel_id]].request.arrival
            boundary = int(kernel.deadline - self.predicted_remaining(kernel)
                           - self.params.max_delay_fraction * slo)
            bound = min(bound, boundary)
        return max(bound, now + 1)
