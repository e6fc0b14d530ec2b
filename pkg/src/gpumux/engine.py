"""Deterministic discrete-event simulation.

One simulation is one single-threaded event loop over a totally ordered heap
of (time, kind, id) events: completions before arrivals before scheduler
wakeups at equal timestamps, ascending id within a kind. All events at the
current timestamp are drained before the scheduler takes a step, so a burst
of simultaneous arrivals is visible to a single coalescing decision.

Identical (workload, profile, policy, seed) inputs produce byte-identical
serialized traces and metrics.
"""

from __future__ import annotations

import csv
import heapq
import io
import json
import math
from dataclasses import dataclass, field

from .device import DeviceProfile
from .kernels import (NO_DEADLINE, InferenceRequest, KernelSpec,
                      LatencyConstraint, lower_model)
from .rng import SplitMix64, substream_seed
from .scheduler import Scheduler, SchedulerPolicy, TimelineEntry
from .tuning import TuningTable

_EVENT_COMPLETE = 0
_EVENT_ARRIVAL = 1
_EVENT_WAKEUP = 2

_ARRIVAL_KINDS = ("fixed", "poisson", "burst")


class WorkloadError(ValueError):
    """Malformed workload specification."""


def _require_fields(raw: dict, required: set, optional: set, origin: str) -> None:
    unknown = set(raw) - required - optional
    if unknown:
        raise WorkloadError(f"{origin}: unknown field(s) {sorted(unknown)}")
    missing = required - set(raw)
    if missing:
        raise WorkloadError(f"{origin}: missing field(s) {sorted(missing)}")


@dataclass(frozen=True)
class ArrivalSpec:
    kind: str
    schedule: tuple = ()
    rate_per_s: float = 0.0
    burst_factor: float = 4.0
    burst_period_ns: int = 100_000_000
    burst_duty: float = 0.2

    def __post_init__(self):
        if self.kind not in _ARRIVAL_KINDS:
            raise WorkloadError(f"unknown arrival kind {self.kind!r}")
        if self.kind == "fixed":
            if any(t < 0 for t in self.schedule):
                raise WorkloadError("fixed schedule times must be >= 0")
            object.__setattr__(self, "schedule", tuple(int(t) for t in self.schedule))
        else:
            if self.rate_per_s <= 0:
                raise WorkloadError("arrival rate must be positive")
        if self.kind == "burst":
            if self.burst_factor <= 0 or self.burst_period_ns <= 0:
                raise WorkloadError("burst parameters must be positive")
            if not 0.0 < self.burst_duty < 1.0:
                raise WorkloadError("burst_duty must be in (0, 1)")

    @classmethod
    def from_dict(cls, raw: dict, origin: str) -> "ArrivalSpec":
        _require_fields(raw, {"kind"},
                        {"schedule", "rate_per_s", "burst_factor",
                         "burst_period_ns", "burst_duty"}, origin)
        kwargs = dict(raw)
        if "schedule" in kwargs:
            kwargs["schedule"] = tuple(kwargs["schedule"])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        if self.kind == "fixed":
            return {"kind": "fixed", "schedule": list(self.schedule)}
        out = {"kind": self.kind, "rate_per_s": self.rate_per_s}
        if self.kind == "burst":
            out.update(burst_factor=self.burst_factor,
                       burst_period_ns=self.burst_period_ns,
                       burst_duty=self.burst_duty)
        return out


@dataclass(frozen=True)
class StreamSpec:
    stream_id: str
    model_name: str
    slo_ns: int | None  # None means batch class (no deadline)
    arrival: ArrivalSpec
    batch: int = 1

    @classmethod
    def from_dict(cls, raw: dict, origin: str) -> "StreamSpec":
        _require_fields(raw, {"stream_id", "model_name", "slo_ns", "arrival"},
                        {"batch"}, origin)
        arrival = ArrivalSpec.from_dict(raw["arrival"], f"{origin}.arrival")
        return cls(stream_id=str(raw["stream_id"]), model_name=raw["model_name"],
                   slo_ns=raw["slo_ns"], arrival=arrival,
                   batch=int(raw.get("batch", 1)))

    def constraint(self) -> LatencyConstraint:
        if self.slo_ns is None:
            return LatencyConstraint.batch()
        return LatencyConstraint(int(self.slo_ns))

    def to_dict(self) -> dict:
        return {"stream_id": self.stream_id, "model_name": self.model_name,
                "slo_ns": self.slo_ns, "arrival": self.arrival.to_dict(),
                "batch": self.batch}


@dataclass(frozen=True)
class WorkloadSpec:
    streams: tuple
    duration: int
    max_tenancy: int = 16

    def __post_init__(self):
        if self.duration <= 0:
            raise WorkloadError("duration must be positive")
        ids = [s.stream_id for s in self.streams]
        if len(ids) != len(set(ids)):
            raise WorkloadError("stream ids must be unique")
        object.__setattr__(self, "streams", tuple(self.streams))

    @classmethod
    def from_dict(cls, raw: dict) -> "WorkloadSpec":
        _require_fields(raw, {"streams", "duration_ns"},
                        {"max_tenancy", "provenance"}, "workload")
        streams = tuple(StreamSpec.from_dict(s, f"streams[{i}]")
                        for i, s in enumerate(raw["streams"]))
        return cls(streams=streams, duration=int(raw["duration_ns"]),
                   max_tenancy=int(raw.get("max_tenancy", 16)))

    @classmethod
    def load(cls, path: str) -> "WorkloadSpec":
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise WorkloadError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {"streams": [s.to_dict() for s in self.streams],
                "duration_ns": self.duration, "max_tenancy": self.max_tenancy}


def _sample_arrivals(spec: ArrivalSpec, duration: int, rng: SplitMix64) -> list:
    if spec.kind == "fixed":
        return [t for t in spec.schedule if t <= duration]
    rate_per_ns = spec.rate_per_s / 1e9
    arrivals = []
    t = 0.0
    while True:
        rate = rate_per_ns
        if spec.kind == "burst":
            # Piecewise-constant rate: a periodic high-rate window. The rate
            # in force at the current instant drives the next gap.
            in_burst = (t % spec.burst_period_ns) < spec.burst_duty * spec.burst_period_ns
            if in_burst:
                rate = rate_per_ns * spec.burst_factor
        t += rng.expovariate(rate)
        if t > duration:
            return arrivals
        arrivals.append(int(t))


def generate_workload(spec: WorkloadSpec, seed: int = 0) -> list:
    """Materialize requests with globally unique, deterministic ids."""
    requests = []
    next_kernel_id = 0
    next_request_id = 0
    for stream in spec.streams:
        rng = SplitMix64(substream_seed(seed, "arrivals", stream.stream_id))
        constraint = stream.constraint()
        protos = lower_model(stream.model_name, stream.batch)
        for arrival in _sample_arrivals(stream.arrival, spec.duration, rng):
            deadline = min(arrival + constraint.slo, NO_DEADLINE)
            kernels = []
            base = next_kernel_id
            for proto in protos:
                kernels.append(KernelSpec(
                    kernel_id=base + proto.kernel_id,
                    stream_id=stream.stream_id, op_kind=proto.op_kind,
                    dims=proto.dims, dtype=proto.dtype,
                    deps=frozenset(base + d for d in proto.deps),
                    arrival=arrival, deadline=deadline))
            next_kernel_id += len(protos)
            requests.append(InferenceRequest(
                request_id=next_request_id, stream_id=stream.stream_id,
                kernels=tuple(kernels), arrival=arrival, constraint=constraint))
            next_request_id += 1
    requests.sort(key=lambda r: (r.arrival, r.request_id))
    return requests


def percentile(samples: list, p: float) -> int:
    """Nearest-rank percentile: value at 1-based index ceil(p * n)."""
    if not samples:
        raise ValueError("percentile of empty sample set")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    ordered = sorted(samples)
    rank = max(1, math.ceil(p * len(ordered)))
    return ordered[rank - 1]


@dataclass
class Metrics:
    policy: str
    profile: str
    seed: int
    duration: int
    global_stats: dict = field(default_factory=dict)
    stream_stats: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"policy": self.policy, "profile": self.profile,
                "seed": self.seed, "duration_ns": self.duration,
                "global": self.global_stats, "streams": self.stream_stats}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    _CSV_COLUMNS = ("scope", "requests", "completed", "evicted", "pending",
                    "slo_misses", "slo_attainment", "throughput_rps",
                    "throughput_flops", "latency_p50_ns", "latency_p90_ns",
                    "latency_p99_ns", "utilization", "flop_efficiency")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self._CSV_COLUMNS)
        for scope, stats in [("global", self.global_stats)] + sorted(
                self.stream_stats.items()):
            writer.writerow([scope] + [stats.get(c, "") for c in self._CSV_COLUMNS[1:]])
        return buf.getvalue()


class EventTrace:
    """Ordered event records, serialized as newline-delimited JSON."""

    def __init__(self):
        self.events: list = []

    def record(self, time: int, kind: str, **payload):
        self.events.append({"time": time, "kind": kind, **payload})

    def to_ndjson(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)


@dataclass
class RunResult:
    metrics: Metrics
    trace: EventTrace
    timeline: list  # TimelineEntry, in dispatch order
    requests: list


def _stats_for(requests_info: list, usage: dict, window: int,
               busy_span: int, profile: DeviceProfile) -> dict:
    completed = [r for r in requests_info if r["status"] == "completed"]
    evicted = [r for r in requests_info if r["status"] == "evicted"]
    pending = [r for r in requests_info if r["status"] == "pending"]
    latencies = [r["latency"] for r in completed]
    misses = sum(1 for r in completed if not r["slo_met"]) + len(evicted)
    attainable = len(completed) + len(evicted)
    useful = usage["useful"]
    busy_sm_ns = usage["busy_sm_ns"]
    # Busy time as seen by the whole device; padding FLOPs never count as
    # useful, so efficiency measures delivered work, not occupancy.
    busy_s = busy_sm_ns / profile.sm_count / 1e9
    return {
        "requests": len(requests_info),
        "completed": len(completed),
        "evicted": len(evicted),
        "pending": len(pending),
        "slo_misses": misses,
        "slo_attainment": (1.0 - misses / attainable) if attainable else 1.0,
        "throughput_rps": len(completed) / (busy_span / 1e9) if busy_span else 0.0,
        "throughput_flops": useful / (busy_span / 1e9) if busy_span else 0.0,
        "latency_p50_ns": percentile(latencies, 0.5) if latencies else None,
        "latency_p90_ns": percentile(latencies, 0.9) if latencies else None,
        "latency_p99_ns": percentile(latencies, 0.99) if latencies else None,
        "utilization": busy_sm_ns / (profile.sm_count * window) if window else 0.0,
        "flop_efficiency": (useful / (profile.peak_flops_dense * busy_s)
                            if busy_s else 0.0),
    }


def run(workload: WorkloadSpec, profile: DeviceProfile, policy: SchedulerPolicy,
        seed: int = 0, tuning_table: TuningTable | None = None) -> RunResult:
    """Simulate one policy over one workload; wall-clock independent."""
    requests = generate_workload(workload, seed)
    jitter_rng = SplitMix64(substream_seed(seed, "jitter"))
    sched = Scheduler(profile, policy, tuning_table, jitter_rng)
    trace = EventTrace()
    dispatch_records: dict = {}
    cancelled: dict = {}  # dispatch_id -> cancellation time
    request_completion: dict = {}

    heap: list = []
    for req in requests:
        heapq.heappush(heap, (req.arrival, _EVENT_ARRIVAL, req.request_id, req))
    wakeup_seq = 0

    while heap:
        now = heap[0][0]
        # Drain every event at this timestamp before the scheduler steps.
        while heap and heap[0][0] == now:
            _, kind, eid, payload = heapq.heappop(heap)
            if kind == _EVENT_COMPLETE:
                if eid in cancelled:
                    continue
                info = sched.complete(eid, now)
                trace.record(now, "complete",
                             dispatch_id=eid,
                             kernel_ids=list(info.dispatch.kernel_ids),
                             super_id=info.dispatch.super_id)
                for request, when in info.finished_requests:
                    request_completion[request.request_id] = when
            elif kind == _EVENT_ARRIVAL:
                accepted = sched.add_request(payload)
                trace.record(now, "arrival", request_id=payload.request_id,
                             stream_id=payload.stream_id)
                if not accepted:
                    trace.record(now, "evict", stream_id=payload.stream_id,
                                 request_ids=[payload.request_id],
                                 reason="stream-evicted")
            # wakeup events only force a scheduler step

        for stream in sched.find_stragglers():
            record = sched.evict_straggler(stream, now)
            for did in record.cancelled_dispatch_ids:
                cancelled[did] = now
            trace.record(now, "evict", stream_id=stream,
                         request_ids=list(record.evicted_request_ids),
                         reason="straggler")

        dispatches, withheld, wakeup = sched.step(now)
        for kernel_ids in withheld:
            trace.record(now, "withhold", kernel_ids=list(kernel_ids))
        for d in dispatches:
            if d.ctx_switch:
                trace.record(now, "context_switch", context_id=d.context_id)
            trace.record(d.start, "dispatch", dispatch_id=d.dispatch_id,
                         kernel_ids=list(d.kernel_ids), super_id=d.super_id,
                         sm_allocation=d.sm_allocation, context_id=d.context_id,
                         end=d.end, infeasible=d.infeasible)
            dispatch_records[d.dispatch_id] = d
            heapq.heappush(heap, (d.end, _EVENT_COMPLETE, d.dispatch_id, None))
        if wakeup is not None:
            wakeup_seq += 1
            heapq.heappush(heap, (wakeup, _EVENT_WAKEUP, wakeup_seq, None))

    # Cancelled dispatches stop occupying the device at eviction time.
    timeline = []
    for did in sorted(dispatch_records):
        d = dispatch_records[did]
        entry = d.timeline_entry()
        if did in cancelled:
            cut = min(entry.end, cancelled[did])
            if cut <= entry.start:
                continue
            entry = TimelineEntry(start=entry.start, end=cut,
                                  sm_allocation=entry.sm_allocation,
                                  payload=entry.payload,
                                  context_id=entry.context_id)
        timeline.append(entry)

    # ---- metrics ---------------------------------------------------------
    horizon = workload.duration
    per_stream_requests: dict = {s.stream_id: [] for s in workload.streams}
    all_requests_info = []
    for req in requests:
        completed_at = request_completion.get(req.request_id)
        state = sched.requests.get(req.request_id)
        if state is not None and state.evicted and completed_at is None:
            status = "evicted"
        elif completed_at is None or completed_at > horizon:
            status = "pending"
        else:
            status = "completed"
        info = {
            "request_id": req.request_id, "stream_id": req.stream_id,
            "status": status,
            "latency": (completed_at - req.arrival) if status == "completed" else None,
            "slo_met": (status == "completed"
                        and completed_at <= req.deadline),
            "completed_at": completed_at,
        }
        all_requests_info.append(info)
        per_stream_requests[req.stream_id].append(info)

    completed_dispatches = [d for d in dispatch_records.values()
                            if d.dispatch_id not in cancelled]
    completed_kernel_flops: dict = {}
    busy_by_stream: dict = {s.stream_id: 0 for s in workload.streams}
    for d in completed_dispatches:
        share = d.useful_flops / len(d.stream_ids)
        for stream in d.stream_ids:
            completed_kernel_flops[stream] = completed_kernel_flops.get(stream, 0) + share
            busy_by_stream[stream] = busy_by_stream.get(stream, 0) + \
                (d.end - d.start) * d.sm_allocation // len(d.stream_ids)

    completions = [request_completion[r["request_id"]]
                   for r in all_requests_info if r["status"] == "completed"]
    first_arrival = min((r.arrival for r in requests), default=0)
    busy_span = (max(completions) - first_arrival) if completions else 0
    window = max(horizon, max(completions, default=0))

    useful_total = sum(d.useful_flops for d in completed_dispatches)
    busy_sm_ns = sum((d.end - d.start) * d.sm_allocation
                     for d in completed_dispatches)
    global_stats = _stats_for(
        all_requests_info,
        {"useful": useful_total, "busy_sm_ns": busy_sm_ns},
        window, busy_span, profile)

    stream_stats = {}
    for stream in workload.streams:
        sid = stream.stream_id
        stream_stats[sid] = _stats_for(
            per_stream_requests[sid],
            {"useful": completed_kernel_flops.get(sid, 0),
             "busy_sm_ns": busy_by_stream.get(sid, 0)},
            window, busy_span, profile)

    metrics = Metrics(policy=policy.variant, profile=profile.name, seed=seed,
                      duration=horizon, global_stats=global_stats,
                      stream_stats=stream_stats)
    return RunResult(metrics=metrics, trace=trace, timeline=timeline,
                     requests=all_requests_info)


def compare(workload: WorkloadSpec, profile: DeviceProfile, policies: list,
            seed: int = 0, tuning_table: TuningTable | None = None,
            jobs: int = 1) -> dict:
    """Run each policy on identical arrivals; ratios are vs the first policy."""
    if not policies:
        raise ValueError("at least one policy required")
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run, workload, profile, p, seed, tuning_table)
                       for p in policies]
            results = [f.result() for f in futures]  # merged by policy index
    else:
        results = [run(workload, profile, p, seed, tuning_table)
                   for p in policies]
    base = results[0].metrics.global_stats
    ratios = []
    for policy, result in zip(policies, results):
        stats = result.metrics.global_stats
        ratios.append({
            "policy": policy.variant,
            "throughput_flops_ratio": (stats["throughput_flops"] / base["throughput_flops"]
                                       if base["throughput_flops"] else None),
            "throughput_rps_ratio": (stats["throughput_rps"] / base["throughput_rps"]
                                     if base["throughput_rps"] else None),
            "slo_attainment_delta": stats["slo_attainment"] - base["slo_attainment"],
        })
    return {"policies": [p.variant for p in policies],
            "results": results, "ratios": ratios}
