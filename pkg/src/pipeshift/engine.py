"""Deterministic serving engine: workload, pipelined inference, metrics.

Execution model: a micro-batch (one request's prefill, one decode round of
the continuously-batched decode set, or the commit barrier) traverses the
pipeline stages in order. A stage computes, appends the step's KV to its
resident layer groups, then forwards activations to the next stage through
the inference communicator group. Decode rounds are autoregressive, so a
new round starts only after the previous one leaves the last stage.

Costs are deliberately linear per GPU (seconds per layer-token knobs on
the GPU spec); they are fidelity dials for exploring configuration
trade-offs, not kernel claims.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from math import ceil
from typing import Callable, Optional

from .cluster import GpuSpec, ModelSpec, PPConfig
from .events import EventScheduler, EventTrace, stable_hash
from .fabric import CommFabric
from .kvstore import KvOverflow, KvStore
from .migrator import MigrationManager
from .weights import WeightLoader

PATTERN_MEANS = {"prefill_heavy": (512, 16), "decode_heavy": (128, 512)}


@dataclass
class Request:
    id: str
    arrival_time: float
    input_len: int
    output_len: int
    pattern: str = "prefill_heavy"
    state: str = "queued"  # queued | prefill | decode | done
    first_token_time: Optional[float] = None
    completion_time: Optional[float] = None
    generated: int = 0
    preemptions: int = 0


@dataclass
class WorkloadSpec:
    pattern: str  # prefill_heavy | decode_heavy | shift_schedule
    rate: float
    num_requests: int
    shifts: tuple[tuple[float, str], ...] = ()
    jitter: bool = False


def generate_workload(spec: WorkloadSpec, seed: int) -> list[Request]:
    """Poisson arrivals with per-pattern lengths, deterministic per seed.

    Lengths default to the pattern means exactly; jitter mode draws them
    uniformly within +/-25% of the mean.
    """
    if spec.rate <= 0:
        raise ValueError("rate must be positive")
    if spec.pattern == "shift_schedule" and not spec.shifts:
        raise ValueError("shift_schedule needs at least one (time, pattern) entry")
    rng = random.Random(seed)
    out: list[Request] = []
    t = 0.0
    for i in range(spec.num_requests):
        t += rng.expovariate(spec.rate)
        if spec.pattern == "shift_schedule":
            pattern = spec.shifts[0][1]
            for when, name in spec.shifts:
                if t >= when:
                    pattern = name
        else:
            pattern = spec.pattern
        mean_in, mean_out = PATTERN_MEANS[pattern]
        if spec.jitter:
            input_len = rng.randint(ceil(mean_in * 0.75), int(mean_in * 1.25))
            output_len = rng.randint(ceil(mean_out * 0.75), int(mean_out * 1.25))
        else:
            input_len, output_len = mean_in, mean_out
        out.append(Request(id=f"r{i:04d}", arrival_time=t, input_len=input_len,
                           output_len=output_len, pattern=pattern))
    return out


@dataclass
class Metrics:
    ttft_mean: float = 0.0
    ttft_p99: float = 0.0
    tpot_mean: float = 0.0
    throughput: float = 0.0
    stop_time: float = 0.0
    migration_time: float = 0.0
    effective_kv_utilization: float = 1.0
    overflow_events: int = 0
    completed: int = 0
    reconfig_outcome: str = "none"

    def as_row(self) -> dict:
        return {
            "ttft_mean": self.ttft_mean, "ttft_p99": self.ttft_p99,
            "tpot_mean": self.tpot_mean, "throughput": self.throughput,
            "stop_time": self.stop_time, "migration_time": self.migration_time,
            "effective_kv_utilization": self.effective_kv_utilization,
            "overflow_events": self.overflow_events, "completed": self.completed,
            "reconfig_outcome": self.reconfig_outcome,
        }


def compute_metrics(trace: EventTrace) -> Metrics:
    """Derive the serving metrics from a completed trace."""
    arrivals: dict[str, tuple[float, int, int]] = {}
    firsts: dict[str, float] = {}
    dones: dict[str, float] = {}
    overflow = 0
    pause_total = 0.0
    migration_total = 0.0
    consumed = 0
    allocated = 0
    outcome = "none"
    end_time = trace.events[-1].time if len(trace) else 0.0
    pause_start: Optional[float] = None
    reconfig_start: Optional[float] = None
    for ev in trace:
        if ev.kind == "request_arrival":
            arrivals[ev.payload["id"]] = (
                ev.time, ev.payload["input_len"], ev.payload["output_len"])
        elif ev.kind == "first_token":
            firsts.setdefault(ev.payload["id"], ev.time)
        elif ev.kind == "request_done":
            dones[ev.payload["id"]] = ev.time
        elif ev.kind == "kv_overflow":
            overflow += 1
        elif ev.kind == "commit_pause_start":
            pause_start = ev.time
        elif ev.kind == "commit_pause_end" and pause_start is not None:
            pause_total += ev.time - pause_start
            pause_start = None
        elif ev.kind == "reconfigure_start":
            reconfig_start = ev.time
        elif ev.kind == "reconfigure_end":
            if reconfig_start is not None:
                migration_total += ev.time - reconfig_start
                reconfig_start = None
            outcome = ev.payload.get("outcome", outcome)
        elif ev.kind == "request_kv_freed":
            consumed += ev.payload["consumed"]
            allocated += ev.payload["allocated"]

    ttfts = []
    for rid, (arr, _inp, _out) in arrivals.items():
        if rid in firsts:
            ttfts.append(firsts[rid] - arr)
        else:
            ttfts.append(end_time - arr)  # censored: never served
    tpots = []
    for rid, done_t in dones.items():
        _arr, _inp, out_len = arrivals[rid]
        if out_len >= 2 and rid in firsts:
            tpots.append((done_t - firsts[rid]) / (out_len - 1))

    metrics = Metrics()
    metrics.overflow_events = overflow
    metrics.stop_time = pause_total
    metrics.migration_time = migration_total
    metrics.completed = len(dones)
    metrics.reconfig_outcome = outcome
    if ttfts:
        ordered = sorted(ttfts)
        metrics.ttft_mean = sum(ordered) / len(ordered)
        metrics.ttft_p99 = ordered[min(len(ordered) - 1, ceil(0.99 * len(ordered)) - 1)]
    if tpots:
        metrics.tpot_mean = sum(tpots) / len(tpots)
    if dones:
        first_arrival = min(arr for arr, _i, _o in arrivals.values())
        makespan = max(dones.values()) - first_arrival
        tokens = sum(arrivals[rid][1] + arrivals[rid][2] for rid in dones)
        if makespan > 0:
            metrics.throughput = tokens / makespan
    if allocated:
        metrics.effective_kv_utilization = consumed / allocated
    return metrics


def score(rows: list[Metrics]) -> list[float]:
    """Composite min-max score; latency metrics inverted, equal weights.

    Degenerate ranges (all rows identical in a metric) score 1.0 for every
    row in that metric.
    """
    if not rows:
        raise ValueError("need at least one metrics row")

    def normalize(values: list[float], invert: bool) -> list[float]:
        lo, hi = min(values), max(values)
        if hi == lo:
            return [1.0] * len(values)
        out = [(v - lo) / (hi - lo) for v in values]
        return [1.0 - v for v in out] if invert else out

    s_ttft = normalize([m.ttft_mean for m in rows], invert=True)
    s_tpot = normalize([m.tpot_mean for m in rows], invert=True)
    s_tp = normalize([m.throughput for m in rows], invert=False)
    return [(a + b + c) / 3 for a, b, c in zip(s_ttft, s_tpot, s_tp)]


@dataclass
class MicroBatch:
    mb_id: int
    kind: str  # prefill | decode
    requests: list[Request]
    config: PPConfig
    stage_idx: int = 0


class PipelineEngine:
    """Admission, stage traversal, and KV bookkeeping for one simulation."""

    def __init__(self, scheduler: EventScheduler, trace: EventTrace,
                 cluster: dict[int, GpuSpec], model: ModelSpec,
                 stores: dict[int, KvStore], fabric: CommFabric,
                 loader: WeightLoader, migration: MigrationManager,
                 config: PPConfig, max_batch: int = 32) -> None:
        self.scheduler = scheduler
        self.trace = trace
        self.cluster = cluster
        self.model = model
        self.stores = stores
        self.fabric = fabric
        self.loader = loader
        self.migration = migration
        self.committed_config = config
        self.max_batch = max_batch

        self.waiting: list[Request] = []
        self.decode_set: list[Request] = []
        self.paused = False
        self.in_flight = 0
        self.decode_round_active = False
        self._mb_seq = 0
        self._busy: dict[int, bool] = {g: False for g in cluster}
        self._stage_queues: dict[int, list[MicroBatch]] = {g: [] for g in cluster}
        self._drain_cb: Optional[Callable[[], None]] = None
        # Admitted-but-not-yet-appended prefills hold block reservations so a
        # burst of admissions cannot collectively oversubscribe a store.
        self._reservations: dict[str, dict[int, int]] = {}
        self._payload_seeds: dict[tuple[str, int], int] = {}
        self.steps_completed = 0

    def _payloads(self, request_id: str, group: int, start: int, count: int) -> list[int]:
        """Deterministic per-cell fingerprints; one hash per (request, group),
        then cheap integer mixing per token position."""
        seed = self._payload_seeds.get((request_id, group))
        if seed is None:
            seed = stable_hash(request_id, group)
            self._payload_seeds[(request_id, group)] = seed
        mask = (1 << 63) - 1
        return [(seed * 0x9E3779B97F4A7C15 + (start + i) * 0xBF58476D1CE4E5B9) & mask
                for i in range(count)]

    # -- request lifecycle -----------------------------------------------------

    def submit(self, request: Request) -> None:
        self.trace.emit(self.scheduler.now, "engine", "request_arrival",
                        id=request.id, input_len=request.input_len,
                        output_len=request.output_len, pattern=request.pattern)
        self.waiting.append(request)
        self.pump()

    def pump(self) -> None:
        """Admit work to stage 0: prefills first, then one decode round."""
        if self.paused:
            return
        admitted = True
        while admitted and self.waiting:
            admitted = False
            head = self.waiting[0]
            if self._prefill_fits(head):
                self.waiting.pop(0)
                head.state = "prefill"
                self._reserve(head)
                self._admit(MicroBatch(self._next_mb(), "prefill", [head],
                                       self.committed_config))
                admitted = True
        if self.decode_set and not self.decode_round_active:
            batch = self.decode_set[: self.max_batch]
            self.decode_round_active = True
            self._admit(MicroBatch(self._next_mb(), "decode", list(batch),
                                   self.committed_config))

    def _next_mb(self) -> int:
        self._mb_seq += 1
        return self._mb_seq

    def _prefill_fits(self, request: Request) -> bool:
        tokens = self._prefill_tokens(request)
        for gpu_id, store in self.stores.items():
            reserved = sum(r.get(gpu_id, 0) for r in self._reservations.values())
            if store.blocks_needed(request.id, tokens) > store.free_blocks - reserved:
                return False
        return True

    def _reserve(self, request: Request) -> None:
        tokens = self._prefill_tokens(request)
        self._reservations[request.id] = {
            gpu_id: store.blocks_needed(request.id, tokens)
            for gpu_id, store in self.stores.items()
        }

    def _unreserve(self, request: Request, gpu: int | None = None) -> None:
        held = self._reservations.get(request.id)
        if held is None:
            return
        if gpu is None:
            del self._reservations[request.id]
        else:
            held.pop(gpu, None)
            if not held:
                del self._reservations[request.id]

    def _prefill_tokens(self, request: Request) -> int:
        # recomputed prompt after a preemption includes generated tokens
        return request.input_len + max(0, request.generated - 1)

    # -- stage traversal ---------------------------------------------------------

    def _admit(self, mb: MicroBatch) -> None:
        self.in_flight += 1
        first_gpu = mb.config.gpu_order[0]
        self._stage_queues[first_gpu].append(mb)
        self._try_compute(first_gpu)

    def _try_compute(self, gpu: int) -> None:
        if self._busy[gpu] or not self._stage_queues[gpu]:
            return
        mb = self._stage_queues[gpu].pop(0)
        self._busy[gpu] = True
        self.loader.set_gpu_busy(gpu, True)
        layers = mb.config.layers_for(gpu)
        spec = self.cluster[gpu]
        if mb.kind == "prefill":
            tokens = self._prefill_tokens(mb.requests[0])
            duration = spec.prefill_cost * len(layers) * tokens
        else:
            duration = spec.decode_cost * len(layers) * max(1, len(mb.requests))
        self.trace.emit(self.scheduler.now, f"gpu{gpu}", "stage_start",
                        mb=mb.mb_id, mb_kind=mb.kind, stage=mb.stage_idx,
                        batch=len(mb.requests))
        self.scheduler.after(duration, lambda: self._stage_done(gpu, mb))

    def _stage_done(self, gpu: int, mb: MicroBatch) -> None:
        self._busy[gpu] = False
        self.loader.set_gpu_busy(gpu, False)
        self._append_step_kv(gpu, mb)
        self.trace.emit(self.scheduler.now, f"gpu{gpu}", "stage_end",
                        mb=mb.mb_id, mb_kind=mb.kind, stage=mb.stage_idx,
                        kv_util=round(self.stores[gpu].effective_utilization(), 6))
        order = mb.config.gpu_order
        if mb.stage_idx + 1 < len(order):
            nxt = order[mb.stage_idx + 1]
            tokens = (self._prefill_tokens(mb.requests[0])
                      if mb.kind == "prefill" else len(mb.requests))
            nbytes = max(1, tokens) * self.model.activation_bytes_per_token

            def forward(_t) -> None:
                mb.stage_idx += 1
                self._stage_queues[nxt].append(mb)
                self._try_compute(nxt)

            self.fabric.post_inference_transfer(gpu, nxt, nbytes, forward)
        else:
            self._mb_complete(mb)
        self._try_compute(gpu)

    def _append_step_kv(self, gpu: int, mb: MicroBatch) -> None:
        store = self.stores[gpu]
        groups = sorted(self.model.groups_of(mb.config.layers_for(gpu)))
        for request in list(mb.requests):
            if request.state == "done":
                continue
            if mb.kind == "prefill":
                start, count = 0, self._prefill_tokens(request)
            else:
                # decode writes the KV of the last generated token
                start = request.input_len + request.generated - 1
                count = 1
            if mb.kind == "prefill":
                self._unreserve(request, gpu)
            try:
                for group in groups:
                    already = 0
                    if request.id in store.tables:
                        already = store.tables[request.id].written.get(group, 0)
                    if already >= start + count:
                        continue  # replayed after preemption
                    payload = self._payloads(request.id, group, start, count)
                    store.append(request.id, group, count, payload)
                    self.migration.on_kv_written(gpu, request.id, group, start, count)
            except KvOverflow:
                self.trace.emit(self.scheduler.now, f"gpu{gpu}", "kv_overflow",
                                id=request.id, mb_kind=mb.kind)
                self._preempt(request, mb)

    def _preempt(self, request: Request, mb: MicroBatch) -> None:
        """Queue-on-overflow: drop the request's KV and recompute later."""
        request.preemptions += 1
        if request in mb.requests:
            mb.requests.remove(request)
        if request in self.decode_set:
            self.decode_set.remove(request)
        self._unreserve(request)
        self._free_request_kv(request)
        request.state = "queued"
        self.waiting.insert(0, request)
        self.trace.emit(self.scheduler.now, "engine", "request_preempted",
                        id=request.id)

    def _free_request_kv(self, request: Request) -> None:
        total_consumed = 0
        total_allocated = 0
        for store in self.stores.values():
            for _g, (consumed, allocated) in store.free_request(request.id).items():
                total_consumed += consumed
                total_allocated += allocated
        self.migration.on_request_freed(request.id)
        if total_allocated:
            self.trace.emit(self.scheduler.now, "engine", "request_kv_freed",
                            id=request.id, consumed=total_consumed,
                            allocated=total_allocated)

    def _mb_complete(self, mb: MicroBatch) -> None:
        now = self.scheduler.now
        self.steps_completed += 1
        if mb.kind == "prefill":
            for request in mb.requests:
                request.state = "decode"
                if request.first_token_time is None:
                    request.first_token_time = now
                    self.trace.emit(now, "engine", "first_token", id=request.id)
                if request.generated == 0:
                    request.generated = 1
                if request.generated >= request.output_len:
                    self._finish(request)
                else:
                    self.decode_set.append(request)
        elif mb.kind == "decode":
            self.decode_round_active = False
            for request in mb.requests:
                request.generated += 1
                if request.generated >= request.output_len:
                    if request in self.decode_set:
                        self.decode_set.remove(request)
                    self._finish(request)
        self.in_flight -= 1
        for stream in self.migration.streams.values():
            stream.pump()
        if self.in_flight == 0 and self._drain_cb is not None:
            cb, self._drain_cb = self._drain_cb, None
            cb()
        self.pump()

    def _finish(self, request: Request) -> None:
        # final generated token's KV is recorded at completion so the
        # per-request slot count lands exactly on input_len + output_len
        final_pos = request.input_len + request.output_len - 1
        for gpu in self.committed_config.gpu_order:
            store = self.stores[gpu]
            groups = sorted(self.model.groups_of(
                self.committed_config.layers_for(gpu)))
            for group in groups:
                already = store.tables.get(request.id)
                written = already.written.get(group, 0) if already else 0
                if written <= final_pos:
                    try:
                        store.append(request.id, group, 1,
                                     self._payloads(request.id, group, final_pos, 1))
                        self.migration.on_kv_written(gpu, request.id, group,
                                                     final_pos, 1)
                    except KvOverflow:
                        self.trace.emit(self.scheduler.now, f"gpu{gpu}",
                                        "kv_overflow", id=request.id, mb_kind="final")
        request.state = "done"
        request.completion_time = self.scheduler.now
        self.trace.emit(self.scheduler.now, "engine", "request_done", id=request.id)
        self._unreserve(request)
        self._free_request_kv(request)

    # -- coordinator control ------------------------------------------------------

    def pause_admission(self) -> None:
        self.paused = True

    def resume_admission(self) -> None:
        self.paused = False
        self.pump()

    def drain_then(self, callback: Callable[[], None]) -> None:
        """Fire once every in-flight micro-batch has left the pipeline."""
        if self.in_flight == 0:
            self.scheduler.after(0.0, callback)
        else:
            self._drain_cb = callback

    def set_config(self, config: PPConfig) -> None:
        self.committed_config = config
