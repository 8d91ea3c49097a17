"""Glue that assembles one simulation run from a scenario."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .cluster import max_blocks
from .coordinator import Coordinator, Infeasible, ReconfigStatus, feasibility
from .engine import (
    Metrics,
    PipelineEngine,
    compute_metrics,
    generate_workload,
)
from .events import EventScheduler, EventTrace
from .fabric import CommFabric
from .kvstore import kv_init
from .migrator import MigrationManager
from .scenario import Scenario
from .weights import WeightLoader


class SetupInfeasible(Exception):
    """The initial configuration cannot host weights plus any KV at all."""


@dataclass
class RunResult:
    trace: EventTrace
    metrics: Metrics
    statuses: list[ReconfigStatus] = field(default_factory=list)
    seed: int = 0


class Simulation:
    def __init__(self, scenario: Scenario, seed: int = 0) -> None:
        self.scenario = scenario
        self.seed = seed
        self.scheduler = EventScheduler()
        self.trace = EventTrace()
        self.cluster = scenario.cluster_map()
        self.model = scenario.model

        cur_sets = scenario.initial_config.as_layer_sets()
        budgets = []
        for gpu_id, spec in self.cluster.items():
            b = max_blocks(spec, len(cur_sets[gpu_id]), self.model,
                           scenario.util_ratio)
            if b is None:
                raise SetupInfeasible(
                    f"gpu {gpu_id}: weights of the initial config do not fit")
            budgets.append(b)
        self.initial_blocks = min(budgets)

        self.stores = {}
        for gpu_id, spec in self.cluster.items():
            groups = self.model.groups_of(cur_sets[gpu_id])
            self.stores[gpu_id] = kv_init(
                spec, self.model, self.initial_blocks, resident_groups=groups,
                weight_bytes=len(cur_sets[gpu_id]) * self.model.layer_weight_bytes)

        self.fabric = CommFabric(self.scheduler, self.trace,
                                 sorted(self.cluster), scenario.fabric)
        self.loader = WeightLoader(
            self.scheduler, self.trace, self.model.layer_weight_bytes,
            host_bandwidth=scenario.host_bandwidth,
            disk_bandwidth=scenario.disk_bandwidth,
            sharing=scenario.fabric.sharing,
            busy_weight=scenario.fabric.migration_weight)
        for gpu_id in self.cluster:
            self.loader.residency.resident[gpu_id] = set(cur_sets[gpu_id])
        self.migration = MigrationManager(
            self.scheduler, self.trace, self.fabric, self.stores,
            self.model.token_kv_bytes_per_layer, self.model.stacking_factor,
            drain_period=scenario.drain_period)
        self.engine = PipelineEngine(
            self.scheduler, self.trace, self.cluster, self.model, self.stores,
            self.fabric, self.loader, self.migration, scenario.initial_config,
            max_batch=scenario.max_batch)
        self.coordinator = Coordinator(
            self.scheduler, self.trace, self.cluster, self.model, self.stores,
            self.loader, self.migration, self.engine, scenario.flags,
            scenario.util_ratio)
        self.statuses: list[ReconfigStatus] = []

        self.loader.headroom_bytes = self._headroom_bytes
        self._schedule_workload()
        self._schedule_triggers()

    def _headroom_bytes(self, gpu_id: int) -> int:
        spec = self.cluster[gpu_id]
        store = self.stores[gpu_id]
        resident = len(self.loader.residency.on_gpu(gpu_id))
        kv_bytes = (store.capacity_blocks * spec.alloc_granularity
                    * max(1, len(store.resident_groups)))
        return spec.mem_total - resident * self.model.layer_weight_bytes - kv_bytes

    def _schedule_workload(self) -> None:
        for request in generate_workload(self.scenario.workload, self.seed):
            self.scheduler.at(request.arrival_time,
                              lambda r=request: self.engine.submit(r))

    def _schedule_triggers(self) -> None:
        for trigger in self.scenario.triggers:
            self.scheduler.at(trigger.at, lambda t=trigger: self._fire_trigger(t))

    def _fire_trigger(self, trigger) -> None:
        if self.coordinator.in_flight:
            self.trace.emit(self.scheduler.now, "coordinator",
                            "reconfigure_skipped", reason="already in flight")
            return
        try:
            plan = self.coordinator.feasibility(
                trigger.target, tau=trigger.tau,
                poll_interval=trigger.poll_interval)
        except Infeasible as exc:
            self.trace.emit(self.scheduler.now, "coordinator", "reconfigure_start",
                            target=list(trigger.target.assignment))
            self.trace.emit(self.scheduler.now, "coordinator", "reconfigure_end",
                            outcome="infeasible", detail=str(exc))
            return
        self.coordinator.reconfigure(plan, self.statuses.append)

    def run(self) -> RunResult:
        self.scheduler.run()
        return RunResult(self.trace, compute_metrics(self.trace),
                         self.statuses, self.seed)

    def state_digest(self) -> str:
        """Content hash of committed config, weight residency, and KV state."""
        h = hashlib.blake2b(digest_size=16)
        h.update(repr(self.engine.committed_config.assignment).encode())
        for gpu_id in sorted(self.cluster):
            h.update(repr(sorted(self.loader.residency.on_gpu(gpu_id))).encode())
            h.update(repr(self.stores[gpu_id].state_digest()).encode())
        return h.hexdigest()


def run_scenario(scenario: Scenario, seed: int = 0) -> RunResult:
    return Simulation(scenario, seed).run()
