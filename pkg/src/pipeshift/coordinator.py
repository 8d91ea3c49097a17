"""Five-phase live reconfiguration: feasibility, resize, load+migrate,
converge, commit.

The coordinator composes two primitive families. Collective primitives
(CompactKV / ResizeKV / AddLayerWeights / StartKVMigration) fan out to all
workers and run alongside inference; the synchronization primitive
(SyncAndCommit) pauses admission, drains the pipeline, runs the final KV
transfer for every migrating pair, walks a commit barrier through the
stages in pipeline order, and atomically switches the committed config.
No micro-batch ever executes under a mixed layer assignment.

Invocations are recorded in the trace under those primitive names so a
trace audit can check the dependency ordering: resize ends before weight
loading and migration begin, and commit starts only after both KV
convergence and weight-load completion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

from .cluster import (
    GpuSpec,
    LayerAssignmentMap,
    MigrationMap,
    ModelSpec,
    PPConfig,
    diff_configs,
    max_blocks,
    validate_pp_config,
)
from .engine import PipelineEngine
from .events import EventScheduler, EventTrace
from .kvstore import KvStore
from .migrator import MigrationManager
from .weights import WeightLoader


@dataclass
class ReconfigPlan:
    c_cur: PPConfig
    c_tgt: PPConfig
    c_int: dict[int, set[int]]
    m_add: LayerAssignmentMap
    m_del: LayerAssignmentMap
    m_mig: MigrationMap
    b_shrink: int
    b_new: int
    tau: int = 50
    poll_interval: float = 0.01

    @property
    def is_noop(self) -> bool:
        return not self.m_add and not self.m_del


@dataclass
class ReconfigStatus:
    phase: str = "idle"
    outcome: Optional[str] = None  # success | infeasible | failed(<reason>)
    timestamps: dict[str, float] = field(default_factory=dict)
    pause_duration: float = 0.0
    lag_at_final_sync: dict[int, int] = field(default_factory=dict)
    # Per migrating pair, per group: raw store contents captured in the same
    # event that ends the final transfer, before obsolete state is deleted.
    source_snapshots: dict[tuple[int, int], dict[int, dict]] = field(default_factory=dict)
    dest_snapshots: dict[tuple[int, int], dict[int, dict]] = field(default_factory=dict)
    migrated_groups: dict[tuple[int, int], list[int]] = field(default_factory=dict)


@dataclass
class FeatureFlags:
    kv_resize: bool = True
    kv_patch: bool = True
    async_weights: bool = True
    handshake: bool = True


class Infeasible(Exception):
    pass


def feasibility(c_cur: PPConfig, c_tgt: PPConfig, cluster: dict[int, GpuSpec],
                model: ModelSpec, util_ratio: float, used_blocks: int,
                tau: int = 50, poll_interval: float = 0.01) -> ReconfigPlan:
    """Phase 1: derive the plan, or raise Infeasible leaving state untouched.

    The shrink budget is the minimum over GPUs of the block budget feasible
    under the intermediate (union) layer sets; reconfiguration aborts when
    blocks in use already exceed it, or when any GPU cannot even hold the
    intermediate weights.
    """
    gpus = list(cluster.values())
    for name, cfg in (("current", c_cur), ("target", c_tgt)):
        violations = validate_pp_config(cfg, model, gpus)
        if violations:
            raise ValueError(f"{name} config invalid: {violations}")
    c_int, m_add, m_del, m_mig = diff_configs(c_cur, c_tgt)

    budgets_int = {}
    budgets_tgt = {}
    for gpu_id, spec in cluster.items():
        bi = max_blocks(spec, len(c_int[gpu_id]), model, util_ratio)
        bt = max_blocks(spec, len(c_tgt.layers_for(gpu_id)), model, util_ratio)
        if bi is None or bt is None:
            raise Infeasible(f"gpu {gpu_id}: weights alone exceed the memory budget")
        budgets_int[gpu_id] = bi
        budgets_tgt[gpu_id] = bt
    b_shrink = min(budgets_int.values())
    b_new = min(budgets_tgt.values())
    if used_blocks > b_shrink:
        raise Infeasible(
            f"{used_blocks} blocks in use exceed shrink budget {b_shrink}")
    return ReconfigPlan(c_cur, c_tgt, c_int, m_add, m_del, m_mig,
                        b_shrink, b_new, tau, poll_interval)


class Coordinator:
    """Executes one reconfiguration at a time against the live engine."""

    def __init__(self, scheduler: EventScheduler, trace: EventTrace,
                 cluster: dict[int, GpuSpec], model: ModelSpec,
                 stores: dict[int, KvStore], loader: WeightLoader,
                 migration: MigrationManager, engine: PipelineEngine,
                 flags: FeatureFlags | None = None,
                 util_ratio: float = 0.9) -> None:
        self.scheduler = scheduler
        self.trace = trace
        self.cluster = cluster
        self.model = model
        self.stores = stores
        self.loader = loader
        self.migration = migration
        self.engine = engine
        self.flags = flags or FeatureFlags()
        self.util_ratio = util_ratio
        self.in_flight = False
        self.loader.is_layer_committed = self._layer_committed

    def _layer_committed(self, gpu: int, layer: int) -> bool:
        return layer in self.engine.committed_config.layers_for(gpu)

    def used_blocks(self) -> int:
        return max((s.used_blocks for s in self.stores.values()), default=0)

    def feasibility(self, c_tgt: PPConfig, tau: int = 50,
                    poll_interval: float = 0.01) -> ReconfigPlan:
        return feasibility(self.engine.committed_config, c_tgt, self.cluster,
                           self.model, self.util_ratio, self.used_blocks(),
                           tau, poll_interval)

    # -- the reconfiguration state machine ------------------------------------

    def reconfigure(self, plan: ReconfigPlan,
                    on_done: Callable[[ReconfigStatus], None] | None = None,
                    ) -> ReconfigStatus:
        if self.in_flight:
            raise RuntimeError("a reconfiguration is already in flight")
        self.in_flight = True
        status = ReconfigStatus()
        now = self.scheduler.now
        self.trace.emit(now, "coordinator", "reconfigure_start",
                        target=list(plan.c_tgt.assignment))
        status.timestamps["start"] = now

        def finish(outcome: str) -> None:
            status.outcome = outcome
            status.phase = "done" if outcome == "success" else "aborted"
            status.timestamps["end"] = self.scheduler.now
            self.in_flight = False
            self.trace.emit(self.scheduler.now, "coordinator", "reconfigure_end",
                            outcome=outcome)
            if on_done is not None:
                on_done(status)

        if plan.is_noop:
            finish("success")
            return status

        # Re-check feasibility against live occupancy (Phase 1 gate).
        status.phase = "feasibility"
        if self.used_blocks() > plan.b_shrink:
            finish("infeasible")
            return status

        saved_capacity = max(s.capacity_blocks for s in self.stores.values())

        # Phase 2: compact + shrink uniformly so every GPU can host the
        # intermediate weights and incoming KV.
        status.phase = "resizing"
        if self.flags.kv_resize and plan.b_shrink < saved_capacity:
            for gpu_id in sorted(self.stores):
                store = self.stores[gpu_id]
                store.compact()
                self.trace.emit(self.scheduler.now, f"gpu{gpu_id}", "primitive",
                                name="CompactKV")
                store.resize(plan.b_shrink)
                self.trace.emit(self.scheduler.now, f"gpu{gpu_id}", "primitive",
                                name="ResizeKV", blocks=plan.b_shrink)
        status.timestamps["resize_end"] = self.scheduler.now

        # Phase 3: weight loading and KV migration overlap.
        status.phase = "migrating"
        for (src, dst), layers in sorted(plan.m_mig.items()):
            self.stores[dst].resident_groups |= self.model.groups_of(layers)
        weights_pending = [0]

        def one_weight_done() -> None:
            weights_pending[0] -= 1
            if weights_pending[0] == 0:
                status.timestamps["weightload_end"] = self.scheduler.now

        if self.flags.async_weights and plan.m_add:
            status.timestamps["weightload_start"] = self.scheduler.now
            for gpu_id in sorted(plan.m_add):
                weights_pending[0] += 1
                self.trace.emit(self.scheduler.now, f"gpu{gpu_id}", "primitive",
                                name="AddLayerWeights",
                                layers=sorted(plan.m_add[gpu_id]))
                self.loader.stage_layers(gpu_id, plan.m_add[gpu_id],
                                         one_weight_done)

        status.timestamps["migration_start"] = self.scheduler.now
        self.trace.emit(self.scheduler.now, "coordinator", "primitive",
                        name="StartKVMigration",
                        pairs=[[s, d] for (s, d) in sorted(plan.m_mig)])
        self.migration.on_overflow = lambda exc: self._rollback(
            plan, status, saved_capacity, finish)
        self.migration.start_migration(plan.m_mig, streaming=self.flags.kv_patch)

        # Phase 4: poll convergence (and the weight gate) every poll interval.
        status.phase = "converging"

        def poll() -> None:
            if status.outcome is not None:
                return  # rolled back
            converged = (not self.flags.kv_patch) or self.migration.converged(plan.tau)
            weights_ready = weights_pending[0] == 0
            if converged and weights_ready:
                status.timestamps["convergence_time"] = self.scheduler.now
                self._commit(plan, status, finish)
                return
            self.scheduler.after(plan.poll_interval, poll)

        self.scheduler.after(plan.poll_interval, poll)
        return status

    # -- Phase 5 ---------------------------------------------------------------

    def _commit(self, plan: ReconfigPlan, status: ReconfigStatus,
                finish: Callable[[str], None]) -> None:
        status.phase = "committing"
        status.timestamps["commit_start"] = self.scheduler.now
        pause_start = self.scheduler.now
        self.trace.emit(pause_start, "coordinator", "commit_pause_start")
        self.engine.pause_admission()

        def drained() -> None:
            if not self.flags.async_weights and plan.m_add:
                # Synchronous-loading ablation: weights stage inside the pause.
                status.timestamps.setdefault("weightload_start", self.scheduler.now)
                pending = [len(plan.m_add)]

                def staged() -> None:
                    pending[0] -= 1
                    if pending[0] == 0:
                        status.timestamps["weightload_end"] = self.scheduler.now
                        catch_up()

                for gpu_id in sorted(plan.m_add):
                    self.trace.emit(self.scheduler.now, f"gpu{gpu_id}",
                                    "primitive", name="AddLayerWeights",
                                    layers=sorted(plan.m_add[gpu_id]))
                    self.loader.stage_layers(gpu_id, plan.m_add[gpu_id], staged)
            else:
                catch_up()

        def catch_up() -> None:
            # Micro-batches that drained after the convergence check may have
            # pushed the lag back over the threshold; the gate holds strictly,
            # so stream extra patch cycles (the pipeline is idle now) until
            # every destination is back under it.
            if self.flags.kv_patch and not self.migration.converged(plan.tau):
                for stream in self.migration.streams.values():
                    stream.pump()
                self.scheduler.after(self.migration.drain_period / 2, catch_up)
                return
            final_sync()

        def final_sync() -> None:
            for dst in self.migration.destinations():
                status.lag_at_final_sync[dst] = self.migration.lag(dst)
            self.migration.final_sync_all(synced)

        def synced(_pause: float) -> None:
            if status.outcome is not None:
                return  # overflow during the final transfer
            for (src, dst), layers in sorted(plan.m_mig.items()):
                groups = sorted(self.model.groups_of(layers))
                status.migrated_groups[(src, dst)] = groups
                status.source_snapshots[(src, dst)] = {
                    g: self.stores[src].snapshot_group(g) for g in groups
                }
                status.dest_snapshots[(src, dst)] = {
                    g: self.stores[dst].snapshot_group(g) for g in groups
                }
            self._barrier(plan, status, pause_start, finish)

        self.engine.drain_then(drained)

    def _barrier(self, plan: ReconfigPlan, status: ReconfigStatus,
                 pause_start: float, finish: Callable[[str], None]) -> None:
        """Walk the commit barrier through the pipeline in stage order."""
        order = plan.c_cur.gpu_order
        hop = self.migration.fabric.config.control_latency

        def arrive(idx: int) -> None:
            self.trace.emit(self.scheduler.now, f"gpu{order[idx]}",
                            "commit_barrier", stage=idx)
            if idx + 1 < len(order):
                self.scheduler.after(hop, lambda: arrive(idx + 1))
            else:
                switch()

        def switch() -> None:
            self.trace.emit(self.scheduler.now, "coordinator", "primitive",
                            name="SyncAndCommit", blocks=plan.b_new)
            self.engine.set_config(plan.c_tgt)
            status.pause_duration = self.scheduler.now - pause_start
            self.trace.emit(self.scheduler.now, "coordinator", "commit_pause_end",
                            pause=status.pause_duration)
            self.engine.resume_admission()
            self._post_commit_cleanup(plan)
            status.timestamps["commit_end"] = self.scheduler.now
            finish("success")

        arrive(0)

    def _post_commit_cleanup(self, plan: ReconfigPlan) -> None:
        """Asynchronous deletes and the restore-capacity resize."""
        for gpu_id in sorted(plan.m_del):
            layers = plan.m_del[gpu_id]
            self.loader.evict_layers(gpu_id, layers)
            groups = self.model.groups_of(layers)
            self.stores[gpu_id].drop_layer_groups(
                groups & self.stores[gpu_id].resident_groups)
        if self.flags.kv_resize:
            for gpu_id in sorted(self.stores):
                store = self.stores[gpu_id]
                store.compact()
                store.resize(plan.b_new)
                self.trace.emit(self.scheduler.now, f"gpu{gpu_id}", "primitive",
                                name="ResizeKV", blocks=plan.b_new)

    # -- failure path ------------------------------------------------------------

    def _rollback(self, plan: ReconfigPlan, status: ReconfigStatus,
                  saved_capacity: int, finish: Callable[[str], None]) -> None:
        """Destination overflow mid-migration: restore the pre-call state."""
        if status.outcome is not None:
            return
        self.trace.emit(self.scheduler.now, "coordinator", "rollback_start",
                        reason="MigrationOverflow")
        self.migration.stop_all()
        cur_sets = plan.c_cur.as_layer_sets()
        for (src, dst), layers in sorted(plan.m_mig.items()):
            incoming = self.model.groups_of(layers) - self.model.groups_of(
                cur_sets[dst])
            self.stores[dst].drop_layer_groups(
                incoming & self.stores[dst].resident_groups)
        for gpu_id in sorted(plan.m_add):
            self.loader.cancel_staging(gpu_id)
            staged = plan.m_add[gpu_id] - cur_sets[gpu_id]
            self.loader.evict_layers(gpu_id, staged)
        if self.flags.kv_resize:
            for gpu_id in sorted(self.stores):
                store = self.stores[gpu_id]
                store.compact()
                store.resize(saved_capacity)
        if self.engine.paused:
            self.engine.resume_admission()
        finish("failed(MigrationOverflow)")
