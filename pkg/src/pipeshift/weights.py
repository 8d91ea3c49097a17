"""Asynchronous host-to-GPU weight staging at low priority.

All layer weights live in host memory from initialization (with a slower
fallback tier when a layer is only on disk). Staging proceeds layer by
layer so partial progress is observable, and it only consumes transfer
bandwidth while the target GPU is not busy computing (strict mode) or at
a reduced weight (weighted mode): inference never yields to staging.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

from .events import EventScheduler, EventTrace

GIB = 1024 ** 3


class WeightError(Exception):
    pass


class LayerInUse(WeightError):
    """Eviction attempted on a layer the committed config still assigns."""


class OutOfMemory(WeightError):
    """Staging would violate the memory headroom the coordinator guaranteed."""


@dataclass
class WeightResidency:
    """Which layers are materialized where."""

    resident: dict[int, set[int]] = field(default_factory=dict)
    host_resident: dict[int, bool] = field(default_factory=dict)

    def on_gpu(self, gpu: int) -> set[int]:
        return self.resident.setdefault(gpu, set())

    def is_resident(self, gpu: int, layer: int) -> bool:
        return layer in self.resident.get(gpu, set())

    def on_host(self, layer: int) -> bool:
        return self.host_resident.get(layer, True)


class _StagingTask:
    def __init__(self, gpu: int, layers: list[int], on_complete) -> None:
        self.gpu = gpu
        self.queue = layers
        self.idx = 0
        self.remaining = 0.0
        self.rate = 0.0
        self.gen = 0
        self.last_update = 0.0
        self.on_complete = on_complete
        self.done = not layers


class WeightLoader:
    def __init__(self, scheduler: EventScheduler, trace: EventTrace,
                 layer_weight_bytes: int,
                 host_bandwidth: float = 16 * GIB,
                 disk_bandwidth: float = 2 * GIB,
                 sharing: str = "strict", busy_weight: float = 0.2,
                 residency: WeightResidency | None = None) -> None:
        self.scheduler = scheduler
        self.trace = trace
        self.layer_weight_bytes = layer_weight_bytes
        self.host_bandwidth = host_bandwidth
        self.disk_bandwidth = disk_bandwidth
        self.sharing = sharing
        self.busy_weight = busy_weight
        self.residency = residency or WeightResidency()
        self._busy_depth: dict[int, int] = {}
        self._tasks: dict[int, _StagingTask] = {}
        # Hooks wired by the simulation; permissive defaults for unit use.
        self.headroom_bytes: Optional[Callable[[int], int]] = None
        self.is_layer_committed: Callable[[int, int], bool] = lambda gpu, layer: False

    # -- GPU activity (drives the priority throttle) -------------------------

    def set_gpu_busy(self, gpu: int, busy: bool) -> None:
        depth = self._busy_depth.get(gpu, 0) + (1 if busy else -1)
        self._busy_depth[gpu] = depth
        task = self._tasks.get(gpu)
        if task is not None and not task.done:
            self._set_rate(task)

    def _gpu_busy(self, gpu: int) -> bool:
        return self._busy_depth.get(gpu, 0) > 0

    def _current_rate(self, gpu: int, layer: int) -> float:
        base = self.host_bandwidth if self.residency.on_host(layer) else self.disk_bandwidth
        if not self._gpu_busy(gpu):
            return base
        return 0.0 if self.sharing == "strict" else base * self.busy_weight

    # -- operations -----------------------------------------------------------

    def stage_layers(self, gpu: int, layers: set[int],
                     on_complete: Callable[[], None] | None = None) -> None:
        """Begin asynchronous staging; completion fires once all are resident."""
        todo = sorted(l for l in layers if not self.residency.is_resident(gpu, l))
        if self.headroom_bytes is not None and todo:
            need = len(todo) * self.layer_weight_bytes
            have = self.headroom_bytes(gpu)
            if need > have:
                raise OutOfMemory(
                    f"gpu {gpu}: staging {len(todo)} layers needs {need} B, "
                    f"headroom {have} B"
                )
        self.trace.emit(self.scheduler.now, f"gpu{gpu}", "weight_stage_start",
                        layers=todo)
        if not todo:
            if on_complete is not None:
                self.scheduler.after(0.0, on_complete)
            return
        if gpu in self._tasks and not self._tasks[gpu].done:
            raise WeightError(f"gpu {gpu}: staging already in progress")
        task = _StagingTask(gpu, todo, on_complete)
        self._tasks[gpu] = task
        self._begin_layer(task)

    def evict_layers(self, gpu: int, layers: set[int]) -> int:
        """Drop resident layers instantly; returns bytes reclaimed."""
        for layer in sorted(layers):
            if self.is_layer_committed(gpu, layer):
                raise LayerInUse(f"gpu {gpu}: layer {layer} is committed")
        resident = self.residency.on_gpu(gpu)
        dropped = sorted(set(layers) & resident)
        resident.difference_update(dropped)
        freed = len(dropped) * self.layer_weight_bytes
        self.trace.emit(self.scheduler.now, f"gpu{gpu}", "weight_evict",
                        layers=dropped, freed_bytes=freed)
        return freed

    def staging_active(self, gpu: int) -> bool:
        task = self._tasks.get(gpu)
        return task is not None and not task.done

    def cancel_staging(self, gpu: int) -> None:
        """Abandon an in-flight staging task; already-staged layers remain
        resident (the caller evicts whatever it does not want)."""
        task = self._tasks.get(gpu)
        if task is not None and not task.done:
            task.done = True
            task.gen += 1
            self.trace.emit(self.scheduler.now, f"gpu{gpu}",
                            "weight_stage_cancelled", layers=task.queue[task.idx:])

    # -- continuous-progress staging machinery --------------------------------

    def _begin_layer(self, task: _StagingTask) -> None:
        task.remaining = float(self.layer_weight_bytes)
        task.last_update = self.scheduler.now
        task.rate = 0.0
        self._set_rate(task)

    def _settle(self, task: _StagingTask) -> None:
        elapsed = self.scheduler.now - task.last_update
        task.remaining = max(0.0, task.remaining - elapsed * task.rate)
        task.last_update = self.scheduler.now

    def _set_rate(self, task: _StagingTask) -> None:
        self._settle(task)
        layer = task.queue[task.idx]
        task.rate = self._current_rate(task.gpu, layer)
        task.gen += 1
        if task.rate <= 0.0:
            return  # paused until the GPU goes idle again
        gen = task.gen
        eta = task.remaining / task.rate
        self.scheduler.after(eta, lambda: self._on_layer_done(task, gen))

    def _on_layer_done(self, task: _StagingTask, gen: int) -> None:
        if gen != task.gen or task.done:
            return  # superseded by a rate change
        self._settle(task)
        if task.remaining > 0.5:  # half a byte: below that is float residue
            self._set_rate(task)
            return
        layer = task.queue[task.idx]
        self.residency.on_gpu(task.gpu).add(layer)
        self.trace.emit(self.scheduler.now, f"gpu{task.gpu}", "weight_layer_staged",
                        layer=layer)
        task.idx += 1
        if task.idx < len(task.queue):
            self._begin_layer(task)
            return
        task.done = True
        self.trace.emit(self.scheduler.now, f"gpu{task.gpu}", "weight_stage_complete",
                        layers=task.queue)
        if task.on_complete is not None:
            task.on_complete()
