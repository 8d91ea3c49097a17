"""Live KV migration: dirty tracking, patch streaming, convergence counters.

Each migrating (src, dst) pair runs a stream that repeatedly drains its
dirty set into a KV patch and ships it over the migration communicator
group. Migration start seeds the bitmap with every occupied slot of the
migrating layers, so the initial bulk copy and the incremental patching
are one mechanism. Convergence is tracked in token-slot cells (one cell
per token per migrating layer): the commit gate compares the scheduled
minus applied gap against the threshold, default 50.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

from .events import EventScheduler, EventTrace
from .fabric import CommFabric
from .kvstore import KvOverflow, KvStore

SlotKey = tuple[str, int, int]  # (request_id, layer_group, token position)


@dataclass
class DirtyBitmap:
    """Writes since the last drain for one (src, dst) pair.

    Sparse representation of the per-slot flag vector; marking is
    idempotent and drain atomically snapshots-and-clears.
    """

    pair_key: tuple[int, int]
    bits: set[SlotKey] = field(default_factory=set)

    def mark(self, slots: list[SlotKey]) -> None:
        self.bits.update(slots)

    def drain(self) -> list[SlotKey]:
        dirty = sorted(self.bits)
        self.bits.clear()
        return dirty

    def discard_request(self, request_id: str) -> int:
        """Drop pending bits for a freed request; returns cells dropped."""
        stale = [key for key in self.bits if key[0] == request_id]
        for key in stale:
            self.bits.discard(key)
        return len(stale)


@dataclass
class KvPatch:
    """One drained dirty set, the migration wire unit.

    ``entries`` are (layer, slot key, checksum) triples; ``token_count``
    counts them in token-slot cells. Tombstones free source-released
    requests on the destination; ``tombstone_credit`` carries the cells
    that were dirty-but-unsent at free time so applied counters still
    catch up to scheduled ones. ``drained_at`` lets the receiver discard
    data gathered before a request it already tombstoned was freed.
    """

    seq: int
    entries: list[tuple[int, SlotKey, int]]
    token_count: int
    tombstones: list[str] = field(default_factory=list)
    tombstone_credit: int = 0
    drained_at: float = 0.0

    def payload_bytes(self, token_kv_bytes_per_layer: int) -> int:
        return self.token_count * token_kv_bytes_per_layer


class ConvergenceCounters:
    """Scheduled vs applied token-cell counters, tracked per destination."""

    def __init__(self) -> None:
        self.t_sched: dict[int, int] = {}
        self.t_applied: dict[int, int] = {}

    def scheduled(self, dst: int, cells: int) -> None:
        self.t_sched[dst] = self.t_sched.get(dst, 0) + cells

    def applied(self, dst: int, cells: int) -> None:
        self.t_applied[dst] = self.t_applied.get(dst, 0) + cells
        if self.t_applied[dst] > self.t_sched.get(dst, 0):
            raise AssertionError("applied counter overtook scheduled counter")

    def lag(self, dst: int) -> int:
        return self.t_sched.get(dst, 0) - self.t_applied.get(dst, 0)


class PatchReceiver:
    """Applies patches to the destination store in sequence order."""

    def __init__(self, store: KvStore, counters: ConvergenceCounters, dst: int) -> None:
        self.store = store
        self.counters = counters
        self.dst = dst
        self.next_seq = 0
        self.pending: dict[int, KvPatch] = {}
        self.freed_at: dict[str, float] = {}
        self.applied_cells_log: list[tuple[int, int]] = []

    def note_freed(self, request_id: str, when: float) -> None:
        self.freed_at[request_id] = when

    def receive(self, patch: KvPatch) -> None:
        """Buffer out-of-order patches; apply every ready one in order."""
        self.pending[patch.seq] = patch
        while self.next_seq in self.pending:
            self._apply(self.pending.pop(self.next_seq))
            self.next_seq += 1

    def _apply(self, patch: KvPatch) -> None:
        by_slot: dict[tuple[str, int], list[tuple[int, int]]] = {}
        for _layer, (request_id, group, pos), checksum in patch.entries:
            # Data gathered before the request was freed is stale: writing
            # it would transiently resurrect the freed chain. The cells
            # still count as applied work below.
            if self.freed_at.get(request_id, -1.0) >= patch.drained_at:
                continue
            by_slot.setdefault((request_id, group), []).append((pos, checksum))
        for (request_id, group), items in sorted(by_slot.items()):
            # k layers share one stacked cell; writing once per position
            # covers the whole group, so deduplicate the per-layer triples.
            unique = sorted(set(items))
            self.store.write_slots(request_id, group, unique)
        for request_id in patch.tombstones:
            self.store.free_request(request_id)
        self.counters.applied(self.dst, patch.token_count + patch.tombstone_credit)
        self.applied_cells_log.append((patch.seq, patch.token_count))


class MigrationStream:
    """Sender side of one (src, dst) migrating pair."""

    def __init__(self, src: int, dst: int, layers: set[int], k: int,
                 scheduler: EventScheduler, trace: EventTrace, fabric: CommFabric,
                 src_store: KvStore, receiver: PatchReceiver,
                 counters: ConvergenceCounters, token_kv_bytes: int,
                 drain_period: float, streaming: bool = True) -> None:
        self.src = src
        self.dst = dst
        self.layers = set(layers)
        self.groups = sorted({(l - 1) // k for l in layers})
        self.k = k
        self.scheduler = scheduler
        self.trace = trace
        self.fabric = fabric
        self.src_store = src_store
        self.receiver = receiver
        self.counters = counters
        self.token_kv_bytes = token_kv_bytes
        self.drain_period = drain_period
        self.streaming = streaming
        self.bitmap = DirtyBitmap((src, dst))
        self.active = False
        self.sending = False
        self._seq = 0
        self._last_drain = -drain_period
        self._checkpoint_scheduled = False
        self._deferred_final: Optional[Callable[[float], None]] = None
        self.pending_tombstones: list[str] = []
        self.pending_tombstone_credit = 0
        self.sent_log: list[tuple[int, int]] = []

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> None:
        """Seed the bitmap with every occupied slot of the migrating layers."""
        self.active = True
        seeded = 0
        for group in self.groups:
            for request_id, checksums in self.src_store.snapshot_group(group).items():
                self.bitmap.mark([(request_id, group, pos)
                                  for pos in range(len(checksums))])
                seeded += len(checksums)
        self.counters.scheduled(self.dst, seeded * self.k)
        self.trace.emit(self.scheduler.now, f"migrator[{self.src}->{self.dst}]",
                        "migration_seeded", tokens=seeded, layers=sorted(self.layers))
        if self.streaming:
            self.pump()

    def stop(self) -> None:
        self.active = False

    # -- write / free notifications from the engine ---------------------------

    def on_kv_written(self, request_id: str, group: int, start_pos: int,
                      n_tokens: int) -> None:
        if not self.active or group not in self.groups:
            return
        self.bitmap.mark([(request_id, group, start_pos + i) for i in range(n_tokens)])
        self.counters.scheduled(self.dst, n_tokens * self.k)
        if self.streaming:
            self.pump()

    def on_request_freed(self, request_id: str) -> None:
        if not self.active:
            return
        dropped = self.bitmap.discard_request(request_id)
        self.pending_tombstones.append(request_id)
        self.pending_tombstone_credit += dropped * self.k

    # -- drain cycle -----------------------------------------------------------

    def pump(self) -> None:
        """Drain-and-send on a best-effort cadence with a period floor."""
        if not self.active or self.sending or not self.streaming:
            return
        if not self.bitmap.bits and not self.pending_tombstones:
            return
        due = self._last_drain + self.drain_period
        if self.scheduler.now < due:
            if not self._checkpoint_scheduled:
                self._checkpoint_scheduled = True

                def recheck() -> None:
                    self._checkpoint_scheduled = False
                    self.pump()

                self.scheduler.at(due, recheck)
            return
        self._send_patch(self._drain())

    def _drain(self) -> KvPatch:
        self._last_drain = self.scheduler.now
        dirty = self.bitmap.drain()
        entries: list[tuple[int, SlotKey, int]] = []
        for key in dirty:
            request_id, group, pos = key
            checksum = self.src_store.read_checksum(request_id, group, pos)
            for layer in self.src_store_group_layers(group):
                entries.append((layer, key, checksum))
        patch = KvPatch(self._seq, entries, token_count=len(entries),
                        tombstones=list(self.pending_tombstones),
                        tombstone_credit=self.pending_tombstone_credit,
                        drained_at=self.scheduler.now)
        self._seq += 1
        self.pending_tombstones = []
        self.pending_tombstone_credit = 0
        return patch

    def src_store_group_layers(self, group: int) -> list[int]:
        base = group * self.k + 1
        return [l for l in range(base, base + self.k) if l in self.layers]

    def _send_patch(self, patch: KvPatch,
                    on_applied: Optional[Callable[[], None]] = None) -> None:
        self.sending = True
        nbytes = patch.payload_bytes(self.token_kv_bytes)
        self.trace.emit(self.scheduler.now, f"migrator[{self.src}->{self.dst}]",
                        "patch_drained", seq=patch.seq, cells=patch.token_count,
                        bytes=nbytes, tombstones=len(patch.tombstones))

        def done(_t) -> None:
            self.sending = False
            self.receiver.receive(patch)
            self.sent_log.append((patch.seq, patch.token_count))
            self.trace.emit(self.scheduler.now,
                            f"migrator[{self.src}->{self.dst}]", "patch_applied",
                            seq=patch.seq, cells=patch.token_count,
                            lag=self.counters.lag(self.dst))
            if on_applied is not None:
                on_applied()
            elif self._deferred_final is not None:
                callback, self._deferred_final = self._deferred_final, None
                self.final_sync(callback)
            else:
                self.pump()

        self.fabric.migrate_transfer(self.src, self.dst, nbytes, done)

    def final_sync(self, on_done: Callable[[float], None]) -> None:
        """Drain the residual dirty set with inference paused.

        In stop-and-copy mode (patching disabled) this is where the entire
        KV volume of the migrating layers moves. Reports the pause this
        pair contributed via ``on_done``.
        """
        if self.sending:
            self._deferred_final = on_done
            return
        started = self.scheduler.now
        patch = self._drain()
        self.trace.emit(started, f"migrator[{self.src}->{self.dst}]",
                        "final_sync_start", residual_cells=patch.token_count,
                        lag=self.counters.lag(self.dst))

        def applied() -> None:
            self.active = False
            self.trace.emit(self.scheduler.now,
                            f"migrator[{self.src}->{self.dst}]", "final_sync_done",
                            pause=self.scheduler.now - started)
            on_done(self.scheduler.now - started)

        self._send_patch(patch, on_applied=applied)


class MigrationManager:
    """All active streams of one reconfiguration plus their counters."""

    def __init__(self, scheduler: EventScheduler, trace: EventTrace,
                 fabric: CommFabric, stores: dict[int, KvStore],
                 token_kv_bytes: int, k: int, drain_period: float = 1e-3) -> None:
        self.scheduler = scheduler
        self.trace = trace
        self.fabric = fabric
        self.stores = stores
        self.token_kv_bytes = token_kv_bytes
        self.k = k
        self.drain_period = drain_period
        self.counters = ConvergenceCounters()
        self.streams: dict[tuple[int, int], MigrationStream] = {}
        self.receivers: dict[tuple[int, int], PatchReceiver] = {}
        self.overflow: KvOverflow | None = None
        self.on_overflow: Optional[Callable[[KvOverflow], None]] = None

    def start_migration(self, m_mig: dict[tuple[int, int], set[int]],
                        streaming: bool = True) -> None:
        self.counters = ConvergenceCounters()
        self.streams = {}
        self.receivers = {}
        self.overflow = None
        for (src, dst) in sorted(m_mig):
            layers = m_mig[(src, dst)]
            receiver = _GuardedReceiver(self.stores[dst], self.counters, dst, self)
            self.receivers[(src, dst)] = receiver
            stream = MigrationStream(
                src, dst, layers, self.k, self.scheduler, self.trace, self.fabric,
                self.stores[src], receiver, self.counters, self.token_kv_bytes,
                self.drain_period, streaming=streaming)
            self.streams[(src, dst)] = stream
            stream.start()

    def stop_all(self) -> None:
        for stream in self.streams.values():
            stream.stop()

    def destinations(self) -> list[int]:
        return sorted({dst for (_s, dst) in self.streams})

    def lag(self, dst: int) -> int:
        return self.counters.lag(dst)

    def converged(self, tau: int) -> bool:
        return all(self.lag(d) < tau for d in self.destinations())

    def on_kv_written(self, gpu: int, request_id: str, group: int,
                      start_pos: int, n_tokens: int) -> None:
        for (src, _dst), stream in self.streams.items():
            if src == gpu:
                stream.on_kv_written(request_id, group, start_pos, n_tokens)

    def on_request_freed(self, request_id: str) -> None:
        for stream in self.streams.values():
            stream.on_request_freed(request_id)
        for receiver in self.receivers.values():
            receiver.note_freed(request_id, self.scheduler.now)

    def final_sync_all(self, on_done: Callable[[float], None]) -> None:
        """Run the final transfer for every pair; reports the max pause."""
        pending = [s for s in self.streams.values() if s.active]
        if not pending:
            on_done(0.0)
            return
        started = self.scheduler.now
        remaining = [len(pending)]

        def one_done(_pause: float) -> None:
            remaining[0] -= 1
            if remaining[0] == 0:
                on_done(self.scheduler.now - started)

        for stream in pending:
            stream.final_sync(one_done)


class _GuardedReceiver(PatchReceiver):
    """Receiver that surfaces destination overflow to the coordinator."""

    def __init__(self, store, counters, dst, manager: MigrationManager) -> None:
        super().__init__(store, counters, dst)
        self.manager = manager

    def _apply(self, patch: KvPatch) -> None:
        try:
            super()._apply(patch)
        except KvOverflow as exc:
            self.manager.overflow = exc
            self.manager.trace.emit(self.manager.scheduler.now,
                                    f"gpu{self.dst}", "migration_overflow",
                                    detail=str(exc))
            self.manager.stop_all()
            if self.manager.on_overflow is not None:
                self.manager.on_overflow(exc)
