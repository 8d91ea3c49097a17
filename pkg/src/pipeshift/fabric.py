"""Simulated inter-GPU transport with group-serialized collective semantics.

Every transfer decomposes into a send op and a recv op, one per endpoint.
All ops on a GPU serialize through that GPU's device lock: an op posted on
one communicator group stalls every other op on the same GPU until it
completes. That rule is what makes concurrent inference + migration groups
deadlock-prone, and what the two-phase handshake (sender holds its lock,
ACKs over a control channel, receiver try-acquires and ACCEPTs or REJECTs)
exists to fix.

Inference ops block-wait for locks and always win ties; migration ops with
the handshake enabled only ever hold a lock speculatively until accepted,
and back off the moment an inference op wants the device.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from .events import EventScheduler, EventTrace

INFERENCE = "inference"
MIGRATION = "migration"

GBPS = 1e9 / 8  # bytes/s per Gbit/s


@dataclass
class FabricConfig:
    link_bandwidth: float = 100 * GBPS
    control_latency: float = 1e-4
    retry_timeout: float = 1e-3
    handshake: bool = True
    sharing: str = "strict"  # strict | weighted; applies to host staging too
    migration_weight: float = 0.2


@dataclass(frozen=True)
class CommGroup:
    group_id: str
    members: frozenset[int]
    priority: str  # inference | migration


@dataclass
class HandshakeState:
    phase: str = "idle"  # idle|awaiting_reply|preempted|accepted|rejected
    retry_deadline: float = 0.0
    retries: int = 0
    # Control messages carry the round they belong to; anything arriving
    # from a superseded round is dropped instead of corrupting lock state.
    round: int = 0
    recv_round: int = -1


@dataclass
class TransferOp:
    op_id: int
    kind: str  # send | recv
    group_id: str
    gpu: int
    peer: int
    bytes: int
    issue_time: float
    complete_time: Optional[float] = None
    holding: bool = False
    queued: bool = False
    done: bool = False
    transfer: "Transfer" = None  # type: ignore[assignment]

    @property
    def pending(self) -> bool:
        return not self.done


@dataclass
class Transfer:
    xfer_id: int
    group_id: str
    src: int
    dst: int
    bytes: int
    issue_time: float
    send_op: TransferOp = None  # type: ignore[assignment]
    recv_op: TransferOp = None  # type: ignore[assignment]
    state: str = "pending"  # pending | active | done
    start_time: Optional[float] = None
    complete_time: Optional[float] = None
    handshake: HandshakeState = field(default_factory=HandshakeState)
    on_complete: Optional[Callable[["Transfer"], None]] = None


class DeviceLock:
    """Per-GPU mutex serializing all collective ops on that device."""

    def __init__(self, gpu_id: int) -> None:
        self.gpu_id = gpu_id
        self.holder: TransferOp | None = None
        self.inference_queue: deque[TransferOp] = deque()
        self.migration_queue: deque[TransferOp] = deque()

    def waiting(self) -> list[TransferOp]:
        return list(self.inference_queue) + list(self.migration_queue)


class CommFabric:
    """Event-driven fabric over a full mesh of point-to-point links."""

    def __init__(self, scheduler: EventScheduler, trace: EventTrace,
                 gpu_ids: list[int], config: FabricConfig | None = None) -> None:
        self.scheduler = scheduler
        self.trace = trace
        self.config = config or FabricConfig()
        self.locks = {g: DeviceLock(g) for g in gpu_ids}
        self.groups = {
            INFERENCE: CommGroup(INFERENCE, frozenset(gpu_ids), INFERENCE),
            MIGRATION: CommGroup(MIGRATION, frozenset(gpu_ids), MIGRATION),
        }
        self.transfers: list[Transfer] = []
        self.link_bandwidth: dict[tuple[int, int], float] = {}
        self._op_seq = 0
        self._xfer_seq = 0
        self._active_on_link: dict[tuple[int, int], int] = {}

    # -- public API ----------------------------------------------------------

    def post_inference_transfer(self, src: int, dst: int, nbytes: int,
                                on_complete: Callable[[Transfer], None] | None = None,
                                ) -> Transfer:
        """Stage-forward transfer: both endpoint ops block-wait for their locks."""
        t = self._new_transfer(INFERENCE, src, dst, nbytes, on_complete)
        self._enqueue(self.locks[dst], t.recv_op)
        self._enqueue(self.locks[src], t.send_op)
        return t

    def migrate_transfer(self, src: int, dst: int, nbytes: int,
                         on_complete: Callable[[Transfer], None] | None = None,
                         ) -> Transfer:
        """KV migration transfer.

        With the handshake enabled, only the sender queues for its lock; the
        receiver's lock is try-acquired when the ACK arrives. Disabled
        (naive mode), both endpoints block-wait exactly like inference ops,
        which reproduces the circular-wait hazard.
        """
        t = self._new_transfer(MIGRATION, src, dst, nbytes, on_complete)
        if self.config.handshake:
            self._enqueue(self.locks[src], t.send_op)
        else:
            self._enqueue(self.locks[dst], t.recv_op)
            self._enqueue(self.locks[src], t.send_op)
        return t

    def post_pair(self, kind: str, src: int, dst: int, nbytes: int,
                  send_delay: float = 0.0, recv_delay: float = 0.0,
                  on_complete: Callable[[Transfer], None] | None = None) -> Transfer:
        """Post a transfer with independently delayed endpoint ops.

        Scenario-construction helper: real pipelines pre-post receives, and
        the classic deadlock needs that stagger to form.
        """
        t = self._new_transfer(kind, src, dst, nbytes, on_complete)
        handshake_send = kind == MIGRATION and self.config.handshake
        if not handshake_send:
            self.scheduler.after(recv_delay,
                                 lambda: self._enqueue(self.locks[dst], t.recv_op))
        self.scheduler.after(send_delay,
                             lambda: self._enqueue(self.locks[src], t.send_op))
        return t

    def bandwidth(self, src: int, dst: int) -> float:
        return self.link_bandwidth.get((src, dst), self.config.link_bandwidth)

    # -- lock discipline -----------------------------------------------------

    def _new_transfer(self, group_id: str, src: int, dst: int, nbytes: int,
                      on_complete) -> Transfer:
        if src == dst:
            raise ValueError("transfer endpoints must differ")
        t = Transfer(self._xfer_seq, group_id, src, dst, nbytes,
                     self.scheduler.now, on_complete=on_complete)
        self._xfer_seq += 1
        t.send_op = self._new_op("send", group_id, src, dst, nbytes, t)
        t.recv_op = self._new_op("recv", group_id, dst, src, nbytes, t)
        self.transfers.append(t)
        return t

    def _new_op(self, kind, group_id, gpu, peer, nbytes, transfer) -> TransferOp:
        op = TransferOp(self._op_seq, kind, group_id, gpu, peer, nbytes,
                        self.scheduler.now, transfer=transfer)
        self._op_seq += 1
        return op

    def _enqueue(self, lock: DeviceLock, op: TransferOp) -> None:
        if op.done or op.holding or op.queued:
            return
        op.queued = True
        if op.group_id == INFERENCE:
            lock.inference_queue.append(op)
            # Asymmetric entry: a migration holder that is not yet accepted
            # backs off immediately rather than making inference wait.
            holder = lock.holder
            if (holder is not None and holder.group_id == MIGRATION
                    and holder.transfer.handshake.phase == "awaiting_reply"):
                self._preempt(lock, holder)
        else:
            lock.migration_queue.append(op)
        self._advance(lock)

    def _advance(self, lock: DeviceLock) -> None:
        while lock.holder is None:
            if lock.inference_queue:
                op = lock.inference_queue.popleft()
            elif lock.migration_queue:
                op = lock.migration_queue.popleft()
            else:
                return
            op.queued = False
            if op.done:
                continue
            lock.holder = op
            op.holding = True
            self._on_granted(lock, op)
            return

    def _release(self, lock: DeviceLock, op: TransferOp) -> None:
        if lock.holder is op:
            lock.holder = None
            op.holding = False
            self._advance(lock)

    def _preempt(self, lock: DeviceLock, holder: TransferOp) -> None:
        t = holder.transfer
        t.handshake.phase = "preempted"
        self.trace.emit(self.scheduler.now, f"gpu{holder.gpu}", "handshake_preempted",
                        xfer=t.xfer_id)
        self._release(lock, holder)

    def _on_granted(self, lock: DeviceLock, op: TransferOp) -> None:
        t = op.transfer
        if t.group_id == MIGRATION and self.config.handshake and op.kind == "send":
            t.handshake.phase = "awaiting_reply"
            rnd = t.handshake.round
            self.trace.emit(self.scheduler.now, f"gpu{op.gpu}", "handshake_ack",
                            xfer=t.xfer_id, dst=t.dst)
            self.scheduler.after(self.config.control_latency,
                                 lambda: self._on_ack(t, rnd))
            return
        self._maybe_start(t)

    def _maybe_start(self, t: Transfer) -> None:
        if t.state != "pending":
            return
        if not (t.send_op.holding and t.recv_op.holding):
            return
        if t.group_id == MIGRATION and self.config.handshake \
                and t.handshake.phase != "accepted":
            return
        t.state = "active"
        t.start_time = self.scheduler.now
        link = (t.src, t.dst)
        assert self._active_on_link.get(link, 0) == 0, "link over-allocated"
        self._active_on_link[link] = 1
        duration = t.bytes / self.bandwidth(t.src, t.dst)
        self.trace.emit(self.scheduler.now, "fabric", "transfer_start",
                        xfer=t.xfer_id, group=t.group_id, src=t.src, dst=t.dst,
                        bytes=t.bytes)
        self.scheduler.after(duration, lambda: self._complete(t))

    def _complete(self, t: Transfer) -> None:
        t.state = "done"
        t.complete_time = self.scheduler.now
        self._active_on_link[(t.src, t.dst)] = 0
        for op in (t.send_op, t.recv_op):
            op.done = True
            op.complete_time = self.scheduler.now
            self._release(self.locks[op.gpu], op)
        self.trace.emit(self.scheduler.now, "fabric", "transfer_complete",
                        xfer=t.xfer_id, group=t.group_id, src=t.src, dst=t.dst,
                        bytes=t.bytes)
        if t.on_complete is not None:
            t.on_complete(t)

    # -- two-phase handshake -------------------------------------------------

    def _stale(self, t: Transfer, rnd: int) -> bool:
        return t.state != "pending" or rnd != t.handshake.round

    def _on_ack(self, t: Transfer, rnd: int) -> None:
        """ACK reached the receiver: try-acquire its device lock."""
        if self._stale(t, rnd):
            return
        lock = self.locks[t.dst]
        if lock.holder is None:
            lock.holder = t.recv_op
            t.recv_op.holding = True
            t.handshake.recv_round = rnd
            self.trace.emit(self.scheduler.now, f"gpu{t.dst}", "handshake_accept",
                            xfer=t.xfer_id)
            self.scheduler.after(self.config.control_latency,
                                 lambda: self._on_accept(t, rnd))
        else:
            self.trace.emit(self.scheduler.now, f"gpu{t.dst}", "handshake_reject",
                            xfer=t.xfer_id)
            self.scheduler.after(self.config.control_latency,
                                 lambda: self._on_reject(t, rnd))

    def _on_accept(self, t: Transfer, rnd: int) -> None:
        """ACCEPT reached the sender."""
        if self._stale(t, rnd):
            return
        if t.handshake.phase == "preempted" or not t.send_op.holding \
                or not t.recv_op.holding:
            # One side backed off while the reply was in flight; tell the
            # receiver to drop its speculative hold and retry later.
            self.scheduler.after(self.config.control_latency,
                                 lambda: self._on_abort(t, rnd))
            self._schedule_retry(t)
            return
        t.handshake.phase = "accepted"
        self._maybe_start(t)

    def _on_reject(self, t: Transfer, rnd: int) -> None:
        """REJECT reached the sender: release and retry after the timeout."""
        if self._stale(t, rnd):
            return
        t.handshake.phase = "rejected"
        self._release(self.locks[t.src], t.send_op)
        self._schedule_retry(t)

    def _on_abort(self, t: Transfer, rnd: int) -> None:
        if t.state != "pending":
            return
        if t.recv_op.holding and t.handshake.recv_round == rnd:
            self._release(self.locks[t.dst], t.recv_op)

    def _schedule_retry(self, t: Transfer) -> None:
        # Supersede any in-flight control messages from this round.
        t.handshake.round += 1
        rnd = t.handshake.round
        if t.send_op.holding:
            self._release(self.locks[t.src], t.send_op)
        # Stagger retries with a transfer-specific slope (golden-ratio
        # fractions are pairwise distinct), otherwise two senders targeting
        # each other's GPU reject and retry in lockstep forever.
        t.handshake.retries += 1
        slope = (0.6180339887498949 * (t.xfer_id + 1)) % 1.0
        delay = self.config.retry_timeout * (1.0 + t.handshake.retries * slope)
        t.handshake.retry_deadline = self.scheduler.now + delay
        self.trace.emit(self.scheduler.now, f"gpu{t.src}", "handshake_retry",
                        xfer=t.xfer_id, at=t.handshake.retry_deadline)

        def retry() -> None:
            if self._stale(t, rnd):
                return
            t.handshake.phase = "idle"
            self._enqueue(self.locks[t.src], t.send_op)

        self.scheduler.after(delay, retry)


def detect_deadlock(fabric: CommFabric) -> list[tuple[int, int]] | None:
    """Wait-for cycle over device locks and pending matches, or None.

    Meaningful when the simulator is quiescent (no event can fire): an op
    queued on a lock waits on the holder; an op holding its lock with an
    unstarted transfer waits on its peer op.
    """
    edges: dict[int, int] = {}
    ops: dict[int, TransferOp] = {}
    for lock in fabric.locks.values():
        for op in lock.waiting():
            if lock.holder is not None and not op.done:
                ops[op.op_id] = op
                edges[op.op_id] = lock.holder.op_id
                ops[lock.holder.op_id] = lock.holder
    for t in fabric.transfers:
        if t.state != "pending":
            continue
        for op, peer in ((t.send_op, t.recv_op), (t.recv_op, t.send_op)):
            if op.holding and not peer.done:
                ops[op.op_id] = op
                ops[peer.op_id] = peer
                edges[op.op_id] = peer.op_id

    for start in sorted(edges):
        path: list[int] = []
        node = start
        seen_local: set[int] = set()
        while node in edges and node not in seen_local:
            seen_local.add(node)
            path.append(node)
            node = edges[node]
            if node in path:
                cycle = path[path.index(node):]
                return [(ops[o].gpu, o) for o in cycle]
    return None
