"""Per-GPU block-granular KV cache with layer stacking and live resizing.

Memory model: the store owns ``capacity_blocks`` logical blocks. A block,
once bound to a request, holds that request's tokens for *every* layer
group resident on the GPU (one physical allocation unit per group, all
indexed by the same block id). Stacking factor k packs a group's k layers
into each unit, so one block spans ``tokens_per_block`` tokens per group.

Payloads are integer fingerprints of the simulated KV bytes, not tensors;
migration correctness is verified bit-exactly on them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from heapq import heappop, heappush
from math import ceil
from typing import Iterable, Sequence

from .cluster import GpuSpec, ModelSpec


class KvError(Exception):
    pass


class KvOverflow(KvError):
    """No free block available for the requested append."""


class CapacityBelowLive(KvError):
    """Shrink target below the number of live blocks."""


class UnknownSlot(KvError):
    pass


class UnknownLayerGroup(KvError):
    pass


class InsufficientMemory(KvError):
    pass


@dataclass
class PhysicalBlock:
    block_id: int
    address: int
    capacity_tokens: int
    # group -> offset -> payload checksum
    cells: dict[int, dict[int, int]] = field(default_factory=dict)
    owner: str | None = None

    @property
    def state(self) -> str:
        return "live" if self.owner is not None else "free"

    def occupied_tokens(self) -> int:
        return sum(len(offsets) for offsets in self.cells.values())


@dataclass(frozen=True)
class StackedSlot:
    block_id: int
    layer_group: int
    offset: int
    checksum: int


@dataclass
class BlockTable:
    """Per-request mapping from token positions to resolved block addresses.

    The chain is shared by all layer groups of the request on this GPU;
    ``written[g]`` is the contiguous token prefix appended for group g.
    """

    chain: list[PhysicalBlock] = field(default_factory=list)
    written: dict[int, int] = field(default_factory=dict)

    def addresses(self, group: int, tokens_per_block: int) -> list[int]:
        n = ceil(self.written.get(group, 0) / tokens_per_block)
        return [b.address for b in self.chain[:n]]


class KvStore:
    """Block-granular KV cache for one simulated GPU."""

    def __init__(self, gpu_id: int, stacking_factor: int, tokens_per_block: int,
                 capacity_blocks: int, resident_groups: Iterable[int] = ()) -> None:
        if tokens_per_block <= 0:
            raise ValueError("tokens_per_block must be positive")
        self.gpu_id = gpu_id
        self.stacking_factor = stacking_factor
        self.tokens_per_block = tokens_per_block
        self.blocks: list[PhysicalBlock] = []
        self.tables: dict[str, BlockTable] = {}
        self.resident_groups: set[int] = set(resident_groups)
        self._serial = 0
        self._used = 0
        self._occupied = 0  # token-slot cells currently written, O(1) audit
        # Lowest-block-id-first allocation: a lazily invalidated min-heap of
        # candidate free ids keeps allocation deterministic and O(log B).
        self._free_heap: list[int] = []
        self._by_id: dict[int, PhysicalBlock] = {}
        for _ in range(capacity_blocks):
            self.blocks.append(self._new_block())

    def _new_block(self) -> PhysicalBlock:
        serial = self._serial
        self._serial += 1
        address = (self.gpu_id << 44) | (serial << 21)
        block = PhysicalBlock(block_id=serial, address=address,
                              capacity_tokens=self.tokens_per_block)
        self._by_id[serial] = block
        heappush(self._free_heap, serial)
        return block

    def _alloc_block(self, request_id: str) -> PhysicalBlock | None:
        while self._free_heap:
            block = self._by_id.get(heappop(self._free_heap))
            if block is not None and block.owner is None:
                block.owner = request_id
                self._used += 1
                return block
        return None

    def _release_block(self, block: PhysicalBlock) -> None:
        block.owner = None
        block.cells = {}
        self._used -= 1
        heappush(self._free_heap, block.block_id)

    # -- accounting ---------------------------------------------------------

    @property
    def capacity_blocks(self) -> int:
        return len(self.blocks)

    @property
    def used_blocks(self) -> int:
        return self._used

    @property
    def free_blocks(self) -> int:
        return len(self.blocks) - self._used

    def chain_len(self, request_id: str) -> int:
        table = self.tables.get(request_id)
        return len(table.chain) if table else 0

    def blocks_needed(self, request_id: str, extra_tokens: int) -> int:
        """Free blocks required to extend the request by extra_tokens."""
        table = self.tables.get(request_id)
        longest = max(table.written.values(), default=0) if table else 0
        have = len(table.chain) if table else 0
        return max(0, ceil((longest + extra_tokens) / self.tokens_per_block) - have)

    # -- operations ---------------------------------------------------------

    def append(self, request_id: str, layer_group: int, n_tokens: int,
               payload_checksums: Sequence[int]) -> list[StackedSlot]:
        """Append tokens for one layer group, allocating blocks on demand.

        Atomic: raises KvOverflow without mutating state when the free pool
        cannot cover the new chain blocks. Returns the slots written, which
        the migration engine treats as the dirty set of this step.
        """
        if n_tokens != len(payload_checksums):
            raise ValueError("one checksum per token required")
        if n_tokens == 0:
            return []
        table = self.tables.get(request_id)
        if table is None:
            table = self.tables[request_id] = BlockTable()
        start = table.written.get(layer_group, 0)
        needed = max(0, ceil((start + n_tokens) / self.tokens_per_block) - len(table.chain))
        if needed > 0:
            if needed > self.free_blocks:
                if not table.chain and not table.written:
                    del self.tables[request_id]
                raise KvOverflow(
                    f"gpu {self.gpu_id}: need {needed} blocks, {self.free_blocks} free"
                )
            for _ in range(needed):
                table.chain.append(self._alloc_block(request_id))
        slots: list[StackedSlot] = []
        s = self.tokens_per_block
        for i in range(n_tokens):
            pos = start + i
            block = table.chain[pos // s]
            block.cells.setdefault(layer_group, {})[pos % s] = payload_checksums[i]
            slots.append(StackedSlot(block.block_id, layer_group, pos % s,
                                     payload_checksums[i]))
        table.written[layer_group] = start + n_tokens
        self._occupied += n_tokens
        return slots

    def write_slots(self, request_id: str, layer_group: int,
                    items: Sequence[tuple[int, int]]) -> None:
        """Write (token position, checksum) pairs, extending the chain to cover
        the highest position. Used by the migration receiver, whose incoming
        patches are cumulative prefixes of the source's appends."""
        if not items:
            return
        table = self.tables.get(request_id)
        if table is None:
            table = self.tables[request_id] = BlockTable()
        top = max(pos for pos, _ in items) + 1
        needed = max(0, ceil(top / self.tokens_per_block) - len(table.chain))
        if needed > self.free_blocks:
            if not table.chain and not table.written:
                del self.tables[request_id]
            raise KvOverflow(
                f"gpu {self.gpu_id}: need {needed} blocks, {self.free_blocks} free"
            )
        for _ in range(needed):
            table.chain.append(self._alloc_block(request_id))
        s = self.tokens_per_block
        for pos, checksum in items:
            cells = table.chain[pos // s].cells.setdefault(layer_group, {})
            if pos % s not in cells:
                self._occupied += 1
            cells[pos % s] = checksum
        table.written[layer_group] = max(table.written.get(layer_group, 0), top)

    def lookup(self, request_id: str, layer: int, token_idx: int) -> tuple[int, int]:
        """Resolve (address, offset) through the block table; never scans."""
        group = (layer - 1) // self.stacking_factor
        table = self.tables.get(request_id)
        if table is None or token_idx < 0 or token_idx >= table.written.get(group, 0):
            raise UnknownSlot(f"{request_id} layer {layer} token {token_idx}")
        s = self.tokens_per_block
        block = table.chain[token_idx // s]
        return block.address, token_idx % s

    def read_checksum(self, request_id: str, layer_group: int, token_idx: int) -> int:
        """Snapshot-read of one slot's payload fingerprint."""
        table = self.tables.get(request_id)
        if table is None or token_idx >= table.written.get(layer_group, 0):
            raise UnknownSlot(f"{request_id} group {layer_group} token {token_idx}")
        s = self.tokens_per_block
        return table.chain[token_idx // s].cells[layer_group][token_idx % s]

    def compact(self) -> int:
        """Stable-partition the block list so live blocks precede free ones.

        Pointer updates only: no block's address or contents change, so
        every block-table resolution is identical before and after. Returns
        the number of free blocks now forming the tail.
        """
        live = [b for b in self.blocks if b.owner is not None]
        free = [b for b in self.blocks if b.owner is None]
        self.blocks = live + free
        return len(free)

    def resize(self, new_capacity: int) -> None:
        """Grow or shrink capacity; live data is untouched either way.

        Shrink releases the free-block suffix (compacting first if free
        blocks are interleaved); raises CapacityBelowLive when the target
        is below the live-block count, leaving the store unchanged.
        """
        if new_capacity < 0:
            raise ValueError("capacity must be non-negative")
        if new_capacity == len(self.blocks):
            return
        if new_capacity > len(self.blocks):
            for _ in range(new_capacity - len(self.blocks)):
                self.blocks.append(self._new_block())
            return
        if self._used > new_capacity:
            raise CapacityBelowLive(
                f"gpu {self.gpu_id}: {self._used} live blocks > target {new_capacity}"
            )
        if any(b.owner is not None for b in self.blocks[new_capacity:]):
            self.compact()
        for block in self.blocks[new_capacity:]:
            del self._by_id[block.block_id]
        self.blocks = self.blocks[:new_capacity]

    def drop_layer_groups(self, layer_groups: Iterable[int]) -> int:
        """Free every slot of the given resident groups; returns tokens freed.

        Blocks stay live while any co-resident group still has cells in
        them; a block is reclaimed only once all its groups' data is gone.
        """
        groups = set(layer_groups)
        unknown = groups - self.resident_groups
        if unknown:
            raise UnknownLayerGroup(f"gpu {self.gpu_id}: groups {sorted(unknown)} not resident")
        freed_tokens = 0
        for table in self.tables.values():
            for g in sorted(groups):
                freed_tokens += table.written.pop(g, 0)
            for block in table.chain:
                for g in groups:
                    dropped = block.cells.pop(g, None)
                    if dropped:
                        self._occupied -= len(dropped)
            # Remaining groups hold contiguous prefixes, so empty blocks can
            # only form a tail; releasing them never shifts positions.
            while table.chain and table.chain[-1].occupied_tokens() == 0:
                self._release_block(table.chain.pop())
        self.tables = {r: t for r, t in self.tables.items() if t.chain or t.written}
        self.resident_groups -= groups
        return freed_tokens

    def free_request(self, request_id: str) -> dict[int, tuple[int, int]]:
        """Release the request's blocks; returns per-group (consumed, allocated)
        token-slot counts for lifetime utilization accounting."""
        table = self.tables.pop(request_id, None)
        if table is None:
            return {}
        s = self.tokens_per_block
        stats = {g: (w, ceil(w / s) * s) for g, w in table.written.items()}
        for block in table.chain:
            self._occupied -= block.occupied_tokens()
            self._release_block(block)
        return stats

    def effective_utilization(self) -> float:
        """Fraction of allocated KV slots actually holding tokens (1.0 if idle)."""
        if self._used == 0:
            return 1.0
        denom = self._used * self.tokens_per_block * max(1, len(self.resident_groups))
        return self._occupied / denom

    def snapshot_group(self, layer_group: int) -> dict[str, tuple[int, ...]]:
        """All checksums of one group, keyed by request, in token order."""
        out: dict[str, tuple[int, ...]] = {}
        for request_id in sorted(self.tables):
            table = self.tables[request_id]
            w = table.written.get(layer_group, 0)
            if w == 0:
                continue
            s = self.tokens_per_block
            out[request_id] = tuple(
                table.chain[pos // s].cells[layer_group][pos % s] for pos in range(w)
            )
        return out

    def state_digest(self) -> tuple:
        """Canonical content summary for rollback audits."""
        tables = []
        for request_id in sorted(self.tables):
            table = self.tables[request_id]
            tables.append((
                request_id,
                tuple(sorted(table.written.items())),
                tuple(
                    tuple(sorted((g, tuple(sorted(cells.items())))
                                 for g, cells in b.cells.items()))
                    for b in table.chain
                ),
            ))
        return (len(self.blocks), self._used, tuple(sorted(self.resident_groups)),
                tuple(tables))


def kv_init(gpu: GpuSpec, model: ModelSpec, capacity_blocks: int,
            resident_groups: Iterable[int] = (), weight_bytes: int = 0) -> KvStore:
    """Build an empty store, checking the simulated memory budget."""
    groups = set(resident_groups)
    kv_bytes = capacity_blocks * gpu.alloc_granularity * max(1, len(groups))
    if kv_bytes + weight_bytes > gpu.mem_total:
        raise InsufficientMemory(
            f"gpu {gpu.id}: {kv_bytes + weight_bytes} B exceeds {gpu.mem_total} B"
        )
    return KvStore(gpu.id, model.stacking_factor, model.tokens_per_block(gpu),
                   capacity_blocks, groups)
