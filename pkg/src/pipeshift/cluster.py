"""Static world model: GPUs, the served model, and pipeline-parallel configs.

Everything here is a pure value type or a pure function; the derivation
functions (config diff, block budgets) are what the reconfiguration
coordinator composes into a plan.

Layers are 1-indexed at every interface. A "stacking group" is a run of
``stacking_factor`` consecutive layers that shares physical KV blocks and
always moves between GPUs as a unit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from math import floor

MIB = 1024 * 1024

# Maps keyed by gpu_id; MigrationMap keyed by (src_gpu, dst_gpu).
LayerAssignmentMap = dict[int, set[int]]
MigrationMap = dict[tuple[int, int], set[int]]


@dataclass(frozen=True)
class GpuSpec:
    """One simulated GPU.

    ``prefill_cost`` / ``decode_cost`` are seconds per (layer * token) of
    compute; they are the calibration knobs that make a GPU compute-strong
    or bandwidth-strong.
    """

    id: int
    mem_total: int
    mem_bandwidth: float
    prefill_cost: float
    decode_cost: float
    alloc_granularity: int = 2 * MIB

    def __post_init__(self) -> None:
        if self.mem_total <= 0:
            raise ValueError(f"gpu {self.id}: mem_total must be positive")
        if self.mem_bandwidth <= 0 or self.prefill_cost <= 0 or self.decode_cost <= 0:
            raise ValueError(f"gpu {self.id}: bandwidth and costs must be positive")
        if self.alloc_granularity <= 0 or self.mem_total % self.alloc_granularity != 0:
            raise ValueError(
                f"gpu {self.id}: alloc_granularity must divide mem_total"
            )


@dataclass(frozen=True)
class ModelSpec:
    """The served model's memory geometry.

    ``stacking_factor`` (k) is the number of consecutive layers whose KV
    blocks share one physical allocation unit; partitions must be multiples
    of k.
    """

    num_layers: int
    layer_weight_bytes: int
    token_kv_bytes_per_layer: int
    stacking_factor: int = 4
    activation_bytes_per_token: int = 16 * 1024

    def __post_init__(self) -> None:
        if self.num_layers <= 0 or self.layer_weight_bytes < 0:
            raise ValueError("num_layers must be positive, weights non-negative")
        if self.token_kv_bytes_per_layer <= 0:
            raise ValueError("token_kv_bytes_per_layer must be positive")
        if self.stacking_factor <= 0 or self.num_layers % self.stacking_factor != 0:
            raise ValueError("num_layers must be a multiple of stacking_factor")
        if self.activation_bytes_per_token <= 0:
            raise ValueError("activation_bytes_per_token must be positive")

    def group_of(self, layer: int) -> int:
        """Stacking-group index (0-based) of a 1-indexed layer."""
        return (layer - 1) // self.stacking_factor

    def group_layers(self, group: int) -> tuple[int, ...]:
        k = self.stacking_factor
        return tuple(range(group * k + 1, (group + 1) * k + 1))

    def groups_of(self, layers: set[int]) -> set[int]:
        return {self.group_of(l) for l in layers}

    def tokens_per_block(self, gpu: GpuSpec) -> int:
        """Tokens one physical block holds for one stacking group.

        A full allocation unit packs k layers' cells, so each of the group's
        layers effectively spans granularity / (token_kv * k) tokens.
        """
        return gpu.alloc_granularity // (self.token_kv_bytes_per_layer * self.stacking_factor)


@dataclass(frozen=True)
class PPConfig:
    """Ordered assignment of contiguous 1-indexed layer ranges to GPUs."""

    assignment: tuple[tuple[int, tuple[int, int]], ...]

    def __init__(self, assignment) -> None:
        object.__setattr__(
            self,
            "assignment",
            tuple((int(g), (int(s), int(e))) for g, (s, e) in assignment),
        )

    @property
    def gpu_order(self) -> tuple[int, ...]:
        return tuple(g for g, _ in self.assignment)

    def layers_for(self, gpu_id: int) -> set[int]:
        for g, (s, e) in self.assignment:
            if g == gpu_id:
                return set(range(s, e + 1))
        return set()

    def range_for(self, gpu_id: int) -> tuple[int, int] | None:
        for g, (s, e) in self.assignment:
            if g == gpu_id:
                return (s, e)
        return None

    def as_layer_sets(self) -> dict[int, set[int]]:
        return {g: set(range(s, e + 1)) for g, (s, e) in self.assignment}


def validate_pp_config(
    config: PPConfig, model: ModelSpec, cluster: list[GpuSpec]
) -> list[str]:
    """Return every violated invariant; the config is valid iff empty."""
    violations: list[str] = []
    cluster_ids = [g.id for g in cluster]
    seen: list[int] = []
    for gpu_id, (s, e) in config.assignment:
        if gpu_id not in cluster_ids:
            violations.append(f"gpu {gpu_id} not in cluster")
        if gpu_id in seen:
            violations.append(f"gpu {gpu_id} assigned more than once")
        seen.append(gpu_id)
        if s > e:
            violations.append(f"gpu {gpu_id}: empty or inverted range [{s},{e}]")
            continue
        length = e - s + 1
        if length % model.stacking_factor != 0:
            violations.append(
                f"gpu {gpu_id}: range length {length} not a multiple of "
                f"stacking factor {model.stacking_factor}"
            )
    missing = set(cluster_ids) - set(seen)
    if missing:
        violations.append(f"gpus {sorted(missing)} have no layer range")

    # Coverage: ranges must tile [1, num_layers] in pipeline order.
    cursor = 1
    for gpu_id, (s, e) in config.assignment:
        if s > e:
            continue
        if s < cursor:
            violations.append(f"gpu {gpu_id}: overlapping ranges at layer {s}")
        elif s > cursor:
            violations.append(f"gap before layer {s} (expected layer {cursor})")
        cursor = max(cursor, e + 1)
    if cursor != model.num_layers + 1 and not any("gap" in v or "overlap" in v for v in violations):
        violations.append(
            f"ranges cover layers up to {cursor - 1}, model has {model.num_layers}"
        )

    for gpu in cluster:
        if model.token_kv_bytes_per_layer * model.stacking_factor > gpu.alloc_granularity:
            violations.append(
                f"gpu {gpu.id}: one stacked token ({model.token_kv_bytes_per_layer} B "
                f"x k={model.stacking_factor}) exceeds alloc granularity"
            )
    return violations


def max_blocks(
    gpu: GpuSpec, num_layers_on_gpu: int, model: ModelSpec, util_ratio: float
) -> int | None:
    """Largest per-layer KV block budget GPU can hold with L layers resident.

    Evaluates floor((M*u - L*W) / (L*P)) with P the per-layer logical block
    footprint (granularity / k). Returns None when the weights alone exceed
    the memory budget; callers must treat that as reconfiguration-infeasible.

    Exact rational arithmetic so the boundary cases are reproducible.
    """
    if num_layers_on_gpu <= 0:
        raise ValueError("num_layers_on_gpu must be positive")
    if not 0 < util_ratio <= 1:
        raise ValueError("util_ratio must be in (0, 1]")
    p = Fraction(gpu.alloc_granularity, model.stacking_factor)
    numerator = Fraction(gpu.mem_total) * Fraction(util_ratio) - Fraction(
        num_layers_on_gpu * model.layer_weight_bytes
    )
    if numerator < 0:
        return None
    return floor(numerator / (num_layers_on_gpu * p))


def enumerate_pp_configs(num_layers: int, stacking_factor: int,
                         gpu_ids: list[int]) -> list[PPConfig]:
    """All contiguous pipeline partitions at stacking granularity.

    Each GPU gets at least one group of k layers; a 6-layer model on two
    GPUs at k=1 yields the five splits 1/5 .. 5/1.
    """
    groups = num_layers // stacking_factor
    n = len(gpu_ids)
    if groups < n:
        return []
    out: list[PPConfig] = []

    def compose(remaining: int, parts: int, acc: list[int]) -> None:
        if parts == 1:
            out.append(_groups_to_config(acc + [remaining], stacking_factor, gpu_ids))
            return
        for take in range(1, remaining - parts + 2):
            compose(remaining - take, parts - 1, acc + [take])

    compose(groups, n, [])
    return out


def _groups_to_config(group_counts: list[int], k: int, gpu_ids: list[int]) -> PPConfig:
    assignment = []
    start = 1
    for gpu_id, count in zip(gpu_ids, group_counts):
        end = start + count * k - 1
        assignment.append((gpu_id, (start, end)))
        start = end + 1
    return PPConfig(assignment)


def diff_configs(
    c_cur: PPConfig, c_tgt: PPConfig
) -> tuple[dict[int, set[int]], LayerAssignmentMap, LayerAssignmentMap, MigrationMap]:
    """Set algebra between two configs over the same GPU set.

    Returns (c_int, m_add, m_del, m_mig) where the intermediate layer set
    per GPU is the union of current and target, m_add/m_del are the layers
    each GPU gains/loses, and m_mig routes each gained layer from its
    current owner. Pure function.
    """
    cur = c_cur.as_layer_sets()
    tgt = c_tgt.as_layer_sets()
    if set(cur) != set(tgt):
        raise ValueError("configs must cover the same GPU set")

    c_int = {g: cur[g] | tgt[g] for g in cur}
    m_add: LayerAssignmentMap = {}
    m_del: LayerAssignmentMap = {}
    for g in cur:
        add = tgt[g] - cur[g]
        if add:
            m_add[g] = add
        rem = c_int[g] - tgt[g]
        if rem:
            m_del[g] = rem

    owner = {layer: g for g, layers in cur.items() for layer in layers}
    m_mig: MigrationMap = {}
    for dst in sorted(m_add):
        for layer in sorted(m_add[dst]):
            src = owner[layer]
            m_mig.setdefault((src, dst), set()).add(layer)
    return c_int, m_add, m_del, m_mig
