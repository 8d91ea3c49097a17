"""Shared builders for randomized cluster/config/store test inputs."""

from __future__ import annotations

import random

from pipeshift.cluster import GpuSpec, ModelSpec, PPConfig
from pipeshift.events import EventScheduler, EventTrace
from pipeshift.fabric import CommFabric, FabricConfig, detect_deadlock

MIB = 1024 * 1024


def make_gpu(gpu_id: int = 1, mem_mib: int = 4096, granularity_mib: int = 2,
             prefill_cost: float = 1e-5, decode_cost: float = 1e-5) -> GpuSpec:
    return GpuSpec(
        id=gpu_id,
        mem_total=mem_mib * MIB,
        mem_bandwidth=1e12,
        prefill_cost=prefill_cost,
        decode_cost=decode_cost,
        alloc_granularity=granularity_mib * MIB,
    )


def make_model(num_layers: int = 8, k: int = 1, weight_mib: int = 64,
               token_kv_bytes: int = 8 * 1024) -> ModelSpec:
    return ModelSpec(
        num_layers=num_layers,
        layer_weight_bytes=weight_mib * MIB,
        token_kv_bytes_per_layer=token_kv_bytes,
        stacking_factor=k,
    )


def random_partition(rng: random.Random, total_groups: int, parts: int) -> list[int]:
    """Split total_groups into `parts` positive integers."""
    cuts = sorted(rng.sample(range(1, total_groups), parts - 1)) if parts > 1 else []
    bounds = [0] + cuts + [total_groups]
    return [bounds[i + 1] - bounds[i] for i in range(parts)]


def partition_to_config(group_counts: list[int], k: int,
                        gpu_ids: list[int]) -> PPConfig:
    assignment = []
    start = 1
    for gpu_id, groups in zip(gpu_ids, group_counts):
        end = start + groups * k - 1
        assignment.append((gpu_id, (start, end)))
        start = end + 1
    return PPConfig(assignment)


def random_config_pair(rng: random.Random, n_gpus: int, total_groups: int,
                       k: int) -> tuple[PPConfig, PPConfig]:
    ids = list(range(1, n_gpus + 1))
    cur = partition_to_config(random_partition(rng, total_groups, n_gpus), k, ids)
    tgt = partition_to_config(random_partition(rng, total_groups, n_gpus), k, ids)
    return cur, tgt


def random_fabric_schedule(seed: int, handshake: bool):
    """One randomized transfer schedule on a <=4-GPU fabric.

    Inference transfers follow a random pipeline order (stage-forward only,
    with pre-posted receives); migration transfers pair arbitrary GPUs in
    either direction. Returns (fabric, transfers) after running the
    schedule to quiescence.
    """
    rng = random.Random(seed)
    n_gpus = rng.randint(2, 4)
    gpus = list(range(1, n_gpus + 1))
    order = gpus[:]
    rng.shuffle(order)

    scheduler = EventScheduler()
    trace = EventTrace()
    config = FabricConfig(handshake=handshake)
    fabric = CommFabric(scheduler, trace, gpus, config)

    transfers = []
    # Transfers on one directed pair must be issued in a consistent order
    # on both endpoints (as a correct pipeline program does); the cursor
    # keeps per-pair issue windows disjoint. Inference-vs-migration timing
    # stays fully randomized, which is the hazard under test.
    pair_cursor: dict[tuple[int, int], float] = {}
    for _ in range(rng.randint(2, 8)):
        nbytes = rng.randint(10_000, 2_000_000)
        if rng.random() < 0.5 and n_gpus >= 2:
            stage = rng.randrange(n_gpus - 1)
            src, dst = order[stage], order[stage + 1]
            base = max(pair_cursor.get((src, dst), 0.0), rng.uniform(0.0, 0.004))
            stagger = rng.uniform(0.0, 0.002)  # recv pre-posted before send
            pair_cursor[(src, dst)] = base + stagger + 1e-6
            transfers.append(fabric.post_pair(
                "inference", src, dst, nbytes,
                send_delay=base + stagger, recv_delay=base))
        else:
            src, dst = rng.sample(gpus, 2)
            post = rng.uniform(0.0, 0.004)
            transfers.append(fabric.post_pair(
                "migration", src, dst, nbytes,
                send_delay=post, recv_delay=post))
    scheduler.run(until=30.0)
    return fabric, transfers


def assert_schedule_clean(fabric, transfers) -> None:
    cycle = detect_deadlock(fabric)
    assert cycle is None, f"deadlock cycle: {cycle}"
    for t in transfers:
        assert t.state == "done", f"transfer {t.xfer_id} stuck in {t.state}"
