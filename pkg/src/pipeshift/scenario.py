"""Scenario files: a structured YAML document with explicit units.

Every physical quantity carries its unit in the value string ("80 GiB",
"0.1 ms", "100 Gbps", "512 tokens", "3 req/s"); bare numbers are rejected
for dimensioned fields. Counts, ratios, and flags stay plain. Mixing
mebibytes, gigabits, and milliseconds silently is the easiest way to wreck
a capacity model, so the parser refuses to guess.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any

import yaml

from .cluster import GpuSpec, ModelSpec, PPConfig, validate_pp_config
from .coordinator import FeatureFlags
from .engine import WorkloadSpec
from .fabric import FabricConfig

SCHEMA_VERSION = 1


class ScenarioError(Exception):
    """Malformed scenario; the message names the offending field."""


_BYTES = {
    "B": 1, "KiB": 1024, "MiB": 1024 ** 2, "GiB": 1024 ** 3,
    "KB": 10 ** 3, "MB": 10 ** 6, "GB": 10 ** 9,
}
_SECONDS = {"s": 1.0, "ms": 1e-3, "us": 1e-6, "ns": 1e-9, "min": 60.0}
_RATES = {
    "B/s": 1.0, "KiB/s": 1024.0, "MiB/s": 1024.0 ** 2, "GiB/s": 1024.0 ** 3,
    "KB/s": 1e3, "MB/s": 1e6, "GB/s": 1e9,
    "bps": 0.125, "Kbps": 125.0, "Mbps": 1.25e5, "Gbps": 1.25e8,
}

_QUANTITY_RE = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][+-]?[0-9]+)?)\s*([A-Za-z/%]+)\s*$")


def _parse(value: Any, units: dict[str, float], field_name: str, kind: str) -> float:
    if not isinstance(value, str):
        raise ScenarioError(
            f"{field_name}: expected a {kind} quantity with an explicit unit, "
            f"got bare {value!r}")
    m = _QUANTITY_RE.match(value)
    if not m or m.group(2) not in units:
        raise ScenarioError(
            f"{field_name}: cannot parse {value!r} as {kind} "
            f"(accepted units: {', '.join(sorted(units))})")
    return float(m.group(1)) * units[m.group(2)]


def parse_bytes(value: Any, field_name: str) -> int:
    return int(_parse(value, _BYTES, field_name, "byte"))


def parse_seconds(value: Any, field_name: str) -> float:
    return _parse(value, _SECONDS, field_name, "time")


def parse_bandwidth(value: Any, field_name: str) -> float:
    return _parse(value, _RATES, field_name, "bandwidth")


def parse_tokens(value: Any, field_name: str) -> int:
    return int(_parse(value, {"tokens": 1, "token": 1}, field_name, "token"))


def parse_rate(value: Any, field_name: str) -> float:
    return _parse(value, {"req/s": 1.0, "req/min": 1 / 60.0}, field_name,
                  "request-rate")


@dataclass
class ReconfigTrigger:
    at: float
    target: PPConfig
    tau: int = 50
    poll_interval: float = 0.01


@dataclass
class SweepSpec:
    rates: list[float] = field(default_factory=list)
    stacking: list[int] = field(default_factory=lambda: [1, 2, 4, 8])


@dataclass
class Scenario:
    cluster: list[GpuSpec]
    model: ModelSpec
    initial_config: PPConfig
    workload: WorkloadSpec
    triggers: list[ReconfigTrigger] = field(default_factory=list)
    flags: FeatureFlags = field(default_factory=FeatureFlags)
    fabric: FabricConfig = field(default_factory=FabricConfig)
    max_batch: int = 32
    util_ratio: float = 0.9
    host_bandwidth: float = 16 * 1024 ** 3
    disk_bandwidth: float = 2 * 1024 ** 3
    drain_period: float = 1e-3
    sweep: SweepSpec = field(default_factory=SweepSpec)

    def cluster_map(self) -> dict[int, GpuSpec]:
        return {g.id: g for g in self.cluster}


def _parse_config(raw: Any, field_name: str) -> PPConfig:
    try:
        return PPConfig([(gpu, (s, e)) for gpu, (s, e) in raw])
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{field_name}: expected [[gpu, [start, end]], ...]: {exc}")


def _require(raw: dict, key: str, section: str) -> Any:
    if key not in raw:
        raise ScenarioError(f"{section}.{key}: missing required field")
    return raw[key]


def load_scenario(path: str) -> Scenario:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    return scenario_from_dict(raw)


def scenario_from_dict(raw: dict) -> Scenario:
    if not isinstance(raw, dict):
        raise ScenarioError("scenario: top level must be a mapping")
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ScenarioError(f"schema_version: unsupported version {version}")

    cluster = []
    for i, g in enumerate(raw.get("cluster", [])):
        section = f"cluster[{i}]"
        try:
            cluster.append(GpuSpec(
                id=int(_require(g, "id", section)),
                mem_total=parse_bytes(_require(g, "mem_total", section),
                                      f"{section}.mem_total"),
                mem_bandwidth=parse_bandwidth(
                    _require(g, "mem_bandwidth", section), f"{section}.mem_bandwidth"),
                prefill_cost=parse_seconds(
                    _require(g, "prefill_cost", section), f"{section}.prefill_cost"),
                decode_cost=parse_seconds(
                    _require(g, "decode_cost", section), f"{section}.decode_cost"),
                alloc_granularity=parse_bytes(
                    g.get("alloc_granularity", "2 MiB"),
                    f"{section}.alloc_granularity"),
            ))
        except ValueError as exc:
            raise ScenarioError(f"{section}: {exc}")
    if not cluster:
        raise ScenarioError("cluster: at least one GPU required")

    m = raw.get("model")
    if not isinstance(m, dict):
        raise ScenarioError("model: missing section")
    flags_raw = raw.get("flags", {})
    stacking = int(flags_raw.get("stacking", m.get("stacking_factor", 4)))
    try:
        model = ModelSpec(
            num_layers=int(_require(m, "num_layers", "model")),
            layer_weight_bytes=parse_bytes(
                _require(m, "layer_weight_bytes", "model"), "model.layer_weight_bytes"),
            token_kv_bytes_per_layer=parse_bytes(
                _require(m, "token_kv_bytes_per_layer", "model"),
                "model.token_kv_bytes_per_layer"),
            stacking_factor=stacking,
            activation_bytes_per_token=parse_bytes(
                m.get("activation_bytes_per_token", "16 KiB"),
                "model.activation_bytes_per_token"),
        )
    except ValueError as exc:
        raise ScenarioError(f"model: {exc}")

    initial = _parse_config(_require(raw, "initial_config", "scenario"),
                            "initial_config")
    violations = validate_pp_config(initial, model, cluster)
    if violations:
        raise ScenarioError(f"initial_config: {violations}")

    w = raw.get("workload")
    if not isinstance(w, dict):
        raise ScenarioError("workload: missing section")
    pattern = _require(w, "pattern", "workload")
    shifts = []
    for j, s in enumerate(w.get("shifts", [])):
        shifts.append((parse_seconds(_require(s, "at", f"workload.shifts[{j}]"),
                                     f"workload.shifts[{j}].at"),
                       _require(s, "pattern", f"workload.shifts[{j}]")))
    workload = WorkloadSpec(
        pattern=pattern,
        rate=parse_rate(_require(w, "rate", "workload"), "workload.rate"),
        num_requests=int(_require(w, "num_requests", "workload")),
        shifts=tuple(shifts),
        jitter=bool(w.get("jitter", False)),
    )
    if pattern not in ("prefill_heavy", "decode_heavy", "shift_schedule"):
        raise ScenarioError(f"workload.pattern: unknown pattern {pattern!r}")

    triggers = []
    for j, t in enumerate(raw.get("reconfig_triggers", [])):
        section = f"reconfig_triggers[{j}]"
        target = _parse_config(_require(t, "target_config", section),
                               f"{section}.target_config")
        violations = validate_pp_config(target, model, cluster)
        if violations:
            raise ScenarioError(f"{section}.target_config: {violations}")
        triggers.append(ReconfigTrigger(
            at=parse_seconds(_require(t, "at", section), f"{section}.at"),
            target=target,
            tau=parse_tokens(t.get("tau", "50 tokens"), f"{section}.tau"),
            poll_interval=parse_seconds(t.get("poll_interval", "10 ms"),
                                        f"{section}.poll_interval"),
        ))

    flags = FeatureFlags(
        kv_resize=bool(flags_raw.get("kv_resize", True)),
        kv_patch=bool(flags_raw.get("kv_patch", True)),
        async_weights=bool(flags_raw.get("async_weights", True)),
        handshake=bool(flags_raw.get("handshake", True)),
    )

    f = raw.get("fabric", {})
    fabric = FabricConfig(
        link_bandwidth=parse_bandwidth(f.get("link_bandwidth", "100 Gbps"),
                                       "fabric.link_bandwidth"),
        control_latency=parse_seconds(f.get("control_latency", "0.1 ms"),
                                      "fabric.control_latency"),
        retry_timeout=parse_seconds(f.get("retry_timeout", "1 ms"),
                                    "fabric.retry_timeout"),
        handshake=flags.handshake,
        sharing=f.get("sharing", "strict"),
        migration_weight=float(f.get("migration_weight", 0.2)),
    )
    if fabric.sharing not in ("strict", "weighted"):
        raise ScenarioError(f"fabric.sharing: unknown mode {fabric.sharing!r}")

    e = raw.get("engine", {})
    wts = raw.get("weights", {})
    sweep_raw = raw.get("sweep", {})
    sweep = SweepSpec(
        rates=[parse_rate(r, "sweep.rates") for r in sweep_raw.get("rates", [])],
        stacking=[int(k) for k in sweep_raw.get("stacking", [1, 2, 4, 8])],
    )

    return Scenario(
        cluster=cluster, model=model, initial_config=initial, workload=workload,
        triggers=triggers, flags=flags, fabric=fabric,
        max_batch=int(e.get("max_batch", 32)),
        util_ratio=float(e.get("kv_util_ratio", 0.9)),
        host_bandwidth=parse_bandwidth(wts.get("host_bandwidth", "16 GiB/s"),
                                       "weights.host_bandwidth"),
        disk_bandwidth=parse_bandwidth(wts.get("disk_bandwidth", "2 GiB/s"),
                                       "weights.disk_bandwidth"),
        drain_period=parse_seconds(e.get("drain_period", "1 ms"),
                                   "engine.drain_period"),
        sweep=sweep,
    )
