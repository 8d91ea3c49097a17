"""Discrete-event simulator for live in-place pipeline-parallel
reconfiguration of LLM serving clusters."""

from .cluster import (
    GpuSpec,
    LayerAssignmentMap,
    MigrationMap,
    ModelSpec,
    PPConfig,
    diff_configs,
    enumerate_pp_configs,
    max_blocks,
    validate_pp_config,
)
from .coordinator import Coordinator, FeatureFlags, Infeasible, ReconfigPlan, feasibility
from .engine import Metrics, Request, WorkloadSpec, compute_metrics, generate_workload, score
from .events import EventScheduler, EventTrace
from .fabric import CommFabric, FabricConfig, detect_deadlock
from .kvstore import KvOverflow, KvStore, kv_init
from .migrator import ConvergenceCounters, DirtyBitmap, KvPatch, MigrationManager
from .scenario import Scenario, ScenarioError, load_scenario
from .simulation import RunResult, Simulation, run_scenario
from .weights import WeightLoader, WeightResidency

__version__ = "0.1.0"
