"""Deterministic simulator for distributed ML training over a four-layer
cloud / fog / edge / device network.

The simulator executes real training (gradient-checked MLPs) under federated
learning, homogeneous and heterogeneous split learning, and a nested
FedSplit scheme, while a discrete-event engine charges every computation and
transmission with latency and energy under configurable radio access schemes
(OMA/NOMA, grant-based/grant-free, D2D side links).
"""

from .engine import Engine, EventKind, RngStreams
from .errors import SimulationError
from .placement import (
    CostEstimate,
    SelectionPolicy,
    TrainingPlan,
    TrainingTask,
    choose_placement,
    estimate_cost,
    select_ue_pool,
)
from .protocols import (
    FlSession,
    MetricsTrace,
    SlSession,
    TrainingConfig,
    run_fedsplit_nested,
    run_fl,
    run_sl_heterogeneous,
    run_sl_homogeneous,
)
from .radio import AccessScheme, RadioEnv, SchemeKind
from .scenario import ScenarioConfig, assemble, load_scenario, validate_document
from .topology import NetworkTopology, Tier, build_topology, validate_layer_span

__version__ = "0.1.0"

__all__ = [
    "AccessScheme",
    "CostEstimate",
    "Engine",
    "EventKind",
    "FlSession",
    "MetricsTrace",
    "NetworkTopology",
    "RadioEnv",
    "RngStreams",
    "ScenarioConfig",
    "SchemeKind",
    "SelectionPolicy",
    "SimulationError",
    "SlSession",
    "Tier",
    "TrainingConfig",
    "TrainingPlan",
    "TrainingTask",
    "assemble",
    "build_topology",
    "choose_placement",
    "estimate_cost",
    "load_scenario",
    "run_fedsplit_nested",
    "run_fl",
    "run_sl_heterogeneous",
    "run_sl_homogeneous",
    "select_ue_pool",
    "validate_document",
    "validate_layer_span",
    "__version__",
]
