"""Multi-layer scheduling simulator for data-parallel MoE LLM serving."""

from .balancer import BalancerConfig, EngineMetrics, LoadBalancer
from .config import POLICIES, MoeConfig, PlacementConfig, SimConfig, load_config
from .engine import CostModel, Engine, PrefixCacheTable, prefix_lookup
from .moe import ExpertAffinityRecorder, MoeTopology, RoutingModel, comm_cost, record_stats, route_token, route_tokens
from .placement import (
    AffinitySet,
    ExactPlacement,
    GreedyPlacement,
    Placement,
    PlacementCost,
    PlacementProblem,
    build_affinity_set,
    eval_cost,
    exact_solve,
    greedy_place,
    relocate,
)
from .sim import MetricsReport, compare, run
from .sjf import QueuedRequest, SjfConfig, reorder_queue
from .workload import DistributionShape, Request, TraceRecord, gen_arrivals, load_trace, shape_distribution

__version__ = "0.1.0"
