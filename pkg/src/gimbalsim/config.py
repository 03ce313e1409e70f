"""Simulation configuration, policy table and config-file loading."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

import yaml

from .balancer import BalancerConfig
from .engine import CostModel
from .sjf import SjfConfig

ENV_PREFIX = "GIMBALSIM_"


@dataclass(frozen=True)
class Policy:
    load_aware_dispatch: bool
    sjf_queue: bool
    dynamic_placement: bool


POLICIES = {
    "gimbal": Policy(True, True, True),
    "baseline_rr_fcfs": Policy(False, False, False),
    "dplb_only": Policy(True, False, False),
    "sjfs_only": Policy(False, True, False),
    "edr_only": Policy(False, False, True),
}
POLICY_ALIASES = {"baseline": "baseline_rr_fcfs", "vllm": "baseline_rr_fcfs", "dplb": "dplb_only",
                  "sjfs": "sjfs_only", "edr": "edr_only"}


def resolve_policy(name: str) -> str:
    key = name.strip().lower()
    key = POLICY_ALIASES.get(key, key)
    if key not in POLICIES:
        raise ValueError(f"unknown policy {name!r}; choose from {sorted(POLICIES)}")
    return key


@dataclass(frozen=True)
class MoeConfig:
    n_layers: int = 8
    n_experts: int = 16
    top_k: int = 2
    n_gpus: int = 2
    zipf_s: float = 1.2
    lam: float = 0.5
    fanout: int = 2
    floor: float = 0.05
    compute_share: float = 0.3
    comm_penalty: float = 0.1
    # tokens sampled once to price placements, and per relocation window
    reference_tokens: int = 20_000
    window_tokens: int = 4096


@dataclass(frozen=True)
class PlacementConfig:
    alpha: float = 1.0
    beta: float = 1.0
    tau: int = 3000
    anchor_gpu: int = 0
    affinity_threshold: float = 0.0
    top_e: int = 4
    greedy_mode: str = "per_row"
    migration_stall: float = 0.0

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.greedy_mode not in ("total", "per_row"):
            raise ValueError("greedy_mode must be 'total' or 'per_row'")


@dataclass(frozen=True)
class SimConfig:
    n_engines: int = 2
    policy: str = "gimbal"
    balancer: BalancerConfig = field(default_factory=BalancerConfig)
    sjf: SjfConfig = field(default_factory=SjfConfig)
    cost: CostModel = field(default_factory=CostModel)
    kv_capacity: int = 400_000
    block_size: int = 16
    max_batched_tokens: int = 2048
    prefix_cache: bool = True
    user_prefix_tokens: int = 512
    load_signal: str = "prefill_plus_remaining"
    moe: Optional[MoeConfig] = field(default_factory=MoeConfig)
    placement: PlacementConfig = field(default_factory=PlacementConfig)
    metric_interval: float = 0.1
    metric_delay: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "policy", resolve_policy(self.policy))
        if self.n_engines < 1:
            raise ValueError("n_engines must be >= 1")
        if self.balancer.n_engines != self.n_engines:
            object.__setattr__(self, "balancer", dataclasses.replace(self.balancer, n_engines=self.n_engines))
        if not self.metric_interval > 0:
            raise ValueError("metric_interval must be > 0")
        if self.metric_delay is not None and self.metric_delay < 0:
            raise ValueError("metric_delay must be >= 0")
        if self.kv_capacity < 1:
            raise ValueError("kv_capacity must be >= 1")

    @property
    def policy_flags(self) -> Policy:
        return POLICIES[self.policy]

    @property
    def delivery_delay(self) -> float:
        return self.metric_interval if self.metric_delay is None else self.metric_delay

    def with_policy(self, policy: str) -> "SimConfig":
        return dataclasses.replace(self, policy=policy)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Optional[Mapping[str, Any]]) -> "SimConfig":
        return _build(cls, dict(data or {}))


_NESTED = {"balancer": BalancerConfig, "sjf": SjfConfig, "cost": CostModel, "moe": MoeConfig, "placement": PlacementConfig}


def _build(cls, data: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} field(s): {', '.join(sorted(unknown))}")
    kwargs = {}
    for key, value in data.items():
        sub = _NESTED.get(key) if cls is SimConfig else None
        if sub is not None:
            if value is None:
                if key != "moe":
                    raise ValueError(f"{key} cannot be null")
                kwargs[key] = None
            elif isinstance(value, Mapping):
                kwargs[key] = _build(sub, dict(value))
            else:
                raise ValueError(f"{key} must be a mapping")
        else:
            kwargs[key] = value
    return cls(**kwargs)


def _merge(base: dict, over: Mapping) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> dict:
    """``GIMBALSIM_<FIELD>`` / ``GIMBALSIM_<SECTION>__<FIELD>`` values as a nested dict.

    Variables whose first component is not a SimConfig field are skipped, so the
    command line can keep its own ``GIMBALSIM_RPS`` style settings.
    """
    environ = os.environ if environ is None else environ
    fields = {f.name for f in dataclasses.fields(SimConfig)}
    out: dict = {}
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        if path[0] not in fields:
            continue
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = yaml.safe_load(raw)
    return out


def load_config(
    path: Optional[str] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> SimConfig:
    """Defaults < config file < environment < explicit overrides."""
    data: dict = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, Mapping):
            raise ValueError(f"{path}: config must be a mapping")
        data = _merge(data, loaded)
    data = _merge(data, env_overrides(environ))
    if overrides:
        data = _merge(data, overrides)
    return SimConfig.from_dict(data)


def dump_config(cfg: SimConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
