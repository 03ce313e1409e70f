"""Engine-level dispatch: KV-pressure relief, running-load balancing and user affinity."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

from .workload import Request

# decision sources, recorded for ablation/trace comparisons
ROUND_ROBIN = "round_robin"
KV_RELIEF = "kv_relief"
LOAD_BALANCE = "load_balance"
AFFINITY = "affinity"


@dataclass(frozen=True)
class EngineMetrics:
    engine_id: int
    kv_usage: float
    running_load: float
    reported_at: float

    def __post_init__(self):
        if not 0.0 <= self.kv_usage <= 1.0:
            raise ValueError(f"kv_usage must be in [0, 1], got {self.kv_usage}")
        if self.running_load < 0:
            raise ValueError(f"running_load must be >= 0, got {self.running_load}")


@dataclass(frozen=True)
class BalancerConfig:
    n_engines: int = 2
    theta_kv: float = 0.9
    theta_diff: float = 0.10
    theta_load: float = 3000.0
    affinity_ttl: float = 300.0
    use_metrics: bool = True
    use_affinity: bool = True

    def __post_init__(self):
        if self.n_engines < 1:
            raise ValueError("n_engines must be >= 1")
        if not 0.0 < self.theta_kv <= 1.0:
            raise ValueError("theta_kv must be in (0, 1]")
        if not 0.0 <= self.theta_diff <= 1.0:
            raise ValueError("theta_diff must be in [0, 1]")
        if self.theta_load < 0:
            raise ValueError("theta_load must be >= 0")
        if not self.affinity_ttl > 0:
            raise ValueError("affinity_ttl must be > 0")


def _argmax(values) -> int:
    best = 0
    for i, v in enumerate(values):
        if v > values[best]:
            best = i
    return best


def _argmin(values) -> int:
    best = 0
    for i, v in enumerate(values):
        if v < values[best]:
            best = i
    return best


@dataclass
class Decision:
    engine_id: int
    source: str


@dataclass
class LoadBalancer:
    """Stateful dispatcher holding the latest metrics and the user->engine map.

    ``use_metrics=False`` together with ``use_affinity=False`` degrades to
    plain round-robin, which is the baseline dispatch.
    """

    config: BalancerConfig = field(default_factory=BalancerConfig)
    metrics: dict = field(default_factory=dict)
    user_engine_map: dict = field(default_factory=dict)
    cursor: int = 0
    decisions: list = field(default_factory=list)
    record_decisions: bool = False

    def __post_init__(self):
        self._lock = threading.Lock()

    def update_metrics(self, m: EngineMetrics) -> None:
        if not 0 <= m.engine_id < self.config.n_engines:
            raise ValueError(f"unknown engine_id {m.engine_id} (n_engines={self.config.n_engines})")
        with self._lock:
            old = self.metrics.get(m.engine_id)
            if old is None or m.reported_at >= old.reported_at:
                self.metrics[m.engine_id] = m

    def metrics_available(self) -> bool:
        return len(self.metrics) == self.config.n_engines

    def select_engine(self, request: Request, now: float) -> int:
        return self.decide(request, now).engine_id

    def decide(self, request: Request, now: float) -> Decision:
        cfg = self.config
        with self._lock:
            e_star = self.cursor % cfg.n_engines
            self.cursor = (self.cursor + 1) % cfg.n_engines
            source = ROUND_ROBIN
            user = request.user_id if cfg.use_affinity else None

            if (cfg.use_metrics or cfg.use_affinity) and self.metrics_available():
                snap = [self.metrics[i] for i in range(cfg.n_engines)]
                kv = [m.kv_usage for m in snap]
                i_max, i_min = _argmax(kv), _argmin(kv)
                if kv[i_max] >= cfg.theta_kv:
                    if cfg.use_metrics:
                        if kv[i_max] - kv[i_min] >= cfg.theta_diff:
                            e_star, source = i_min, KV_RELIEF
                        else:
                            load = [m.running_load for m in snap]
                            if max(load) - min(load) > cfg.theta_load:
                                e_star, source = _argmin(load), LOAD_BALANCE
                elif user is not None:
                    entry = self.user_engine_map.get(user)
                    if entry is not None and now - entry[1] <= cfg.affinity_ttl:
                        e_star, source = entry[0], AFFINITY

            if user is not None:
                self.user_engine_map[user] = (e_star, now)
            decision = Decision(e_star, source)
            if self.record_decisions:
                self.decisions.append((request.id, e_star, source))
            return decision
