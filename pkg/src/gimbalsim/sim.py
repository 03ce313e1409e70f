"""Discrete-event core: workload -> dispatch -> engines -> expert placement -> report.

Simultaneous events are totally ordered by ``(time, kind rank, sequence)``
with ranks: iteration end < metric delivery < metric emission < arrival.
``tau`` counts forward iterations summed over all engines.
"""

from __future__ import annotations

import dataclasses
import hashlib
import heapq
import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .balancer import LoadBalancer
from .config import SimConfig
from .engine import COMPLETION, Engine, RequestRecord
from .moe import MoeCostModel, MoeTopology, RoutingModel, _gpu_lookup, flatten_stats, record_stats, route_tokens
from .placement import build_affinity_set, contiguous_placement, greedy_place, relocate, Relocation
from .workload import Request

STEP_END, METRIC_DELIVER, METRIC_EMIT, ARRIVAL = range(4)
_KIND_NAMES = {STEP_END: "step_end", METRIC_DELIVER: "metric_deliver", METRIC_EMIT: "metric_emit", ARRIVAL: "arrival"}

SUMMARY_KEYS = (
    "ttft_mean", "ttft_median", "ttft_p99", "tpot_mean", "throughput_rps", "throughput_tps",
    "prefix_hits", "prefix_probes", "hit_rate",
)


@dataclass
class MetricsReport:
    policy: str
    per_request: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    expert_load: list = field(default_factory=list)
    relocations: list = field(default_factory=list)
    decisions: list = field(default_factory=list)

    def __getitem__(self, key):
        return self.aggregates[key]

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "aggregates": self.aggregates,
            "expert_load": self.expert_load,
            "relocations": self.relocations,
            "per_request": self.per_request,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    def write_csv(self, path) -> None:
        cols = ["id", "engine", "arrival_time", "first_token_time", "completion_time", "ttft", "tpot",
                "queue_delay", "prefill_tokens", "output_tokens", "cached_tokens"]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(cols) + "\n")
            for row in self.per_request:
                fh.write(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in cols) + "\n")


def _p(values: np.ndarray, q: float) -> float:
    return float(np.percentile(values, q)) if values.size else 0.0


def _user_seed(user: str) -> int:
    return int.from_bytes(hashlib.blake2b(user.encode("utf-8"), digest_size=8).digest(), "little")


class MoeRuntime:
    """Global expert placement shared by all engines, priced against a reference stream."""

    def __init__(self, cfg: SimConfig, dynamic: bool):
        mc = cfg.moe
        self.cfg = cfg
        self.pc = cfg.placement
        self.topology = MoeTopology(mc.n_layers, mc.n_experts, mc.top_k, mc.n_gpus)
        t = self.topology
        self.model = RoutingModel.zipf(t, s=mc.zipf_s, lam=mc.lam, fanout=mc.fanout, floor=mc.floor, seed=cfg.seed)
        self.cost = MoeCostModel(mc.compute_share, mc.comm_penalty)
        ref = route_tokens(self.model, mc.reference_tokens, self.model.generator(0))
        self.ref_A, self.ref_E, _ = record_stats(ref, t.n_experts)
        self.rows = np.repeat(np.arange(t.n_layers), t.n_experts)
        self.dynamic = dynamic
        self.relocations: list[Relocation] = []
        self.windows = 0
        g = t.n_gpus
        if dynamic:
            # offline affinity collection: fixed for the whole run
            warm = route_tokens(self.model, mc.window_tokens, self.model.generator(1))
            A, E, _ = record_stats(warm, t.n_experts)
            A_g, W_g = flatten_stats(A, E)
            self.affinity = build_affinity_set(
                W_g, self.pc.affinity_threshold, self.pc.top_e, capacity=t.n_global // g,
                anchor_gpu=self.pc.anchor_gpu, rows=self.rows, row_capacity=t.n_experts // g,
            )
            self.placement = greedy_place(A_g, self.affinity, g, mode=self.pc.greedy_mode, rows=self.rows)
            self.relocations.append(Relocation(0, self.placement, 0))
        else:
            self.affinity = None
            self.placement = contiguous_placement(t.n_experts, g, n_layers=t.n_layers)
        self._price()

    def _price(self) -> None:
        t = self.topology
        g = t.n_gpus
        self.multiplier = self.cost.multiplier(self.ref_A, self.ref_E, self.placement.assign, g)
        gpu = _gpu_lookup(self.placement.assign, t.n_layers, t.n_experts)
        share = np.bincount(gpu.ravel(), weights=self.ref_A.ravel().astype(float), minlength=g)
        self.gpu_share = share / share.sum()

    def maybe_relocate(self, step: int) -> Optional[Relocation]:
        if not self.dynamic or step == 0 or step % self.pc.tau:
            return None
        t = self.topology
        self.windows += 1
        window = route_tokens(self.model, self.cfg.moe.window_tokens, self.model.generator(1 + self.windows))
        A, E, _ = record_stats(window, t.n_experts)
        A_g, _ = flatten_stats(A, E)
        rel = relocate(self.placement, step, self.pc.tau, self.affinity, A_g, t.n_gpus,
                       mode=self.pc.greedy_mode, rows=self.rows)
        self.placement = rel.placement
        self.relocations.append(rel)
        self._price()
        return rel


class Simulation:
    def __init__(self, cfg: SimConfig, requests: Sequence[Request], keep_log: bool = False):
        self.cfg = cfg
        self.requests = list(requests)
        flags = cfg.policy_flags
        self.flags = flags
        bcfg = dataclasses.replace(cfg.balancer, use_metrics=flags.load_aware_dispatch,
                                   use_affinity=flags.load_aware_dispatch and cfg.balancer.use_affinity)
        self.balancer = LoadBalancer(bcfg, record_decisions=True)
        sjf = dataclasses.replace(cfg.sjf, enabled=flags.sjf_queue)
        self.engines = [
            Engine(i, cfg.kv_capacity, cfg.cost, sjf, cfg.block_size, cfg.max_batched_tokens,
                   cfg.prefix_cache, cfg.load_signal)
            for i in range(cfg.n_engines)
        ]
        self.moe = MoeRuntime(cfg, flags.dynamic_placement) if cfg.moe is not None else None
        self.keep_log = keep_log
        self.log: list[tuple] = []
        self._heap: list[tuple] = []
        self._seq = 0
        self.steps = 0
        self.completed = 0
        self.expert_load = np.zeros(cfg.moe.n_gpus if cfg.moe is not None else 0)
        self._user_turns: dict[str, int] = {}

    # helpers ---------------------------------------------------------
    def _push(self, t: float, kind: int, payload) -> None:
        heapq.heappush(self._heap, (t, kind, self._seq, payload))
        self._seq += 1

    def _prompt_keys(self, r: Request, engine: Engine) -> Optional[list[bytes]]:
        if not self.cfg.prefix_cache:
            return None
        n = r.prefill_tokens
        if r.user_id is not None:
            turn = self._user_turns.get(r.user_id, 0)
            self._user_turns[r.user_id] = turn + 1
            useed = _user_seed(r.user_id)
            shared = min(n, self.cfg.user_prefix_tokens)
            head = np.random.default_rng([useed, 0]).integers(1, 1 << 31, size=self.cfg.user_prefix_tokens)[:shared]
            tail = np.random.default_rng([useed, turn + 1]).integers(1, 1 << 31, size=n - shared)
            tokens = np.concatenate([head, tail])
        else:
            tokens = np.random.default_rng([self.cfg.seed, 7, r.id]).integers(1, 1 << 31, size=n)
        return engine.prefix_cache.block_keys(tokens)

    def _multiplier(self) -> float:
        return self.moe.multiplier if self.moe is not None else 1.0

    def _start(self, engine: Engine, now: float) -> None:
        if engine.current is not None or not engine.has_work():
            return
        it = engine.start_iteration(now, self._multiplier())
        if it is not None:
            self._push(it.end, STEP_END, engine.engine_id)

    # main loop -------------------------------------------------------
    def run(self) -> MetricsReport:
        reqs = self.requests
        for a, b in zip(reqs, reqs[1:]):
            if b.arrival_time < a.arrival_time:
                raise ValueError("requests must be sorted by arrival_time")
        ids = [r.id for r in reqs]
        if len(set(ids)) != len(ids):
            raise ValueError("request ids must be unique")
        if not reqs:
            return self._report()
        for r in reqs:
            self._push(r.arrival_time, ARRIVAL, r)
        interval = self.cfg.metric_interval
        if self.flags.load_aware_dispatch:
            self._push(interval, METRIC_EMIT, 1)
        total = len(reqs)
        while self._heap:
            t, kind, _, payload = heapq.heappop(self._heap)
            if kind == ARRIVAL:
                self._on_arrival(payload, t)
            elif kind == STEP_END:
                self._on_step_end(self.engines[payload], t)
            elif kind == METRIC_EMIT:
                if self.completed < total:
                    for e in self.engines:
                        self._push(t + self.cfg.delivery_delay, METRIC_DELIVER, e.snapshot(t))
                    self._push((payload + 1) * interval, METRIC_EMIT, payload + 1)
            elif kind == METRIC_DELIVER:
                self.balancer.update_metrics(payload)
            if self.keep_log:
                self.log.append((t, _KIND_NAMES[kind], self._log_detail(kind, payload)))
        if self.completed != total:
            raise RuntimeError(f"simulation stalled with {total - self.completed} unfinished requests")
        return self._report()

    def _log_detail(self, kind, payload):
        if kind == ARRIVAL:
            return payload.id
        if kind == METRIC_DELIVER:
            return (payload.engine_id, payload.kv_usage, payload.running_load)
        return payload

    def _on_arrival(self, r: Request, t: float) -> None:
        decision = self.balancer.decide(r, t)
        engine = self.engines[decision.engine_id]
        engine.admit(r, t, self._prompt_keys(r, engine))
        self._start(engine, t)

    def _on_step_end(self, engine: Engine, t: float) -> None:
        it = engine.current
        tokens = it.prefill_tokens + it.n_decode
        for kind, _, _ in engine.finish_iteration():
            if kind == COMPLETION:
                self.completed += 1
        self.steps += 1
        if self.moe is not None:
            self.expert_load += tokens * self.moe.gpu_share * self.moe.topology.top_k * self.moe.topology.n_layers
            rel = self.moe.maybe_relocate(self.steps)
            if rel is not None and rel.moved and self.cfg.placement.migration_stall > 0:
                self._charge_migration(rel)
        self._start(engine, t)

    def _charge_migration(self, rel: Relocation) -> None:
        prev = self.moe.relocations[-2].placement if len(self.moe.relocations) > 1 else None
        g = self.moe.topology.n_gpus
        moved_to = np.bincount(rel.placement.assign[prev.assign != rel.placement.assign], minlength=g) if prev else np.zeros(g)
        for e in self.engines:
            e.pending_stall += float(moved_to[e.engine_id % g]) * self.cfg.placement.migration_stall

    # reporting -------------------------------------------------------
    def _report(self) -> MetricsReport:
        records: list[RequestRecord] = sorted((r for e in self.engines for r in e.records), key=lambda r: r.id)
        rows = []
        for r in records:
            ttft = r.first_token_time - r.arrival_time
            tpot = (r.completion_time - r.first_token_time) / (r.output_tokens - 1) if r.output_tokens > 1 else 0.0
            rows.append({
                "id": r.id, "engine": r.engine, "arrival_time": r.arrival_time,
                "first_token_time": r.first_token_time, "completion_time": r.completion_time,
                "ttft": ttft, "tpot": tpot, "queue_delay": r.started_at - r.arrival_time,
                "service_time": r.first_token_time - r.started_at,
                "prefill_tokens": r.prefill_tokens, "output_tokens": r.output_tokens,
                "cached_tokens": r.cached_tokens,
            })
        ttft = np.array([x["ttft"] for x in rows])
        tpot = np.array([x["tpot"] for x in rows])
        hits = sum(e.prefix_cache.hits for e in self.engines)
        probes = sum(e.prefix_cache.probed for e in self.engines)
        decoded = sum(e.decoded_tokens for e in self.engines)
        if rows:
            start = min(x["arrival_time"] for x in rows)
            makespan = max(x["completion_time"] for x in rows) - start
        else:
            makespan = 0.0
        agg = {
            "n_requests": len(self.requests),
            "completed": len(rows),
            "ttft_mean": float(ttft.mean()) if ttft.size else 0.0,
            "ttft_median": _p(ttft, 50),
            "ttft_p99": _p(ttft, 99),
            "tpot_mean": float(tpot.mean()) if tpot.size else 0.0,
            "queue_delay_mean": float(np.mean([x["queue_delay"] for x in rows])) if rows else 0.0,
            "service_time_mean": float(np.mean([x["service_time"] for x in rows])) if rows else 0.0,
            "makespan": makespan,
            "throughput_rps": len(rows) / makespan if makespan > 0 else 0.0,
            "throughput_tps": decoded / makespan if makespan > 0 else 0.0,
            "decoded_tokens": decoded,
            "prefix_hits": hits,
            "prefix_probes": probes,
            "hit_rate": hits / probes if probes else 0.0,
            "steps": self.steps,
            "relocations": len(self.moe.relocations) if self.moe is not None else 0,
            "migrations": sum(r.moved for r in self.moe.relocations) if self.moe is not None else 0,
            "moe_multiplier": self.moe.multiplier if self.moe is not None else 1.0,
        }
        relocs = []
        if self.moe is not None:
            anchor = self.moe.affinity.anchor_gpu if self.moe.affinity is not None else None
            for rel in self.moe.relocations:
                ok = anchor is None or all(rel.placement.assign[j] == anchor for j in self.moe.affinity.members)
                relocs.append({"step": rel.step, "moved": rel.moved, "anchor_ok": bool(ok)})
        return MetricsReport(
            policy=self.cfg.policy,
            per_request=rows,
            aggregates=agg,
            expert_load=[float(x) for x in self.expert_load],
            relocations=relocs,
            decisions=list(self.balancer.decisions),
        )


def run(cfg: SimConfig, requests: Sequence[Request], keep_log: bool = False) -> MetricsReport:
    return Simulation(cfg, requests, keep_log=keep_log).run()


def _comparable(cfg: SimConfig) -> SimConfig:
    return dataclasses.replace(cfg, policy="gimbal", sjf=dataclasses.replace(cfg.sjf, enabled=True))


def compare(cfg_a: SimConfig, cfg_b: SimConfig, requests: Sequence[Request],
            requests_b: Optional[Sequence[Request]] = None) -> list[dict]:
    """Run both configs on one workload; rows of (metric, a, b, delta, rel_delta)."""
    if requests_b is not None and list(requests_b) != list(requests):
        raise ValueError("compare needs identical workloads for both configs")
    if _comparable(cfg_a) != _comparable(cfg_b):
        raise ValueError("configs may differ only in their policy")
    if not requests:
        return []
    a = run(cfg_a, requests)
    b = run(cfg_b, requests)
    table = []
    for key in SUMMARY_KEYS:
        va, vb = float(a[key]), float(b[key])
        rel = (vb - va) / va if va else (0.0 if vb == va else float("inf"))
        table.append({"metric": key, "a": va, "b": vb, "delta": vb - va, "rel_delta": rel})
    return table


def queue_service_ratio(report: MetricsReport) -> float:
    a = report.aggregates
    return a["queue_delay_mean"] / a["service_time_mean"] if a["service_time_mean"] > 0 else 0.0


def saturating_rps(cfg: SimConfig, make_requests: Callable[[float], Sequence[Request]], target: float = 2.0,
                   lo: float = 0.5, hi: float = 8.0, step: float = 0.125) -> tuple[float, MetricsReport]:
    """Smallest grid rate at which ``cfg`` queues at least ``target`` times its mean service time.

    Bisects the rate grid ``lo, lo+step, ..., hi``, assuming queueing grows with the
    rate.  Returns the rate and the report of the run made there.
    """
    grid = np.arange(lo, hi + step / 2, step)
    cache: dict[int, MetricsReport] = {}

    def ratio(i: int) -> float:
        if i not in cache:
            cache[i] = run(cfg, make_requests(float(grid[i])))
        return queue_service_ratio(cache[i])

    if ratio(len(grid) - 1) < target:
        raise ValueError(f"queueing never reaches {target}x service time up to {hi} rps")
    a, b = -1, len(grid) - 1
    while b - a > 1:
        mid = (a + b) // 2
        if ratio(mid) >= target:
            b = mid
        else:
            a = mid
    return float(grid[b]), cache[b]
