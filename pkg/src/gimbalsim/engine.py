"""One simulated data-parallel inference engine.

The engine runs atomic forward iterations.  Each iteration decodes one
token for every request already past prefill and, in the same pass,
prefills newly admitted requests in waiting-queue order.  Iteration time is::

    (uncached_prefill_tokens / prefill_rate + decode_time_per_token * slowdown) * multiplier

where ``multiplier`` comes from the expert placement (1.0 without MoE
modeling).  A prefilled request emits its first token at the end of that
iteration; every later iteration emits one more token.

KV slots are charged per processed token.  Admission additionally reserves
the request's future decode growth so live usage can never exceed capacity,
which keeps the engine free of preemption.
"""

from __future__ import annotations

import hashlib
import heapq
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .balancer import EngineMetrics
from .sjf import QueuedRequest, SjfConfig, reorder_queue
from .workload import Request

FIRST_TOKEN = "first_token"
COMPLETION = "completion"


@dataclass(frozen=True)
class CostModel:
    prefill_rate: float = 8000.0
    decode_time_per_token: float = 0.025
    kv_tokens_per_token: int = 1
    # extra decode time per additional batched request, as a fraction
    batch_slowdown: float = 0.0

    def __post_init__(self):
        if not (self.prefill_rate > 0 and self.decode_time_per_token > 0 and self.kv_tokens_per_token > 0):
            raise ValueError("cost model rates must be strictly positive")
        if self.batch_slowdown < 0:
            raise ValueError("batch_slowdown must be >= 0")


class PrefixCacheTable:
    """Block-level prefix cache keyed by chained block hashes.

    Block ``k``'s key hashes block ``k-1``'s key together with its own
    tokens, so a block only matches when the whole prefix before it does.
    Nothing is evicted.
    """

    def __init__(self, block_size: int = 16):
        if block_size < 1:
            raise ValueError("block_size must be >= 1")
        self.block_size = block_size
        self.entries: set[bytes] = set()
        self.probed = 0
        self.hits = 0

    def block_keys(self, tokens) -> list[bytes]:
        arr = np.asarray(tokens, dtype=np.int64)
        bs = self.block_size
        keys = []
        prev = b""
        for b in range(arr.size // bs):
            h = hashlib.blake2b(prev, digest_size=16)
            h.update(arr[b * bs:(b + 1) * bs].tobytes())
            prev = h.digest()
            keys.append(prev)
        return keys

    def peek(self, keys: Sequence[bytes]) -> int:
        hit = 0
        for k in keys:
            if k not in self.entries:
                break
            hit += 1
        return hit

    def lookup_keys(self, keys: Sequence[bytes]) -> tuple[int, int]:
        hit = self.peek(keys)
        self.entries.update(keys)
        self.probed += len(keys)
        self.hits += hit
        return hit, len(keys)

    def lookup(self, tokens) -> tuple[int, int]:
        """Probe every full block, count leading hits, then insert all probed blocks."""
        return self.lookup_keys(self.block_keys(tokens))


def prefix_lookup(table: PrefixCacheTable, prompt_token_ids) -> tuple[int, int]:
    return table.lookup(prompt_token_ids)


@dataclass
class _Active:
    request: Request
    queued: QueuedRequest
    cached_tokens: int
    uncached_tokens: int
    alloc: int
    started_at: float
    first_token_time: Optional[float] = None
    finish_iter: int = -1


@dataclass
class RequestRecord:
    id: int
    engine: int
    arrival_time: float
    enqueued_at: float
    started_at: float
    first_token_time: float
    completion_time: float
    prefill_tokens: int
    output_tokens: int
    cached_tokens: int
    uncached_tokens: int


@dataclass
class Iteration:
    start: float
    end: float
    prefill: list
    n_decode: int
    prefill_tokens: int


class Engine:
    """Single-owner engine state, advanced by :meth:`start_iteration`/:meth:`finish_iteration`."""

    def __init__(
        self,
        engine_id: int = 0,
        kv_capacity: int = 400_000,
        cost: Optional[CostModel] = None,
        sjf: Optional[SjfConfig] = None,
        block_size: int = 16,
        max_batched_tokens: int = 2048,
        prefix_cache: bool = True,
        load_signal: str = "prefill_plus_remaining",
    ):
        if kv_capacity < 1:
            raise ValueError("kv_capacity must be >= 1")
        if load_signal not in ("prefill_plus_remaining", "prefill_only"):
            raise ValueError(f"unknown load_signal {load_signal!r}")
        self.engine_id = engine_id
        self.kv_capacity = kv_capacity
        self.cost = cost or CostModel()
        self.sjf = sjf or SjfConfig()
        self.max_batched_tokens = max_batched_tokens
        self.prefix_cache = PrefixCacheTable(block_size)
        self.use_prefix_cache = prefix_cache
        self.load_signal = load_signal

        self.kv_used = 0
        self.kv_reserved = 0
        self.waiting: list[QueuedRequest] = []
        self.running: dict[int, _Active] = {}
        self.decoding = 0
        self.remaining_decode = 0
        self._finish_heap: list[tuple[int, int]] = []
        self.iterations = 0
        self.clock = 0.0
        self.busy_until: Optional[float] = None
        self.current: Optional[Iteration] = None
        self.records: list[RequestRecord] = []
        self.decoded_tokens = 0
        self._known: set[int] = set()
        self._prompts: dict[int, list[bytes]] = {}
        self.pending_stall = 0.0

    # admission -------------------------------------------------------
    def admit(self, request: Request, now: float, prompt_keys: Optional[list[bytes]] = None) -> None:
        if request.id in self._known:
            raise ValueError(f"request {request.id} already admitted to engine {self.engine_id}")
        k = self.cost.kv_tokens_per_token
        if (request.prefill_tokens + request.output_tokens) * k > self.kv_capacity:
            raise ValueError(f"request {request.id} can never fit the KV cache of engine {self.engine_id}")
        self._known.add(request.id)
        self.waiting.append(QueuedRequest(request, now))
        if prompt_keys is not None:
            self._prompts[request.id] = prompt_keys

    # metrics ---------------------------------------------------------
    @property
    def kv_usage(self) -> float:
        return self.kv_used / self.kv_capacity

    def running_load(self) -> int:
        waiting = sum(q.request.prefill_tokens for q in self.waiting)
        if self.load_signal == "prefill_only":
            inflight = sum(a.uncached_tokens for a in self.running.values() if a.first_token_time is None)
            return waiting + inflight
        inflight = self.remaining_decode
        if self.current is not None:
            inflight += sum(a.uncached_tokens + a.request.output_tokens - 1 for a in self.current.prefill)
        return waiting + inflight

    def snapshot(self, now: float) -> EngineMetrics:
        return EngineMetrics(self.engine_id, min(1.0, self.kv_usage), float(self.running_load()), now)

    def has_work(self) -> bool:
        return bool(self.waiting or self.running)

    # iterations ------------------------------------------------------
    def _headroom(self) -> int:
        return self.kv_capacity - self.kv_used - self.kv_reserved

    def start_iteration(self, now: float, multiplier: float = 1.0) -> Optional[Iteration]:
        """Schedule the next forward pass at ``now``; ``None`` when nothing can run."""
        if self.current is not None:
            raise RuntimeError("iteration already in progress")
        self.clock = now
        k = self.cost.kv_tokens_per_token
        admitted: list[_Active] = []
        batch_tokens = 0
        if self.waiting:
            self.waiting = reorder_queue(self.waiting, now, self.sjf)
            keep = 0
            for q in self.waiting:
                r = q.request
                keys = self._prompts.get(r.id)
                cached = 0
                if self.use_prefix_cache and keys:
                    cached = self.prefix_cache.peek(keys) * self.prefix_cache.block_size
                    cached = min(cached, r.prefill_tokens - 1)
                uncached = r.prefill_tokens - cached
                need_now = (uncached + 1) * k
                need_later = (r.output_tokens - 1) * k
                if need_now + need_later > self._headroom():
                    break
                if admitted and batch_tokens + uncached > self.max_batched_tokens:
                    break
                if self.use_prefix_cache and keys:
                    self.prefix_cache.lookup_keys(keys)
                self.kv_used += uncached * k
                self.kv_reserved += need_later + k
                batch_tokens += uncached
                admitted.append(_Active(r, q, cached, uncached, uncached * k, now))
                keep += 1
            del self.waiting[:keep]
        if not admitted and self.decoding == 0:
            return None
        c = self.cost
        decode_part = 0.0
        if self.decoding:
            decode_part = c.decode_time_per_token * (1.0 + c.batch_slowdown * (self.decoding - 1))
        duration = (batch_tokens / c.prefill_rate + decode_part) * multiplier + self.pending_stall
        self.pending_stall = 0.0
        for a in admitted:
            self.running[a.request.id] = a
        self.current = Iteration(now, now + duration, admitted, self.decoding, batch_tokens)
        self.busy_until = now + duration
        return self.current

    def finish_iteration(self) -> list[tuple[str, int, float]]:
        it = self.current
        if it is None:
            raise RuntimeError("no iteration in progress")
        self.current = None
        self.busy_until = None
        self.clock = it.end
        self.iterations += 1
        k = self.cost.kv_tokens_per_token
        events = []
        if it.n_decode:
            self.kv_used += it.n_decode * k
            self.kv_reserved -= it.n_decode * k
            self.remaining_decode -= it.n_decode
            self.decoded_tokens += it.n_decode
        while self._finish_heap and self._finish_heap[0][0] <= self.iterations:
            _, rid = heapq.heappop(self._finish_heap)
            events.append(self._complete(rid, it.end))
        for a in it.prefill:
            a.first_token_time = it.end
            self.kv_used += k
            self.kv_reserved -= k
            self.decoded_tokens += 1
            events.append((FIRST_TOKEN, a.request.id, it.end))
            rest = a.request.output_tokens - 1
            if rest == 0:
                events.append(self._complete(a.request.id, it.end))
            else:
                a.finish_iter = self.iterations + rest
                heapq.heappush(self._finish_heap, (a.finish_iter, a.request.id))
                self.decoding += 1
                self.remaining_decode += rest
        return events

    def _complete(self, rid: int, t: float) -> tuple[str, int, float]:
        a = self.running.pop(rid)
        r = a.request
        k = self.cost.kv_tokens_per_token
        if r.output_tokens > 1:
            self.decoding -= 1
        self.kv_used -= a.alloc + r.output_tokens * k
        self.records.append(
            RequestRecord(
                r.id, self.engine_id, r.arrival_time, a.queued.enqueued_at, a.started_at,
                a.first_token_time, t, r.prefill_tokens, r.output_tokens, a.cached_tokens, a.uncached_tokens,
            )
        )
        return (COMPLETION, rid, t)

    def step(self, dt: float, multiplier: float = 1.0) -> list[tuple[str, int, float]]:
        """Run iterations starting before ``clock + dt``; idle time is skipped."""
        if not dt > 0:
            raise ValueError("dt must be > 0")
        target = self.clock + dt
        events = []
        while self.clock < target:
            it = self.start_iteration(self.clock, multiplier)
            if it is None:
                self.clock = target
                break
            events.extend(self.finish_iteration())
        return events
