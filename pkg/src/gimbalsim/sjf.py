"""Per-engine waiting-queue ordering: shortest prefill first with aging."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .workload import Request


@dataclass(frozen=True)
class QueuedRequest:
    request: Request
    enqueued_at: float

    @property
    def prefill_tokens(self) -> int:
        return self.request.prefill_tokens


@dataclass(frozen=True)
class SjfConfig:
    theta_age: float = 5.0
    # measure waiting time from system arrival instead of engine enqueue
    age_from_arrival: bool = False
    enabled: bool = True

    def __post_init__(self):
        if not self.theta_age > 0:
            raise ValueError("theta_age must be > 0")


def waiting_time(q: QueuedRequest, now: float, cfg: SjfConfig) -> float:
    start = q.request.arrival_time if cfg.age_from_arrival else q.enqueued_at
    return now - start


def priority_key(q: QueuedRequest, now: float, cfg: SjfConfig) -> tuple:
    # aged requests form group 0 and keep FIFO order among themselves
    if waiting_time(q, now, cfg) >= cfg.theta_age:
        return (0, 0, q.enqueued_at, q.request.id)
    return (1, q.request.prefill_tokens, q.enqueued_at, q.request.id)


def reorder_queue(queue: Sequence[QueuedRequest], now: float, cfg: SjfConfig) -> list[QueuedRequest]:
    """Return ``queue`` sorted aged-first, then by prefill length.

    With ``cfg.enabled`` false the queue is returned in FCFS order.
    """
    if not cfg.enabled:
        return sorted(queue, key=lambda q: (q.enqueued_at, q.request.id))
    return sorted(queue, key=lambda q: priority_key(q, now, cfg))


def is_aged(q: QueuedRequest, now: float, cfg: SjfConfig) -> bool:
    return waiting_time(q, now, cfg) >= cfg.theta_age
