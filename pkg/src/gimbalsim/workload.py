"""Trace ingestion, distribution reshaping and Poisson arrival generation."""

from __future__ import annotations

import csv
import enum
import os
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

N_BUCKETS = 10
TRACE_HEADER = ("prefill_tokens", "output_tokens", "user_id")


class TraceError(ValueError):
    """Raised for malformed or invalid trace content."""


@dataclass(frozen=True)
class TraceRecord:
    prefill_tokens: int
    output_tokens: int
    user_id: Optional[str] = None

    def __post_init__(self):
        if self.prefill_tokens < 1 or self.output_tokens < 1:
            raise TraceError(
                f"token counts must be >= 1, got prefill={self.prefill_tokens} "
                f"output={self.output_tokens}"
            )


@dataclass(frozen=True)
class Request:
    id: int
    arrival_time: float
    prefill_tokens: int
    output_tokens: int
    user_id: Optional[str] = None

    def __post_init__(self):
        if self.prefill_tokens < 1 or self.output_tokens < 1:
            raise TraceError(f"request {self.id}: token counts must be >= 1")


class DistributionShape(str, enum.Enum):
    RANDOM = "Random"
    CENTRAL = "Central"
    DESCENDING = "Descending"
    TWO_END = "TwoEnd"
    AVERAGE = "Average"

    @classmethod
    def parse(cls, name: "str | DistributionShape") -> "DistributionShape":
        if isinstance(name, cls):
            return name
        key = str(name).replace("-", "").replace("_", "").lower()
        for member in cls:
            if member.value.lower() == key:
                return member
        raise ValueError(f"unknown distribution shape {name!r}")


def load_trace(path: "str | os.PathLike[str]") -> list[TraceRecord]:
    """Read a ``prefill_tokens,output_tokens,user_id`` CSV trace.

    The header row is mandatory; ``user_id`` may be absent or empty.
    """
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TraceError(f"{path}: missing header row") from None
        header = [h.strip() for h in header]
        if tuple(header[:2]) != TRACE_HEADER[:2]:
            raise TraceError(f"{path}:1: expected header {','.join(TRACE_HEADER)}, got {','.join(header)}")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 2 or len(row) > 3:
                raise TraceError(f"{path}:{line}: expected 2 or 3 columns, got {len(row)}")
            try:
                prefill = int(row[0])
                output = int(row[1])
            except ValueError:
                raise TraceError(f"{path}:{line}: token counts must be integers: {row!r}") from None
            if prefill < 1 or output < 1:
                raise TraceError(f"{path}:{line}: token counts must be >= 1, got ({prefill},{output})")
            user = row[2].strip() if len(row) == 3 and row[2].strip() else None
            records.append(TraceRecord(prefill, output, user))
    return records


def write_trace(path: "str | os.PathLike[str]", records: Sequence[TraceRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for r in records:
            writer.writerow([r.prefill_tokens, r.output_tokens, r.user_id or ""])


def bucket_edges(records: Sequence[TraceRecord], n_buckets: int = N_BUCKETS) -> np.ndarray:
    """Equal-width bucket edges over ``[1, max prefill]``."""
    top = max(r.prefill_tokens for r in records)
    return np.linspace(1.0, float(top), n_buckets + 1)


def bucket_index(prefill: np.ndarray, edges: np.ndarray) -> np.ndarray:
    # interior edges only; the final bucket is closed on the right
    return np.searchsorted(edges[1:-1], prefill, side="right")


def shape_weights(shape: DistributionShape, n_buckets: int = N_BUCKETS, rng=None) -> np.ndarray:
    shape = DistributionShape.parse(shape)
    k = n_buckets
    if shape is DistributionShape.AVERAGE:
        w = np.ones(k)
    elif shape is DistributionShape.RANDOM:
        if rng is None:
            raise ValueError("Random shape needs a generator")
        w = rng.random(k)
    elif shape is DistributionShape.CENTRAL:
        idx = np.arange(k)
        w = np.minimum(idx + 1, k - idx).astype(float)
    elif shape is DistributionShape.DESCENDING:
        w = np.arange(k, 0, -1, dtype=float)
    else:  # TWO_END
        if k < 3:
            w = np.ones(k)
        else:
            w = np.full(k, 0.2 / (k - 2))
            w[0] = w[-1] = 0.4
    return w / w.sum()


def allocate_counts(weights: np.ndarray, n: int) -> np.ndarray:
    """Largest-remainder apportionment of ``n`` items to ``weights``."""
    quotas = weights * n
    counts = np.floor(quotas).astype(int)
    short = n - counts.sum()
    if short:
        frac = quotas - counts
        # stable sort keeps lower index first among equal remainders
        order = np.argsort(-frac, kind="stable")
        counts[order[:short]] += 1
    return counts


def shape_distribution(
    records: Sequence[TraceRecord],
    shape: "DistributionShape | str",
    n: int,
    seed: int,
    n_buckets: int = N_BUCKETS,
) -> list[TraceRecord]:
    """Resample ``records`` so the prefill histogram follows ``shape``.

    Bucket counts are apportioned exactly from the shape weights; records
    inside a bucket are drawn with replacement and the output is shuffled.
    """
    if not records:
        raise TraceError("cannot reshape an empty trace")
    if n < 0:
        raise ValueError("n must be >= 0")
    shape = DistributionShape.parse(shape)
    rng = np.random.default_rng(seed)
    edges = bucket_edges(records, n_buckets)
    prefill = np.array([r.prefill_tokens for r in records])
    idx = bucket_index(prefill, edges)
    counts = allocate_counts(shape_weights(shape, n_buckets, rng), n)

    picked: list[int] = []
    for b, c in enumerate(counts):
        if c == 0:
            continue
        candidates = np.flatnonzero(idx == b)
        if candidates.size == 0:
            lo, hi = edges[b], edges[b + 1]
            raise TraceError(
                f"bucket {b} ([{lo:.0f}, {hi:.0f}] prefill tokens) has no candidate records "
                f"but shape {shape.value} needs {c}"
            )
        picked.extend(rng.choice(candidates, size=c, replace=True).tolist())
    order = rng.permutation(len(picked))
    return [records[picked[i]] for i in order]


def gen_arrivals(records: Sequence[TraceRecord], rps: float, seed: int, start_id: int = 0) -> list[Request]:
    """Stamp records with Poisson arrival times at ``rps`` requests/second."""
    if not rps > 0:
        raise ValueError(f"rps must be > 0, got {rps}")
    rng = np.random.default_rng(seed)
    gaps = rng.exponential(1.0 / rps, size=len(records))
    times = np.cumsum(gaps)
    out = []
    prev = 0.0
    for i, (rec, t) in enumerate(zip(records, times)):
        t = float(t)
        if t <= prev and i:
            t = float(np.nextafter(prev, np.inf))
        prev = t
        out.append(Request(start_id + i, t, rec.prefill_tokens, rec.output_tokens, rec.user_id))
    return out


def synthetic_trace(
    n: int,
    seed: int,
    max_prefill: int = 4000,
    mean_output: int = 200,
    n_users: int = 0,
) -> list[TraceRecord]:
    """Long-tailed stand-in for a production trace (no data is bundled).

    Prefill lengths are log-normal, clipped to ``[1, max_prefill]``; one
    record is pinned at each bucket midpoint so every bucket has candidates.
    """
    rng = np.random.default_rng(seed)
    prefill = np.clip(rng.lognormal(mean=6.3, sigma=0.9, size=n), 1, max_prefill).astype(int)
    output = np.clip(rng.geometric(1.0 / mean_output, size=n), 1, 8 * mean_output).astype(int)
    edges = np.linspace(1.0, float(max_prefill), N_BUCKETS + 1)
    mids = ((edges[:-1] + edges[1:]) / 2).astype(int)
    k = min(n, N_BUCKETS)
    prefill[:k] = mids[:k]
    if n >= N_BUCKETS:
        prefill[N_BUCKETS - 1] = max_prefill
    users = [None] * n
    if n_users > 0:
        users = [f"user{u}" for u in rng.integers(0, n_users, size=n)]
    return [TraceRecord(int(p), int(o), u) for p, o, u in zip(prefill, output, users)]


def with_ids(requests: Sequence[Request], start: int = 0) -> list[Request]:
    return [replace(r, id=start + i) for i, r in enumerate(requests)]
