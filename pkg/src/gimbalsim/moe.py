"""Token-level expert routing with hotspot skew and inter-layer affinity.

Routed streams are integer arrays of shape ``(n_tokens, n_layers, top_k)``
holding the expert index chosen at each layer.  From such a stream we
record the activation matrix ``A`` (layers x experts), the consecutive-layer
transition tensor ``E`` ((layers-1) x experts x experts) and the aggregate
``W = E.sum(axis=0)``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_stream


@dataclass(frozen=True)
class MoeTopology:
    n_layers: int = 8
    n_experts: int = 16
    top_k: int = 2
    n_gpus: int = 2

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError("top_k must be in [1, n_experts]")
        if not 1 <= self.n_gpus <= self.n_experts:
            raise ValueError("n_gpus must be in [1, n_experts]")
        if self.n_experts % self.n_gpus:
            raise ValueError("n_experts must be divisible by n_gpus")

    @property
    def n_global(self) -> int:
        return self.n_layers * self.n_experts


@dataclass
class RoutingModel:
    """Per-layer selection weights mixed with a next-layer affinity kernel.

    Layer ``i+1`` samples from ``(1-lam) * base_weights[i+1] + lam *
    mean(affinity_kernel[i][prev])`` where ``prev`` is the set chosen at
    layer ``i``.
    """

    topology: MoeTopology
    base_weights: np.ndarray
    affinity_kernel: np.ndarray
    lam: float = 0.5
    seed: int = 0
    _counter: int = field(default=0, repr=False)

    def __post_init__(self):
        t = self.topology
        self.base_weights = np.asarray(self.base_weights, dtype=float)
        self.affinity_kernel = np.asarray(self.affinity_kernel, dtype=float)
        if self.base_weights.shape != (t.n_layers, t.n_experts):
            raise ValueError(f"base_weights must have shape {(t.n_layers, t.n_experts)}")
        if self.affinity_kernel.shape != (max(t.n_layers - 1, 0), t.n_experts, t.n_experts):
            raise ValueError("affinity_kernel must have shape (n_layers-1, n_experts, n_experts)")
        if (self.base_weights < 0).any() or (self.affinity_kernel < 0).any():
            raise ValueError("routing weights must be non-negative")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must be in [0, 1]")
        self.base_weights = _normalize(self.base_weights)
        if self.affinity_kernel.size:
            self.affinity_kernel = _normalize(self.affinity_kernel)

    @classmethod
    def uniform(cls, topology: MoeTopology, lam: float = 0.0, seed: int = 0) -> "RoutingModel":
        L, e = topology.n_layers, topology.n_experts
        return cls(topology, np.ones((L, e)), np.ones((max(L - 1, 0), e, e)), lam, seed)

    @classmethod
    def zipf(
        cls,
        topology: MoeTopology,
        s: float = 1.2,
        lam: float = 0.5,
        fanout: int = 2,
        floor: float = 0.05,
        seed: int = 0,
    ) -> "RoutingModel":
        """Zipf(s) hotspots with a per-layer random expert ranking.

        Each expert's kernel row puts ``1 - floor`` of its mass on ``fanout``
        preferred next-layer experts.
        """
        L, e = topology.n_layers, topology.n_experts
        rng = np.random.default_rng([seed, 0x5EED])
        ranks = 1.0 / np.arange(1, e + 1) ** s
        base = np.stack([ranks[rng.permutation(e)] for _ in range(L)])
        kernel = np.full((max(L - 1, 0), e, e), floor / e)
        fanout = min(fanout, e)
        for i in range(L - 1):
            for j in range(e):
                pref = rng.choice(e, size=fanout, replace=False)
                kernel[i, j, pref] += (1.0 - floor) * rng.dirichlet(np.full(fanout, 2.0))
        return cls(topology, base, kernel, lam, seed)

    def generator(self, stream: Optional[int] = None) -> np.random.Generator:
        """Fresh generator keyed by ``(seed, stream)``; auto-increments when omitted."""
        if stream is None:
            stream = self._counter
            self._counter += 1
        return np.random.default_rng([self.seed, stream])

    def layer_probs(self, layer: int, prev: Optional[np.ndarray]) -> np.ndarray:
        """Selection probabilities at ``layer``; ``prev`` is (n, top_k) or None."""
        base = self.base_weights[layer]
        if prev is None or layer == 0 or self.lam == 0.0:
            if prev is None:
                return base[None, :]
            return np.broadcast_to(base, (prev.shape[0], base.size))
        aff = self.affinity_kernel[layer - 1][prev].mean(axis=1)
        return (1.0 - self.lam) * base[None, :] + self.lam * aff


def _normalize(w: np.ndarray) -> np.ndarray:
    s = w.sum(axis=-1, keepdims=True)
    if (s <= 0).any():
        raise ValueError("every routing distribution needs positive mass")
    return w / s


def _topk_sample(probs: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    # Gumbel top-k == sequential sampling without replacement
    with np.errstate(divide="ignore"):
        keys = np.log(probs) + rng.gumbel(size=probs.shape)
    if k == 1:
        return np.argmax(keys, axis=1)[:, None]
    part = np.argpartition(-keys, k - 1, axis=1)[:, :k]
    order = np.argsort(-np.take_along_axis(keys, part, axis=1), axis=1, kind="stable")
    return np.take_along_axis(part, order, axis=1)


def route_tokens(model: RoutingModel, n_tokens: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Route ``n_tokens`` tokens through every layer; returns (n, L, top_k) ints."""
    t = model.topology
    if rng is None:
        rng = model.generator()
    out = np.empty((n_tokens, t.n_layers, t.top_k), dtype=np.int64)
    if n_tokens == 0:
        return out
    prev = None
    for layer in range(t.n_layers):
        p = model.layer_probs(layer, prev)
        if p.shape[0] == 1:
            p = np.broadcast_to(p, (n_tokens, t.n_experts))
        chosen = _topk_sample(p, t.top_k, rng)
        out[:, layer, :] = chosen
        prev = chosen
    return out


def route_token(model: RoutingModel, rng: Optional[np.random.Generator] = None) -> list[tuple[int, ...]]:
    """Route a single token; returns one expert tuple per layer."""
    path = route_tokens(model, 1, rng)[0]
    return [tuple(int(x) for x in row) for row in path]


def record_stats(tokens, n_experts: Optional[int] = None):
    """Count activations ``A``, transitions ``E`` and the aggregate ``W``.

    With ``top_k > 1`` every one of the ``top_k * top_k`` layer-to-layer
    combinations of a token counts as a transition.
    """
    tokens = check_stream(tokens)
    n, L, k = tokens.shape
    if n_experts is None:
        n_experts = int(tokens.max()) + 1 if tokens.size else 1
    e = n_experts
    A = np.zeros((L, e), dtype=np.int64)
    for i in range(L):
        A[i] = np.bincount(tokens[:, i, :].ravel(), minlength=e)
    E = np.zeros((max(L - 1, 0), e, e), dtype=np.int64)
    for i in range(L - 1):
        src = np.repeat(tokens[:, i, :], k, axis=1).ravel()
        dst = np.tile(tokens[:, i + 1, :], (1, k)).ravel()
        E[i] = np.bincount(src * e + dst, minlength=e * e).reshape(e, e)
    W = E.sum(axis=0) if L > 1 else np.zeros((e, e), dtype=np.int64)
    return A, E, W


def _gpu_lookup(assign: np.ndarray, n_layers: int, n_experts: int) -> np.ndarray:
    """Per-(layer, expert) GPU table for shared-index or layer-qualified assignments."""
    assign = np.asarray(assign)
    if assign.ndim != 1:
        raise ValueError("assignment must be 1-D")
    if (assign < 0).any():
        raise ValueError("placement leaves experts unplaced")
    if assign.size == n_experts:
        return np.broadcast_to(assign, (n_layers, n_experts))
    if assign.size == n_layers * n_experts:
        return assign.reshape(n_layers, n_experts)
    raise ValueError(
        f"placement covers {assign.size} experts; expected {n_experts} (shared) "
        f"or {n_layers * n_experts} (per layer)"
    )


def comm_cost(tokens, placement, per_layer: bool = False) -> int:
    """Directly count consecutive-layer expert transitions that cross GPUs.

    ``placement`` is a :class:`~gimbalsim.placement.Placement` or an
    assignment array.  By default it holds one GPU per expert index, shared
    by every layer; with ``per_layer`` it is indexed by the layer-qualified
    id ``layer * n_experts + expert``.
    """
    tokens = check_stream(tokens)
    assign = np.asarray(getattr(placement, "assign", placement))
    n, L, k = tokens.shape
    n_experts = assign.size // L if per_layer else assign.size
    if per_layer and n_experts * L != assign.size:
        raise ValueError("per-layer placement size must be a multiple of n_layers")
    if tokens.size and tokens.max() >= n_experts:
        raise ValueError("stream references an expert the placement does not cover")
    gpu = _gpu_lookup(assign, L, n_experts)
    total = 0
    for i in range(L - 1):
        g_src = gpu[i][tokens[:, i, :]]
        g_dst = gpu[i + 1][tokens[:, i + 1, :]]
        total += int((g_src[:, :, None] != g_dst[:, None, :]).sum())
    return total


def flatten_stats(A: np.ndarray, E: np.ndarray):
    """Layer-qualified expert view: global id ``layer * n_experts + expert``.

    Returns ``(A_global, W_global)`` with ``A_global`` of shape
    (layers, layers*experts) and ``W_global`` holding ``E`` on the off-diagonal
    blocks linking consecutive layers.
    """
    A = np.asarray(A)
    E = np.asarray(E)
    L, e = A.shape
    m = L * e
    A_g = np.zeros((L, m), dtype=A.dtype)
    for i in range(L):
        A_g[i, i * e:(i + 1) * e] = A[i]
    W_g = np.zeros((m, m), dtype=E.dtype if E.size else A.dtype)
    for i in range(L - 1):
        W_g[i * e:(i + 1) * e, (i + 1) * e:(i + 2) * e] = E[i]
    return A_g, W_g


def write_matrix(path: "str | os.PathLike[str]", M: np.ndarray) -> None:
    """Write ``M`` as CSV: a ``shape,d0,d1[,d2]`` header then 2-D rows."""
    M = np.asarray(M)
    rows = M.reshape(-1, M.shape[-1]) if M.ndim > 1 else M.reshape(1, -1)
    integral = np.issubdtype(M.dtype, np.integer)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("shape," + ",".join(str(d) for d in M.shape) + "\n")
        for row in rows:
            fh.write(",".join(str(int(v)) if integral else repr(float(v)) for v in row) + "\n")


def read_matrix(path: "str | os.PathLike[str]") -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        head = fh.readline().strip().split(",")
        if head[0] != "shape" or len(head) < 2:
            raise ValueError(f"{path}: missing shape header")
        shape = tuple(int(d) for d in head[1:])
        values = [v for line in fh if line.strip() for v in line.strip().split(",")]
    arr = np.array([float(v) for v in values])
    if arr.size != int(np.prod(shape)):
        raise ValueError(f"{path}: header shape {shape} does not match {arr.size} values")
    if np.all(arr == np.round(arr)):
        arr = arr.astype(np.int64)
    return arr.reshape(shape)


class ExpertAffinityRecorder(BaseEstimator):
    """Accumulates ``A``, ``E`` and ``W`` over one or more routed streams."""

    def __init__(self, n_experts: int = 16):
        self.n_experts = n_experts

    def fit(self, tokens, y=None):
        tokens = check_stream(tokens)
        self.activation_, self.transitions_, self.affinity_ = record_stats(tokens, self.n_experts)
        self.n_tokens_ = tokens.shape[0]
        return self

    def partial_fit(self, tokens, y=None):
        if not hasattr(self, "activation_"):
            return self.fit(tokens)
        A, E, W = record_stats(tokens, self.n_experts)
        self.activation_ = self.activation_ + A
        self.transitions_ = self.transitions_ + E
        self.affinity_ = self.affinity_ + W
        self.n_tokens_ += check_stream(tokens).shape[0]
        return self


def expected_layer_imbalance(A: np.ndarray, gpu_table: np.ndarray, n_gpus: int) -> float:
    """Mean over layers of max-GPU load divided by the ideal share (>= 1)."""
    A = np.asarray(A, dtype=float)
    ratios = []
    for i in range(A.shape[0]):
        total = A[i].sum()
        if total <= 0:
            continue
        loads = np.bincount(gpu_table[i], weights=A[i], minlength=n_gpus)
        ratios.append(loads.max() / (total / n_gpus))
    return float(np.mean(ratios)) if ratios else 1.0


@dataclass(frozen=True)
class MoeCostModel:
    """Maps an expert placement to a forward-step time multiplier.

    ``multiplier = 1 + compute_share * (imbalance - 1) + comm_penalty * cross_fraction``
    where ``imbalance`` is the mean per-layer max/ideal GPU load ratio and
    ``cross_fraction`` the share of layer transitions that cross GPUs.
    """

    compute_share: float = 0.3
    comm_penalty: float = 0.1

    def __post_init__(self):
        if self.compute_share < 0 or self.comm_penalty < 0:
            raise ValueError("MoE cost weights must be non-negative")

    def multiplier(self, A: np.ndarray, E: np.ndarray, assign: np.ndarray, n_gpus: int) -> float:
        A = np.asarray(A)
        L, e = A.shape
        gpu = _gpu_lookup(assign, L, e)
        imbalance = expected_layer_imbalance(A, gpu, n_gpus)
        total = cross = 0.0
        for i in range(L - 1):
            diff = gpu[i][:, None] != gpu[i + 1][None, :]
            total += float(E[i].sum())
            cross += float(E[i][diff].sum())
        frac = cross / total if total > 0 else 0.0
        return 1.0 + self.compute_share * (imbalance - 1.0) + self.comm_penalty * frac
