"""Expert placement: balanced partitioning of experts onto GPUs.

A problem is an activation matrix ``A`` (rows x m experts) plus directional
pair weights ``W`` (m x m).  The objective is ``alpha * D + beta * cut``
where ``D`` is the largest per-row deviation of a GPU's load from the ideal
share and ``cut`` sums ``W[j,k] + W[k,j]`` over pairs ``j < k`` placed on
different GPUs.  Every GPU hosts exactly ``m / g`` experts.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_activation, check_assignment, check_pair_weights

EXACT_MAX_EXPERTS = 16
EXACT_MAX_GPUS = 4


class PlacementError(ValueError):
    pass


@dataclass(frozen=True)
class Placement:
    assign: np.ndarray
    n_gpus: int

    def __post_init__(self):
        object.__setattr__(self, "assign", check_assignment(self.assign, np.asarray(self.assign).size, self.n_gpus))

    @property
    def n_experts(self) -> int:
        return self.assign.size

    def members(self, gpu: int) -> list[int]:
        return np.flatnonzero(self.assign == gpu).tolist()

    def moved(self, other: "Placement") -> int:
        return int((self.assign != other.assign).sum())

    def __eq__(self, other):
        return isinstance(other, Placement) and self.n_gpus == other.n_gpus and np.array_equal(self.assign, other.assign)

    def __hash__(self):
        return hash((self.n_gpus, self.assign.tobytes()))


@dataclass(frozen=True)
class PlacementCost:
    D: float
    cut: float
    objective: float


@dataclass
class PlacementProblem:
    A: np.ndarray
    W: Optional[np.ndarray]
    g: int
    alpha: float = 1.0
    beta: float = 1.0
    W_pairs: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.A = check_activation(self.A)
        m = self.A.shape[1]
        self.W = check_pair_weights(self.W, m)
        if self.g < 1:
            raise PlacementError("g must be >= 1")
        if m % self.g:
            raise PlacementError(f"{m} experts cannot be split evenly over {self.g} GPUs")
        if not (self.alpha > 0 and self.beta > 0):
            raise PlacementError("alpha and beta must be > 0")
        # fold direction away; only j < k entries are read
        self.W_pairs = np.triu(self.W + self.W.T, k=1)

    @property
    def m(self) -> int:
        return self.A.shape[1]

    @property
    def capacity(self) -> int:
        return self.m // self.g


def _cost_terms(A: np.ndarray, W_pairs: np.ndarray, assign: np.ndarray, g: int) -> tuple[float, float]:
    # sums run over experts/pairs in index order so GPU relabelings agree bit-for-bit
    ideal = A.sum(axis=1) / g
    D = 0.0
    for p in range(g):
        load = A[:, assign == p].sum(axis=1)
        dev = float(np.abs(load - ideal).max()) if A.shape[0] else 0.0
        D = max(D, dev)
    diff = assign[:, None] != assign[None, :]
    cut = float((W_pairs * diff).sum())
    return D, cut


def eval_cost(problem: PlacementProblem, placement: "Placement | np.ndarray") -> PlacementCost:
    assign = getattr(placement, "assign", placement)
    assign = check_assignment(assign, problem.m, problem.g)
    D, cut = _cost_terms(problem.A, problem.W_pairs, assign, problem.g)
    return PlacementCost(D, cut, problem.alpha * D + problem.beta * cut)


def exact_solve(problem: PlacementProblem) -> tuple[Placement, PlacementCost]:
    """Optimal placement by branch and bound over balanced partitions.

    GPU labels are assigned canonically (expert 0 on GPU 0, each new GPU is
    the next unused label), so among partitions with the smallest computed
    objective the returned one is the lexicographically smallest assignment
    vector.  Objectives are compared as computed floats, without tolerance.
    """
    m, g = problem.m, problem.g
    if m > EXACT_MAX_EXPERTS or g > EXACT_MAX_GPUS:
        raise PlacementError(
            f"exact_solve supports m <= {EXACT_MAX_EXPERTS} and g <= {EXACT_MAX_GPUS} "
            f"(got m={m}, g={g}); use greedy_place for larger instances"
        )
    A, Wp = problem.A, problem.W_pairs
    alpha, beta = problem.alpha, problem.beta
    cap = problem.capacity
    n_rows = A.shape[0]
    ideal = (A.sum(axis=1) / g).tolist()
    cols = [A[:, j].tolist() for j in range(m)]
    wrows = Wp.tolist()

    assign = [-1] * m
    counts = [0] * g
    loads = [[0.0] * n_rows for _ in range(g)]
    best = {"obj": np.inf, "assign": None}

    def tol() -> float:
        return 1e-9 * (1.0 + abs(best["obj"]))

    def dfs(j: int, used: int, cut: float, d_lb: float) -> None:
        if j == m:
            arr = np.array(assign, dtype=np.int64)
            D, c = _cost_terms(A, Wp, arr, g)
            obj = alpha * D + beta * c
            if obj < best["obj"]:
                best["obj"], best["assign"] = obj, arr
            return
        col = cols[j]
        for p in range(min(used + 1, g)):
            if counts[p] >= cap:
                continue
            added = 0.0
            for k in range(j):
                if assign[k] != p:
                    added += wrows[k][j]
            new_cut = cut + added
            load = loads[p]
            for i in range(n_rows):
                load[i] += col[i]
            counts[p] += 1
            dev = d_lb
            for i in range(n_rows):
                over = load[i] - ideal[i]
                if over > dev:
                    dev = over
                if counts[p] == cap and -over > dev:
                    dev = -over
            bound = alpha * dev + beta * new_cut
            if bound <= best["obj"] + tol():
                assign[j] = p
                dfs(j + 1, max(used, p + 1), new_cut, dev)
                assign[j] = -1
            counts[p] -= 1
            for i in range(n_rows):
                load[i] -= col[i]

    dfs(0, 0, 0.0, 0.0)
    placement = Placement(best["assign"], g)
    return placement, eval_cost(problem, placement)


@dataclass(frozen=True)
class AffinitySet:
    members: frozenset
    anchor_gpu: int = 0
    pairs: tuple = ()

    def __len__(self):
        return len(self.members)

    def __contains__(self, expert):
        return expert in self.members


def _pair_matrix(W) -> np.ndarray:
    W = np.asarray(W, dtype=float)
    if W.ndim == 3:
        W = W.sum(axis=0)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError("affinity weights must be square (or a (layers-1, m, m) tensor)")
    return np.triu(W + W.T, k=1)


def build_affinity_set(
    W,
    threshold: float,
    top_e: int,
    capacity: int,
    anchor_gpu: int = 0,
    rows: Optional[np.ndarray] = None,
    row_capacity: Optional[int] = None,
) -> AffinitySet:
    """Pick the strongest expert pairs whose endpoints fit on the anchor GPU.

    ``W`` may be an m x m weight matrix or the per-layer transition tensor.
    Pairs with folded weight >= ``threshold`` are ranked heaviest first and
    cut to ``top_e``; the lightest survivors are dropped until the endpoint
    union fits ``capacity`` (and ``row_capacity`` per row, if given).
    """
    P = _pair_matrix(W)
    jj, kk = np.nonzero(np.triu((P >= threshold) & (P > 0), k=1))
    weights = P[jj, kk]
    order = np.lexsort((kk, jj, -weights))
    pairs = [(int(jj[o]), int(kk[o]), float(weights[o])) for o in order[: max(top_e, 0)]]

    def fits(ps) -> bool:
        members = {x for j, k, _ in ps for x in (j, k)}
        if len(members) > capacity:
            return False
        if rows is not None and row_capacity is not None:
            per_row = np.bincount(np.asarray(rows)[list(members)], minlength=1) if members else np.zeros(1)
            if per_row.max() > row_capacity:
                return False
        return True

    while pairs and not fits(pairs):
        pairs.pop()
    members = frozenset(x for j, k, _ in pairs for x in (j, k))
    return AffinitySet(members, anchor_gpu, tuple(pairs))


def greedy_place(
    A,
    affinity: Optional[AffinitySet],
    g: int,
    mode: str = "total",
    rows: Optional[np.ndarray] = None,
) -> Placement:
    """Anchor the affinity set, then spread the rest least-loaded first.

    Remaining experts go in order of descending total activation to the
    GPU with the smallest accumulated load that still has a free slot.
    ``mode="per_row"`` attributes each expert to one row (``rows`` or its
    argmax row) and balances loads and slot counts within that row, which
    suits layer-qualified experts.
    """
    A = check_activation(A)
    n_rows, m = A.shape
    if m % g:
        raise PlacementError(f"{m} experts cannot be split evenly over {g} GPUs")
    cap = m // g
    members = sorted(affinity.members) if affinity is not None else []
    anchor = affinity.anchor_gpu if affinity is not None else 0
    if len(members) > cap:
        raise PlacementError(f"affinity set of {len(members)} experts exceeds anchor capacity {cap}")
    if not 0 <= anchor < g:
        raise PlacementError(f"anchor GPU {anchor} outside [0, {g})")
    if mode not in ("total", "per_row"):
        raise ValueError(f"unknown greedy mode {mode!r}")

    totals = A.sum(axis=0)
    assign = np.full(m, -1, dtype=np.int64)
    counts = np.zeros(g, dtype=np.int64)
    if mode == "per_row":
        home = np.asarray(rows) if rows is not None else np.argmax(A, axis=0)
        n_home = int(home.max()) + 1
        row_cap = [-(-int((home == r).sum()) // g) for r in range(n_home)]
        row_loads = np.zeros((n_home, g))
        row_counts = np.zeros((n_home, g), dtype=np.int64)
    else:
        loads = np.zeros(g)

    def put(j: int, p: int) -> None:
        assign[j] = p
        counts[p] += 1
        if mode == "per_row":
            row_loads[home[j], p] += totals[j]
            row_counts[home[j], p] += 1
        else:
            loads[p] += totals[j]

    for j in members:
        if mode == "per_row" and row_counts[home[j], anchor] >= row_cap[home[j]]:
            raise PlacementError(f"affinity set overflows the anchor's slots in row {home[j]}")
        put(j, anchor)

    rest = [j for j in np.argsort(-totals, kind="stable") if assign[j] < 0]
    for j in rest:
        best = None
        for p in range(g):
            if counts[p] >= cap:
                continue
            if mode == "per_row":
                if row_counts[home[j], p] >= row_cap[home[j]]:
                    continue
                key = (row_loads[home[j], p], row_counts[home[j], p], p)
            else:
                key = (loads[p], counts[p], p)
            if best is None or key < best[0]:
                best = (key, p)
        if best is None:
            raise PlacementError("no GPU has a free slot; per-row capacities are inconsistent")
        put(int(j), best[1])
    return Placement(assign, g)


def contiguous_placement(n_experts: int, g: int, n_layers: Optional[int] = None) -> Placement:
    """Static layout in index order, ``n_experts / g`` per GPU (tiled per layer if given)."""
    if n_experts % g:
        raise PlacementError(f"{n_experts} experts cannot be split evenly over {g} GPUs")
    one = np.arange(n_experts) // (n_experts // g)
    if n_layers is None:
        return Placement(one, g)
    return Placement(np.tile(one, n_layers), g)


@dataclass(frozen=True)
class Relocation:
    step: int
    placement: Placement
    moved: int


def should_relocate(step_count: int, tau: int) -> bool:
    if tau < 1:
        raise ValueError("tau must be >= 1")
    return step_count % tau == 0


def relocate(
    current: Optional[Placement],
    step_count: int,
    tau: int,
    affinity: Optional[AffinitySet],
    A_recent,
    g: int,
    mode: str = "total",
    rows: Optional[np.ndarray] = None,
) -> Optional[Relocation]:
    """Re-run greedy placement on the recent window when ``step_count % tau == 0``.

    The anchor GPU comes from ``affinity`` and is never changed here.
    """
    if not should_relocate(step_count, tau):
        return None
    new = greedy_place(A_recent, affinity, g, mode=mode, rows=rows)
    moved = new.moved(current) if current is not None else 0
    return Relocation(step_count, new, moved)


def write_placement(path: "str | os.PathLike[str]", placement: Placement) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["expert_id", "gpu_id"])
        for j, p in enumerate(placement.assign):
            w.writerow([j, int(p)])


def read_placement(path: "str | os.PathLike[str]", n_gpus: Optional[int] = None) -> Placement:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["expert_id", "gpu_id"]:
        raise ValueError(f"{path}: expected header expert_id,gpu_id")
    pairs = sorted((int(a), int(b)) for a, b in rows[1:] if a.strip())
    if [j for j, _ in pairs] != list(range(len(pairs))):
        raise ValueError(f"{path}: expert ids must be 0..m-1 with no gaps")
    assign = np.array([p for _, p in pairs], dtype=np.int64)
    return Placement(assign, n_gpus if n_gpus is not None else int(assign.max()) + 1)


class _PlacementEstimator(BaseEstimator):
    def predict(self, experts=None):
        """GPU id for each requested expert index (all experts by default)."""
        check_is_fitted(self, "assignment_")
        if experts is None:
            return self.assignment_.copy()
        return self.assignment_[np.asarray(experts, dtype=np.int64)]

    def score(self, A, W=None):
        """Negative objective of the fitted placement on ``(A, W)``."""
        check_is_fitted(self, "assignment_")
        problem = PlacementProblem(A, W, self.n_gpus, self.alpha, self.beta)
        return -eval_cost(problem, self.placement_).objective


class GreedyPlacement(_PlacementEstimator):
    """Affinity-anchored least-loaded placement as an estimator.

    ``fit(A, W)`` builds the affinity set from ``W`` (when ``top_e`` > 0) and
    stores ``placement_``, ``assignment_``, ``affinity_`` and ``cost_``.
    """

    def __init__(self, n_gpus=2, anchor_gpu=0, top_e=0, threshold=0.0, mode="total", alpha=1.0, beta=1.0):
        self.n_gpus = n_gpus
        self.anchor_gpu = anchor_gpu
        self.top_e = top_e
        self.threshold = threshold
        self.mode = mode
        self.alpha = alpha
        self.beta = beta

    def fit(self, A, W=None):
        problem = PlacementProblem(A, W, self.n_gpus, self.alpha, self.beta)
        if self.top_e > 0:
            self.affinity_ = build_affinity_set(problem.W, self.threshold, self.top_e, problem.capacity, self.anchor_gpu)
        else:
            self.affinity_ = AffinitySet(frozenset(), self.anchor_gpu)
        self.placement_ = greedy_place(problem.A, self.affinity_, self.n_gpus, mode=self.mode)
        self.assignment_ = self.placement_.assign
        self.cost_ = eval_cost(problem, self.placement_)
        return self


class ExactPlacement(_PlacementEstimator):
    """Optimal small-instance placement (m <= 16, g <= 4) as an estimator."""

    def __init__(self, n_gpus=2, alpha=1.0, beta=1.0):
        self.n_gpus = n_gpus
        self.alpha = alpha
        self.beta = beta

    def fit(self, A, W=None):
        problem = PlacementProblem(A, W, self.n_gpus, self.alpha, self.beta)
        self.placement_, self.cost_ = exact_solve(problem)
        self.assignment_ = self.placement_.assign
        return self
