"""Latency-budgeted blockwise selection (multiple-choice knapsack).

A network is split into ``N`` blocks; each block offers a list of candidate
replacements with a measured error change ``delta_metric`` and runtime change
``delta_time``.  We pick exactly one candidate per block so that the summed
error change is minimal while the summed runtime change stays within a budget.

Three solvers are provided:

* :func:`solve_exact` - depth-first branch-and-bound, exact in floating point.
* :func:`solve_dp` - dynamic program over a discretized time axis.
* :func:`brute_force` - vectorized enumeration, the ground truth for tests.

All three sum values in block order (a left fold), so objectives reported by
different solvers for the same selection are bit-identical.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import (
    InfeasibleError,
    ResolutionTooCoarseError,
    SearchSpaceTooLargeError,
)

IDENTITY_ID = "teacher"
BRUTE_FORCE_LIMIT = 10**7
DEFAULT_RESOLUTION = 0.01


@dataclass(frozen=True)
class BlockCandidate:
    block_index: int
    candidate_id: str
    delta_metric: float
    delta_time: float
    spec_ref: object = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not math.isfinite(self.delta_metric) or not math.isfinite(self.delta_time):
            raise ValueError(
                f"candidate {self.candidate_id!r} in block {self.block_index} "
                "has non-finite deltas"
            )
        if not self.candidate_id or any(ch in self.candidate_id for ch in "\t\n#"):
            raise ValueError(f"invalid candidate id {self.candidate_id!r}")


@dataclass(frozen=True)
class CandidateTable:
    """Per-block candidate lists; block indices are 1-based."""

    blocks: tuple
    includes_identity: tuple = None
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        blocks = tuple(tuple(b) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        if not blocks:
            raise ValueError("a candidate table needs at least one block")
        flags = self.includes_identity
        if flags is None:
            flags = tuple(_has_identity(b) for b in blocks)
        flags = tuple(bool(f) for f in flags)
        if len(flags) != len(blocks):
            raise ValueError("includes_identity must have one flag per block")
        object.__setattr__(self, "includes_identity", flags)

        for i, (cands, flag) in enumerate(zip(blocks, flags), start=1):
            if not cands:
                raise ValueError(f"block {i} has no candidates")
            ids = [c.candidate_id for c in cands]
            if len(set(ids)) != len(ids):
                raise ValueError(f"duplicate candidate ids in block {i}")
            for c in cands:
                if c.block_index != i:
                    raise ValueError(
                        f"candidate {c.candidate_id!r} carries block_index "
                        f"{c.block_index} but sits in block {i}"
                    )
            if flag:
                identity = [
                    c for c in cands if c.delta_metric == 0.0 and c.delta_time == 0.0
                ]
                if len(identity) != 1 or identity[0].candidate_id != IDENTITY_ID:
                    raise ValueError(
                        f"block {i} is flagged with an identity candidate but does "
                        f"not hold exactly one (0, 0) candidate named {IDENTITY_ID!r}"
                    )

    @classmethod
    def from_arrays(cls, delta_metric, delta_time, ids=None, metadata=None):
        """Build a table from per-block sequences of deltas.

        ``ids`` defaults to ``c0, c1, ...`` within each block.
        """
        if len(delta_metric) != len(delta_time):
            raise ValueError("delta_metric and delta_time disagree on block count")
        blocks = []
        for i, (dms, dts) in enumerate(zip(delta_metric, delta_time), start=1):
            if len(dms) != len(dts):
                raise ValueError(f"block {i}: delta arrays differ in length")
            block_ids = ids[i - 1] if ids is not None else [f"c{j}" for j in range(len(dms))]
            blocks.append(
                [
                    BlockCandidate(i, str(cid), float(m), float(t))
                    for cid, m, t in zip(block_ids, dms, dts)
                ]
            )
        return cls(blocks, metadata=dict(metadata or {}))

    @property
    def n_blocks(self):
        return len(self.blocks)

    @property
    def sizes(self):
        return tuple(len(b) for b in self.blocks)

    def with_identity(self):
        """Return a copy with a (0, 0) ``teacher`` candidate in every block."""
        blocks = []
        for i, cands in enumerate(self.blocks, start=1):
            if _has_identity(cands):
                blocks.append(cands)
                continue
            if any(c.candidate_id == IDENTITY_ID for c in cands):
                raise ValueError(f"block {i} already uses the id {IDENTITY_ID!r}")
            blocks.append(cands + (BlockCandidate(i, IDENTITY_ID, 0.0, 0.0),))
        return CandidateTable(blocks, (True,) * len(blocks), dict(self.metadata))

    def lookup(self, block_index, candidate_id):
        for c in self.blocks[block_index - 1]:
            if c.candidate_id == candidate_id:
                return c
        raise KeyError(f"block {block_index} has no candidate {candidate_id!r}")


def _has_identity(cands):
    return any(
        c.candidate_id == IDENTITY_ID and c.delta_metric == 0.0 and c.delta_time == 0.0
        for c in cands
    )


@dataclass(frozen=True)
class SelectionPlan:
    """One candidate per block, or an infeasibility marker when ``feasible`` is false.

    For infeasible markers ``choices`` is empty, ``objective`` is NaN and
    ``total_delta_time`` holds the tightest achievable runtime change.
    """

    choices: tuple
    objective: float
    total_delta_time: float
    budget: float
    optimal: bool
    feasible: bool = True
    method: str = field(default="", compare=False)

    def candidates(self, table):
        return [table.lookup(i, cid) for i, cid in enumerate(self.choices, start=1)]


def left_fold(values):
    """Sum in sequence order; the shared summation order of every solver."""
    total = 0.0
    for v in values:
        total += v
    return total


def evaluate_selection(table, choices):
    """Recompute ``(objective, total_delta_time)`` for a sequence of candidate ids."""
    if len(choices) != table.n_blocks:
        raise ValueError("need exactly one choice per block")
    picked = [table.lookup(i, cid) for i, cid in enumerate(choices, start=1)]
    return (
        left_fold(c.delta_metric for c in picked),
        left_fold(c.delta_time for c in picked),
    )


def count_search_space(table):
    """Number of distinct selections, the product of per-block candidate counts."""
    return math.prod(table.sizes)


def _check_budget(budget):
    budget = float(budget)
    if math.isnan(budget) or budget == -math.inf:
        raise ValueError(f"budget must be a real number or +inf, got {budget}")
    return budget


def _block_columns(table):
    out = []
    for cands in table.blocks:
        out.append(
            (
                np.array([c.delta_metric for c in cands], dtype=np.float64),
                np.array([c.delta_time for c in cands], dtype=np.float64),
                [c.candidate_id for c in cands],
            )
        )
    return out


def _raise_infeasible(table, budget):
    tightest = left_fold(min(c.delta_time for c in b) for b in table.blocks)
    if tightest > budget:
        raise InfeasibleError(
            f"budget {budget!r} is below the tightest achievable total "
            f"delta_time {tightest!r}",
            budget=budget,
            min_total_dt=tightest,
        )
    return tightest


def _scale_tolerance(table):
    scale = sum(max(abs(c.delta_metric) for c in b) for b in table.blocks)
    tscale = sum(max(abs(c.delta_time) for c in b) for b in table.blocks)
    return 1e-9 * (1.0 + scale), 1e-9 * (1.0 + tscale)


def _pareto_front(cands):
    """Non-dominated candidates sorted by delta_time ascending, delta_metric descending."""
    ordered = sorted(cands, key=lambda c: (c.delta_time, c.delta_metric, c.candidate_id))
    front = []
    best = math.inf
    for c in ordered:
        if c.delta_metric < best:
            front.append(c)
            best = c.delta_metric
    return front


class _HullRelaxation:
    """LP relaxation of the multiple-choice knapsack over a run of blocks.

    Every block starts at its fastest candidate; lower-convex-hull segments of
    all blocks are then bought in order of decreasing metric gain per unit of
    time until the slack runs out, the last one fractionally.
    """

    def __init__(self, fronts):
        self.base_dt = sum(f[0].delta_time for f in fronts)
        self.base_dm = sum(f[0].delta_metric for f in fronts)
        segments = []
        for front in fronts:
            hull = []
            for c in front:
                p = (c.delta_time, c.delta_metric)
                while len(hull) >= 2 and _cross(hull[-2], hull[-1], p) <= 0:
                    hull.pop()
                hull.append(p)
            for a, b in zip(hull, hull[1:]):
                segments.append(((a[1] - b[1]) / (b[0] - a[0]), b[0] - a[0], a[1] - b[1]))
        segments.sort(key=lambda s: -s[0])
        self.cum_dt = [0.0]
        self.cum_gain = [0.0]
        self.rate = []
        for rate, width, gain in segments:
            self.cum_dt.append(self.cum_dt[-1] + width)
            self.cum_gain.append(self.cum_gain[-1] + gain)
            self.rate.append(rate)

    def bound(self, slack):
        avail = slack - self.base_dt
        if avail < 0:
            return math.inf
        k = bisect.bisect_right(self.cum_dt, avail) - 1
        gain = self.cum_gain[k]
        if k < len(self.rate):
            gain += (avail - self.cum_dt[k]) * self.rate[k]
        return self.base_dm - gain


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def solve_exact(table, budget):
    """Exact depth-first branch-and-bound.

    Each block is first reduced to its Pareto front.  At a node where blocks
    ``i..N-1`` are undecided and ``slack`` runtime is left, the lower bound is
    the larger of two relaxations: the sum over undecided blocks of the smallest
    ``delta_metric`` among that block's candidates that fit ``slack`` minus the
    other undecided blocks' minimum ``delta_time``, and the LP relaxation over
    the blocks' convex hulls.  Ties resolve to the smaller total runtime change,
    then to the lexicographically smallest id sequence.

    Raises :class:`InfeasibleError` when no selection fits the budget.
    """
    budget = _check_budget(budget)
    _raise_infeasible(table, budget)
    n = table.n_blocks
    mtol, ttol = _scale_tolerance(table)

    fronts = [_pareto_front(b) for b in table.blocks]
    front_dt = [[c.delta_time for c in f] for f in fronts]
    front_dm = [[c.delta_metric for c in f] for f in fronts]
    min_dt = [f[0] for f in front_dt]
    suffix_min = [0.0] * (n + 1)
    for i in range(n - 1, -1, -1):
        suffix_min[i] = suffix_min[i + 1] + min_dt[i]
    relaxations = [_HullRelaxation(fronts[i:]) for i in range(n + 1)]
    # branch order: lowest delta_metric first (reverse of the front order)
    branch = [list(reversed(f)) for f in fronts]

    def lower_bound(i, slack):
        # per-block minimum among individually compatible candidates ...
        rest = suffix_min[i]
        lb = 0.0
        for j in range(i, n):
            cap = slack - (rest - min_dt[j]) + ttol
            k = bisect.bisect_right(front_dt[j], cap) - 1
            if k < 0:
                return math.inf
            lb += front_dm[j][k]
        # ... tightened by the LP relaxation of the remaining blocks
        return max(lb, relaxations[i].bound(slack + ttol))

    best_key = None
    best_choice = None
    chosen = [None] * n

    def visit(i, dm_sum, dt_sum):
        nonlocal best_key, best_choice
        if i == n:
            if dt_sum > budget:
                return
            key = (dm_sum, dt_sum, tuple(c.candidate_id for c in chosen))
            if best_key is None or key < best_key:
                best_key = key
                best_choice = list(chosen)
            return
        children = []
        for c in branch[i]:
            dt_next = dt_sum + c.delta_time
            if dt_next + suffix_min[i + 1] > budget + ttol:
                continue
            dm_next = dm_sum + c.delta_metric
            bound = dm_next + lower_bound(i + 1, budget - dt_next)
            if bound < math.inf:
                children.append((bound, dm_next, dt_next, c))
        # most promising child first so a strong incumbent appears early
        children.sort(key=lambda ch: ch[0])
        for bound, dm_next, dt_next, c in children:
            if best_key is not None and bound > best_key[0] + mtol:
                break
            chosen[i] = c
            visit(i + 1, dm_next, dt_next)
        chosen[i] = None

    visit(0, 0.0, 0.0)
    if best_key is None:
        # float rounding can push every selection over a budget that the
        # per-block minima only just meet
        raise InfeasibleError(
            "no selection fits the budget", budget=budget,
            min_total_dt=left_fold(min_dt),
        )
    # The Pareto reduction may drop an exact-tie candidate with a smaller id
    # from a block; plans still share objective and runtime with the full table.
    return SelectionPlan(
        choices=tuple(c.candidate_id for c in best_choice),
        objective=best_key[0],
        total_delta_time=best_key[1],
        budget=budget,
        optimal=True,
        method="bnb",
    )


def solve_dp(table, budget, resolution=DEFAULT_RESOLUTION):
    """Multiple-choice knapsack DP on a discretized time axis.

    Each block's ``delta_time`` is offset by the block minimum so that weights
    are non-negative, then rounded to multiples of ``resolution``.  The plan is
    optimal for the discretized weights; its objective and runtime are recomputed
    from the table.  If the discretized optimum violates the true budget,
    :class:`ResolutionTooCoarseError` is raised.
    """
    budget = _check_budget(budget)
    resolution = float(resolution)
    if not resolution > 0 or not math.isfinite(resolution):
        raise ValueError(f"resolution must be positive, got {resolution}")
    base = _raise_infeasible(table, budget)

    cols = _block_columns(table)
    weights = []
    for dm, dt, _ in cols:
        w = np.rint((dt - dt.min()) / resolution).astype(np.int64)
        weights.append(w)
    span = int(sum(int(w.max()) for w in weights))
    if math.isinf(budget):
        cap = span
    else:
        cap = int(math.floor((budget - base) / resolution + 1e-9))
        cap = max(0, min(cap, span))

    n = table.n_blocks
    # suffix tables: best objective / runtime of blocks i..n-1 at exact weight w
    obj_next = np.full(cap + 1, np.inf)
    obj_next[0] = 0.0
    dt_next = np.zeros(cap + 1)
    picks = [None] * n
    for i in range(n - 1, -1, -1):
        dm, dt, ids = cols[i]
        order = sorted(range(len(ids)), key=lambda k: ids[k])
        obj_cur = np.full(cap + 1, np.inf)
        dt_cur = np.full(cap + 1, np.inf)
        pick = np.full(cap + 1, -1, dtype=np.int64)
        for k in order:
            w = int(weights[i][k])
            if w > cap:
                continue
            cand_obj = np.full(cap + 1, np.inf)
            cand_dt = np.full(cap + 1, np.inf)
            cand_obj[w:] = dm[k] + obj_next[: cap + 1 - w]
            cand_dt[w:] = dt[k] + dt_next[: cap + 1 - w]
            better = (cand_obj < obj_cur) | ((cand_obj == obj_cur) & (cand_dt < dt_cur))
            better &= np.isfinite(cand_obj)
            obj_cur[better] = cand_obj[better]
            dt_cur[better] = cand_dt[better]
            pick[better] = k
        picks[i] = pick
        obj_next, dt_next = obj_cur, dt_cur

    reachable = np.isfinite(obj_next)
    if not reachable.any():
        raise ResolutionTooCoarseError(
            f"no selection fits the discretized budget at resolution {resolution}"
        )
    w_idx = np.arange(cap + 1)
    order = np.lexsort((w_idx, dt_next, obj_next))
    w = int(order[0])

    choices = []
    for i in range(n):
        k = int(picks[i][w])
        choices.append(cols[i][2][k])
        w -= int(weights[i][k])
    objective, total_dt = evaluate_selection(table, choices)
    if total_dt > budget:
        raise ResolutionTooCoarseError(
            f"discretized optimum has total delta_time {total_dt!r} above the "
            f"budget {budget!r}; use a finer resolution than {resolution}"
        )
    return SelectionPlan(
        choices=tuple(choices),
        objective=objective,
        total_delta_time=total_dt,
        budget=budget,
        optimal=True,
        method="dp",
    )


def brute_force(table, budget, limit=BRUTE_FORCE_LIMIT):
    """Enumerate every selection; the oracle for the other solvers."""
    budget = _check_budget(budget)
    size = count_search_space(table)
    if size > limit:
        raise SearchSpaceTooLargeError(
            f"{size} selections exceed the enumeration limit {limit}"
        )
    cols = _block_columns(table)
    n = table.n_blocks
    obj = np.zeros(())
    tot = np.zeros(())
    for i, (dm, dt, _) in enumerate(cols):
        shape = (1,) * i + (len(dm),)
        obj = obj[..., None] + dm.reshape(shape)
        tot = tot[..., None] + dt.reshape(shape)
    feasible = tot <= budget
    if not feasible.any():
        raise InfeasibleError(
            f"no selection fits the budget {budget!r}",
            budget=budget,
            min_total_dt=float(tot.min()),
        )
    masked = np.where(feasible, obj, np.inf)
    best_obj = masked.min()
    tied = feasible & (obj == best_obj)
    best_dt = tot[tied].min()
    tied &= tot == best_dt
    best = min(
        tuple(cols[i][2][k] for i, k in enumerate(idx))
        for idx in zip(*np.nonzero(tied))
    )
    return SelectionPlan(
        choices=best,
        objective=float(best_obj),
        total_delta_time=float(best_dt),
        budget=budget,
        optimal=True,
        method="brute_force",
    )


SOLVERS = {
    "bnb": solve_exact,
    "exact": solve_exact,
    "dp": solve_dp,
    "brute_force": brute_force,
}


def infeasible_plan(error, budget, method=""):
    return SelectionPlan(
        choices=(),
        objective=math.nan,
        total_delta_time=error.details.get("min_total_dt", math.nan),
        budget=float(budget),
        optimal=False,
        feasible=False,
        method=method,
    )


def pareto_sweep(table, budgets, method="bnb", **solver_kwargs):
    """Solve once per budget; infeasible budgets yield a ``feasible=False`` marker."""
    budgets = [float(b) for b in budgets]
    if any(b2 < b1 for b1, b2 in zip(budgets, budgets[1:])):
        raise ValueError("budgets must be sorted ascending")
    solver = SOLVERS[method]
    plans = []
    for b in budgets:
        try:
            plans.append(solver(table, b, **solver_kwargs))
        except InfeasibleError as err:
            plans.append(infeasible_plan(err, b, method))
    return plans


def random_table(rng, n_blocks=None, max_candidates=8, max_blocks=6,
                 time_step=0.125, time_range=8.0, identity=False):
    """Random table for solver cross-checks.

    ``delta_time`` values lie on a grid of ``time_step`` (dyadic by default so
    sums are exact in binary floating point); ``delta_metric`` is continuous.
    """
    rng = np.random.default_rng(rng)
    if n_blocks is None:
        n_blocks = int(rng.integers(1, max_blocks + 1))
    dms, dts = [], []
    for _ in range(n_blocks):
        c = int(rng.integers(1, max_candidates + 1))
        steps = int(round(time_range / time_step))
        dts.append(rng.integers(-steps, steps + 1, size=c) * time_step)
        dms.append(np.round(rng.normal(0.0, 1.0, size=c), 9))
    table = CandidateTable.from_arrays(dms, dts)
    return table.with_identity() if identity else table


def achievable_budget(table, rng, quantile=0.5):
    """A budget equal to the total runtime of a randomly drawn selection quantile."""
    rng = np.random.default_rng(rng)
    totals = []
    for _ in range(64):
        totals.append(left_fold(rng.choice([c.delta_time for c in b]) for b in table.blocks))
    return float(np.quantile(totals, quantile, method="nearest"))


class BlockwiseSearch(BaseEstimator):
    """Estimator wrapper around the selection solvers.

    Parameters
    ----------
    budget : float
        Runtime budget, in ms, relative to the teacher network.
    method : {"bnb", "dp", "brute_force"}
    resolution : float
        Time grid for ``method="dp"``.

    Attributes
    ----------
    plan_ : SelectionPlan
    choices_ : tuple of str
    objective_ : float
    """

    def __init__(self, budget=0.0, method="bnb", resolution=DEFAULT_RESOLUTION):
        self.budget = budget
        self.method = method
        self.resolution = resolution

    def fit(self, table, y=None):
        if self.method not in SOLVERS:
            raise ValueError(f"unknown method {self.method!r}")
        kwargs = {"resolution": self.resolution} if self.method == "dp" else {}
        self.plan_ = SOLVERS[self.method](table, self.budget, **kwargs)
        self.choices_ = self.plan_.choices
        self.objective_ = self.plan_.objective
        self.n_blocks_in_ = table.n_blocks
        return self

    def predict(self, table=None):
        """Return the selected candidates (fitting first when ``table`` is given)."""
        if table is not None:
            self.fit(table)
        _check_fitted(self)
        return list(self.choices_)

    def sweep(self, table, budgets):
        kwargs = {"resolution": self.resolution} if self.method == "dp" else {}
        return pareto_sweep(table, budgets, method=self.method, **kwargs)


def _check_fitted(est):
    from sklearn.utils.validation import check_is_fitted

    check_is_fitted(est)
