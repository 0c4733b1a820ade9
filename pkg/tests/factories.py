"""Random instances for the file-format round-trip tests."""

import numpy as np

from dncplan.pruning import (CONSUMES_HIDDEN, PREDICTS_DISPARITY, PRODUCES_HIDDEN, Edge,
                             LayerNode, build_dependency_graph)
from dncplan.search import SelectionPlan, random_table


def random_candidate_table(rng):
    table = random_table(rng, max_blocks=8, max_candidates=12)
    if rng.random() < 0.5:
        table = table.with_identity()
    meta = {"metric_name": rng.choice(["BP-2", "EPE"]), "seed": str(rng.integers(2**63))}
    return type(table)(table.blocks, table.includes_identity, meta)


def random_plan(rng, n_blocks=None):
    n = n_blocks or int(rng.integers(1, 9))
    if rng.random() < 0.2:
        return SelectionPlan((), float("nan"), float(rng.normal() * 10), float(rng.normal()),
                             False, feasible=False)
    return SelectionPlan(
        tuple(f"cand-{rng.integers(1000)}" for _ in range(n)),
        float(rng.normal() * 10), float(rng.normal() * 10), float(rng.normal() * 10),
        bool(rng.random() < 0.5),
    )


def same_plan(a, b):
    def eq(x, y):
        return (np.isnan(x) and np.isnan(y)) or x == y
    return (a.choices == b.choices and eq(a.objective, b.objective)
            and a.total_delta_time == b.total_delta_time and a.budget == b.budget
            and a.optimal == b.optimal and a.feasible == b.feasible)


def random_graph(rng):
    """A chain of layers with an optional recurrent hidden edge and a disparity head."""
    n = int(rng.integers(2, 8))
    widths = [int(w) for w in rng.integers(1, 65, size=n + 1)]
    recurrent = None
    if rng.random() < 0.6:
        i = int(rng.integers(0, n - 1))
        j = int(rng.integers(0, i + 1))
        widths[i + 1] = widths[j]
        recurrent = (i, j)
    tags = [set() for _ in range(n)]
    if recurrent:
        tags[recurrent[0]].add(PRODUCES_HIDDEN)
        tags[recurrent[1]].add(CONSUMES_HIDDEN)
    tags[-1].add(PREDICTS_DISPARITY)
    kinds = ["Conv2D", "Linear", "Other", "ConvGRUGate"]
    nodes = [
        LayerNode(f"layer{k}", "DispHead" if k == n - 1 else str(rng.choice(kinds)),
                  widths[k], widths[k + 1], frozenset(tags[k]), int(rng.choice([1, 3, 5])))
        for k in range(n)
    ]
    edges = [Edge(f"layer{k}", f"layer{k + 1}") for k in range(n - 1)]
    if recurrent:
        edges.append(Edge(f"layer{recurrent[0]}", f"layer{recurrent[1]}", True))
    return build_dependency_graph(nodes, edges)


def random_map(rng, channels=1):
    h, w = (int(x) for x in rng.integers(1, 40, size=2))
    shape = (h, w) if channels == 1 else (h, w, channels)
    arr = (rng.normal(size=shape) * 10 ** rng.uniform(-3, 3)).astype(np.float32)
    flat = arr.reshape(-1)
    flat[rng.random(flat.size) < 0.05] = np.nan
    return arr


def random_mask(rng):
    h, w = (int(x) for x in rng.integers(1, 40, size=2))
    return rng.random((h, w)) < 0.5
