"""Structured channel pruning of a recurrent refinement module.

The network is described abstractly as layers with input/output channel
widths and directed edges.  Every ``(layer, side)`` pair is a node of a
union-find structure; edges tie a producer's output channels to a consumer's
input channels, and recurrent edges tie the hidden-state producer to the
hidden-state consumer of the next iteration.  The resulting partition is the
set of :class:`ChannelGroup` objects that must be pruned jointly.
"""

from __future__ import annotations

import graphlib
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import (
    AllFixedError,
    DimMismatchError,
    GraphCycleError,
    InvalidPlanError,
    MissingTagError,
    MissingTensorError,
    ShapeMismatchError,
)

NODE_KINDS = ("Conv2D", "ConvGRUGate", "Linear", "MotionEncoder", "DispHead", "MaskHead",
              "Other")
CONSUMES_HIDDEN = "consumes_hidden"
PRODUCES_HIDDEN = "produces_hidden"
CONSUMES_VOLUME = "consumes_volume_feature"
PREDICTS_DISPARITY = "predicts_disparity"
PREDICTS_MASK = "predicts_mask"
ROLE_TAGS = frozenset(
    {CONSUMES_HIDDEN, PRODUCES_HIDDEN, CONSUMES_VOLUME, PREDICTS_DISPARITY, PREDICTS_MASK}
)
IN, OUT = "in", "out"


@dataclass(frozen=True)
class LayerNode:
    id: str
    kind: str
    in_channels: int
    out_channels: int
    role_tags: frozenset = frozenset()
    kernel: int = 1

    def __post_init__(self):
        object.__setattr__(self, "role_tags", frozenset(self.role_tags))
        if not self.id or any(ch in self.id for ch in "\t\n,#"):
            raise ValueError(f"invalid layer id {self.id!r}")
        if self.kind not in NODE_KINDS:
            raise ValueError(f"unknown node kind {self.kind!r}")
        if self.in_channels <= 0 or self.out_channels <= 0 or self.kernel <= 0:
            raise ValueError(f"layer {self.id!r}: channels and kernel must be positive")
        unknown = self.role_tags - ROLE_TAGS
        if unknown:
            raise ValueError(f"layer {self.id!r}: unknown role tags {sorted(unknown)}")

    def width(self, side):
        return self.in_channels if side == IN else self.out_channels

    @property
    def n_params(self):
        return self.in_channels * self.out_channels * self.kernel * self.kernel


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    recurrent: bool = False


@dataclass(frozen=True)
class ChannelGroup:
    group_id: str
    members: tuple
    width: int
    fixed: bool


@dataclass(frozen=True)
class LayerGraph:
    nodes: tuple
    edges: tuple
    groups: tuple
    _index: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        index = {}
        for g in self.groups:
            for member in g.members:
                index[member] = g
        object.__setattr__(self, "_index", index)

    def node(self, layer_id):
        for n in self.nodes:
            if n.id == layer_id:
                return n
        raise KeyError(layer_id)

    def group_of(self, layer_id, side):
        return self._index[(layer_id, side)]

    def group(self, group_id):
        for g in self.groups:
            if g.group_id == group_id:
                return g
        raise KeyError(group_id)

    @property
    def prunable_groups(self):
        return [g for g in self.groups if not g.fixed]

    @property
    def prunable_channels(self):
        return sum(g.width for g in self.prunable_groups)

    def parameter_count(self):
        return sum(n.n_params for n in self.nodes)

    def prunable_parameter_count(self):
        """Parameters of layers touching at least one prunable group."""
        return sum(
            n.n_params
            for n in self.nodes
            if not (self.group_of(n.id, IN).fixed and self.group_of(n.id, OUT).fixed)
        )

    def estimate_flops(self, height=1, width=1):
        """Dense-convolution FLOPs at a given feature resolution."""
        return sum(2 * n.n_params * height * width for n in self.nodes)


class _UnionFind:
    def __init__(self, keys):
        self.parent = {k: k for k in keys}

    def find(self, k):
        root = k
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[k] != root:
            self.parent[k], k = root, self.parent[k]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def build_dependency_graph(nodes, edges):
    """Group coupled channel dimensions and mark the fixed ones.

    Plain edges merge producer-out with consumer-in.  Recurrent edges must run
    from a ``produces_hidden`` layer to a ``consumes_hidden`` layer and merge
    those sides too.  Groups holding a disparity-head or mask-head output, or a
    volume-feature input, are fixed.
    """
    nodes = tuple(nodes)
    edges = tuple(e if isinstance(e, Edge) else Edge(*e) for e in edges)
    position = {}
    for pos, n in enumerate(nodes):
        if n.id in position:
            raise ValueError(f"duplicate layer id {n.id!r}")
        position[n.id] = pos
    by_id = {n.id: n for n in nodes}
    for e in edges:
        for end in (e.src, e.dst):
            if end not in by_id:
                raise ValueError(f"edge {e.src}->{e.dst} references unknown layer {end!r}")

    sorter = graphlib.TopologicalSorter({n.id: set() for n in nodes})
    for e in edges:
        if not e.recurrent:
            sorter.add(e.dst, e.src)
    try:
        tuple(sorter.static_order())
    except graphlib.CycleError as err:
        raise GraphCycleError(f"non-recurrent edges form a cycle: {err.args[1]}") from None

    def key(layer_id, side):
        return (position[layer_id], 0 if side == IN else 1)

    uf = _UnionFind([key(n.id, s) for n in nodes for s in (IN, OUT)])
    for e in edges:
        src, dst = by_id[e.src], by_id[e.dst]
        if e.recurrent:
            if PRODUCES_HIDDEN not in src.role_tags or CONSUMES_HIDDEN not in dst.role_tags:
                raise MissingTagError(
                    f"recurrent edge {e.src}->{e.dst} must run from a "
                    f"{PRODUCES_HIDDEN} layer to a {CONSUMES_HIDDEN} layer"
                )
        if src.out_channels != dst.in_channels:
            raise DimMismatchError(
                f"edge {e.src}->{e.dst}: {e.src} emits {src.out_channels} channels, "
                f"{e.dst} expects {dst.in_channels}"
            )
        uf.union(key(e.src, OUT), key(e.dst, IN))

    members = {}
    for n in nodes:
        for side in (IN, OUT):
            members.setdefault(uf.find(key(n.id, side)), []).append((n.id, side))

    groups = []
    for k, root in enumerate(sorted(members)):
        mem = tuple(sorted(members[root], key=lambda m: key(*m)))
        widths = {by_id[lid].width(side) for lid, side in mem}
        if len(widths) != 1:
            raise DimMismatchError(f"coupled channels {mem} disagree on width {sorted(widths)}")
        fixed = any(
            (side == OUT and by_id[lid].role_tags & {PREDICTS_DISPARITY, PREDICTS_MASK})
            or (side == IN and CONSUMES_VOLUME in by_id[lid].role_tags)
            for lid, side in mem
        )
        groups.append(ChannelGroup(f"g{k}", mem, widths.pop(), fixed))
    return LayerGraph(nodes, edges, tuple(groups))


@dataclass(frozen=True)
class ImportanceTable:
    """Per-group channel scores, keyed by ``group_id``."""

    scores: dict

    @property
    def entries(self):
        return {
            (gid, idx): float(v)
            for gid, arr in self.scores.items()
            for idx, v in enumerate(arr)
        }


def _channel_terms(weight, grad, side, squared):
    prod = weight * grad
    term = prod * prod if squared else np.abs(prod)
    if side == IN:
        term = np.swapaxes(term, 0, 1)
    return term.reshape(term.shape[0], -1).sum(axis=1)


def _as_gradient(grads, shape, layer_id):
    if isinstance(grads, np.ndarray):
        arrays = [grads]
    else:
        arrays = [np.asarray(g, dtype=np.float64) for g in grads]
        if not arrays:
            raise ShapeMismatchError(f"layer {layer_id!r}: empty gradient list")
    for g in arrays:
        if g.shape != shape:
            raise ShapeMismatchError(
                f"layer {layer_id!r}: gradient shape {g.shape} != weight shape {shape}"
            )
    total = np.zeros(shape)
    for g in arrays:
        total = total + g
    return total


def taylor_importance(graph, tensors, aggregate="sum", squared=True):
    """First-order Taylor channel importance.

    ``tensors`` maps a layer id to ``(weights, gradients)``; ``weights`` has
    shape ``(out, in, ...)`` and ``gradients`` is one array of the same shape
    or a sequence of them (snapshots from several refinement iterations,
    summed first).  A channel's score in one layer is the sum of
    ``(w * g) ** 2`` over its slice; a group's score adds up its members.
    """
    if aggregate not in ("sum", "mean"):
        raise ValueError(f"aggregate must be 'sum' or 'mean', got {aggregate!r}")
    cache = {}

    def layer_arrays(layer_id):
        if layer_id not in cache:
            if layer_id not in tensors:
                raise MissingTensorError(f"no tensors for prunable layer {layer_id!r}")
            node = graph.node(layer_id)
            weight, grads = tensors[layer_id]
            weight = np.asarray(weight, dtype=np.float64)
            if weight.ndim < 2 or weight.shape[:2] != (node.out_channels, node.in_channels):
                raise ShapeMismatchError(
                    f"layer {layer_id!r}: weight shape {weight.shape} does not start "
                    f"with (out={node.out_channels}, in={node.in_channels})"
                )
            cache[layer_id] = (weight, _as_gradient(grads, weight.shape, layer_id))
        return cache[layer_id]

    scores = {}
    for g in graph.prunable_groups:
        per_member = []
        for lid, side in g.members:
            weight, grad = layer_arrays(lid)
            per_member.append(_channel_terms(weight, grad, side, squared))
        stack = np.stack(per_member)
        # fsum makes the result independent of member order
        total = np.array([math.fsum(col) for col in stack.T])
        if aggregate == "mean":
            total = total / len(per_member)
        scores[g.group_id] = total
    return ImportanceTable(scores)


@dataclass(frozen=True)
class PrunePlan:
    ratio: float
    removals: dict
    widths: dict
    prunable_channels: int = 0
    removed_channels: int = 0
    parameter_fraction: float = 0.0

    @property
    def channel_fraction(self):
        if not self.prunable_channels:
            return 0.0
        return self.removed_channels / self.prunable_channels


def _check_ratio(ratio):
    ratio = float(ratio)
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"pruning ratio must lie in (0, 1), got {ratio}")
    return ratio


def global_prune(importance, graph, ratio):
    """Remove the globally least important ``floor(ratio * P)`` channels.

    ``P`` counts channels over all prunable groups.  Candidates are ranked by
    score, then group order, then channel index; a removal that would leave a
    group empty is skipped and the next channel is taken instead.
    """
    ratio = _check_ratio(ratio)
    groups = graph.prunable_groups
    total = sum(g.width for g in groups)
    if total == 0:
        raise AllFixedError("the graph has no prunable channels")
    target = int(math.floor(ratio * total + 1e-9))
    ranked = []
    for order, g in enumerate(groups):
        scores = np.asarray(importance.scores[g.group_id], dtype=np.float64)
        if scores.shape != (g.width,):
            raise ShapeMismatchError(
                f"group {g.group_id} has width {g.width} but {scores.shape} scores"
            )
        ranked.extend((float(s), order, idx) for idx, s in enumerate(scores))
    ranked.sort()

    remaining = {g.group_id: g.width for g in groups}
    removals = {g.group_id: [] for g in groups}
    removed = 0
    for _, order, idx in ranked:
        if removed >= target:
            break
        gid = groups[order].group_id
        if remaining[gid] <= 1:
            continue
        removals[gid].append(idx)
        remaining[gid] -= 1
        removed += 1
    removals = {gid: tuple(sorted(r)) for gid, r in removals.items() if r}
    before = graph.parameter_count()
    after = _resized(graph, remaining).parameter_count() if removed else before
    return PrunePlan(ratio, removals, dict(remaining), total, removed,
                     (before - after) / before if before else 0.0)


def _resized(graph, widths):
    new_nodes = []
    for n in graph.nodes:
        gin, gout = graph.group_of(n.id, IN), graph.group_of(n.id, OUT)
        new_nodes.append(
            LayerNode(n.id, n.kind, widths.get(gin.group_id, gin.width),
                      widths.get(gout.group_id, gout.width), n.role_tags, n.kernel)
        )
    return build_dependency_graph(new_nodes, graph.edges)


def apply_plan(graph, plan):
    """Materialize ``plan`` and re-validate the pruned graph."""
    widths = {}
    for gid, indices in plan.removals.items():
        try:
            g = graph.group(gid)
        except KeyError:
            raise InvalidPlanError(f"plan references unknown group {gid!r}") from None
        if g.fixed:
            raise InvalidPlanError(f"plan removes channels from fixed group {gid}")
        idx = list(indices)
        if len(set(idx)) != len(idx) or any(not 0 <= i < g.width for i in idx):
            raise InvalidPlanError(f"group {gid}: invalid channel indices {idx}")
        if len(idx) >= g.width:
            raise InvalidPlanError(f"plan would empty group {gid}")
        widths[gid] = g.width - len(idx)
    if not widths:
        return graph
    try:
        pruned = _resized(graph, widths)
    except (DimMismatchError, ValueError) as err:
        raise InvalidPlanError(f"pruned graph is inconsistent: {err}") from err
    problems = check_pruned_graph(graph, pruned)
    if problems:
        raise InvalidPlanError("; ".join(problems))
    return pruned


def check_pruned_graph(original, pruned):
    """List invariant violations between a graph and its pruned version."""
    problems = []
    if [g.members for g in original.groups] != [g.members for g in pruned.groups]:
        problems.append("group structure changed")
    for g in original.groups:
        if g.fixed:
            for lid, side in g.members:
                if pruned.node(lid).width(side) != g.width:
                    problems.append(f"fixed width of {lid}.{side} changed")
    for e in pruned.edges:
        if e.recurrent:
            src, dst = pruned.node(e.src), pruned.node(e.dst)
            if src.out_channels != dst.in_channels:
                problems.append(f"hidden width mismatch {e.src}->{e.dst}")
    return problems


def kept_channels(graph, plan):
    """Surviving channel indices per group."""
    out = {}
    for g in graph.groups:
        drop = set(plan.removals.get(g.group_id, ()))
        out[g.group_id] = np.array([i for i in range(g.width) if i not in drop], dtype=int)
    return out


def slice_tensors(graph, plan, tensors):
    """Cut weight arrays down to the channels ``plan`` keeps."""
    keep = kept_channels(graph, plan)
    out = {}
    for lid, (weight, grads) in tensors.items():
        w = np.asarray(weight)
        w = w[keep[graph.group_of(lid, OUT).group_id]]
        w = w[:, keep[graph.group_of(lid, IN).group_id]]
        out[lid] = w
    return out


def retrain_loss(disparities, ground_truth, latents=(), gamma=0.9, lam=0.1, mask=None):
    """Retraining objective for the pruned refinement module.

    ``sum_k gamma**(K-k) * mean|d_k - gt| + lam * sum_i mean((x_i - xbar_i)**2)``
    with ``k = 1..K``; the disparity term averages over ``mask`` pixels only.
    """
    gt = np.asarray(ground_truth, dtype=np.float64)
    if mask is None:
        mask = np.ones(gt.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != gt.shape:
        raise ShapeMismatchError(f"mask shape {mask.shape} != ground truth {gt.shape}")
    disparities = [np.asarray(d, dtype=np.float64) for d in disparities]
    if not disparities:
        raise ValueError("need at least one refined disparity map")
    k_total = len(disparities)
    loss = 0.0
    if mask.any():
        for k, d in enumerate(disparities, start=1):
            if d.shape != gt.shape:
                raise ShapeMismatchError(f"disparity {k} shape {d.shape} != {gt.shape}")
            loss += gamma ** (k_total - k) * float(np.abs(d - gt)[mask].mean())
    for i, (x, xbar) in enumerate(latents):
        x, xbar = np.asarray(x, dtype=np.float64), np.asarray(xbar, dtype=np.float64)
        if x.shape != xbar.shape:
            raise ShapeMismatchError(f"latent pair {i}: {x.shape} != {xbar.shape}")
        if lam:
            loss += lam * float(np.mean((x - xbar) ** 2))
    return loss


def minimal_gru_graph(hidden=8):
    """Smallest refinement graph: motion encoder, one GRU gate, two heads."""
    nodes = [
        LayerNode("motion_encoder", "MotionEncoder", 4, hidden, {CONSUMES_VOLUME}),
        LayerNode("gru_gate", "ConvGRUGate", hidden, hidden,
                  {CONSUMES_HIDDEN, PRODUCES_HIDDEN}, kernel=3),
        LayerNode("disp_head", "DispHead", hidden, 1, {PREDICTS_DISPARITY}, kernel=3),
        LayerNode("mask_head", "MaskHead", hidden, 9, {PREDICTS_MASK}),
    ]
    edges = [
        Edge("motion_encoder", "gru_gate"),
        Edge("gru_gate", "gru_gate", True),
        Edge("gru_gate", "disp_head"),
        Edge("gru_gate", "mask_head"),
    ]
    return build_dependency_graph(nodes, edges)


def demo_graph():
    """The bundled refinement-module graph used by the CLI demo and acceptance runs."""
    nodes = [
        LayerNode("menc_cost", "MotionEncoder", 64, 96, {CONSUMES_VOLUME}),
        LayerNode("menc_fuse", "Conv2D", 96, 128, kernel=3),
        LayerNode("gru_z", "ConvGRUGate", 128, 128, {CONSUMES_HIDDEN}, kernel=3),
        LayerNode("gru_q", "ConvGRUGate", 128, 128, {PRODUCES_HIDDEN}, kernel=3),
        LayerNode("disp_conv", "Conv2D", 128, 64, kernel=3),
        LayerNode("disp_head", "DispHead", 64, 1, {PREDICTS_DISPARITY}, kernel=3),
        LayerNode("mask_conv", "Conv2D", 128, 96, kernel=3),
        LayerNode("mask_head", "MaskHead", 96, 36, {PREDICTS_MASK}),
    ]
    edges = [
        Edge("menc_cost", "menc_fuse"),
        Edge("menc_fuse", "gru_z"),
        Edge("gru_z", "gru_q"),
        Edge("gru_q", "gru_z", True),
        Edge("gru_q", "disp_conv"),
        Edge("disp_conv", "disp_head"),
        Edge("gru_q", "mask_conv"),
        Edge("mask_conv", "mask_head"),
    ]
    return build_dependency_graph(nodes, edges)


def demo_tensors(graph, seed=0, iterations=8):
    """Synthetic weights plus per-iteration gradient snapshots for every layer.

    Channel magnitudes vary smoothly across output channels so the importance
    ranking is not uniform.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for n in graph.nodes:
        shape = (n.out_channels, n.in_channels, n.kernel, n.kernel)
        scale = rng.uniform(0.2, 1.0, size=(n.out_channels, 1, 1, 1))
        weight = (rng.standard_normal(shape) * scale).astype(np.float32)
        grads = [(rng.standard_normal(shape) * 0.1).astype(np.float32)
                 for _ in range(iterations)]
        tensors[n.id] = (weight, grads)
    return tensors


class TaylorChannelPruner(BaseEstimator):
    """Estimator front end: ``fit`` scores and plans, ``transform`` applies.

    Parameters
    ----------
    ratio : float in (0, 1)
    aggregate : {"sum", "mean"}
        How member-layer scores combine into a group score.
    squared : bool
        Score ``(w*g)**2`` (default) or ``|w*g|``.
    """

    def __init__(self, ratio=0.5, aggregate="sum", squared=True):
        self.ratio = ratio
        self.aggregate = aggregate
        self.squared = squared

    def fit(self, graph, tensors):
        self.importance_ = taylor_importance(graph, tensors, self.aggregate, self.squared)
        self.plan_ = global_prune(self.importance_, graph, self.ratio)
        self.graph_ = graph
        return self

    def transform(self, graph=None):
        from sklearn.utils.validation import check_is_fitted

        check_is_fitted(self)
        return apply_plan(graph if graph is not None else self.graph_, self.plan_)

    def fit_transform(self, graph, tensors):
        return self.fit(graph, tensors).transform(graph)
