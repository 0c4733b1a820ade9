import numpy as np
import pytest

from dncplan.exceptions import (AllFixedError, DimMismatchError, GraphCycleError,
                                InvalidPlanError, MissingTagError, MissingTensorError,
                                ShapeMismatchError)
from dncplan.pruning import (CONSUMES_HIDDEN, CONSUMES_VOLUME, IN, OUT, PREDICTS_DISPARITY,
                             PRODUCES_HIDDEN, Edge, ImportanceTable, LayerNode, PrunePlan,
                             TaylorChannelPruner, apply_plan, build_dependency_graph,
                             demo_graph, demo_tensors, global_prune, minimal_gru_graph,
                             retrain_loss, taylor_importance)


def group_by_member(graph):
    return {frozenset(g.members): g for g in graph.groups}


def test_minimal_gru_groups():
    graph = minimal_gru_graph(hidden=8)
    groups = group_by_member(graph)
    hidden = graph.group_of("gru_gate", OUT)
    assert hidden is graph.group_of("gru_gate", IN)
    assert not hidden.fixed and hidden.width == 8
    assert graph.group_of("disp_head", OUT).fixed
    assert graph.group_of("mask_head", OUT).fixed
    assert graph.group_of("motion_encoder", IN).fixed
    assert len(groups) == 4
    assert [g.group_id for g in graph.prunable_groups] == [hidden.group_id]


def test_groups_partition_every_side():
    graph = demo_graph()
    seen = [m for g in graph.groups for m in g.members]
    assert len(seen) == len(set(seen)) == 2 * len(graph.nodes)


def test_independent_chains_pair_up():
    nodes = [
        LayerNode("a1", "Conv2D", 3, 8), LayerNode("a2", "DispHead", 8, 1, {PREDICTS_DISPARITY}),
        LayerNode("b1", "Conv2D", 3, 4), LayerNode("b2", "Conv2D", 4, 2),
    ]
    graph = build_dependency_graph(nodes, [Edge("a1", "a2"), Edge("b1", "b2")])
    assert len(graph.groups) == 6
    pair = graph.group_of("b1", OUT)
    assert set(pair.members) == {("b1", OUT), ("b2", IN)} and not pair.fixed
    assert [g.fixed for g in graph.groups].count(True) == 1


def test_hidden_width_mismatch():
    nodes = [
        LayerNode("z", "ConvGRUGate", 64, 64, {CONSUMES_HIDDEN}),
        LayerNode("q", "ConvGRUGate", 64, 96, {PRODUCES_HIDDEN}),
    ]
    with pytest.raises(DimMismatchError):
        build_dependency_graph(nodes, [Edge("z", "q"), Edge("q", "z", True)])


def test_cycle_and_missing_tag():
    nodes = [LayerNode("a", "Conv2D", 4, 4), LayerNode("b", "Conv2D", 4, 4)]
    with pytest.raises(GraphCycleError):
        build_dependency_graph(nodes, [Edge("a", "b"), Edge("b", "a")])
    with pytest.raises(MissingTagError):
        build_dependency_graph(nodes, [Edge("a", "b"), Edge("b", "a", True)])


def single_conv(cin=1, cout=1):
    return build_dependency_graph([LayerNode("c", "Conv2D", cin, cout)], [])


def test_taylor_single_weight():
    graph = single_conv()
    table = taylor_importance(graph, {"c": (np.array([[2.0]]), np.array([[3.0]]))})
    assert table.entries == {("g0", 0): 36.0, ("g1", 0): 36.0}


def test_taylor_zero_gradients():
    graph = demo_graph()
    tensors = {lid: (w, [np.zeros_like(w)]) for lid, (w, _) in demo_tensors(graph).items()}
    table = taylor_importance(graph, tensors)
    assert all(v == 0.0 for v in table.entries.values())


def test_taylor_group_sum_across_layers():
    nodes = [LayerNode("a", "Conv2D", 1, 2), LayerNode("b", "Conv2D", 2, 2)]
    graph = build_dependency_graph(nodes, [Edge("a", "b")])
    wa = np.array([[1.0], [2.0]])  # out-side scores of a: (1, 4)
    wb = np.array([[1.0, 0.0], [1.0, 0.0]])  # in-side scores of b: (2, 0)
    tensors = {"a": (wa, np.ones_like(wa)), "b": (wb, np.ones_like(wb))}
    scores = taylor_importance(graph, tensors).scores[graph.group_of("a", OUT).group_id]
    assert scores.tolist() == [3.0, 4.0]
    mean = taylor_importance(graph, tensors, aggregate="mean")
    assert mean.scores[graph.group_of("a", OUT).group_id].tolist() == [1.5, 2.0]
    absolute = taylor_importance(graph, {"a": (wa, -np.ones_like(wa)),
                                         "b": (wb, np.ones_like(wb))}, squared=False)
    assert absolute.scores[graph.group_of("a", OUT).group_id].tolist() == [3.0, 2.0]


def test_taylor_snapshots_are_summed_first():
    graph = demo_graph()
    tensors = demo_tensors(graph, iterations=3)
    summed = {lid: (w, sum(g[1:], g[0].astype(np.float64))) for lid, (w, g) in tensors.items()}
    a = taylor_importance(graph, tensors)
    b = taylor_importance(graph, summed)
    for gid in a.scores:
        np.testing.assert_allclose(a.scores[gid], b.scores[gid], rtol=1e-12)


def test_taylor_member_order_invariance():
    graph = demo_graph()
    tensors = demo_tensors(graph)
    flipped = build_dependency_graph(tuple(reversed(graph.nodes)), graph.edges)
    a = taylor_importance(graph, tensors)
    b = taylor_importance(flipped, tensors)
    by_members = {frozenset(g.members): b.scores[g.group_id] for g in flipped.prunable_groups}
    for g in graph.prunable_groups:
        assert a.scores[g.group_id].tolist() == by_members[frozenset(g.members)].tolist()


def test_taylor_errors():
    graph = single_conv(2, 3)
    with pytest.raises(MissingTensorError):
        taylor_importance(graph, {})
    with pytest.raises(ShapeMismatchError):
        taylor_importance(graph, {"c": (np.ones((2, 3)), np.ones((2, 3)))})
    with pytest.raises(ShapeMismatchError):
        taylor_importance(graph, {"c": (np.ones((3, 2)), np.ones((3, 3)))})


def test_prune_ratio_rounding_down_to_nothing():
    graph = minimal_gru_graph(hidden=8)
    gid = graph.prunable_groups[0].group_id
    plan = global_prune(ImportanceTable({gid: np.arange(8.0)}), graph, 0.1)
    assert plan.removals == {} and plan.widths == {gid: 8}
    assert apply_plan(graph, plan) is graph


def test_prune_lowest_scores():
    graph = minimal_gru_graph(hidden=10)
    gid = graph.prunable_groups[0].group_id
    plan = global_prune(ImportanceTable({gid: np.arange(10.0)[::-1].copy()}), graph, 0.3)
    assert plan.removals == {gid: (7, 8, 9)}
    plan = global_prune(ImportanceTable({gid: np.arange(10.0)}), graph, 0.3)
    assert plan.removals == {gid: (0, 1, 2)}
    assert plan.channel_fraction == 0.3


def test_prune_never_empties_a_group():
    nodes = [LayerNode("a", "Conv2D", 2, 2), LayerNode("b", "Conv2D", 2, 8)]
    graph = build_dependency_graph(nodes, [Edge("a", "b")])
    scores = {g.group_id: np.zeros(g.width) for g in graph.prunable_groups}
    scores[graph.group_of("b", OUT).group_id] += 1.0
    # 12 channels, target 6: one from each zero-score pair, then four from b.out
    plan = global_prune(ImportanceTable(scores), graph, 0.5)
    assert plan.removed_channels == 6
    assert min(plan.widths.values()) >= 1
    pruned = apply_plan(graph, plan)
    assert pruned.node("a").in_channels == 1 and pruned.node("b").out_channels == 4


def test_all_fixed_graph():
    node = LayerNode("h", "DispHead", 4, 1, {PREDICTS_DISPARITY, CONSUMES_VOLUME})
    graph = build_dependency_graph([node], [])
    with pytest.raises(AllFixedError):
        global_prune(ImportanceTable({}), graph, 0.5)


def test_apply_plan_joint_hidden_update():
    graph = minimal_gru_graph(hidden=8)
    gid = graph.group_of("gru_gate", OUT).group_id
    plan = PrunePlan(0.25, {gid: (1, 5)}, {gid: 6})
    pruned = apply_plan(graph, plan)
    assert pruned.node("gru_gate").out_channels == 6
    assert pruned.node("gru_gate").in_channels == 6
    assert pruned.node("disp_head").out_channels == 1
    assert pruned.node("motion_encoder").in_channels == 4


def test_apply_plan_rejects_bad_plans():
    graph = minimal_gru_graph(hidden=8)
    fixed = graph.group_of("disp_head", OUT).group_id
    with pytest.raises(InvalidPlanError):
        apply_plan(graph, PrunePlan(0.5, {fixed: (0,)}, {}))
    gid = graph.prunable_groups[0].group_id
    with pytest.raises(InvalidPlanError):
        apply_plan(graph, PrunePlan(0.5, {gid: tuple(range(8))}, {}))
    with pytest.raises(InvalidPlanError):
        apply_plan(graph, PrunePlan(0.5, {gid: (9,)}, {}))
    with pytest.raises(InvalidPlanError):
        apply_plan(graph, PrunePlan(0.5, {"g99": (0,)}, {}))


def test_ratio_bounds():
    graph = minimal_gru_graph()
    table = ImportanceTable({graph.prunable_groups[0].group_id: np.zeros(8)})
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            global_prune(table, graph, bad)


def test_demo_sweep_counts():
    graph = demo_graph()
    assert graph.prunable_channels == 512
    table = taylor_importance(graph, demo_tensors(graph))
    removed = [global_prune(table, graph, a / 10).removed_channels for a in range(1, 10)]
    # floor(alpha * 512)
    assert removed == [51, 102, 153, 204, 256, 307, 358, 409, 460]


def test_retrain_loss_examples():
    gt = np.arange(12.0).reshape(3, 4)
    assert retrain_loss([gt], gt, [(np.ones(3), np.ones(3))]) == 0.0
    assert retrain_loss([gt + 1.0, gt], gt) == pytest.approx(0.9, abs=1e-12)
    assert retrain_loss([gt], gt, [(np.zeros(4), np.ones(4))], lam=0.0) == 0.0
    assert retrain_loss([gt], gt, [(np.zeros(4), 2 * np.ones(4))]) == pytest.approx(0.4)
    mask = np.zeros_like(gt, dtype=bool)
    mask[0] = True
    bad = gt.copy()
    bad[1:] += 100.0
    assert retrain_loss([bad], gt, mask=mask) == 0.0
    with pytest.raises(ShapeMismatchError):
        retrain_loss([gt[:2]], gt)


def test_pruner_estimator():
    graph = demo_graph()
    est = TaylorChannelPruner(ratio=0.3)
    assert est.get_params() == {"aggregate": "sum", "ratio": 0.3, "squared": True}
    pruned = est.fit_transform(graph, demo_tensors(graph))
    assert est.plan_.removed_channels == 153
    assert pruned.prunable_channels == 512 - 153
