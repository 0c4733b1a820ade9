"""Latency-budgeted block selection, recurrent-aware channel pruning and
normal-consistency pseudo-label curation for stereo networks."""

from .candidates import (CandidateGenerator, CostModel, LayerBlockSpec, LayerSpec, SearchGrid,
                         build_candidate_table, default_teacher_blocks,
                         enumerate_block_candidates, estimate_flops, estimate_latency)
from .exceptions import DncError, InfeasibleError, ParseError
from .geometry import CameraRig, NormalConsistencyFilter, PseudoLabelVerdict, curate_sample
from .metrics import bp_x, d1, epe, evaluate, feature_distill_mse
from .pruning import (TaylorChannelPruner, apply_plan, build_dependency_graph, demo_graph,
                      global_prune, taylor_importance)
from .search import (BlockwiseSearch, CandidateTable, SelectionPlan, brute_force,
                     pareto_sweep, solve_dp, solve_exact)

__version__ = "0.1.0"

__all__ = [
    "BlockwiseSearch", "CameraRig", "CandidateGenerator", "CandidateTable", "CostModel",
    "DncError", "InfeasibleError", "LayerBlockSpec", "LayerSpec", "NormalConsistencyFilter",
    "ParseError", "PseudoLabelVerdict", "SearchGrid", "SelectionPlan", "TaylorChannelPruner",
    "apply_plan", "bp_x", "brute_force", "build_candidate_table", "build_dependency_graph",
    "curate_sample", "d1", "default_teacher_blocks", "demo_graph", "enumerate_block_candidates",
    "epe", "estimate_flops", "estimate_latency", "evaluate", "feature_distill_mse",
    "global_prune", "pareto_sweep", "solve_dp", "solve_exact", "taylor_importance",
]
