"""``dncplan`` command-line entry point.

Every command reads an optional ``--config`` key=value file whose keys are
the command's option names (underscores); flags override the file.  Exit
codes: 0 success, 1 input or usage error, 2 infeasible or degenerate result.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass
from pathlib import Path


from . import io
from .candidates import CostModel, SearchGrid, build_candidate_table, default_teacher_blocks
from .exceptions import DncError, ParseError
from .geometry import (DEFAULT_ACCEPTANCE, DEFAULT_COS_THRESHOLD, DEFAULT_MIN_VALID,
                       curate_sample, subsample_manifest)
from .metrics import evaluate
from .pruning import (apply_plan, check_pruned_graph, demo_graph, demo_tensors,
                      global_prune, taylor_importance)
from .search import (DEFAULT_RESOLUTION, SOLVERS, InfeasibleError, infeasible_plan,
                     pareto_sweep)

EXIT_OK, EXIT_INPUT, EXIT_RESULT = 0, 1, 2
RESULT_CODES = {"INFEASIBLE", "DEGENERATE", "EMPTY_SPACE", "ALL_FIXED"}
CONFIG_VERSION = "1"


class UsageError(Exception):
    pass


def _bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _floats(text):
    items = [t for t in str(text).replace(",", " ").split() if t]
    return [float(t) for t in items]


def _ints(text):
    return [int(t) for t in str(text).replace(",", " ").split() if t]


def _strs(text):
    return [t for t in str(text).replace(",", " ").split() if t]


def _seed(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise ValueError(f"seed must fit in 64 unsigned bits, got {v}")
    return v


@dataclass(frozen=True)
class Option:
    name: str
    parse: object
    default: object = None
    help: str = ""
    required: bool = False


SEED = Option("seed", _seed, None, "64-bit seed (fallback: $DNC_SEED, then 0)")

OPTIONS = {
    "generate": [
        Option("out", Path, None, "candidate table to write", True),
        Option("grid", Path, None, "search grid file (key=value); default grid if omitted"),
        Option("limit", int, 200, "candidates kept per block"),
        SEED,
        Option("include_identity", _bool, False, "add the teacher block as a zero-cost candidate"),
        Option("dm_scale", float, 2.0, "synthetic delta-metric scale"),
        Option("dm_noise", float, 0.05, "synthetic delta-metric noise std"),
        Option("metric_name", str, "BP-2", "metric recorded in the table header"),
        Option("flops_per_ms", float, 1e10, "cost-model throughput"),
        Option("bandwidth_penalty", float, 1.5, "latency factor for Deconv3D and excitation"),
        Option("token_stride", _ints, [1, 4, 4], "transformer token stride (D,H,W)"),
    ],
    "search": [
        Option("table", Path, None, "candidate table", True),
        Option("budgets", _floats, None, "runtime budgets, comma separated", True),
        Option("out_dir", Path, None, "directory for plan files", True),
        Option("method", str, "bnb", f"solver: {', '.join(SOLVERS)}"),
        Option("resolution", float, DEFAULT_RESOLUTION, "time resolution of the dp solver"),
    ],
    "sweep": [
        Option("table", Path, None, "candidate table", True),
        Option("budgets", _floats, None, "ascending runtime budgets, comma separated", True),
        Option("out", Path, None, "front TSV to write", True),
        Option("method", str, "bnb", f"solver: {', '.join(SOLVERS)}"),
        Option("resolution", float, DEFAULT_RESOLUTION, "time resolution of the dp solver"),
    ],
    "prune": [
        Option("out", Path, None, "prune plan to write", True),
        Option("ratio", float, 0.5, "fraction of prunable channels to remove, in (0, 1)"),
        Option("graph", Path, None, "dependency graph file"),
        Option("tensors", Path, None, "tensor manifest"),
        Option("demo", _bool, False, "use the bundled demo graph and tensors"),
        SEED,
        Option("aggregate", str, "sum", "group score aggregation: sum or mean"),
        Option("squared", _bool, True, "score (w*g)^2 instead of |w*g|"),
    ],
    "curate": [
        Option("manifest", Path, None, "file listing one sample directory per line", True),
        Option("out", Path, None, "verdict report to write", True),
        Option("rig", Path, None, "default rig file for samples without rig.txt"),
        Option("cos_threshold", float, DEFAULT_COS_THRESHOLD, "per-pixel cosine threshold"),
        Option("acceptance_fraction", float, DEFAULT_ACCEPTANCE, "fraction needed to accept"),
        Option("min_valid_pixels", int, DEFAULT_MIN_VALID, "fewer comparable pixels is degenerate"),
        Option("stride", int, 1, "keep every stride-th manifest entry"),
        Option("label_dir", Path, None, "write final labels and masks of accepted samples here"),
    ],
    "eval": [
        Option("pred", Path, None, "predicted disparity (PFM)", True),
        Option("gt", Path, None, "ground-truth disparity (PFM)", True),
        Option("mask", Path, None, "evaluation mask (PGM); default: finite positive gt"),
        Option("header", _bool, False, "print a header row first"),
    ],
}

HELP = {
    "generate": "build a candidate table from the default teacher and a grid",
    "search": "solve one selection plan per budget",
    "sweep": "trace the accuracy/runtime front over ascending budgets",
    "prune": "rank channels by Taylor importance and plan a global prune",
    "curate": "accept or reject stereo pseudo-labels by normal consistency",
    "eval": "print BP-1, BP-2, BP-3, D1 and EPE",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="dncplan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, options in OPTIONS.items():
        p = sub.add_parser(cmd, help=HELP[cmd], description=HELP[cmd])
        p.add_argument("--config", type=Path, help="key=value file; flags take precedence")
        for opt in options:
            flag = "--" + opt.name.replace("_", "-")
            default = "" if opt.default is None else f" (default: {_show(opt.default)})"
            if opt.parse is _bool:
                p.add_argument(flag, nargs="?", const="1", default=None, metavar="BOOL",
                               help=opt.help + default)
            else:
                p.add_argument(flag, default=None, help=opt.help + default)
    return parser


def _show(v):
    return ",".join(str(x) for x in v) if isinstance(v, list) else v


def resolve_config(command, args):
    """Merge defaults, the config file and flags into one dict."""
    options = OPTIONS[command]
    raw = {}
    if args.config is not None:
        raw = io.parse_key_values(args.config, {o.name for o in options} | {"version"})
        version = raw.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ParseError(f"unsupported config version {version!r}", args.config)
    for opt in options:
        value = getattr(args, opt.name)
        if value is not None:
            raw[opt.name] = value
    if "seed" not in raw and any(o.name == "seed" for o in options):
        raw["seed"] = os.environ.get("DNC_SEED", "0")
    config = {}
    for opt in options:
        if opt.name in raw:
            try:
                config[opt.name] = opt.parse(raw[opt.name])
            except ValueError as err:
                raise UsageError(f"--{opt.name.replace('_', '-')}: {err}") from None
        elif opt.required:
            raise UsageError(f"missing required option --{opt.name.replace('_', '-')}")
        else:
            config[opt.name] = opt.default
    return config


# -- commands ----------------------------------------------------------------

def read_grid(path):
    kv = io.parse_key_values(path, {"kinds", "channel_multipliers", "max_layers",
                                    "kernel_sizes", "heads", "ffn_dims"})
    fields = {}
    try:
        if "kinds" in kv:
            fields["kinds"] = tuple(_strs(kv["kinds"]))
        if "channel_multipliers" in kv:
            fields["channel_multipliers"] = tuple(_floats(kv["channel_multipliers"]))
        if "max_layers" in kv:
            fields["max_layers"] = int(kv["max_layers"])
        for key in ("kernel_sizes", "heads", "ffn_dims"):
            if key in kv:
                fields[key] = tuple(_ints(kv[key]))
        return SearchGrid(**fields)
    except ValueError as err:
        raise ParseError(str(err), path) from None


def cmd_generate(cfg, out=sys.stdout):
    grid = read_grid(cfg["grid"]) if cfg["grid"] else SearchGrid()
    if cfg["limit"] < 1:
        raise UsageError("--limit must be at least 1")
    model = CostModel(cfg["flops_per_ms"], cfg["bandwidth_penalty"], tuple(cfg["token_stride"]))
    table = build_candidate_table(
        default_teacher_blocks(), grid, model, cfg["limit"], cfg["seed"],
        cfg["include_identity"], dm_scale=cfg["dm_scale"], dm_noise=cfg["dm_noise"],
        metric_name=cfg["metric_name"],
    )
    io.write_table(cfg["out"], table)
    print(f"wrote {cfg['out']}: {table.n_blocks} blocks, sizes {list(table.sizes)}", file=out)
    return EXIT_OK


def _solve_kwargs(cfg):
    if cfg["method"] not in SOLVERS:
        raise UsageError(f"unknown method {cfg['method']!r}; choose from {list(SOLVERS)}")
    return {"resolution": cfg["resolution"]} if cfg["method"] == "dp" else {}


def _summary_row(plan):
    if not plan.feasible:
        return f"{plan.budget!r}\tnan\t{plan.total_delta_time!r}\tINFEASIBLE"
    status = "optimal" if plan.optimal else "feasible"
    return f"{plan.budget!r}\t{plan.objective!r}\t{plan.total_delta_time!r}\t{status}"


def cmd_search(cfg, out=sys.stdout):
    if not cfg["budgets"]:
        raise UsageError("--budgets must list at least one budget")
    kwargs = _solve_kwargs(cfg)
    table = io.read_table(cfg["table"])
    solver = SOLVERS[cfg["method"]]
    out_dir = cfg["out_dir"]
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = ["#budget\tobjective\ttotal_dt\tstatus"]
    code = EXIT_OK
    for i, budget in enumerate(cfg["budgets"]):
        try:
            plan = solver(table, budget, **kwargs)
        except InfeasibleError as err:
            plan = infeasible_plan(err, budget, cfg["method"])
            code = EXIT_RESULT
        io.write_plan(out_dir / f"plan_{i:03d}.txt", plan)
        rows.append(_summary_row(plan))
    summary = "\n".join(rows) + "\n"
    io.atomic_write(out_dir / "summary.tsv", summary)
    out.write(summary)
    return code


def cmd_sweep(cfg, out=sys.stdout):
    if not cfg["budgets"]:
        raise UsageError("--budgets must list at least one budget")
    kwargs = _solve_kwargs(cfg)
    table = io.read_table(cfg["table"])
    try:
        plans = pareto_sweep(table, cfg["budgets"], cfg["method"], **kwargs)
    except ValueError as err:
        raise UsageError(str(err)) from None
    rows = ["#budget\tobjective\ttotal_dt\tstatus\tchoices"]
    for plan in plans:
        rows.append(_summary_row(plan) + "\t" + ",".join(plan.choices))
    text = "\n".join(rows) + "\n"
    io.atomic_write(cfg["out"], text)
    out.write(text)
    return EXIT_OK


def cmd_prune(cfg, out=sys.stdout):
    if not 0.0 < cfg["ratio"] < 1.0:
        raise UsageError(f"--ratio must lie in (0, 1), got {cfg['ratio']}")
    if cfg["aggregate"] not in ("sum", "mean"):
        raise UsageError("--aggregate must be sum or mean")
    if cfg["demo"]:
        graph = demo_graph()
        tensors = demo_tensors(graph, seed=cfg["seed"])
    else:
        if cfg["graph"] is None or cfg["tensors"] is None:
            raise UsageError("prune needs --graph and --tensors, or --demo")
        graph = io.read_graph(cfg["graph"])
        tensors = io.read_tensors(cfg["tensors"])
    importance = taylor_importance(graph, tensors, cfg["aggregate"], cfg["squared"])
    plan = global_prune(importance, graph, cfg["ratio"])
    pruned = apply_plan(graph, plan)
    problems = check_pruned_graph(graph, pruned)
    report = [
        f"valid={int(not problems)}",
        f"parameters_before={graph.parameter_count()}",
        f"parameters_after={pruned.parameter_count()}",
        f"flops_before={graph.estimate_flops()}",
        f"flops_after={pruned.estimate_flops()}",
    ] + [f"problem={p}" for p in problems]
    io.write_prune_plan(cfg["out"], plan, report)
    print(f"ratio={plan.ratio!r}\tremoved={plan.removed_channels}/{plan.prunable_channels}"
          f"\tchannel_fraction={plan.channel_fraction:.6f}"
          f"\tparameter_fraction={plan.parameter_fraction:.6f}", file=out)
    return EXIT_OK


def read_manifest(path):
    path = Path(path)
    entries = []
    for raw in path.read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            entries.append(line)
    return [(e, path.parent / e) for e in entries]


def cmd_curate(cfg, out=sys.stdout):
    if cfg["stride"] < 1:
        raise UsageError("--stride must be at least 1")
    if not -1.0 <= cfg["cos_threshold"] <= 1.0:
        raise UsageError("--cos-threshold must lie in [-1, 1]")
    default_rig = io.read_rig(cfg["rig"]) if cfg["rig"] else None
    samples = subsample_manifest(read_manifest(cfg["manifest"]), cfg["stride"])
    rows = []
    for name, directory in samples:
        try:
            disp, mono, sky, rig = io.load_sample(directory, default_rig)
            verdict = curate_sample(disp, mono, rig, sky, cfg["cos_threshold"],
                                    cfg["acceptance_fraction"], cfg["min_valid_pixels"])
        except (DncError, OSError, ValueError) as err:
            code = getattr(err, "code", None) or type(err).__name__
            rows.append((name, f"ERROR:{code}", float("nan"), cfg["cos_threshold"]))
            continue
        rows.append((name, bool(verdict.accepted), verdict.agreement_fraction,
                     cfg["cos_threshold"]))
        if cfg["label_dir"] is not None and verdict.accepted:
            target = cfg["label_dir"] / Path(name).name
            io.write_pfm(target / "label.pfm", verdict.final_label)
            io.write_pgm(target / "consistency.pgm", verdict.consistency_mask)
    text = io.dumps_verdicts(rows)
    io.atomic_write(cfg["out"], text)
    out.write(text.splitlines()[-1] + "\n")
    return EXIT_OK


def cmd_eval(cfg, out=sys.stdout):
    pred = io.read_pfm(cfg["pred"])
    gt = io.read_pfm(cfg["gt"])
    mask = io.read_pgm(cfg["mask"]) if cfg["mask"] else None
    if pred.ndim != 2 or gt.ndim != 2:
        raise UsageError("eval expects single-channel disparity maps")
    scores = evaluate(pred, gt, mask)
    if cfg["header"]:
        print("\t".join(scores), file=out)
    print("\t".join(repr(float(v)) for v in scores.values()), file=out)
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "search": cmd_search,
    "sweep": cmd_sweep,
    "prune": cmd_prune,
    "curate": cmd_curate,
    "eval": cmd_eval,
}


def main(argv=None, out=None, err=None):
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args.command, args)
        return COMMANDS[args.command](cfg, out)
    except UsageError as e:
        print(f"dncplan: usage error: {e}", file=err)
        return EXIT_INPUT
    except DncError as e:
        print(f"dncplan: {e}", file=err)
        return EXIT_RESULT if e.code in RESULT_CODES else EXIT_INPUT
    except FileNotFoundError as e:
        print(f"dncplan: file not found: {e.filename}", file=err)
        return EXIT_INPUT
    except (OSError, ValueError) as e:
        print(f"dncplan: error: {e}", file=err)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
