"""Readers and writers for every on-disk format.

Text formats are tab-separated, start with a ``#dnc-<kind> v1`` header line
and use further ``#`` lines for metadata.  Floats that must survive a round
trip bit-exactly are written with :func:`repr`.
"""

from __future__ import annotations

import os
import re
import tempfile
from pathlib import Path

import numpy as np

from .exceptions import DncError, ParseError
from .geometry import CameraRig
from .pruning import Edge, LayerNode, PrunePlan, build_dependency_graph
from .search import BlockCandidate, CandidateTable, SelectionPlan

TABLE_HEADER = "#dnc-candidates v1"
PLAN_HEADER = "#dnc-plan v1"
GRAPH_HEADER = "#dnc-graph v1"
TENSOR_HEADER = "#dnc-tensors v1"
PRUNE_HEADER = "#dnc-prune-plan v1"
VERDICT_HEADER = "#dnc-verdicts v1"
MAX_DECIMALS = 9


# -- generic helpers ---------------------------------------------------------

def atomic_write(path, data):
    """Write ``data`` (str or bytes) to a temp file and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": "\n"})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_decimal(value):
    """Shortest fixed-point string with at most 9 fractional digits.

    Values that need more digits are rounded to 9.
    """
    value = float(value)
    if not np.isfinite(value):
        raise ValueError(f"cannot write non-finite value {value}")
    for digits in range(MAX_DECIMALS + 1):
        text = f"{value:.{digits}f}"
        if float(text) == value:
            return text
    return f"{value:.{MAX_DECIMALS}f}"


_DECIMAL = re.compile(r"^[+-]?\d+(\.\d{1,9})?$")


def _parse_decimal(text, path, lineno):
    if not _DECIMAL.match(text):
        raise ParseError(f"expected decimal number, got {text!r}", path, lineno)
    return float(text)


def _lines(path):
    try:
        text = Path(path).read_text()
    except UnicodeDecodeError as err:
        raise ParseError(f"not a text file: {err}", path) from None
    return text.splitlines()


def _check_header(lines, header, path):
    if not lines or lines[0].strip() != header:
        raise ParseError(f"missing header {header!r}", path, 1)


def _footer_fields(line):
    """``#a=1 #b=2`` -> ``{"a": "1", "b": "2"}``."""
    out = {}
    for token in line.split():
        token = token.lstrip("#")
        if "=" in token:
            k, v = token.split("=", 1)
            out[k] = v
    return out


def parse_key_values(path, allowed=None):
    """Read ``key=value`` pairs separated by whitespace or newlines.

    ``#`` starts a comment.  Keys outside ``allowed`` raise :class:`ParseError`.
    """
    out = {}
    for lineno, raw in enumerate(_lines(path), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        for token in line.split():
            if "=" not in token:
                raise ParseError(f"expected key=value, got {token!r}", path, lineno)
            key, value = token.split("=", 1)
            if allowed is not None and key not in allowed:
                raise ParseError(f"unknown key {key!r}", path, lineno)
            if key in out:
                raise ParseError(f"duplicate key {key!r}", path, lineno)
            out[key] = value
    return out


# -- candidate tables and plans ----------------------------------------------

def dumps_table(table):
    lines = [TABLE_HEADER]
    for key in sorted(table.metadata):
        lines.append(f"#{key}={table.metadata[key]}")
    for block in table.blocks:
        for c in block:
            lines.append(
                f"{c.block_index}\t{c.candidate_id}\t"
                f"{format_decimal(c.delta_metric)}\t{format_decimal(c.delta_time)}"
            )
    return "\n".join(lines) + "\n"


def write_table(path, table):
    atomic_write(path, dumps_table(table))


def read_table(path):
    lines = _lines(path)
    _check_header(lines, TABLE_HEADER, path)
    metadata = {}
    blocks = {}
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.rstrip("\r")
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                k, v = body.split("=", 1)
                metadata[k.strip()] = v.strip()
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise ParseError(f"expected 4 tab-separated fields, got {len(fields)}",
                             path, lineno)
        try:
            idx = int(fields[0])
        except ValueError:
            raise ParseError(f"bad block index {fields[0]!r}", path, lineno) from None
        if idx < 1:
            raise ParseError(f"block index must be >= 1, got {idx}", path, lineno)
        dm = _parse_decimal(fields[2], path, lineno)
        dt = _parse_decimal(fields[3], path, lineno)
        try:
            cand = BlockCandidate(idx, fields[1], dm, dt)
        except ValueError as err:
            raise ParseError(str(err), path, lineno) from None
        blocks.setdefault(idx, []).append((lineno, cand))
    if not blocks:
        raise ParseError("table has no candidates", path)
    n = max(blocks)
    missing = [i for i in range(1, n + 1) if i not in blocks]
    if missing:
        raise ParseError(f"blocks {missing} have no candidates", path)
    try:
        return CandidateTable([[c for _, c in blocks[i]] for i in range(1, n + 1)],
                              metadata=metadata)
    except ValueError as err:
        raise ParseError(str(err), path) from None


def dumps_plan(plan):
    lines = [PLAN_HEADER]
    if not plan.feasible:
        lines.append(f"#infeasible=1 #min_total_dt={plan.total_delta_time!r} "
                     f"#budget={plan.budget!r}")
        return "\n".join(lines) + "\n"
    for i, cid in enumerate(plan.choices, start=1):
        lines.append(f"{i}\t{cid}")
    lines.append(
        f"#objective={plan.objective!r} #total_dt={plan.total_delta_time!r} "
        f"#budget={plan.budget!r} #optimal={int(plan.optimal)}"
    )
    return "\n".join(lines) + "\n"


def write_plan(path, plan):
    atomic_write(path, dumps_plan(plan))


def read_plan(path):
    lines = _lines(path)
    _check_header(lines, PLAN_HEADER, path)
    choices = []
    footer = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("#"):
            footer.update(_footer_fields(line))
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise ParseError("expected block_index<TAB>candidate_id", path, lineno)
        if fields[0] != str(len(choices) + 1):
            raise ParseError(f"expected block {len(choices) + 1}, got {fields[0]}",
                             path, lineno)
        choices.append(fields[1])
    try:
        if footer.get("infeasible") == "1":
            return SelectionPlan((), float("nan"), float(footer["min_total_dt"]),
                                 float(footer["budget"]), False, feasible=False)
        return SelectionPlan(
            tuple(choices),
            float(footer["objective"]),
            float(footer["total_dt"]),
            float(footer["budget"]),
            footer["optimal"] == "1",
        )
    except KeyError as err:
        raise ParseError(f"plan footer lacks {err.args[0]!r}", path) from None


# -- dependency graphs, tensors, prune plans ---------------------------------

def dumps_graph(graph_or_nodes, edges=None):
    if edges is None:
        nodes, edges = graph_or_nodes.nodes, graph_or_nodes.edges
    else:
        nodes = graph_or_nodes
    lines = [GRAPH_HEADER]
    for n in nodes:
        tags = ",".join(sorted(n.role_tags)) or "-"
        row = f"node\t{n.id}\t{n.kind}\t{n.in_channels}\t{n.out_channels}\t{tags}"
        if n.kernel != 1:
            row += f"\t{n.kernel}"
        lines.append(row)
    for e in edges:
        lines.append(f"edge\t{e.src}\t{e.dst}\t{int(e.recurrent)}")
    return "\n".join(lines) + "\n"


def write_graph(path, graph):
    atomic_write(path, dumps_graph(graph))


def read_graph_description(path):
    """Parse nodes and edges without building groups."""
    lines = _lines(path)
    _check_header(lines, GRAPH_HEADER, path)
    nodes, edges = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        f = line.split("\t")
        try:
            if f[0] == "node" and len(f) in (6, 7):
                tags = frozenset() if f[5] == "-" else frozenset(f[5].split(","))
                kernel = int(f[6]) if len(f) == 7 else 1
                nodes.append(LayerNode(f[1], f[2], int(f[3]), int(f[4]), tags, kernel))
            elif f[0] == "edge" and len(f) == 4:
                if f[3] not in ("0", "1"):
                    raise ValueError(f"recurrent flag must be 0 or 1, got {f[3]!r}")
                edges.append(Edge(f[1], f[2], f[3] == "1"))
            else:
                raise ValueError(f"unrecognized record {f[0]!r} with {len(f)} fields")
        except ValueError as err:
            raise ParseError(str(err), path, lineno) from None
    return nodes, edges


def read_graph(path):
    nodes, edges = read_graph_description(path)
    return build_dependency_graph(nodes, edges)


def write_tensors(directory, tensors, manifest_name="tensors.txt"):
    """Store ``{layer: (weight, grads)}`` as raw little-endian float32 files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [TENSOR_HEADER]
    for layer_id in sorted(tensors):
        weight, grads = tensors[layer_id]
        if isinstance(grads, np.ndarray):
            grads = [grads]
        arrays = [("weight", weight)] + [("grad", g) for g in grads]
        for j, (role, arr) in enumerate(arrays):
            arr = np.asarray(arr, dtype="<f4")
            fname = f"{layer_id}.{role}{'' if role == 'weight' else j - 1}.f32"
            atomic_write(directory / fname, arr.tobytes(order="C"))
            dims = ",".join(str(d) for d in arr.shape)
            lines.append(f"{layer_id}\t{role}\t{fname}\t{dims}")
    path = directory / manifest_name
    atomic_write(path, "\n".join(lines) + "\n")
    return path


def read_tensors(manifest):
    manifest = Path(manifest)
    lines = _lines(manifest)
    _check_header(lines, TENSOR_HEADER, manifest)
    weights, grads = {}, {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        f = line.split("\t")
        if len(f) != 4 or f[1] not in ("weight", "grad"):
            raise ParseError("expected layer<TAB>weight|grad<TAB>file<TAB>dims",
                             manifest, lineno)
        try:
            shape = tuple(int(d) for d in f[3].split(","))
        except ValueError:
            raise ParseError(f"bad dims {f[3]!r}", manifest, lineno) from None
        raw = (manifest.parent / f[2]).read_bytes()
        if len(raw) != 4 * int(np.prod(shape)):
            raise ParseError(f"{f[2]} holds {len(raw)} bytes, dims {shape} need "
                             f"{4 * int(np.prod(shape))}", manifest, lineno)
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        if f[1] == "weight":
            if f[0] in weights:
                raise ParseError(f"second weight for {f[0]!r}", manifest, lineno)
            weights[f[0]] = arr
        else:
            grads.setdefault(f[0], []).append(arr)
    missing = sorted(set(grads) - set(weights))
    if missing:
        raise ParseError(f"gradients without weights for {missing}", manifest)
    return {k: (w, grads.get(k, [np.zeros_like(w)])) for k, w in weights.items()}


def dumps_prune_plan(plan):
    lines = [PRUNE_HEADER]
    for gid in sorted(plan.removals, key=_group_order):
        idx = ",".join(str(i) for i in plan.removals[gid])
        lines.append(f"{gid}\t{idx}")
    widths = ",".join(f"{g}:{w}" for g, w in sorted(plan.widths.items(),
                                                    key=lambda kv: _group_order(kv[0])))
    lines.append(
        f"#ratio={plan.ratio!r} #removed_channels={plan.removed_channels} "
        f"#prunable_channels={plan.prunable_channels} "
        f"#channel_fraction={plan.channel_fraction!r} "
        f"#parameter_fraction={plan.parameter_fraction!r}"
    )
    lines.append(f"#widths={widths}")
    return "\n".join(lines) + "\n"


def _group_order(gid):
    m = re.match(r"^g(\d+)$", gid)
    return (0, int(m.group(1)), gid) if m else (1, 0, gid)


def write_prune_plan(path, plan, report=None):
    text = dumps_prune_plan(plan)
    if report:
        text += "".join(f"#{line}\n" for line in report)
    atomic_write(path, text)


def read_prune_plan(path):
    lines = _lines(path)
    _check_header(lines, PRUNE_HEADER, path)
    removals, footer = {}, {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("#"):
            footer.update(_footer_fields(line))
            continue
        f = line.split("\t")
        if len(f) != 2:
            raise ParseError("expected group_id<TAB>indices", path, lineno)
        try:
            removals[f[0]] = tuple(int(i) for i in f[1].split(",") if i)
        except ValueError:
            raise ParseError(f"bad index list {f[1]!r}", path, lineno) from None
    try:
        widths = {}
        if footer.get("widths"):
            for item in footer["widths"].split(","):
                g, w = item.split(":")
                widths[g] = int(w)
        return PrunePlan(
            float(footer["ratio"]), removals, widths,
            int(footer["prunable_channels"]), int(footer["removed_channels"]),
            float(footer["parameter_fraction"]),
        )
    except (KeyError, ValueError) as err:
        raise ParseError(f"bad prune plan footer: {err}", path) from None


# -- images, masks, rigs -----------------------------------------------------

def write_pfm(path, image):
    """Little-endian PFM; rows are stored bottom-up."""
    arr = np.asarray(image, dtype="<f4")
    if arr.ndim == 2:
        kind = "Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        kind = "PF"
    else:
        raise ValueError(f"PFM holds (H, W) or (H, W, 3) data, got {arr.shape}")
    h, w = arr.shape[:2]
    header = f"{kind}\n{w} {h}\n-1.0\n".encode("ascii")
    atomic_write(path, header + np.ascontiguousarray(arr[::-1]).tobytes())


def _read_header_tokens(fh, count):
    tokens = []
    while len(tokens) < count:
        line = fh.readline()
        if not line:
            raise ParseError("truncated header", getattr(fh, "name", None))
        line = line.split(b"#", 1)[0]
        tokens.extend(line.split())
    return tokens


def read_pfm(path):
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise ParseError(f"not a PFM file (magic {kind!r})", path, 1)
        w, h = (int(t) for t in _read_header_tokens(fh, 2))
        scale = float(fh.readline().strip())
        if scale == 0:
            raise ParseError("PFM scale must be non-zero", path, 3)
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if kind == b"PF" else 1
        count = w * h * channels
        data = np.frombuffer(fh.read(4 * count), dtype=dtype)
    if data.size != count:
        raise ParseError(f"PFM payload holds {data.size} of {count} floats", path)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float32)


def write_pgm(path, mask):
    """Binary PGM mask: 255 for true, 0 for false."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError(f"masks are 2-D, got {mask.shape}")
    h, w = mask.shape
    payload = np.where(mask, 255, 0).astype(np.uint8).tobytes()
    atomic_write(path, f"P5\n{w} {h}\n255\n".encode("ascii") + payload)


def read_pgm(path):
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P5":
            raise ParseError("not a binary PGM file", path, 1)
        w, h, maxval = (int(t) for t in _read_header_tokens(fh, 3))
        if maxval > 255:
            raise ParseError("only 8-bit PGM masks are supported", path)
        data = np.frombuffer(fh.read(w * h), dtype=np.uint8)
    if data.size != w * h:
        raise ParseError("truncated PGM payload", path)
    return data.reshape(h, w) > maxval // 2


RIG_KEYS = ("fx", "fy", "cx", "cy", "baseline")


def read_rig(path):
    kv = parse_key_values(path, RIG_KEYS)
    missing = [k for k in RIG_KEYS if k not in kv]
    if missing:
        raise ParseError(f"rig file lacks {missing}", path)
    try:
        return CameraRig(*(float(kv[k]) for k in RIG_KEYS))
    except ValueError as err:
        raise ParseError(str(err), path) from None


def write_rig(path, rig):
    atomic_write(path, "".join(f"{k}={getattr(rig, k)!r}\n" for k in RIG_KEYS))


# -- curation reports --------------------------------------------------------

def dumps_verdicts(rows):
    """``rows``: ``(sample_id, accepted_or_error_code, fraction, threshold)``."""
    lines = [VERDICT_HEADER]
    accepted = total = 0
    for sample_id, status, fraction, threshold in rows:
        total += 1
        if isinstance(status, bool):
            accepted += status
            status = "1" if status else "0"
        lines.append(f"{sample_id}\t{status}\t{fraction!r}\t{threshold!r}")
    rate = accepted / total if total else 0.0
    lines.append(f"#accepted={accepted} #total={total} #rate={rate!r}")
    return "\n".join(lines) + "\n"


def read_verdicts(path):
    lines = _lines(path)
    _check_header(lines, VERDICT_HEADER, path)
    rows, footer = [], {}
    for lineno, line in enumerate(lines[1:], start=2):
        if line.startswith("#"):
            footer.update(_footer_fields(line))
            continue
        f = line.split("\t")
        if len(f) != 4:
            raise ParseError("expected 4 fields", path, lineno)
        status = {"1": True, "0": False}.get(f[1], f[1])
        rows.append((f[0], status, float(f[2]), float(f[3])))
    return rows, footer


def load_sample(directory, rig=None):
    """Read ``disparity.pfm``, ``mono_depth.pfm`` and optional ``sky.pgm``/``rig.txt``."""
    directory = Path(directory)
    disp = read_pfm(directory / "disparity.pfm")
    mono = read_pfm(directory / "mono_depth.pfm")
    sky_path = directory / "sky.pgm"
    sky = read_pgm(sky_path) if sky_path.exists() else None
    rig_path = directory / "rig.txt"
    if rig_path.exists():
        rig = read_rig(rig_path)
    if rig is None:
        raise DncError(f"sample {directory} has no rig.txt and no default rig was given")
    return disp, mono, sky, rig


def write_sample(directory, disp, mono_depth, sky=None, rig=None):
    directory = Path(directory)
    write_pfm(directory / "disparity.pfm", disp)
    write_pfm(directory / "mono_depth.pfm", mono_depth)
    if sky is not None:
        write_pgm(directory / "sky.pgm", sky)
    if rig is not None:
        write_rig(directory / "rig.txt", rig)
