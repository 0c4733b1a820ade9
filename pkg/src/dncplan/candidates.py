"""Candidate block enumeration and an analytic cost model.

Teacher blocks of the cost-filtering network are described by
:class:`LayerBlockSpec`.  For each teacher block we expand a parameter grid
into replacement blocks with the same input/output channels and spatial
shapes, estimate their runtime from FLOP counts, and keep the ones that are
strictly faster than the teacher.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import EmptySpaceError
from .search import BlockCandidate, CandidateTable, IDENTITY_ID

CONV3D = "Conv3D"
DECONV3D = "Deconv3D"
APC = "APC"
RESCONV3D = "ResConv3D"
VOLUME_EXCITATION = "VolumeExcitation"
DISP_TRANSFORMER = "DispTransformerLayer"

KINDS = (CONV3D, DECONV3D, APC, RESCONV3D, VOLUME_EXCITATION, DISP_TRANSFORMER)
HOURGLASS_KINDS = (CONV3D, DECONV3D, APC, RESCONV3D, VOLUME_EXCITATION)
_ABBREV = {
    CONV3D: "conv",
    DECONV3D: "deconv",
    APC: "apc",
    RESCONV3D: "res",
    VOLUME_EXCITATION: "vex",
    DISP_TRANSFORMER: "dtr",
}
# volume dims per token along (D, H, W) of the block input volume
DEFAULT_TOKEN_STRIDE = (1, 4, 4)


def _triple(v):
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected an integer triple, got {v!r}")
    return t


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a cost-filtering block.

    For ``APC`` the kernel ``(d, h, w)`` factorizes into a spatial ``(1, h, w)``
    convolution followed by a disparity ``(d, 1, 1)`` convolution.
    ``Deconv3D`` always doubles every spatial dimension.
    """

    kind: str
    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3, 3)
    stride: tuple = (1, 1, 1)
    heads: int = 0
    ffn_dim: int = 0
    num_layers: int = 0
    guidance_channels: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ValueError("channels must be positive")
        if min(self.kernel) <= 0 or min(self.stride) <= 0:
            raise ValueError("kernels and strides must be positive")
        if self.guidance_channels < 0:
            raise ValueError("guidance_channels must be non-negative")
        transformer = self.kind == DISP_TRANSFORMER
        extras = (self.heads, self.ffn_dim, self.num_layers)
        if transformer:
            if min(extras) <= 0:
                raise ValueError("transformer layers need positive heads, ffn_dim, num_layers")
            if self.in_channels % self.heads:
                raise ValueError("embedding dim must be divisible by the head count")
        elif any(extras):
            raise ValueError(f"{self.kind} takes no heads/ffn_dim/num_layers")
        if self.kind in (VOLUME_EXCITATION, DISP_TRANSFORMER):
            if self.in_channels != self.out_channels:
                raise ValueError(f"{self.kind} preserves the channel count")
            if self.stride != (1, 1, 1):
                raise ValueError(f"{self.kind} cannot resample")
        if self.kind == DECONV3D and self.stride != (2, 2, 2):
            raise ValueError("Deconv3D doubles the spatial dimensions; stride must be 2")

    def output_dims(self, dims):
        if self.kind == DECONV3D:
            return tuple(d * s for d, s in zip(dims, self.stride))
        return tuple(-(-d // s) for d, s in zip(dims, self.stride))


@dataclass(frozen=True)
class LayerBlockSpec:
    block_index: int
    layers: tuple
    input_shape: tuple
    output_shape: tuple

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "input_shape", tuple(int(x) for x in self.input_shape))
        object.__setattr__(self, "output_shape", tuple(int(x) for x in self.output_shape))
        if not layers:
            raise ValueError("a block needs at least one layer")
        if len(self.input_shape) != 4 or len(self.output_shape) != 4:
            raise ValueError("shapes are (C, D, H, W)")
        if min(self.input_shape) <= 0 or min(self.output_shape) <= 0:
            raise ValueError("shapes must be positive")
        channels = self.input_shape[0]
        dims = self.input_shape[1:]
        for j, layer in enumerate(layers):
            if layer.in_channels != channels:
                raise ValueError(
                    f"block {self.block_index} layer {j}: expects {layer.in_channels} "
                    f"input channels, receives {channels}"
                )
            channels = layer.out_channels
            dims = layer.output_dims(dims)
        if (channels,) + dims != self.output_shape:
            raise ValueError(
                f"block {self.block_index}: layers produce {(channels,) + dims}, "
                f"declared output {self.output_shape}"
            )

    def fingerprint(self):
        """Stable hex digest of the layer list (independent of ``block_index``)."""
        text = repr((self.input_shape, self.output_shape, self.layers))
        return hashlib.sha256(text.encode()).hexdigest()

    @property
    def has_transformer(self):
        return any(layer.kind == DISP_TRANSFORMER for layer in self.layers)


@dataclass(frozen=True)
class CostModel:
    flops_per_ms: float = 1e10
    memory_bandwidth_penalty: float = 1.5
    token_stride: tuple = DEFAULT_TOKEN_STRIDE

    def __post_init__(self):
        if not self.flops_per_ms > 0:
            raise ValueError("flops_per_ms must be positive")
        if not self.memory_bandwidth_penalty > 0:
            raise ValueError("memory_bandwidth_penalty must be positive")
        object.__setattr__(self, "token_stride", _triple(self.token_stride))

    def penalty(self, kind):
        if kind in (DECONV3D, VOLUME_EXCITATION):
            return self.memory_bandwidth_penalty
        return 1.0


def conv3d_flops(cin, cout, kernel, out_dims):
    kd, kh, kw = kernel
    d, h, w = out_dims
    return 2 * cin * cout * kd * kh * kw * d * h * w


def token_count(dims, token_stride=DEFAULT_TOKEN_STRIDE):
    return math.prod(max(1, -(-d // s)) for d, s in zip(dims, token_stride))


def layer_flops(layer, in_dims, token_stride=DEFAULT_TOKEN_STRIDE):
    """FLOPs of one layer given its input ``(D, H, W)``."""
    out = layer.output_dims(in_dims)
    cin, cout = layer.in_channels, layer.out_channels
    kind = layer.kind
    if kind in (CONV3D, DECONV3D):
        return conv3d_flops(cin, cout, layer.kernel, out)
    if kind == APC:
        kd, kh, kw = layer.kernel
        return conv3d_flops(cin, cout, (1, kh, kw), out) + conv3d_flops(
            cout, cout, (kd, 1, 1), out
        )
    if kind == RESCONV3D:
        total = conv3d_flops(cin, cout, layer.kernel, out)
        total += conv3d_flops(cout, cout, layer.kernel, out)
        if cin != cout or layer.stride != (1, 1, 1):
            total += conv3d_flops(cin, cout, (1, 1, 1), out)
        return total
    if kind == VOLUME_EXCITATION:
        d, h, w = out
        guidance = layer.guidance_channels or cout
        return cout * d * h * w + 2 * guidance * cout * h * w
    # transformer: attention projections, attention matmuls, feed-forward
    t = token_count(in_dims, token_stride)
    e = cin
    per_layer = 2 * (4 * t * e * e + 2 * t * t * e + 2 * t * e * layer.ffn_dim * 2)
    return per_layer * layer.num_layers


def _walk(spec, token_stride):
    dims = spec.input_shape[1:]
    for layer in spec.layers:
        yield layer, layer_flops(layer, dims, token_stride)
        dims = layer.output_dims(dims)


def estimate_flops(spec, token_stride=DEFAULT_TOKEN_STRIDE):
    return float(sum(f for _, f in _walk(spec, _triple(token_stride))))


def estimate_latency(spec, model=None):
    model = model or CostModel()
    total = 0.0
    for layer, flops in _walk(spec, model.token_stride):
        total += flops / model.flops_per_ms * model.penalty(layer.kind)
    return total


def validate_candidate(spec, teacher_block, teacher_time=None, model=None):
    """True iff ``spec`` keeps the teacher's I/O channels and is strictly faster."""
    model = model or CostModel()
    if teacher_time is None:
        teacher_time = estimate_latency(teacher_block, model)
    if spec.input_shape[0] != teacher_block.input_shape[0]:
        return False
    if spec.output_shape[0] != teacher_block.output_shape[0]:
        return False
    return estimate_latency(spec, model) < teacher_time


@dataclass(frozen=True)
class SearchGrid:
    kinds: tuple = HOURGLASS_KINDS + (DISP_TRANSFORMER,)
    channel_multipliers: tuple = (0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0)
    max_layers: int = 4
    kernel_sizes: tuple = (1, 3, 5)
    heads: tuple = (1, 2, 4, 8)
    ffn_dims: tuple = (64, 128, 256, 512)

    def __post_init__(self):
        for name in ("kinds", "channel_multipliers", "kernel_sizes", "heads", "ffn_dims"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        bad = [k for k in self.kinds if k not in KINDS]
        if bad:
            raise ValueError(f"unknown kinds {bad}")
        if not self.kinds:
            raise ValueError("grid needs at least one kind")
        if not self.channel_multipliers or min(self.channel_multipliers) <= 0:
            raise ValueError("channel multipliers must be positive")
        if self.max_layers < 1:
            raise ValueError("max_layers must be at least 1")
        if not self.kernel_sizes or min(self.kernel_sizes) < 1:
            raise ValueError("kernel sizes must be positive")
        if any(h < 1 for h in self.heads) or any(f < 1 for f in self.ffn_dims):
            raise ValueError("heads and ffn_dims must be positive")

    def fingerprint(self):
        return hashlib.sha256(repr(self).encode()).hexdigest()[:16]


def _resampling(teacher):
    ratios = set()
    for a, b in zip(teacher.input_shape[1:], teacher.output_shape[1:]):
        if b == a:
            ratios.add("same")
        elif b == 2 * a:
            ratios.add("up")
        elif b == -(-a // 2):
            ratios.add("down")
        else:
            raise ValueError(
                f"block {teacher.block_index}: unsupported spatial change {a} -> {b}"
            )
    if ratios == {"same"}:
        return "same", (1, 1, 1)
    if "up" in ratios:
        if ratios != {"up"}:
            raise ValueError(f"block {teacher.block_index}: mixed up/down sampling")
        return "up", (2, 2, 2)
    stride = tuple(
        1 if b == a else 2
        for a, b in zip(teacher.input_shape[1:], teacher.output_shape[1:])
    )
    return "down", stride


def _body_layer(kind, cin, width, k, dk, stride, heads=0, ffn=0, layers=0):
    if kind == CONV3D:
        return LayerSpec(CONV3D, cin, width, (k, k, k), stride)
    if kind == APC:
        return LayerSpec(APC, cin, width, (dk, k, k), stride)
    if kind == RESCONV3D:
        return LayerSpec(RESCONV3D, cin, width, (k, k, k), stride)
    if kind == VOLUME_EXCITATION:
        return LayerSpec(VOLUME_EXCITATION, width, width, (1, 1, 1))
    return LayerSpec(DISP_TRANSFORMER, width, width, (1, 1, 1),
                     heads=heads, ffn_dim=ffn, num_layers=layers)


def build_candidate(teacher, kind, multiplier, n_layers, kernel=3, disp_kernel=None,
                    heads=0, ffn_dim=0):
    """Assemble one replacement block, or return ``None`` when the combination
    cannot match the teacher's resampling.

    The body runs at width ``round(multiplier * max(C_in, C_out))``.  Kinds
    that cannot change channels or resample get a 1x1x1 ``Conv3D`` entry
    projection; upsampling blocks always open with a ``Deconv3D``; a 1x1x1
    exit projection restores the teacher's output channels.  A transformer
    body is a single layer stack of ``n_layers`` attention layers.
    """
    c_in, c_out = teacher.input_shape[0], teacher.output_shape[0]
    width = max(1, int(round(multiplier * max(c_in, c_out))))
    dk = disp_kernel or kernel
    mode, stride = _resampling(teacher)
    layers = []
    cur = c_in

    if kind == DISP_TRANSFORMER and width % heads:
        return None
    if mode == "up":
        layers.append(LayerSpec(DECONV3D, cur, width, (kernel,) * 3, (2, 2, 2)))
        cur = width
        body_kind = CONV3D if kind == DECONV3D else kind
        n_body = n_layers - 1
        stride = (1, 1, 1)
    else:
        if kind == DECONV3D:
            return None
        body_kind = kind
        n_body = n_layers

    if body_kind == DISP_TRANSFORMER:
        if cur != width or stride != (1, 1, 1):
            layers.append(LayerSpec(CONV3D, cur, width, (1, 1, 1), stride))
            cur, stride = width, (1, 1, 1)
        if n_body > 0:
            layers.append(_body_layer(DISP_TRANSFORMER, cur, width, kernel, dk, stride,
                                      heads, ffn_dim, n_body))
    else:
        for _ in range(n_body):
            if body_kind == VOLUME_EXCITATION and (cur != width or stride != (1, 1, 1)):
                layers.append(LayerSpec(CONV3D, cur, width, (1, 1, 1), stride))
                cur, stride = width, (1, 1, 1)
            layers.append(_body_layer(body_kind, cur, width, kernel, dk, stride))
            cur, stride = width, (1, 1, 1)

    if stride != (1, 1, 1):
        layers.append(LayerSpec(CONV3D, cur, width, (1, 1, 1), stride))
        cur = width
    if cur != c_out or not layers:
        layers.append(LayerSpec(CONV3D, cur, c_out, (1, 1, 1)))
    return LayerBlockSpec(teacher.block_index, tuple(layers), teacher.input_shape,
                          teacher.output_shape)


def candidate_id(kind, width, n_layers, kernel, disp_kernel=None, heads=0, ffn_dim=0):
    parts = [_ABBREV[kind], f"w{width}", f"l{n_layers}"]
    if kind == DISP_TRANSFORMER:
        parts += [f"h{heads}", f"f{ffn_dim}"]
    else:
        parts.append(f"k{kernel}")
        if kind == APC:
            parts.append(f"d{disp_kernel}")
    return "-".join(parts)


def _grid_points(teacher, grid):
    if teacher.has_transformer:
        kinds = [k for k in grid.kinds if k == DISP_TRANSFORMER]
    else:
        kinds = [k for k in grid.kinds if k != DISP_TRANSFORMER]
    ref = max(teacher.input_shape[0], teacher.output_shape[0])
    for kind in kinds:
        for mult in grid.channel_multipliers:
            width = max(1, int(round(mult * ref)))
            for n_layers in range(1, grid.max_layers + 1):
                if kind == DISP_TRANSFORMER:
                    for h in grid.heads:
                        for f in grid.ffn_dims:
                            yield (kind, mult, n_layers, 1, None, h, f,
                                   candidate_id(kind, width, n_layers, 1, None, h, f))
                elif kind == APC:
                    for k in grid.kernel_sizes:
                        for dk in grid.kernel_sizes:
                            yield (kind, mult, n_layers, k, dk, 0, 0,
                                   candidate_id(kind, width, n_layers, k, dk))
                else:
                    for k in grid.kernel_sizes:
                        yield (kind, mult, n_layers, k, None, 0, 0,
                               candidate_id(kind, width, n_layers, k))


def enumerate_block_candidates(teacher_block, grid=None, teacher_time=None, model=None,
                               limit=200):
    """Expand ``grid`` for one teacher block.

    Returns at most ``limit`` ``(candidate_id, spec, latency_ms)`` triples sorted
    by latency, then by spec fingerprint.  Every returned spec passes
    :func:`validate_candidate`.  Structurally identical specs reached through
    different grid points are kept once (under the smallest id).
    """
    grid = grid or SearchGrid()
    model = model or CostModel()
    if teacher_time is None:
        teacher_time = estimate_latency(teacher_block, model)
    seen = {}
    for kind, mult, n_layers, k, dk, h, f, cid in _grid_points(teacher_block, grid):
        spec = build_candidate(teacher_block, kind, mult, n_layers, k, dk, h, f)
        if spec is None:
            continue
        if not validate_candidate(spec, teacher_block, teacher_time, model):
            continue
        fp = spec.fingerprint()
        if fp in seen and seen[fp][0] <= cid:
            continue
        seen[fp] = (cid, spec, estimate_latency(spec, model))
    if not seen:
        raise EmptySpaceError(
            f"no candidate for block {teacher_block.block_index} is strictly faster "
            "than the teacher with matching channels",
            block_index=teacher_block.block_index,
        )
    ranked = sorted(seen.items(), key=lambda item: (item[1][2], item[0]))
    return [value for _, value in ranked[:limit]]


def default_teacher_blocks():
    """An 8-block cost-filtering teacher: hourglass blocks plus one transformer block.

    The input cost volume is ``(32, 48, 60, 80)``: 32 channels over a
    192-disparity, 240x320 image at quarter resolution.
    """
    v0 = (32, 48, 60, 80)
    v1 = (64, 24, 30, 40)
    v2 = (128, 12, 15, 20)
    return [
        LayerBlockSpec(1, (LayerSpec(APC, 32, 64, (7, 3, 3), (2, 2, 2)),
                           LayerSpec(APC, 64, 64, (7, 3, 3))), v0, v1),
        LayerBlockSpec(2, (LayerSpec(APC, 64, 128, (7, 3, 3), (2, 2, 2)),
                           LayerSpec(APC, 128, 128, (7, 3, 3))), v1, v2),
        LayerBlockSpec(3, (LayerSpec(RESCONV3D, 128, 128, (3, 3, 3)),
                           LayerSpec(VOLUME_EXCITATION, 128, 128, (1, 1, 1),
                                     guidance_channels=96)), v2, v2),
        LayerBlockSpec(4, (LayerSpec(DISP_TRANSFORMER, 128, 128, (1, 1, 1), heads=4,
                                     ffn_dim=512, num_layers=4),), v2, v2),
        LayerBlockSpec(5, (LayerSpec(DECONV3D, 128, 64, (4, 4, 4), (2, 2, 2)),
                           LayerSpec(CONV3D, 64, 64, (3, 3, 3))), v2, v1),
        LayerBlockSpec(6, (LayerSpec(VOLUME_EXCITATION, 64, 64, (1, 1, 1),
                                     guidance_channels=48),
                           LayerSpec(APC, 64, 64, (7, 3, 3))), v1, v1),
        LayerBlockSpec(7, (LayerSpec(DECONV3D, 64, 32, (4, 4, 4), (2, 2, 2)),
                           LayerSpec(CONV3D, 32, 32, (3, 3, 3))), v1, v0),
        LayerBlockSpec(8, (LayerSpec(CONV3D, 32, 32, (3, 3, 3)),
                           LayerSpec(CONV3D, 32, 1, (3, 3, 3))), v0, (1,) + v0[1:]),
    ]


def synthetic_delta_metric(spec_flops, teacher_flops, rng, scale=2.0, noise=0.05):
    """Stand-in for a measured error change: grows with the FLOP reduction."""
    reduction = 1.0 - spec_flops / teacher_flops
    return scale * reduction + noise * rng.standard_normal()


def build_candidate_table(teacher_blocks, grid=None, model=None, limit=200, seed=0,
                          include_identity=False, teacher_times=None, dm_scale=2.0,
                          dm_noise=0.05, metric_name="BP-2"):
    """Enumerate every block and attach runtime and synthetic error deltas.

    Values are rounded to 9 decimals so the table round-trips through the text
    format unchanged.  All randomness comes from one generator seeded with
    ``seed`` and consumed in block order.
    """
    grid = grid or SearchGrid()
    model = model or CostModel()
    rng = np.random.default_rng(seed)
    blocks = []
    for pos, teacher in enumerate(teacher_blocks, start=1):
        if teacher.block_index != pos:
            teacher = replace(teacher, block_index=pos)
        t_time = (teacher_times[pos - 1] if teacher_times is not None
                  else estimate_latency(teacher, model))
        t_flops = estimate_flops(teacher, model.token_stride)
        cands = []
        for cid, spec, latency in enumerate_block_candidates(teacher, grid, t_time, model,
                                                             limit):
            dm = synthetic_delta_metric(estimate_flops(spec, model.token_stride), t_flops,
                                        rng, dm_scale, dm_noise)
            cands.append(BlockCandidate(pos, cid, round(float(dm), 9),
                                        round(latency - t_time, 9), spec_ref=spec))
        if include_identity:
            cands.append(BlockCandidate(pos, IDENTITY_ID, 0.0, 0.0, spec_ref=teacher))
        blocks.append(cands)
    metadata = {
        "synthetic_dm": "true",
        "metric_name": metric_name,
        "grid_hash": grid.fingerprint(),
        "seed": str(seed),
    }
    flags = (True,) * len(blocks) if include_identity else None
    return CandidateTable(blocks, flags, metadata)


class CandidateGenerator(BaseEstimator):
    """Estimator-style front end to :func:`build_candidate_table`.

    ``fit`` takes the teacher blocks (defaults to :func:`default_teacher_blocks`)
    and stores the generated table in ``table_``.
    """

    def __init__(self, grid=None, cost_model=None, limit=200, seed=0,
                 include_identity=False, dm_scale=2.0, dm_noise=0.05):
        self.grid = grid
        self.cost_model = cost_model
        self.limit = limit
        self.seed = seed
        self.include_identity = include_identity
        self.dm_scale = dm_scale
        self.dm_noise = dm_noise

    def fit(self, teacher_blocks=None, teacher_times=None):
        blocks = teacher_blocks if teacher_blocks is not None else default_teacher_blocks()
        self.table_ = build_candidate_table(
            blocks, self.grid, self.cost_model, self.limit, self.seed,
            self.include_identity, teacher_times, self.dm_scale, self.dm_noise,
        )
        self.n_blocks_ = self.table_.n_blocks
        return self

    def transform(self, teacher_blocks=None):
        return self.fit(teacher_blocks).table_

    fit_transform = transform
