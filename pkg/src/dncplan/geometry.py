"""Pseudo-label curation by stereo/monocular normal consistency.

Maps are plain ``(H, W)`` float arrays; undefined depth, point and normal
entries are NaN.  Disparity uses ``0`` for invalid pixels.  Sky masks are
boolean ``(H, W)`` arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_map, check_same_shape
from .exceptions import DegenerateSampleError

EPSILON_DISP = 1e-3
DEFAULT_COS_THRESHOLD = 0.85
DEFAULT_ACCEPTANCE = 0.7
DEFAULT_MIN_VALID = 64

# 3x3 Sobel, normalized by 1/8; _SOBEL_U differentiates along columns
_SMOOTH = np.array([1.0, 2.0, 1.0])
_DIFF = np.array([-1.0, 0.0, 1.0])
_SOBEL_U = np.outer(_SMOOTH, _DIFF) / 8.0
_SOBEL_V = np.outer(_DIFF, _SMOOTH) / 8.0


@dataclass(frozen=True)
class CameraRig:
    fx: float
    fy: float
    cx: float
    cy: float
    baseline: float

    def __post_init__(self):
        for name in ("fx", "fy", "baseline"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise ValueError(f"{name} must be positive, got {v}")
        for name in ("cx", "cy"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")


@dataclass
class PseudoLabelVerdict:
    consistency_mask: np.ndarray
    domain: np.ndarray
    similarity: np.ndarray
    agreement_fraction: float
    accepted: bool
    final_label: np.ndarray
    cos_threshold: float
    acceptance_fraction: float


def disparity_to_depth(disp, rig, eps=EPSILON_DISP):
    """``Z = fx * baseline / d``; pixels with ``d <= eps`` (or NaN) become NaN."""
    disp = check_map(disp, "disparity")
    depth = np.full(disp.shape, np.nan)
    valid = np.isfinite(disp) & (disp > eps)
    depth[valid] = rig.fx * rig.baseline / disp[valid]
    return depth


def depth_to_disparity(depth, rig):
    depth = check_map(depth, "depth")
    disp = np.zeros(depth.shape)
    valid = np.isfinite(depth) & (depth > 0)
    disp[valid] = rig.fx * rig.baseline / depth[valid]
    return disp


def unproject(depth, rig):
    """Pinhole back-projection to an ``(H, W, 3)`` point map."""
    depth = check_map(depth, "depth")
    h, w = depth.shape
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    x = (u - rig.cx) * depth / rig.fx
    y = (v - rig.cy) * depth / rig.fy
    return np.stack([x, y, depth], axis=-1)


def _correlate3x3(channel, kernel):
    padded = np.pad(channel, 1, mode="edge")
    h, w = channel.shape
    out = np.zeros((h, w))
    for i in range(3):
        for j in range(3):
            if kernel[i, j]:
                out += kernel[i, j] * padded[i:i + h, j:j + w]
    return out


def normals_from_points(points):
    """Unit normals from Sobel tangents, oriented toward the camera (``n_z < 0``).

    A pixel is undefined when any point in its (edge-replicated) 3x3 window is
    undefined or when the tangents are parallel.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 3 or points.shape[2] != 3:
        raise ValueError(f"point map must be (H, W, 3), got {points.shape}")
    invalid = ~np.isfinite(points).all(axis=2)
    filled = np.where(invalid[..., None], 0.0, points)
    t_u = np.stack([_correlate3x3(filled[..., c], _SOBEL_U) for c in range(3)], axis=-1)
    t_v = np.stack([_correlate3x3(filled[..., c], _SOBEL_V) for c in range(3)], axis=-1)
    n = np.cross(t_u, t_v)
    norm = np.linalg.norm(n, axis=-1)
    touched = _correlate3x3(invalid.astype(np.float64), np.ones((3, 3))) > 0
    undefined = touched | ~(norm > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        n = n / norm[..., None]
    flip = n[..., 2] > 0
    n[flip] *= -1.0
    n[undefined] = np.nan
    return n


def depth_to_normals(depth, rig):
    return normals_from_points(unproject(depth, rig))


def cosine_consistency(n1, n2):
    """Per-pixel dot product of two unit-normal maps; NaN where either is undefined."""
    n1 = np.asarray(n1, dtype=np.float64)
    n2 = np.asarray(n2, dtype=np.float64)
    check_same_shape(n1, n2, "normal maps")
    sim = np.einsum("hwc,hwc->hw", n1, n2)
    return np.clip(sim, -1.0, 1.0)


def consistency_mask(sim, threshold=DEFAULT_COS_THRESHOLD, sky=None):
    """Pixels whose similarity reaches ``threshold``.

    Returns ``(mask, domain)``: ``domain`` holds defined non-sky pixels and
    ``mask`` is its passing subset.  Sky pixels are in neither.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if not -1.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [-1, 1], got {threshold}")
    domain = np.isfinite(sim)
    if sky is not None:
        sky = np.asarray(sky, dtype=bool)
        check_same_shape(sim, sky, "similarity and sky mask")
        domain &= ~sky
    mask = domain & (np.where(domain, sim, -np.inf) >= threshold)
    return mask, domain


def agreement_fraction(mask, domain):
    n = int(domain.sum())
    return float(mask.sum()) / n if n else 0.0


def curate_sample(disp, mono_depth, rig, sky=None, cos_threshold=DEFAULT_COS_THRESHOLD,
                  acceptance_fraction=DEFAULT_ACCEPTANCE, min_valid_pixels=DEFAULT_MIN_VALID):
    """Compare stereo and monocular geometry for one sample.

    Both inputs go through unprojection and Sobel normals; sky pixels are
    removed before the normals are taken so they cannot leak into neighbours.
    Raises :class:`DegenerateSampleError` when fewer than ``min_valid_pixels``
    pixels remain to compare.
    """
    disp = check_map(disp, "disparity")
    mono_depth = check_map(mono_depth, "mono depth")
    check_same_shape(disp, mono_depth, "disparity and mono depth")
    if sky is None:
        sky = np.zeros(disp.shape, dtype=bool)
    sky = np.asarray(sky, dtype=bool)
    check_same_shape(disp, sky, "disparity and sky mask")

    stereo_depth = disparity_to_depth(disp, rig)
    stereo_depth[sky] = np.nan
    mono = np.where(sky | ~(mono_depth > 0), np.nan, mono_depth)

    n_stereo = depth_to_normals(stereo_depth, rig)
    n_mono = depth_to_normals(mono, rig)
    sim = cosine_consistency(n_stereo, n_mono)
    mask, domain = consistency_mask(sim, cos_threshold, sky)
    n_valid = int(domain.sum())
    if n_valid < min_valid_pixels:
        raise DegenerateSampleError(
            f"only {n_valid} comparable pixels (minimum {min_valid_pixels})"
        )
    fraction = agreement_fraction(mask, domain)
    final = np.array(disp, dtype=np.float64)
    final[sky] = 0.0
    return PseudoLabelVerdict(
        consistency_mask=mask,
        domain=domain,
        similarity=sim,
        agreement_fraction=fraction,
        accepted=fraction >= acceptance_fraction,
        final_label=final,
        cos_threshold=cos_threshold,
        acceptance_fraction=acceptance_fraction,
    )


def subsample_manifest(frames, stride=10):
    if int(stride) != stride or stride < 1:
        raise ValueError(f"stride must be a positive integer, got {stride}")
    return list(frames)[:: int(stride)]


class NormalConsistencyFilter(BaseEstimator):
    """Accept/reject stereo pseudo-labels by normal agreement with mono depth.

    The filter is stateless; ``fit`` only validates parameters.  ``predict``
    takes a sequence of ``(disparity, mono_depth, sky)`` samples and returns a
    boolean array; ``curate`` returns the full verdict for one sample.
    """

    def __init__(self, rig=None, cos_threshold=DEFAULT_COS_THRESHOLD,
                 acceptance_fraction=DEFAULT_ACCEPTANCE, min_valid_pixels=DEFAULT_MIN_VALID):
        self.rig = rig
        self.cos_threshold = cos_threshold
        self.acceptance_fraction = acceptance_fraction
        self.min_valid_pixels = min_valid_pixels

    def fit(self, X=None, y=None):
        if not isinstance(self.rig, CameraRig):
            raise ValueError("rig must be a CameraRig")
        if not -1.0 < self.cos_threshold < 1.0:
            raise ValueError("cos_threshold must lie in (-1, 1)")
        if not 0.0 <= self.acceptance_fraction <= 1.0:
            raise ValueError("acceptance_fraction must lie in [0, 1]")
        self.fitted_ = True
        return self

    def curate(self, disp, mono_depth, sky=None):
        if not hasattr(self, "fitted_"):
            self.fit()
        return curate_sample(disp, mono_depth, self.rig, sky, self.cos_threshold,
                             self.acceptance_fraction, self.min_valid_pixels)

    def predict(self, samples):
        out = []
        for sample in samples:
            disp, mono = sample[0], sample[1]
            sky = sample[2] if len(sample) > 2 else None
            out.append(self.curate(disp, mono, sky).accepted)
        return np.array(out, dtype=bool)

    def score_samples(self, samples):
        return np.array([self.curate(*s).agreement_fraction for s in samples])
