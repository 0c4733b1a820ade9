"""Analytic scenes shared by the geometry, CLI and acceptance tests."""

import numpy as np

from dncplan.geometry import CameraRig

RIG = CameraRig(fx=60.0, fy=60.0, cx=31.5, cy=23.5, baseline=0.1)
SHAPE = (48, 64)


def pixel_grid(rig=RIG, shape=SHAPE):
    """Normalized image coordinates ``(xn, yn)``."""
    v, u = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    return (u - rig.cx) / rig.fx, (v - rig.cy) / rig.fy


def plane_depth(a, b, c, rig=RIG, shape=SHAPE):
    """Depth of the plane ``Z = a X + b Y + c`` seen through the pinhole."""
    xn, yn = pixel_grid(rig, shape)
    return c / (1.0 - a * xn - b * yn)


def plane_normal(a, b):
    n = np.array([a, b, -1.0])
    return n / np.linalg.norm(n)


def depth_to_disp(depth, rig=RIG):
    return rig.fx * rig.baseline / depth


def warped_mono(gain, z0=3.0, rig=RIG, shape=SHAPE):
    """Mono depth ``z0 (1 + gain * xn)`` for a fronto-parallel stereo scene at ``z0``."""
    xn, _ = pixel_grid(rig, shape)
    return z0 * (1.0 + gain * xn)


def warp_cosine(gain, rig=RIG, shape=SHAPE):
    """Closed-form cosine between the warped surface normal and ``(0, 0, -1)``.

    The warped surface has tangents ``(1 + 2 g x, g y, g)`` and ``(0, 1, 0)``
    in normalized coordinates, so its normal is ``(g, 0, -(1 + 2 g x))``.
    """
    xn, _ = pixel_grid(rig, shape)
    s = 1.0 + 2.0 * gain * xn
    return s / np.sqrt(gain**2 + s**2)


def warp_fraction(gain, threshold, rig=RIG, shape=SHAPE):
    return float(np.mean(warp_cosine(gain, rig, shape) >= threshold))


def consistent_sample(a=0.2, b=-0.1, c=4.0):
    depth = plane_depth(a, b, c)
    return depth_to_disp(depth), depth


def perturbed_sample(gain=0.8, z0=3.0):
    disp = np.full(SHAPE, RIG.fx * RIG.baseline / z0)
    return disp, warped_mono(gain, z0)
