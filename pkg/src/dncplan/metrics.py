"""Disparity error metrics and the feature-distillation objective."""

import numpy as np

from ._validation import check_eval_inputs
from .exceptions import ShapeMismatchError

PYRAMID_LEVELS = (4, 8, 16, 32)


def bp_x(pred, gt, x, mask=None):
    """Percentage of evaluated pixels whose absolute error is strictly above ``x``."""
    err, _ = check_eval_inputs(pred, gt, mask)
    return 100.0 * np.count_nonzero(err > x) / err.size


def d1(pred, gt, mask=None):
    """KITTI outlier rate: error above 3 px *and* above 5% of the ground truth."""
    err, ref = check_eval_inputs(pred, gt, mask)
    bad = (err > 3.0) & (err > 0.05 * np.abs(ref))
    return 100.0 * np.count_nonzero(bad) / err.size


def epe(pred, gt, mask=None):
    err, _ = check_eval_inputs(pred, gt, mask)
    return float(err.mean())


def evaluate(pred, gt, mask=None):
    """The ``eval`` row: BP-1, BP-2, BP-3, D1, EPE."""
    return {
        "BP-1": bp_x(pred, gt, 1.0, mask),
        "BP-2": bp_x(pred, gt, 2.0, mask),
        "BP-3": bp_x(pred, gt, 3.0, mask),
        "D1": d1(pred, gt, mask),
        "EPE": epe(pred, gt, mask),
    }


def feature_distill_mse(student, teacher):
    """Mean over pyramid levels of each level's mean squared difference.

    ``student`` and ``teacher`` are sequences (or dicts keyed by stride) of
    equally shaped arrays; any channel projection happens upstream.
    """
    if isinstance(student, dict) or isinstance(teacher, dict):
        if not (isinstance(student, dict) and isinstance(teacher, dict)):
            raise TypeError("pass both pyramids as dicts or both as sequences")
        if set(student) != set(teacher):
            raise ShapeMismatchError(
                f"pyramid levels differ: {sorted(student)} vs {sorted(teacher)}"
            )
        keys = sorted(student)
        student = [student[k] for k in keys]
        teacher = [teacher[k] for k in keys]
    if len(student) != len(teacher) or not student:
        raise ShapeMismatchError("pyramids need the same, non-zero number of levels")
    per_level = []
    for i, (s, t) in enumerate(zip(student, teacher)):
        s = np.asarray(s, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        if s.shape != t.shape:
            raise ShapeMismatchError(f"level {i}: {s.shape} vs {t.shape}")
        per_level.append(float(np.mean((s - t) ** 2)))
    return float(np.mean(per_level))
