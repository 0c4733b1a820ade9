"""Input validation helpers shared by the estimators and functions."""

import numpy as np

from .exceptions import EmptyMaskError, ShapeMismatchError


def check_map(arr, name="map"):
    """Coerce to a 2-D float64 array."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D array, got shape {arr.shape}")
    return arr


def check_same_shape(a, b, what="arrays"):
    if np.shape(a) != np.shape(b):
        raise ShapeMismatchError(f"{what} differ in shape: {np.shape(a)} vs {np.shape(b)}")


def check_eval_inputs(pred, gt, mask=None):
    """Validate a prediction/ground-truth pair and return the evaluated errors.

    When ``mask`` is omitted every finite, positive ground-truth pixel counts.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    check_same_shape(pred, gt, "prediction and ground truth")
    if mask is None:
        mask = np.isfinite(gt) & (gt > 0)
    else:
        mask = np.asarray(mask, dtype=bool)
        check_same_shape(gt, mask, "ground truth and mask")
    if not mask.any():
        raise EmptyMaskError("evaluation mask selects no pixels")
    return np.abs(pred[mask] - gt[mask]), gt[mask]
