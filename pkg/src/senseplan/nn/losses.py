"""Differentiable losses shared by the planner and scheduler."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor


def _to_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def gaussian_nll(target, mean, logvar) -> Tensor:
    """Per-waypoint diagonal-Gaussian NLL, without the 1/2 and log(2*pi) constants.

    target/mean: (..., H, D) or (..., H); logvar: (..., H), one log-variance per
    waypoint covering its D residual dims. Returns sum over all waypoints of
    ||target - mean||^2 * exp(-logvar) + logvar.
    """
    target, mean, logvar = _to_tensor(target), _to_tensor(mean), _to_tensor(logvar)
    if target.shape != mean.shape:
        raise ShapeError(f"target {target.shape} vs mean {mean.shape}")
    if not np.all(np.isfinite(logvar.data)):
        raise ShapeError("logvar must be finite")
    diff = target - mean
    if target.data.ndim == logvar.data.ndim:          # scalar residual per waypoint
        sq = diff * diff
    elif target.data.ndim == logvar.data.ndim + 1:    # D-dim residual per waypoint
        sq = (diff * diff).sum(axis=-1)
    else:
        raise ShapeError(f"logvar shape {logvar.shape} does not match {target.shape}")
    if sq.shape != logvar.shape:
        raise ShapeError(f"residual {sq.shape} vs logvar {logvar.shape}")
    return (sq * (-logvar).exp() + logvar).sum()


def kl_diag_gaussian(mean_a, logvar_a, mean_b, logvar_b) -> Tensor:
    """Closed-form KL(N_a || N_b) between diagonal Gaussians, summed over dims."""
    mean_a, logvar_a = _to_tensor(mean_a), _to_tensor(logvar_a)
    mean_b, logvar_b = _to_tensor(mean_b), _to_tensor(logvar_b)
    if not (mean_a.shape == logvar_a.shape == mean_b.shape == logvar_b.shape):
        raise ShapeError("kl_diag_gaussian requires four equal shapes")
    dl = logvar_a - logvar_b
    diff = mean_a - mean_b
    term = dl.exp() + diff * diff * (-logvar_b).exp() - 1.0 - dl
    return term.sum() * 0.5
