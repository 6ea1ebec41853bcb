"""Bootstrap particle filter over planar pose (x, y, psi).

Prediction composes body-frame odometry increments with additive noise;
correction reweights by sensor log-likelihoods with systematic resampling
when the effective sample size drops below half the population.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .sensors import Observation, log_likelihood_particles
from .world import Pose, SemanticMap, wrap_angle

DEFAULT_PARTICLES = 500
MOTION_NOISE = (0.03, 0.01, 0.015)   # per-substep 1-sigma (dx, dy, dpsi)
_UNDERFLOW = 1e-300


def compose(poses: np.ndarray, increment: np.ndarray) -> np.ndarray:
    """Apply a body-frame increment (dx, dy, dpsi) to poses (..., 3)."""
    poses = np.asarray(poses, dtype=float)
    dx, dy, dpsi = increment[..., 0], increment[..., 1], increment[..., 2]
    c, s = np.cos(poses[..., 2]), np.sin(poses[..., 2])
    out = np.empty_like(poses)
    out[..., 0] = poses[..., 0] + c * dx - s * dy
    out[..., 1] = poses[..., 1] + s * dx + c * dy
    out[..., 2] = wrap_angle(poses[..., 2] + dpsi)
    return out


def relative_pose(ref: np.ndarray, pose: np.ndarray) -> np.ndarray:
    """Body-frame increment taking `ref` to `pose` (inverse of compose)."""
    d = np.asarray(pose, dtype=float) - np.asarray(ref, dtype=float)
    c, s = np.cos(ref[..., 2]), np.sin(ref[..., 2])
    out = np.empty_like(np.asarray(pose, dtype=float))
    out[..., 0] = c * d[..., 0] + s * d[..., 1]
    out[..., 1] = -s * d[..., 0] + c * d[..., 1]
    out[..., 2] = wrap_angle(d[..., 2])
    return out


@dataclass
class ParticleSet:
    poses: np.ndarray                 # (P, 3)
    weights: np.ndarray               # (P,), normalized
    covs: np.ndarray | None = None    # (P, 2, 2) per-particle planar covariance
    degenerate: bool = False          # set when all weights underflowed

    def __post_init__(self):
        self.poses = np.atleast_2d(np.asarray(self.poses, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float)
        if self.poses.shape != (len(self.weights), 3):
            raise ValueError("poses must be (P, 3) matching weights")
        if self.covs is None:
            # point-mass particles get a 5 cm regularizing covariance
            self.covs = np.broadcast_to(0.0025 * np.eye(2),
                                        (len(self.weights), 2, 2)).copy()

    @classmethod
    def around(cls, pose: Pose, rng: np.random.Generator, n: int = DEFAULT_PARTICLES,
               sigma_xy: float = 0.5, sigma_psi: float = 0.1) -> "ParticleSet":
        p = np.tile(pose.as_array(), (n, 1))
        p[:, :2] += rng.normal(0, sigma_xy, (n, 2))
        p[:, 2] = wrap_angle(p[:, 2] + rng.normal(0, sigma_psi, n))
        c = np.broadcast_to(sigma_xy ** 2 * np.eye(2), (n, 2, 2)).copy()
        return cls(p, np.full(n, 1.0 / n), covs=c)

    def ess(self) -> float:
        return 1.0 / float((self.weights ** 2).sum())

    def mean_pose(self) -> np.ndarray:
        w = self.weights
        xy = w @ self.poses[:, :2]
        s = float(w @ np.sin(self.poses[:, 2]))
        c = float(w @ np.cos(self.poses[:, 2]))
        return np.array([xy[0], xy[1], np.arctan2(s, c)])


def predict(ps: ParticleSet, increment: np.ndarray, rng: np.random.Generator,
            noise: tuple[float, float, float] = MOTION_NOISE) -> ParticleSet:
    """Propagate every particle through a noisy copy of the increment."""
    n = len(ps.weights)
    inc = np.asarray(increment, dtype=float)[None, :] \
        + rng.normal(0, 1, (n, 3)) * np.asarray(noise)
    return replace(ps, poses=compose(ps.poses, inc), covs=ps.covs.copy(),
                   degenerate=False)


def _systematic_resample(ps: ParticleSet, rng: np.random.Generator) -> ParticleSet:
    n = len(ps.weights)
    positions = (np.arange(n) + rng.random()) / n
    idx = np.searchsorted(np.cumsum(ps.weights), positions)
    idx = np.clip(idx, 0, n - 1)
    return ParticleSet(ps.poses[idx].copy(), np.full(n, 1.0 / n),
                       covs=ps.covs[idx].copy(), degenerate=ps.degenerate)


def update(ps: ParticleSet, obs: Observation, smap: SemanticMap,
           rng: np.random.Generator) -> ParticleSet:
    """Reweight by the observation; resample below ESS = P/2.

    A total weight underflow reinitializes to uniform and flags the set
    as degenerate instead of raising.
    """
    if obs.is_empty():
        return replace(ps, poses=ps.poses.copy(), weights=ps.weights.copy(),
                       covs=ps.covs.copy())
    with np.errstate(over="ignore", invalid="ignore"):
        ll = log_likelihood_particles(obs, ps.poses, smap)
        logw = np.log(np.maximum(ps.weights, _UNDERFLOW)) + ll
        logw -= logw.max()
        w = np.exp(logw)
        total = w.sum()
    if not np.isfinite(total) or total <= _UNDERFLOW:
        n = len(ps.weights)
        return ParticleSet(ps.poses.copy(), np.full(n, 1.0 / n),
                           covs=ps.covs.copy(), degenerate=True)
    out = ParticleSet(ps.poses.copy(), w / total, covs=ps.covs.copy())
    if out.ess() < len(out.weights) / 2.0:
        out = _systematic_resample(out, rng)
    return out


def posterior_cov(ps: ParticleSet) -> np.ndarray:
    """Weighted planar covariance including per-particle covariance mass."""
    w = ps.weights
    mu = w @ ps.poses[:, :2]
    d = ps.poses[:, :2] - mu[None, :]
    scatter = (w[:, None, None] * (d[:, :, None] * d[:, None, :])).sum(axis=0)
    if float((d * d).sum()) < 1e-18:
        # collapsed cloud: fall back on the stored per-particle covariance so
        # the posterior never reports exactly zero uncertainty
        return (w[:, None, None] * ps.covs).sum(axis=0)
    return scatter


def risk_sigma(ps: ParticleSet) -> float:
    """Scalar localization risk: sqrt of the planar covariance trace."""
    return float(np.sqrt(np.trace(posterior_cov(ps))))
