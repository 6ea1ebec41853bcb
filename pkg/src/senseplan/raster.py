"""Fixed-size belief image: a 64x64x5 summary of the particle cloud.

Channels: 0 probability mass, 1 mean sin(psi) remapped to [0,1], 2 mean
cos(psi) remapped, 3 normalized log-det of the per-cell planar covariance,
4 circular variance of heading. Unoccupied cells read (0, 0.5, 0.5, 0, 0).
Cost is linear in the particle count: one pass of cell-indexed accumulation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimator import ParticleSet, posterior_cov

RASTER_CELLS = 64
WINDOW_MIN_M = 32.0
WINDOW_MAX_M = 96.0
LOGDET_LO = -6.0
LOGDET_HI = 0.0


@dataclass
class BeliefRaster:
    image: np.ndarray            # (64, 64, 5) float64 in [0, 1]
    window_m: float              # physical side length
    origin: tuple[float, float]  # world coords of the window's low corner

    @property
    def cell_m(self) -> float:
        return self.window_m / self.image.shape[0]


def window_side(cov: np.ndarray) -> float:
    """Window side in meters: 3 sigma of the widest axis, clipped to [32, 96]."""
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (2, 2) or not np.allclose(cov, cov.T, atol=1e-9):
        raise ValueError("covariance must be symmetric 2x2")
    ev = np.linalg.eigvalsh(cov)
    if ev[0] < -1e-9:
        raise ValueError("covariance must be positive semi-definite")
    sigma = float(np.sqrt(max(ev[1], 0.0)))
    return float(np.clip(np.ceil(3.0 * sigma), WINDOW_MIN_M, WINDOW_MAX_M))


def rasterize(ps: ParticleSet, out_cells: int = RASTER_CELLS) -> BeliefRaster:
    side = window_side(posterior_cov(ps))
    cell = side / out_cells
    mean = ps.weights @ ps.poses[:, :2]
    origin = (float(mean[0] - side / 2.0), float(mean[1] - side / 2.0))

    rel = ps.poses[:, :2] - np.asarray(mean)[None, :]
    u = np.floor((rel + side / 2.0) / cell).astype(np.int64)
    inside = (u[:, 0] >= 0) & (u[:, 0] < out_cells) & (u[:, 1] >= 0) & (u[:, 1] < out_cells)
    ix, iy = u[inside, 0], u[inside, 1]
    flat = iy * out_cells + ix
    w = ps.weights[inside]
    x, y = rel[inside, 0], rel[inside, 1]
    sn, cs = np.sin(ps.poses[inside, 2]), np.cos(ps.poses[inside, 2])
    cv = ps.covs[inside]

    nc = out_cells * out_cells

    def acc(v):
        return np.bincount(flat, weights=v, minlength=nc)

    W = acc(w)
    sums = {k: acc(w * v) for k, v in
            (("x", x), ("y", y), ("xx", x * x), ("yy", y * y), ("xy", x * y),
             ("s", sn), ("c", cs),
             ("c00", cv[:, 0, 0]), ("c01", cv[:, 0, 1]), ("c11", cv[:, 1, 1]))}
    occ = W > 0.0
    Ws = np.where(occ, W, 1.0)

    ms, mc = sums["s"] / Ws, sums["c"] / Ws
    mx, my = sums["x"] / Ws, sums["y"] / Ws
    # per-cell mixture covariance: within-particle mean + between-particle scatter
    c00 = sums["c00"] / Ws + sums["xx"] / Ws - mx * mx
    c11 = sums["c11"] / Ws + sums["yy"] / Ws - my * my
    c01 = sums["c01"] / Ws + sums["xy"] / Ws - mx * my
    det = np.maximum(c00 * c11 - c01 * c01, 0.0)
    with np.errstate(divide="ignore"):
        logdet = np.where(det > 0.0, np.log(det), LOGDET_LO)
    ch3 = (np.clip(logdet, LOGDET_LO, LOGDET_HI) - LOGDET_LO) / (LOGDET_HI - LOGDET_LO)
    ch4 = 1.0 - np.sqrt(np.clip(ms * ms + mc * mc, 0.0, 1.0))

    img = np.zeros((nc, 5))
    img[:, 0] = W
    img[:, 1] = np.where(occ, 0.5 * ms + 0.5, 0.5)
    img[:, 2] = np.where(occ, 0.5 * mc + 0.5, 0.5)
    img[:, 3] = np.where(occ, ch3, 0.0)
    img[:, 4] = np.where(occ, ch4, 0.0)
    img = np.clip(img, 0.0, 1.0)
    return BeliefRaster(img.reshape(out_cells, out_cells, 5), side, origin)
