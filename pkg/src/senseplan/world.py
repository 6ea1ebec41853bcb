"""Procedural 2-D workspaces: occupancy/lighting/visibility layers, goals, crops.

World frame: x right, y up, meters. Layers are indexed [iy, ix] with cell (0,0)
anchored at `origin`; cell centers sit at origin + (i + 0.5) * resolution.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

RESOLUTION = 0.25          # meters per cell
FOOTPRINT_RADIUS = 0.5     # robot footprint disk, meters
LUX_FULL_SCALE = 60_000.0  # lighting channel stores lux / this


class GenerationError(RuntimeError):
    """No feasible world found within the retry budget."""


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    a = np.mod(-a + np.pi, 2.0 * np.pi)
    return np.pi - a


@dataclass
class Pose:
    x: float
    y: float
    psi: float

    def __post_init__(self):
        self.psi = float(wrap_angle(self.psi))

    def as_array(self):
        return np.array([self.x, self.y, self.psi])


@dataclass
class GoalDisk:
    center: tuple[float, float]
    radius: float = 6.0


@dataclass
class SemanticMap:
    resolution: float
    occupancy: np.ndarray       # {0,1} float32
    lighting: np.ndarray        # [0,1] float32, lux / LUX_FULL_SCALE
    visibility: np.ndarray      # [0,1] float32, GNSS quality
    origin: tuple[float, float] = (0.0, 0.0)
    landmarks: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        if not (self.occupancy.shape == self.lighting.shape == self.visibility.shape):
            raise ValueError("layer grids must share dimensions")

    @property
    def shape(self):
        return self.occupancy.shape

    @property
    def extent_m(self) -> float:
        return self.occupancy.shape[0] * self.resolution

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        ix = int(np.floor((x - self.origin[0]) / self.resolution))
        iy = int(np.floor((y - self.origin[1]) / self.resolution))
        return iy, ix

    def in_bounds(self, x, y) -> bool:
        n = self.occupancy.shape[0]
        iy, ix = self.cell_of(x, y)
        return 0 <= iy < n and 0 <= ix < n

    def value_at(self, layer: np.ndarray, x: float, y: float, outside: float = 0.0) -> float:
        iy, ix = self.cell_of(x, y)
        n = layer.shape[0]
        if 0 <= iy < n and 0 <= ix < n:
            return float(layer[iy, ix])
        return outside

    def inflated_occupancy(self, radius_m: float = FOOTPRINT_RADIUS) -> np.ndarray:
        """Occupancy dilated by the footprint disk (for cell-level planning)."""
        r = int(np.ceil(radius_m / self.resolution))
        yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
        disk = (xx * xx + yy * yy) <= r * r
        return ndimage.binary_dilation(self.occupancy > 0.5, structure=disk)


def _smooth_field(rng: np.random.Generator, n: int, n_bumps: int, sharp: float) -> np.ndarray:
    """Sum of random Gaussian bumps, normalized to [0, 1]."""
    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    out = np.zeros((n, n))
    for _ in range(n_bumps):
        cy, cx = rng.uniform(0, n, size=2)
        s = rng.uniform(0.1, sharp) * n
        out += rng.uniform(0.3, 1.0) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
    lo, hi = out.min(), out.max()
    return (out - lo) / (hi - lo) if hi > lo else np.zeros((n, n))


def _boundary_landmarks(rng: np.random.Generator, occ: np.ndarray, res: float,
                        rate: float = 0.08) -> np.ndarray:
    """Poisson thinning of obstacle-boundary cells into visual features."""
    solid = occ > 0.5
    boundary = solid & ~ndimage.binary_erosion(solid)
    iy, ix = np.nonzero(boundary)
    keep = rng.random(len(iy)) < rate
    pts = np.stack([(ix[keep] + 0.5) * res, (iy[keep] + 0.5) * res], axis=1)
    return pts


_LIGHT_PROFILES = {
    # (base level, bump amplitude) as fractions of full scale
    "day": (0.15, 0.6),
    "night": (0.0, 1.2e-4),
    "dusk": (0.0, 0.02),
}


def generate_world(seed: int, radius_m: float = 50.0, obstacle_density: float = 0.12,
                   lighting_profile: str = "day", goal_radius: float = 6.0,
                   separation: tuple[float, float] | None = None,
                   max_retries: int = 40):
    """Build a feasible (map, goal, start) triple; identical seed, identical output.

    `separation` bounds the start-goal distance in meters; default scales with
    the world size.
    """
    if not 25.0 <= radius_m <= 100.0:
        raise ValueError("radius_m must lie in [25, 100]")
    if not 0.0 <= obstacle_density <= 0.3:
        raise ValueError("obstacle_density must lie in [0, 0.3]")
    if lighting_profile not in _LIGHT_PROFILES:
        raise ValueError(f"unknown lighting profile {lighting_profile!r}")

    # local import, cycle avoidance
    from .oracle import PLAN_CLEARANCE_M, PlanningError, astar_plan

    rng = np.random.default_rng(seed)
    n = int(round(radius_m / RESOLUTION))
    if separation is None:
        separation = (0.3 * radius_m, 0.6 * radius_m)

    for _ in range(max_retries):
        occ = np.zeros((n, n), dtype=np.float32)
        yy, xx = np.mgrid[0:n, 0:n].astype(float)
        target = obstacle_density * n * n
        while occ.sum() < target:
            cy, cx = rng.uniform(0.1 * n, 0.9 * n, size=2)
            r = rng.uniform(0.75, 2.5) / RESOLUTION
            occ[((xx - cx) ** 2 + (yy - cy) ** 2) <= r * r] = 1.0

        base, amp = _LIGHT_PROFILES[lighting_profile]
        light = np.clip(base + amp * _smooth_field(rng, n, 6, 0.4), 0.0, 1.0).astype(np.float32)

        vis = np.ones((n, n), dtype=np.float32)
        denied = _smooth_field(rng, n, 3, 0.15)
        vis = np.clip(vis - 1.3 * denied, 0.0, 1.0).astype(np.float32)

        landmarks = _boundary_landmarks(rng, occ, RESOLUTION)
        smap = SemanticMap(RESOLUTION, occ, light, vis, landmarks=landmarks)
        free = ~smap.inflated_occupancy(PLAN_CLEARANCE_M + RESOLUTION)

        # start and goal sit away from the walls so planned clearance holds
        m = int(np.ceil((PLAN_CLEARANCE_M + RESOLUTION) / RESOLUTION)) + 4
        free[:m, :] = free[-m:, :] = False
        free[:, :m] = free[:, -m:] = False

        placed = None
        for _ in range(60):
            siy, six = rng.integers(4, n - 4, size=2)
            giy, gix = rng.integers(4, n - 4, size=2)
            if not (free[siy, six] and free[giy, gix]):
                continue
            sp = ((six + 0.5) * RESOLUTION, (siy + 0.5) * RESOLUTION)
            gp = ((gix + 0.5) * RESOLUTION, (giy + 0.5) * RESOLUTION)
            d = np.hypot(sp[0] - gp[0], sp[1] - gp[1])
            if not separation[0] <= d <= separation[1]:
                continue
            try:
                astar_plan(smap, Pose(sp[0], sp[1], 0.0), GoalDisk(gp, goal_radius))
            except PlanningError:
                continue
            heading = np.arctan2(gp[1] - sp[1], gp[0] - sp[0])
            placed = (Pose(sp[0], sp[1], float(heading)), GoalDisk(gp, goal_radius))
            break
        if placed is not None:
            start, goal = placed
            return smap, goal, start
    raise GenerationError(f"no feasible world for seed={seed} after {max_retries} retries")


def is_collision(smap: SemanticMap, pose: Pose, radius_m: float = FOOTPRINT_RADIUS) -> bool:
    """True iff any occupied cell intersects the footprint disk (out of bounds counts)."""
    n = smap.occupancy.shape[0]
    res = smap.resolution
    px = pose.x - smap.origin[0]
    py = pose.y - smap.origin[1]
    if not (radius_m <= px <= n * res - radius_m and radius_m <= py <= n * res - radius_m):
        return True
    ix0 = int(np.floor((px - radius_m) / res))
    ix1 = int(np.floor((px + radius_m) / res))
    iy0 = int(np.floor((py - radius_m) / res))
    iy1 = int(np.floor((py + radius_m) / res))
    for iy in range(max(iy0, 0), min(iy1, n - 1) + 1):
        for ix in range(max(ix0, 0), min(ix1, n - 1) + 1):
            if smap.occupancy[iy, ix] <= 0.5:
                continue
            # nearest point of the cell rectangle to the disk center
            nx = np.clip(px, ix * res, (ix + 1) * res)
            ny = np.clip(py, iy * res, (iy + 1) * res)
            if (nx - px) ** 2 + (ny - py) ** 2 <= radius_m * radius_m:
                return True
    return False


def crop_ego(smap: SemanticMap, center: Pose, side_m: float, out_cells: int = 64) -> np.ndarray:
    """Axis-aligned window resampled to (out, out, 3) by area-weighted averaging.

    Cells outside the map read as occupied, lighting 0, visibility 0.
    """
    if side_m <= 0:
        raise ValueError("side_m must be positive")
    n = smap.occupancy.shape[0]
    res = smap.resolution
    ss = max(1, int(np.ceil(side_m / (out_cells * res))) + 1)  # subsamples per axis
    step = side_m / (out_cells * ss)
    offs = (np.arange(out_cells * ss) + 0.5) * step
    wx = center.x - side_m / 2.0 + offs - smap.origin[0]
    wy = center.y - side_m / 2.0 + offs - smap.origin[1]
    ix = np.floor(wx / res).astype(int)
    iy = np.floor(wy / res).astype(int)
    inside_x = (ix >= 0) & (ix < n)
    inside_y = (iy >= 0) & (iy < n)
    ixc = np.clip(ix, 0, n - 1)
    iyc = np.clip(iy, 0, n - 1)
    inside = inside_y[:, None] & inside_x[None, :]

    out = np.empty((out_cells, out_cells, 3))
    for k, (layer, fill) in enumerate(((smap.occupancy, 1.0), (smap.lighting, 0.0),
                                       (smap.visibility, 0.0))):
        samp = np.where(inside, layer[np.ix_(iyc, ixc)], fill)
        out[:, :, k] = samp.reshape(out_cells, ss, out_cells, ss).mean(axis=(1, 3))
    return out


def goal_mask(goal: GoalDisk, center: Pose, side_m: float, out_cells: int = 64) -> np.ndarray:
    """Binary (out, out) image: cells whose centers lie within the goal disk.

    A goal beyond the window is projected to a carrot disk on the window
    edge along the goal bearing, so the conditioning never goes blank.
    """
    step = side_m / out_cells
    coords = center.x - side_m / 2.0 + (np.arange(out_cells) + 0.5) * step
    coordsy = center.y - side_m / 2.0 + (np.arange(out_cells) + 0.5) * step
    gx, gy, radius = goal.center[0], goal.center[1], goal.radius
    vx, vy = gx - center.x, gy - center.y
    d = np.hypot(vx, vy)
    if d - radius > side_m / 2.0 and d > 1e-9:
        gx = center.x + vx / d * 0.4 * side_m
        gy = center.y + vy / d * 0.4 * side_m
        radius = 0.1 * side_m
    dx = coords[None, :] - gx
    dy = coordsy[:, None] - gy
    return (dx * dx + dy * dy <= radius ** 2).astype(np.float64)


# ------------------------------------------------------------------ save/load

_WORLD_MAGIC = b"JWLD"


def save_world(path, smap: SemanticMap, goal: GoalDisk, start: Pose, seed: int):
    header = {
        "seed": seed,
        "resolution": smap.resolution,
        "cells": int(smap.occupancy.shape[0]),
        "origin": list(smap.origin),
        "goal": {"center": list(goal.center), "radius": goal.radius},
        "start": {"x": start.x, "y": start.y, "psi": start.psi},
        "landmarks": smap.landmarks.tolist(),
    }
    hb = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_WORLD_MAGIC)
        f.write(struct.pack("<I", len(hb)))
        f.write(hb)
        for layer in (smap.occupancy, smap.lighting, smap.visibility):
            f.write(np.ascontiguousarray(layer, dtype="<f4").tobytes())


def load_world(path):
    with open(path, "rb") as f:
        if f.read(4) != _WORLD_MAGIC:
            raise IOError(f"not a world file: {path}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        n = header["cells"]
        layers = []
        for _ in range(3):
            layers.append(np.frombuffer(f.read(4 * n * n), dtype="<f4").reshape(n, n).copy())
    smap = SemanticMap(header["resolution"], *layers, origin=tuple(header["origin"]),
                       landmarks=np.array(header["landmarks"]).reshape(-1, 2))
    goal = GoalDisk(tuple(header["goal"]["center"]), header["goal"]["radius"])
    s = header["start"]
    return smap, goal, Pose(s["x"], s["y"], s["psi"]), header["seed"]
