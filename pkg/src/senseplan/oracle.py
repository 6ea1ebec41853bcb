"""Expert demonstrations: grid planning, path tracking, replayed snippets.

The corpus generator replays each planned route several times under motion
noise and a randomly forced sensor mask, runs the particle filter alongside,
and records one snippet per decision tick. Waypoints are body-frame substep
increments chained from the belief mean, so localization error under poor
masks shows up directly in the cross-replay scatter.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .dataset import Snippet, lighting_bin
from .estimator import (MOTION_NOISE, ParticleSet, compose, predict,
                        relative_pose, risk_sigma, update)
from .raster import rasterize
from .sensors import IMU_PSI_SIGMA, IMU_XY_SIGMA, SensorMask, observe
from .world import (FOOTPRINT_RADIUS, LUX_FULL_SCALE, GoalDisk, Pose,
                    SemanticMap, crop_ego, goal_mask, is_collision, wrap_angle)

HORIZON = 8
SUBSTEPS = 8
DT = 0.125
REPLAYS = 16
SIGMA_TARGET_FLOOR = 1e-6
DIVERGENCE_SIGMA = 10.0      # meters; particle cloud beyond this is lost
ARC_BIN_M = 1.0

_SQRT2 = float(np.sqrt(2.0))


class PlanningError(RuntimeError):
    """No collision-free route exists under the inflated grid."""


# Planned routes keep clearance beyond the footprint to absorb motion noise,
# lookahead corner cutting, and the cell-center discretization error.
PLAN_CLEARANCE_M = FOOTPRINT_RADIUS + 0.4


def astar_plan(smap: SemanticMap, start: Pose, goal: GoalDisk,
               inflate_m: float = PLAN_CLEARANCE_M) -> np.ndarray:
    """Shortest 8-connected grid route to the goal disk, as (N, 2) waypoints.

    Diagonal moves cost sqrt(2) cells and may not cut occupied corners.
    """
    occ = smap.inflated_occupancy(inflate_m)
    n = occ.shape[0]
    res = smap.resolution
    siy, six = smap.cell_of(start.x, start.y)
    if not (0 <= siy < n and 0 <= six < n):
        raise PlanningError("start outside the map")
    if occ[siy, six]:
        raise PlanningError("start cell is blocked")

    gx = (goal.center[0] - smap.origin[0]) / res
    gy = (goal.center[1] - smap.origin[1]) / res
    r_cells = goal.radius / res

    def in_goal(iy, ix):
        return (ix + 0.5 - gx) ** 2 + (iy + 0.5 - gy) ** 2 <= r_cells ** 2

    def h(iy, ix):
        return max(0.0, np.hypot(ix + 0.5 - gx, iy + 0.5 - gy) - r_cells)

    moves = ((0, 1, 1.0), (0, -1, 1.0), (1, 0, 1.0), (-1, 0, 1.0),
             (1, 1, _SQRT2), (1, -1, _SQRT2), (-1, 1, _SQRT2), (-1, -1, _SQRT2))
    g = {(siy, six): 0.0}
    came: dict = {}
    pq = [(h(siy, six), siy, six)]
    found = None
    while pq:
        f, iy, ix = heapq.heappop(pq)
        if f > g.get((iy, ix), np.inf) + h(iy, ix) + 1e-12:
            continue
        if in_goal(iy, ix):
            found = (iy, ix)
            break
        gc = g[(iy, ix)]
        for dy, dx, c in moves:
            jy, jx = iy + dy, ix + dx
            if not (0 <= jy < n and 0 <= jx < n) or occ[jy, jx]:
                continue
            if dy and dx and (occ[iy, jx] or occ[jy, ix]):
                continue
            ng = gc + c
            if ng < g.get((jy, jx), np.inf) - 1e-12:
                g[(jy, jx)] = ng
                came[(jy, jx)] = (iy, ix)
                heapq.heappush(pq, (ng + h(jy, jx), jy, jx))
    if found is None:
        raise PlanningError("goal unreachable")
    cells = [found]
    while cells[-1] != (siy, six):
        cells.append(came[cells[-1]])
    cells.reverse()
    pts = np.array([[(ix + 0.5) * res + smap.origin[0],
                     (iy + 0.5) * res + smap.origin[1]] for iy, ix in cells])
    return pts


def path_length(path_xy: np.ndarray) -> float:
    if len(path_xy) < 2:
        return 0.0
    return float(np.hypot(*np.diff(path_xy, axis=0).T).sum())


@dataclass
class TrackParams:
    v_max: float = 1.0
    dt: float = DT
    lookahead: float = 1.5
    omega_max: float = 1.5
    goal_tol: float = 0.5


class PurePursuit:
    """Lookahead point chaser over a polyline, unicycle commands."""

    def __init__(self, path_xy: np.ndarray, params: TrackParams | None = None):
        self.path = np.asarray(path_xy, dtype=float)
        self.p = params or TrackParams()
        seg = np.diff(self.path, axis=0) if len(self.path) > 1 else np.zeros((0, 2))
        self.cum = np.concatenate([[0.0], np.cumsum(np.hypot(seg[:, 0], seg[:, 1]))])
        self._s = 0.0   # monotone progress, arc-length meters

    def progress(self, pose_xy: np.ndarray) -> float:
        """Arc-length of the nearest on-path point at or past current progress."""
        if len(self.path) < 2:
            return 0.0
        a = self.path[:-1]
        seg = self.path[1:] - a
        lens = np.hypot(seg[:, 0], seg[:, 1])
        t = ((pose_xy[None, :] - a) * seg).sum(axis=1) / np.maximum(lens ** 2, 1e-18)
        t = np.clip(t, 0.0, 1.0)
        proj = a + t[:, None] * seg
        arcs = self.cum[:-1] + t * lens
        # never regress: only candidate points at or past current progress
        behind = arcs < self._s - 1e-9
        d = np.hypot(proj[:, 0] - pose_xy[0], proj[:, 1] - pose_xy[1])
        d[behind] = np.inf
        if np.isinf(d).all():
            return self._s
        self._s = float(arcs[np.argmin(d)])
        return self._s

    def done(self, pose_xy: np.ndarray) -> bool:
        return float(np.hypot(*(self.path[-1] - pose_xy))) <= self.p.goal_tol

    def command(self, pose: np.ndarray) -> tuple[float, float]:
        """(v, omega) toward the lookahead point from pose (3,)."""
        s = self.progress(pose[:2])
        s_t = min(s + self.p.lookahead, self.cum[-1])
        i = int(np.searchsorted(self.cum, s_t, side="right") - 1)
        if i >= len(self.path) - 1:
            target = self.path[-1]
        else:
            f = (s_t - self.cum[i]) / max(self.cum[i + 1] - self.cum[i], 1e-12)
            target = self.path[i] + f * (self.path[i + 1] - self.path[i])
        alpha = float(wrap_angle(np.arctan2(target[1] - pose[1],
                                            target[0] - pose[0]) - pose[2]))
        dist = float(np.hypot(*(self.path[-1] - pose[:2])))
        v = self.p.v_max * (1.0 if abs(alpha) < np.pi / 3 else 0.3)
        v = min(v, max(dist, 0.0) / self.p.dt)   # no overshoot at the path end
        omega = float(np.clip(2.0 * v * np.sin(alpha) / self.p.lookahead,
                              -self.p.omega_max, self.p.omega_max))
        return v, omega


def track(path_xy: np.ndarray, start: Pose, params: TrackParams | None = None,
          max_steps: int | None = None):
    """Noise-free rollout; returns (poses (S+1, 3), increments (S, 3))."""
    params = params or TrackParams()
    ctl = PurePursuit(path_xy, params)
    if max_steps is None:
        max_steps = int(4 * (path_length(path_xy) + 5.0) / (params.v_max * params.dt))
    pose = start.as_array()
    poses, incs = [pose.copy()], []
    for _ in range(max_steps):
        if ctl.done(pose[:2]):
            break
        v, om = ctl.command(pose)
        inc = np.array([v * params.dt, 0.0, om * params.dt])
        pose = compose(pose, inc)
        poses.append(pose.copy())
        incs.append(inc)
    return np.array(poses), np.array(incs) if incs else np.zeros((0, 3))


def _tick_snippets(smap, ctl, mask, ps, true_pose, rng, params, noise_scale):
    """Advance one decision tick; returns the record plus updated state."""
    bel = ps.mean_pose()
    rast = rasterize(ps)
    sub_poses = []
    odom = np.zeros(3)
    inc_cmds = np.zeros((SUBSTEPS, 3))
    pose = true_pose
    new_ps = ps
    for k in range(SUBSTEPS):
        v, om = ctl.command(pose)
        cmd = np.array([v * params.dt, 0.0, om * params.dt])
        # actuation noise scales with commanded motion: no slip at rest
        f = min(1.0, float(np.hypot(cmd[0], cmd[1])) / (params.v_max * params.dt))
        executed = cmd + rng.normal(0, 1, 3) * np.asarray(MOTION_NOISE) \
            * (noise_scale * f)
        pose = compose(pose, executed)
        sub_poses.append(pose.copy())
        measured = executed + rng.normal(0, [IMU_XY_SIGMA / SUBSTEPS,
                                             IMU_XY_SIGMA / SUBSTEPS,
                                             IMU_PSI_SIGMA / SUBSTEPS]) * noise_scale
        new_ps = predict(new_ps, measured, rng)
        inc_cmds[k] = executed
        odom = odom + measured
    obs = observe(smap, Pose(*pose), mask, rng, true_increment=odom,
                  noise_scale=noise_scale)
    new_ps = update(new_ps, obs, smap, rng)
    # waypoints: chain of body-frame increments starting at the belief mean
    traj = np.zeros((HORIZON, 3))
    ref = bel
    for k in range(HORIZON):
        traj[k] = relative_pose(ref, sub_poses[k])
        ref = sub_poses[k]
    record = {
        "raster": rast, "belief": bel, "true": true_pose.copy(), "traj": traj,
        "window_m": rast.window_m,
    }
    return record, pose, new_ps


def generate_snippets(smap: SemanticMap, goal: GoalDisk, start: Pose,
                      world_seed: int, rng: np.random.Generator,
                      n_replays: int = REPLAYS, noise_scale: float = 1.0,
                      params: TrackParams | None = None,
                      lighting_profile: str | None = None) -> list[Snippet]:
    """Replay the planned route under forced masks; one snippet per tick."""
    params = params or TrackParams()
    path = astar_plan(smap, start, goal)
    max_ticks = max(8, int(np.ceil(4 * path_length(path) / (params.v_max * 1.0))))

    per_replay = []        # list of per-tick records per replay
    masks = []
    for r in range(n_replays):
        mask = SensorMask.from_switchable(rng.integers(0, 2, 5))
        masks.append(mask)
        ctl = PurePursuit(path, params)
        ps = ParticleSet.around(Pose(start.x, start.y, start.psi), rng)
        pose = start.as_array()
        records = []
        diverged = False
        for _ in range(max_ticks):
            if ctl.done(pose[:2]) or is_collision(smap, Pose(*pose)):
                break
            rec, pose, ps = _tick_snippets(smap, ctl, mask, ps, pose, rng,
                                           params, noise_scale)
            rec["arc_s"] = ctl.progress(rec["true"][:2])
            if risk_sigma(ps) > DIVERGENCE_SIGMA or ps.degenerate:
                diverged = True
            rec["degenerate"] = diverged
            records.append(rec)
        per_replay.append(records)

    # variance targets: per-waypoint squared deviation from the cross-replay
    # mean at matched arc-length positions
    bins: dict = {}
    for r, records in enumerate(per_replay):
        for rec in records:
            bins.setdefault(int(round(rec["arc_s"] / ARC_BIN_M)), []).append(rec)
    for key, recs in bins.items():
        mean_traj = np.mean([rc["traj"] for rc in recs], axis=0)
        for rc in recs:
            dev = ((rc["traj"] - mean_traj) ** 2).sum(axis=1)
            rc["sigma"] = np.log(np.maximum(dev, SIGMA_TARGET_FLOOR))

    snippets = []
    for r, records in enumerate(per_replay):
        for t, rec in enumerate(records):
            bel = rec["belief"]
            center = Pose(bel[0], bel[1], 0.0)
            lux = smap.value_at(smap.lighting, rec["true"][0], rec["true"][1]) \
                * LUX_FULL_SCALE
            snippets.append(Snippet(
                raster=rec["raster"].image,
                map_crop=crop_ego(smap, center, rec["window_m"]),
                goal=goal_mask(goal, center, rec["window_m"]),
                mask_bits=masks[r].bits,
                traj=rec["traj"],
                sigma=rec["sigma"],
                meta={"world_seed": int(world_seed), "replay": r, "tick": t,
                      "arc_s": float(rec["arc_s"]), "window_m": float(rec["window_m"]),
                      "lighting_bin": lighting_bin(lux),
                      "lighting_profile": lighting_profile,
                      "degenerate": bool(rec["degenerate"])},
            ))
    return snippets
