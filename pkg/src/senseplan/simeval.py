"""Closed-loop episode executor and the metrics/experiment harness.

The env runs a 1 Hz decision loop: rasterize the belief, run the one-step
planner for the next-second increments and their risk scalar, let a
scheduling policy pick the sensor mask, then execute the increments under
motion noise while the particle filter consumes odometry and the masked
observations. Episode logs are pure data; every metric is recomputable from
saved logs bit-exactly.
"""

from __future__ import annotations

import csv
import io
import json
import struct
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .diffusion import cvar, student_infer
from .estimator import MOTION_NOISE, ParticleSet, compose, posterior_cov, \
    predict, relative_pose, risk_sigma, update
from .oracle import DIVERGENCE_SIGMA, SUBSTEPS, astar_plan, path_length
from .raster import rasterize
from .sensors import (IMU_PSI_SIGMA, IMU_XY_SIGMA, LUX_GATE, SENSOR_NAMES,
                      SensorMask, default_suite, observe, power_cost)
from .world import (FOOTPRINT_RADIUS, LUX_FULL_SCALE, GoalDisk, Pose,
                    SemanticMap, crop_ego, generate_world, goal_mask,
                    is_collision)

ETA_MAX = 2.0
GUARD_MARGIN_M = 0.1       # executor stop margin beyond the footprint
NOMINAL_STEP_M = 0.125     # full-speed sub-increment, 1 m/s over 1/8 s
POWER_AON = power_cost(SensorMask.all_on())
LOG_MAGIC = b"JEPL"
LOG_VERSION = 1

STATUS_GOAL = "goal"
STATUS_COLLISION = "collision"
STATUS_TIMEOUT = "timeout"
STATUS_DIVERGENCE = "divergence"


@dataclass
class FaultWindow:
    """Forced outage of one sensor between two ticks (inclusive start)."""
    sensor: str
    t_off: int
    t_on: int | None = None     # None: never re-enabled

    def active(self, tick: int) -> bool:
        return tick >= self.t_off and (self.t_on is None or tick < self.t_on)


@dataclass
class EpisodeLog:
    seed: int
    status: str
    eta_max: float
    true_pose: np.ndarray      # (T, 3)
    belief_mean: np.ndarray    # (T, 3)
    sigma_b: np.ndarray        # (T,)
    u: np.ndarray              # (T,) calibrated risk at decision time
    mask_bits: np.ndarray      # (T, 6)
    power: np.ndarray          # (T,) watts
    planned: np.ndarray        # (T, H, 3)
    realized: np.ndarray       # (T, H, 3)
    realized_err: np.ndarray   # (T,) planar error of the 1 s prediction
    collision: np.ndarray      # (T,) bool
    decision_ms: np.ndarray    # (T,) policy + plan wall time (non-deterministic)

    def __post_init__(self):
        for t in range(len(self.power)):
            expect = power_cost(SensorMask(self.mask_bits[t]))
            if abs(self.power[t] - expect) > 1e-9:
                raise ValueError("power column inconsistent with mask")

    @property
    def n_ticks(self) -> int:
        return len(self.power)

    def energy_j(self) -> float:
        return float(self.power.sum())           # 1 s per tick

    def to_payload(self) -> bytes:
        buf = io.BytesIO()
        np.savez(buf, seed=self.seed, eta_max=self.eta_max,
                 status=np.frombuffer(self.status.encode(), np.uint8),
                 true_pose=self.true_pose.astype(np.float64),
                 belief_mean=self.belief_mean.astype(np.float64),
                 sigma_b=self.sigma_b, u=self.u,
                 mask_bits=self.mask_bits.astype(np.uint8),
                 power=self.power, planned=self.planned.astype(np.float32),
                 realized=self.realized.astype(np.float32),
                 realized_err=self.realized_err,
                 collision=self.collision.astype(np.uint8),
                 decision_ms=self.decision_ms)
        return buf.getvalue()

    @classmethod
    def from_payload(cls, payload: bytes) -> "EpisodeLog":
        z = np.load(io.BytesIO(payload))
        return cls(int(z["seed"]), z["status"].tobytes().decode(),
                   float(z["eta_max"]), z["true_pose"], z["belief_mean"],
                   z["sigma_b"], z["u"], z["mask_bits"], z["power"],
                   z["planned"].astype(np.float64),
                   z["realized"].astype(np.float64), z["realized_err"],
                   z["collision"].astype(bool), z["decision_ms"])


def save_logs(path, logs, manifest: dict | None = None) -> None:
    """Length-prefixed records behind a JSON run manifest."""
    with open(path, "wb") as f:
        f.write(LOG_MAGIC)
        f.write(struct.pack("<HI", LOG_VERSION, len(logs)))
        man = json.dumps(manifest or {}, sort_keys=True).encode()
        f.write(struct.pack("<I", len(man)))
        f.write(man)
        for log in logs:
            payload = log.to_payload()
            f.write(struct.pack("<II", len(payload), zlib.crc32(payload)))
            f.write(payload)


def load_logs(path):
    with open(path, "rb") as f:
        if f.read(4) != LOG_MAGIC:
            raise IOError("not an episode-log container")
        version, count = struct.unpack("<HI", f.read(6))
        if version != LOG_VERSION:
            raise IOError(f"unsupported log version {version}")
        man_len, = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(man_len).decode())
        logs = []
        for _ in range(count):
            size, crc = struct.unpack("<II", f.read(8))
            payload = f.read(size)
            if len(payload) != size or zlib.crc32(payload) != crc:
                raise IOError("corrupt episode-log record")
            logs.append(EpisodeLog.from_payload(payload))
    return logs, manifest


# -------------------------------------------------------------- episode env


class DespotModel:
    """Abstract generative model for the tree-search baseline.

    State is (belief std, meters to goal). Sensing shrinks the std by the
    best active sensor's measurement quality, which is recomputed from the
    full map grid on every step call; that per-call map scan is what makes
    the search cost grow with world size.
    """

    def __init__(self, smap: SemanticMap, pose_xy, lam_risk: float = 1.0,
                 eta_max: float = ETA_MAX, drift: float = 0.15):
        self.smap = smap
        self.xy = np.asarray(pose_xy, dtype=float)
        self.lam_risk = lam_risk
        self.eta_max = eta_max
        self.drift = drift
        self._suite = {s.name: s for s in default_suite()}

    def _best_meas_sigma(self, bits) -> float:
        smap = self.smap
        occ = smap.occupancy > 0.5
        iy, ix = np.nonzero(occ)
        res = smap.resolution
        d_struct = np.inf
        if len(iy):
            d = np.hypot((ix + 0.5) * res - self.xy[0],
                         (iy + 0.5) * res - self.xy[1])
            d_struct = float(d.min())
        lux = smap.value_at(smap.lighting, *self.xy) * LUX_FULL_SCALE
        vis = smap.value_at(smap.visibility, *self.xy, outside=1.0)
        sig = {0: 0.05 + 0.01 * d_struct,
               1: 0.5 if lux >= LUX_GATE else np.inf,
               2: 0.5 if lux < LUX_GATE else np.inf,
               3: np.inf,
               4: self._suite["gnss"].noise / max(vis, 1e-3)}
        active = [sig[i] for i in range(5) if bits[i]]
        return min(active) if active else np.inf

    def step(self, state, bits, rng):
        sigma, dist = state
        meas = self._best_meas_sigma(bits)
        var = sigma ** 2 + self.drift ** 2
        if np.isfinite(meas):
            var = 1.0 / (1.0 / var + 1.0 / meas ** 2)
        sigma2 = float(np.sqrt(var))
        power = power_cost(SensorMask.from_switchable(np.asarray(bits, np.uint8)))
        reward = -power / POWER_AON - self.lam_risk * float(sigma2 > self.eta_max)
        dist2 = dist - 1.0
        done = dist2 <= 0.0
        return (sigma2, dist2), round(sigma2, 1), reward, done

    def terminal_value(self, state):
        return 0.0


class EpisodeEnv:
    """1 Hz closed loop; also the training env for the learned scheduler.

    reset() -> obs dict; step(mask) -> (obs, reward, violation, done, info).
    Reward is negative power as a fraction of everything-on; violation is
    the realized 1 s planar prediction error exceeding eta_max.
    """

    def __init__(self, smap: SemanticMap, goal: GoalDisk, start: Pose,
                 student, rng: np.random.Generator, seed: int = 0,
                 eta_max: float = ETA_MAX, alpha: float = 0.05,
                 cvar_norm: str = "topk", calibration: float = 1.0,
                 noise_scale: float = 1.0, zero_raster: bool = False,
                 fault: FaultWindow | None = None, max_ticks: int | None = None,
                 forced_dropout_p: float = 0.0, despot_obs: bool = False,
                 lam_risk: float = 1.0, spread_samples: int = 0,
                 plan_samples: int = 4):
        self.smap, self.goal, self.start = smap, goal, start
        self.student = student
        self.rng = rng
        self.seed = seed
        self.eta_max = eta_max
        self.alpha = alpha
        self.cvar_norm = cvar_norm
        self.calibration = calibration
        self.noise_scale = noise_scale
        self.zero_raster = zero_raster
        self.fault = fault
        self.forced_dropout_p = forced_dropout_p
        self.despot_obs = despot_obs
        self.lam_risk = lam_risk
        self.spread_samples = spread_samples
        self.plan_samples = plan_samples
        self.extent = smap.shape[0] * smap.resolution
        if max_ticks is None:
            path = astar_plan(smap, start, goal)
            max_ticks = max(8, int(np.ceil(4.0 * path_length(path))))
        self.max_ticks = max_ticks

    def reset(self):
        self.ps = ParticleSet.around(self.start, self.rng)
        self.pose = self.start.as_array()
        self.prev = SensorMask.all_on()
        self.tick = 0
        self.status = None
        self.records = []
        self.lidar_min_range = np.inf
        return self._make_obs()

    def _make_obs(self):
        bel = self.ps.mean_pose()
        rast = rasterize(self.ps)
        image = rast.image.copy()
        if self.zero_raster:
            image[:] = 0.0
        center = Pose(bel[0], bel[1], 0.0)
        chans = [image[:, :, c] for c in range(5)]
        crop = crop_ego(self.smap, center, rast.window_m)
        chans += [crop[:, :, c] for c in range(3)]
        chans.append(goal_mask(self.goal, center, rast.window_m))
        images = np.stack(chans, axis=0)[None]
        mask_in = self.prev.bits[None].astype(float)
        ctx = self.student.context(images, mask_in)
        if self.plan_samples > 1:
            k = self.plan_samples
            traj, sigma_log = student_infer(
                self.student, np.repeat(images, k, axis=0),
                np.repeat(mask_in, k, axis=0), self.rng)
            pick, best = 0, np.inf
            for i in range(k):
                p = bel.copy()
                blocked = False
                for inc in traj[i]:
                    p = compose(p, inc)
                    if is_collision(self.smap, Pose(*p),
                                    FOOTPRINT_RADIUS + GUARD_MARGIN_M):
                        blocked = True
                        break
                cost = np.hypot(p[0] - self.goal.center[0],
                                p[1] - self.goal.center[1]) \
                    + (1e3 if blocked else 0.0)
                if cost < best:
                    pick, best = i, cost
        else:
            traj, sigma_log = student_infer(self.student, images, mask_in,
                                            self.rng, ctx=ctx)
            pick = 0
        u = self.calibration * cvar(sigma_log[pick], self.alpha, self.cvar_norm)
        self._plan = traj[pick]
        self._sigma_log = sigma_log[pick]
        d_goal = float(np.hypot(bel[0] - self.goal.center[0],
                                bel[1] - self.goal.center[1]))
        cov = posterior_cov(self.ps)
        obs = {
            "raster": rast.image,
            "u": u,
            "d_frac": min(1.0, d_goal / self.extent),
            "prev": self.prev.switchable().astype(float),
            "sigma_b": risk_sigma(self.ps),
            "belief_xy": (bel[0], bel[1]),
            "belief_cov": cov,
            "lux": self.smap.value_at(self.smap.lighting, bel[0], bel[1])
                   * LUX_FULL_SCALE,
            "visibility": self.smap.value_at(self.smap.visibility,
                                             bel[0], bel[1], outside=1.0),
            "lidar_min_range": self.lidar_min_range,
            "interest": 0.0,
            "smap": self.smap,
            "sigma_log": self._sigma_log.copy(),
        }
        if self.spread_samples > 0:
            draws = [student_infer(self.student, images, mask_in, self.rng,
                                   ctx=ctx)[0][0]
                     for _ in range(self.spread_samples)]
            obs["traj_samples"] = np.stack(draws)
        if self.despot_obs:
            obs["model"] = DespotModel(self.smap, (bel[0], bel[1]),
                                       self.lam_risk, self.eta_max)
            obs["model_state"] = (risk_sigma(self.ps), d_goal)
        return obs

    def _effective_mask(self, mask: SensorMask) -> SensorMask:
        bits = mask.bits.copy()
        if self.fault is not None and self.fault.active(self.tick):
            bits[SENSOR_NAMES.index(self.fault.sensor)] = 0
        if self.forced_dropout_p > 0.0:
            drop = self.rng.random(5) < self.forced_dropout_p
            bits[:5] = bits[:5] * (~drop)
        return SensorMask(bits)

    def step(self, mask: SensorMask, motion: np.ndarray | None = None):
        if self.status is not None:
            raise RuntimeError("episode already terminated")
        eff = self._effective_mask(mask)
        power = power_cost(eff)
        u_now = self.calibration * cvar(self._sigma_log, self.alpha,
                                        self.cvar_norm)
        bel0 = self.ps.mean_pose()
        plan = np.array(self._plan if motion is None else motion, dtype=float)
        # collision guard: stop at the first increment whose belief-projected
        # pose would hit the map; a drifted belief misjudges this
        proj = bel0.copy()
        for k in range(SUBSTEPS):
            proj = compose(proj, plan[k])
            if is_collision(self.smap, Pose(*proj),
                            FOOTPRINT_RADIUS + GUARD_MARGIN_M):
                plan[k:] = 0.0
                break
        pose = self.pose
        ps = self.ps
        odom = np.zeros(3)
        realized = np.zeros((SUBSTEPS, 3))
        collided = False
        for k in range(SUBSTEPS):
            # actuation noise scales with commanded motion: no slip at rest
            f = min(1.0, float(np.hypot(plan[k][0], plan[k][1])) / NOMINAL_STEP_M)
            executed = plan[k] + self.rng.normal(0, 1, 3) \
                * np.asarray(MOTION_NOISE) * (self.noise_scale * f)
            prev_pose = pose
            pose = compose(pose, executed)
            realized[k] = relative_pose(prev_pose, pose)
            measured = executed + self.rng.normal(
                0, [IMU_XY_SIGMA / SUBSTEPS, IMU_XY_SIGMA / SUBSTEPS,
                    IMU_PSI_SIGMA / SUBSTEPS]) * self.noise_scale
            ps = predict(ps, measured, self.rng)
            odom = odom + measured
            if is_collision(self.smap, Pose(*pose)):
                collided = True
                break
        sobs = observe(self.smap, Pose(*pose), eff, self.rng,
                       true_increment=odom, noise_scale=self.noise_scale)
        ps = update(ps, sobs, self.smap, self.rng)
        if sobs.lidar_ranges is not None and len(sobs.lidar_ranges):
            self.lidar_min_range = float(sobs.lidar_ranges.min())
        else:
            self.lidar_min_range = np.inf

        # planar error of the 1 s-ahead prediction, chained from the belief
        pred = bel0.copy()
        for k in range(SUBSTEPS):
            pred = compose(pred, plan[k])
        realized_err = float(np.hypot(pred[0] - pose[0], pred[1] - pose[1]))
        # a crash is a realized safety violation regardless of the 1 s error
        violation = float(realized_err > self.eta_max or collided)

        self.records.append({
            "true": pose.copy(), "belief": ps.mean_pose(),
            "sigma_b": risk_sigma(ps), "u": u_now, "mask": eff.bits.copy(),
            "power": power, "planned": plan.copy(), "realized": realized,
            "realized_err": realized_err, "collision": collided,
        })
        self.pose, self.ps, self.prev = pose, ps, eff
        self.tick += 1

        if collided:
            self.status = STATUS_COLLISION
        elif np.hypot(pose[0] - self.goal.center[0],
                      pose[1] - self.goal.center[1]) <= self.goal.radius:
            self.status = STATUS_GOAL
        elif risk_sigma(ps) > DIVERGENCE_SIGMA or ps.degenerate:
            self.status = STATUS_DIVERGENCE
        elif self.tick >= self.max_ticks:
            self.status = STATUS_TIMEOUT

        done = self.status is not None
        reward = -power / POWER_AON
        info = {"realized_err": realized_err, "u": u_now,
                "pred_violation": float(u_now > self.eta_max),
                "status": self.status}
        obs = self._make_obs() if not done else self._terminal_obs()
        return obs, reward, violation, done, info

    def _terminal_obs(self):
        return {"raster": np.zeros((64, 64, 5)), "u": 0.0, "d_frac": 0.0,
                "prev": self.prev.switchable().astype(float)}

    def build_log(self, decision_ms=None) -> EpisodeLog:
        recs = self.records
        T = len(recs)
        if decision_ms is None:
            decision_ms = np.zeros(T)
        return EpisodeLog(
            seed=self.seed, status=self.status or STATUS_TIMEOUT,
            eta_max=self.eta_max,
            true_pose=np.array([r["true"] for r in recs]).reshape(T, 3),
            belief_mean=np.array([r["belief"] for r in recs]).reshape(T, 3),
            sigma_b=np.array([r["sigma_b"] for r in recs]),
            u=np.array([r["u"] for r in recs]),
            mask_bits=np.array([r["mask"] for r in recs]).reshape(T, 6),
            power=np.array([r["power"] for r in recs]),
            planned=np.array([r["planned"] for r in recs]).reshape(T, SUBSTEPS, 3),
            realized=np.array([r["realized"] for r in recs]).reshape(T, SUBSTEPS, 3),
            realized_err=np.array([r["realized_err"] for r in recs]),
            collision=np.array([r["collision"] for r in recs], dtype=bool),
            decision_ms=np.asarray(decision_ms, dtype=float))


def run_episode(env: EpisodeEnv, policy, rng: np.random.Generator) -> EpisodeLog:
    """Roll one episode; component exceptions end it as a divergence."""
    obs = env.reset()
    times = []
    try:
        done = False
        while not done:
            t0 = time.perf_counter()
            try:
                mask = policy.act(obs, rng, explore=False)
            except TypeError:
                mask = policy.act(obs, rng)
            times.append((time.perf_counter() - t0) * 1e3)
            obs, _, _, done, _ = env.step(mask)
    except Exception:
        env.status = STATUS_DIVERGENCE
    return env.build_log(np.array(times[:len(env.records)]))


# ------------------------------------------------------------------ metrics


def metrics_table(logs_by_scheduler: dict, aon_key: str = "always_on"):
    """Aggregate rows per scheduler; energy is paired against always-on."""
    if not logs_by_scheduler or any(not v for v in logs_by_scheduler.values()):
        raise ValueError("need at least one log per scheduler")
    aon_energy = {}
    for log in logs_by_scheduler.get(aon_key, []):
        aon_energy[log.seed] = log.energy_j()
    rows = []
    for name in sorted(logs_by_scheduler):
        logs = logs_by_scheduler[name]
        n = len(logs)
        ticks = sum(log.n_ticks for log in logs)
        viol = sum(int((log.realized_err > log.eta_max).sum()) for log in logs)
        pred_viol = sum(int((log.u > log.eta_max).sum()) for log in logs)
        sensors = sum(float(log.mask_bits.sum()) for log in logs)
        energy = sum(log.energy_j() for log in logs)
        paired = [log.seed for log in logs if log.seed in aon_energy]
        if paired and aon_key in logs_by_scheduler:
            base = sum(aon_energy[s] for s in paired)
            mine = sum(log.energy_j() for log in logs if log.seed in aon_energy)
            energy_pct = 100.0 * mine / base if base > 0 else float("nan")
        else:
            energy_pct = float("nan")
        times = np.concatenate([log.decision_ms for log in logs]) \
            if ticks else np.zeros(1)
        rows.append({
            "scheduler": name,
            "episodes": n,
            "goal_pct": 100.0 * sum(log.status == STATUS_GOAL for log in logs) / n,
            "collision_pct": 100.0 * sum(log.status == STATUS_COLLISION
                                         for log in logs) / n,
            "cvar_violation_pct": 100.0 * viol / max(1, ticks),
            "pred_violation_pct": 100.0 * pred_viol / max(1, ticks),
            "mean_sensors": sensors / max(1, ticks),
            "energy_vs_aon_pct": energy_pct,
            "energy_j": energy,
            "median_decision_ms": float(np.median(times)),
        })
    return rows


TIMING_KEYS = ("median_decision_ms",)


def write_metrics_csv(rows, path) -> None:
    """Deterministic columns only; wall-clock timings go to a separate file."""
    keys = [k for k in rows[0] if k not in TIMING_KEYS]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in keys})


def write_timings_csv(rows, path) -> None:
    keys = ["scheduler", *TIMING_KEYS]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in keys})


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return v


# -------------------------------------------------------------- reliability


@dataclass
class ReliabilityReport:
    bins: list                # (pred_mean, emp_p95, count) per bin
    mace: float               # mean |pred - emp| / eta_max
    degenerate: bool
    n_samples: int


def collect_pairs(logs) -> np.ndarray:
    """(N, 2) array of (predicted u, realized planar error) over all ticks."""
    us = np.concatenate([log.u for log in logs])
    errs = np.concatenate([log.realized_err for log in logs])
    return np.column_stack([us, errs])


def reliability(pairs: np.ndarray, n_bins: int = 20,
                eta_max: float = ETA_MAX) -> ReliabilityReport:
    pairs = np.asarray(pairs, dtype=float)
    n = len(pairs)
    if n < 20 * n_bins:
        raise ValueError(f"need at least {20 * n_bins} samples, got {n}")
    order = np.argsort(pairs[:, 0], kind="stable")
    degenerate = float(pairs[:, 0].max() - pairs[:, 0].min()) < 1e-12
    chunks = [order] if degenerate else np.array_split(order, n_bins)
    bins = []
    errs = []
    for idx in chunks:
        if len(idx) == 0:
            continue
        pred = float(pairs[idx, 0].mean())
        emp = float(np.percentile(pairs[idx, 1], 95.0))
        bins.append((pred, emp, int(len(idx))))
        errs.append(abs(pred - emp))
    return ReliabilityReport(bins, float(np.mean(errs) / eta_max),
                             degenerate, n)


def fit_calibration(pairs: np.ndarray, n_bins: int = 20) -> float:
    """Scalar mapping predicted u to the realized 95th-percentile error.

    Least squares over equal-count bins, count-weighted, so the fit targets
    the same statistic the reliability diagram plots.
    """
    rep = reliability(pairs, n_bins=n_bins)
    pred = np.array([b[0] for b in rep.bins])
    emp = np.array([b[1] for b in rep.bins])
    w = np.array([b[2] for b in rep.bins], dtype=float)
    denom = float((w * pred * pred).sum())
    if denom <= 0:
        return 1.0
    return float((w * pred * emp).sum() / denom)


# ------------------------------------------------------------ latency sweep


def fit_exponent(radii, medians) -> float:
    """Slope of log(median) vs log(radius)."""
    x = np.log(np.asarray(radii, dtype=float))
    y = np.log(np.maximum(np.asarray(medians, dtype=float), 1e-9))
    return float(np.polyfit(x, y, 1)[0])


def latency_sweep(student, radii=(25, 40, 55, 70, 85, 100), calls: int = 100,
                  seed: int = 0, methods=("planner", "infogain", "despot"),
                  despot_kw: dict | None = None):
    """Median decision latency per (method, radius) plus fitted exponents.

    The planner's input shape is fixed, so its cost should be flat; the
    information-gain baseline rescans the map per call; the tree search
    rescans it per simulated step.
    """
    from .baselines import DespotLite, InfoGainGreedy

    despot_kw = despot_kw or {"depth": 1, "scenarios": 4}
    rng = np.random.default_rng(seed)
    rows = []
    for radius in radii:
        smap, goal, start = generate_world(seed, radius_m=radius)
        bel = (start.x, start.y)
        obs = {"smap": smap, "belief_xy": bel, "belief_cov": np.eye(2),
               "lux": 600.0, "visibility": 0.9}
        images = rng.normal(0, 1, (1, 9, 64, 64))
        masks = SensorMask.all_on().bits[None].astype(float)
        model = DespotModel(smap, bel)
        despot = DespotLite(**despot_kw)
        infogain = InfoGainGreedy()

        def planner_call():
            student_infer(student, images, masks, rng)

        def infogain_call():
            infogain.act(obs, rng)

        def despot_call():
            despot.best_action(model, (1.0, 5.0), rng)

        fns = {"planner": planner_call, "infogain": infogain_call,
               "despot": despot_call}
        for method in methods:
            fn = fns[method]
            fn()                         # warm-up outside the timing
            samples = np.empty(calls)
            for i in range(calls):
                t0 = time.perf_counter()
                fn()
                samples[i] = (time.perf_counter() - t0) * 1e3
            rows.append({"method": method, "radius": radius,
                         "median_ms": float(np.median(samples))})
    exponents = {}
    for method in methods:
        rs = [r["radius"] for r in rows if r["method"] == method]
        ms = [r["median_ms"] for r in rows if r["method"] == method]
        exponents[method] = fit_exponent(rs, ms)
    return rows, exponents


# ------------------------------------------------------------ fault reports


def fault_report(log: EpisodeLog, t_off: int) -> dict:
    """Did predicted risk spike after the outage, and did the mask compensate?

    u is logged at decision time, so the first post-fault prediction lands at
    tick index t_off + 1.
    """
    T = log.n_ticks
    if t_off + 1 >= T:
        return {"u_spike": False, "compensated": False, "observable": False}
    u_spike = bool(log.u[t_off + 1] > log.u[t_off])
    pre = log.mask_bits[t_off - 1] if t_off > 0 else log.mask_bits[0]
    compensated = False
    for t in range(t_off + 1, min(t_off + 3, T)):
        gained = (log.mask_bits[t][:5] > pre[:5]).any()
        if gained:
            compensated = True
            break
    return {"u_spike": u_spike, "compensated": compensated, "observable": True}


def recovery_tick(log: EpisodeLog, t_on: int, pre_level: float,
                  within: int = 5) -> bool:
    """Mean sensor count back at the pre-fault level within a few ticks."""
    for t in range(t_on, min(t_on + within, log.n_ticks)):
        if log.mask_bits[t].sum() >= pre_level:
            return True
    return False


# --------------------------------------------------------------- svg output


def write_svg_lines(path, series: dict, title: str = "", xlabel: str = "",
                    ylabel: str = "", size=(640, 400), logy: bool = False):
    """Minimal multi-series line plot; series maps label -> (xs, ys)."""
    w, h = size
    pad = 60
    xs_all = np.concatenate([np.asarray(x, float) for x, _ in series.values()])
    ys_all = np.concatenate([np.asarray(y, float) for _, y in series.values()])
    if logy:
        ys_all = np.log10(np.maximum(ys_all, 1e-12))
    x0, x1 = float(xs_all.min()), float(xs_all.max())
    y0, y1 = float(ys_all.min()), float(ys_all.max())
    if x1 - x0 < 1e-12:
        x1 = x0 + 1.0
    if y1 - y0 < 1e-12:
        y1 = y0 + 1.0

    def sx(v):
        return pad + (v - x0) / (x1 - x0) * (w - 2 * pad)

    def sy(v):
        if logy:
            v = np.log10(max(v, 1e-12))
        return h - pad - (v - y0) / (y1 - y0) * (h - 2 * pad)

    colors = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
             f'<rect width="{w}" height="{h}" fill="white"/>',
             f'<text x="{w / 2}" y="20" text-anchor="middle" '
             f'font-size="14">{title}</text>',
             f'<text x="{w / 2}" y="{h - 12}" text-anchor="middle" '
             f'font-size="12">{xlabel}</text>',
             f'<text x="16" y="{h / 2}" text-anchor="middle" font-size="12" '
             f'transform="rotate(-90 16 {h / 2})">{ylabel}</text>',
             f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" '
             'stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" '
             'stroke="black"/>']
    for i, (label, (xs, ys)) in enumerate(series.items()):
        color = colors[i % len(colors)]
        pts = " ".join(f"{sx(float(x)):.1f},{sy(float(y)):.1f}"
                       for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{w - pad + 4}" y="{pad + 16 * i}" '
                     f'font-size="11" fill="{color}">{label}</text>')
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts))
