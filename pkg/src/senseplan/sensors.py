"""Six-modality sensor suite: power model, simulated observations, likelihoods.

All sensors are sampled at the 1 Hz decision tick; the update rates on the
specs are recorded metadata. Bearing noise for the cameras is a modeling
choice (fixed radian sigma), since pixel noise has no direct sim counterpart.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .world import LUX_FULL_SCALE, Pose, SemanticMap, wrap_angle

SENSOR_NAMES = ("lidar", "day_cam", "night_cam", "sonde", "gnss", "imu")
N_SENSORS = 6
N_SWITCHABLE = 5          # imu is hard-wired on
IMU_IDX = 5

LIDAR_BEAMS = 32
CAM_BEARING_SIGMA = 0.02          # rad
GNSS_DENIED_VIS = 0.05
LUX_GATE = 10.0                   # day cam at/above, night cam below
IMU_XY_SIGMA = 0.20               # odometry increment noise per tick, m
IMU_PSI_SIGMA = 0.08              # rad (gyro class)

# likelihood evaluation knobs: sigma floors keep 500-particle weights sane,
# and a beam stride keeps per-tick raycasting cheap
GNSS_SIGMA_FLOOR = 0.03
LIDAR_SIGMA_FLOOR = 0.15
LIDAR_LIKELIHOOD_STRIDE = 4
LIDAR_RAY_STEP = 0.25


@dataclass(frozen=True)
class SensorSpec:
    name: str
    rate_hz: float
    range_m: float
    noise: float        # 1-sigma, units per kind
    power_w: float
    kind: str           # range-scan | position-fix | bearing-landmark | odometry | spot-sample

    def __post_init__(self):
        if self.power_w <= 0 or self.noise < 0:
            raise ValueError("power must be positive and noise non-negative")


def default_suite() -> list[SensorSpec]:
    return [
        SensorSpec("lidar", 10.0, 120.0, 0.03, 16.0, "range-scan"),
        SensorSpec("day_cam", 20.0, 80.0, 0.02, 3.0, "bearing-landmark"),
        SensorSpec("night_cam", 20.0, 40.0, 0.02, 5.0, "bearing-landmark"),
        SensorSpec("sonde", 2.0, 0.0, 0.05, 1.2, "spot-sample"),
        SensorSpec("gnss", 5.0, float("inf"), 0.015, 0.2, "position-fix"),
        SensorSpec("imu", 200.0, 0.0, 0.02, 0.1, "odometry"),
    ]


class SensorMask:
    """Six on/off bits in SENSOR_NAMES order; the IMU bit is pinned to 1."""

    __slots__ = ("bits",)

    def __init__(self, bits):
        b = np.asarray(bits, dtype=np.uint8)
        if b.shape != (N_SENSORS,):
            raise ValueError("mask needs exactly 6 bits")
        b = b.copy()
        b[IMU_IDX] = 1
        self.bits = b

    @classmethod
    def from_switchable(cls, five_bits) -> "SensorMask":
        return cls(np.concatenate([np.asarray(five_bits, dtype=np.uint8), [1]]))

    @classmethod
    def all_on(cls) -> "SensorMask":
        return cls(np.ones(N_SENSORS, dtype=np.uint8))

    @classmethod
    def imu_only(cls) -> "SensorMask":
        return cls(np.zeros(N_SENSORS, dtype=np.uint8))

    def __getitem__(self, name: str) -> bool:
        return bool(self.bits[SENSOR_NAMES.index(name)])

    def switchable(self) -> np.ndarray:
        return self.bits[:N_SWITCHABLE].copy()

    def count(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other):
        return isinstance(other, SensorMask) and np.array_equal(self.bits, other.bits)

    def __repr__(self):
        on = [n for n, b in zip(SENSOR_NAMES, self.bits) if b]
        return f"SensorMask({'+'.join(on)})"


def power_cost(mask: SensorMask, suite: list[SensorSpec] | None = None) -> float:
    suite = suite if suite is not None else default_suite()
    return float(np.dot(mask.bits, [s.power_w for s in suite]))


@dataclass
class Observation:
    """Per-active-sensor measurements; inactive sensors contribute nothing."""

    lidar_ranges: np.ndarray | None = None      # (K,) meters
    lidar_angles: np.ndarray | None = None      # (K,) body-frame rad
    gnss_fix: np.ndarray | None = None          # (2,) meters
    gnss_sigma: float = 0.0
    cam_ids: np.ndarray | None = None           # landmark indices
    cam_bearings: np.ndarray | None = None      # (M,) body-frame rad
    imu_increment: np.ndarray | None = None     # (3,) body-frame (dx, dy, dpsi)
    sonde_value: float | None = None

    def is_empty(self) -> bool:
        return (self.lidar_ranges is None and self.gnss_fix is None
                and self.cam_ids is None)


def expected_ranges(smap: SemanticMap, poses: np.ndarray, angles: np.ndarray,
                    max_range: float, step: float = LIDAR_RAY_STEP) -> np.ndarray:
    """First-hit ranges against occupancy for poses (P,3) x beam angles (K,)."""
    poses = np.atleast_2d(poses)
    P, K = poses.shape[0], angles.shape[0]
    n = smap.occupancy.shape[0]
    theta = poses[:, 2:3] + angles[None, :]                  # (P, K)
    ts = (np.arange(int(np.ceil(max_range / step))) + 0.5) * step
    px = poses[:, 0:1, None] + np.cos(theta)[:, :, None] * ts  # (P, K, T)
    py = poses[:, 1:2, None] + np.sin(theta)[:, :, None] * ts
    ix = np.floor((px - smap.origin[0]) / smap.resolution).astype(np.int64)
    iy = np.floor((py - smap.origin[1]) / smap.resolution).astype(np.int64)
    oob = (ix < 0) | (ix >= n) | (iy < 0) | (iy >= n)
    occ = smap.occupancy[np.clip(iy, 0, n - 1), np.clip(ix, 0, n - 1)] > 0.5
    hit = occ & ~oob
    first = hit.argmax(axis=2)
    any_hit = hit.any(axis=2)
    return np.where(any_hit, ts[first], max_range)


def observe(smap: SemanticMap, true_pose: Pose, mask: SensorMask,
            rng: np.random.Generator, true_increment: np.ndarray | None = None,
            suite: list[SensorSpec] | None = None, noise_scale: float = 1.0) -> Observation:
    """Simulate one tick of measurements under the powered mask."""
    suite = suite if suite is not None else default_suite()
    spec = {s.name: s for s in suite}
    obs = Observation()
    pos = np.array([true_pose.x, true_pose.y])
    lux = smap.value_at(smap.lighting, true_pose.x, true_pose.y) * LUX_FULL_SCALE

    if mask["lidar"]:
        ang = np.linspace(-np.pi, np.pi, LIDAR_BEAMS, endpoint=False)
        rmax = spec["lidar"].range_m
        r = expected_ranges(smap, true_pose.as_array()[None, :], ang, rmax)[0]
        r = np.clip(r + rng.normal(0, spec["lidar"].noise * noise_scale, r.shape), 0.0, rmax)
        obs.lidar_ranges, obs.lidar_angles = r, ang

    if mask["gnss"]:
        vis = smap.value_at(smap.visibility, true_pose.x, true_pose.y)
        if vis >= GNSS_DENIED_VIS:
            sigma = spec["gnss"].noise / vis * noise_scale
            obs.gnss_fix = pos + rng.normal(0, sigma, 2)
            obs.gnss_sigma = sigma

    use_day = mask["day_cam"] and lux >= LUX_GATE
    use_night = mask["night_cam"] and lux < LUX_GATE
    if (use_day or use_night) and len(smap.landmarks):
        cam_range = spec["day_cam"].range_m if use_day else spec["night_cam"].range_m
        d = smap.landmarks - pos[None, :]
        dist = np.hypot(d[:, 0], d[:, 1])
        vis_ids = np.nonzero(dist <= cam_range)[0]
        if len(vis_ids):
            bearings = np.arctan2(d[vis_ids, 1], d[vis_ids, 0]) - true_pose.psi
            bearings = wrap_angle(bearings + rng.normal(0, CAM_BEARING_SIGMA * noise_scale,
                                                        len(vis_ids)))
            obs.cam_ids, obs.cam_bearings = vis_ids, bearings

    if mask["sonde"]:
        obs.sonde_value = smap.value_at(smap.visibility, true_pose.x, true_pose.y) \
            + float(rng.normal(0, spec["sonde"].noise * noise_scale))

    if true_increment is not None:   # imu always on
        noise = rng.normal(0, [IMU_XY_SIGMA * noise_scale, IMU_XY_SIGMA * noise_scale,
                               IMU_PSI_SIGMA * noise_scale])
        obs.imu_increment = np.asarray(true_increment, dtype=float) + noise
    return obs


def log_likelihood_particles(obs: Observation, poses: np.ndarray,
                             smap: SemanticMap) -> np.ndarray:
    """Sum of per-sensor Gaussian log-densities at each hypothesized pose (P,3)."""
    poses = np.atleast_2d(poses)
    ll = np.zeros(poses.shape[0])

    if obs.gnss_fix is not None:
        sigma = max(obs.gnss_sigma, GNSS_SIGMA_FLOOR)
        d2 = ((poses[:, :2] - obs.gnss_fix[None, :]) ** 2).sum(axis=1)
        ll += -0.5 * d2 / sigma ** 2 - np.log(2 * np.pi * sigma ** 2)

    if obs.lidar_ranges is not None:
        stride = LIDAR_LIKELIHOOD_STRIDE
        ang = obs.lidar_angles[::stride]
        meas = obs.lidar_ranges[::stride]
        rmax = 40.0   # evaluation cap: returns past it carry little pose information
        exp_r = expected_ranges(smap, poses, ang, rmax, step=2 * LIDAR_RAY_STEP)
        m = np.minimum(meas, rmax)[None, :]
        sigma = LIDAR_SIGMA_FLOOR
        ll += (-0.5 * (exp_r - m) ** 2 / sigma ** 2).sum(axis=1) \
            - len(ang) * 0.5 * np.log(2 * np.pi * sigma ** 2)

    if obs.cam_ids is not None:
        lms = smap.landmarks[obs.cam_ids]                     # (M, 2)
        d = lms[None, :, :] - poses[:, None, :2]              # (P, M, 2)
        exp_b = np.arctan2(d[:, :, 1], d[:, :, 0]) - poses[:, 2:3]
        err = wrap_angle(exp_b - obs.cam_bearings[None, :])
        sigma = 0.05
        ll += (-0.5 * err ** 2 / sigma ** 2).sum(axis=1) \
            - len(obs.cam_ids) * 0.5 * np.log(2 * np.pi * sigma ** 2)

    # imu and sonde are pose-independent: zero contribution
    return ll


def log_likelihood(obs: Observation, pose: Pose, smap: SemanticMap,
                   mask: SensorMask | None = None) -> float:
    if obs.is_empty():
        return 0.0
    return float(log_likelihood_particles(obs, pose.as_array()[None, :], smap)[0])
