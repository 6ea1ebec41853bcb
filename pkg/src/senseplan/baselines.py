"""Comparison sensor-scheduling policies.

Every policy exposes act(obs, rng) -> SensorMask. The episode runner fills
obs with the belief raster, planner risk u, normalized goal distance, the
previous switchable bits, ambient lux, map visibility at the belief mean,
the 2x2 belief covariance, and (for the search baseline) a generative model.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .nn import AdamW, Dense, Tensor
from .sensors import (GNSS_DENIED_VIS, LUX_GATE, N_SWITCHABLE, SensorMask,
                      default_suite)

IDX_LIDAR, IDX_DAY, IDX_NIGHT, IDX_SONDE, IDX_GNSS = range(5)


@dataclass(frozen=True)
class BaselineConfig:
    lux_gate: float = LUX_GATE
    lidar_range_m: float = 15.0      # keep scanning while structure this close
    interest_threshold: float = 0.5  # interest-layer units, not comparable to field units
    random_k: int = 1
    despot_particles: int = 5000
    despot_depth: int = 6
    despot_budget_s: float = 0.5
    despot_bound_gap: float = 0.10
    spread_samples: int = 20

    def __post_init__(self):
        if min(self.lux_gate, self.lidar_range_m, self.interest_threshold) <= 0:
            raise ValueError("thresholds must be positive")


class AlwaysOn:
    def act(self, obs, rng):
        return SensorMask.all_on()


def greedy_off(lux: float, last_lidar_min_range: float, water_interest: float,
               cfg: BaselineConfig = BaselineConfig()) -> SensorMask:
    """Fixed rule set: one camera by the lux gate, scan only near structure,
    probe only over interesting water; fix and odometry never power down."""
    bits = np.zeros(N_SWITCHABLE, np.uint8)
    bits[IDX_GNSS] = 1
    if lux >= cfg.lux_gate:
        bits[IDX_DAY] = 1
    else:
        bits[IDX_NIGHT] = 1
    if last_lidar_min_range < cfg.lidar_range_m:
        bits[IDX_LIDAR] = 1
    if water_interest > cfg.interest_threshold:
        bits[IDX_SONDE] = 1
    return SensorMask.from_switchable(bits)


class GreedyOff:
    def __init__(self, cfg: BaselineConfig = BaselineConfig()):
        self.cfg = cfg

    def act(self, obs, rng):
        return greedy_off(obs.get("lux", 1000.0),
                          obs.get("lidar_min_range", np.inf),
                          obs.get("interest", 0.0), self.cfg)


class RandomK:
    """k switchable sensors drawn uniformly each tick."""

    def __init__(self, k: int):
        if not 0 <= k <= N_SWITCHABLE:
            raise ValueError("k out of range")
        self.k = k

    def act(self, obs, rng):
        bits = np.zeros(N_SWITCHABLE, np.uint8)
        bits[rng.choice(N_SWITCHABLE, self.k, replace=False)] = 1
        return SensorMask.from_switchable(bits)


def information_gain(prior_cov, meas_var: float, axes=(0, 1)) -> float:
    """Log-determinant reduction of a planar position posterior.

    prior_cov: scalar variance or 2x2 covariance; meas_var: per-axis variance
    of an unbiased position measurement observing the given axes.
    """
    p = np.atleast_2d(np.asarray(prior_cov, dtype=float))
    if p.shape == (1, 1):
        p = p[0, 0] * np.eye(2)
    if not np.isfinite(meas_var) or meas_var <= 0:
        return 0.0
    info = np.zeros((2, 2))
    for a in axes:
        info[a, a] = 1.0 / meas_var
    post = np.linalg.inv(np.linalg.inv(p) + info)
    _, logdet_p = np.linalg.slogdet(p)
    _, logdet_q = np.linalg.slogdet(post)
    gain = float(logdet_p - logdet_q)
    if np.isscalar(prior_cov) or np.asarray(prior_cov).ndim == 0:
        # scalar convention: per-axis reduction
        return gain / len(axes)
    return gain


class InfoGainGreedy:
    """Single-step expected information argmax over singleton sensors.

    Measurement quality is recomputed from the full map every call: the scan
    quality needs the distance to the nearest structure and the camera
    quality a landmark census, both linear in the cell count. That cost is
    the point of this baseline, so it is not cached.
    """

    def __init__(self):
        self._suite = {s.name: s for s in default_suite()}

    def _meas_vars(self, obs) -> dict[int, float]:
        smap = obs["smap"]
        bx, by = obs["belief_xy"]
        occ = smap.occupancy > 0.5
        iy, ix = np.nonzero(occ)                       # full-grid scan each call
        res = smap.resolution
        if len(iy):
            d = np.hypot((ix + 0.5) * res - bx, (iy + 0.5) * res - by)
            d_struct = float(d.min())
            n_near = int((d <= self._suite["lidar"].range_m).sum())
        else:
            d_struct, n_near = np.inf, 0
        out = {}
        out[IDX_LIDAR] = (0.05 + 0.01 * d_struct) ** 2 if n_near else np.inf
        lux = obs.get("lux", 1000.0)
        for idx, name in ((IDX_DAY, "day_cam"), (IDX_NIGHT, "night_cam")):
            gated = (lux >= LUX_GATE) == (name == "day_cam")
            if gated and len(smap.landmarks):
                dist = np.hypot(smap.landmarks[:, 0] - bx, smap.landmarks[:, 1] - by)
                m = int((dist <= self._suite[name].range_m).sum())
                rng_m = self._suite[name].range_m
                out[idx] = (0.02 * rng_m) ** 2 / m if m else np.inf
            else:
                out[idx] = np.inf
        vis = obs.get("visibility", 1.0)
        out[IDX_GNSS] = (self._suite["gnss"].noise / vis) ** 2 \
            if vis >= GNSS_DENIED_VIS else np.inf
        out[IDX_SONDE] = np.inf        # no pose information
        return out

    def act(self, obs, rng):
        powers = [self._suite[n].power_w for n in
                  ("lidar", "day_cam", "night_cam", "sonde", "gnss")]
        meas = self._meas_vars(obs)
        cov = np.asarray(obs.get("belief_cov", np.eye(2)), dtype=float)
        gains = {i: information_gain(cov, meas[i]) for i in meas}
        # argmax singleton; ties go to the cheaper sensor
        best = max(gains, key=lambda i: (gains[i], -powers[i]))
        bits = np.zeros(N_SWITCHABLE, np.uint8)
        if gains[best] > 0.0:
            bits[best] = 1
        return SensorMask.from_switchable(bits)


def sigma_mean_risk(sigma_log: np.ndarray) -> float:
    """Body-average deviation instead of the tail: mean of sqrt(exp(sigma))."""
    return float(np.mean(np.sqrt(np.exp(np.asarray(sigma_log, dtype=float)))))


def sample_spread_risk(trajs: np.ndarray, q: float = 95.0) -> float:
    """Latent-ensemble proxy: per-waypoint planar RMS spread, upper quantile.

    trajs: (N, H, 3) chained increments from N planner draws.
    """
    trajs = np.asarray(trajs, dtype=float)
    pos = np.cumsum(trajs[:, :, :2], axis=1)          # (N, H, 2) chained planar
    dev = pos - pos.mean(axis=0, keepdims=True)
    rms = np.sqrt((dev ** 2).sum(axis=2).mean(axis=0))   # (H,)
    return float(np.percentile(rms, q))


class RiskTiered:
    """Risk-thresholded ladder used by the variant-risk baselines.

    The caller supplies the risk scalar in obs["u"]; which proxy produced it
    (body mean or sample spread) is the only difference between the variants.
    """

    def __init__(self, eta_max: float = 2.0):
        self.eta_max = eta_max

    def act(self, obs, rng):
        u = obs.get("u", 0.0)
        bits = np.zeros(N_SWITCHABLE, np.uint8)
        if u >= 0.25 * self.eta_max:
            bits[IDX_GNSS] = 1
        if u >= 0.5 * self.eta_max:
            cam = IDX_DAY if obs.get("lux", 1000.0) >= LUX_GATE else IDX_NIGHT
            bits[cam] = 1
        if u >= 1.0 * self.eta_max:
            return SensorMask.all_on()
        return SensorMask.from_switchable(bits)


class SigmaMeanPolicy(RiskTiered):
    """Risk ladder driven by the body-average deviation instead of the tail."""

    def act(self, obs, rng):
        obs = dict(obs, u=sigma_mean_risk(obs["sigma_log"]))
        return super().act(obs, rng)


class SampleSpreadPolicy(RiskTiered):
    """Risk ladder driven by the latent-ensemble spread; needs the env to
    provide obs["traj_samples"] (spread_samples > 0)."""

    def act(self, obs, rng):
        obs = dict(obs, u=sample_spread_risk(obs["traj_samples"]))
        return super().act(obs, rng)


# --------------------------------------------------------------- tree search

# null set, the five switchable singletons, everything (budget-fallback action)
DESPOT_ACTIONS = tuple(
    np.array(b, np.uint8) for b in (
        (0, 0, 0, 0, 0),
        (1, 0, 0, 0, 0),
        (0, 1, 0, 0, 0),
        (0, 0, 1, 0, 0),
        (0, 0, 0, 1, 0),
        (0, 0, 0, 0, 1),
        (1, 1, 1, 1, 1),
    )
)

ALL_ON_BITS = DESPOT_ACTIONS[-1]


class DespotLite:
    """Depth-limited scenario tree over an abstract generative model.

    The model must provide step(state, bits, rng) -> (state, obs_key, reward,
    done). If it also exposes enumerate_observations(state, bits) ->
    [(prob, state, reward, done), ...] the search computes the exact
    depth-limited expectimax; otherwise scenarios are Monte Carlo sampled.
    Anytime: root actions are scored until the wall-clock budget runs out,
    and an exhausted budget before the first full score falls back to
    everything-on.
    """

    def __init__(self, depth: int = 2, scenarios: int = 32, gamma: float = 0.95,
                 budget_s: float = np.inf, actions=DESPOT_ACTIONS):
        self.depth = depth
        self.scenarios = scenarios
        self.gamma = gamma
        self.budget_s = budget_s
        self.actions = actions

    def best_action(self, model, state, rng: np.random.Generator):
        deadline = time.monotonic() + self.budget_s
        vals = []
        for bits in self.actions:
            if time.monotonic() >= deadline:
                break
            vals.append(self._q_value(model, state, bits, self.depth, rng))
        if not vals:
            return ALL_ON_BITS, vals
        return self.actions[int(np.argmax(vals))], vals

    def act(self, obs, rng):
        bits, _ = self.best_action(obs["model"], obs["model_state"], rng)
        return SensorMask.from_switchable(bits)

    def _value(self, model, state, depth, rng):
        if depth == 0:
            return self._rollout(model, state, rng)
        return max(self._q_value(model, state, bits, depth, rng)
                   for bits in self.actions)

    def _q_value(self, model, state, bits, depth, rng):
        if hasattr(model, "enumerate_observations"):
            total = 0.0
            for prob, nstate, reward, done in model.enumerate_observations(state, bits):
                cont = 0.0 if done else self.gamma * self._value(
                    model, nstate, depth - 1, rng)
                total += prob * (reward + cont)
            return total
        n = max(2, self.scenarios // max(1, self.depth - depth + 1))
        total = 0.0
        for _ in range(n):
            nstate, _, reward, done = model.step(state, bits, rng)
            cont = 0.0 if done else self.gamma * self._value(
                model, nstate, depth - 1, rng)
            total += reward + cont
        return total / n

    def _rollout(self, model, state, rng, steps: int = 3):
        """Always-on tail estimate past the search horizon."""
        if hasattr(model, "terminal_value"):
            return model.terminal_value(state)
        bits = self.actions[-1]
        total, disc = 0.0, 1.0
        for _ in range(steps):
            state, _, reward, done = model.step(state, bits, rng)
            total += disc * reward
            disc *= self.gamma
            if done:
                break
        return total


# ------------------------------------------------------------------- pure RL

N_HEADINGS = 16


class PureRlPolicy:
    """Joint heading-and-mask policy trained by advantage-weighted REINFORCE.

    Skips the planner entirely: 512 joint actions (16 headings x 32 masks)
    from the flat scheduler state. Included to show what end-to-end RL buys
    at this interaction budget.
    """

    def __init__(self, rng: np.random.Generator, state_dim: int = 71,
                 lr: float = 1e-3):
        self.net = Dense(state_dim, 128, rng, act="silu")
        self.out = Dense(128, N_HEADINGS * 32, rng)
        self.baseline = 0.0
        params = list(self.net.parameters()) + list(self.out.parameters())
        self.opt = AdamW(params, lr=lr, weight_decay=1e-4)
        self._params = params

    def _logits(self, state: np.ndarray) -> Tensor:
        return self.out(self.net(Tensor(np.atleast_2d(state)))).clamp(-15.0, 15.0)

    def sample(self, state: np.ndarray, rng: np.random.Generator):
        logits = self._logits(state).data[0]
        p = np.exp(logits - logits.max())
        p /= p.sum()
        a = int(rng.choice(len(p), p=p))
        return a, self.decode(a)

    @staticmethod
    def decode(a: int):
        heading = 2.0 * np.pi * (a // 32) / N_HEADINGS - np.pi
        bits = np.array([(a >> b) & 1 for b in range(N_SWITCHABLE)], np.uint8)
        return heading, SensorMask.from_switchable(bits)

    def reinforce(self, states: np.ndarray, actions: np.ndarray, returns: np.ndarray):
        """One policy-gradient step over an episode batch."""
        adv = returns - self.baseline
        self.baseline += 0.05 * float(returns.mean() - self.baseline)
        logits = self._logits(states)
        z = logits.exp().sum(axis=-1, keepdims=True).log()
        logp_all = logits - z
        picked = logp_all[np.arange(len(actions)), actions]
        loss = (picked * Tensor(-adv)).mean()
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        return float(loss.item())


def make_policy(name: str, rng: np.random.Generator | None = None, **kw):
    table = {
        "always_on": lambda: AlwaysOn(),
        "greedy_off": lambda: GreedyOff(**kw),
        "infogain": lambda: InfoGainGreedy(**kw),
        "random1": lambda: RandomK(1),
        "random2": lambda: RandomK(2),
        "sigma_mean": lambda: SigmaMeanPolicy(**kw),
        "sample_spread": lambda: SampleSpreadPolicy(**kw),
        "despot": lambda: DespotLite(**kw),
    }
    if name not in table:
        raise ValueError(f"unknown policy {name!r}")
    return table[name]()
