"""Risk-constrained sensor scheduler: soft actor-critic over Bernoulli masks.

State is the belief raster (through a small conv encoder) plus the planner's
tail-risk scalar, normalized goal distance, and the previous mask. The policy
emits one on/off probability per switchable sensor; the inertial unit is
always powered. An adaptive Lagrange multiplier prices constraint violations
(risk above the error budget) into the reward.

The encoder is trained by the critic loss only; actor and value heads see
detached features. This mirrors the usual pixel-input actor-critic recipe and
halves the number of conv backward passes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .nn import AdamW, Conv2d, Dense, GlobalAvgPool, Module, ModuleList, Tensor, concat
from .sensors import N_SWITCHABLE, SensorMask

FEAT_DIM = 64
STATE_DIM = FEAT_DIM + 2 + N_SWITCHABLE   # features | u / eta_max | d / R | prev mask


class TrainingDiverged(RuntimeError):
    """Loss or parameters went non-finite during scheduler training."""


@dataclass
class SchedulerConfig:
    gamma: float = 0.99
    tau: float = 0.005                 # Polyak rate for the value target
    lr: float = 3e-4
    alpha_init: float = 0.2
    # target policy entropy; 40% of the 5-Bernoulli maximum keeps exploration
    # alive without forcing near-uniform masks
    entropy_target: float = 0.4 * N_SWITCHABLE * np.log(2.0)
    alpha_lr: float = 3e-3
    lambda_lr: float = 0.05            # dual ascent rate
    violation_budget: float = 0.02     # tolerated violation frequency
    eta_max: float = 2.0               # error budget, meters
    relax_temp: float = 0.7            # relaxed-Bernoulli temperature
    batch: int = 32
    buffer_size: int = 4096
    warmup: int = 128
    updates_per_step: int = 1
    violation_window: int = 1000


def _mlp(rng, dims, act="silu"):
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        layers.append(Dense(a, b, rng, act=act if i < len(dims) - 2 else "none"))
    return ModuleList(layers)


def _run(mlp: ModuleList, x: Tensor) -> Tensor:
    for layer in mlp:
        x = layer(x)
    return x


class ActorCritic(Module):
    """Shared conv encoder, Bernoulli actor, twin critics, state value head."""

    def __init__(self, rng: np.random.Generator, cfg: SchedulerConfig | None = None):
        self.cfg = cfg or SchedulerConfig()
        self.enc = ModuleList([
            Conv2d(5, 16, rng, stride=2, act="silu"),
            Conv2d(16, 32, rng, stride=2, act="silu"),
            Conv2d(32, 64, rng, stride=2, act="silu"),
        ])
        self.pool = GlobalAvgPool()
        self.actor = _mlp(rng, [STATE_DIM, 128, 128, N_SWITCHABLE])
        self.q1 = _mlp(rng, [STATE_DIM + N_SWITCHABLE, 128, 128, 1])
        self.q2 = _mlp(rng, [STATE_DIM + N_SWITCHABLE, 128, 128, 1])
        self.value = _mlp(rng, [STATE_DIM, 128, 1])
        self.value_target = _mlp(rng, [STATE_DIM, 128, 1])
        for k, p in self.value_target.named_parameters():
            p.data[...] = dict(self.value.named_parameters())[k].data
        self.log_alpha = float(np.log(self.cfg.alpha_init))
        self.lam = 0.0

    def features(self, rasters: np.ndarray) -> Tensor:
        """(B, 64, 64, 5) or (B, 5, 64, 64) raster stack -> (B, 64)."""
        if rasters.shape[-1] == 5:
            rasters = np.transpose(rasters, (0, 3, 1, 2))
        h = Tensor(np.ascontiguousarray(rasters, dtype=np.float64))
        for conv in self.enc:
            h = conv(h)
        return self.pool(h)

    def state(self, feats: Tensor, u, d, prev) -> Tensor:
        cfg = self.cfg
        scal = np.column_stack([np.atleast_1d(u) / cfg.eta_max, np.atleast_1d(d)])
        return concat([feats, Tensor(scal), Tensor(np.atleast_2d(prev))], axis=1)

    def logits(self, z: Tensor) -> Tensor:
        return _run(self.actor, z).clamp(-10.0, 10.0)

    def act(self, obs: dict, rng: np.random.Generator, explore: bool = True) -> SensorMask:
        """obs needs raster, u, d_frac, prev (5 bits)."""
        feats = self.features(obs["raster"][None])
        z = self.state(Tensor(feats.data), obs["u"], obs["d_frac"], obs["prev"])
        p = 1.0 / (1.0 + np.exp(-self.logits(z).data[0]))
        bits = (rng.random(N_SWITCHABLE) < p) if explore else (p >= 0.5)
        return SensorMask.from_switchable(bits.astype(np.uint8))

    def q_min(self, z: Tensor, a: Tensor) -> Tensor:
        za = concat([z, a], axis=1)
        q1, q2 = _run(self.q1, za), _run(self.q2, za)
        m = Tensor((q1.data <= q2.data).astype(float))
        return q1 * m + q2 * (1.0 - m)

    def dual_update(self, violation_rate: float):
        self.lam = max(0.0, self.lam + self.cfg.lambda_lr
                       * (violation_rate - self.cfg.violation_budget))
        return self.lam

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha))


def _bernoulli_entropy(logits: Tensor) -> Tensor:
    """Sum over dims of H(Bern(sigmoid(l))), stable through the logits."""
    p = logits.sigmoid()
    sp_pos = (logits.exp() + 1.0).log()          # softplus(l), logits clamped
    return (p * (sp_pos - logits) + (1.0 - p) * sp_pos).sum(axis=-1)


def _relaxed_sample(logits: Tensor, rng: np.random.Generator, temp: float) -> Tensor:
    u = np.clip(rng.random(logits.shape), 1e-6, 1.0 - 1e-6)
    noise = np.log(u) - np.log1p(-u)
    return ((logits + noise) * (1.0 / temp)).sigmoid()


class ReplayBuffer:
    """Ring buffer; rasters stored half-precision."""

    def __init__(self, size: int):
        self.size = size
        self.n = 0
        self.ptr = 0
        self._init = False

    def _alloc(self, raster_shape):
        s = self.size
        self.raster = np.zeros((s, *raster_shape), np.float16)
        self.raster2 = np.zeros((s, *raster_shape), np.float16)
        self.scal = np.zeros((s, 2), np.float32)      # u, d_frac
        self.scal2 = np.zeros((s, 2), np.float32)
        self.prev = np.zeros((s, N_SWITCHABLE), np.float32)
        self.prev2 = np.zeros((s, N_SWITCHABLE), np.float32)
        self.act = np.zeros((s, N_SWITCHABLE), np.float32)
        self.rew = np.zeros(s, np.float32)
        self.viol = np.zeros(s, np.float32)
        self.done = np.zeros(s, np.float32)
        self._init = True

    def push(self, obs, action, reward, violation, obs2, done):
        if not self._init:
            self._alloc(obs["raster"].shape)
        i = self.ptr
        self.raster[i] = obs["raster"]
        self.scal[i] = (obs["u"], obs["d_frac"])
        self.prev[i] = obs["prev"]
        self.act[i] = action
        self.rew[i] = reward
        self.viol[i] = violation
        self.raster2[i] = obs2["raster"]
        self.scal2[i] = (obs2["u"], obs2["d_frac"])
        self.prev2[i] = obs2["prev"]
        self.done[i] = float(done)
        self.ptr = (self.ptr + 1) % self.size
        self.n = min(self.n + 1, self.size)

    def sample(self, rng: np.random.Generator, batch: int):
        idx = rng.integers(0, self.n, batch)
        return {
            "raster": self.raster[idx].astype(np.float64),
            "u": self.scal[idx, 0].astype(float), "d": self.scal[idx, 1].astype(float),
            "prev": self.prev[idx].astype(float), "act": self.act[idx].astype(float),
            "rew": self.rew[idx].astype(float), "viol": self.viol[idx].astype(float),
            "raster2": self.raster2[idx].astype(np.float64),
            "u2": self.scal2[idx, 0].astype(float), "d2": self.scal2[idx, 1].astype(float),
            "prev2": self.prev2[idx].astype(float), "done": self.done[idx].astype(float),
        }


class SacTrainer:
    def __init__(self, model: ActorCritic, rng: np.random.Generator):
        self.model = model
        self.rng = rng
        cfg = model.cfg
        critic_params = dict(model.enc.named_parameters())
        critic_params.update({f"q1.{k}": p for k, p in model.q1.named_parameters()})
        critic_params.update({f"q2.{k}": p for k, p in model.q2.named_parameters()})
        self._critic_params = critic_params
        self.opt_critic = AdamW(critic_params.values(), lr=cfg.lr, weight_decay=1e-4)
        self.opt_actor = AdamW(
            [p for _, p in model.actor.named_parameters()], lr=cfg.lr, weight_decay=1e-4)
        self.opt_value = AdamW(
            [p for _, p in model.value.named_parameters()], lr=cfg.lr, weight_decay=1e-4)

    def update(self, batch: dict) -> dict:
        m, cfg = self.model, self.model.cfg
        B = len(batch["rew"])

        # shaped reward and bootstrap target through the target value head
        feats2 = m.features(batch["raster2"])
        z2 = m.state(Tensor(feats2.data), batch["u2"], batch["d2"], batch["prev2"])
        v2 = _run(m.value_target, z2).data[:, 0]
        shaped = batch["rew"] - m.lam * batch["viol"]
        y = shaped + cfg.gamma * (1.0 - batch["done"]) * v2

        # critics (and encoder) toward the TD target
        m.zero_grad()
        feats = m.features(batch["raster"])
        z = m.state(feats, batch["u"], batch["d"], batch["prev"])
        za = concat([z, Tensor(batch["act"])], axis=1)
        q1, q2 = _run(m.q1, za)[:, 0], _run(m.q2, za)[:, 0]
        yt = Tensor(y)
        critic_loss = ((q1 - yt) * (q1 - yt) + (q2 - yt) * (q2 - yt)).mean()
        critic_loss.backward()
        self.opt_critic.step()

        # actor on detached features, relaxed-Bernoulli pathwise gradient
        m.zero_grad()
        z_det = Tensor(z.data)
        logits = m.logits(z_det)
        a_soft = _relaxed_sample(logits, self.rng, cfg.relax_temp)
        ent = _bernoulli_entropy(logits)
        q_pi = m.q_min(z_det, a_soft)[:, 0]
        actor_loss = (q_pi * -1.0 + ent * -m.alpha).mean()
        actor_loss.backward()
        self.opt_actor.step()

        # state value toward q_min of a fresh action plus the entropy bonus
        m.zero_grad()
        v_target = q_pi.data + m.alpha * ent.data
        v = _run(m.value, z_det)[:, 0]
        vt = Tensor(v_target)
        value_loss = ((v - vt) * (v - vt)).mean()
        value_loss.backward()
        self.opt_value.step()

        # temperature follows the entropy gap, then Polyak on the target head
        h_mean = float(ent.data.mean())
        m.log_alpha -= cfg.alpha_lr * (h_mean - cfg.entropy_target)
        m.log_alpha = float(np.clip(m.log_alpha, -8.0, 2.0))
        live = dict(m.value.named_parameters())
        for k, p in m.value_target.named_parameters():
            p.data[...] = (1.0 - cfg.tau) * p.data + cfg.tau * live[k].data

        stats = {"critic_loss": float(critic_loss.item()),
                 "actor_loss": float(actor_loss.item()),
                 "value_loss": float(value_loss.item()),
                 "entropy": h_mean, "alpha": m.alpha, "lambda": m.lam,
                 "q_mean": float(q1.data.mean())}
        if not all(np.isfinite(v) for v in stats.values()):
            raise TrainingDiverged(f"non-finite training statistics: {stats}")
        return stats


def train_scheduler(env, rng: np.random.Generator, steps: int = 2000,
                    cfg: SchedulerConfig | None = None, log_path=None,
                    model: ActorCritic | None = None) -> tuple[ActorCritic, list]:
    """Off-policy training against any env exposing reset() and step(bits).

    reset() -> obs dict (raster, u, d_frac, prev); step(bits) ->
    (obs, reward, violation, done, info). Violations feed both the shaped
    reward and the dual ascent on the multiplier over a sliding window.
    """
    cfg = cfg or SchedulerConfig()
    model = model or ActorCritic(rng, cfg)
    trainer = SacTrainer(model, rng)
    buf = ReplayBuffer(cfg.buffer_size)
    window = []
    rows = []
    obs = env.reset()
    for step in range(steps):
        mask = model.act(obs, rng, explore=True)
        bits = mask.switchable().astype(float)
        obs2, reward, violation, done, _ = env.step(mask)
        buf.push(obs, bits, reward, violation, obs2, done)
        window.append(float(violation))
        if len(window) > cfg.violation_window:
            window.pop(0)
        obs = env.reset() if done else obs2
        if buf.n >= cfg.warmup:
            for _ in range(cfg.updates_per_step):
                stats = trainer.update(buf.sample(rng, cfg.batch))
            model.dual_update(float(np.mean(window)))
            rows.append([step, reward, float(violation), stats["critic_loss"],
                         stats["actor_loss"], stats["entropy"], stats["alpha"],
                         model.lam])
    if log_path is not None:
        with open(log_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "reward", "violation", "critic_loss",
                        "actor_loss", "entropy", "alpha", "lambda"])
            w.writerows(rows)
    return model, rows
