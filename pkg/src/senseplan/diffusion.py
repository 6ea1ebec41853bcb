"""Belief-conditioned trajectory planner: diffusion teacher, one-step student.

The teacher denoises H x 3 waypoint increments conditioned on the belief
raster, map crop, goal image, and sensor mask; auxiliary heads emit a mean
trajectory and one log-variance per waypoint. The student is the same
backbone queried once at the terminal noise level and trained to match the
teacher's final denoised mean and variances.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .dataset import Snippet
from .nn import (AdamW, Conv2d, Dense, FiLM, GlobalAvgPool, Module,
                 ModuleList, Tensor, clip_grad_norm, concat, ema_update,
                 gaussian_nll)

T_STEPS = 64
HORIZON = 8
TRAJ_DIM = HORIZON * 3
SIGMA_LO, SIGMA_HI = -10.0, 4.0
NLL_WEIGHT = 0.05             # beta on the trajectory-head term
KL_WEIGHT_MAX = 0.5           # distillation variance-matching weight at full ramp
TIME_EMB = 32

# physical increment scale per waypoint dim; x and y share the planar scale
TRAJ_SCALE = np.array([0.125, 0.125, 0.1875])
SCALE_VEC = np.tile(TRAJ_SCALE, HORIZON)


@dataclass
class Schedule:
    """Cosine signal-retention schedule over T_STEPS diffusion steps."""

    t_max: int = T_STEPS
    alpha_bar: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.alpha_bar is None:
            t = np.arange(self.t_max + 1, dtype=float)
            ab = np.cos(0.5 * np.pi * t / self.t_max) ** 2
            ab[0], ab[-1] = 1.0, 0.0   # exact endpoints
            self.alpha_bar = ab
        if self.alpha_bar.shape != (self.t_max + 1,):
            raise ValueError("alpha_bar must have t_max + 1 entries")


def forward_corrupt(x0: np.ndarray, t, eps: np.ndarray, sched: Schedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; t may be per-sample."""
    ab = sched.alpha_bar[np.asarray(t)]
    ab = np.asarray(ab, dtype=float).reshape(-1, *([1] * (x0.ndim - 1)))
    if x0.ndim == 1:
        ab = ab.reshape(())
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def time_embedding(t, t_max: int = T_STEPS, dim: int = TIME_EMB) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=float))
    half = dim // 2
    freqs = np.exp(-np.log(1e4) * np.arange(half) / half)
    ang = (t[:, None] / t_max) * t_max * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class Denoiser(Module):
    """Shared backbone for teacher and student heads.

    Context (raster + crop + goal through a strided conv stack, plus a mask
    embedding) is independent of the diffusion state, so samplers compute it
    once and reuse it across reverse steps.
    """

    def __init__(self, rng: np.random.Generator):
        self.enc = ModuleList([
            Conv2d(9, 16, rng, stride=2, act="silu"),
            Conv2d(16, 32, rng, stride=2, act="silu"),
            Conv2d(32, 64, rng, stride=2, act="silu"),
        ])
        self.pool = GlobalAvgPool()
        self.mask_in = Dense(6, 16, rng, act="silu")
        self.mask_out = Dense(16, 64, rng)
        self.trunk1 = Dense(64 + TRAJ_DIM, 128, rng)
        self.film1 = FiLM(128, TIME_EMB, rng)
        self.trunk2 = Dense(128, 128, rng)
        self.film2 = FiLM(128, TIME_EMB, rng)
        self.head_eps = Dense(128, TRAJ_DIM, rng)
        self.head_mu = Dense(128, TRAJ_DIM, rng)
        self.head_sigma = Dense(128, HORIZON, rng)

    def context(self, images: np.ndarray, mask_bits: np.ndarray) -> Tensor:
        """images (B, 9, 64, 64), mask_bits (B, 6) -> (B, 64) features."""
        h = Tensor(images)
        for conv in self.enc:
            h = conv(h)
        feats = self.pool(h)
        return feats + self.mask_out(self.mask_in(Tensor(mask_bits.astype(float))))

    def heads(self, ctx: Tensor, x_t: np.ndarray, t) -> tuple[Tensor, Tensor, Tensor]:
        """Returns (eps_hat (B,24), mu_hat normalized (B,24), sigma_log (B,8))."""
        temb = Tensor(time_embedding(np.broadcast_to(t, (ctx.shape[0],))))
        h = concat([ctx, Tensor(np.atleast_2d(x_t))], axis=1)
        h = self.film1(self.trunk1(h), temb).silu()
        h = self.film2(self.trunk2(h), temb).silu()
        return (self.head_eps(h), self.head_mu(h),
                self.head_sigma(h).clamp(SIGMA_LO, SIGMA_HI))


def pack_images(sn: Snippet) -> np.ndarray:
    """Stack raster, map crop, and goal image into the (9, 64, 64) input."""
    chans = [sn.raster[:, :, c] for c in range(5)]
    chans += [sn.map_crop[:, :, c] for c in range(3)]
    chans.append(sn.goal)
    return np.stack(chans, axis=0)


def batch_arrays(snippets) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    images = np.stack([pack_images(s) for s in snippets])
    masks = np.stack([s.mask_bits for s in snippets]).astype(float)
    trajs = np.stack([s.traj for s in snippets])
    return images, masks, trajs


def teacher_loss(model: Denoiser, images, masks, trajs, t, eps,
                 sched: Schedule, ctx: Tensor | None = None):
    """Denoising MSE plus the weighted trajectory-head NLL, averaged per sample."""
    B = trajs.shape[0]
    x0 = (trajs.reshape(B, TRAJ_DIM)) / SCALE_VEC[None, :]
    x_t = forward_corrupt(x0, t, eps, sched)
    if ctx is None:
        ctx = model.context(images, masks)
    eps_hat, mu_hat, sigma_log = model.heads(ctx, x_t, t)
    mse = ((eps_hat - eps) * (eps_hat - eps)).sum() * (1.0 / B)
    mu_phys = mu_hat * SCALE_VEC[None, :]
    nll = gaussian_nll(trajs.reshape(B, HORIZON, 3),
                       mu_phys.reshape(B, HORIZON, 3), sigma_log) * (1.0 / B)
    return mse + nll * NLL_WEIGHT, float(mse.item()), float(nll.item())


def teacher_sample(model: Denoiser, images, masks, sched: Schedule,
                   rng: np.random.Generator, ctx: Tensor | None = None):
    """Ancestral reverse chain; returns (traj (B,H,3), mu (B,H,3), sigma (B,H)).

    At the terminal step the signal level is exactly zero, so the trajectory
    head bootstraps the denoised estimate instead of the epsilon head.
    """
    if ctx is None:
        ctx = model.context(images, masks)
    x_T = rng.normal(0, 1, (ctx.shape[0], TRAJ_DIM))
    return _sample_from(model, ctx, x_T, sched, rng)


def waypoint_kl(mu_a: Tensor | np.ndarray, sig_a: Tensor | np.ndarray,
                mu_b: Tensor, sig_b: Tensor) -> Tensor:
    """KL(a || b) per waypoint with 3-dim shared-variance components, summed.

    0.5 * sum_k [(3 e^{s_a} + ||mu_a - mu_b||^2) e^{-s_b} - 3 - 3(s_a - s_b)].
    """
    mu_a = mu_a if isinstance(mu_a, Tensor) else Tensor(mu_a)
    sig_a = sig_a if isinstance(sig_a, Tensor) else Tensor(sig_a)
    diff = mu_a - mu_b
    d2 = (diff * diff).sum(axis=-1)
    dl = sig_a - sig_b
    term = (dl.exp() + d2 * (-sig_b).exp() * (1.0 / 3.0) - 1.0 - dl) * 3.0
    return term.sum() * 0.5


def student_loss(student: Denoiser, images, masks, x_T, mu_ref, sig_ref,
                 kl_weight: float, ctx: Tensor | None = None):
    """Mean-matching MSE plus ramped per-waypoint KL to the teacher."""
    B = x_T.shape[0]
    if ctx is None:
        ctx = student.context(images, masks)
    _, mu_hat, sigma_log = student.heads(ctx, x_T, T_STEPS)
    mu_phys = (mu_hat * SCALE_VEC[None, :]).reshape(B, HORIZON, 3)
    diff = mu_phys - Tensor(mu_ref)
    mse = (diff * diff).sum() * (1.0 / B)
    kl = waypoint_kl(mu_ref, sig_ref, mu_phys, sigma_log) * (1.0 / B)
    return mse + kl * kl_weight, float(mse.item()), float(kl.item())


def student_infer(student: Denoiser, images, masks, rng: np.random.Generator,
                  ctx: Tensor | None = None):
    """One-shot plan: (traj == mu (B,H,3), sigma_log (B,H))."""
    if ctx is None:
        ctx = student.context(images, masks)
    x_T = rng.normal(0, 1, (ctx.shape[0], TRAJ_DIM))
    _, mu_hat, sigma_log = student.heads(ctx, x_T, T_STEPS)
    return (mu_hat.data * SCALE_VEC[None, :]).reshape(-1, HORIZON, 3), sigma_log.data


def cvar(sigma_log: np.ndarray, alpha: float = 0.05,
         normalization: str = "topk") -> float:
    """Tail-risk scalar over per-waypoint deviations sqrt(exp(sigma)).

    "topk" averages the k = ceil(alpha H) largest deviations. "fractional"
    divides the same top-k sum by alpha * H, so the scalar keeps moving as
    alpha shrinks below 1/H instead of collapsing onto the max.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    s = np.sqrt(np.exp(np.asarray(sigma_log, dtype=float)))
    h = s.shape[-1]
    k = int(np.ceil(alpha * h))
    top = np.sort(s, axis=-1)[..., -k:]
    if normalization == "topk":
        return float(np.mean(top.sum(axis=-1) / k))
    if normalization == "fractional":
        return float(np.mean(top.sum(axis=-1) / (alpha * h)))
    raise ValueError(f"unknown normalization {normalization!r}")


# ------------------------------------------------------------------- training

def _write_curve(path, rows, header):
    if path is None:
        return
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def train_teacher(snippets, rng: np.random.Generator, steps: int = 300,
                  batch: int = 16, lr: float = 3e-4, curve_path=None,
                  sched: Schedule | None = None):
    """Returns (model with EMA weights applied, curve rows)."""
    sched = sched or Schedule()
    model = Denoiser(rng)
    params = dict(model.named_parameters())
    opt = AdamW(params.values(), lr=lr, weight_decay=1e-4)
    shadow = {k: p.data.copy() for k, p in params.items()}
    rows = []
    for step in range(steps):
        idx = rng.integers(0, len(snippets), batch)
        images, masks, trajs = batch_arrays([snippets[i] for i in idx])
        t = rng.integers(1, sched.t_max + 1, batch)
        eps = rng.normal(0, 1, (batch, TRAJ_DIM))
        model.zero_grad()
        loss, mse, nll = teacher_loss(model, images, masks, trajs, t, eps, sched)
        loss.backward()
        clip_grad_norm(params.values(), 1.0)
        opt.step()
        # warmup keeps the average useful on short runs; long runs approach
        # the target decay
        decay = min(0.9999, (1.0 + step) / (10.0 + step))
        ema_update(shadow, {k: p.data for k, p in params.items()}, decay)
        rows.append([step, float(loss.item()), mse, nll])
    for k, p in params.items():
        p.data[...] = shadow[k]
    _write_curve(curve_path, rows, ["step", "loss", "mse", "nll"])
    return model, rows


def distill(teacher: Denoiser, snippets, rng: np.random.Generator,
            steps: int = 300, batch: int = 16, lr: float = 2e-4,
            refs_per_snippet: int = 1, curve_path=None,
            sched: Schedule | None = None):
    """Consistency distillation into a fresh one-step student.

    Teacher references (terminal noise paired with the teacher's final mean
    and variances) are precomputed once per snippet and reused every epoch.
    """
    sched = sched or Schedule()
    n_ref = min(len(snippets), max(batch, 256))
    ref_idx = rng.choice(len(snippets), n_ref, replace=False)
    refs = []
    for i in ref_idx:
        images, masks, _ = batch_arrays([snippets[i]])
        ctx = teacher.context(images, masks)
        for _ in range(refs_per_snippet):
            x_T = rng.normal(0, 1, (1, TRAJ_DIM))
            traj, mu, sig = _sample_from(teacher, ctx, x_T, sched, rng)
            refs.append((images[0], masks[0], x_T[0], mu[0], sig[0]))

    student = Denoiser(rng)
    params = dict(student.named_parameters())
    opt = AdamW(params.values(), lr=lr, weight_decay=1e-4)
    rows = []
    for step in range(steps):
        lam = KL_WEIGHT_MAX * step / max(steps - 1, 1)
        take = rng.integers(0, len(refs), batch)
        images = np.stack([refs[i][0] for i in take])
        masks = np.stack([refs[i][1] for i in take])
        x_T = np.stack([refs[i][2] for i in take])
        mu_ref = np.stack([refs[i][3] for i in take])
        sig_ref = np.stack([refs[i][4] for i in take])
        student.zero_grad()
        loss, mse, kl = student_loss(student, images, masks, x_T, mu_ref,
                                     sig_ref, lam)
        loss.backward()
        clip_grad_norm(params.values(), 0.5)
        opt.step()
        rows.append([step, float(loss.item()), mse, kl, lam])
    _write_curve(curve_path, rows, ["step", "loss", "mse", "kl", "kl_weight"])
    return student, rows


def _sample_from(model: Denoiser, ctx: Tensor, x_T: np.ndarray, sched: Schedule,
                 rng: np.random.Generator):
    """Ancestral chain starting from a caller-provided terminal noise."""
    x = x_T.copy()
    ab = sched.alpha_bar
    mu_last = sig_last = None
    for t in range(sched.t_max, 0, -1):
        eps_hat, mu_hat, sigma_log = model.heads(ctx, x, t)
        mu_last, sig_last = mu_hat.data, sigma_log.data
        if ab[t] <= 0.0:
            x0 = mu_hat.data / SCALE_VEC[None, :]
        else:
            x0 = (x - np.sqrt(1.0 - ab[t]) * eps_hat.data) / np.sqrt(ab[t])
        x0 = np.clip(x0, -5.0, 5.0)
        if t == 1:
            x = x0
            break
        a_t = ab[t] / ab[t - 1] if ab[t] > 0 else 0.0
        beta_t = 1.0 - a_t
        denom = 1.0 - ab[t] if ab[t] < 1.0 else 1.0
        mean = (np.sqrt(ab[t - 1]) * beta_t * x0
                + np.sqrt(a_t) * (1.0 - ab[t - 1]) * x) / denom
        var = beta_t * (1.0 - ab[t - 1]) / denom
        x = mean + np.sqrt(max(var, 0.0)) * rng.normal(0, 1, x.shape)
    traj = (x * SCALE_VEC[None, :]).reshape(-1, HORIZON, 3)
    return traj, (mu_last * SCALE_VEC[None, :]).reshape(-1, HORIZON, 3), sig_last
