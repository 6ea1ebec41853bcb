import numpy as np
import pytest

from senseplan.dataset import Snippet
from senseplan.diffusion import (HORIZON, SCALE_VEC, T_STEPS, TRAJ_DIM,
                                 Denoiser, Schedule, batch_arrays, cvar,
                                 distill, forward_corrupt, pack_images,
                                 student_infer, student_loss, teacher_loss,
                                 teacher_sample, time_embedding, train_teacher,
                                 waypoint_kl)
from senseplan.nn import Tensor


def make_snippet(rng, traj=None, mask=None):
    return Snippet(
        raster=rng.random((64, 64, 5)),
        map_crop=rng.random((64, 64, 3)),
        goal=(rng.random((64, 64)) < 0.05).astype(np.float64),
        mask_bits=np.array([1, 0, 1, 0, 1, 1], np.uint8) if mask is None else mask,
        traj=rng.normal(0, 0.05, (8, 3)) if traj is None else traj,
        sigma=rng.normal(-6, 0.5, 8),
        meta={"world_seed": 0},
    )


def test_schedule_endpoints_and_monotone():
    s = Schedule()
    assert s.alpha_bar[0] == 1.0
    assert s.alpha_bar[-1] == 0.0
    assert len(s.alpha_bar) == T_STEPS + 1
    assert np.all(np.diff(s.alpha_bar) < 0)
    # cosine value at the midpoint
    assert s.alpha_bar[T_STEPS // 2] == pytest.approx(0.5)


def test_forward_corrupt_endpoints():
    s = Schedule()
    rng = np.random.default_rng(0)
    x0 = rng.normal(0, 1, (4, TRAJ_DIM))
    eps = rng.normal(0, 1, x0.shape)
    assert np.allclose(forward_corrupt(x0, np.zeros(4, int), eps, s), x0)
    assert np.allclose(forward_corrupt(x0, np.full(4, T_STEPS), eps, s), eps)
    # variance-preserving mixture at mid-schedule
    mid = forward_corrupt(x0, np.full(4, T_STEPS // 2), eps, s)
    assert np.allclose(mid, np.sqrt(0.5) * x0 + np.sqrt(0.5) * eps)


def test_time_embedding_shape_and_range():
    e = time_embedding([0, 1, 32, 64])
    assert e.shape == (4, 32)
    assert np.all(np.abs(e) <= 1.0 + 1e-12)
    assert not np.allclose(e[0], e[3])


def test_denoiser_shapes_and_sigma_clamp():
    rng = np.random.default_rng(1)
    model = Denoiser(rng)
    sns = [make_snippet(rng) for _ in range(3)]
    images, masks, _ = batch_arrays(sns)
    ctx = model.context(images, masks)
    assert ctx.shape == (3, 64)
    eps_hat, mu_hat, sig = model.heads(ctx, rng.normal(0, 1, (3, TRAJ_DIM)), 10)
    assert eps_hat.shape == (3, TRAJ_DIM)
    assert mu_hat.shape == (3, TRAJ_DIM)
    assert sig.shape == (3, HORIZON)
    assert np.all(sig.data >= -10.0) and np.all(sig.data <= 4.0)


def test_context_depends_on_mask():
    rng = np.random.default_rng(2)
    model = Denoiser(rng)
    sn = make_snippet(rng)
    images, masks, _ = batch_arrays([sn])
    a = model.context(images, masks).data
    b = model.context(images, 1.0 - masks).data
    assert not np.allclose(a, b)


def test_teacher_loss_gradients_flow():
    rng = np.random.default_rng(3)
    model = Denoiser(rng)
    sns = [make_snippet(rng) for _ in range(2)]
    images, masks, trajs = batch_arrays(sns)
    t = np.array([5, 40])
    eps = rng.normal(0, 1, (2, TRAJ_DIM))
    loss, mse, nll = teacher_loss(model, images, masks, trajs, t, eps, Schedule())
    assert np.isfinite(loss.item())
    loss.backward()
    grads = [p.grad for p in model.parameters()]
    assert all(g is not None for g in grads)
    assert any(np.abs(g).max() > 0 for g in grads)


def test_waypoint_kl_zero_at_identity():
    rng = np.random.default_rng(4)
    mu = rng.normal(0, 1, (2, 8, 3))
    sig = rng.normal(-3, 1, (2, 8))
    kl = waypoint_kl(mu, sig, Tensor(mu), Tensor(sig))
    assert kl.item() == pytest.approx(0.0, abs=1e-12)


def test_waypoint_kl_hand_value():
    # one waypoint: mu_a - mu_b = (1, 0, 0), s_a = 0, s_b = 0
    # KL = 0.5 * [3 * 1 + 1 - 3 - 0] = 0.5
    mu_a = np.zeros((1, 1, 3))
    mu_a[0, 0, 0] = 1.0
    kl = waypoint_kl(mu_a, np.zeros((1, 1)),
                     Tensor(np.zeros((1, 1, 3))), Tensor(np.zeros((1, 1))))
    assert kl.item() == pytest.approx(0.5)
    # variance mismatch only: s_a = ln 2, s_b = 0 per 3-dim waypoint
    # KL = 0.5 * 3 * (2 - 1 - ln 2)
    kl2 = waypoint_kl(np.zeros((1, 1, 3)), np.full((1, 1), np.log(2.0)),
                      Tensor(np.zeros((1, 1, 3))), Tensor(np.zeros((1, 1))))
    assert kl2.item() == pytest.approx(1.5 * (1.0 - np.log(2.0)))


def test_cvar_values():
    sig = np.concatenate([np.zeros(7), [np.log(4.0)]])
    assert cvar(sig, alpha=0.05) == pytest.approx(2.0)          # top-1 mean
    assert cvar(np.zeros(8), alpha=1.0) == pytest.approx(1.0)
    # fractional normalization scales the same top-1 by 1 / (alpha H)
    assert cvar(sig, alpha=0.05, normalization="fractional") \
        == pytest.approx(2.0 / 0.4)
    assert cvar(sig, alpha=0.125, normalization="fractional") == pytest.approx(2.0)
    with pytest.raises(ValueError):
        cvar(sig, alpha=0.0)
    with pytest.raises(ValueError):
        cvar(sig, normalization="weird")


def test_cvar_monotone_in_alpha_fractional():
    rng = np.random.default_rng(5)
    sig = rng.normal(-4, 1, 8)
    vals = [cvar(sig, a, normalization="fractional")
            for a in (0.01, 0.05, 0.10, 0.5, 1.0)]
    assert all(a >= b - 1e-12 for a, b in zip(vals, vals[1:]))


def test_teacher_sample_shapes_and_determinism():
    rng = np.random.default_rng(6)
    model = Denoiser(rng)
    sns = [make_snippet(rng) for _ in range(2)]
    images, masks, _ = batch_arrays(sns)
    t1 = teacher_sample(model, images, masks, Schedule(), np.random.default_rng(9))
    t2 = teacher_sample(model, images, masks, Schedule(), np.random.default_rng(9))
    traj, mu, sig = t1
    assert traj.shape == (2, 8, 3) and mu.shape == (2, 8, 3) and sig.shape == (2, 8)
    assert np.allclose(traj, t2[0])
    assert np.all(np.isfinite(traj))


@pytest.mark.slow
def test_teacher_learns_conditional_mean():
    # two mask classes with distinct constant trajectories: after training,
    # the mu head must separate them
    rng = np.random.default_rng(7)
    traj_a = np.tile([0.08, 0.02, 0.01], (8, 1))
    traj_b = np.tile([-0.08, -0.02, -0.01], (8, 1))
    mask_a = np.array([1, 1, 1, 1, 1, 1], np.uint8)
    mask_b = np.array([0, 0, 0, 0, 0, 1], np.uint8)
    sns = []
    for i in range(8):
        sns.append(make_snippet(rng, traj=traj_a + rng.normal(0, 0.002, (8, 3)),
                                mask=mask_a))
        sns.append(make_snippet(rng, traj=traj_b + rng.normal(0, 0.002, (8, 3)),
                                mask=mask_b))
    model, rows = train_teacher(sns, rng, steps=600, batch=8, lr=1e-3)
    assert rows[-1][1] < rows[0][1]
    images, masks, _ = batch_arrays([sns[0], sns[1]])
    ctx = model.context(images, masks)
    _, mu, _ = model.heads(ctx, np.zeros((2, TRAJ_DIM)), T_STEPS)
    mu_phys = (mu.data * SCALE_VEC[None, :]).reshape(2, 8, 3)
    assert mu_phys[0, :, 0].mean() > 0.02
    assert mu_phys[1, :, 0].mean() < -0.02


@pytest.mark.slow
def test_distillation_matches_teacher():
    rng = np.random.default_rng(8)
    sched = Schedule(16)   # short schedule keeps this desk-scale check tight
    traj = np.tile([0.06, 0.0, 0.0], (8, 1))
    sns = [make_snippet(rng, traj=traj + rng.normal(0, 0.003, (8, 3)))
           for _ in range(6)]
    teacher, _ = train_teacher(sns, rng, steps=500, batch=6, lr=1e-3, sched=sched)
    student, rows = distill(teacher, sns, rng, steps=300, batch=8, lr=1e-3,
                            sched=sched)
    assert rows[-1][1] < rows[0][1]
    assert rows[0][4] == 0.0 and rows[-1][4] == pytest.approx(0.5)
    images, masks, _ = batch_arrays(sns[:2])
    rs, rt = np.random.default_rng(0), np.random.default_rng(1)
    mu_s = np.mean([student_infer(student, images, masks, rs)[0]
                    for _ in range(16)], axis=0)
    mu_t = np.mean([teacher_sample(teacher, images, masks, sched, rt)[1]
                    for _ in range(16)], axis=0)
    assert np.abs(mu_s - mu_t).mean() < 0.05
    assert np.all(np.isfinite(student_infer(student, images, masks, rs)[1]))


def test_student_loss_gradients():
    rng = np.random.default_rng(9)
    student = Denoiser(rng)
    sns = [make_snippet(rng) for _ in range(2)]
    images, masks, _ = batch_arrays(sns)
    x_T = rng.normal(0, 1, (2, TRAJ_DIM))
    mu_ref = rng.normal(0, 0.05, (2, 8, 3))
    sig_ref = rng.normal(-6, 0.5, (2, 8))
    loss, mse, kl = student_loss(student, images, masks, x_T, mu_ref, sig_ref, 0.3)
    assert np.isfinite(loss.item()) and kl >= 0.0
    loss.backward()
    assert any(np.abs(p.grad).max() > 0 for p in student.parameters())


def test_pack_images_layout():
    rng = np.random.default_rng(10)
    sn = make_snippet(rng)
    img = pack_images(sn)
    assert img.shape == (9, 64, 64)
    assert np.array_equal(img[0], sn.raster[:, :, 0])
    assert np.array_equal(img[5], sn.map_crop[:, :, 0])
    assert np.array_equal(img[8], sn.goal)
