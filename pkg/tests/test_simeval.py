import numpy as np
import pytest

from senseplan.baselines import AlwaysOn, RandomK
from senseplan.diffusion import Denoiser
from senseplan.nn import Tensor
from senseplan.sensors import SENSOR_NAMES, SensorMask, power_cost
from senseplan.simeval import (DespotModel, EpisodeEnv, EpisodeLog,
                               FaultWindow, ReliabilityReport, collect_pairs,
                               fault_report, fit_calibration, fit_exponent,
                               load_logs, metrics_table, recovery_tick,
                               reliability, run_episode, save_logs,
                               write_metrics_csv, write_svg_lines,
                               write_timings_csv)
from senseplan.world import generate_world


def _make_log(seed=0, status="goal", T=10, mask=None, u=None, err=None):
    mask = SensorMask.all_on() if mask is None else mask
    bits = np.tile(mask.bits, (T, 1))
    return EpisodeLog(
        seed=seed, status=status, eta_max=2.0,
        true_pose=np.zeros((T, 3)), belief_mean=np.zeros((T, 3)),
        sigma_b=np.zeros(T),
        u=np.zeros(T) if u is None else np.asarray(u, float),
        mask_bits=bits,
        power=np.full(T, power_cost(mask)),
        planned=np.zeros((T, 8, 3)), realized=np.zeros((T, 8, 3)),
        realized_err=np.zeros(T) if err is None else np.asarray(err, float),
        collision=np.zeros(T, bool), decision_ms=np.zeros(T))


def test_log_power_invariant_enforced():
    log = _make_log()
    with pytest.raises(ValueError):
        EpisodeLog(seed=0, status="goal", eta_max=2.0,
                   true_pose=np.zeros((1, 3)), belief_mean=np.zeros((1, 3)),
                   sigma_b=np.zeros(1), u=np.zeros(1),
                   mask_bits=SensorMask.imu_only().bits[None],
                   power=np.array([25.5]),
                   planned=np.zeros((1, 8, 3)), realized=np.zeros((1, 8, 3)),
                   realized_err=np.zeros(1), collision=np.zeros(1, bool),
                   decision_ms=np.zeros(1))
    assert log.n_ticks == 10


def test_log_payload_roundtrip_bitexact():
    rng = np.random.default_rng(5)
    log = _make_log(seed=7, status="collision", T=6,
                    u=rng.random(6), err=rng.random(6))
    log.true_pose = rng.normal(0, 1, (6, 3))
    back = EpisodeLog.from_payload(log.to_payload())
    assert back.seed == 7 and back.status == "collision"
    np.testing.assert_array_equal(back.true_pose, log.true_pose)
    np.testing.assert_array_equal(back.u, log.u)
    assert back.to_payload() == log.to_payload()


def test_log_container_roundtrip_and_corruption(tmp_path):
    logs = [_make_log(seed=i) for i in range(3)]
    p = tmp_path / "logs.jepl"
    save_logs(p, logs, {"run": "x"})
    back, manifest = load_logs(p)
    assert manifest == {"run": "x"} and len(back) == 3
    assert back[1].seed == 1

    raw = bytearray(p.read_bytes())
    raw[-10] ^= 0xFF
    (tmp_path / "bad.jepl").write_bytes(bytes(raw))
    with pytest.raises(IOError, match="corrupt"):
        load_logs(tmp_path / "bad.jepl")
    (tmp_path / "nomagic.jepl").write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(IOError, match="not an episode-log"):
        load_logs(tmp_path / "nomagic.jepl")


def test_metrics_aon_vs_itself_is_100_pct():
    logs = {"always_on": [_make_log(seed=i) for i in range(4)]}
    rows = metrics_table(logs)
    assert rows[0]["energy_vs_aon_pct"] == pytest.approx(100.0)
    assert rows[0]["goal_pct"] == 100.0


def test_metrics_imu_only_mean_sensors():
    logs = {"always_on": [_make_log(seed=0)],
            "imu": [_make_log(seed=0, mask=SensorMask.imu_only())]}
    rows = {r["scheduler"]: r for r in metrics_table(logs)}
    assert rows["imu"]["mean_sensors"] == pytest.approx(1.0)
    assert rows["imu"]["energy_vs_aon_pct"] == pytest.approx(
        100.0 * 0.1 / 25.5)


def test_metrics_counts_injected_violations():
    err = np.zeros(100)
    err[:7] = 5.0          # 7 of 100 ticks above eta_max
    logs = {"always_on": [_make_log(seed=0, T=100, err=err)]}
    rows = metrics_table(logs)
    assert rows[0]["cvar_violation_pct"] == pytest.approx(7.0)


def test_metrics_requires_logs():
    with pytest.raises(ValueError):
        metrics_table({"x": []})


def test_metrics_csv_excludes_timings(tmp_path):
    logs = {"always_on": [_make_log(seed=0)]}
    rows = metrics_table(logs)
    write_metrics_csv(rows, tmp_path / "m.csv")
    write_timings_csv(rows, tmp_path / "t.csv")
    m = (tmp_path / "m.csv").read_text()
    assert "decision_ms" not in m
    assert "decision_ms" in (tmp_path / "t.csv").read_text()
    write_metrics_csv(rows, tmp_path / "m2.csv")
    assert m == (tmp_path / "m2.csv").read_text()


def test_reliability_perfectly_calibrated():
    rng = np.random.default_rng(0)
    n = 10_000
    u = rng.uniform(0.5, 2.0, n)
    # errors whose 95th percentile equals the prediction
    err = u * rng.uniform(0, 1, n) / 0.95
    rep = reliability(np.column_stack([u, err]), eta_max=2.0)
    assert not rep.degenerate
    assert sum(b[2] for b in rep.bins) == n
    assert rep.mace <= 0.01


def test_reliability_constant_predictions_degenerate():
    n = 500
    pairs = np.column_stack([np.full(n, 1.0), np.linspace(0, 2, n)])
    rep = reliability(pairs)
    assert rep.degenerate
    assert len(rep.bins) == 1 and rep.bins[0][2] == n


def test_reliability_two_x_overprediction():
    rng = np.random.default_rng(1)
    n = 10_000
    truth = rng.uniform(0.5, 1.0, n)
    err = truth * rng.uniform(0, 1, n) / 0.95
    pairs = np.column_stack([2.0 * truth, err])
    rep = reliability(pairs, eta_max=2.0)
    # |2t - t| / eta averaged over bins
    assert rep.mace == pytest.approx(np.mean(truth) / 2.0, abs=0.03)


def test_reliability_insufficient_samples():
    with pytest.raises(ValueError):
        reliability(np.zeros((100, 2)))


def test_fit_calibration_recovers_half_scale():
    rng = np.random.default_rng(2)
    n = 10_000
    truth = rng.uniform(0.5, 2.0, n)
    err = truth * rng.uniform(0, 1, n) / 0.95
    scale = fit_calibration(np.column_stack([2.0 * truth, err]))
    assert scale == pytest.approx(0.5, abs=0.02)


def test_fit_exponent_exact_power_laws():
    radii = np.array([25, 40, 55, 70, 85, 100], float)
    assert fit_exponent(radii, radii ** 2) == pytest.approx(2.0, abs=1e-9)
    assert fit_exponent(radii, np.full(6, 3.7)) == pytest.approx(0.0, abs=1e-9)


class _ZeroStudent:
    """Planner stub emitting zero increments and floor variance."""

    def context(self, images, mask_bits):
        return Tensor(np.zeros((len(images), 64)))

    def heads(self, ctx, x_t, t):
        b = ctx.shape[0]
        return (Tensor(np.zeros((b, 24))), Tensor(np.zeros((b, 24))),
                Tensor(np.full((b, 8), -10.0)))


def _small_env(seed=3, **kw):
    smap, goal, start = generate_world(seed, radius_m=25.0,
                                       obstacle_density=0.05)
    student = kw.pop("student", None) or Denoiser(np.random.default_rng(0))
    rng = np.random.default_rng(seed + 1000)
    return EpisodeEnv(smap, goal, start, student, rng, seed=seed, **kw)


def test_episode_runs_to_termination():
    env = _small_env()
    log = run_episode(env, AlwaysOn(), np.random.default_rng(0))
    assert log.status in ("goal", "collision", "timeout", "divergence")
    assert log.n_ticks >= 1
    assert (log.mask_bits.sum(axis=1) == 6).all()
    assert len(log.decision_ms) == log.n_ticks


def test_zero_thrust_times_out_in_place():
    env = _small_env(student=_ZeroStudent(), noise_scale=0.0, max_ticks=5)
    log = run_episode(env, AlwaysOn(), np.random.default_rng(0))
    assert log.status == "timeout"
    start = env.start.as_array()
    assert np.allclose(log.true_pose[-1], start, atol=1e-9)


def test_fixed_seed_bit_identical_log():
    payloads = []
    for _ in range(2):
        env = _small_env(seed=9)
        log = run_episode(env, RandomK(1), np.random.default_rng(42))
        log.decision_ms[:] = 0.0      # wall time is the one nondeterministic column
        payloads.append(log.to_payload())
    assert payloads[0] == payloads[1]


def test_policy_exception_becomes_divergence():
    class Boom:
        def __init__(self):
            self.n = 0

        def act(self, obs, rng):
            self.n += 1
            if self.n > 2:
                raise RuntimeError("sensor driver crashed")
            return SensorMask.all_on()

    env = _small_env()
    log = run_episode(env, Boom(), np.random.default_rng(0))
    assert log.status == "divergence"
    assert log.n_ticks == 2           # log preserved up to the failure


def test_fault_window_forces_bit_off():
    fault = FaultWindow("gnss", t_off=2)
    env = _small_env(fault=fault, max_ticks=6)
    log = run_episode(env, AlwaysOn(), np.random.default_rng(1))
    g = SENSOR_NAMES.index("gnss")
    assert (log.mask_bits[: min(2, log.n_ticks), g] == 1).all()
    if log.n_ticks > 2:
        assert (log.mask_bits[2:, g] == 0).all()


def test_fault_report_flags():
    u = np.array([0.5, 0.5, 0.5, 1.4, 1.4, 0.6])
    log = _make_log(T=6, u=u, mask=SensorMask.imu_only())
    log.mask_bits[4, 0] = 1           # lidar switched on post-fault
    log.power = np.array([power_cost(SensorMask(b)) for b in log.mask_bits])
    rep = fault_report(log, t_off=2)
    assert rep["observable"] and rep["u_spike"] and rep["compensated"]
    rep2 = fault_report(_make_log(T=6, u=np.full(6, 0.5)), t_off=2)
    assert not rep2["u_spike"]


def test_recovery_tick():
    log = _make_log(T=10, mask=SensorMask.imu_only())
    log.mask_bits[7:] = SensorMask.all_on().bits
    log.power = np.array([power_cost(SensorMask(b)) for b in log.mask_bits])
    assert recovery_tick(log, t_on=5, pre_level=6.0, within=5)
    assert not recovery_tick(log, t_on=5, pre_level=6.0, within=2)


def test_despot_model_sensing_shrinks_uncertainty():
    smap, goal, start = generate_world(3, radius_m=25.0)
    model = DespotModel(smap, (start.x, start.y))
    rng = np.random.default_rng(0)
    (s_fix, _), _, r_fix, _ = model.step((1.0, 5.0), (0, 0, 0, 0, 1), rng)
    (s_null, _), _, r_null, _ = model.step((1.0, 5.0), (0, 0, 0, 0, 0), rng)
    assert s_fix < s_null              # measurement beats dead reckoning
    assert r_fix < r_null              # but pays for the power


def test_collect_pairs_shapes():
    logs = [_make_log(T=4, u=np.arange(4.0), err=np.arange(4.0))]
    pairs = collect_pairs(logs)
    assert pairs.shape == (4, 2)
    np.testing.assert_array_equal(pairs[:, 0], np.arange(4.0))


def test_svg_writer(tmp_path):
    p = tmp_path / "plot.svg"
    write_svg_lines(p, {"a": ([1, 2, 3], [1, 4, 9])}, title="t",
                    xlabel="x", ylabel="y")
    text = p.read_text()
    assert text.startswith("<svg") and "polyline" in text


@pytest.mark.slow
def test_latency_smoke():
    from senseplan.simeval import latency_sweep
    student = Denoiser(np.random.default_rng(0))
    rows, exps = latency_sweep(student, radii=(25, 50), calls=5)
    assert set(exps) == {"planner", "infogain", "despot"}
    assert len(rows) == 6
