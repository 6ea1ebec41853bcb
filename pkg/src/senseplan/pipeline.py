"""Stage orchestration: worlds -> corpus -> teacher -> student -> scheduler
-> calibration -> evaluation. Used by the CLI and the end-to-end tests.

Every stage writes a manifest (inputs, config hash, seed) next to its
artifacts so identical configs reproduce identical outputs.
"""

from __future__ import annotations

import json
import os
import subprocess
from dataclasses import dataclass

import numpy as np

from .baselines import AlwaysOn, PureRlPolicy, RandomK, make_policy
from .config import RunConfig, config_hash, derive_rng, serialize_config
from .dataset import load_snippets, save_snippets, stratified_split
from .diffusion import Denoiser, Schedule, distill, train_teacher
from .nn import load_checkpoint, save_checkpoint
from .oracle import generate_snippets
from .scheduler import ActorCritic, SchedulerConfig, train_scheduler
from .sensors import SensorMask
from .simeval import (EpisodeEnv, FaultWindow, collect_pairs, fault_report,
                      fit_calibration, latency_sweep, load_logs,
                      metrics_table, reliability, run_episode, save_logs,
                      write_metrics_csv, write_svg_lines, write_timings_csv)
from .world import generate_world, load_world, save_world

SUBDIRS = ("worlds", "corpus", "checkpoints", "logs", "reports")


class MissingArtifact(FileNotFoundError):
    """An upstream stage has not produced its output yet."""

    def __init__(self, path, stage: str):
        super().__init__(f"missing artifact {path}; run the {stage!r} stage first")
        self.stage = stage


@dataclass
class RunPaths:
    root: str

    def __post_init__(self):
        for sub in SUBDIRS:
            os.makedirs(os.path.join(self.root, sub), exist_ok=True)

    def join(self, *parts) -> str:
        return os.path.join(self.root, *parts)

    def world(self, i: int) -> str:
        return self.join("worlds", f"world_{i:03d}.jwld")

    @property
    def corpus(self) -> str:
        return self.join("corpus", "snippets.jsnp")

    def checkpoint(self, name: str) -> str:
        return self.join("checkpoints", f"{name}.jnck")

    def manifest(self, stage: str) -> str:
        return self.join(f"{stage}.manifest.json")


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5)
        return out.stdout.strip() or "unknown"
    except Exception:
        return "unknown"


def write_manifest(paths: RunPaths, stage: str, cfg: RunConfig,
                   inputs: dict, outputs: dict) -> dict:
    def rel(v):
        if isinstance(v, str) and v.startswith(paths.root):
            return os.path.relpath(v, paths.root)
        if isinstance(v, list):
            return [rel(x) for x in v]
        if isinstance(v, dict):
            return {k: rel(x) for k, x in v.items()}
        return v

    config_text = "\n".join(line for line in serialize_config(cfg).splitlines()
                            if not line.startswith("out_dir "))
    man = {"stage": stage, "seed": cfg.seed, "config_hash": config_hash(cfg),
           "config": config_text, "git": _git_describe(),
           "inputs": rel(inputs), "outputs": rel(outputs)}
    with open(paths.manifest(stage), "w") as f:
        json.dump(man, f, indent=2, sort_keys=True)
    return man


def require(path, stage: str):
    if not os.path.exists(path):
        raise MissingArtifact(path, stage)
    return path


def _stream_seed(cfg: RunConfig, stream: str, index: int = 0) -> int:
    return int(derive_rng(cfg.seed, stream, index).integers(0, 2 ** 31))


def _lighting(cfg: RunConfig, i: int) -> str:
    if cfg.world_lighting == "mixed":
        return "day" if i % 2 == 0 else "night"
    return cfg.world_lighting


# ------------------------------------------------------------------- stages


def gen_worlds(cfg: RunConfig, paths: RunPaths):
    worlds = []
    for i in range(cfg.world_count):
        seed = _stream_seed(cfg, "worlds", i)
        smap, goal, start = generate_world(
            seed, radius_m=cfg.world_radius_m,
            obstacle_density=cfg.world_obstacle_density,
            lighting_profile=_lighting(cfg, i),
            goal_radius=cfg.world_goal_radius)
        save_world(paths.world(i), smap, goal, start, seed)
        worlds.append((smap, goal, start))
    write_manifest(paths, "gen-worlds", cfg, {},
                   {"worlds": [paths.world(i) for i in range(cfg.world_count)]})
    return worlds


def load_worlds(cfg: RunConfig, paths: RunPaths):
    worlds = []
    for i in range(cfg.world_count):
        require(paths.world(i), "gen-worlds")
        smap, goal, start, _ = load_world(paths.world(i))
        worlds.append((smap, goal, start))
    return worlds


def gen_data(cfg: RunConfig, paths: RunPaths, worlds):
    snippets = []
    for i, (smap, goal, start) in enumerate(worlds):
        rng = derive_rng(cfg.seed, "corpus", i)
        snippets.extend(generate_snippets(
            smap, goal, start, world_seed=i, rng=rng,
            n_replays=cfg.corpus_replays,
            noise_scale=cfg.corpus_noise_scale,
            lighting_profile=_lighting(cfg, i)))
    save_snippets(paths.corpus, snippets)
    write_manifest(paths, "gen-data", cfg,
                   {"worlds": cfg.world_count},
                   {"corpus": paths.corpus, "snippets": len(snippets)})
    return snippets


def load_corpus(cfg: RunConfig, paths: RunPaths):
    require(paths.corpus, "gen-data")
    return load_snippets(paths.corpus)


def split_corpus(cfg: RunConfig, snippets):
    clean = [s for s in snippets if not s.meta.get("degenerate", False)]
    tr, va, te = stratified_split(clean, seed=cfg.seed)
    return ([clean[i] for i in tr], [clean[i] for i in va],
            [clean[i] for i in te])


def _save_model(path, model, extra: dict | None = None):
    params = {k: p.data for k, p in model.named_parameters()}
    for k, v in (extra or {}).items():
        params[f"__scalar__.{k}"] = np.asarray(v, dtype=np.float64)
    save_checkpoint(path, params)


def _load_into(model, blob: dict) -> dict:
    """Assign saved arrays onto a freshly built model; returns scalars."""
    params = dict(model.named_parameters())
    scalars = {}
    for k, v in blob.items():
        if k.startswith("__scalar__."):
            scalars[k.split(".", 1)[1]] = float(np.asarray(v).reshape(()))
        else:
            params[k].data[...] = v
    return scalars


def train_teacher_stage(cfg: RunConfig, paths: RunPaths, train_snips):
    rng = derive_rng(cfg.seed, "teacher")
    sched = Schedule(cfg.teacher_t_steps)
    teacher, _ = train_teacher(train_snips, rng, steps=cfg.teacher_steps,
                               batch=cfg.teacher_batch, lr=cfg.teacher_lr,
                               curve_path=paths.join("logs", "teacher_curve.csv"),
                               sched=sched)
    _save_model(paths.checkpoint("teacher"), teacher)
    write_manifest(paths, "train-teacher", cfg,
                   {"corpus": paths.corpus},
                   {"checkpoint": paths.checkpoint("teacher")})
    return teacher


def load_teacher(cfg: RunConfig, paths: RunPaths) -> Denoiser:
    require(paths.checkpoint("teacher"), "train-teacher")
    model = Denoiser(derive_rng(cfg.seed, "teacher-shape"))
    _load_into(model, load_checkpoint(paths.checkpoint("teacher")))
    return model


def distill_stage(cfg: RunConfig, paths: RunPaths, teacher, train_snips):
    rng = derive_rng(cfg.seed, "student")
    sched = Schedule(cfg.teacher_t_steps)
    student, _ = distill(teacher, train_snips, rng, steps=cfg.student_steps,
                         lr=cfg.student_lr,
                         curve_path=paths.join("logs", "student_curve.csv"),
                         sched=sched)
    _save_model(paths.checkpoint("student"), student)
    write_manifest(paths, "distill", cfg,
                   {"teacher": paths.checkpoint("teacher")},
                   {"checkpoint": paths.checkpoint("student")})
    return student


def load_student(cfg: RunConfig, paths: RunPaths) -> Denoiser:
    require(paths.checkpoint("student"), "distill")
    model = Denoiser(derive_rng(cfg.seed, "student-shape"))
    _load_into(model, load_checkpoint(paths.checkpoint("student")))
    return model


class MultiWorldEnv:
    """Round-robin over training worlds; each reset starts a fresh episode."""

    def __init__(self, cfg: RunConfig, worlds, student, rng,
                 alpha: float | None = None, cvar_norm: str | None = None,
                 calibration: float = 1.0):
        self.cfg = cfg
        self.worlds = worlds
        self.student = student
        self.rng = rng
        self.alpha = cfg.alpha if alpha is None else alpha
        self.cvar_norm = cfg.cvar_norm if cvar_norm is None else cvar_norm
        self.calibration = calibration
        self.i = 0
        self.env = None

    def reset(self):
        smap, goal, start = self.worlds[self.i % len(self.worlds)]
        self.env = EpisodeEnv(smap, goal, start, self.student, self.rng,
                              seed=self.i, eta_max=self.cfg.eta_max,
                              alpha=self.alpha, cvar_norm=self.cvar_norm,
                              calibration=self.calibration,
                              noise_scale=self.cfg.corpus_noise_scale)
        self.i += 1
        return self.env.reset()

    def step(self, mask):
        return self.env.step(mask)


def calibrate_stage(cfg: RunConfig, paths: RunPaths, student, worlds) -> float:
    """Fit the scalar mapping predicted u to realized 95th-pct planar error.

    Calibration episodes run under randomized 2-sensor masks so the fit
    covers the mask space the scheduler will explore.
    """
    rng = derive_rng(cfg.seed, "calibrate")
    logs = []
    for ep in range(cfg.calibration_episodes):
        smap, goal, start = worlds[ep % len(worlds)]
        env = EpisodeEnv(smap, goal, start, student,
                         derive_rng(cfg.seed, "calibrate-env", ep), seed=ep,
                         eta_max=cfg.eta_max, alpha=cfg.alpha,
                         cvar_norm=cfg.cvar_norm)
        logs.append(run_episode(env, RandomK(2), rng))
    pairs = collect_pairs(logs)
    n_bins = max(2, min(20, len(pairs) // 20))
    if len(pairs) < 20 * n_bins:
        scale = 1.0
    else:
        scale = fit_calibration(pairs, n_bins=n_bins)
        if not np.isfinite(scale) or scale <= 0:
            scale = 1.0
    with open(paths.join("reports", "calibration.json"), "w") as f:
        json.dump({"scale": scale, "pairs": len(pairs), "bins": n_bins}, f)
    write_manifest(paths, "calibrate", cfg,
                   {"student": paths.checkpoint("student")},
                   {"scale": scale})
    return scale


def load_calibration(cfg: RunConfig, paths: RunPaths) -> float:
    path = paths.join("reports", "calibration.json")
    if not os.path.exists(path):
        return 1.0
    with open(path) as f:
        return float(json.load(f)["scale"])


def train_scheduler_stage(cfg: RunConfig, paths: RunPaths, student, worlds,
                          alpha: float | None = None,
                          cvar_norm: str | None = None,
                          calibration: float = 1.0, tag: str = "csac"):
    rng = derive_rng(cfg.seed, f"scheduler:{tag}")
    env = MultiWorldEnv(cfg, worlds, student, derive_rng(
        cfg.seed, f"scheduler-env:{tag}"), alpha=alpha, cvar_norm=cvar_norm,
        calibration=calibration)
    scfg = SchedulerConfig(gamma=cfg.gamma, tau=cfg.tau,
                           lambda_lr=cfg.beta_lambda,
                           violation_budget=cfg.epsilon,
                           eta_max=cfg.eta_max, batch=cfg.scheduler_batch,
                           warmup=cfg.scheduler_warmup)
    model, rows = train_scheduler(env, rng, steps=cfg.scheduler_steps,
                                  cfg=scfg,
                                  log_path=paths.join("logs", f"{tag}_train.csv"))
    _save_model(paths.checkpoint(tag), model,
                extra={"log_alpha": model.log_alpha, "lam": model.lam})
    write_manifest(paths, f"train-scheduler-{tag}", cfg,
                   {"student": paths.checkpoint("student")},
                   {"checkpoint": paths.checkpoint(tag)})
    return model, rows


def load_scheduler(cfg: RunConfig, paths: RunPaths, tag: str = "csac") -> ActorCritic:
    require(paths.checkpoint(tag), "train-scheduler")
    scfg = SchedulerConfig(gamma=cfg.gamma, tau=cfg.tau,
                           lambda_lr=cfg.beta_lambda,
                           violation_budget=cfg.epsilon, eta_max=cfg.eta_max)
    model = ActorCritic(derive_rng(cfg.seed, f"scheduler-shape:{tag}"), scfg)
    scalars = _load_into(model, load_checkpoint(paths.checkpoint(tag)))
    model.log_alpha = scalars.get("log_alpha", model.log_alpha)
    model.lam = scalars.get("lam", model.lam)
    return model


# --------------------------------------------------------------- evaluation

ENV_FLAGS = {
    "despot": {"despot_obs": True},
    "sample_spread": {"spread_samples": 20},
}


def eval_policies(cfg: RunConfig, student, worlds, policies: dict,
                  calibration: float = 1.0, episodes: int | None = None,
                  alpha: float | None = None, cvar_norm: str | None = None):
    """Paired-seed evaluation: scheduler name -> list of EpisodeLogs."""
    episodes = episodes or cfg.eval_episodes
    out = {}
    for name, policy in policies.items():
        logs = []
        for ep in range(episodes):
            smap, goal, start = worlds[ep % len(worlds)]
            env = EpisodeEnv(
                smap, goal, start, student,
                derive_rng(cfg.eval_seed0, "eval-env", ep), seed=ep,
                eta_max=cfg.eta_max,
                alpha=cfg.alpha if alpha is None else alpha,
                cvar_norm=cfg.cvar_norm if cvar_norm is None else cvar_norm,
                calibration=calibration, **ENV_FLAGS.get(name, {}))
            pol_rng = derive_rng(cfg.eval_seed0, f"eval-policy:{name}", ep)
            if hasattr(policy, "run"):
                logs.append(policy.run(env, pol_rng))
            else:
                logs.append(run_episode(env, policy, pol_rng))
        out[name] = logs
    return out


def eval_stage(cfg: RunConfig, paths: RunPaths, student, worlds,
               scheduler_names, calibration: float = 1.0,
               csac: ActorCritic | None = None):
    policies = {}
    for name in scheduler_names:
        if name == "csac":
            policies[name] = csac or load_scheduler(cfg, paths)
        elif name == "pure_rl":
            policies[name] = load_pure_rl(cfg, paths)
        else:
            policies[name] = make_policy(name)
    if "always_on" not in policies:
        policies["always_on"] = AlwaysOn()
    logs = eval_policies(cfg, student, worlds, policies, calibration)
    for name, ls in logs.items():
        save_logs(paths.join("logs", f"eval_{name}.jepl"), ls,
                  {"scheduler": name, "config_hash": config_hash(cfg)})
    rows = metrics_table(logs)
    write_metrics_csv(rows, paths.join("reports", "metrics.csv"))
    write_timings_csv(rows, paths.join("reports", "timings.csv"))
    write_manifest(paths, "eval", cfg,
                   {"student": paths.checkpoint("student")},
                   {"metrics": paths.join("reports", "metrics.csv"),
                    "schedulers": sorted(logs)})
    return logs, rows


def load_eval_logs(paths: RunPaths, name: str):
    path = paths.join("logs", f"eval_{name}.jepl")
    require(path, "eval")
    return load_logs(path)[0]


# ----------------------------------------------------------------- pure RL


def _heading_motion(heading: float) -> np.ndarray:
    """1 m lattice step split into the executor's eight sub-increments."""
    inc = np.zeros((8, 3))
    inc[0] = (0.125 * np.cos(heading), 0.125 * np.sin(heading), heading)
    inc[1:] = (0.125, 0.0, 0.0)
    return inc


def run_pure_rl_episode(env: EpisodeEnv, policy: PureRlPolicy,
                        rng: np.random.Generator, train: bool = False):
    obs = env.reset()
    states, actions, rewards = [], [], []
    done = False
    while not done:
        state = np.concatenate([obs["raster"].mean(axis=(0, 1)),
                                [obs["u"], obs["d_frac"]], obs["prev"]])
        a, (heading, mask) = policy.sample(state, rng)
        prev_d = obs["d_frac"]
        obs, reward, violation, done, _ = env.step(mask,
                                                   motion=_heading_motion(heading))
        # progress shaping: pure RL has no planner to reach the goal for it
        shaped = reward + 5.0 * (prev_d - obs.get("d_frac", prev_d)) \
            - violation
        states.append(state)
        actions.append(a)
        rewards.append(shaped)
    if train and states:
        returns = np.cumsum(np.asarray(rewards, float)[::-1])[::-1]
        policy.reinforce(np.asarray(states), np.asarray(actions),
                         returns.copy())
    return env.build_log()


def train_pure_rl(cfg: RunConfig, paths: RunPaths, student, worlds,
                  episodes: int = 40) -> PureRlPolicy:
    rng = derive_rng(cfg.seed, "pure-rl")
    policy = PureRlPolicy(rng, state_dim=12)
    for ep in range(episodes):
        smap, goal, start = worlds[ep % len(worlds)]
        env = EpisodeEnv(smap, goal, start, student,
                         derive_rng(cfg.seed, "pure-rl-env", ep), seed=ep,
                         eta_max=cfg.eta_max, alpha=cfg.alpha,
                         cvar_norm=cfg.cvar_norm)
        run_pure_rl_episode(env, policy, rng, train=True)
    _save_model(paths.checkpoint("pure_rl"), policy.net,
                extra={"baseline": policy.baseline})
    _save_model(paths.checkpoint("pure_rl_head"), policy.out)
    return policy


class _PureRlEval:
    """Adapter so the evaluation loop can drive the joint-action policy."""

    def __init__(self, policy: PureRlPolicy):
        self.policy = policy

    def run(self, env: EpisodeEnv, rng: np.random.Generator):
        return run_pure_rl_episode(env, self.policy, rng, train=False)


def load_pure_rl(cfg: RunConfig, paths: RunPaths):
    require(paths.checkpoint("pure_rl"), "train-scheduler")
    rng = derive_rng(cfg.seed, "pure-rl-shape")
    policy = PureRlPolicy(rng, state_dim=12)
    scalars = _load_into(policy.net, load_checkpoint(paths.checkpoint("pure_rl")))
    _load_into(policy.out, load_checkpoint(paths.checkpoint("pure_rl_head")))
    policy.baseline = scalars.get("baseline", 0.0)
    return _PureRlEval(policy)


# ------------------------------------------------------- latency/reliability


def latency_stage(cfg: RunConfig, paths: RunPaths, student,
                  radii=(25, 40, 55, 70, 85, 100), calls: int = 100):
    rows, exponents = latency_sweep(student, radii=radii, calls=calls,
                                    seed=cfg.seed)
    import csv as _csv
    out = paths.join("reports", "latency.csv")
    with open(out, "w", newline="") as f:
        w = _csv.writer(f)
        w.writerow(["method", "radius", "median_ms", "exponent"])
        for r in rows:
            w.writerow([r["method"], r["radius"], f"{r['median_ms']:.4f}",
                        f"{exponents[r['method']]:.3f}"])
    series = {}
    for method in exponents:
        pts = [(r["radius"], r["median_ms"]) for r in rows
               if r["method"] == method]
        series[f"{method} (exp {exponents[method]:.2f})"] = (
            [p[0] for p in pts], [p[1] for p in pts])
    write_svg_lines(paths.join("reports", "latency.svg"), series,
                    title="decision latency vs world radius",
                    xlabel="radius (m)", ylabel="median ms", logy=True)
    write_manifest(paths, "latency-sweep", cfg,
                   {"student": paths.checkpoint("student")},
                   {"table": out, "exponents": exponents})
    return rows, exponents


def reliability_report(cfg: RunConfig, paths: RunPaths, logs) -> dict:
    pairs = collect_pairs(logs)
    rep = reliability(pairs, eta_max=cfg.eta_max)
    xs = [b[0] for b in rep.bins]
    ys = [b[1] for b in rep.bins]
    write_svg_lines(paths.join("reports", "reliability.svg"),
                    {"empirical p95": (xs, ys), "ideal": (xs, xs)},
                    title=f"calibration (MACE {rep.mace:.3f})",
                    xlabel="predicted u (m)", ylabel="realized error p95 (m)")
    return {"mace": rep.mace, "bins": rep.bins, "n": rep.n_samples}


# ------------------------------------------------------------ CVaR ablation

ABLATION_ALPHAS = (0.10, 0.05, 0.01)


def ablate_cvar_stage(cfg: RunConfig, paths: RunPaths, student, worlds,
                      calibration: float = 1.0, alphas=ABLATION_ALPHAS):
    """Retrain and evaluate the scheduler per tail level on identical seeds.

    Uses the fractional tail normalization so alpha changes the risk scalar
    even at the desk-scale horizon of eight waypoints.
    """
    rows = []
    for alpha in alphas:
        tag = f"csac_a{int(round(alpha * 100)):02d}"
        model, _ = train_scheduler_stage(cfg, paths, student, worlds,
                                         alpha=alpha, cvar_norm="fractional",
                                         calibration=calibration, tag=tag)
        logs = eval_policies(cfg, student, worlds,
                             {"always_on": AlwaysOn(), tag: model},
                             calibration, alpha=alpha,
                             cvar_norm="fractional")
        table = {r["scheduler"]: r for r in metrics_table(logs)}
        row = dict(table[tag])
        row["alpha"] = alpha
        rows.append(row)
    out = paths.join("reports", "cvar_ablation.csv")
    write_metrics_csv(rows, out)
    write_manifest(paths, "ablate-cvar", cfg,
                   {"student": paths.checkpoint("student")},
                   {"table": out})
    return rows


# ------------------------------------------------------------ fault stages


def inject_fault_stage(cfg: RunConfig, paths: RunPaths, student, worlds,
                       policy, sensor: str = "gnss", t_off: int = 2,
                       seeds: int = 20, calibration: float = 1.0):
    """Paired faulted/clean episodes; counts risk spikes and compensation."""
    spikes = comp = observable = 0
    logs = []
    for ep in range(seeds):
        smap, goal, start = worlds[ep % len(worlds)]
        env = EpisodeEnv(smap, goal, start, student,
                         derive_rng(cfg.seed, "fault-env", ep), seed=ep,
                         eta_max=cfg.eta_max, alpha=cfg.alpha,
                         cvar_norm=cfg.cvar_norm, calibration=calibration,
                         fault=FaultWindow(sensor, t_off))
        log = run_episode(env, policy,
                          derive_rng(cfg.seed, "fault-policy", ep))
        logs.append(log)
        rep = fault_report(log, t_off)
        if rep["observable"]:
            observable += 1
            spikes += rep["u_spike"]
            comp += rep["compensated"]
    save_logs(paths.join("logs", f"fault_{sensor}.jepl"), logs,
              {"sensor": sensor, "t_off": t_off})
    summary = {"sensor": sensor, "t_off": t_off, "episodes": seeds,
               "observable": observable,
               "u_spike_frac": spikes / max(1, observable),
               "compensated_frac": comp / max(1, observable)}
    with open(paths.join("reports", f"fault_{sensor}.json"), "w") as f:
        json.dump(summary, f, indent=2)
    return summary, logs


# ----------------------------------------------------------- full pipeline


def run_all(cfg: RunConfig, paths: RunPaths,
            scheduler_names=("always_on", "csac", "random1")):
    """Desk-scale end-to-end run; returns the artifacts the stages produce."""
    worlds = gen_worlds(cfg, paths)
    snippets = gen_data(cfg, paths, worlds)
    train, val, test = split_corpus(cfg, snippets)
    teacher = train_teacher_stage(cfg, paths, train)
    student = distill_stage(cfg, paths, teacher, train)
    scale = calibrate_stage(cfg, paths, student, worlds)
    csac, _ = train_scheduler_stage(cfg, paths, student, worlds,
                                    calibration=scale)
    logs, rows = eval_stage(cfg, paths, student, worlds, scheduler_names,
                            calibration=scale, csac=csac)
    return {"worlds": worlds, "snippets": snippets,
            "split": (train, val, test), "teacher": teacher,
            "student": student, "calibration": scale, "csac": csac,
            "logs": logs, "metrics": rows}
