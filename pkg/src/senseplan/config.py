"""Run configuration: flat dotted-key text files, defaults, named RNG streams.

Every knob has a default; unknown keys are rejected so typos fail loudly.
Parsing round-trips: parse(serialize(cfg)) == cfg.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, fields

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"

    # world generation
    world_count: int = 4
    world_radius_m: float = 25.0
    world_obstacle_density: float = 0.08
    world_lighting: str = "mixed"      # day | night | mixed (alternates)
    world_goal_radius: float = 6.0

    # demonstration corpus
    corpus_replays: int = 8
    corpus_noise_scale: float = 1.0
    particles: int = 500               # belief particle count

    # planner training
    teacher_steps: int = 600
    teacher_batch: int = 16
    teacher_lr: float = 3e-4
    teacher_t_steps: int = 16          # desk default; 64 reproduces full scale
    beta: float = 0.05                 # trajectory-head weight in the teacher loss
    student_steps: int = 500
    student_lr: float = 2e-4
    lambda_ramp_target: float = 0.5    # distillation KL weight at end of ramp
    horizon: int = 8

    # risk proxy
    alpha: float = 0.05
    cvar_norm: str = "topk"            # topk | fractional
    eta_max: float = 2.0

    # scheduler training
    scheduler_steps: int = 400
    gamma: float = 0.99
    tau: float = 0.005
    beta_lambda: float = 0.05          # dual ascent step
    epsilon: float = 0.02              # violation budget
    scheduler_batch: int = 32
    scheduler_warmup: int = 64

    # evaluation
    eval_episodes: int = 20
    eval_seed0: int = 10_000
    calibration_episodes: int = 12

    def validate(self):
        if self.horizon != 8:
            raise ConfigError("horizon is fixed at 8 in this implementation")
        if self.beta != 0.05:
            raise ConfigError("beta (trajectory-head weight) is fixed at 0.05")
        if self.lambda_ramp_target != 0.5:
            raise ConfigError("lambda_ramp_target is fixed at 0.5")
        if self.cvar_norm not in ("topk", "fractional"):
            raise ConfigError(f"unknown cvar_norm {self.cvar_norm!r}")
        if self.world_lighting not in ("day", "night", "mixed"):
            raise ConfigError(f"unknown world_lighting {self.world_lighting!r}")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must be in (0, 1)")
        for name in ("world_count", "corpus_replays", "particles",
                     "teacher_steps", "student_steps", "scheduler_steps",
                     "eval_episodes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        return self


_FIELDS = {f.name: f for f in fields(RunConfig)}
# dotted spelling on disk: first underscore becomes the group separator for
# grouped fields, plain names stay plain
_GROUPS = ("world", "corpus", "teacher", "student", "scheduler", "eval")


def _to_key(name: str) -> str:
    head = name.split("_", 1)[0]
    if head in _GROUPS and "_" in name:
        return name.replace("_", ".", 1)
    return name


def _from_key(key: str) -> str:
    return key.replace(".", "_", 1)


def parse_config(text: str) -> dict:
    """'key = value' lines; # comments; JSON scalar values."""
    out = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        name = _from_key(key)
        if name not in _FIELDS:
            raise ConfigError(f"line {ln}: unknown key {key!r}")
        if name in out:
            raise ConfigError(f"line {ln}: duplicate key {key!r}")
        try:
            parsed = json.loads(val)
        except json.JSONDecodeError:
            parsed = val        # bare string
        want = _FIELDS[name].type
        if want == "int":
            if isinstance(parsed, bool) or not isinstance(parsed, int):
                raise ConfigError(f"line {ln}: {key} expects an integer")
        elif want == "float":
            if isinstance(parsed, bool) or not isinstance(parsed, (int, float)):
                raise ConfigError(f"line {ln}: {key} expects a number")
            parsed = float(parsed)
        elif want == "str" and not isinstance(parsed, str):
            raise ConfigError(f"line {ln}: {key} expects a string")
        out[name] = parsed
    return out


def make_config(values: dict | None = None, **overrides) -> RunConfig:
    values = dict(values or {})
    values.update(overrides)
    unknown = set(values) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown keys: {sorted(unknown)}")
    return RunConfig(**values).validate()


def load_config(path, overrides: dict | None = None) -> RunConfig:
    with open(path) as f:
        values = parse_config(f.read())
    if overrides:
        for key, val in overrides.items():
            name = _from_key(key)
            if name not in _FIELDS:
                raise ConfigError(f"unknown override key {key!r}")
            want = _FIELDS[name].type
            if want == "int":
                val = int(val)
            elif want == "float":
                val = float(val)
            values[name] = val
    return make_config(values)


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        val = getattr(cfg, f.name)
        rendered = json.dumps(val)
        lines.append(f"{_to_key(f.name)} = {rendered}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    """Hash of everything that affects the outputs; out_dir is a location,
    not a parameter, so it is excluded."""
    text = "\n".join(line for line in serialize_config(cfg).splitlines()
                     if not line.startswith("out_dir "))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def derive_rng(root_seed: int, stream: str, index: int = 0) -> np.random.Generator:
    """Independent generator per (stage, index); no global RNG anywhere."""
    digest = hashlib.sha256(f"{root_seed}:{stream}:{index}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))
