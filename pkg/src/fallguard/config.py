"""Pipeline configuration: TOML sections, strict schema checking, hashing.

Every CLI subcommand loads one config file (`--config PATH`). Unknown keys
and a wrong schema version are hard errors so configuration drift can never
silently change an experiment. All defaults live in the section dataclasses
below; `configs/default.toml` documents every key.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ImportError:  # Python 3.10
    import tomli as tomllib


class ConfigError(ValueError):
    pass


SCHEMA_VERSION = 1


@dataclass
class MetaConfig:
    schema_version: int = SCHEMA_VERSION
    master_seed: int = 0


@dataclass
class ModelConfig:
    base_mass_offset: float = 0.0
    base_com_offset: tuple[float, float] = (0.0, 0.0)


@dataclass
class PhysicsConfig:
    dt: float = 1.0 / 200.0
    control_decimation: int = 4  # 200 Hz physics -> 50 Hz control
    gravity: float = 9.81
    friction: float = 0.8
    restitution: float = 0.0
    k_normal: float = 2.0e4
    c_normal: float = 2.0e2
    k_tangent: float = 1.0e3
    k_limit: float = 300.0
    c_limit: float = 5.0
    qd_max: float = 30.0
    peak_torque_factor: float = 3.0
    geometry: str = "full"  # "full" | "simplified"


@dataclass
class DatagenConfig:
    n_trajectories: int = 8192
    max_len_s: float = 10.0
    post_impact_s: float = 0.5
    settle_s: float = 0.5  # controller settles before factors may fire
    retry_budget: int = 25
    controller: str = "balance-a"  # "balance-a" | "gait-b"
    train_frac: float = 0.8
    # large enough that t1 <= t2 holds for every ablation t2 offset (0.4 s)
    min_fall_frames: int = 60
    onset_min_s: float = 1.0
    onset_max_s: float = 3.0
    noise_mult_min: float = 2.0
    noise_mult_max: float = 10.0
    kick_vx_min: float = -2.0
    kick_vx_max: float = 2.0
    slip_speed: float = 1.0
    trip_height_min: float = 0.0
    trip_height_max: float = 0.15
    trip_width: float = 0.3
    delay_max_s: float = 0.2
    stiffness_scale_min: float = 0.2
    stiffness_scale_max: float = 3.0
    com_offset_mismatch: float = 0.1


@dataclass
class PredictorConfig:
    hidden: int = 64
    lr: float = 1.0e-3
    weight_decay: float = 1.0e-4
    epochs: int = 5
    batch: int = 4096  # sequences per optimizer step
    t1_rule: str = "two_thirds"  # "two_thirds" | "at_t2"
    t2_offset_s: float = 0.1
    mask_ambiguous: bool = True
    debounce: int = 2
    grad_clip: float = 5.0


@dataclass
class RewardConfig:
    w_contact: float = 1.0
    w_joint: float = 0.05
    w_torque: float = 0.5
    alpha: float = 0.3
    contact_norm: float = 15000.0  # raw Eq-scale -> O(1) on a naive fall
    joint_norm: float = 1000.0
    torque_norm: float = 4.0
    w_qpos: float = 0.05
    w_qvel: float = 5.0e-5
    w_qacc: float = 1.0e-7
    w_arate: float = 0.01
    limit_margin: float = 0.1
    raw_joint_gate: bool = False  # ablation: signed distance, no positive part


@dataclass
class RandomizationConfig:
    enabled: bool = True
    friction: tuple[float, float] = (0.3, 1.0)
    restitution: tuple[float, float] = (0.0, 0.5)
    base_mass: tuple[float, float] = (-1.0, 3.0)
    com_x: tuple[float, float] = (-0.05, 0.05)
    com_z: tuple[float, float] = (-0.01, 0.01)
    stiffness_log: tuple[float, float] = (0.7, 1.5)
    damping_log: tuple[float, float] = (0.5, 3.0)
    limit_jitter_std: float = 0.02
    noise_orientation: float = 0.05
    noise_qpos: float = 0.01
    noise_qvel: float = 1.5
    noise_angvel: float = 0.2
    noise_gravity: float = 0.05


@dataclass
class PpoConfig:
    gamma: float = 0.97
    gae_lambda: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    minibatches: int = 4
    entropy_coef: float = 0.003
    lr: float = 1.0e-3
    adaptive_lr: bool = True
    target_kl: float = 0.01
    lr_min: float = 1.0e-5
    lr_max: float = 1.0e-2
    n_envs: int = 256
    episode_len: int = 40
    stage1_updates: int = 600
    stage2_updates: int = 400
    hidden: int = 256
    activation: str = "tanh"
    logstd_init: float = -0.7
    value_coef: float = 0.5
    max_grad_norm: float = 1.0
    frame_stack: int = 5
    stage2_dataset_frac: float = 0.75
    s1_joint_range: float = 0.3
    s1_pitch_range: float = 0.6
    s1_height_range: float = 0.15
    s1_vel_range: float = 1.5
    rejection_budget: int = 1000
    randomization: RandomizationConfig = field(default_factory=RandomizationConfig)


@dataclass
class EvalConfig:
    n_trials: int = 500
    horizon_s: float = 2.0
    max_invalid_frac: float = 0.05
    init_vel_max: float = 4.0
    sweep_pitch_max: float = 1.5707963267948966
    sweep_pitch_steps: int = 9
    sweep_rate_max: float = 3.0
    sweep_rate_steps: int = 7
    damping_kp: float = 1.0e-5
    damping_kd: float = 10.0


@dataclass
class PipelineConfig:
    meta: MetaConfig = field(default_factory=MetaConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)
    datagen: DatagenConfig = field(default_factory=DatagenConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def content_hash(self) -> str:
        return hashlib.sha256(
            repr(_canonical(dataclasses.asdict(self))).encode()
        ).hexdigest()

    def validate(self) -> None:
        p = self.physics
        if p.dt <= 0:
            raise ConfigError("[physics] dt must be > 0")
        if p.control_decimation < 1:
            raise ConfigError("[physics] control_decimation must be >= 1")
        if p.geometry not in ("full", "simplified"):
            raise ConfigError("[physics] geometry must be 'full' or 'simplified'")
        if self.ppo.episode_len < 1:
            raise ConfigError("[ppo] episode_len must be >= 1")
        if not 0.0 < self.ppo.gamma <= 1.0:
            raise ConfigError("[ppo] gamma must be in (0, 1]")
        if self.ppo.clip <= 0:
            raise ConfigError("[ppo] clip must be > 0")
        if self.predictor.epochs < 1:
            raise ConfigError("[predictor] epochs must be >= 1")
        if self.predictor.t2_offset_s < 0:
            raise ConfigError("[predictor] t2_offset_s must be >= 0")
        if self.predictor.t1_rule not in ("two_thirds", "at_t2"):
            raise ConfigError("[predictor] t1_rule must be 'two_thirds' or 'at_t2'")
        if not 0.0 <= self.reward.alpha <= 1.0:
            raise ConfigError("[reward] alpha must be in [0, 1]")
        for name in ("w_contact", "w_joint", "w_torque"):
            if getattr(self.reward, name) < 0:
                raise ConfigError(f"[reward] {name} must be >= 0")
        if self.datagen.controller not in ("balance-a", "gait-b"):
            raise ConfigError("[datagen] controller must be 'balance-a' or 'gait-b'")
        if self.datagen.n_trajectories < 2:
            raise ConfigError("[datagen] n_trajectories must be >= 2")
        if self.eval.n_trials < 2:
            raise ConfigError("[eval] n_trials must be >= 2")


def _canonical(obj):
    if isinstance(obj, dict):
        return tuple(sorted((k, _canonical(v)) for k, v in obj.items()))
    if isinstance(obj, (list, tuple)):
        return tuple(_canonical(v) for v in obj)
    if isinstance(obj, float):
        return repr(obj)
    return obj


def _apply_section(section_name: str, obj, data: dict) -> None:
    fields = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"[{section_name}] unknown key '{key}'")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"[{section_name}] '{key}' must be a table")
            _apply_section(f"{section_name}.{key}", current, value)
            continue
        setattr(obj, key, _coerce(section_name, key, current, value))


def _coerce(section: str, key: str, current, value):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"[{section}] '{key}' must be a boolean")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"[{section}] '{key}' must be an integer")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"[{section}] '{key}' must be a number")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"[{section}] '{key}' must be a string")
        return value
    if isinstance(current, tuple):
        if not isinstance(value, list) or len(value) != len(current):
            raise ConfigError(
                f"[{section}] '{key}' must be a list of {len(current)} numbers"
            )
        return tuple(float(v) for v in value)
    raise ConfigError(f"[{section}] '{key}' has unsupported type")


def load_config(path: str | Path) -> PipelineConfig:
    """Parse and validate a TOML config; unknown keys are hard errors."""
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error in {path}: {exc}")

    cfg = PipelineConfig()
    known = {f.name for f in dataclasses.fields(cfg)}
    for section, body in data.items():
        if section not in known:
            raise ConfigError(f"unknown section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        _apply_section(section, getattr(cfg, section), body)

    if cfg.meta.schema_version != SCHEMA_VERSION:
        raise ConfigError(
            f"schema_version {cfg.meta.schema_version} unsupported "
            f"(expected {SCHEMA_VERSION})"
        )
    cfg.validate()
    return cfg
