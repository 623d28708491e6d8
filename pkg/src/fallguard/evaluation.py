"""Damage metrics, baseline controllers, paired evaluation suites, the
directional sweep, and the unseen-nominal-controller generalization test.

Metrics are peak magnitudes over a trial, aggregated at the physics rate
(impact spikes live in sub-20 ms windows, so control-rate sampling would
alias them away). Every controller in a suite sees the identical init-state
list; the init hash in the summary proves the pairing.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .config import PipelineConfig
from .datagen import Dataset, build_engine, make_controller
from .model import RobotModel, default_model
from .physics import CollisionGeometry, Engine, PhysicsDivergence, SimState
from .predictor import first_trigger, stream_probabilities
from .rl import (
    N_PRIVILEGED,
    ObsStack,
    PolicyNets,
    build_frame,
    squash_action,
)
from .seeding import make_rng


@dataclass
class MetricsReport:
    tau_max: float  # N m, max |motor + external| over joints/steps
    f_joint_max: float  # N
    f_contact_max: float  # N
    impulse_J: float  # N s, max single-physics-step ground impulse
    illegal_contact: bool  # any high-sensitivity link touched ground
    n_limit_max: int  # max per-step count of joints beyond limits
    r_torque_max: float  # max |tau| / rated
    impulse_100ms: float  # N s, max 100 ms window ground impulse
    nonfoot_contact: bool = False  # any non-foot link touched ground


METRIC_FIELDS = ("tau_max", "f_joint_max", "f_contact_max", "impulse_J",
                 "illegal_contact", "n_limit_max", "r_torque_max",
                 "impulse_100ms")


@dataclass
class SuiteSummary:
    controllers: dict[str, dict]  # name -> {metric: (mean, std), ...}
    illegal_rate: dict[str, float]
    n_valid: dict[str, int]
    n_invalid: dict[str, int]
    init_hash: str
    dt_physics: float
    unreliable: bool

    def improvement_pct(self, ours: str, baseline: str, metric: str) -> float:
        b = self.controllers[baseline][metric][0]
        o = self.controllers[ours][metric][0]
        if b == 0.0:
            return 0.0
        return 100.0 * (b - o) / b


# ---------------------------------------------------------------------------
# trial controllers


class TrialController:
    """Deterministic per-trial policy surface: PD targets plus optional
    gain overrides, queried once per control frame."""

    name = "base"

    def reset(self, engine: Engine, state: SimState):
        pass

    def act(self, engine: Engine, state: SimState, frame: int,
            dt_ctrl: float):
        raise NotImplementedError


class PolicyController(TrialController):
    """Deployed mitigation policy: mean action, 5-frame stacking, and the
    final action held after the training episode length."""

    def __init__(self, nets: PolicyNets, episode_len: int = 40,
                 name: str = "policy"):
        self.nets = nets
        self.episode_len = episode_len
        self.name = name

    def reset(self, engine, state):
        self._stack = ObsStack(engine.arrays.n_joints, self.nets.frame_stack)
        self._prev_sq = np.zeros(engine.arrays.n_joints)
        self._held = None

    def act(self, engine, state, frame, dt_ctrl):
        if frame >= self.episode_len and self._held is not None:
            return self._held, None, None
        fr = build_frame(state, self._prev_sq, engine.arrays.default_q,
                         None, None)
        flat = self._stack.push(fr)
        mean, _ = nn.mlp_forward(self.nets.actor, flat[None, :])
        raw = mean[0]
        self._prev_sq = np.tanh(raw)
        targets = squash_action(raw, engine.arrays)
        if frame == self.episode_len - 1:
            self._held = targets
        return targets, None, None


class NominalController(TrialController):
    """Continues the scripted locomotion controller through impact."""

    def __init__(self, kind: str):
        self._ctrl = make_controller(kind)
        self.name = "nominal"

    def reset(self, engine, state):
        pass

    def act(self, engine, state, frame, dt_ctrl):
        return self._ctrl.targets(engine, state, frame * dt_ctrl), None, None


class DefaultPoseController(TrialController):
    """PD to the default standing pose."""

    name = "default_pose"

    def act(self, engine, state, frame, dt_ctrl):
        return engine.arrays.default_q.copy(), None, None


class DampingController(TrialController):
    """Near-zero stiffness, fixed damping, constant target position."""

    name = "damping"

    def __init__(self, kp: float = 1.0e-5, kd: float = 10.0):
        self.kp = kp
        self.kd = kd

    def reset(self, engine, state):
        self._target = state.q.copy()
        J = engine.arrays.n_joints
        self._kp = np.full(J, self.kp)
        self._kd = np.full(J, self.kd)

    def act(self, engine, state, frame, dt_ctrl):
        return self._target, self._kp, self._kd


def baseline(kind: str, cfg: PipelineConfig | None = None) -> TrialController:
    """The three reference strategies evaluated against the policy."""
    if kind == "nominal":
        controller = (cfg.datagen.controller if cfg is not None
                      else "balance-a")
        return NominalController(controller)
    if kind == "default_pose":
        return DefaultPoseController()
    if kind == "damping":
        if cfg is not None:
            return DampingController(cfg.eval.damping_kp, cfg.eval.damping_kd)
        return DampingController()
    raise ValueError(f"unknown baseline '{kind}'")


# ---------------------------------------------------------------------------
# single trial


def run_trial(controller: TrialController, init: SimState, engine: Engine,
              cfg: PipelineConfig) -> tuple[MetricsReport | None, bool]:
    """Simulate one fall under `controller`; returns (report, valid)."""
    decim = cfg.physics.control_decimation
    dt_ctrl = cfg.physics.dt * decim
    n_frames = int(round(cfg.eval.horizon_s / dt_ctrl))
    window = max(1, int(round(0.1 / dt_ctrl)))
    m = engine.arrays
    high = m.high_sensitivity.astype(bool)

    controller.reset(engine, init)
    state = init.copy()
    nonfoot = ~m.is_foot.astype(bool)
    tau_max = 0.0
    f_joint_max = 0.0
    f_contact_max = 0.0
    grf_peak = 0.0
    illegal = False
    nonfoot_hit = False
    n_limit_max = 0
    r_torque_max = 0.0
    impulses = []
    imp100 = 0.0
    for frame in range(n_frames):
        targets, kp, kd = controller.act(engine, state, frame, dt_ctrl)
        try:
            state, out = engine.step_frame_raw(state, targets, decim, kp, kd)
        except PhysicsDivergence:
            return None, False
        contact = out["link_contact"].astype(bool)
        tau_max = max(tau_max, float(out["tau_total"].max()))
        f_joint_max = max(f_joint_max, float(out["joint_reaction"].max()))
        f_contact_max = max(f_contact_max, float(out["link_force"].max()))
        grf_peak = max(grf_peak, out["grf_max"])
        if bool((contact & high).any()):
            illegal = True
        if bool((contact & nonfoot).any()):
            nonfoot_hit = True
        n_limit_max = max(n_limit_max, out["n_limit_max"])
        r_torque_max = max(
            r_torque_max, float((out["tau_total"] / m.torque_rated).max()))
        impulses.append(out["impulse"].copy())
        if len(impulses) >= window:
            win = np.sum(impulses[-window:], axis=0)
            imp100 = max(imp100, float(np.hypot(win[0], win[1])))
    report = MetricsReport(
        tau_max=tau_max,
        f_joint_max=f_joint_max,
        f_contact_max=f_contact_max,
        impulse_J=grf_peak * cfg.physics.dt,
        illegal_contact=illegal,
        n_limit_max=n_limit_max,
        r_torque_max=r_torque_max,
        impulse_100ms=imp100,
        nonfoot_contact=nonfoot_hit,
    )
    return report, True


# ---------------------------------------------------------------------------
# init-state sampling for suites


def trial_inits_from_dataset(dataset: Dataset, predictor_params, n: int,
                             cfg: PipelineConfig, seed: int,
                             model: RobotModel) -> list[SimState]:
    """Predictor-flagged pre-impact dataset frames, the same protocol the
    stage-2 curriculum uses; base speeds are bounded by init_vel_max."""
    engine = build_engine(model, cfg.physics)
    J = model.n_joints
    rate = 1.0 / (cfg.physics.dt * cfg.physics.control_decimation)
    candidates = []
    for ti, traj in enumerate(dataset.trajectories):
        p = stream_probabilities(predictor_params, traj.obs)
        idx = first_trigger(p, cfg.predictor.debounce)
        if idx is None or idx >= traj.T:
            idx = max(0, traj.T - int(round(0.1 * rate)))  # fall back to t2
        candidates.extend((ti, f) for f in range(idx, traj.T + 1))
    rng = make_rng(seed, "trial-inits")
    out = []
    budget = 100 * n
    while len(out) < n and budget > 0:
        budget -= 1
        ti, f = candidates[int(rng.integers(len(candidates)))]
        state = dataset.trajectories[ti].state_at(f, J)
        speed = float(np.hypot(state.base_vel[0], state.base_vel[1]))
        if speed > cfg.eval.init_vel_max:
            continue
        if engine.ground_penetration(state) > 1e-3 or engine.self_collisions(state):
            continue
        out.append(state)
    if len(out) < n:
        raise RuntimeError("could not sample enough valid trial init states")
    return out


def hash_inits(inits: list[SimState]) -> str:
    h = hashlib.sha256()
    for s in inits:
        h.update(np.ascontiguousarray(s.base_pose).tobytes())
        h.update(np.ascontiguousarray(s.base_vel).tobytes())
        h.update(np.ascontiguousarray(s.q).tobytes())
        h.update(np.ascontiguousarray(s.qd).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# suites


def _suite_worker(task):
    ctrl, chunk, cfg, model = task
    engine = build_engine(model, cfg.physics, CollisionGeometry.FULL)
    return [run_trial(ctrl, init, engine, cfg) for init in chunk]


def evaluate_suite(controllers: dict[str, TrialController],
                   inits: list[SimState], cfg: PipelineConfig,
                   model: RobotModel, jobs: int = 1) -> SuiteSummary:
    """Paired evaluation: every controller runs every init state. Trials
    are independent, so workers only change wall-clock, never results."""
    per = {name: [] for name in controllers}
    invalid = {name: 0 for name in controllers}
    if jobs > 1:
        import multiprocessing as mp

        chunk_size = max(1, len(inits) // (4 * jobs))
        tasks = []
        order = []
        for name, ctrl in controllers.items():
            for k in range(0, len(inits), chunk_size):
                tasks.append((ctrl, inits[k:k + chunk_size], cfg, model))
                order.append(name)
        with mp.Pool(jobs) as pool:
            for name, results in zip(order, pool.map(_suite_worker, tasks)):
                for report, ok in results:
                    if not ok:
                        invalid[name] += 1
                    else:
                        per[name].append(report)
    else:
        for name, ctrl in controllers.items():
            engine = build_engine(model, cfg.physics, CollisionGeometry.FULL)
            for init in inits:
                report, ok = run_trial(ctrl, init, engine, cfg)
                if not ok:
                    invalid[name] += 1
                else:
                    per[name].append(report)

    summary = {}
    illegal = {}
    n_valid = {}
    for name, reports in per.items():
        stats = {}
        for metric in ("tau_max", "f_joint_max", "f_contact_max",
                       "impulse_J", "n_limit_max", "r_torque_max",
                       "impulse_100ms"):
            vals = np.array([getattr(r, metric) for r in reports], dtype=float)
            stats[metric] = (float(vals.mean()), float(vals.std())) \
                if vals.size else (float("nan"), float("nan"))
        summary[name] = stats
        illegal[name] = (
            float(np.mean([r.illegal_contact for r in reports]))
            if reports else float("nan"))
        n_valid[name] = len(reports)
    unreliable = any(
        invalid[name] > cfg.eval.max_invalid_frac * len(inits)
        for name in controllers
    )
    return SuiteSummary(
        controllers=summary,
        illegal_rate=illegal,
        n_valid=n_valid,
        n_invalid=invalid,
        init_hash=hash_inits(inits),
        dt_physics=cfg.physics.dt,
        unreliable=unreliable,
    )


def directional_sweep(policy: TrialController, base: TrialController,
                      cfg: PipelineConfig, model: RobotModel) -> list[dict]:
    """Grid over initial pitch x pitch rate; per-cell paired improvement in
    peak contact and joint forces. Cells where a controller never makes a
    non-foot impact report that flag so no-fall cells can be excluded."""
    ev = cfg.eval
    pitches = np.linspace(-ev.sweep_pitch_max, ev.sweep_pitch_max,
                          ev.sweep_pitch_steps)
    rates = np.linspace(-ev.sweep_rate_max, ev.sweep_rate_max,
                        ev.sweep_rate_steps)
    engine = build_engine(model, cfg.physics)
    standing = engine.standing_state()
    nonfoot_radius = ~engine.arrays.is_foot.astype(bool)
    rows = []
    for pitch in pitches:
        for rate in rates:
            init = standing.copy()
            init.base_pose[2] = pitch
            pen = engine.ground_penetration(init)
            if pen > -0.01:  # lift clear of the ground plus margin
                init.base_pose[1] += pen + 0.01
            init.base_vel[2] = rate
            cell = {"pitch": float(pitch), "pitch_rate": float(rate)}
            for tag, ctrl in (("policy", policy), ("baseline", base)):
                report, ok = run_trial(ctrl, init, engine, cfg)
                if not ok:
                    report = None
                cell[f"{tag}_f_contact"] = (
                    report.f_contact_max if report else float("nan"))
                cell[f"{tag}_f_joint"] = (
                    report.f_joint_max if report else float("nan"))
                cell[f"{tag}_impacted"] = (
                    report.nonfoot_contact if report else False)
            for metric in ("f_contact", "f_joint"):
                b = cell[f"baseline_{metric}"]
                p = cell[f"policy_{metric}"]
                cell[f"improvement_{metric}_pct"] = (
                    100.0 * (b - p) / b if b and np.isfinite(b) and
                    np.isfinite(p) else 0.0)
            rows.append(cell)
    return rows


def generalization_test(policy: TrialController, dataset_b: Dataset,
                        predictor_params, cfg: PipelineConfig,
                        model: RobotModel, seed: int,
                        n: int | None = None) -> SuiteSummary:
    """Evaluate the (unmodified) policy on falls induced under the unseen
    nominal controller, against the damping baseline."""
    n = n or cfg.eval.n_trials
    inits = trial_inits_from_dataset(dataset_b, predictor_params, n, cfg,
                                     seed, model)
    damping = baseline("damping", cfg)
    controllers = {policy.name: policy, damping.name: damping}
    return evaluate_suite(controllers, inits, cfg, model)
