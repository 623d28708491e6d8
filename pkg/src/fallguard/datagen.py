"""Fall-trajectory generation: scripted nominal controllers, injected
failure factors, labeled rollouts, and the FGD1 dataset format.

A trajectory is recorded at the 50 Hz control rate (what the predictor and
policy see at deployment). Impact time T is the first frame at which a
non-foot link touches the ground; rollouts continue half a second past
impact so secondary impacts stay visible to the metrics.

Observations are the clean onboard measurements (pitch, base angular rate,
joint positions relative to default, joint rates). Sensor corruption from
the SensorNoise factor reaches only the nominal controller's input, not the
recorded stream.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .config import DatagenConfig, PhysicsConfig, PipelineConfig
from .model import RobotModel, default_model
from .physics import CollisionGeometry, Engine, PhysicsDivergence, SimState, WorldParams
from .seeding import make_rng, substream_seed


class FactorKind(enum.Enum):
    SENSOR_NOISE = "sensor_noise"
    EXTERNAL_FORCE = "external_force"
    FOOT_SLIP = "foot_slip"
    FOOT_TRIP = "foot_trip"
    SYSTEM_DELAY = "system_delay"
    DYNAMIC_MISMATCH = "dynamic_mismatch"


FACTOR_CODES = {k: i for i, k in enumerate(FactorKind)}


@dataclass(frozen=True)
class FailureFactor:
    kind: FactorKind
    onset_time: float  # s
    params: tuple[float, ...] = ()


@dataclass
class Trajectory:
    obs: np.ndarray  # (F, obs_dim) f32
    states: np.ndarray  # (F, 6 + 2J) f32: base pose, base vel, q, qd
    link_force: np.ndarray  # (F, L) f32
    link_contact: np.ndarray  # (F, L) u8
    joint_reaction: np.ndarray  # (F, J) f32
    joint_ext: np.ndarray  # (F, J) f32
    grf_max: np.ndarray  # (F,) f32
    T: int  # impact frame index
    labels: np.ndarray  # (F,) u8: 0 safe, 1 ambiguous, 2 falling
    factors: tuple[FailureFactor, ...]
    seed: int

    @property
    def n_frames(self) -> int:
        return self.obs.shape[0]

    def state_at(self, frame: int, n_joints: int) -> SimState:
        row = self.states[frame].astype(np.float64)
        return SimState(
            base_pose=row[0:3].copy(),
            base_vel=row[3:6].copy(),
            q=row[6:6 + n_joints].copy(),
            qd=row[6 + n_joints:6 + 2 * n_joints].copy(),
            time=frame * 0.02,
        )


LABEL_SAFE, LABEL_AMBIGUOUS, LABEL_FALLING = 0, 1, 2


class SegmentationError(ValueError):
    pass


def segment_bounds(T: int, rate_hz: float, t2_offset_s: float,
                   t1_rule: str = "two_thirds",
                   t2_rule: str = "offset") -> tuple[int, int]:
    """Label boundaries t1 = floor(2T/3) and t2 = T - offset, in frames."""
    if t2_rule == "offset":
        t2 = T - int(round(t2_offset_s * rate_hz))
    elif t2_rule == "two_thirds":
        t2 = (2 * T) // 3
    else:
        raise ValueError(f"unknown t2_rule '{t2_rule}'")
    t1 = (2 * T) // 3 if t1_rule == "two_thirds" else t2
    if t1 > t2 or t2 >= T:
        raise SegmentationError(
            f"trajectory too short to segment (T={T}, t1={t1}, t2={t2})"
        )
    return t1, t2


def segment(T: int, n_frames: int, rate_hz: float, t2_offset_s: float,
            t1_rule: str = "two_thirds",
            t2_rule: str = "offset") -> np.ndarray:
    """Per-frame labels: safe (t <= t1), ambiguous (t1 < t <= t2),
    falling (t > t2)."""
    t1, t2 = segment_bounds(T, rate_hz, t2_offset_s, t1_rule, t2_rule)
    labels = np.full(n_frames, LABEL_FALLING, dtype=np.uint8)
    frames = np.arange(n_frames)
    labels[frames <= t1] = LABEL_SAFE
    labels[(frames > t1) & (frames <= t2)] = LABEL_AMBIGUOUS
    return labels


# ---------------------------------------------------------------------------
# observations


def observation_dim(n_joints: int) -> int:
    return 2 + 2 * n_joints


def make_observation(state: SimState, default_q: np.ndarray) -> np.ndarray:
    """Onboard-only measurement vector: no global position, no forces."""
    return np.concatenate((
        (state.base_pose[2], state.base_vel[2]),
        state.q - default_q,
        state.qd,
     ))


# ---------------------------------------------------------------------------
# nominal controllers


class NominalController:
    """Scripted stand-in for a trained locomotion policy."""

    name = "base"

    def targets(self, engine: Engine, state: SimState, t: float) -> np.ndarray:
        raise NotImplementedError


class BalanceA(NominalController):
    """Ankle + hip balance strategy around the default pose."""

    name = "balance-a"
    k_ankle = 6.0
    k_vel = 0.5
    k_hip = -1.5
    com_bias = 0.0161  # standing CoM sits this far ahead of the ankles
    err_clip = 0.2

    def _balance_adjust(self, engine, state):
        m = engine.arrays
        poses, (com, com_vel) = engine.forward_kinematics(state)
        foot_ids = np.flatnonzero(m.is_foot)
        ankle_x = poses[foot_ids, 0].mean()
        err = (com[0] - ankle_x - self.com_bias) + self.k_vel * com_vel[0]
        return float(np.clip(err, -self.err_clip, self.err_clip))

    def targets(self, engine, state, t):
        m = engine.arrays
        out = m.default_q.copy()
        err = self._balance_adjust(engine, state)
        for j, name in enumerate(m.joint_names):
            if name.startswith("ankle"):
                out[j] += self.k_ankle * err
            elif name.startswith("hip"):
                out[j] += self.k_hip * err
        return out


class GaitB(NominalController):
    """Balance plus sinusoidal in-place stepping; a distinctly different
    motion signature from balance-a for the generalization test."""

    name = "gait-b"
    freq = 1.4
    amp_hip = 0.10
    amp_knee = 0.25

    def __init__(self):
        self._balance = BalanceA()

    def targets(self, engine, state, t):
        m = engine.arrays
        out = m.default_q.copy()
        err = self._balance._balance_adjust(engine, state)
        sl = np.sin(2.0 * np.pi * self.freq * t)
        for j, name in enumerate(m.joint_names):
            side = 1.0 if name.endswith("_l") else -1.0
            if name.startswith("ankle"):
                out[j] += self._balance.k_ankle * err
                out[j] += 0.5 * self.amp_knee * max(side * sl, 0.0)
            elif name.startswith("hip"):
                out[j] += self._balance.k_hip * err - side * self.amp_hip * sl
            elif name.startswith("knee"):
                out[j] += self.amp_knee * max(side * sl, 0.0)
        return out


def make_controller(name: str) -> NominalController:
    if name == "balance-a":
        return BalanceA()
    if name == "gait-b":
        return GaitB()
    raise ValueError(f"unknown nominal controller '{name}'")


def nominal_action(engine: Engine, state: SimState, t: float,
                   controller: str | NominalController = "balance-a") -> np.ndarray:
    """PD targets of the scripted nominal controller at time t."""
    ctrl = (controller if isinstance(controller, NominalController)
            else make_controller(controller))
    return ctrl.targets(engine, state, t)


# ---------------------------------------------------------------------------
# failure factors


def inject_failures(cfg: DatagenConfig, rng: np.random.Generator
                    ) -> tuple[FailureFactor, ...]:
    """Sample 1-3 distinct factors with magnitudes from the scaled ranges.

    Co-occurrence statistics are not published for the originals, so the
    combination is sampled uniformly (count then kinds).
    """
    count = int(rng.integers(1, 4))
    kinds = list(FactorKind)
    chosen = rng.choice(len(kinds), size=count, replace=False)
    factors = []
    for idx in sorted(chosen):
        kind = kinds[idx]
        onset = float(rng.uniform(cfg.onset_min_s, cfg.onset_max_s))
        if kind is FactorKind.SENSOR_NOISE:
            params = (float(rng.uniform(cfg.noise_mult_min, cfg.noise_mult_max)),)
        elif kind is FactorKind.EXTERNAL_FORCE:
            params = (float(rng.uniform(cfg.kick_vx_min, cfg.kick_vx_max)),)
        elif kind is FactorKind.FOOT_SLIP:
            direction = 1.0 if rng.random() < 0.5 else -1.0
            params = (direction * cfg.slip_speed,)
        elif kind is FactorKind.FOOT_TRIP:
            params = (
                float(rng.uniform(cfg.trip_height_min, cfg.trip_height_max)),
                float(rng.uniform(0.02, 0.10)),  # gap ahead of the toe
            )
        elif kind is FactorKind.SYSTEM_DELAY:
            params = (float(rng.uniform(0.0, cfg.delay_max_s)),)
        else:  # DYNAMIC_MISMATCH, applied from episode start
            onset = 0.0
            params = (
                float(rng.uniform(cfg.stiffness_scale_min, cfg.stiffness_scale_max)),
                float(rng.uniform(cfg.stiffness_scale_min, cfg.stiffness_scale_max)),
                cfg.com_offset_mismatch * (1.0 if rng.random() < 0.5 else -1.0),
            )
        factors.append(FailureFactor(kind, onset, params))
    return tuple(factors)


# ---------------------------------------------------------------------------
# rollout


class NoFall(Exception):
    """Rollout completed max_len without a non-foot ground contact."""


def _noise_scales(n_joints: int) -> np.ndarray:
    # per-channel base noise, from the training-noise table:
    # orientation 0.05, angular velocity 0.2, joint pos 0.01, joint vel 1.5
    return np.concatenate((
        (0.05, 0.2),
        np.full(n_joints, 0.01),
        np.full(n_joints, 1.5),
    ))


def _corrupt_state(state: SimState, mult: float, rng, default_q) -> SimState:
    noisy = state.copy()
    noisy.base_pose[2] += mult * rng.uniform(-0.05, 0.05)
    noisy.base_vel[2] += mult * rng.uniform(-0.2, 0.2)
    noisy.q += mult * rng.uniform(-0.01, 0.01, size=noisy.q.shape)
    noisy.qd += mult * rng.uniform(-1.5, 1.5, size=noisy.qd.shape)
    return noisy


def build_engine(model: RobotModel, phys: PhysicsConfig,
                 geometry: CollisionGeometry | None = None,
                 friction: float | None = None,
                 restitution: float | None = None) -> Engine:
    world = WorldParams(
        gravity=phys.gravity,
        friction=phys.friction if friction is None else friction,
        restitution=phys.restitution if restitution is None else restitution,
        k_normal=phys.k_normal,
        c_normal=phys.c_normal,
        k_tangent=phys.k_tangent,
        k_limit=phys.k_limit,
        c_limit=phys.c_limit,
        qd_max=phys.qd_max,
        peak_torque_factor=phys.peak_torque_factor,
    )
    if geometry is None:
        geometry = (CollisionGeometry.FULL if phys.geometry == "full"
                    else CollisionGeometry.SIMPLIFIED)
    return Engine(model, world, dt=phys.dt, geometry=geometry)


def rollout_fall(model: RobotModel, cfg: PipelineConfig,
                 factors: tuple[FailureFactor, ...], seed: int,
                 controller: str | None = None) -> Trajectory:
    """Run the nominal controller under the given factors until a non-foot
    link hits the ground; raises NoFall if none does within max_len."""
    dg = cfg.datagen
    rng = make_rng(seed, "rollout")
    ctrl = make_controller(controller or dg.controller)

    # dynamic-mismatch reshapes the model itself
    kp_scale = kd_scale = 1.0
    eff_model = model
    for f in factors:
        if f.kind is FactorKind.DYNAMIC_MISMATCH:
            kp_scale, kd_scale, com_dx = f.params
            eff_model = replace(
                model,
                base_com_offset=(model.base_com_offset[0] + com_dx,
                                 model.base_com_offset[1]),
            )

    engine = build_engine(eff_model, cfg.physics)
    m = engine.arrays
    kp_eff = m.kp * kp_scale
    kd_eff = m.kd * kd_scale
    nonfoot = ~m.is_foot.astype(bool)

    state = engine.standing_state()
    decim = cfg.physics.control_decimation
    dt_ctrl = cfg.physics.dt * decim
    rate = 1.0 / dt_ctrl
    max_frames = int(round(dg.max_len_s * rate))
    tail_frames = int(round(dg.post_impact_s * rate))

    noise_mult = 0.0
    delay_frames = 0
    events = []
    for f in factors:
        onset_frame = int(round(f.onset_time * rate))
        if f.kind is FactorKind.SENSOR_NOISE:
            events.append((onset_frame, "noise", f.params[0]))
        elif f.kind is FactorKind.EXTERNAL_FORCE:
            events.append((onset_frame, "kick", f.params[0]))
        elif f.kind is FactorKind.FOOT_SLIP:
            events.append((onset_frame, "slip", f.params[0]))
        elif f.kind is FactorKind.FOOT_TRIP:
            events.append((onset_frame, "trip", f.params))
        elif f.kind is FactorKind.SYSTEM_DELAY:
            events.append((onset_frame, "delay", int(round(f.params[0] * rate))))
    events.sort(key=lambda e: e[0])

    obs_rows, state_rows = [], []
    lf_rows, lc_rows, jr_rows, je_rows, gm_rows = [], [], [], [], []
    action_buffer: list[np.ndarray] = []
    T = None
    frame = 0
    while True:
        while events and events[0][0] <= frame:
            _, what, val = events.pop(0)
            if what == "noise":
                noise_mult = val
            elif what == "kick":
                state = engine.kick_link_velocity(
                    state, "torso", np.array((val, 0.0)))
            elif what == "slip":
                poses, _ = engine.forward_kinematics(state)
                feet = np.flatnonzero(m.is_foot)
                heights = poses[feet, 1]
                stance = feet[int(np.argmin(heights))]
                state = engine.kick_link_velocity(
                    state, m.link_names[stance], np.array((val, 0.0)))
            elif what == "trip":
                # an obstacle appears just beyond the swing foot's toe and
                # the foot is swung forward into it
                height, gap = val
                poses, _ = engine.forward_kinematics(state)
                feet = np.flatnonzero(m.is_foot)
                swing = feet[int(np.argmax(poses[feet, 1]))]
                toe_x = poses[swing, 0] + 0.12 + m.radius[swing]
                x0 = toe_x + gap
                engine.obstacle = (x0, x0 + dg.trip_width, height)
                state = engine.kick_link_velocity(
                    state, m.link_names[swing],
                    np.array((dg.slip_speed, 0.0)))
            elif what == "delay":
                delay_frames = val

        obs_rows.append(make_observation(state, m.default_q))
        state_rows.append(np.concatenate(
            (state.base_pose, state.base_vel, state.q, state.qd)))

        ctrl_state = state
        if noise_mult > 0.0:
            ctrl_state = _corrupt_state(state, noise_mult, rng, m.default_q)
        targets = ctrl.targets(engine, ctrl_state, frame * dt_ctrl)
        action_buffer.append(targets)
        applied = action_buffer[max(0, len(action_buffer) - 1 - delay_frames)]

        state, ro = engine.step_frame(state, applied, decim, kp_eff, kd_eff)

        lf_rows.append(ro.link_force)
        lc_rows.append(ro.link_contact.astype(np.uint8))
        jr_rows.append(ro.joint_reaction)
        je_rows.append(ro.joint_external_torque)
        gm_rows.append(ro.ground_reaction_max)

        if T is None and bool((ro.link_contact & nonfoot).any()):
            T = frame + 1  # impact lands within this control interval
        frame += 1
        if T is not None and frame >= T + tail_frames:
            break
        if T is None and frame >= max_frames:
            raise NoFall()

    labels = segment(T, len(obs_rows), rate, cfg.predictor.t2_offset_s,
                     cfg.predictor.t1_rule, "offset")
    return Trajectory(
        obs=np.asarray(obs_rows, dtype=np.float32),
        states=np.asarray(state_rows, dtype=np.float32),
        link_force=np.asarray(lf_rows, dtype=np.float32),
        link_contact=np.asarray(lc_rows, dtype=np.uint8),
        joint_reaction=np.asarray(jr_rows, dtype=np.float32),
        joint_ext=np.asarray(je_rows, dtype=np.float32),
        grf_max=np.asarray(gm_rows, dtype=np.float32),
        T=T,
        labels=labels,
        factors=factors,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# dataset


@dataclass
class Dataset:
    trajectories: list[Trajectory]
    n_train: int
    model_hash: str
    config_hash: str
    master_seed: int

    @property
    def train(self) -> list[Trajectory]:
        return self.trajectories[: self.n_train]

    @property
    def val(self) -> list[Trajectory]:
        return self.trajectories[self.n_train:]


def split_sizes(n: int, train_frac: float) -> tuple[int, int]:
    n_train = int(round(n * train_frac))
    return n_train, n - n_train


class DatasetError(RuntimeError):
    pass


def _one_trajectory(args):
    model, cfg, seed, controller = args
    dg = cfg.datagen
    failed = []
    for attempt in range(dg.retry_budget):
        rng = make_rng(seed, "factors", attempt)
        factors = inject_failures(dg, rng)
        try:
            traj = rollout_fall(model, cfg, factors, seed, controller)
        except PhysicsDivergence:
            import logging

            logging.getLogger(__name__).warning(
                "physics diverged, discarding rollout (seed %d attempt %d)",
                seed, attempt,
            )
            failed.append(tuple(f.kind.value for f in factors))
            continue
        except (NoFall, SegmentationError):
            failed.append(tuple(f.kind.value for f in factors))
            continue
        if traj.T < dg.min_fall_frames:
            failed.append(tuple(f.kind.value for f in factors))
            continue
        return traj, attempt
    raise DatasetError(
        f"retry budget exhausted for seed {seed}; factor combinations that "
        f"never fell: {sorted(set(failed))}"
    )


def generate_dataset(n: int, cfg: PipelineConfig, seed: int,
                     model: RobotModel | None = None,
                     controller: str | None = None,
                     jobs: int = 1) -> Dataset:
    """n labeled falling trajectories, 80/20 train/val split in seed order.

    NoFall rollouts retry with fresh factors; identical master seeds yield
    bit-identical datasets regardless of `jobs`.
    """
    if n < 2:
        raise ValueError("need n >= 2 trajectories")
    model = model or default_model()
    tasks = [
        (model, cfg, substream_seed(seed, "trajectory", i), controller)
        for i in range(n)
    ]
    if jobs > 1:
        import multiprocessing as mp

        with mp.Pool(jobs) as pool:
            results = pool.map(_one_trajectory, tasks, chunksize=4)
    else:
        results = [_one_trajectory(t) for t in tasks]
    retries = sum(r[1] for r in results)
    if retries:
        import logging

        logging.getLogger(__name__).info(
            "dataset generation needed %d retries over %d trajectories",
            retries, n,
        )
    n_train, _ = split_sizes(n, cfg.datagen.train_frac)
    return Dataset(
        trajectories=[r[0] for r in results],
        n_train=n_train,
        model_hash=model.content_hash(),
        config_hash=cfg.content_hash(),
        master_seed=seed,
    )


# ---------------------------------------------------------------------------
# FGD1 file format: magic, header, then per-trajectory records

_MAGIC = b"FGD1"


def save_dataset(path, ds: Dataset) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", 1))
        fh.write(struct.pack("<I", len(ds.trajectories)))
        fh.write(struct.pack("<I", ds.n_train))
        fh.write(struct.pack("<Q", ds.master_seed))
        fh.write(bytes.fromhex(ds.model_hash))
        fh.write(bytes.fromhex(ds.config_hash))
        first = ds.trajectories[0]
        J = (first.states.shape[1] - 6) // 2
        L = first.link_force.shape[1]
        fh.write(struct.pack("<HH", J, L))
        for tr in ds.trajectories:
            fh.write(struct.pack("<Q", tr.seed))
            fh.write(struct.pack("<II", tr.n_frames, tr.T))
            fh.write(struct.pack("<B", len(tr.factors)))
            for f in tr.factors:
                fh.write(struct.pack("<Bd", FACTOR_CODES[f.kind], f.onset_time))
                fh.write(struct.pack("<B", len(f.params)))
                for p in f.params:
                    fh.write(struct.pack("<d", p))
            for arr in (tr.obs, tr.states, tr.link_force,
                        tr.joint_reaction, tr.joint_ext, tr.grf_max):
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(tr.link_contact, dtype=np.uint8).tobytes())
            fh.write(np.ascontiguousarray(tr.labels, dtype=np.uint8).tobytes())


def load_dataset(path) -> Dataset:
    kinds = list(FactorKind)
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise DatasetError(f"{path}: not an FGD1 dataset")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != 1:
            raise DatasetError(f"{path}: unsupported dataset version {version}")
        (n_traj,) = struct.unpack("<I", fh.read(4))
        (n_train,) = struct.unpack("<I", fh.read(4))
        (master_seed,) = struct.unpack("<Q", fh.read(8))
        model_hash = fh.read(32).hex()
        config_hash = fh.read(32).hex()
        J, L = struct.unpack("<HH", fh.read(4))
        obs_dim = observation_dim(J)
        state_dim = 6 + 2 * J
        trajectories = []
        for _ in range(n_traj):
            (seed,) = struct.unpack("<Q", fh.read(8))
            n_frames, T = struct.unpack("<II", fh.read(8))
            (n_factors,) = struct.unpack("<B", fh.read(1))
            factors = []
            for _ in range(n_factors):
                code, onset = struct.unpack("<Bd", fh.read(9))
                (n_params,) = struct.unpack("<B", fh.read(1))
                params = struct.unpack(f"<{n_params}d", fh.read(8 * n_params))
                factors.append(FailureFactor(kinds[code], onset, params))

            def read_f32(cols):
                count = n_frames * cols
                arr = np.frombuffer(fh.read(4 * count), dtype="<f4")
                return arr.reshape(n_frames, cols).copy() if cols > 1 \
                    else arr.copy()

            obs = read_f32(obs_dim)
            states = read_f32(state_dim)
            link_force = read_f32(L)
            joint_reaction = read_f32(J)
            joint_ext = read_f32(J)
            grf_max = read_f32(1)
            link_contact = np.frombuffer(
                fh.read(n_frames * L), dtype=np.uint8
            ).reshape(n_frames, L).copy()
            labels = np.frombuffer(fh.read(n_frames), dtype=np.uint8).copy()
            trajectories.append(Trajectory(
                obs=obs, states=states, link_force=link_force,
                link_contact=link_contact, joint_reaction=joint_reaction,
                joint_ext=joint_ext, grf_max=grf_max, T=T, labels=labels,
                factors=tuple(factors), seed=seed,
            ))
    return Dataset(trajectories, n_train, model_hash, config_hash, master_seed)
