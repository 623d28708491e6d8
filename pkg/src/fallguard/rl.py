"""PPO training of the damage-mitigation policy.

Asymmetric actor-critic: the actor sees only deployable measurements
(stacked over 5 control frames), the critic additionally receives
privileged simulation state (base world position/velocity and whole-body
CoM position/velocity). Episodes have a fixed length of 40 control steps
with no early termination, so the post-impact settling phase stays inside
the learning signal.

Actor observation frame layout (oldest frame first in the stack):
    [pitch, base_ang_vel, q - default (J), qd (J), prev squashed action (J),
     projected gravity (sin pitch, -cos pitch)]

Actions are raw Gaussian samples squashed with tanh into joint-range
offsets from the default pose, so commanded targets always stay strictly
inside the position limits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn, reward as reward_mod
from .config import PipelineConfig, PpoConfig, RandomizationConfig
from .datagen import Dataset, build_engine
from .model import RobotModel, default_model
from .physics import CollisionGeometry, Engine, PhysicsDivergence, SimState
from .predictor import first_trigger, stream_probabilities
from .seeding import make_rng


def frame_dim(n_joints: int) -> int:
    return 2 + 3 * n_joints + 2


def actor_obs_dim(n_joints: int, stack: int) -> int:
    return stack * frame_dim(n_joints)


N_PRIVILEGED = 8  # base x, z, vx, vz, com x, z, vx, vz


# ---------------------------------------------------------------------------
# domain randomization


@dataclass
class NoiseSpec:
    orientation: float
    qpos: float
    qvel: float
    angvel: float
    gravity: float


def randomize_domain(model: RobotModel, rand: RandomizationConfig,
                     rng: np.random.Generator):
    """Sample one episode's physical parameters and the observation-noise
    spec. Zero-width ranges reproduce the inputs exactly."""
    if not rand.enabled:
        return model, {}, NoiseSpec(0.0, 0.0, 0.0, 0.0, 0.0), 1.0, 1.0

    friction = float(rng.uniform(*rand.friction))
    restitution = float(rng.uniform(*rand.restitution))
    mass_off = float(rng.uniform(*rand.base_mass))
    com_x = float(rng.uniform(*rand.com_x))
    com_z = float(rng.uniform(*rand.com_z))
    stiff = float(np.exp(rng.uniform(np.log(rand.stiffness_log[0]),
                                     np.log(rand.stiffness_log[1]))))
    damp = float(np.exp(rng.uniform(np.log(rand.damping_log[0]),
                                    np.log(rand.damping_log[1]))))
    jitter = rng.normal(0.0, rand.limit_jitter_std, size=len(model.joints))

    new_joints = []
    for j, dq in zip(model.joints, jitter):
        lo, hi = j.position_limits
        new_joints.append(replace(j, position_limits=(lo + dq, hi + dq)))
    model2 = replace(
        model,
        joints=tuple(new_joints),
        base_mass_offset=model.base_mass_offset + mass_off,
        base_com_offset=(model.base_com_offset[0] + com_x,
                         model.base_com_offset[1] + com_z),
    )
    world = {"friction": friction, "restitution": restitution}
    noise = NoiseSpec(rand.noise_orientation, rand.noise_qpos,
                      rand.noise_qvel, rand.noise_angvel, rand.noise_gravity)
    return model2, world, noise, stiff, damp


# ---------------------------------------------------------------------------
# initial-state sampling


class RejectionBudgetExhausted(RuntimeError):
    pass


def _state_valid(engine: Engine, state: SimState) -> bool:
    return (engine.ground_penetration(state) < 1e-4
            and not engine.self_collisions(state))


def sample_stage1_state(engine: Engine, cfg: PpoConfig,
                        rng: np.random.Generator) -> SimState:
    """Random pose slightly above the ground: joint perturbations, base
    pitch/height/velocity draws, rejecting penetrating or self-colliding
    configurations."""
    m = engine.arrays
    standing = engine.standing_state()
    for _ in range(cfg.rejection_budget):
        q = m.default_q + rng.uniform(-cfg.s1_joint_range, cfg.s1_joint_range,
                                      size=m.n_joints)
        state = SimState(
            base_pose=np.array((
                0.0,
                standing.base_pose[1] + rng.uniform(0.0, cfg.s1_height_range),
                rng.uniform(-cfg.s1_pitch_range, cfg.s1_pitch_range),
            )),
            base_vel=np.array((
                rng.uniform(-cfg.s1_vel_range, cfg.s1_vel_range),
                rng.uniform(-cfg.s1_vel_range, cfg.s1_vel_range),
                0.0,
            )),
            q=q,
            qd=np.zeros(m.n_joints),
        )
        if _state_valid(engine, state):
            return state
    raise RejectionBudgetExhausted("stage-1 initial-state sampling")


def stage2_candidates(dataset: Dataset, predictor_params, debounce: int
                      ) -> list[tuple[int, int]]:
    """(trajectory, frame) pairs the trained predictor flags as unsafe,
    restricted to the pre-impact window."""
    out = []
    for ti, traj in enumerate(dataset.train):
        p = stream_probabilities(predictor_params, traj.obs)
        idx = first_trigger(p, debounce)
        if idx is None or idx >= traj.T:
            continue
        out.extend((ti, f) for f in range(idx, traj.T + 1))
    return out


def sample_stage2_state(engine: Engine, dataset: Dataset,
                        candidates: list[tuple[int, int]], cfg: PpoConfig,
                        rng: np.random.Generator) -> SimState:
    """Dataset frame flagged by the predictor (or a stage-1 draw, with
    probability 1 - stage2_dataset_frac, to keep the easier distribution
    in the mixture)."""
    if not candidates:
        raise ValueError("no predictor-flagged frames available for stage 2")
    if rng.random() >= cfg.stage2_dataset_frac:
        return sample_stage1_state(engine, cfg, rng)
    for _ in range(cfg.rejection_budget):
        ti, f = candidates[int(rng.integers(len(candidates)))]
        state = dataset.train[ti].state_at(f, engine.arrays.n_joints)
        if _state_valid(engine, state):
            return state
    raise RejectionBudgetExhausted("stage-2 initial-state sampling")


# ---------------------------------------------------------------------------
# policy nets and action squashing


@dataclass
class PolicyNets:
    actor: nn.MlpParams
    log_std: np.ndarray
    critic: nn.MlpParams
    frame_stack: int

    @classmethod
    def create(cls, n_joints: int, cfg: PpoConfig, rng) -> "PolicyNets":
        do = actor_obs_dim(n_joints, cfg.frame_stack)
        actor = nn.MlpParams.create(
            [do, cfg.hidden, cfg.hidden, n_joints], cfg.activation, rng,
            out_scale=0.1,
        )
        critic = nn.MlpParams.create(
            [do + N_PRIVILEGED, cfg.hidden, cfg.hidden, 1], cfg.activation, rng,
        )
        return cls(actor, np.full(n_joints, cfg.logstd_init), critic,
                   cfg.frame_stack)

    def actor_params(self) -> dict[str, np.ndarray]:
        d = {f"actor.{k}": v for k, v in self.actor.as_dict().items()}
        d["log_std"] = self.log_std
        return d

    def critic_params(self) -> dict[str, np.ndarray]:
        return {f"critic.{k}": v for k, v in self.critic.as_dict().items()}


def squash_action(raw: np.ndarray, arrays) -> np.ndarray:
    """tanh offsets from the default pose, scaled to the joint range on
    each side so targets stay strictly inside the limits."""
    t = np.tanh(raw)
    hi_range = arrays.limit_hi - arrays.default_q
    lo_range = arrays.default_q - arrays.limit_lo
    return arrays.default_q + np.where(t >= 0, t * hi_range, t * lo_range)


def save_policy(path, nets: PolicyNets, config_hash: str, stage: int):
    tensors = {}
    tensors.update(nn.mlp_to_tensors(nets.actor, "actor"))
    tensors.update(nn.mlp_to_tensors(nets.critic, "critic"))
    tensors["log_std"] = nets.log_std
    tensors["frame_stack"] = np.array([nets.frame_stack], dtype=np.int64)
    nn.save_checkpoint(path, tensors, config_hash, {"stage": str(stage)})


def load_policy(path) -> tuple[PolicyNets, dict]:
    tensors, meta = nn.load_checkpoint(path)
    nets = PolicyNets(
        actor=nn.mlp_from_tensors(tensors, "actor"),
        critic=nn.mlp_from_tensors(tensors, "critic"),
        log_std=tensors["log_std"],
        frame_stack=int(tensors["frame_stack"][0]),
    )
    return nets, meta


# ---------------------------------------------------------------------------
# observation stacking


class ObsStack:
    """Rolling window of actor frames; pre-episode slots replicate the
    first frame."""

    def __init__(self, n_joints: int, stack: int):
        self.fd = frame_dim(n_joints)
        self.stack = stack
        self.buf = np.zeros((stack, self.fd))
        self.started = False

    def push(self, frame: np.ndarray):
        if not self.started:
            self.buf[:] = frame
            self.started = True
        else:
            self.buf[:-1] = self.buf[1:]
            self.buf[-1] = frame
        return self.flat()

    def flat(self) -> np.ndarray:
        return self.buf.reshape(-1).copy()


def batched_com(jparent, jchild, anchor_p, anchor_c, mass,
                base, base_vel, q, qd):
    """Whole-body CoM position/velocity for E stacked states at once.

    anchor_p/anchor_c are per-env (E, J, 2) since randomization can move
    the base CoM; topology arrays are shared."""
    E, J = q.shape
    L = mass.shape[1]
    th = np.empty((E, L))
    pos = np.empty((E, L, 2))
    vel = np.empty((E, L, 2))
    om = np.empty((E, L))
    th[:, 0] = base[:, 2]
    pos[:, 0] = base[:, :2]
    vel[:, 0] = base_vel[:, :2]
    om[:, 0] = base_vel[:, 2]
    for j in range(J):
        p, c = jparent[j], jchild[j]
        th[:, c] = th[:, p] + q[:, j]
        cp, sp = np.cos(th[:, p]), np.sin(th[:, p])
        cc, sc = np.cos(th[:, c]), np.sin(th[:, c])
        rpx = cp * anchor_p[:, j, 0] + sp * anchor_p[:, j, 1]
        rpz = -sp * anchor_p[:, j, 0] + cp * anchor_p[:, j, 1]
        rcx = cc * anchor_c[:, j, 0] + sc * anchor_c[:, j, 1]
        rcz = -sc * anchor_c[:, j, 0] + cc * anchor_c[:, j, 1]
        pos[:, c, 0] = pos[:, p, 0] + rpx - rcx
        pos[:, c, 1] = pos[:, p, 1] + rpz - rcz
        om[:, c] = om[:, p] + qd[:, j]
        vel[:, c, 0] = vel[:, p, 0] + om[:, p] * rpz - om[:, c] * rcz
        vel[:, c, 1] = vel[:, p, 1] - om[:, p] * rpx + om[:, c] * rcx
    total = mass.sum(axis=1)[:, None]
    com = (mass[:, :, None] * pos).sum(axis=1) / total
    com_vel = (mass[:, :, None] * vel).sum(axis=1) / total
    return com, com_vel


def build_frame(state: SimState, prev_action_squashed: np.ndarray,
                default_q: np.ndarray, noise: NoiseSpec | None,
                rng: np.random.Generator | None) -> np.ndarray:
    pitch = state.base_pose[2]
    angvel = state.base_vel[2]
    q_rel = state.q - default_q
    qd = state.qd.copy()
    grav = np.array((math.sin(pitch), -math.cos(pitch)))
    if noise is not None and rng is not None:
        pitch = pitch + rng.uniform(-noise.orientation, noise.orientation)
        angvel = angvel + rng.uniform(-noise.angvel, noise.angvel)
        q_rel = q_rel + rng.uniform(-noise.qpos, noise.qpos, size=q_rel.shape)
        qd = qd + rng.uniform(-noise.qvel, noise.qvel, size=qd.shape)
        grav = grav + rng.uniform(-noise.gravity, noise.gravity, size=2)
    return np.concatenate(((pitch, angvel), q_rel, qd, prev_action_squashed,
                           grav))


def privileged_state(engine: Engine, state: SimState) -> np.ndarray:
    _, (com, com_vel) = engine.forward_kinematics(state)
    return np.array((
        state.base_pose[0], state.base_pose[1],
        state.base_vel[0], state.base_vel[1],
        com[0], com[1], com_vel[0], com_vel[1],
    ))


# ---------------------------------------------------------------------------
# rollout collection


@dataclass
class RolloutBatch:
    obs_actor: np.ndarray  # (N, Do)
    obs_critic: np.ndarray  # (N, Do + 8)
    actions: np.ndarray  # (N, J) raw (pre-squash)
    logp: np.ndarray  # (N,)
    values: np.ndarray  # (N,)
    rewards: np.ndarray  # (E, T)
    values_seq: np.ndarray  # (E, T)
    term_means: dict[str, float] = field(default_factory=dict)


def gaussian_logp(actions, mean, log_std):
    z = (actions - mean) / np.exp(log_std)
    return (-0.5 * (z * z).sum(axis=-1)
            - log_std.sum()
            - 0.5 * actions.shape[-1] * math.log(2.0 * math.pi))


def collect_rollouts(nets: PolicyNets, cfg: PipelineConfig, stage: int,
                     seed: int, update_idx: int,
                     dataset: Dataset | None = None,
                     candidates: list[tuple[int, int]] | None = None,
                     model: RobotModel | None = None) -> RolloutBatch:
    """Run n_envs independent fixed-length episodes under the current
    policy. Episodes with diverging physics are dropped (and logged)."""
    ppo = cfg.ppo
    model = model or default_model()
    J = model.n_joints
    T = ppo.episode_len
    decim = cfg.physics.control_decimation
    dt_ctrl = cfg.physics.dt * decim
    geometry = (CollisionGeometry.SIMPLIFIED if stage == 1
                else CollisionGeometry.FULL)

    E = ppo.n_envs
    envs = []
    for e in range(E):
        rng = make_rng(seed, "episode", update_idx * E + e)
        m2, world_over, noise, stiff, damp = randomize_domain(
            model, ppo.randomization, rng)
        engine = build_engine(
            m2, cfg.physics, geometry,
            friction=world_over.get("friction"),
            restitution=world_over.get("restitution"),
        )
        if stage == 1:
            state = sample_stage1_state(engine, ppo, rng)
        else:
            state = sample_stage2_state(engine, dataset, candidates, ppo, rng)
        envs.append({
            "engine": engine,
            "state": state,
            "noise": noise,
            "kp": engine.arrays.kp * stiff,
            "kd": engine.arrays.kd * damp,
        })

    m0 = envs[0]["engine"].arrays
    L = m0.n_links
    anchors_p = np.stack([env["engine"].arrays.anchor_p for env in envs])
    anchors_c = np.stack([env["engine"].arrays.anchor_c for env in envs])
    masses = np.stack([env["engine"].arrays.mass for env in envs])
    defaults = np.stack([env["engine"].arrays.default_q for env in envs])
    noise_lo = np.zeros((E, frame_dim(J)))
    for e, env in enumerate(envs):
        ns = env["noise"]
        noise_lo[e] = np.concatenate((
            (ns.orientation, ns.angvel),
            np.full(J, ns.qpos), np.full(J, ns.qvel),
            np.zeros(J), np.full(2, ns.gravity),
        ))

    bases = np.stack([env["state"].base_pose for env in envs])
    basevels = np.stack([env["state"].base_vel for env in envs])
    qs = np.stack([env["state"].q for env in envs])
    qds = np.stack([env["state"].qd for env in envs])
    prev_qds = qds.copy()
    prev_sq = np.zeros((E, J))

    fd = frame_dim(J)
    do = actor_obs_dim(J, ppo.frame_stack)
    stack_buf = np.zeros((E, ppo.frame_stack, fd))
    obs_a = np.zeros((E, T, do))
    obs_c = np.zeros((E, T, do + N_PRIVILEGED))
    acts = np.zeros((E, T, J))
    logps = np.zeros((E, T))
    vals = np.zeros((E, T))
    rews = np.zeros((E, T))
    alive = np.ones(E, dtype=bool)
    act_rng = make_rng(seed, "actions", update_idx)
    noise_rng = make_rng(seed, "obsnoise", update_idx)
    terms = {"contact": 0.0, "joint": 0.0, "torque": 0.0, "regulation": 0.0}

    for t in range(T):
        # vectorized frame building across envs
        frames = np.empty((E, fd))
        frames[:, 0] = bases[:, 2]
        frames[:, 1] = basevels[:, 2]
        frames[:, 2:2 + J] = qs - defaults
        frames[:, 2 + J:2 + 2 * J] = qds
        frames[:, 2 + 2 * J:2 + 3 * J] = prev_sq
        frames[:, 2 + 3 * J] = np.sin(bases[:, 2])
        frames[:, 2 + 3 * J + 1] = -np.cos(bases[:, 2])
        frames += noise_rng.uniform(-1.0, 1.0, size=frames.shape) * noise_lo

        if t == 0:
            stack_buf[:] = frames[:, None, :]
        else:
            stack_buf[:, :-1] = stack_buf[:, 1:]
            stack_buf[:, -1] = frames
        flat = stack_buf.reshape(E, do)

        com, com_vel = batched_com(
            m0.jparent, m0.jchild, anchors_p, anchors_c, masses,
            bases, basevels, qs, qds)
        privs = np.concatenate(
            (bases[:, :2], basevels[:, :2], com, com_vel), axis=1)

        mean, _ = nn.mlp_forward(nets.actor, flat)
        raw = mean + np.exp(nets.log_std) * act_rng.standard_normal(
            size=mean.shape)
        lp = gaussian_logp(raw, mean, nets.log_std)
        critic_in = np.concatenate((flat, privs), axis=1)
        v, _ = nn.mlp_forward(nets.critic, critic_in)

        obs_a[:, t] = flat
        obs_c[:, t] = critic_in
        acts[:, t] = raw
        logps[:, t] = lp
        vals[:, t] = v[:, 0]

        sq_all = np.tanh(raw)
        for e, env in enumerate(envs):
            if not alive[e]:
                continue
            engine = env["engine"]
            targets = squash_action(raw[e], engine.arrays)
            try:
                new_state, out = engine.step_frame_raw(
                    env["state"], targets, decim, env["kp"], env["kd"])
            except PhysicsDivergence:
                import logging

                logging.getLogger(__name__).warning(
                    "episode dropped: physics diverged (env %d)", e)
                alive[e] = False
                continue
            br = reward_mod.total_reward_raw(
                out["link_force"], out["link_contact"],
                out["joint_reaction"], out["joint_ext"],
                new_state, prev_qds[e], sq_all[e], prev_sq[e],
                engine.arrays, cfg.reward, dt_ctrl, cfg.physics.gravity)
            rews[e, t] = br.total
            terms["contact"] += br.contact
            terms["joint"] += br.joint
            terms["torque"] += br.torque
            terms["regulation"] += br.regulation
            prev_qds[e] = env["state"].qd
            env["state"] = new_state
            bases[e] = new_state.base_pose
            basevels[e] = new_state.base_vel
            qs[e] = new_state.q
            qds[e] = new_state.qd
        prev_sq = sq_all

    keep = np.flatnonzero(alive)
    n_steps = max(1, keep.size * T)
    term_means = {k: v / n_steps for k, v in terms.items()}
    return RolloutBatch(
        obs_actor=obs_a[keep].reshape(-1, do),
        obs_critic=obs_c[keep].reshape(-1, do + N_PRIVILEGED),
        actions=acts[keep].reshape(-1, J),
        logp=logps[keep].reshape(-1),
        values=vals[keep].reshape(-1),
        rewards=rews[keep],
        values_seq=vals[keep],
        term_means=term_means,
    )


# ---------------------------------------------------------------------------
# GAE and PPO update


def gae_advantages(rewards: np.ndarray, values: np.ndarray, gamma: float,
                   lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Standard generalized advantage estimation over fixed-length episodes
    that terminate at the horizon (no bootstrap past the end)."""
    E, T = rewards.shape
    adv = np.zeros((E, T))
    last = np.zeros(E)
    for t in range(T - 1, -1, -1):
        next_v = values[:, t + 1] if t + 1 < T else np.zeros(E)
        delta = rewards[:, t] + gamma * next_v - values[:, t]
        last = delta + gamma * lam * last
        adv[:, t] = last
    returns = adv + values
    return adv, returns


@dataclass
class UpdateStats:
    actor_loss: float
    value_loss: float
    kl: float
    clip_fraction: float
    entropy: float


def ppo_update(batch: RolloutBatch, nets: PolicyNets, adam_actor: nn.AdamState,
               adam_critic: nn.AdamState, cfg: PpoConfig,
               rng: np.random.Generator) -> UpdateStats:
    """Clipped-surrogate update; the actor touches only actor observations,
    the critic only critic observations."""
    adv, returns = gae_advantages(batch.rewards, batch.values_seq,
                                  cfg.gamma, cfg.gae_lambda)
    adv = adv.reshape(-1)
    returns = returns.reshape(-1)
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)

    N = batch.obs_actor.shape[0]
    J = batch.actions.shape[1]
    kls, clips, alosses, vlosses = [], [], [], []
    for _ in range(cfg.epochs):
        perm = rng.permutation(N)
        mb_size = max(1, N // cfg.minibatches)
        for k in range(cfg.minibatches):
            idx = perm[k * mb_size:(k + 1) * mb_size]
            if idx.size == 0:
                continue
            oa = batch.obs_actor[idx]
            oc = batch.obs_critic[idx]
            a = batch.actions[idx]
            adv_mb = adv[idx]
            lp_old = batch.logp[idx]
            ret = returns[idx]
            n = idx.size

            mean, cache_a = nn.mlp_forward(nets.actor, oa)
            lp_new = gaussian_logp(a, mean, nets.log_std)
            ratio = np.exp(np.clip(lp_new - lp_old, -30.0, 30.0))
            clipped = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)
            use_raw = np.where(
                adv_mb >= 0,
                ratio <= 1.0 + cfg.clip,
                ratio >= 1.0 - cfg.clip,
            )
            surr = np.minimum(ratio * adv_mb, clipped * adv_mb)
            actor_loss = -float(surr.mean())

            # d(actor loss)/d(logp) is zero where the clip is active
            dlogp = np.where(use_raw, -adv_mb * ratio / n, 0.0)
            std = np.exp(nets.log_std)
            z = (a - mean) / std
            dmean = dlogp[:, None] * (z / std)
            dlogstd = (dlogp[:, None] * (z * z - 1.0)).sum(axis=0)
            dlogstd -= cfg.entropy_coef  # entropy bonus
            grads_a, _ = nn.mlp_backward(nets.actor, cache_a, dmean)
            grads_actor = {f"actor.{k2}": v for k2, v in grads_a.items()}
            grads_actor["log_std"] = dlogstd
            _clip_grads(grads_actor, cfg.max_grad_norm)
            nn.adam_step(adam_actor, nets.actor_params(), grads_actor)

            v, cache_c = nn.mlp_forward(nets.critic, oc)
            verr = v[:, 0] - ret
            value_loss = float((verr * verr).mean())
            dv = (cfg.value_coef * 2.0 * verr / n)[:, None]
            grads_c, _ = nn.mlp_backward(nets.critic, cache_c, dv)
            grads_critic = {f"critic.{k2}": v2 for k2, v2 in grads_c.items()}
            _clip_grads(grads_critic, cfg.max_grad_norm)
            nn.adam_step(adam_critic, nets.critic_params(), grads_critic)

            kls.append(float(((ratio - 1.0) - np.log(ratio)).mean()))
            clips.append(float((np.abs(ratio - 1.0) > cfg.clip).mean()))
            alosses.append(actor_loss)
            vlosses.append(value_loss)

    entropy = float(nets.log_std.sum()
                    + 0.5 * J * (1.0 + math.log(2.0 * math.pi)))
    return UpdateStats(
        actor_loss=float(np.mean(alosses)),
        value_loss=float(np.mean(vlosses)),
        kl=float(np.mean(kls)),
        clip_fraction=float(np.mean(clips)),
        entropy=entropy,
    )


def _clip_grads(grads: dict[str, np.ndarray], max_norm: float):
    if max_norm <= 0:
        return
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale


# ---------------------------------------------------------------------------
# training driver


@dataclass
class TrainRow:
    update: int
    reward_mean: float
    contact: float
    joint: float
    torque: float
    regulation: float
    kl: float
    clip_fraction: float
    lr: float
    value_loss: float
    std_mean: float


def train_policy(stage: int, cfg: PipelineConfig, seed: int,
                 dataset: Dataset | None = None,
                 predictor_params=None,
                 init_nets: PolicyNets | None = None,
                 n_updates: int | None = None,
                 model: RobotModel | None = None,
                 progress=None) -> tuple[PolicyNets, list[TrainRow]]:
    """Stage 1: simplified collision geometry, random near-ground inits.
    Stage 2: full geometry, warm start from stage 1, and initial states
    drawn from predictor-flagged dataset frames."""
    if stage not in (1, 2):
        raise ValueError("stage must be 1 or 2")
    if stage == 2:
        if init_nets is None:
            raise ValueError("stage 2 requires a stage-1 checkpoint")
        if dataset is None or predictor_params is None:
            raise ValueError("stage 2 requires a dataset and a predictor")

    model = model or default_model()
    ppo = cfg.ppo
    rng_updates = make_rng(seed, f"ppo-stage{stage}")
    if init_nets is None:
        nets = PolicyNets.create(model.n_joints, ppo,
                                 make_rng(seed, "policy-init"))
    else:
        nets = init_nets

    candidates = None
    if stage == 2:
        candidates = stage2_candidates(dataset, predictor_params,
                                       cfg.predictor.debounce)
        if not candidates:
            raise ValueError("predictor flagged no dataset frames before T")

    adam_actor = nn.AdamState(lr=ppo.lr)
    adam_critic = nn.AdamState(lr=ppo.lr)
    rows: list[TrainRow] = []
    total = n_updates if n_updates is not None else (
        ppo.stage1_updates if stage == 1 else ppo.stage2_updates)
    for update in range(total):
        batch = collect_rollouts(
            nets, cfg, stage, seed, update, dataset, candidates, model)
        stats = ppo_update(batch, nets, adam_actor, adam_critic, ppo,
                           rng_updates)
        if ppo.adaptive_lr:
            if stats.kl > 2.0 * ppo.target_kl:
                adam_actor.lr = max(adam_actor.lr / 2.0, ppo.lr_min)
            elif stats.kl < ppo.target_kl / 2.0:
                adam_actor.lr = min(adam_actor.lr * 2.0, ppo.lr_max)
            adam_critic.lr = adam_actor.lr
        rows.append(TrainRow(
            update=update,
            reward_mean=float(batch.rewards.mean()),
            contact=batch.term_means["contact"],
            joint=batch.term_means["joint"],
            torque=batch.term_means["torque"],
            regulation=batch.term_means["regulation"],
            kl=stats.kl,
            clip_fraction=stats.clip_fraction,
            lr=adam_actor.lr,
            value_loss=stats.value_loss,
            std_mean=float(np.exp(nets.log_std).mean()),
        ))
        if progress is not None:
            progress(rows[-1])
    return nets, rows
