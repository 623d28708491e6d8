"""Engine facade over the compiled / fallback physics kernels.

An Engine instance owns immutable packed model arrays plus world parameters
and exposes pure step functions; it holds no mutable dynamics state, so many
engines can run concurrently (one per rollout worker). The only mutable bit
is the optional trip obstacle, which belongs to the episode being simulated.
"""

from __future__ import annotations

import math

import numpy as np

from ..model import RobotModel, _checked_collision_pairs
from . import _reference
from .types import (
    CollisionGeometry,
    ContactEvent,
    FrameReadout,
    ModelArrays,
    PhysicsDivergence,
    SimState,
    StepReadout,
    WorldParams,
)

try:  # compiled kernel is optional; fallback is feature-identical
    from . import _kernel

    HAVE_KERNEL = True
except ImportError:
    _kernel = None
    HAVE_KERNEL = False

import os

FORCE_PYTHON = os.environ.get("FALLGUARD_PURE_PYTHON", "") not in ("", "0")


def active_backend() -> str:
    return "compiled" if (HAVE_KERNEL and not FORCE_PYTHON) else "python"


class Engine:
    def __init__(
        self,
        model: RobotModel,
        world: WorldParams | None = None,
        dt: float = 1.0 / 200.0,
        geometry: CollisionGeometry = CollisionGeometry.FULL,
        backend: str | None = None,
    ):
        self.model = model
        self.world = world or WorldParams()
        self.dt = float(dt)
        self.geometry = geometry
        self.arrays = ModelArrays.build(model, geometry)
        self.obstacle: tuple[float, float, float] | None = self.world.obstacle
        if backend is None:
            backend = active_backend()
        if backend == "compiled" and not HAVE_KERNEL:
            raise RuntimeError("compiled kernel unavailable")
        self.backend = backend
        self._pairs = _checked_collision_pairs(model)
        m = self.arrays
        self._out = {
            "link_force": np.zeros(m.n_links),
            "link_contact": np.zeros(m.n_links, dtype=np.uint8),
            "joint_reaction": np.zeros(m.n_joints),
            "joint_ext": np.zeros(m.n_joints),
            "tau_total": np.zeros(m.n_joints),
            "motor_abs": np.zeros(m.n_joints),
            "motor_last": np.zeros(m.n_joints),
            "grf_last": np.zeros(2),
            "grf_max": 0.0,
            "impulse": np.zeros(2),
            "n_limit_max": 0,
            "n_qd_clamped": 0,
            "events": [],
        }
        cap = m.n_links * 4 + 8
        self._ev = (
            np.zeros(cap, dtype=np.int32),
            np.zeros(cap),
            np.zeros((cap, 2)),
            np.zeros((cap, 2)),
        )
        self._scalars = np.zeros(6)
        self._last = (
            np.zeros(m.n_joints),
            np.zeros(m.n_joints),
            np.zeros(m.n_links),
        )

    # ------------------------------------------------------------------
    # control

    def pd_torques(
        self,
        targets: np.ndarray,
        state: SimState,
        kp: np.ndarray | None = None,
        kd: np.ndarray | None = None,
    ) -> np.ndarray:
        """PD motor torques, clamped to rated torque x peak factor."""
        m = self.arrays
        targets = np.asarray(targets, dtype=np.float64)
        if targets.shape != (m.n_joints,):
            raise ValueError(
                f"expected {m.n_joints} joint targets, got shape {targets.shape}"
            )
        kp = m.kp if kp is None else kp
        kd = m.kd if kd is None else kd
        tau = kp * (targets - state.q) - kd * state.qd
        cap = m.torque_rated * self.world.peak_torque_factor
        return np.clip(tau, -cap, cap)

    # ------------------------------------------------------------------
    # stepping

    def _world_dict(self):
        w = self.world
        return {
            "dt": self.dt,
            "gravity": w.gravity,
            "friction": w.friction,
            "restitution": w.restitution,
            "k_normal": w.k_normal,
            "c_normal": w.c_normal,
            "k_tangent": w.k_tangent,
            "k_limit": w.k_limit,
            "c_limit": w.c_limit,
            "qd_max": w.qd_max,
            "peak_torque_factor": w.peak_torque_factor,
            "obstacle": self.obstacle,
        }

    def _run(self, state, use_pd, control, kp_eff, kd_eff, n_substeps,
             record_events):
        m = self.arrays
        base = state.base_pose.astype(np.float64).copy()
        base_vel = state.base_vel.astype(np.float64).copy()
        q = state.q.astype(np.float64).copy()
        qd = state.qd.astype(np.float64).copy()
        control = np.ascontiguousarray(control, dtype=np.float64)
        kp_eff = m.kp if kp_eff is None else np.ascontiguousarray(kp_eff, float)
        kd_eff = m.kd if kd_eff is None else np.ascontiguousarray(kd_eff, float)
        full = 1 if self.geometry is CollisionGeometry.FULL else 0
        out = self._out

        if self.backend == "compiled":
            w = self.world
            obs = self.obstacle
            ev_link, ev_force, ev_normal, ev_point = self._ev
            scalars = self._scalars
            done = _kernel.step_substeps(
                m.mass, m.inv_mass, m.inertia, m.inv_inertia,
                m.jparent, m.jchild, m.parent_joint,
                m.anchor_p, m.anchor_c,
                m.limit_lo, m.limit_hi, m.torque_rated,
                m.cand_local, m.cand_count, m.radius,
                self.dt, w.gravity, w.friction, w.restitution,
                w.k_normal, w.c_normal, w.k_tangent, w.k_limit, w.c_limit,
                w.qd_max, w.peak_torque_factor,
                0 if obs is None else 1,
                0.0 if obs is None else obs[0],
                0.0 if obs is None else obs[1],
                0.0 if obs is None else obs[2],
                base, base_vel, q, qd,
                1 if use_pd else 0, control, kp_eff, kd_eff,
                int(n_substeps), full, 1 if record_events else 0,
                out["link_force"], out["link_contact"],
                out["joint_reaction"], out["joint_ext"], out["tau_total"],
                out["motor_abs"], out["motor_last"],
                out["grf_last"], scalars,
                ev_link, ev_force, ev_normal, ev_point,
                self._last[0], self._last[1], self._last[2],
            )
            out["grf_max"] = float(scalars[0])
            out["impulse"] = scalars[1:3].copy()
            out["n_limit_max"] = int(scalars[3])
            out["n_qd_clamped"] = int(scalars[4])
            if record_events:
                n_ev = int(scalars[5])
                out["events"] = [
                    (int(ev_link[k]), float(ev_force[k]),
                     ev_normal[k].copy(), ev_point[k].copy())
                    for k in range(n_ev)
                ]
                out["joint_reaction_last"] = self._last[0].copy()
                out["joint_ext_last"] = self._last[1].copy()
                out["link_force_last"] = self._last[2].copy()
        else:
            done = _reference.step_substeps(
                m, self._world_dict(), full, base, base_vel, q, qd,
                use_pd, control, kp_eff, kd_eff, int(n_substeps), out,
            )

        new_state = SimState(
            base, base_vel, q, qd, state.time + done * self.dt
        )
        if done != n_substeps:
            raise PhysicsDivergence(new_state)
        return new_state

    def step(self, state: SimState, motor: np.ndarray) -> tuple[SimState, StepReadout]:
        """One physics substep with explicit motor torques."""
        motor = np.asarray(motor, dtype=np.float64)
        if motor.shape != (self.arrays.n_joints,):
            raise ValueError(
                f"expected {self.arrays.n_joints} motor torques, got {motor.shape}"
            )
        new_state = self._run(state, False, motor, None, None, 1, True)
        out = self._out
        names = self.arrays.link_names
        is_foot = self.arrays.is_foot
        events = [
            ContactEvent(names[i], f, n, p, bool(is_foot[i]))
            for i, f, n, p in out["events"]
        ]
        readout = StepReadout(
            contacts=events,
            joint_reaction=out["joint_reaction_last"].copy(),
            joint_external_torque=out["joint_ext_last"].copy(),
            motor_torque=out["motor_last"].copy(),
            ground_reaction_sum=out["grf_last"].copy(),
            link_force=out["link_force_last"].copy(),
            link_contact=out["link_force_last"] > 0.0,
        )
        return new_state, readout

    def step_frame_raw(
        self,
        state: SimState,
        targets: np.ndarray,
        n_substeps: int,
        kp: np.ndarray | None = None,
        kd: np.ndarray | None = None,
    ) -> tuple[SimState, dict]:
        """Like step_frame but returns the engine's transient readout
        buffers (valid until the next step call); hot loops use this to
        avoid per-step copies."""
        new_state = self._run(state, True, targets, kp, kd, n_substeps, False)
        return new_state, self._out

    def step_frame(
        self,
        state: SimState,
        targets: np.ndarray,
        n_substeps: int,
        kp: np.ndarray | None = None,
        kd: np.ndarray | None = None,
    ) -> tuple[SimState, FrameReadout]:
        """One control step: n physics substeps under constant PD targets,
        with peak-aggregated readouts."""
        targets = np.asarray(targets, dtype=np.float64)
        if targets.shape != (self.arrays.n_joints,):
            raise ValueError(
                f"expected {self.arrays.n_joints} targets, got {targets.shape}"
            )
        new_state = self._run(state, True, targets, kp, kd, n_substeps, False)
        out = self._out
        readout = FrameReadout(
            link_force=out["link_force"].copy(),
            link_contact=out["link_contact"].astype(bool),
            joint_reaction=out["joint_reaction"].copy(),
            joint_external_torque=np.abs(out["joint_ext"]),
            joint_total_torque=out["tau_total"].copy(),
            motor_torque=out["motor_abs"].copy(),
            ground_reaction_sum=out["grf_last"].copy(),
            ground_reaction_max=out["grf_max"],
            impulse_sum=out["impulse"].copy(),
            n_limit_max=out["n_limit_max"],
            n_qd_clamped=out["n_qd_clamped"],
        )
        return new_state, readout

    # ------------------------------------------------------------------
    # kinematics and diagnostics

    def forward_kinematics(self, state: SimState):
        """World pose (x, z, angle) of every link plus whole-body CoM
        position and velocity."""
        m = self.arrays
        th, pos, vel, om = _reference.forward_kinematics_arrays(
            m, state.base_pose, state.base_vel, state.q, state.qd
        )
        poses = np.column_stack((pos, th))
        total = m.mass.sum()
        com = (m.mass[:, None] * pos).sum(axis=0) / total
        com_vel = (m.mass[:, None] * vel).sum(axis=0) / total
        return poses, (com, com_vel)

    def mechanical_energy(self, state: SimState) -> float:
        """Kinetic plus gravitational potential energy (zero at z = 0)."""
        m = self.arrays
        th, pos, vel, om = _reference.forward_kinematics_arrays(
            m, state.base_pose, state.base_vel, state.q, state.qd
        )
        kinetic = 0.5 * float(
            (m.mass * (vel**2).sum(axis=1)).sum() + (m.inertia * om**2).sum()
        )
        potential = self.world.gravity * float((m.mass * pos[:, 1]).sum())
        return kinetic + potential

    def standing_state(self) -> SimState:
        """Default pose placed so the lowest collision circle touches z=0."""
        m = self.arrays
        q = m.default_q.copy()
        state = SimState(
            np.zeros(3), np.zeros(3), q, np.zeros(m.n_joints), 0.0
        )
        state.base_pose[1] = -self._min_clearance(state)
        return state

    def _min_clearance(self, state: SimState) -> float:
        m = self.arrays
        th, pos, _, _ = _reference.forward_kinematics_arrays(
            m, state.base_pose, state.base_vel, state.q, state.qd
        )
        lowest = math.inf
        for i in range(m.n_links):
            c, s = math.cos(th[i]), math.sin(th[i])
            for k in range(m.cand_count[i]):
                ex, ez = m.cand_local[i, k]
                z = pos[i, 1] - s * ex + c * ez
                lowest = min(lowest, z - m.radius[i])
        return lowest

    def ground_penetration(self, state: SimState) -> float:
        """Positive when some collision circle is below the ground plane."""
        return -self._min_clearance(state)

    def self_collisions(self, state: SimState) -> list[tuple[str, str]]:
        """Overlapping CoM circles among checked (non-adjacent, same-plane)
        pairs; used to filter kinematically invalid configurations."""
        m = self.arrays
        _, pos, _, _ = _reference.forward_kinematics_arrays(
            m, state.base_pose, state.base_vel, state.q, state.qd
        )
        hits = []
        for i, k in self._pairs:
            d = math.hypot(pos[i, 0] - pos[k, 0], pos[i, 1] - pos[k, 1])
            if d < m.radius[i] + m.radius[k]:
                hits.append((m.link_names[i], m.link_names[k]))
        return hits

    def kick_link_velocity(
        self, state: SimState, link: str, dv: np.ndarray
    ) -> SimState:
        """Instantaneously change one link's CoM velocity by `dv` via an
        impulse applied at that link, distributed consistently with the
        joint constraints (momentum-conserving)."""
        m = self.arrays
        L, J = m.n_links, m.n_joints
        i = list(m.link_names).index(link)
        th, pos, vel, om = _reference.forward_kinematics_arrays(
            m, state.base_pose, state.base_vel, state.q, state.qd
        )
        inv_m_diag = np.empty(3 * L)
        inv_m_diag[0::3] = m.inv_mass
        inv_m_diag[1::3] = m.inv_mass
        inv_m_diag[2::3] = m.inv_inertia

        Jp = np.zeros((2, 3 * L))
        Jp[0, 3 * i] = 1.0
        Jp[1, 3 * i + 1] = 1.0

        if J > 0:
            Jj = np.zeros((2 * J, 3 * L))
            for j in range(J):
                p, c = m.jparent[j], m.jchild[j]
                rp = _reference._rot(th[p]) @ m.anchor_p[j]
                rc = _reference._rot(th[c]) @ m.anchor_c[j]
                Jj[2 * j, 3 * c] = 1.0
                Jj[2 * j, 3 * c + 2] = rc[1]
                Jj[2 * j, 3 * p] = -1.0
                Jj[2 * j, 3 * p + 2] = -rp[1]
                Jj[2 * j + 1, 3 * c + 1] = 1.0
                Jj[2 * j + 1, 3 * c + 2] = -rc[0]
                Jj[2 * j + 1, 3 * p + 1] = -1.0
                Jj[2 * j + 1, 3 * p + 2] = rp[0]
            Aj = (Jj * inv_m_diag) @ Jj.T
            Aj[np.diag_indices_from(Aj)] += 1e-10
            cross = (Jj * inv_m_diag) @ Jp.T  # (2J, 2)
            W = (Jp * inv_m_diag) @ Jp.T - cross.T @ np.linalg.solve(Aj, cross)
            P = np.linalg.solve(W, np.asarray(dv, dtype=np.float64))
            lam = -np.linalg.solve(Aj, cross @ P)
            dv_flat = inv_m_diag * (Jp.T @ P + Jj.T @ lam)
        else:
            P = np.asarray(dv, float) * m.mass[i]
            dv_flat = inv_m_diag * (Jp.T @ P)

        vflat = np.empty(3 * L)
        vflat[0::3] = vel[:, 0]
        vflat[1::3] = vel[:, 1]
        vflat[2::3] = om
        vflat += dv_flat
        new = state.copy()
        new.base_vel = np.array((vflat[0], vflat[1], vflat[2]))
        for j in range(J):
            new.qd[j] = vflat[3 * m.jchild[j] + 2] - vflat[3 * m.jparent[j] + 2]
        return new
