"""State, readout, and packed-array types for the planar dynamics engine.

Conventions (used everywhere in this package):

* the plane is x (forward) / z (up);
* link angles and base pitch are clockwise-positive, so a positive pitch is
  a forward lean and the body-frame gravity direction is
  ``(sin(pitch), -cos(pitch))``;
* ``rot(theta) = [[cos, sin], [-sin, cos]]`` maps local to world coordinates
  and the velocity of a point at world offset ``r`` from the CoM is
  ``v + omega * (r[1], -r[0])``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from ..model import RobotModel, Sensitivity


class CollisionGeometry(enum.Enum):
    """Simplified = one circle per link at the CoM; Full = capsule ends."""

    SIMPLIFIED = "simplified"
    FULL = "full"


@dataclass(frozen=True)
class WorldParams:
    gravity: float = 9.81
    friction: float = 0.8
    restitution: float = 0.0
    k_normal: float = 2.0e4  # N/m penalty stiffness
    c_normal: float = 2.0e2  # N s/m penalty damping
    k_tangent: float = 1.0e3  # N s/m viscous friction regularization
    k_limit: float = 300.0  # N m/rad joint-limit stop stiffness
    c_limit: float = 5.0  # N m s/rad joint-limit stop damping
    qd_max: float = 30.0  # rad/s hard clamp on joint rates
    peak_torque_factor: float = 3.0  # transient motor clamp, x rated
    # optional rectangular step on the otherwise flat ground
    obstacle: tuple[float, float, float] | None = None  # (x0, x1, height)


@dataclass
class SimState:
    base_pose: np.ndarray  # (3,) x, z, pitch
    base_vel: np.ndarray  # (3,) vx, vz, pitch rate
    q: np.ndarray  # (J,) joint angles
    qd: np.ndarray  # (J,) joint rates
    time: float = 0.0

    def copy(self) -> "SimState":
        return SimState(
            self.base_pose.copy(), self.base_vel.copy(),
            self.q.copy(), self.qd.copy(), self.time,
        )

    def is_finite(self) -> bool:
        return bool(
            np.all(np.isfinite(self.base_pose))
            and np.all(np.isfinite(self.base_vel))
            and np.all(np.isfinite(self.q))
            and np.all(np.isfinite(self.qd))
        )


@dataclass(frozen=True)
class ContactEvent:
    link: str
    force: float  # N, magnitude including friction
    normal: np.ndarray  # (2,) unit
    point: np.ndarray  # (2,) world
    is_foot: bool


@dataclass
class StepReadout:
    """Every per-substep quantity the reward and metrics consume."""

    contacts: list[ContactEvent]
    joint_reaction: np.ndarray  # (J,) N, constraint impulse magnitude / dt
    joint_external_torque: np.ndarray  # (J,) N m, signed, motor excluded
    motor_torque: np.ndarray  # (J,) N m, signed, as applied
    ground_reaction_sum: np.ndarray  # (2,) N
    link_force: np.ndarray  # (L,) N, net contact force magnitude per link
    link_contact: np.ndarray  # (L,) bool


@dataclass
class FrameReadout:
    """Substep aggregates over one control step (peaks, not averages, so
    impact spikes shorter than the control period are never aliased away)."""

    link_force: np.ndarray  # (L,) max over substeps
    link_contact: np.ndarray  # (L,) bool, any substep
    joint_reaction: np.ndarray  # (J,) max
    joint_external_torque: np.ndarray  # (J,) max |tau_ext|
    joint_total_torque: np.ndarray  # (J,) max |motor + tau_ext|
    motor_torque: np.ndarray  # (J,) max |motor|
    ground_reaction_sum: np.ndarray  # (2,) last substep
    ground_reaction_max: float  # max substep force norm
    impulse_sum: np.ndarray  # (2,) sum of F*dt over the frame
    n_limit_max: int  # max per-substep count of joints beyond limits
    n_qd_clamped: int


class PhysicsDivergence(RuntimeError):
    """Raised when the state leaves the finite domain; carries the last
    state that was still finite."""

    def __init__(self, last_good: SimState):
        super().__init__("diverged")
        self.last_good = last_good


N_CANDIDATES = 2  # collision circles per link in Full mode


@dataclass
class ModelArrays:
    """Flat float64/int32 arrays consumed by the compiled and fallback
    kernels. Joints are stored in topological order (parents first)."""

    n_links: int
    n_joints: int
    mass: np.ndarray
    inv_mass: np.ndarray
    inertia: np.ndarray
    inv_inertia: np.ndarray
    jparent: np.ndarray
    jchild: np.ndarray
    parent_joint: np.ndarray  # (L,) joint whose child is this link, -1 for base
    anchor_p: np.ndarray
    anchor_c: np.ndarray
    limit_lo: np.ndarray
    limit_hi: np.ndarray
    kp: np.ndarray
    kd: np.ndarray
    default_q: np.ndarray
    torque_rated: np.ndarray
    reaction_threshold: np.ndarray
    cand_local: np.ndarray  # (L, N_CANDIDATES, 2)
    cand_count: np.ndarray  # (L,)
    radius: np.ndarray
    is_foot: np.ndarray  # (L,) uint8
    sens_weight: np.ndarray
    high_sensitivity: np.ndarray  # (L,) uint8
    link_names: tuple[str, ...] = field(default=())
    joint_names: tuple[str, ...] = field(default=())

    @classmethod
    def build(
        cls,
        model: RobotModel,
        geometry: CollisionGeometry = CollisionGeometry.FULL,
    ) -> "ModelArrays":
        L, J = model.n_links, model.n_joints
        idx = model.link_index
        mass = np.array([l.mass for l in model.links], dtype=np.float64)
        inertia = np.array([l.inertia for l in model.links], dtype=np.float64)

        # base mass / CoM randomization folds into the base link arrays
        base_m0 = mass[0]
        mass[0] += model.base_mass_offset
        inertia[0] *= mass[0] / base_m0
        com_shift = np.asarray(model.base_com_offset, dtype=np.float64)

        jparent = np.array([idx[j.parent] for j in model.joints], dtype=np.int32)
        jchild = np.array([idx[j.child] for j in model.joints], dtype=np.int32)
        for k, j in enumerate(model.joints):
            if jparent[k] >= jchild[k]:
                raise ValueError(f"joints not topologically ordered at {j.name}")

        anchor_p = np.array([j.anchor_parent for j in model.joints],
                            dtype=np.float64).reshape(J, 2)
        anchor_c = np.array([j.anchor_child for j in model.joints],
                            dtype=np.float64).reshape(J, 2)

        parent_joint = np.full(L, -1, dtype=np.int32)
        for k in range(J):
            parent_joint[jchild[k]] = k

        cand = np.zeros((L, N_CANDIDATES, 2), dtype=np.float64)
        cand_count = np.zeros(L, dtype=np.int32)
        for i, l in enumerate(model.links):
            if geometry is CollisionGeometry.SIMPLIFIED:
                cand[i, 0] = (0.0, 0.0)
                cand_count[i] = 1
            elif (abs(l.end_a[0] - l.end_b[0]) < 1e-12
                  and abs(l.end_a[1] - l.end_b[1]) < 1e-12):
                cand[i, 0] = l.end_a
                cand_count[i] = 1
            else:
                cand[i, 0] = l.end_a
                cand[i, 1] = l.end_b
                cand_count[i] = 2

        # shifting the base CoM moves every base-frame feature the other way
        for k in range(J):
            if jparent[k] == 0:
                anchor_p[k] -= com_shift
        cand[0, : cand_count[0]] -= com_shift

        return cls(
            n_links=L,
            n_joints=J,
            mass=mass,
            inv_mass=1.0 / mass,
            inertia=inertia,
            inv_inertia=1.0 / inertia,
            jparent=jparent,
            jchild=jchild,
            parent_joint=parent_joint,
            anchor_p=anchor_p,
            anchor_c=anchor_c,
            limit_lo=np.array([j.position_limits[0] for j in model.joints]),
            limit_hi=np.array([j.position_limits[1] for j in model.joints]),
            kp=np.array([j.kp for j in model.joints], dtype=np.float64),
            kd=np.array([j.kd for j in model.joints], dtype=np.float64),
            default_q=np.array([j.default_angle for j in model.joints]),
            torque_rated=np.array([j.torque_rated for j in model.joints]),
            reaction_threshold=np.array(
                [j.reaction_force_threshold for j in model.joints]
            ),
            cand_local=cand,
            cand_count=cand_count,
            radius=np.array([l.collision_radius for l in model.links]),
            is_foot=np.array(
                [l.name.startswith("foot") for l in model.links], dtype=np.uint8
            ),
            sens_weight=np.array([l.weight_sensitivity for l in model.links]),
            high_sensitivity=np.array(
                [l.sensitivity is Sensitivity.HIGH for l in model.links],
                dtype=np.uint8,
            ),
            link_names=tuple(l.name for l in model.links),
            joint_names=tuple(j.name for j in model.joints),
        )
