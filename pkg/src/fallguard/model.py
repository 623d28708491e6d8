"""Planar humanoid morphology: links, joints, sensitivity classes, limits.

The robot is a sagittal-plane (x forward, z up) reduction of a full humanoid:
a free-floating torso with head, bilateral two-segment arms, and bilateral
three-segment legs.  Left/right limbs are kept as distinct links so contact
asymmetry between sides survives the planar reduction; mirrored left/right
link pairs are treated as living in different sagittal planes and therefore
never collide with each other.

Every link carries a sensitivity class that maps to a damage weight used by
the contact penalty, and every joint carries the torque rating and reaction
force threshold consumed by the actuator and joint-load penalties.
"""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, replace

GRAVITY = 9.81


class Sensitivity(enum.Enum):
    HIGH = "high"
    MEDIUM = "medium"
    LOW = "low"


#: Damage weight per sensitivity class. Total and fixed.
SENSITIVITY_WEIGHTS = {
    Sensitivity.HIGH: 1000.0,
    Sensitivity.MEDIUM: 1.0,
    Sensitivity.LOW: 0.5,
}


@dataclass(frozen=True)
class LinkSpec:
    """One rigid segment. Local frame sits at the CoM; `end_a`/`end_b` are the
    segment endpoints in that frame (collision capsule axis in Full mode)."""

    name: str
    mass: float  # kg
    length: float  # m
    inertia: float  # kg m^2 about CoM
    collision_radius: float  # m
    sensitivity: Sensitivity
    end_a: tuple[float, float] = (0.0, 0.0)
    end_b: tuple[float, float] = (0.0, 0.0)

    @property
    def weight_sensitivity(self) -> float:
        return SENSITIVITY_WEIGHTS[self.sensitivity]


@dataclass(frozen=True)
class JointSpec:
    """Revolute joint; angle is child world angle minus parent world angle."""

    name: str
    parent: str
    child: str
    position_limits: tuple[float, float]  # rad
    torque_rated: float  # N m, continuous rating
    reaction_force_threshold: float  # N
    kp: float  # N m / rad
    kd: float  # N m s / rad
    default_angle: float  # rad
    anchor_parent: tuple[float, float] = (0.0, 0.0)  # parent frame
    anchor_child: tuple[float, float] = (0.0, 0.0)  # child frame


@dataclass(frozen=True)
class RobotModel:
    links: tuple[LinkSpec, ...]
    joints: tuple[JointSpec, ...]
    base_mass_offset: float = 0.0  # kg, added to the base link
    base_com_offset: tuple[float, float] = (0.0, 0.0)  # m, base frame

    def __post_init__(self):
        object.__setattr__(
            self, "_link_index", {l.name: i for i, l in enumerate(self.links)}
        )

    @property
    def link_index(self) -> dict[str, int]:
        return self._link_index

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def total_mass(self) -> float:
        return sum(l.mass for l in self.links) + self.base_mass_offset

    @property
    def adjacency(self) -> frozenset[frozenset[str]]:
        """Link-name pairs connected by a joint (symmetric by construction)."""
        return frozenset(frozenset((j.parent, j.child)) for j in self.joints)

    def link(self, name: str) -> LinkSpec:
        return self.links[self._link_index[name]]

    def sensitivity_weight(self, name: str) -> float:
        return self.link(name).weight_sensitivity

    def joint_names(self) -> list[str]:
        return [j.name for j in self.joints]

    def default_angles(self) -> list[float]:
        return [j.default_angle for j in self.joints]

    def child_subtree_mass(self, joint: JointSpec) -> float:
        """Mass of the child-side subtree hanging from `joint`."""
        children = {}
        for j in self.joints:
            children.setdefault(j.parent, []).append(j.child)
        total = 0.0
        stack = [joint.child]
        while stack:
            name = stack.pop()
            total += self.link(name).mass
            stack.extend(children.get(name, []))
        return total

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for l in self.links:
            h.update(
                repr(
                    (l.name, l.mass, l.length, l.inertia, l.collision_radius,
                     l.sensitivity.value, l.end_a, l.end_b)
                ).encode()
            )
        for j in self.joints:
            h.update(
                repr(
                    (j.name, j.parent, j.child, j.position_limits, j.torque_rated,
                     j.reaction_force_threshold, j.kp, j.kd, j.default_angle,
                     j.anchor_parent, j.anchor_child)
                ).encode()
            )
        h.update(repr((self.base_mass_offset, self.base_com_offset)).encode())
        return h.hexdigest()


def _rod_inertia(mass: float, length: float, radius: float) -> float:
    # solid cylinder about a transverse axis through the CoM
    return mass * (3.0 * radius**2 + length**2) / 12.0


def _link(name, mass, length, radius, sens, end_a, end_b) -> LinkSpec:
    return LinkSpec(
        name=name,
        mass=mass,
        length=length,
        inertia=_rod_inertia(mass, length, radius),
        collision_radius=radius,
        sensitivity=sens,
        end_a=end_a,
        end_b=end_b,
    )


# Reaction thresholds default to 8x the static load each joint carries in
# quiet double-support standing, so the standing pose is penalty-free with
# ample headroom.
REACTION_THRESHOLD_FACTOR = 8.0


def _reaction_threshold(model_mass: float, subtree_mass: float, in_leg: bool) -> float:
    if in_leg:
        supported = model_mass / 2.0 - subtree_mass
    else:
        supported = subtree_mass
    return REACTION_THRESHOLD_FACTOR * supported * GRAVITY


def default_model() -> RobotModel:
    """Desk-scale planar humanoid: 12 links, 11 actuated joints, 35 kg.

    Head and forearms (which carry the hand tips) are high-sensitivity,
    shanks medium, everything else low.
    """
    H, M, L = Sensitivity.HIGH, Sensitivity.MEDIUM, Sensitivity.LOW

    links = [
        _link("torso", 11.5, 0.45, 0.10, L, (0.0, -0.225), (0.0, 0.225)),
        _link("head", 3.0, 0.22, 0.09, H, (0.0, -0.11), (0.0, 0.11)),
        _link("upper_arm_l", 1.5, 0.25, 0.040, L, (0.0, 0.125), (0.0, -0.125)),
        _link("upper_arm_r", 1.5, 0.25, 0.040, L, (0.0, 0.125), (0.0, -0.125)),
        _link("forearm_l", 1.0, 0.25, 0.035, H, (0.0, 0.125), (0.0, -0.125)),
        _link("forearm_r", 1.0, 0.25, 0.035, H, (0.0, 0.125), (0.0, -0.125)),
        _link("thigh_l", 4.0, 0.30, 0.060, L, (0.0, 0.15), (0.0, -0.15)),
        _link("thigh_r", 4.0, 0.30, 0.060, L, (0.0, 0.15), (0.0, -0.15)),
        _link("shank_l", 2.5, 0.30, 0.045, M, (0.0, 0.15), (0.0, -0.15)),
        _link("shank_r", 2.5, 0.30, 0.045, M, (0.0, 0.15), (0.0, -0.15)),
        _link("foot_l", 1.25, 0.20, 0.030, L, (-0.08, 0.0), (0.12, 0.0)),
        _link("foot_r", 1.25, 0.20, 0.030, L, (-0.08, 0.0), (0.12, 0.0)),
    ]
    total = sum(l.mass for l in links)
    assert abs(total - 35.0) < 1e-9

    def joint(name, parent, child, limits, rated, kp, kd, default,
              anchor_parent, anchor_child):
        return JointSpec(
            name=name, parent=parent, child=child, position_limits=limits,
            torque_rated=rated, reaction_force_threshold=1.0, kp=kp, kd=kd,
            default_angle=default, anchor_parent=anchor_parent,
            anchor_child=anchor_child,
        )

    joints = [
        joint("neck", "torso", "head", (-0.8, 0.8), 10.0, 15.0, 0.8, 0.0,
              (0.0, 0.225), (0.0, -0.11)),
    ]
    # Angles are clockwise-positive in the x-z plane (positive pitch leans
    # forward), so a hanging segment's distal end moves backward for
    # positive joint angles: knee flexion is positive, elbow flexion and
    # forward hip swing are negative.
    for side in ("l", "r"):
        joints += [
            joint(f"shoulder_{side}", "torso", f"upper_arm_{side}",
                  (-2.8, 2.8), 25.0, 30.0, 1.5, -0.20,
                  (0.0, 0.19), (0.0, 0.125)),
            joint(f"elbow_{side}", f"upper_arm_{side}", f"forearm_{side}",
                  (-2.6, 0.05), 18.0, 20.0, 1.0, -0.45,
                  (0.0, -0.125), (0.0, 0.125)),
            joint(f"hip_{side}", "torso", f"thigh_{side}",
                  (-1.6, 1.6), 70.0, 90.0, 4.5, -0.03,
                  (0.0, -0.225), (0.0, 0.15)),
            joint(f"knee_{side}", f"thigh_{side}", f"shank_{side}",
                  (-0.02, 2.4), 70.0, 90.0, 4.5, 0.08,
                  (0.0, -0.15), (0.0, 0.15)),
            joint(f"ankle_{side}", f"shank_{side}", f"foot_{side}",
                  (-1.0, 1.0), 50.0, 70.0, 3.5, -0.05,
                  (0.0, -0.15), (0.0, 0.025)),
        ]

    # second pass: reaction thresholds need subtree masses of the full tree
    draft = RobotModel(links=tuple(links), joints=tuple(joints))
    feet = {"foot_l", "foot_r"}

    def subtree_links(j):
        children = {}
        for jj in draft.joints:
            children.setdefault(jj.parent, []).append(jj.child)
        out, stack = set(), [j.child]
        while stack:
            name = stack.pop()
            out.add(name)
            stack.extend(children.get(name, []))
        return out

    final_joints = []
    for j in draft.joints:
        in_leg = bool(feet & subtree_links(j))
        threshold = _reaction_threshold(total, draft.child_subtree_mass(j), in_leg)
        final_joints.append(replace(j, reaction_force_threshold=threshold))
    return RobotModel(links=tuple(links), joints=tuple(final_joints))


# ---------------------------------------------------------------------------
# validation


def _checked_collision_pairs(model: RobotModel) -> list[tuple[int, int]]:
    """Non-adjacent link pairs tested for self-collision.

    Mirrored left/right pairs are skipped: in the planar reduction those
    links occupy parallel sagittal planes and cannot physically touch.
    """
    adjacency = model.adjacency
    pairs = []
    names = [l.name for l in model.links]
    for i in range(len(names)):
        for k in range(i + 1, len(names)):
            a, b = names[i], names[k]
            if frozenset((a, b)) in adjacency:
                continue
            sided_a = a.endswith(("_l", "_r"))
            sided_b = b.endswith(("_l", "_r"))
            if sided_a and sided_b and a[-1] != b[-1]:
                continue
            pairs.append((i, k))
    return pairs


def validate(model: RobotModel) -> list[str]:
    """Check every model invariant; returns all violations (empty if ok)."""
    violations: list[str] = []

    names = [l.name for l in model.links]
    if len(set(names)) != len(names):
        violations.append("duplicate link names")
    for l in model.links:
        for attr in ("mass", "length", "inertia", "collision_radius"):
            if getattr(l, attr) <= 0:
                violations.append(f"link {l.name}: {attr} must be > 0")
        if l.sensitivity not in SENSITIVITY_WEIGHTS:
            violations.append(f"link {l.name}: unknown sensitivity")

    link_set = set(names)
    for j in model.joints:
        lo, hi = j.position_limits
        if not lo < hi:
            violations.append(f"joint {j.name}: position_limits ordering")
        elif not lo < j.default_angle < hi:
            violations.append(f"joint {j.name}: default_angle outside limits")
        if j.torque_rated <= 0:
            violations.append(f"joint {j.name}: torque_rated must be > 0")
        if j.reaction_force_threshold <= 0:
            violations.append(f"joint {j.name}: reaction_force_threshold must be > 0")
        if j.kp < 0 or j.kd < 0:
            violations.append(f"joint {j.name}: gains must be >= 0")
        if j.parent not in link_set or j.child not in link_set:
            violations.append(f"joint {j.name}: unknown parent/child link")

    if model.n_joints != model.n_links - 1:
        violations.append("joint graph not a tree (|joints| != |links| - 1)")
    else:
        # connectivity + single-parent check, rooted at the base link
        parent_of = {}
        ok = True
        for j in model.joints:
            if j.child in parent_of or j.child == model.links[0].name:
                violations.append("joint graph not a tree (reused child link)")
                ok = False
                break
            parent_of[j.child] = j.parent
        if ok:
            for name in names[1:]:
                seen = set()
                cur = name
                while cur in parent_of and cur not in seen:
                    seen.add(cur)
                    cur = parent_of[cur]
                if cur != model.links[0].name:
                    violations.append("joint graph not a tree (disconnected link)")
                    break

    if not violations:
        violations.extend(_default_pose_violations(model))
    return violations


def _default_pose_violations(model: RobotModel) -> list[str]:
    # imported here to avoid a package-level cycle: physics depends on model
    from .physics import Engine, WorldParams

    engine = Engine(model, WorldParams())
    state = engine.standing_state()
    out = []
    poses, _ = engine.forward_kinematics(state)
    for i, l in enumerate(model.links):
        for ex, ez in (l.end_a, l.end_b, (0.0, 0.0)):
            c, s = math.cos(poses[i][2]), math.sin(poses[i][2])
            z = poses[i][1] + s * ex + c * ez
            if z - l.collision_radius < -1e-6:
                out.append(f"default pose: link {l.name} penetrates ground")
                break
    if engine.self_collisions(state):
        pairs = engine.self_collisions(state)
        out.append(f"default pose: self-intersection {pairs}")
    return out
