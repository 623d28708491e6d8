import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fallguard.config import RewardConfig
from fallguard.model import default_model
from fallguard.physics import CollisionGeometry, ModelArrays
from fallguard.reward import (
    RewardBreakdown,
    contact_penalty,
    effective_weights,
    joint_penalty,
    regulation_penalty,
    torque_penalty,
    total_reward_raw,
)

G = 9.81


@pytest.fixture(scope="module")
def arrays():
    return ModelArrays.build(default_model(), CollisionGeometry.FULL)


@pytest.fixture(scope="module")
def rcfg():
    return RewardConfig()


def test_no_contacts_zero(arrays, rcfg):
    L = arrays.n_links
    assert contact_penalty(np.zeros(L), np.zeros(L, bool), arrays, rcfg) == 0.0


def test_gravity_gate_exact(arrays, rcfg):
    # force exactly m g on a low link contributes nothing
    L = arrays.n_links
    force = np.zeros(L)
    contact = np.zeros(L, bool)
    i = list(arrays.link_names).index("torso")
    contact[i] = True
    force[i] = arrays.mass[i] * G
    assert contact_penalty(force, contact, arrays, rcfg) == 0.0


def test_contact_hand_example(arrays, rcfg):
    # head (w=1000) at f - mg = 10 N plus a low link (w=0.5) at 100 N over
    # gravity: mean (10000 + 50)/2 + 0.3 * 10000 = 8025
    L = arrays.n_links
    names = list(arrays.link_names)
    force = np.zeros(L)
    contact = np.zeros(L, bool)
    hi = names.index("head")
    lo = names.index("torso")
    contact[[hi, lo]] = True
    force[hi] = arrays.mass[hi] * G + 10.0
    force[lo] = arrays.mass[lo] * G + 100.0
    assert contact_penalty(force, contact, arrays, rcfg) == pytest.approx(8025.0)


def test_single_contact_identity(arrays, rcfg):
    # one active contact: penalty == (1 + alpha) * score
    L = arrays.n_links
    names = list(arrays.link_names)
    i = names.index("shank_l")
    force = np.zeros(L)
    contact = np.zeros(L, bool)
    contact[i] = True
    force[i] = arrays.mass[i] * G + 77.0
    score = 1.0 * 77.0
    got = contact_penalty(force, contact, arrays, rcfg)
    assert got == pytest.approx((1 + rcfg.alpha) * score)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_contact_permutation_and_monotonicity(seed):
    arrays = ModelArrays.build(default_model(), CollisionGeometry.FULL)
    rcfg = RewardConfig()
    rng = np.random.default_rng(seed)
    L = arrays.n_links
    contact = rng.random(L) < 0.5
    force = rng.uniform(0, 600, L) * contact
    base = contact_penalty(force, contact, arrays, rcfg)
    assert base >= 0.0
    # increasing any contact force weakly increases the penalty
    i = rng.integers(L)
    force2 = force.copy()
    force2[i] += 50.0
    contact2 = contact.copy()
    contact2[i] = True
    if contact[i]:
        assert contact_penalty(force2, contact2, arrays, rcfg) >= base - 1e-12


def test_joint_below_threshold_zero(arrays, rcfg):
    j = arrays.reaction_threshold * 0.9
    assert joint_penalty(j, arrays, rcfg) == 0.0


def test_joint_single_exceedance(arrays, rcfg):
    j = arrays.reaction_threshold.copy()
    j[3] += 50.0
    assert joint_penalty(j, arrays, rcfg) == pytest.approx(50.0)


def test_joint_loop_oracle(arrays, rcfg):
    rng = np.random.default_rng(4)
    reaction = rng.uniform(0, 3000, arrays.n_joints)
    expect = 0.0
    for i in range(arrays.n_joints):
        d = reaction[i] - arrays.reaction_threshold[i]
        if d > 0:
            expect += d
    assert joint_penalty(reaction, arrays, rcfg) == pytest.approx(
        expect, rel=1e-12)


def test_joint_raw_gate_variant(arrays):
    cfg = RewardConfig(raw_joint_gate=True)
    reaction = arrays.reaction_threshold * 0.5  # below threshold
    assert joint_penalty(reaction, arrays, cfg) > 0.0


def test_torque_below_rated_zero(arrays):
    assert torque_penalty(arrays.torque_rated * 0.99, arrays) == 0.0


def test_torque_ratio_example(arrays):
    # observed peak ratio 2.47 contributes (1.47)^2
    tau = np.zeros(arrays.n_joints)
    tau[0] = 2.47 * arrays.torque_rated[0]
    assert torque_penalty(tau, arrays) == pytest.approx(1.47**2)


def test_torque_monotone_in_rating(arrays):
    rng = np.random.default_rng(5)
    tau = rng.uniform(0, 3, arrays.n_joints) * arrays.torque_rated
    p1 = torque_penalty(tau, arrays)
    doubled = dataclasses.replace(arrays) if False else arrays
    import copy

    bigger = copy.copy(arrays)
    bigger.torque_rated = arrays.torque_rated * 2.0
    p2 = torque_penalty(tau, bigger)
    assert p2 <= p1 + 1e-12


def test_regulation_frozen_default(arrays, rcfg):
    q = arrays.default_q.copy()
    qd = np.zeros(arrays.n_joints)
    a = np.zeros(arrays.n_joints)
    r = regulation_penalty(q, qd, qd, a, a, arrays, rcfg, 0.02)
    assert r == 0.0  # default pose sits outside the limit margin


def test_regulation_action_rate(arrays, rcfg):
    q = arrays.default_q.copy()
    qd = np.zeros(arrays.n_joints)
    a1 = np.zeros(arrays.n_joints)
    a2 = a1.copy()
    a2[2] = 0.3
    r = regulation_penalty(q, qd, qd, a2, a1, arrays, rcfg, 0.02)
    assert r == pytest.approx(rcfg.w_arate * 0.3**2)


def test_regulation_limit_strictly_positive(arrays, rcfg):
    q = arrays.default_q.copy()
    q[0] = arrays.limit_hi[0]  # parked exactly at the limit
    qd = np.zeros(arrays.n_joints)
    a = np.zeros(arrays.n_joints)
    r = regulation_penalty(q, qd, qd, a, a, arrays, rcfg, 0.02)
    assert r > 0.0


def test_total_all_zero(arrays, rcfg):
    from fallguard.physics import SimState

    state = SimState(np.zeros(3), np.zeros(3), arrays.default_q.copy(),
                     np.zeros(arrays.n_joints))
    L, J = arrays.n_links, arrays.n_joints
    br = total_reward_raw(
        np.zeros(L), np.zeros(L, bool), np.zeros(J), np.zeros(J),
        state, np.zeros(J), np.zeros(J), np.zeros(J), arrays, rcfg, 0.02)
    assert br.total == 0.0
    assert br.contact == br.joint == br.torque == br.regulation == 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_total_invariant_and_sign(seed):
    from fallguard.physics import SimState

    arrays = ModelArrays.build(default_model(), CollisionGeometry.FULL)
    rcfg = RewardConfig()
    rng = np.random.default_rng(seed)
    L, J = arrays.n_links, arrays.n_joints
    contact = rng.random(L) < 0.4
    force = rng.uniform(0, 2000, L) * contact
    reaction = rng.uniform(0, 3000, J)
    tau = rng.uniform(-120, 120, J)
    state = SimState(np.zeros(3), np.zeros(3),
                     arrays.default_q + rng.uniform(-0.2, 0.2, J),
                     rng.uniform(-5, 5, J))
    prev_qd = rng.uniform(-5, 5, J)
    a = rng.uniform(-1, 1, J)
    pa = rng.uniform(-1, 1, J)
    br = total_reward_raw(force, contact, reaction, tau, state, prev_qd,
                          a, pa, arrays, rcfg, 0.02)
    assert br.contact >= 0 and br.joint >= 0 and br.torque >= 0
    assert br.regulation >= 0
    assert br.total <= 0
    wc, wj, we = effective_weights(rcfg)
    recomputed = -(wc * br.contact + wj * br.joint + we * br.torque) \
        - br.regulation
    assert br.total == pytest.approx(recomputed, rel=1e-12)
    if br.total == 0.0:
        assert br.contact == br.joint == br.torque == br.regulation == 0.0
