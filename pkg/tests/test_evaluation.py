import dataclasses
import hashlib

import numpy as np
import pytest

from fallguard import evaluation, rl
from fallguard.config import PipelineConfig
from fallguard.datagen import build_engine, make_controller
from fallguard.evaluation import (
    DampingController,
    DefaultPoseController,
    NominalController,
    PolicyController,
    baseline,
    directional_sweep,
    evaluate_suite,
    generalization_test,
    hash_inits,
    run_trial,
    trial_inits_from_dataset,
)
from fallguard.physics import SimState
from fallguard.rl import PolicyNets
from fallguard.seeding import make_rng


@pytest.fixture(scope="module")
def ecfg():
    cfg = PipelineConfig()
    cfg.eval = dataclasses.replace(cfg.eval, n_trials=6, horizon_s=1.0)
    return cfg


@pytest.fixture(scope="module")
def random_policy(model, ecfg):
    nets = PolicyNets.create(model.n_joints, ecfg.ppo, make_rng(1, "p"))
    return PolicyController(nets, ecfg.ppo.episode_len, name="ours_test")


def falling_init(engine):
    s = engine.standing_state()
    s.base_pose[1] += 0.1
    s.base_pose[2] = 0.8
    s.base_vel[2] = 1.0
    return s


def test_no_contact_trial(model, ecfg, random_policy):
    engine = build_engine(model, ecfg.physics)
    init = engine.standing_state()
    init.base_pose[1] += 20.0  # free fall for the whole 1 s horizon
    report, ok = run_trial(random_policy, init, engine, ecfg)
    assert ok
    assert report.f_contact_max == 0.0
    assert report.impulse_J == pytest.approx(0.0)
    assert not report.illegal_contact and not report.nonfoot_contact


def test_trial_repeatable(model, ecfg, random_policy):
    engine = build_engine(model, ecfg.physics)
    init = falling_init(engine)
    r1, _ = run_trial(random_policy, init, engine, ecfg)
    r2, _ = run_trial(random_policy, init, engine, ecfg)
    assert r1 == r2


def test_damping_controller_spec(model, ecfg):
    ctrl = baseline("damping", ecfg)
    engine = build_engine(model, ecfg.physics)
    state = engine.standing_state()
    ctrl.reset(engine, state)
    targets, kp, kd = ctrl.act(engine, state, 0, 0.02)
    np.testing.assert_array_equal(targets, state.q)
    assert np.all(kp == 1.0e-5)
    assert np.all(kd == 10.0)
    # commanded torque is -kd * qd + epsilon
    state.qd[:] = 1.0
    tau = engine.pd_torques(targets, state, kp, kd)
    np.testing.assert_allclose(tau, -10.0, atol=1e-4)


def test_default_pose_controller(model, ecfg):
    ctrl = baseline("default_pose", ecfg)
    engine = build_engine(model, ecfg.physics)
    state = falling_init(engine)
    targets, kp, kd = ctrl.act(engine, state, 3, 0.02)
    np.testing.assert_array_equal(targets, engine.arrays.default_q)
    assert kp is None and kd is None


def test_nominal_matches_datagen_controller(model, ecfg):
    ctrl = baseline("nominal", ecfg)
    engine = build_engine(model, ecfg.physics)
    state = falling_init(engine)
    t1, _, _ = ctrl.act(engine, state, 5, 0.02)
    t2 = make_controller("balance-a").targets(engine, state, 5 * 0.02)
    np.testing.assert_array_equal(t1, t2)


def test_policy_holds_last_action(model, ecfg, random_policy):
    engine = build_engine(model, ecfg.physics)
    state = engine.standing_state()
    random_policy.reset(engine, state)
    last = None
    for frame in range(ecfg.ppo.episode_len + 5):
        t, _, _ = random_policy.act(engine, state, frame, 0.02)
        if frame >= ecfg.ppo.episode_len:
            np.testing.assert_array_equal(t, last)
        last = t


def test_suite_paired_and_deterministic(model, ecfg, random_policy,
                                        tiny_dataset, tiny_predictor):
    inits = trial_inits_from_dataset(tiny_dataset, tiny_predictor, 4, ecfg,
                                     seed=3, model=model)
    controllers = {
        "ours_test": random_policy,
        "damping": baseline("damping", ecfg),
    }
    s1 = evaluate_suite(controllers, inits, ecfg, model)
    s2 = evaluate_suite(controllers, inits, ecfg, model)
    assert s1.init_hash == s2.init_hash == hash_inits(inits)
    for name in controllers:
        assert s1.controllers[name] == s2.controllers[name]
    assert s1.dt_physics == ecfg.physics.dt


def test_suite_jobs_match_serial(model, ecfg, random_policy,
                                 tiny_dataset, tiny_predictor):
    inits = trial_inits_from_dataset(tiny_dataset, tiny_predictor, 4, ecfg,
                                     seed=4, model=model)
    controllers = {"damping": baseline("damping", ecfg)}
    s1 = evaluate_suite(controllers, inits, ecfg, model, jobs=1)
    s2 = evaluate_suite(controllers, inits, ecfg, model, jobs=2)
    assert s1.controllers == s2.controllers


def test_trial_init_speed_bound(model, ecfg, tiny_dataset, tiny_predictor):
    inits = trial_inits_from_dataset(tiny_dataset, tiny_predictor, 6, ecfg,
                                     seed=5, model=model)
    for s in inits:
        assert np.hypot(s.base_vel[0], s.base_vel[1]) <= ecfg.eval.init_vel_max


def test_sweep_grid_and_upright_cell(model, ecfg, random_policy):
    cfg = PipelineConfig()
    cfg.eval = dataclasses.replace(cfg.eval, sweep_pitch_steps=3,
                                   sweep_rate_steps=3, horizon_s=0.6)
    rows = directional_sweep(random_policy, baseline("damping", cfg), cfg,
                             model)
    assert len(rows) == 9
    center = [r for r in rows
              if r["pitch"] == 0.0 and r["pitch_rate"] == 0.0][0]
    # upright, zero rate: neither controller need make a non-foot impact
    if not (center["policy_impacted"] and center["baseline_impacted"]):
        assert center["improvement_f_contact_pct"] == pytest.approx(
            center["improvement_f_contact_pct"])


def test_sweep_default_grid_dims(model):
    cfg = PipelineConfig()
    assert cfg.eval.sweep_pitch_steps == 9
    assert cfg.eval.sweep_rate_steps == 7
    assert cfg.eval.sweep_pitch_max == pytest.approx(np.pi / 2)
    assert cfg.eval.sweep_rate_max == 3.0


def test_generalization_readonly(model, ecfg, random_policy, tiny_dataset,
                                 tiny_predictor):
    def weights_digest(nets):
        h = hashlib.sha256()
        for w in nets.actor.weights:
            h.update(w.tobytes())
        h.update(nets.log_std.tobytes())
        return h.hexdigest()

    before = weights_digest(random_policy.nets)
    summary = generalization_test(random_policy, tiny_dataset,
                                  tiny_predictor, ecfg, model, seed=6, n=3)
    assert weights_digest(random_policy.nets) == before
    assert set(summary.controllers) == {"ours_test", "damping"}
