"""Acceptance suite: one test per criterion, each printing a PASS line
with its measured numbers.

Heavy artifacts (desk datasets, predictor, stage-1/2 policies) build once
and are cached under .acceptance_cache/<config-hash>/ so re-runs are cheap;
delete the directory to force a rebuild. Timing assertions apply to fresh
builds only (a cache hit cannot re-measure its build time).
"""

import dataclasses
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from fallguard import datagen, evaluation, nn, predictor, rl
from fallguard.config import load_config
from fallguard.model import LinkSpec, RobotModel, Sensitivity, default_model
from fallguard.physics import (
    CollisionGeometry,
    Engine,
    ModelArrays,
    SimState,
    WorldParams,
)
from fallguard.reward import effective_weights, total_reward_raw
from fallguard.seeding import make_rng

ROOT = Path(__file__).resolve().parents[1]
DESK = ROOT / "configs" / "desk.toml"
SMOKE = ROOT / "configs" / "smoke.toml"
G = 9.81


def ok(criterion: str, detail: str):
    print(f"\nPASS {criterion}: {detail}")


# ---------------------------------------------------------------------------
# cached desk artifacts


@pytest.fixture(scope="session")
def desk_cfg():
    return load_config(DESK)


@pytest.fixture(scope="session")
def cache_dir(desk_cfg):
    d = ROOT / ".acceptance_cache" / desk_cfg.content_hash()[:16]
    d.mkdir(parents=True, exist_ok=True)
    return d


def _timed(path: Path, build):
    """Build (and time) an artifact once; later runs reuse the file."""
    stamp = path.with_suffix(path.suffix + ".time")
    if path.exists():
        return float(stamp.read_text()) if stamp.exists() else float("nan")
    t0 = time.perf_counter()
    build()
    elapsed = time.perf_counter() - t0
    stamp.write_text(f"{elapsed:.3f}")
    return elapsed


@pytest.fixture(scope="session")
def dataset_a(desk_cfg, cache_dir):
    path = cache_dir / "data_a.fgd1"
    _timed(path, lambda: datagen.save_dataset(
        path, datagen.generate_dataset(
            desk_cfg.datagen.n_trajectories, desk_cfg, seed=0, jobs=8)))
    return datagen.load_dataset(path)


@pytest.fixture(scope="session")
def dataset_b(desk_cfg, cache_dir):
    path = cache_dir / "data_b.fgd1"
    _timed(path, lambda: datagen.save_dataset(
        path, datagen.generate_dataset(
            desk_cfg.datagen.n_trajectories, desk_cfg, seed=1,
            controller="gait-b", jobs=8)))
    return datagen.load_dataset(path)


@pytest.fixture(scope="session")
def ablation_rows(desk_cfg, cache_dir, dataset_a):
    path = cache_dir / "ablation.json"
    if not path.exists():
        t0 = time.perf_counter()
        rows = predictor.ablation_grid(dataset_a, desk_cfg.predictor, seed=0,
                                       jobs=6)
        elapsed = time.perf_counter() - t0
        path.write_text(json.dumps({"rows": rows, "elapsed": elapsed}))
    data = json.loads(path.read_text())
    return data["rows"], data["elapsed"]


@pytest.fixture(scope="session")
def predictor_a(desk_cfg, cache_dir, dataset_a):
    path = cache_dir / "predictor_a.fgw1"
    if not path.exists():
        params, _ = predictor.train_predictor(
            dataset_a, desk_cfg.predictor, seed=0)
        nn.save_checkpoint(path, nn.gru_to_tensors(params),
                           desk_cfg.content_hash())
    tensors, _ = nn.load_checkpoint(path)
    return nn.gru_from_tensors(tensors)


@pytest.fixture(scope="session")
def stage1_policy(desk_cfg, cache_dir):
    path = cache_dir / "stage1.fgw1"
    _timed(path, lambda: rl.save_policy(
        path,
        rl.train_policy(1, desk_cfg, seed=0)[0],
        desk_cfg.content_hash(), 1))
    return rl.load_policy(path)[0]


@pytest.fixture(scope="session")
def stage2_policy(desk_cfg, cache_dir, stage1_policy, dataset_a, predictor_a):
    path = cache_dir / "stage2.fgw1"
    _timed(path, lambda: rl.save_policy(
        path,
        rl.train_policy(2, desk_cfg, seed=0, dataset=dataset_a,
                        predictor_params=predictor_a,
                        init_nets=stage1_policy)[0],
        desk_cfg.content_hash(), 2))
    return rl.load_policy(path)[0]


@pytest.fixture(scope="session")
def efficacy_suite(desk_cfg, cache_dir, stage1_policy, stage2_policy,
                   dataset_a, predictor_a):
    model = default_model()
    inits = evaluation.trial_inits_from_dataset(
        dataset_a, predictor_a, desk_cfg.eval.n_trials, desk_cfg, seed=2,
        model=model)
    controllers = {
        "stage12": evaluation.PolicyController(
            stage2_policy, desk_cfg.ppo.episode_len, name="stage12"),
        "stage1": evaluation.PolicyController(
            stage1_policy, desk_cfg.ppo.episode_len, name="stage1"),
        "damping": evaluation.baseline("damping", desk_cfg),
        "nominal": evaluation.baseline("nominal", desk_cfg),
        "default_pose": evaluation.baseline("default_pose", desk_cfg),
    }
    return evaluation.evaluate_suite(controllers, inits, desk_cfg, model,
                                     jobs=8)


# ---------------------------------------------------------------------------
# criterion 1: reward oracle equivalence


def brute_force_reward(link_force, link_contact, reaction, tau_ext, q, qd,
                       prev_qd, action, prev_action, model, cfg, dt):
    """Independent re-derivation: plain Python loops, no shared code."""
    weights = {"high": 1000.0, "medium": 1.0, "low": 0.5}
    scores = []
    for i, link in enumerate(model.links):
        if not link_contact[i]:
            continue
        dynamic = link_force[i] - link.mass * G
        if dynamic < 0.0:
            dynamic = 0.0
        scores.append(weights[link.sensitivity.value] * dynamic)
    if scores:
        contact = sum(scores) / len(scores) + cfg.alpha * max(scores)
    else:
        contact = 0.0
    joint = 0.0
    for i, js in enumerate(model.joints):
        over = reaction[i] - js.reaction_force_threshold
        if over > 0.0:
            joint += over
    torque = 0.0
    for i, js in enumerate(model.joints):
        ratio = abs(tau_ext[i]) / js.torque_rated - 1.0
        if ratio > 0.0:
            torque += ratio * ratio
    reg = 0.0
    for i, js in enumerate(model.joints):
        lo, hi = js.position_limits
        over_hi = max(q[i] - (hi - cfg.limit_margin), 0.0) / cfg.limit_margin
        over_lo = max((lo + cfg.limit_margin) - q[i], 0.0) / cfg.limit_margin
        reg += cfg.w_qpos * (over_hi**2 + over_lo**2)
        reg += cfg.w_qvel * qd[i] ** 2
        reg += cfg.w_qacc * ((qd[i] - prev_qd[i]) / dt) ** 2
        reg += cfg.w_arate * (action[i] - prev_action[i]) ** 2
    total = -(cfg.w_contact / cfg.contact_norm * contact
              + cfg.w_joint / cfg.joint_norm * joint
              + cfg.w_torque / cfg.torque_norm * torque) - reg
    return contact, joint, torque, reg, total


def test_criterion_01_reward_oracle(desk_cfg):
    model = default_model()
    arrays = ModelArrays.build(model, CollisionGeometry.FULL)
    cfg = desk_cfg.reward
    rng = make_rng(0, "acceptance-reward")
    L, J = arrays.n_links, arrays.n_joints
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        contact = rng.random(L) < 0.4
        force = rng.uniform(0, 2500, L) * contact
        reaction = rng.uniform(0, 4000, J)
        tau = rng.uniform(-150, 150, J)
        q = arrays.default_q + rng.uniform(-1.5, 1.5, J)
        qd = rng.uniform(-20, 20, J)
        prev_qd = rng.uniform(-20, 20, J)
        a = rng.uniform(-1, 1, J)
        pa = rng.uniform(-1, 1, J)
        state = SimState(np.zeros(3), np.zeros(3), q, qd)
        br = total_reward_raw(force, contact, reaction, tau, state, prev_qd,
                              a, pa, arrays, cfg, 0.02, G)
        oc, oj, ot, oreg, ototal = brute_force_reward(
            force, contact, reaction, tau, q, qd, prev_qd, a, pa, model,
            cfg, 0.02)
        for got, want in ((br.contact, oc), (br.joint, oj),
                          (br.torque, ot), (br.regulation, oreg),
                          (br.total, ototal)):
            rel = abs(got - want) / max(1e-12, abs(want))
            worst = max(worst, rel)
    elapsed = time.perf_counter() - t0
    assert worst < 1e-9
    assert elapsed < 5.0
    ok("criterion 1 (reward oracle)",
       f"1000 readouts, max rel err {worst:.2e}, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# criterion 2: gradient correctness


def test_criterion_02_gradients():
    rng = np.random.default_rng(20)
    t0 = time.perf_counter()
    worst = 0.0
    n_configs = 0
    h = 1e-5
    for trial in range(60):  # 60 GRU configs
        B = int(rng.integers(1, 3))
        T = int(rng.integers(2, 7))
        D = int(rng.integers(2, 6))
        H = int(rng.integers(2, 8))
        p = nn.GruParams.create(D, H, 2, rng)
        x = rng.normal(size=(B, T, D))
        labels = rng.integers(0, 2, size=(B, T))
        mask = rng.integers(0, 2, size=(B, T)).astype(float)
        mask[0, 0] = 1.0
        _, grads, _ = nn.masked_nll(p, x, labels, mask)
        for name, arr in p.as_dict().items():
            flat = arr.ravel()
            for idx in rng.choice(flat.size,
                                  size=min(4, flat.size), replace=False):
                orig = flat[idx]
                flat[idx] = orig + h
                lp = nn.masked_nll(p, x, labels, mask)[0]
                flat[idx] = orig - h
                lm = nn.masked_nll(p, x, labels, mask)[0]
                flat[idx] = orig
                num = (lp - lm) / (2 * h)
                ana = grads[name].ravel()[idx]
                worst = max(worst, abs(num - ana)
                            / max(1e-8, abs(num) + abs(ana)))
        n_configs += 1
    for trial in range(40):  # 40 MLP configs
        dims = [int(rng.integers(2, 7)) for _ in range(4)]
        act = ("tanh", "elu", "relu")[int(rng.integers(3))]
        p = nn.MlpParams.create(dims, act, rng)
        x = rng.normal(size=(int(rng.integers(1, 5)), dims[0]))
        y = rng.normal(size=(x.shape[0], dims[-1]))

        def loss():
            out, _ = nn.mlp_forward(p, x)
            return float(((out - y) ** 2).mean())

        out, cache = nn.mlp_forward(p, x)
        grads, _ = nn.mlp_backward(p, cache, 2 * (out - y) / out.size)
        for name, arr in p.as_dict().items():
            flat = arr.ravel()
            for idx in rng.choice(flat.size,
                                  size=min(4, flat.size), replace=False):
                orig = flat[idx]
                flat[idx] = orig + h
                lp = loss()
                flat[idx] = orig - h
                lm = loss()
                flat[idx] = orig
                num = (lp - lm) / (2 * h)
                ana = grads[name].ravel()[idx]
                worst = max(worst, abs(num - ana)
                            / max(1e-8, abs(num) + abs(ana)))
        n_configs += 1
    elapsed = time.perf_counter() - t0
    assert n_configs >= 100
    assert worst < 1e-4
    assert elapsed < 120.0
    ok("criterion 2 (gradient correctness)",
       f"{n_configs} random configs, max rel err {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 3: physics conservation


def test_criterion_03_conservation():
    t0 = time.perf_counter()
    model = default_model()
    engine = Engine(model)
    state = engine.standing_state()
    state.base_pose[1] += 30.0
    state.base_vel[:] = (3.0, 4.0, 2.0)
    state.qd[:] = np.linspace(-2.0, 2.0, model.n_joints)
    e0 = engine.mechanical_energy(state)
    s = state
    for _ in range(200):  # 1 s at dt = 1/200
        s, ro = engine.step(s, np.zeros(model.n_joints))
        assert not ro.contacts
    drift = abs(engine.mechanical_energy(s) - e0) / abs(e0)
    assert drift < 0.001

    ball = RobotModel(links=(LinkSpec(
        "ball", 1.0, 0.1, 0.4 * 1.0 * 0.05**2, 0.05, Sensitivity.LOW),),
        joints=())
    eng = Engine(ball, WorldParams(restitution=0.0))
    h = 0.2
    bs = SimState(np.array((0.0, 0.05 + h, 0.0)), np.zeros(3),
                  np.zeros(0), np.zeros(0))
    impulse = 0.0
    touched = False
    for _ in range(600):
        bs, ro = eng.step(bs, np.zeros(0))
        if ro.contacts:
            touched = True
        if touched:
            impulse += (ro.ground_reaction_sum[1] - 1.0 * G) * eng.dt
    expect = 1.0 * math.sqrt(2 * G * h)
    rel = abs(impulse - expect) / expect
    elapsed = time.perf_counter() - t0
    assert touched and rel < 0.10
    assert elapsed < 10.0
    ok("criterion 3 (physics conservation)",
       f"energy drift {drift*100:.3f}% over 1s; drop impulse err "
       f"{rel*100:.1f}%; {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 4: predictor ablation directionality


def test_criterion_04_ablation(ablation_rows):
    rows, elapsed = ablation_rows
    by_id = {r["config_id"]: r for r in rows}
    unmasked = by_id["unmasked_t2-0.2"]
    masked = by_id["masked_t2-0.2"]
    # (a) masking strictly lowers FAR at matched t2
    assert masked["far"] < unmasked["far"]
    # (b) lead time monotone in t2 offset across the masked rows
    lts = [by_id[f"masked_t2-{o}"]["lt_mean_s"] for o in ("0.1", "0.2", "0.4")]
    assert lts[0] < lts[1] < lts[2]
    # (c) best masked cell: FAR <= 1% with mean lead time >= 0.2 s
    best = min((by_id[f"masked_t2-{o}"] for o in ("0.1", "0.2", "0.4")),
               key=lambda r: r["far"])
    assert best["far"] <= 0.01
    assert best["lt_mean_s"] >= 0.2
    if math.isfinite(elapsed):
        assert elapsed < 30 * 60
    ok("criterion 4 (predictor ablation)",
       f"masked {masked['far']*100:.2f}% < unmasked {unmasked['far']*100:.2f}% "
       f"FAR; LT {lts[0]:.2f}/{lts[1]:.2f}/{lts[2]:.2f}s monotone; best "
       f"FAR {best['far']*100:.2f}% LT {best['lt_mean_s']:.2f}s; "
       f"grid {elapsed/60:.1f} min")


# ---------------------------------------------------------------------------
# criterion 5: inference latency


def test_criterion_05_latency(predictor_a):
    p32 = predictor_a.astype(np.float32)
    state = predictor.init_stream(p32)
    frames = np.random.default_rng(1).normal(
        size=(100_000, p32.input_dim)).astype(np.float32)
    for t in range(200):  # warmup
        _, state = predictor.predict_stream(p32, frames[t], state)
    state = predictor.init_stream(p32)
    t0 = time.perf_counter()
    for t in range(100_000):
        _, state = predictor.predict_stream(p32, frames[t], state)
    per_frame = (time.perf_counter() - t0) / 100_000
    assert per_frame < 0.5e-3
    ok("criterion 5 (inference latency)",
       f"{per_frame*1e6:.0f} us per frame at f32 over 1e5 frames")


# ---------------------------------------------------------------------------
# criteria 6-7: policy efficacy and curriculum ordering


def test_criterion_06_policy_efficacy(efficacy_suite, desk_cfg):
    s = efficacy_suite
    assert not s.unreliable
    assert s.n_valid["stage12"] >= 500
    fc = s.improvement_pct("stage12", "damping", "f_contact_max")
    ill_d = s.illegal_rate["damping"]
    ill_p = s.illegal_rate["stage12"]
    ill_rel = 100.0 * (ill_d - ill_p) / ill_d if ill_d else 100.0
    tau = s.improvement_pct("stage12", "damping", "tau_max")
    fj = s.improvement_pct("stage12", "damping", "f_joint_max")
    imp = s.improvement_pct("stage12", "damping", "impulse_J")
    assert fc >= 25.0
    assert ill_rel >= 50.0
    assert tau > 0.0 and fj > 0.0 and imp > 0.0
    ok("criterion 6 (policy efficacy vs damping)",
       f"f_contact -{fc:.1f}%, illegal rate {ill_d*100:.1f}%->"
       f"{ill_p*100:.1f}% (-{ill_rel:.0f}% rel), tau -{tau:.1f}%, "
       f"f_joint -{fj:.1f}%, impulse -{imp:.1f}% on {s.n_valid['stage12']} "
       f"paired falls")


def test_criterion_07_curriculum(efficacy_suite):
    s = efficacy_suite
    fc2 = s.controllers["stage12"]["f_contact_max"][0]
    fc1 = s.controllers["stage1"]["f_contact_max"][0]
    assert fc2 < fc1
    assert s.illegal_rate["stage12"] <= s.illegal_rate["stage1"]
    ok("criterion 7 (curriculum ordering)",
       f"stage I&II f_contact {fc2:.0f} N < stage I {fc1:.0f} N; illegal "
       f"{s.illegal_rate['stage12']*100:.1f}% <= "
       f"{s.illegal_rate['stage1']*100:.1f}%")


# ---------------------------------------------------------------------------
# criterion 8: directional sweep


def test_criterion_08_sweep(desk_cfg, stage2_policy):
    model = default_model()
    policy = evaluation.PolicyController(stage2_policy,
                                         desk_cfg.ppo.episode_len)
    rows = evaluation.directional_sweep(
        policy, evaluation.baseline("damping", desk_cfg), desk_cfg, model)
    both = [r for r in rows
            if r["policy_impacted"] and r["baseline_impacted"]]
    assert both, "no cells with impacts on both controllers"
    better = [r for r in both if r["improvement_f_contact_pct"] > 0.0]
    frac = len(better) / len(both)
    assert frac >= 0.70
    ok("criterion 8 (directional sweep)",
       f"contact force improved in {len(better)}/{len(both)} impacted "
       f"cells ({frac*100:.0f}%)")


# ---------------------------------------------------------------------------
# criterion 9: generalization to the unseen nominal controller


def test_criterion_09_generalization(desk_cfg, stage2_policy, dataset_b,
                                     predictor_a):
    model = default_model()
    policy = evaluation.PolicyController(stage2_policy,
                                         desk_cfg.ppo.episode_len,
                                         name="stage12")
    summary = evaluation.generalization_test(
        policy, dataset_b, predictor_a, desk_cfg, model, seed=3)
    fc = summary.improvement_pct("stage12", "damping", "f_contact_max")
    fj = summary.improvement_pct("stage12", "damping", "f_joint_max")
    assert fc >= 15.0
    assert fj >= 15.0
    ok("criterion 9 (generalization)",
       f"on unseen-controller falls: f_contact -{fc:.1f}%, "
       f"f_joint -{fj:.1f}% vs damping")


# ---------------------------------------------------------------------------
# criterion 10: end-to-end determinism


def test_criterion_10_determinism(tmp_path):
    from fallguard.cli import main

    t0 = time.perf_counter()
    digests = []
    for run in ("r1", "r2"):
        d = tmp_path / run
        d.mkdir()
        data = str(d / "d.fgd1")
        pred = str(d / "p.fgw1")
        pol = str(d / "s1.fgw1")
        pred_csv = str(d / "pred.csv")
        eval_csv = str(d / "eval.csv")
        assert main(["gen-data", "--config", str(SMOKE), "--out", data,
                     "--seed", "7"]) == 0
        assert main(["train-predictor", "--config", str(SMOKE),
                     "--data", data, "--out", pred, "--seed", "7"]) == 0
        assert main(["eval-predictor", "--config", str(SMOKE),
                     "--data", data, "--weights", pred,
                     "--csv", pred_csv, "--seed", "7"]) == 0
        assert main(["train-policy", "--config", str(SMOKE), "--stage", "1",
                     "--out", pol, "--seed", "7"]) == 0
        assert main(["evaluate", "--config", str(SMOKE), "--policy", pol,
                     "--data", data, "--predictor", pred,
                     "--csv", eval_csv, "--seed", "7"]) == 0
        digests.append(tuple(
            Path(p).read_bytes()
            for p in (pred_csv, eval_csv, pol + ".curves.csv")))
    elapsed = time.perf_counter() - t0
    assert digests[0] == digests[1], "pipeline outputs differ between runs"
    assert elapsed < 15 * 60
    ok("criterion 10 (determinism)",
       f"smoke pipeline twice -> byte-identical CSVs in {elapsed/60:.1f} min")
