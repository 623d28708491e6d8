"""Command-line pipeline orchestration.

Subcommands: gen-data, train-predictor, eval-predictor, train-policy,
evaluate, sweep, generalize, score, report. Every subcommand takes
--config; --seed overrides the config's master seed; --jobs caps worker
pools. Each output artifact gets a .manifest.json sibling recording config
hash, seeds, and input hashes.

Exit codes: 0 ok, 2 usage, 3 config error, 4 data fault, 5 numerical fault.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from . import datagen, evaluation, nn, predictor as predictor_mod, rl
from .config import ConfigError, PipelineConfig, load_config
from .manifest import write_manifest
from .model import default_model
from .physics import PhysicsDivergence

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(EXIT_USAGE)


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def write_csv(path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c, "")) for c in columns])


SUITE_COLUMNS = [
    "row_kind", "controller",
    "tau_max_mean", "tau_max_std",
    "f_joint_max_mean", "f_joint_max_std",
    "f_contact_max_mean", "f_contact_max_std",
    "impulse_J_mean", "impulse_J_std",
    "illegal_rate",
    "n_limit_max_mean", "n_limit_max_std",
    "r_torque_max_mean", "r_torque_max_std",
    "impulse_100ms_mean", "impulse_100ms_std",
    "n_valid", "n_invalid", "init_hash", "dt_physics",
]

_SUITE_METRICS = ("tau_max", "f_joint_max", "f_contact_max", "impulse_J",
                  "n_limit_max", "r_torque_max", "impulse_100ms")


def suite_rows(summary: evaluation.SuiteSummary,
               baselines: list[str]) -> list[dict]:
    rows = []
    for name, stats in summary.controllers.items():
        row = {"row_kind": "metrics", "controller": name,
               "illegal_rate": summary.illegal_rate[name],
               "n_valid": summary.n_valid[name],
               "n_invalid": summary.n_invalid[name],
               "init_hash": summary.init_hash,
               "dt_physics": summary.dt_physics}
        for metric in _SUITE_METRICS:
            row[f"{metric}_mean"] = stats[metric][0]
            row[f"{metric}_std"] = stats[metric][1]
        rows.append(row)
    for name in summary.controllers:
        for base in baselines:
            if base == name or base not in summary.controllers:
                continue
            row = {"row_kind": f"improvement_vs_{base}", "controller": name,
                   "init_hash": summary.init_hash,
                   "dt_physics": summary.dt_physics}
            for metric in _SUITE_METRICS:
                row[f"{metric}_mean"] = summary.improvement_pct(
                    name, base, metric)
            b = summary.illegal_rate[base]
            o = summary.illegal_rate[name]
            row["illegal_rate"] = (100.0 * (b - o) / b) if b else 0.0
            rows.append(row)
    return rows


def _load_cfg(args) -> PipelineConfig:
    cfg = load_config(args.config)
    return cfg


def _seed(args, cfg) -> int:
    return args.seed if args.seed is not None else cfg.meta.master_seed


# ---------------------------------------------------------------------------
# subcommand implementations


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    seed = _seed(args, cfg)
    started = time.time()
    n = args.n if args.n is not None else cfg.datagen.n_trajectories
    ds = datagen.generate_dataset(
        n, cfg, seed, controller=args.controller, jobs=args.jobs)
    datagen.save_dataset(args.out, ds)
    write_manifest(args.out, "gen-data", cfg.content_hash(), seed,
                   {"config": args.config}, {"n_trajectories": n},
                   started)
    print(f"wrote {n} trajectories to {args.out} "
          f"({len(ds.train)} train / {len(ds.val)} val)")
    return EXIT_OK


def cmd_train_predictor(args) -> int:
    cfg = _load_cfg(args)
    seed = _seed(args, cfg)
    started = time.time()
    ds = datagen.load_dataset(args.data)
    params, log = predictor_mod.train_predictor(ds, cfg.predictor, seed)
    nn.save_checkpoint(args.out, nn.gru_to_tensors(params),
                       cfg.content_hash(),
                       {"kind": "predictor"})
    write_manifest(args.out, "train-predictor", cfg.content_hash(), seed,
                   {"config": args.config, "data": args.data},
                   {"final_loss": log.losses[-1][2] if log.losses else None},
                   started)
    first = log.epoch_mean(0)
    last = log.epoch_mean(max(e for e, _, _ in log.losses)) \
        if log.losses else float("nan")
    print(f"trained predictor: epoch-0 loss {first:.4f} -> final {last:.4f}")
    return EXIT_OK


PREDICTOR_COLUMNS = ["config_id", "t1_rule", "t2_offset_s", "masked",
                     "far", "lt_mean_s", "miss_rate"]


def cmd_eval_predictor(args) -> int:
    cfg = _load_cfg(args)
    seed = _seed(args, cfg)
    started = time.time()
    ds = datagen.load_dataset(args.data)
    if args.ablate:
        rows = predictor_mod.ablation_grid(ds, cfg.predictor, seed,
                                           jobs=args.jobs)
    else:
        if not args.weights:
            raise ConfigError("eval-predictor requires --weights "
                              "(or --ablate)")
        tensors, _ = nn.load_checkpoint(args.weights)
        params = nn.gru_from_tensors(tensors)
        ev = predictor_mod.evaluate_far_lt(params, ds.val, cfg.predictor)
        rows = [{
            "config_id": "current",
            "t1_rule": cfg.predictor.t1_rule,
            "t2_offset_s": cfg.predictor.t2_offset_s,
            "masked": int(cfg.predictor.mask_ambiguous),
            "far": ev.far,
            "lt_mean_s": ev.lead_time_mean,
            "miss_rate": ev.miss_rate,
        }]
    write_csv(args.csv, rows, PREDICTOR_COLUMNS)
    write_manifest(args.csv, "eval-predictor", cfg.content_hash(), seed,
                   {"config": args.config, "data": args.data,
                    **({"weights": args.weights} if args.weights else {})},
                   None, started)
    for row in rows:
        print(f"{row['config_id']}: FAR {row['far']*100:.3f}% "
              f"LT {row['lt_mean_s']:.3f}s miss {row['miss_rate']*100:.1f}%")
    return EXIT_OK


CURVE_COLUMNS = ["update", "reward_mean", "contact", "joint", "torque",
                 "regulation", "kl", "clip_fraction", "lr", "value_loss",
                 "std_mean"]


def cmd_train_policy(args) -> int:
    cfg = _load_cfg(args)
    seed = _seed(args, cfg)
    started = time.time()
    dataset = pred_params = init_nets = None
    inputs = {"config": args.config}
    if args.stage == 2:
        if not (args.init and args.data and args.predictor):
            raise ConfigError(
                "stage 2 requires --init (stage-1 checkpoint), --data, "
                "and --predictor")
    if args.init:
        init_nets, _ = rl.load_policy(args.init)
        inputs["init"] = args.init
    if args.data:
        dataset = datagen.load_dataset(args.data)
        inputs["data"] = args.data
    if args.predictor:
        tensors, _ = nn.load_checkpoint(args.predictor)
        pred_params = nn.gru_from_tensors(tensors)
        inputs["predictor"] = args.predictor
    nets, rows = rl.train_policy(
        args.stage, cfg, seed, dataset=dataset,
        predictor_params=pred_params, init_nets=init_nets,
        n_updates=args.updates,
        progress=(lambda r: print(
            f"update {r.update}: reward {r.reward_mean:+.3f} "
            f"kl {r.kl:.4f} lr {r.lr:.2e}", flush=True))
        if args.verbose else None)
    rl.save_policy(args.out, nets, cfg.content_hash(), args.stage)
    curve_rows = [vars(r) for r in rows]
    curves_path = str(args.out) + ".curves.csv"
    write_csv(curves_path, curve_rows, CURVE_COLUMNS)
    write_manifest(args.out, "train-policy", cfg.content_hash(), seed,
                   inputs, {"stage": args.stage, "updates": len(rows)},
                   started)
    print(f"stage {args.stage} trained: reward "
          f"{rows[0].reward_mean:+.3f} -> {rows[-1].reward_mean:+.3f} "
          f"({len(rows)} updates), curves in {curves_path}")
    return EXIT_OK


def _load_policy_controller(path, cfg) -> evaluation.PolicyController:
    nets, meta = rl.load_policy(path)
    stage = meta.get("stage", "?")
    return evaluation.PolicyController(
        nets, cfg.ppo.episode_len, name=f"ours_stage{stage}")


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    seed = _seed(args, cfg)
    started = time.time()
    model = default_model()
    ds = datagen.load_dataset(args.data)
    tensors, _ = nn.load_checkpoint(args.predictor)
    pred_params = nn.gru_from_tensors(tensors)
    n = args.n if args.n is not None else cfg.eval.n_trials
    inits = evaluation.trial_inits_from_dataset(
        ds, pred_params, n, cfg, seed, model)
    controllers: dict[str, evaluation.TrialController] = {}
    for path in args.policy:
        ctrl = _load_policy_controller(path, cfg)
        controllers[ctrl.name] = ctrl
    for kind in ("nominal", "default_pose", "damping"):
        ctrl = evaluation.baseline(kind, cfg)
        controllers[ctrl.name] = ctrl
    summary = evaluation.evaluate_suite(controllers, inits, cfg, model,
                                        jobs=args.jobs)
    rows = suite_rows(summary, ["nominal", "default_pose", "damping"])
    write_csv(args.csv, rows, SUITE_COLUMNS)
    write_manifest(args.csv, "evaluate", cfg.content_hash(), seed,
                   {"config": args.config, "data": args.data,
                    "predictor": args.predictor,
                    **{f"policy{i}": p for i, p in enumerate(args.policy)}},
                   {"n_trials": n, "unreliable": summary.unreliable},
                   started)
    if summary.unreliable:
        print("WARNING: > max_invalid_frac trials diverged; "
              "suite marked unreliable")
    for name, stats in summary.controllers.items():
        print(f"{name}: f_contact {stats['f_contact_max'][0]:.0f}"
              f"+-{stats['f_contact_max'][1]:.0f} N, illegal rate "
              f"{summary.illegal_rate[name]*100:.1f}%")
    return EXIT_OK


SWEEP_COLUMNS = ["pitch", "pitch_rate", "policy_f_contact",
                 "baseline_f_contact", "policy_f_joint", "baseline_f_joint",
                 "policy_impacted", "baseline_impacted",
                 "improvement_f_contact_pct", "improvement_f_joint_pct"]


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    seed = _seed(args, cfg)
    started = time.time()
    model = default_model()
    policy = _load_policy_controller(args.policy, cfg)
    base = evaluation.baseline("damping", cfg)
    rows = evaluation.directional_sweep(policy, base, cfg, model)
    write_csv(args.csv, rows, SWEEP_COLUMNS)
    write_manifest(args.csv, "sweep", cfg.content_hash(), seed,
                   {"config": args.config, "policy": args.policy},
                   None, started)
    both = [r for r in rows if r["policy_impacted"] and r["baseline_impacted"]]
    better = [r for r in both if r["improvement_f_contact_pct"] > 0.0]
    frac = len(better) / len(both) if both else float("nan")
    print(f"sweep: improved contact force in {len(better)}/{len(both)} "
          f"impacted cells ({frac*100:.0f}%)")
    return EXIT_OK


def cmd_generalize(args) -> int:
    cfg = _load_cfg(args)
    seed = _seed(args, cfg)
    started = time.time()
    model = default_model()
    ds_b = datagen.load_dataset(args.data)
    tensors, _ = nn.load_checkpoint(args.predictor)
    pred_params = nn.gru_from_tensors(tensors)
    policy = _load_policy_controller(args.policy, cfg)
    summary = evaluation.generalization_test(
        policy, ds_b, pred_params, cfg, model, seed, args.n)
    rows = suite_rows(summary, ["damping"])
    write_csv(args.csv, rows, SUITE_COLUMNS)
    write_manifest(args.csv, "generalize", cfg.content_hash(), seed,
                   {"config": args.config, "data": args.data,
                    "policy": args.policy, "predictor": args.predictor},
                   None, started)
    imp = summary.improvement_pct(policy.name, "damping", "f_contact_max")
    print(f"generalization: contact-force improvement vs damping "
          f"{imp:+.1f}%")
    return EXIT_OK


SCORE_COLUMNS = ["trajectory", "frame", "contact", "joint", "torque",
                 "regulation", "total"]


def cmd_score(args) -> int:
    from . import reward as reward_mod
    from .physics import ModelArrays, CollisionGeometry

    cfg = _load_cfg(args)
    seed = _seed(args, cfg)
    started = time.time()
    ds = datagen.load_dataset(args.data)
    model = default_model()
    arrays = ModelArrays.build(model, CollisionGeometry.FULL)
    dt_ctrl = cfg.physics.dt * cfg.physics.control_decimation
    J = model.n_joints
    rows = []
    for ti, traj in enumerate(ds.trajectories):
        prev_qd = np.zeros(J)
        prev_action = np.zeros(J)
        for f in range(traj.n_frames):
            state = traj.state_at(f, J)
            br = reward_mod.total_reward_raw(
                traj.link_force[f].astype(np.float64),
                traj.link_contact[f].astype(bool),
                traj.joint_reaction[f].astype(np.float64),
                traj.joint_ext[f].astype(np.float64),
                state, prev_qd, prev_action, prev_action,
                arrays, cfg.reward, dt_ctrl, cfg.physics.gravity)
            prev_qd = state.qd
            rows.append({
                "trajectory": ti, "frame": f, "contact": br.contact,
                "joint": br.joint, "torque": br.torque,
                "regulation": br.regulation, "total": br.total,
            })
    write_csv(args.csv, rows, SCORE_COLUMNS)
    write_manifest(args.csv, "score", cfg.content_hash(), seed,
                   {"config": args.config, "data": args.data}, None, started)
    print(f"scored {len(ds.trajectories)} trajectories "
          f"({len(rows)} frames) into {args.csv}")
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _load_cfg(args)
    run_dir = Path(args.dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory not found: {run_dir}")
    out_rows = []
    for path in sorted(run_dir.glob("*.csv")):
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames and "row_kind" in reader.fieldnames:
                for row in reader:
                    row["source"] = path.name
                    out_rows.append(row)
    if not out_rows:
        raise FileNotFoundError(
            f"no evaluation CSVs with suite rows found in {run_dir}")
    out = args.out or str(run_dir / "summary.csv")
    write_csv(out, out_rows, ["source"] + SUITE_COLUMNS)
    print(f"aggregated {len(out_rows)} rows into {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="fallguard",
                     description="fall prediction and damage mitigation "
                                 "pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="TOML config path")
        p.add_argument("--seed", type=int, default=None,
                       help="master seed (default: config meta.master_seed)")
        p.add_argument("--jobs", type=int, default=1,
                       help="worker pool size")

    p = sub.add_parser("gen-data", help="generate a fall dataset")
    common(p)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--controller", default=None,
                   choices=["balance-a", "gait-b"])
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-predictor", help="train the GRU fall predictor")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_predictor)

    p = sub.add_parser("eval-predictor", help="FAR/LT evaluation or ablation")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--weights", default=None)
    p.add_argument("--csv", required=True)
    p.add_argument("--ablate", action="store_true",
                   help="run the six-cell segmentation ablation grid")
    p.set_defaults(func=cmd_eval_predictor)

    p = sub.add_parser("train-policy", help="PPO mitigation-policy training")
    common(p)
    p.add_argument("--stage", type=int, required=True, choices=[1, 2])
    p.add_argument("--init", default=None, help="stage-1 checkpoint")
    p.add_argument("--data", default=None)
    p.add_argument("--predictor", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--updates", type=int, default=None,
                   help="override the per-stage update count")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train_policy)

    p = sub.add_parser("evaluate", help="paired damage-metric suite")
    common(p)
    p.add_argument("--policy", nargs="+", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--predictor", required=True)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--csv", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="pitch x pitch-rate directional sweep")
    common(p)
    p.add_argument("--policy", required=True)
    p.add_argument("--csv", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("generalize",
                       help="evaluate on falls from the unseen controller")
    common(p)
    p.add_argument("--policy", required=True)
    p.add_argument("--data", required=True, help="gait-b dataset")
    p.add_argument("--predictor", required=True)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--csv", required=True)
    p.set_defaults(func=cmd_generalize)

    p = sub.add_parser("score", help="batch-score a dataset's rewards")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--csv", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("report", help="aggregate run CSVs into one summary")
    common(p)
    p.add_argument("--dir", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (datagen.DatasetError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (nn.GradientBlowup, PhysicsDivergence,
            rl.RejectionBudgetExhausted) as exc:
        print(f"numerical fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
