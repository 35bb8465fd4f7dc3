"""Unified command-line surface.

Subcommands: ingest, partition, stage1, stage2, reward-score, select,
calibrate, simenv (gen-tasks, run), report. Configuration comes from one
declarative JSON file (``--config`` or $TABLERL_CONFIG) with flag
overrides; run drivers freeze the fully resolved config into the output
directory's manifest.

Exit status: 0 on success, 2 on usage errors, 1 otherwise with a single
machine-parseable ``{"error": ...}`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional, Sequence

from . import __version__
from .answers import NormalizationPolicy
from .curriculum import (
    PassAtKConfig,
    TrainerConfig,
    load_checkpoint,
    partition,
    save_checkpoint,
    stage1_run,
    stage2_init,
    stage2_step,
)
from .experiments import ExperimentConfig, run_experiment
from .grpo import ClipBounds
from .io_jsonl import (
    INGEST_FORMATS,
    RunManifest,
    emit_report,
    export_samples,
    ingest_samples,
    iter_jsonl,
    read_trajectories,
    sha256_file,
    write_jsonl,
    write_manifest,
)
from .policy import TabularPolicy
from .reward import RewardWeights, score_batch
from .simenv import ToyTask, evaluate_pass_values, generate_tasks, group_sampler, warm_start
from .types import Trajectory
from .uncertainty import FusionWeights, calibrate_weights, select_with_fallback


def _load_config(path: Optional[str]) -> dict:
    path = path or os.environ.get("TABLERL_CONFIG")
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as f:
        cfg = json.load(f)
    if not isinstance(cfg, dict):
        raise ValueError("config file must hold a JSON object")
    return cfg


def _resolve(flag, config: dict, key: str, default):
    if flag is not None:
        return flag
    return config.get(key, default)


def _parse_weight_triple(text: str, cls):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected three comma-separated weights, got {text!r}")
    values = [float(p) for p in parts]
    return cls(*values)


def _read_policy(path: str) -> TabularPolicy:
    with open(path, "r", encoding="utf-8") as f:
        return TabularPolicy.from_dict(json.load(f))


def _write_policy(policy: TabularPolicy, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(policy.to_dict(), f)
        f.write("\n")


def _read_tasks(path: str) -> list[ToyTask]:
    tasks = []
    for lineno, rec in iter_jsonl(path):
        if "toy" not in rec:
            raise ValueError(f"{path}:{lineno}: record lacks the 'toy' extension; not a task file")
        tasks.append(ToyTask.from_record(rec))
    return tasks


def _read_partition(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        rec = json.load(f)
    for key in ("easy", "hard"):
        if key not in rec:
            raise ValueError(f"partition file missing {key!r}")
    return rec


def cmd_ingest(args: argparse.Namespace) -> int:
    result = ingest_samples(args.infile, args.format)
    for lineno, reason in result.skipped:
        print(f"skip line {lineno}: {reason}", file=sys.stderr)
    export_samples(result.samples, args.out)
    print(result.summary())
    return 0


def cmd_reward_score(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    weights = (
        _parse_weight_triple(args.weights, RewardWeights)
        if args.weights
        else RewardWeights.from_dict(config.get("reward_weights", {}))
    )
    policy = NormalizationPolicy.from_dict(config.get("normalization", {}))
    trajectories = read_trajectories(args.infile)
    result = ingest_samples(args.samples, "canonical")
    entries = score_batch(trajectories, result.samples, weights, policy)
    write_jsonl(args.out, (e.to_record() for e in entries))
    n_err = sum(1 for e in entries if e.error is not None)
    print(f"scored {len(entries) - n_err} trajectories, {n_err} errors")
    return 0


def cmd_select(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    weights = (
        _parse_weight_triple(args.weights, FusionWeights)
        if args.weights
        else FusionWeights.from_dict(config.get("fusion_weights", {}))
    )
    trajectories = read_trajectories(args.rollouts)
    by_sample: dict[str, list[Trajectory]] = {}
    order: list[str] = []
    for t in trajectories:
        if t.sample_id not in by_sample:
            by_sample[t.sample_id] = []
            order.append(t.sample_id)
        by_sample[t.sample_id].append(t)
    records = []
    for sid in order:
        report = select_with_fallback(by_sample[sid], weights)
        records.append(
            {
                "sample_id": sid,
                "answer": list(report.selected_answer),
                "selected_index": report.selected_index,
                "n_valid": report.n_valid,
                "unverified": report.fallback,
            }
        )
    write_jsonl(args.out, records)
    print(f"selected answers for {len(records)} samples")
    return 0


def cmd_calibrate(args: argparse.Namespace) -> int:
    runs = []
    for lineno, rec in iter_jsonl(args.runs):
        try:
            rollouts = [Trajectory.from_dict(r) for r in rec["rollouts"]]
            gold = [str(g) for g in rec["gold"]]
        except (KeyError, TypeError) as e:
            raise ValueError(f"{args.runs}:{lineno}: bad labeled run: {e}") from e
        runs.append((rollouts, gold))
    weights = calibrate_weights(runs, args.grid_step)
    payload = weights.to_dict()
    print(json.dumps(payload))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(payload, f)
            f.write("\n")
    return 0


def cmd_partition(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    pass_cfg = PassAtKConfig.from_dict(config.get("pass_k", {}))
    if args.k1 is not None:
        pass_cfg = PassAtKConfig.from_dict({**pass_cfg.to_dict(), "k1": args.k1})
    tasks = _read_tasks(args.tasks)
    policy = _read_policy(args.policy)
    seed = _resolve(args.seed, config, "seed", 0)
    pass_values = evaluate_pass_values(policy, tasks, pass_cfg.k1, seed)
    easy, hard = partition([t.sample for t in tasks], pass_values, pass_cfg)
    record = {
        "pass_values": pass_values,
        "easy": [s.id for s in easy],
        "hard": [s.id for s in hard],
    }
    with open(args.out, "w", encoding="utf-8") as f:
        json.dump(record, f)
        f.write("\n")
    print(f"partitioned {len(tasks)} samples: {len(easy)} easy, {len(hard)} hard")
    return 0


def _trainer_config(args: argparse.Namespace, config: dict, stage: int) -> TrainerConfig:
    pass_cfg = PassAtKConfig.from_dict(config.get("pass_k", {}))
    bounds = ClipBounds.from_dict(config.get("bounds", {}))
    defaults = {1: {"steps": 20, "lr": 0.9, "rollouts": 5}, 2: {"steps": 168, "lr": 0.18, "rollouts": pass_cfg.k2}}
    d = defaults[stage]
    return TrainerConfig(
        steps=int(_resolve(args.steps, config, f"stage{stage}_steps", d["steps"])),
        batch_size=int(_resolve(args.batch_size, config, "batch_size", 16)),
        rollouts_per_sample=int(_resolve(getattr(args, "rollouts", None), config, f"stage{stage}_rollouts", d["rollouts"])),
        learning_rate=float(_resolve(args.lr, config, f"stage{stage}_lr", d["lr"])),
        decay=float(_resolve(getattr(args, "decay", None), config, "decay", 0.01 if stage == 2 else 0.0)),
        inner_epochs=int(config.get("inner_epochs", 2)),
        review_period=int(_resolve(getattr(args, "review_period", None), config, "review_period", 20)),
        seed=int(_resolve(args.seed, config, "seed", 0)),
        bounds=bounds,
        pass_k=pass_cfg,
    )


def cmd_stage1(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    cfg = _trainer_config(args, config, stage=1)
    tasks = _read_tasks(args.tasks)
    part = _read_partition(args.partition)
    easy_ids = set(part["easy"])
    easy = [t.sample for t in tasks if t.sample.id in easy_ids]
    policy = _read_policy(args.policy)
    policy, metrics = stage1_run(easy, policy, cfg, group_sampler(tasks))
    _write_policy(policy, args.policy_out)
    write_jsonl(args.metrics_out, (m.to_record() for m in metrics))
    print(f"stage 1 complete: {len(metrics)} steps over {len(easy)} easy samples")
    return 0


def cmd_stage2(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    cfg = _trainer_config(args, config, stage=2)
    tasks = _read_tasks(args.tasks)
    part = _read_partition(args.partition)
    hard_ids = set(part["hard"])
    hard = [t.sample for t in tasks if t.sample.id in hard_ids]
    samples_by_id = {s.id: s for s in hard}
    sampler = group_sampler(tasks)

    if args.resume:
        if not args.checkpoint:
            raise ValueError("--resume requires --checkpoint")
        state, policy = load_checkpoint(args.checkpoint)
    else:
        policy = _read_policy(args.policy)
        state = stage2_init(hard, cfg.seed, start_step=int(config.get("stage1_steps", 20)))

    metrics = []
    while state.stage2_steps < cfg.steps:
        state, policy, m = stage2_step(state, policy, samples_by_id, cfg, sampler)
        metrics.append(m)
        if args.checkpoint and args.checkpoint_every and state.stage2_steps % args.checkpoint_every == 0:
            save_checkpoint(args.checkpoint, state, policy)
        if m.terminated:
            print("active pool empty; stage 2 finished early", file=sys.stderr)
            break
    if args.checkpoint:
        save_checkpoint(args.checkpoint, state, policy)
    _write_policy(policy, args.policy_out)
    mode = "a" if args.resume and args.append_metrics else "w"
    if mode == "a":
        with open(args.metrics_out, "a", encoding="utf-8") as f:
            for m in metrics:
                f.write(json.dumps(m.to_record(), ensure_ascii=False) + "\n")
    else:
        write_jsonl(args.metrics_out, (m.to_record() for m in metrics))
    print(f"stage 2 complete: {len(metrics)} steps, buckets {state.bucket_counts()}")
    return 0


def cmd_simenv_gen_tasks(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    seed = int(_resolve(args.seed, config, "seed", 0))
    count = int(_resolve(args.count, config, "n_tasks", 200))
    vocab = int(_resolve(args.vocab, config, "vocab", 12))
    tasks = generate_tasks(seed, count, vocab=vocab)
    write_jsonl(args.out, (t.to_record() for t in tasks))
    if args.policy_out:
        policy = warm_start(TabularPolicy.uniform(count, vocab), tasks)
        _write_policy(policy, args.policy_out)
    print(f"generated {len(tasks)} tasks")
    return 0


def cmd_simenv_run(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    merged = dict(config)
    merged["variant"] = args.variant
    if args.seed is not None:
        merged["seed"] = args.seed
    if args.n_tasks is not None:
        merged["n_tasks"] = args.n_tasks
    if args.stage1_steps is not None:
        merged["stage1_steps"] = args.stage1_steps
    if args.stage2_steps is not None:
        merged["stage2_steps"] = args.stage2_steps
    known = set(ExperimentConfig.__dataclass_fields__)
    exp_cfg = ExperimentConfig.from_dict({k: v for k, v in merged.items() if k in known})

    os.makedirs(args.out_dir, exist_ok=True)
    manifest = RunManifest(
        config=exp_cfg.to_dict(),
        code_version=__version__,
        input_digests={os.path.basename(args.config): sha256_file(args.config)} if args.config else {},
        started_at=RunManifest.now(),
    )
    result = run_experiment(exp_cfg)

    metrics_path = os.path.join(args.out_dir, "metrics.jsonl")
    records = [m.to_record() for m in result.steps]
    records += [{"kind": "pass_at_k", "k": k, "value": v} for k, v in sorted(result.pass_curve.items())]
    write_jsonl(metrics_path, records)
    write_jsonl(os.path.join(args.out_dir, "selections.jsonl"), result.selections)
    with open(os.path.join(args.out_dir, "summary.json"), "w", encoding="utf-8") as f:
        json.dump(
            {
                "variant": result.variant,
                "seed": result.seed,
                "n_steps": len(result.steps),
                "final_mean_reward": result.final_mean_reward,
                "pass_curve": {str(k): v for k, v in sorted(result.pass_curve.items())},
            },
            f,
            indent=2,
        )
        f.write("\n")
    manifest.finished_at = RunManifest.now()
    write_manifest(manifest, args.out_dir)
    print(f"{result.variant}: {len(result.steps)} steps, final mean reward {result.final_mean_reward:.4f}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    bundle = emit_report(args.metrics, args.out_dir)
    print(bundle.summary, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tablerl", description="Table-reasoning RL toolkit at desk scale")
    parser.add_argument("--version", action="version", version=f"tablerl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load a dataset file into canonical sample JSONL")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--format", choices=INGEST_FORMATS, default="canonical")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("reward-score", help="score trajectories against gold answers")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--weights", help="w_format,w_partial,w_complete")
    p.add_argument("--config")
    p.set_defaults(func=cmd_reward_score)

    p = sub.add_parser("select", help="consistency-confidence fusion selection per sample")
    p.add_argument("--rollouts", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--weights", help="w_consistency,w_avg_conf,w_max_conf")
    p.add_argument("--config")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("calibrate", help="grid-search fusion weights on labeled runs")
    p.add_argument("--runs", required=True)
    p.add_argument("--grid-step", type=float, default=0.05)
    p.add_argument("--out")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("partition", help="split tasks into easy/hard by pass@k1")
    p.add_argument("--tasks", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k1", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("stage1", help="fixed-step training on the easy partition")
    p.add_argument("--tasks", required=True)
    p.add_argument("--partition", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--policy-out", required=True)
    p.add_argument("--metrics-out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--rollouts", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_stage1)

    p = sub.add_parser("stage2", help="dynamic-filtering training on the hard partition")
    p.add_argument("--tasks", required=True)
    p.add_argument("--partition", required=True)
    p.add_argument("--policy")
    p.add_argument("--policy-out", required=True)
    p.add_argument("--metrics-out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--decay", type=float)
    p.add_argument("--review-period", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--append-metrics", action="store_true")
    p.add_argument("--config")
    p.set_defaults(func=cmd_stage2)

    p = sub.add_parser("simenv", help="toy environment commands")
    env_sub = p.add_subparsers(dest="simenv_command", required=True)

    q = env_sub.add_parser("gen-tasks", help="generate solver-verified toy tasks")
    q.add_argument("--seed", type=int)
    q.add_argument("--count", type=int)
    q.add_argument("--vocab", type=int)
    q.add_argument("--out", required=True)
    q.add_argument("--policy-out")
    q.add_argument("--config")
    q.set_defaults(func=cmd_simenv_gen_tasks)

    q = env_sub.add_parser("run", help="run a full training variant end to end")
    q.add_argument("--variant", required=True)
    q.add_argument("--out-dir", required=True)
    q.add_argument("--seed", type=int)
    q.add_argument("--n-tasks", type=int)
    q.add_argument("--stage1-steps", type=int)
    q.add_argument("--stage2-steps", type=int)
    q.add_argument("--config")
    q.set_defaults(func=cmd_simenv_run)

    p = sub.add_parser("report", help="emit plot-data files from metrics JSONL")
    p.add_argument("--metrics", nargs="+", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def cli_dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as e:
        print(json.dumps({"error": str(e)}), file=sys.stderr)
        return 1


def main(argv: Optional[Sequence[str]] = None) -> int:
    return cli_dispatch(argv)


if __name__ == "__main__":
    sys.exit(main())
