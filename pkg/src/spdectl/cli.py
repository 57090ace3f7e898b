"""Command-line interface.

Subcommands (each reads one JSON config; see README for the schema):

    generate         sample a trajectory dataset, write <out>/dataset.spdd
    train-surrogate  train a forward model on a dataset, write model.spdm
    train-policy     train the policy through a trained surrogate
    control          run closed-loop tracking tasks with a policy checkpoint
    bench            compare methods on tracking tasks, emit tables
    ablate           noise-scale ablations (control or modeling protocol)

Common flags: --config <path>, --out <dir>, --seed <int> (overrides config
seeds), --threads <n>.  Environment variables SPDECTL_<FLAG> provide
defaults for the flags.  Exit codes: 2 config/schema violation, 1 runtime
failure, 0 success.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import bench as bench_mod
from . import config as cfg_mod
from . import storage
from .config import ConfigError
from .control import PolicyNet, train_policy
from .solver import generate_dataset
from .surrogate import SurrogateModel, evaluate_model, train


def _env_default(name, fallback=None):
    return os.environ.get(f"SPDECTL_{name.upper()}", fallback)


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spdectl",
                                     description="stochastic PDE control workbench")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate", "train-surrogate", "train-policy", "control",
                 "bench", "ablate"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", default=_env_default("out", "runs/latest"),
                       help="output directory")
        p.add_argument("--seed", type=int,
                       default=_env_default("seed"), help="override config seeds")
        p.add_argument("--threads", type=int,
                       default=int(_env_default("threads", "1")))
    return parser


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_loss_curve(path, losses):
    with open(path, "w") as fh:
        fh.write("step,loss\n")
        for i, v in enumerate(losses):
            fh.write(f"{i},{v:.12g}\n")


def cmd_generate(args, cfg) -> int:
    problem = cfg_mod.problem_from_config(cfg)
    sampler = cfg_mod.sampler_from_config(cfg)
    ds_cfg = cfg_mod.dataset_section(cfg)
    seed = args.seed if args.seed is not None else ds_cfg["seed"]
    dataset = generate_dataset(problem, ds_cfg["count"], seed, sampler,
                               split=ds_cfg["split"], threads=args.threads)
    out = _outdir(args) / "dataset.spdd"
    storage.write_dataset(dataset, out)
    print(f"wrote {out} ({len(dataset)} trajectories, hash {dataset.config_hash[:12]})")
    return 0


def cmd_train_surrogate(args, cfg) -> int:
    sur_cfg = cfg_mod.surrogate_from_config(cfg)
    train_cfg = cfg_mod.train_from_config(cfg)
    dataset = storage.read_dataset(cfg_mod._get(cfg, "data", str))
    if args.seed is not None:
        sur_cfg.seed = args.seed
        train_cfg.seed = args.seed
    model = SurrogateModel(dataset.problem, sur_cfg)
    out = _outdir(args)
    cache = str(out / "features.spdf") if sur_cfg.use_features else None
    result = train(model, dataset, train_cfg, threads=args.threads,
                   feature_cache=cache)
    model_path = out / f"{sur_cfg.name()}.spdm"
    storage.save_surrogate(model, model_path)
    _write_loss_curve(out / f"{sur_cfg.name()}_loss.csv", result.epoch_losses)
    test_path = cfg_mod._get(cfg, "test_data", str, None)
    if test_path:
        report = evaluate_model(model, storage.read_dataset(test_path),
                                threads=args.threads)
        print(f"{sur_cfg.name()} test: {report.row()}")
    print(f"wrote {model_path} (final loss {result.epoch_losses[-1]:.6g}, "
          f"features {result.feature_seconds:.1f}s, train {result.train_seconds:.1f}s)")
    return 0


def cmd_train_policy(args, cfg) -> int:
    dataset = storage.read_dataset(cfg_mod._get(cfg, "data", str))
    surrogate = storage.load_surrogate(cfg_mod._get(cfg, "surrogate", str))
    policy_cfg = cfg_mod.policy_from_config(cfg)
    if args.seed is not None:
        policy_cfg.seed = args.seed
    policy = PolicyNet(surrogate.problem, hidden=policy_cfg.hidden,
                       seed=policy_cfg.seed)
    sampler = bench_mod.task_sampler_from_dataset(dataset)
    result = train_policy(policy, surrogate, sampler, policy_cfg)
    out = _outdir(args)
    policy_path = out / "policy.spdm"
    storage.save_policy(policy, policy_path, policy_cfg)
    _write_loss_curve(out / "policy_loss.csv", result.losses)
    print(f"wrote {policy_path} (loss {result.losses[0]:.4g} -> "
          f"{result.losses[-1]:.4g}, {result.seconds:.1f}s)")
    return 0


def _load_entries(cfg, where="models."):
    entries = []
    missing = []
    for item in cfg_mod._get(cfg, "models", list):
        name = item.get("name", "model")
        try:
            surrogate = storage.load_surrogate(item["surrogate"])
            policy = None
            if item.get("policy"):
                policy, _ = storage.load_policy(item["policy"])
            entries.append(bench_mod.BenchEntry(name=name, surrogate=surrogate,
                                                policy=policy))
        except FileNotFoundError as exc:
            missing.append(f"{name}: {exc.filename}")
    return entries, missing


def cmd_control(args, cfg) -> int:
    dataset = storage.read_dataset(cfg_mod._get(cfg, "data", str))
    policy, _ = storage.load_policy(cfg_mod._get(cfg, "policy", str))
    b = cfg_mod.bench_section(cfg)
    seed = args.seed if args.seed is not None else b["seed"]
    tasks = bench_mod.make_tasks(dataset, count=b["tasks"], seed=seed,
                                 alpha=b["alpha"], n_noise=b["n_noise"],
                                 sigma=b["sigma"], jitter=b["jitter"])
    out = _outdir(args)
    report = bench_mod.MetricsReport()
    from .control import run_closed_loop
    with open(out / "control_events.jsonl", "w") as log:
        for task in tasks:
            env = bench_mod._env_problem(dataset.problem, task)
            result = run_closed_loop(policy, env, task, task.env_seed, log_file=log)
            report.entries.append(bench_mod.score(result.states, result.forcing,
                                                  task, env))
    bench_mod.write_csv(out / "control_metrics.csv",
                        [{"task": i, "e": e.e, "e_track": e.e_track,
                          "e_energy": e.e_energy}
                         for i, e in enumerate(report.entries)],
                        ("task", "e", "e_track", "e_energy"))
    print(f"closed loop over {len(tasks)} tasks: e={report.e:.4f} "
          f"(track {report.e_track:.4f}, energy {report.e_energy:.4f})")
    return 0


def cmd_bench(args, cfg) -> int:
    dataset = storage.read_dataset(cfg_mod._get(cfg, "data", str))
    entries, missing = _load_entries(cfg)
    for item in missing:
        print(f"warning: skipping {item}", file=sys.stderr)
    if not entries:
        print("error: no model checkpoints could be loaded", file=sys.stderr)
        return 1
    b = cfg_mod.bench_section(cfg)
    seed = args.seed if args.seed is not None else b["seed"]
    tasks = bench_mod.make_tasks(dataset, count=b["tasks"], seed=seed,
                                 alpha=b["alpha"], n_noise=b["n_noise"],
                                 sigma=b["sigma"], jitter=b["jitter"])
    rows = bench_mod.run_benchmark(entries, dataset.problem, tasks,
                                   open_loop_iterations=b["open_loop_iterations"],
                                   open_loop_lr=b["open_loop_lr"], seed=seed)
    out = _outdir(args)
    metrics = bench_mod.metric_records(rows)
    bench_mod.write_csv(out / "bench_metrics.csv", metrics,
                        bench_mod.METRIC_COLUMNS)
    timing = bench_mod.timing_records(rows)
    bench_mod.write_csv(out / "bench_timing.csv", timing,
                        ("model", "method", "mean_seconds", "feature_seconds"))
    print(bench_mod.format_table(metrics, bench_mod.METRIC_COLUMNS))
    print()
    print(bench_mod.format_table(timing,
                                 ("model", "method", "mean_seconds",
                                  "feature_seconds")))
    return 0


def cmd_ablate(args, cfg) -> int:
    mode = cfg_mod._get(cfg, "ablation.mode", str, "control")
    out = _outdir(args)
    if mode == "control":
        dataset = storage.read_dataset(cfg_mod._get(cfg, "data", str))
        entries, missing = _load_entries(cfg)
        for item in missing:
            print(f"warning: skipping {item}", file=sys.stderr)
        if not entries:
            print("error: no model checkpoints could be loaded", file=sys.stderr)
            return 1
        b = cfg_mod.bench_section(cfg)
        sigmas = cfg_mod._get(cfg, "ablation.sigmas", list, [0.05, 1.0])
        seed = args.seed if args.seed is not None else b["seed"]
        rows = bench_mod.control_noise_ablation(
            entries, dataset, sigmas, count=b["tasks"], seed=seed,
            alpha=b["alpha"], n_noise=b["n_noise"],
            open_loop_iterations=b["open_loop_iterations"],
            open_loop_lr=b["open_loop_lr"])
        records = [{"sigma": s, **rec} for s, row in rows
                   for rec in [bench_mod.metric_records([row])[0]]]
        columns = ("sigma",) + bench_mod.METRIC_COLUMNS
        bench_mod.write_csv(out / "ablation_control.csv", records, columns)
        print(bench_mod.format_table(records, columns))
        return 0
    if mode == "modeling":
        from .ablation import modeling_noise_ablation
        records = modeling_noise_ablation(cfg, args)
        columns = ("sigma", "model", "seed", "u1_onestep", "prediction")
        bench_mod.write_csv(out / "ablation_modeling.csv", records, columns)
        print(bench_mod.format_table(records, columns))
        return 0
    raise ConfigError(f"ablation.mode: unknown mode {mode!r}")


_COMMANDS = {
    "generate": cmd_generate,
    "train-surrogate": cmd_train_surrogate,
    "train-policy": cmd_train_policy,
    "control": cmd_control,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = cfg_mod.load_config(args.config)
        return _COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: report and exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
