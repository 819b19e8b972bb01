"""Command-line driver: train, eval, ablate, sweep-h, report.

Run layout::

    <out>/manifest.json          resolved config, code identifier, seeds, artifacts
    <out>/config.yaml            resolved config snapshot
    <out>/seed_<s>/progress.csv  one row per training iteration
    <out>/seed_<s>/checkpoints.csv
    <out>/seed_<s>/model.json    final parameters and controller state
    <out>/seed_<s>/report.json   metrics over the evaluation checkpoints

Exit codes: 0 success, 2 configuration error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .approx import load_params, save_params
from .config import VARIANTS, ConfigError, ExperimentConfig, dump_config, load_config, override_config
from .metrics import EvalCheckpoint, MetricsReport, fmt, summarize, write_checkpoints_csv
from .trainer import IterationStats, NumericalError, Trainer

log = logging.getLogger("safecoord")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

PROGRESS_COLUMNS = [
    "iteration",
    "env_steps",
    "mean_return",
    "mean_cost",
    "episodes",
    "lambda",
    "tau",
    "write_rate",
    "context_occupancy",
    "hazard_event_rate",
    "hazard_label_rate",
    "wbce",
    "clip_loss",
    "critic_reward_loss",
    "critic_cost_loss",
    "entropy",
    "approx_kl",
    "clip_frac",
    "epochs_run",
    "status",
]
ABLATION_VARIANTS = ("co2po", "no-blackboard", "always-write", "no-hazard-loss")
ABLATION_COLUMNS = ["variant", "seed", "r_final", "c_final", "c_peak", "r_feas", "time_to_feasible", "feasible"]
SWEEP_COLUMNS = ["horizon", "seed", "r_final", "c_final", "feasible", "hazard_label_rate"]


def progress_row(s: IterationStats, status: str = "ok") -> dict[str, str]:
    lb = s.losses
    values = [
        s.iteration,
        s.env_steps,
        s.mean_return,
        s.mean_cost,
        s.episodes,
        s.lam,
        s.tau,
        s.write_rate,
        s.occupancy,
        s.event_rate,
        s.label_rate,
        lb.wbce,
        lb.clip,
        lb.critic_r,
        lb.critic_c,
        lb.entropy,
        lb.approx_kl,
        lb.clip_frac,
        s.epochs_run,
    ]
    row = {k: fmt(v) for k, v in zip(PROGRESS_COLUMNS, values)}
    row["status"] = status
    return row


def abort_row(trainer: Trainer, err: Exception) -> dict[str, str]:
    row = {k: "nan" for k in PROGRESS_COLUMNS}
    row.update(
        iteration=fmt(trainer.iteration + 1),
        env_steps=fmt(trainer.env_steps),
        **{"lambda": fmt(trainer.dual.lam)},
        tau=fmt(trainer.threshold.tau),
        status="nonfinite",
    )
    return row


def code_identifier() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def seed_list(cfg: ExperimentConfig, seed: int | None, n_seeds: int | None) -> list[int]:
    base = cfg.seed if seed is None else seed
    n = cfg.seeds if n_seeds is None else n_seeds
    if n < 1:
        raise ConfigError("seeds: must be at least 1")
    return [base + i for i in range(n)]


def save_model(path: Path, trainer: Trainer) -> None:
    meta = {
        "seed": trainer.seed,
        "env_steps": trainer.env_steps,
        "iteration": trainer.iteration,
        "lambda": trainer.dual.lam,
        "tau": trainer.threshold.tau,
        "rate_ema": trainer.threshold.rate_ema,
    }
    save_params(path, trainer.model.named_params(), meta)


def restore_model(trainer: Trainer, path: Path) -> dict:
    values, meta = load_params(path)
    trainer.model.load_named(values)
    trainer.threshold = replace(trainer.threshold, tau=float(meta["tau"]), rate_ema=float(meta["rate_ema"]))
    trainer.dual = replace(trainer.dual, lam=float(meta["lambda"]))
    trainer.env_steps = int(meta["env_steps"])
    return meta


def train_seed(cfg: ExperimentConfig, seed: int, seed_dir: Path) -> MetricsReport:
    """Train one seed, streaming progress rows; raises NumericalError after logging the abort row."""
    seed_dir.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(cfg, seed=seed)
    with open(seed_dir / "progress.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=PROGRESS_COLUMNS, lineterminator="\n")
        w.writeheader()

        def on_iteration(s: IterationStats) -> None:
            w.writerow(progress_row(s))
            log.info("seed %d it %d steps %d R %s C %s lambda %.4f tau %.3f", seed, s.iteration, s.env_steps, fmt(s.mean_return), fmt(s.mean_cost), s.lam, s.tau)

        def on_checkpoint(ck: EvalCheckpoint) -> None:
            log.info("seed %d eval at %d: R %.3f C %.3f", seed, ck.step, ck.mean_return, ck.mean_cost)

        try:
            trainer.train(on_iteration, on_checkpoint)
        except NumericalError as err:
            w.writerow(abort_row(trainer, err))
            write_checkpoints_csv(seed_dir / "checkpoints.csv", trainer.checkpoints)
            raise
    write_checkpoints_csv(seed_dir / "checkpoints.csv", trainer.checkpoints)
    save_model(seed_dir / "model.json", trainer)
    report = MetricsReport.from_checkpoints(trainer.checkpoints, cfg.dual.cost_budget)
    report.write_json(seed_dir / "report.json")
    return report


def run_training(cfg: ExperimentConfig, seeds: list[int], out: Path) -> dict[int, MetricsReport]:
    cfg = cfg.resolved()
    out.mkdir(parents=True, exist_ok=True)
    artifacts = ["config.yaml"]
    for s in seeds:
        artifacts += [f"seed_{s}/{name}" for name in ("progress.csv", "checkpoints.csv", "model.json", "report.json")]
    manifest = {
        "config": cfg.to_dict(),
        "code": code_identifier(),
        "seeds": seeds,
        "artifacts": artifacts,
        "complete": False,
    }
    (out / "config.yaml").write_text(dump_config(cfg), encoding="utf-8")
    write_manifest(out, manifest)
    reports = {s: train_seed(cfg, s, out / f"seed_{s}") for s in seeds}
    manifest["complete"] = True
    write_manifest(out, manifest)
    return reports


def write_manifest(out: Path, manifest: dict) -> None:
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_manifest(run_dir: Path) -> dict:
    path = run_dir / "manifest.json"
    if not path.exists():
        raise ConfigError(f"{run_dir} has no manifest.json")
    return json.loads(path.read_text(encoding="utf-8"))


def config_from_manifest(run_dir: Path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(read_manifest(run_dir)["config"])


def _write_rows(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: fmt(row[k]) if not isinstance(row[k], str) else row[k] for k in columns})


def mean_label_rate(progress_csv: Path) -> float:
    with open(progress_csv, newline="", encoding="utf-8") as fh:
        rates = [float(r["hazard_label_rate"]) for r in csv.DictReader(fh)]
    return float(np.mean(rates)) if rates else float("nan")


# -- verbs --------------------------------------------------------------------


def _base_config(args) -> ExperimentConfig:
    cfg = load_config(args.config, args.override)
    cfg.validate()
    return cfg


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    return Path(args.out if args.out is not None else cfg.out_dir)


def cmd_train(args) -> int:
    cfg = _base_config(args)
    seeds = seed_list(cfg, args.seed, args.seeds)
    out = _out_dir(args, cfg)
    reports = run_training(cfg, seeds, out)
    for s, r in reports.items():
        print(f"seed {s}: R_final {fmt(r.r_final)} C_final {fmt(r.c_final)} R_feas {fmt(r.r_feas) or '--'}")
    print(f"run written to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    cfg = config_from_manifest(run_dir)
    if args.override:
        cfg = override_config(cfg, args.override)
        cfg.validate()
    if args.checkpoint is not None:
        ckpt = Path(args.checkpoint)
    else:
        seeds = read_manifest(run_dir)["seeds"]
        seed = args.seed if args.seed is not None else seeds[0]
        ckpt = run_dir / f"seed_{seed}" / "model.json"
    if not ckpt.exists():
        raise ConfigError(f"checkpoint {ckpt} does not exist")
    try:
        _, meta = load_params(ckpt)
    except ValueError as err:
        raise ConfigError(f"unreadable checkpoint {ckpt}: {err}") from err
    eval_seed = int(meta["seed"]) if args.seed is None else args.seed
    trainer = Trainer(cfg, seed=eval_seed)
    restore_model(trainer, ckpt)
    episodes = trainer.evaluate(args.episodes)
    ck = EvalCheckpoint.from_episodes(trainer.env_steps, episodes, cfg.dual.cost_budget)
    report = MetricsReport.from_checkpoints([ck], cfg.dual.cost_budget)
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if args.report is not None:
        Path(args.report).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def _report_row(r: MetricsReport) -> dict:
    return {
        "r_final": r.r_final,
        "c_final": r.c_final,
        "c_peak": r.c_peak,
        "r_feas": r.r_feas,
        "time_to_feasible": r.time_to_feasible,
        "feasible": r.r_feas is not None,
    }


def cmd_ablate(args) -> int:
    base = _base_config(args)
    seeds = seed_list(base, args.seed, args.seeds)
    out = _out_dir(args, base)
    rows = []
    for variant in args.variants:
        cfg = copy.deepcopy(base)
        cfg.variant = variant
        reports = run_training(cfg, seeds, out / variant)
        rows += [{"variant": variant, "seed": s, **_report_row(r)} for s, r in reports.items()]
    _write_rows(out / "summary.csv", ABLATION_COLUMNS, rows)
    print(f"ablation summary written to {out / 'summary.csv'}")
    return EXIT_OK


def cmd_sweep_h(args) -> int:
    base = _base_config(args)
    if any(h < 0 for h in args.horizons):
        raise ConfigError("hazard.horizon: sweep values must be nonnegative")
    seeds = seed_list(base, args.seed, args.seeds)
    out = _out_dir(args, base)
    rows = []
    for h in args.horizons:
        cfg = copy.deepcopy(base)
        cfg.hazard.horizon = h
        run_dir = out / f"H{h}"
        reports = run_training(cfg, seeds, run_dir)
        for s, r in reports.items():
            rows.append(
                {
                    "horizon": h,
                    "seed": s,
                    "r_final": r.r_final,
                    "c_final": r.c_final,
                    "feasible": r.c_final <= cfg.dual.cost_budget,
                    "hazard_label_rate": mean_label_rate(run_dir / f"seed_{s}" / "progress.csv"),
                }
            )
    _write_rows(out / "summary.csv", SWEEP_COLUMNS, rows)
    print(f"sweep summary written to {out / 'summary.csv'}")
    return EXIT_OK


def cmd_report(args) -> int:
    reports = []
    for run in args.runs:
        run_dir = Path(run)
        seeds = read_manifest(run_dir)["seeds"]
        for s in seeds:
            path = run_dir / f"seed_{s}" / "report.json"
            if not path.exists():
                raise ConfigError(f"missing report {path}")
            reports.append(MetricsReport.read_json(path))
    summary = summarize(reports)
    text = json.dumps(summary, indent=2, sort_keys=True)
    if args.out is not None:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    for name, s in summary.items():
        if s["mean"] is None:
            print(f"{name:18s} --   ({s['present']}/{s['total']})")
        else:
            print(f"{name:18s} {s['mean']:.4g} +/- {s['std']:.3g}   ({s['present']}/{s['total']})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="safecoord", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-iteration progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--seed", type=int, help="first seed (default: config seed)")
        p.add_argument("--seeds", type=int, help="number of consecutive seeds (default: config seeds)")
        p.add_argument("--out", help="output directory (default: config out_dir)")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="dotted config override, repeatable")

    p = sub.add_parser("train", help="train one config across seeds")
    run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved model deterministically")
    p.add_argument("--run", required=True, help="run directory written by train")
    p.add_argument("--checkpoint", help="model file (default: final model of the chosen seed)")
    p.add_argument("--seed", type=int, help="seed directory and evaluation seed")
    p.add_argument("--episodes", type=int, help="number of evaluation episodes")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--report", help="write the report JSON here as well")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train the full method and its ablations")
    run_flags(p)
    p.add_argument("--variants", nargs="+", default=list(ABLATION_VARIANTS), choices=VARIANTS)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-h", help="train across hazard lookahead horizons")
    run_flags(p)
    p.add_argument("--horizons", type=int, nargs="+", default=[0, 3, 5, 8])
    p.set_defaults(func=cmd_sweep_h)

    p = sub.add_parser("report", help="merge per-seed reports into mean and std")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", help="write the summary JSON here")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, yaml.YAMLError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as err:
        print(f"numerical abort: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
