"""Command-line entry point: ``pbcrl {pretrain,run,verify-theory,analyze}``.

Exit codes: 0 success, 1 invalid configuration, 2 runtime failure,
3 a theory check failed.  Failures print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, config_hash, parse_config, resolved_config_dump
from .metrics import assemble_ablation_report, write_table
from .preferences import save_dataset
from .theory import run_all
from .training import ExperimentReport, effective_cost_config, prepare_offline, run_pbcrl

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_THEORY = 0, 1, 2, 3

log = logging.getLogger("pbcrl")


class UsageError(ValueError):
    """Bad command-line input that is not a config problem (e.g. missing report files)."""


def _fail(code: int, kind: str, message: str, **extra) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code, **extra}), file=sys.stderr)
    return code


def load_config(args) -> ExperimentConfig:
    """File (or defaults), then PBCRL_OUT / PBCRL_SEED, then command-line flags."""
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.out is not None:
        cfg.out_dir = args.out
    if args.ablation is not None:
        cfg.ablation = args.ablation
    errs = cfg.validate()
    if errs:
        raise ConfigError(errs)
    return cfg


def write_resolved(cfg: ExperimentConfig, directory: Path) -> str:
    directory.mkdir(parents=True, exist_ok=True)
    h = config_hash(cfg)
    (directory / "config.json").write_text(resolved_config_dump(cfg))
    (directory / "config.sha256").write_text(h + "\n")
    return h


def aggregate_summaries(reports) -> dict:
    """Mean and std over seeds of every numeric summary entry."""
    keys = sorted({k for r in reports for k, v in r.summary.items() if isinstance(v, (int, float))})
    out = {"seeds": [r.seed for r in reports], "n_seeds": len(reports)}
    for k in keys:
        vals = np.array([r.summary[k] for r in reports if k in r.summary], dtype=np.float64)
        out[k] = {"mean": float(vals.mean()), "std": float(vals.std())}
    out["flags"] = sorted({f for r in reports for f in r.flags})
    return out


def cmd_pretrain(cfg: ExperimentConfig) -> int:
    root = Path(cfg.out_dir)
    h = write_resolved(cfg, root)
    for seed in cfg.seeds:
        env, dataset, model, _, history = prepare_offline(cfg, seed)
        d = root / f"seed_{seed}"
        d.mkdir(parents=True, exist_ok=True)
        model.save(d / "cost_model", {"seed": seed, "config_hash": h})
        history.write_csv(d / "pretrain.csv")
        save_dataset(dataset, d / "dataset", env, seed)
        info = {"seed": seed, "best_epoch": history.best_epoch, "holdout_accuracy": history.best_accuracy,
                "epochs_run": len(history.rows), "delta": model.delta,
                "cost_config": {k: v for k, v in effective_cost_config(cfg).__dict__.items() if k != "seed"}}
        (d / "pretrain.json").write_text(json.dumps(info, indent=2, sort_keys=True, default=list))
        log.info("seed %d: holdout accuracy %.3f", seed, history.best_accuracy)
    return EXIT_OK


def cmd_run(cfg: ExperimentConfig) -> int:
    root = Path(cfg.out_dir)
    write_resolved(cfg, root)
    reports = []
    for seed in cfg.seeds:
        d = root / f"seed_{seed}"
        rep = run_pbcrl(cfg, seed, checkpoint_dir=d / "checkpoints")
        rep.save(d)
        reports.append(rep)
        log.info("seed %d: final cost %.3f (d = %.2f)", seed, rep.summary.get("final_true_cost", float("nan")),
                 rep.threshold)
    agg = aggregate_summaries(reports)
    agg["config_hash"] = config_hash(cfg)
    (root / "aggregate.json").write_text(json.dumps(agg, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_verify_theory(out_dir=None, seed: int = 0) -> int:
    verdicts = run_all(seed)
    payload = {"passed": all(v.passed for v in verdicts), "verdicts": [v.to_dict() for v in verdicts]}
    text = json.dumps(payload, indent=2, sort_keys=True)
    print(text)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "theory.json").write_text(text)
    return EXIT_OK if payload["passed"] else EXIT_THEORY


def _run_sort_key(cfg: dict, label: str):
    cm = cfg.get("cost_model", {})
    delta = 0.0 if cfg.get("ablation") == "plain_bt" else cm.get("delta", 0.0)
    return (delta, cm.get("zeta", 0.0), cfg.get("preferences", {}).get("noise_rate", 0.0), label)


def cmd_analyze(paths, out_dir) -> int:
    """One table row per run directory, ordered by dead zone, then SNR weight, then noise."""
    runs, keys = {}, {}
    for p in paths:
        p = Path(p)
        seed_dirs = sorted(q for q in p.glob("seed_*") if (q / "summary.json").exists())
        if not seed_dirs:
            raise UsageError(f"no seed reports under {p}")
        cfg = json.loads((p / "config.json").read_text()) if (p / "config.json").exists() else {}
        label = p.name
        if label in runs:
            label = str(p)
        runs[label] = [ExperimentReport.load(q) for q in seed_dirs]
        keys[label] = _run_sort_key(cfg, label)
    order = sorted(runs, key=lambda k: keys[k])
    rows = assemble_ablation_report(runs, order)
    for row in rows:
        row["delta"], row["zeta"], row["noise_rate"] = keys[row["config"]][:3]
    csv_path, json_path = write_table(rows, out_dir)
    print(json.dumps({"table": str(csv_path), "json": str(json_path), "rows": len(rows)}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pbcrl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("pretrain", "fit the offline cost model for every seed"),
                        ("run", "full training loop for every seed")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config file (defaults when omitted)")
        p.add_argument("--seed", type=int, help="run this single seed instead of the configured list")
        p.add_argument("--out", help="output directory (overrides the config and PBCRL_OUT)")
        p.add_argument("--ablation", choices=("none", "plain_bt", "offline_only"))
    p = sub.add_parser("verify-theory", help="run the analytical checks; exit 3 if any fails")
    p.add_argument("--out", help="also write theory.json here")
    p.add_argument("--seed", type=int, default=0)
    p = sub.add_parser("analyze", help="assemble an ablation table from run directories")
    p.add_argument("runs", nargs="+", help="run directories written by 'pbcrl run'")
    p.add_argument("--out", default="analysis")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        if args.command == "verify-theory":
            return cmd_verify_theory(args.out, args.seed)
        if args.command == "analyze":
            return cmd_analyze(args.runs, args.out)
        cfg = load_config(args)
        return cmd_pretrain(cfg) if args.command == "pretrain" else cmd_run(cfg)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", "invalid configuration", errors=exc.errors)
    except (UsageError, FileNotFoundError, json.JSONDecodeError) as exc:
        return _fail(EXIT_RUNTIME, type(exc).__name__, str(exc))
    except Exception as exc:  # noqa: BLE001 - any training failure maps to the runtime exit code
        return _fail(EXIT_RUNTIME, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
