"""Command-line entry point.

Exit codes: 0 success, 2 configuration or input error, 3 numeric error,
1 anything else raised by the simulator.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import experiments as ex
from .config import RunConfig, config_hash, load_config, serialize_config
from .data import load_dataset
from .errors import CapabilityError, ConfigError, IngestionError, NumericError, ProtocolError
from .federation import WireLog, run
from .nn import init_params
from .oracle import OracleConfig
from .reporting import write_json, write_metrics, write_table_csv

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

# shortcut flag -> dotted config key
_SHORTCUTS = {
    "rounds": "rounds",
    "k": "estimator.k",
    "sigma": "estimator.sigma",
    "scheme": "estimator.scheme",
    "clients": "partition.clients",
    "partition": "partition.kind",
    "alpha": "partition.alpha",
    "mode": "mode.kind",
    "lr": "optimizer.lr",
    "ema_coeff": "ema_coeff",
    "precision": "precision",
    "seed": "seeds.master",
}


def _int_list(text: str) -> list:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_config_args(p: argparse.ArgumentParser):
    p.add_argument("config", help="TOML run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override any config key (TOML value syntax)")
    for flag, key in _SHORTCUTS.items():
        p.add_argument(f"--{flag.replace('_', '-')}", dest=f"opt_{flag}", default=None, metavar="VALUE", help=f"same as --set {key}=VALUE")
    p.add_argument("--output-dir", default=None, help="directory for result files (default: config output_dir)")


def _overrides(args) -> list:
    out = list(args.overrides)
    for flag, key in _SHORTCUTS.items():
        value = getattr(args, f"opt_{flag}")
        if value is not None:
            out.append(f"{key}={value}")
    return out


def _load(args) -> RunConfig:
    cfg = load_config(args.config, _overrides(args))
    if args.output_dir is not None:
        cfg = replace(cfg, output_dir=args.output_dir)
    return cfg


def _outdir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory: {exc}", key="output_dir") from None
    return out


def cmd_run(args) -> int:
    cfg = _load(args)
    train, test = load_dataset(cfg.dataset)
    log = WireLog() if args.wire_log else None
    rows = []
    for row in run(cfg, train, test, wire_log=log, wall_clock=not args.no_wall_clock):
        rows.append(row)
        if not args.quiet:
            print(f"round {row.round:4d}  test_acc {row.test_acc:.4f}  test_loss {row.test_loss:.4f}", file=sys.stderr)
    out = _outdir(cfg.output_dir)
    (out / "config.toml").write_text(serialize_config(cfg), encoding="utf-8")
    summary = write_metrics(rows, out, config_hash(cfg))
    if log is not None:
        (out / "uploads.bin").write_bytes(b"".join(log.uploads))
    print(f"final EMA test accuracy {summary.get('final_test_acc', float('nan')):.4f}; results in {out}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    cfg = _load(args)
    train, _ = load_dataset(cfg.dataset)
    idx = np.arange(min(args.batch_size, len(train)))
    params = init_params(cfg.model, cfg.seeds.init).values
    report = ex.estimate_vs_oracle(
        cfg.model,
        params,
        train.batch(idx),
        cfg.estimator,
        repeats=args.repeats,
        seed=cfg.seeds.master,
        oracle=OracleConfig(mode=args.oracle),
        precision=cfg.precision,
    )
    out = _outdir(cfg.output_dir)
    result = {**asdict(report), "config_hash": config_hash(cfg)}
    write_json(result, out / "estimate.json")
    print(f"cosine(single)={report.cosine_single:.4f} cosine(mean of {report.repeats})={report.cosine_mean:.4f}")
    return EXIT_OK


def cmd_covariance(args) -> int:
    study = ex.covariance_convergence_study(args.n, args.k_grid, args.trials, args.seed)
    out = _outdir(args.output_dir)
    write_table_csv(study.rows(), out / "covariance.csv", ["n", "k", "mean_spec_dev", "std_spec_dev"])
    write_json({"n": study.n, "k_grid": list(study.k_grid), "trials": args.trials, "seed": args.seed, "slope": study.slope}, out / "summary.json")
    for row in study.rows():
        print(f"K={row['k']:6d}  mean ||Sigma_hat - I||_2 = {row['mean_spec_dev']:.4f}")
    print(f"log-log slope {study.slope:.3f}")
    return EXIT_OK


def cmd_linear_check(args) -> int:
    report = ex.linear_identity_sweep(args.fixtures, args.sigma, args.trials, args.seed)
    out = _outdir(args.output_dir)
    result = {"fixtures": args.fixtures, "sigma": args.sigma, "trials": args.trials, "seed": args.seed, "max_deviation": asdict(report)}
    write_json(result, out / "summary.json")
    write_table_csv([{"quantity": k, "max_relative_deviation": v} for k, v in asdict(report).items()], out / "linear_check.csv")
    for k, v in asdict(report).items():
        print(f"{k:22s} {v:.3e}")
    return EXIT_OK


def _task(args) -> ex.ToyTask:
    task = ex.ToyTask()
    return replace(task, rounds=args.rounds, turns=args.turns)


def cmd_ablate(args) -> int:
    task = _task(args)
    if args.study == "k-trend":
        variants = ex.k_trend_variants(tuple(args.ks), backprop=True)
    else:
        variants = ex.ablation_variants(args.k)
    results = ex.compare_variants(task, variants, tuple(args.seeds))
    out = _outdir(args.output_dir)
    rows = [r.row() for r in results]
    write_table_csv(rows, out / "ablation.csv", ["variant", "seeds", "mean_acc", "std_acc", "tail_var"])
    write_json(
        {
            "study": args.study,
            "task": asdict(task),
            "seeds": list(args.seeds),
            "variants": [{**r.row(), "final_acc": list(r.final_acc), "tail_var_per_seed": list(r.tail_var)} for r in results],
        },
        out / "summary.json",
    )
    for r in rows:
        print(f"{r['variant']:28s} {100 * r['mean_acc']:6.2f} +- {100 * r['std_acc']:.2f}  tail var {r['tail_var']:.2e}")
    return EXIT_OK


def cmd_privacy(args) -> int:
    cfg = _load(args)
    train, test = load_dataset(cfg.dataset)
    final = {}
    if cfg.rounds > 0:
        for _ in run(cfg, train, test, wall_clock=False, on_state=lambda s: final.update(state=s)):
            pass
        params = final["state"].ema_params
    else:
        params = init_params(cfg.model, cfg.seeds.init).values
    idx = np.arange(min(args.batch_size, len(test)))
    real_report, noise_report = ex.privacy_distribution_experiment(
        cfg.model, params, test.batch(idx), k=args.perturbations, sigma=cfg.estimator.sigma, seed=cfg.seeds.master, bins=args.bins, precision=cfg.precision
    )
    out = _outdir(cfg.output_dir)
    write_json(
        {"config_hash": config_hash(cfg), "k": args.perturbations, "real": real_report.summary(), "noise": noise_report.summary(), "ks_statistic": real_report.ks_statistic},
        out / "privacy.json",
    )
    edges = real_report.bin_edges
    hist = [
        {"bin_lo": edges[i], "bin_hi": edges[i + 1], "real": real_report.counts[i], "noise": noise_report.counts[i]}
        for i in range(len(real_report.counts))
    ]
    write_table_csv(hist, out / "privacy_hist.csv", ["bin_lo", "bin_hi", "real", "noise"])
    for name, r in (("real", real_report), ("noise", noise_report)):
        print(f"{name:5s} n={r.sample_count} mean={r.mean:+.3e} std={r.std:.3e}")
    print(f"KS statistic {real_report.ks_statistic:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zofed", description="Forward-only federated training simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train with FedSGD or FedAvg")
    _add_config_args(p)
    p.add_argument("--wire-log", action="store_true", help="also write every encoded upload to uploads.bin")
    p.add_argument("--no-wall-clock", action="store_true", help="record wall_ms as 0 for byte-identical reruns")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("estimate", help="one gradient estimate at initialization versus the exact gradient")
    _add_config_args(p)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--oracle", choices=("fd", "analytic"), default="fd")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("covariance", help="empirical-covariance deviation versus K")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--k-grid", type=_int_list, default=[64, 256, 1024, 4096])
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output-dir", default="runs/covariance")
    p.set_defaults(func=cmd_covariance)

    p = sub.add_parser("linear-check", help="finite-difference identities on two-layer linear networks")
    p.add_argument("--fixtures", type=int, default=1000)
    p.add_argument("--sigma", type=float, default=1e-4)
    p.add_argument("--trials", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output-dir", default="runs/linear_check")
    p.set_defaults(func=cmd_linear_check)

    p = sub.add_parser("ablate", help="toy spirals training: guideline ablation or K trend")
    p.add_argument("--study", choices=("guidelines", "k-trend"), default="guidelines")
    p.add_argument("--k", type=int, default=100, help="central-scheme K for the guideline study")
    p.add_argument("--ks", type=_int_list, default=[100, 500], help="K values for the trend study")
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    p.add_argument("--rounds", type=int, default=ex.ToyTask.rounds)
    p.add_argument("--turns", type=float, default=ex.ToyTask.turns)
    p.add_argument("--output-dir", default="runs/ablation")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("privacy", help="loss-difference distributions on real versus noise inputs")
    _add_config_args(p)
    p.add_argument("--perturbations", type=int, default=500, help="number of perturbations K (independent of estimator.k)")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--bins", type=int, default=40)
    p.set_defaults(func=cmd_privacy)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, IngestionError, CapabilityError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ProtocolError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
