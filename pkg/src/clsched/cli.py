"""Command-line entry point: ``clsched <command> [--config FILE] [--set KEY=VALUE ...]``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
failure (failure budget exceeded, diverged training).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from clsched.dataset import (
    generate_training_samples,
    read_samples,
    split_dataset,
    write_samples,
    write_utias,
)
from clsched.errors import ConfigError, DataError, NumericalError, SchemaError
from clsched.experiment import (
    POLICIES,
    ExperimentConfig,
    compare_policies,
    config_from_dict,
    emit_report,
    run_simulation,
    scenario_logs,
    write_comparison,
    write_csv,
)
from clsched.surrogate import load_model, save_model, train

log = logging.getLogger("clsched")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    # bad invocations are configuration errors, not data errors (argparse's default 2)
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _set_path(doc: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = doc
    for key in keys[:-1]:
        child = node.get(key)
        if child is None:
            child = node[key] = {}
        if not isinstance(child, dict):
            raise ConfigError(f"cannot set {dotted}: {key} is not a section")
        node = child
    node[keys[-1]] = value


def build_config(args, extra: dict[str, object] | None = None) -> ExperimentConfig:
    """Config file, then ``--set`` overrides, then the command's own flags."""
    doc: dict = {}
    if args.config:
        try:
            doc = yaml.safe_load(Path(args.config).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a mapping of sections")
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        _set_path(doc, key.strip(), yaml.safe_load(raw))
    for key, value in (extra or {}).items():
        if value is not None:
            _set_path(doc, key, value)
    return config_from_dict(doc)


def _pearson(a, b) -> float:
    return float(np.corrcoef(np.asarray(a, float), np.asarray(b, float))[0, 1])


# --- commands -------------------------------------------------------------------

def cmd_ingest(args) -> int:
    cfg = build_config(args, {"dataset.path": args.data,
                              "dataset.source": "utias" if args.data else None})
    seed = cfg.run.seeds[0] if args.seed is None else args.seed
    logs = scenario_logs(cfg, seed)
    for lg in logs:
        print(f"robot {lg.robot_id}: {len(lg.odometry)} odometry, {len(lg.measurements)} "
              f"inter-robot measurements, {len(lg.groundtruth)} ground-truth rows")
    if args.write:
        write_utias(logs, args.write)
        print(f"wrote {args.write}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = build_config(args, {"model.samples": args.count, "model.data_seed": args.seed})
    m = cfg.model
    stats: dict = {}
    samples = generate_training_samples(scenario_logs(cfg, m.data_seed), m.samples, m.error_model(),
                                        seed=m.data_seed, dt=cfg.dataset.dt,
                                        noise=cfg.noise.sensor_noise(), stats=stats)
    if not samples:
        raise DataError("no training samples could be generated from the logs")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_samples(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out} ({stats.get('skipped', 0)} draws skipped)")
    return EXIT_OK


def split_sizes(n: int, fractions) -> tuple[int, int, int]:
    total = float(sum(fractions))
    n_dev = int(n * fractions[1] / total)
    n_test = int(n * fractions[2] / total)
    return n - n_dev - n_test, n_dev, n_test


def cmd_train(args) -> int:
    cfg = build_config(args, {"model.path": args.out, "model.train.seed": args.seed,
                              "model.train.epochs": args.epochs,
                              "model.train.learning_rate": args.lr})
    if not cfg.model.path:
        raise ConfigError("no output path: pass --out or set model.path")
    tc = cfg.model.train_config()
    samples = read_samples(args.data)
    n_train, n_dev, n_test = split_sizes(len(samples), cfg.model.split)
    if n_train < 1:
        raise DataError(f"{args.data}: not enough samples to train")
    tr, dev, test = split_dataset(samples, n_train, n_dev, n_test, seed=tc.seed)
    model, hist = train(tr, tc, dev or None)
    Path(cfg.model.path).parent.mkdir(parents=True, exist_ok=True)
    save_model(model, cfg.model.path)
    hist_path = Path(cfg.model.path).with_suffix(".losses.csv")
    rows = [(str(e + 1), hist.train[e], hist.dev[e] if hist.dev else float("nan"))
            for e in range(len(hist.train))]
    write_csv(hist_path, ["epoch", "train_mse", "dev_mse"], rows)
    print(f"trained on {len(tr)} samples; final train MSE {hist.train[-1]:.6g}"
          + (f", dev MSE {hist.dev[-1]:.6g}" if hist.dev else ""))
    if test:
        X = np.array([s.x for s in test])
        Y = np.array([s.y for s in test])
        y_hat = model.predict_raw(X).ravel()
        print(f"test: {len(test)} samples, MSE {np.mean((y_hat - Y) ** 2):.6g}, "
              f"Pearson {_pearson(y_hat, Y):.4f}")
    print(f"model written to {cfg.model.path}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = build_config(args, {"scheduler.policy": args.policy, "scheduler.q": args.q,
                              "model.path": args.model, "run.output_dir": args.out})
    seed = cfg.run.seeds[0] if args.seed is None else args.seed
    report = run_simulation(cfg, seed)
    emit_report(report, cfg.run.output_dir)
    print(f"policy {report.policy}, seed {seed}: average RMSE {report.average_rmse:.4f} m, "
          f"final {report.rmse[-1]:.4f} m, {report.failures} numerical failures; "
          f"outputs in {cfg.run.output_dir}")
    return EXIT_OK


def cmd_compare(args) -> int:
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    bad = [p for p in policies if p not in POLICIES]
    if bad or not policies:
        raise ConfigError(f"unknown policies {bad}; choose from {POLICIES}")
    extra = {"model.path": args.model, "run.output_dir": args.out}
    cfg = build_config(args, extra)
    seeds = list(range(args.seed, args.seed + args.n_seeds))
    model = None
    if "dnn" in policies:
        if not cfg.model.path:
            raise ConfigError("the dnn policy needs a model: pass --model or set model.path")
        model = load_model(cfg.model.path)
    results = compare_policies(cfg, policies, seeds, model=model)
    path = write_comparison(results, seeds, cfg.run.output_dir)
    for p, reps in results.items():
        vals = np.array([r.average_rmse for r in reps])
        print(f"{p:>7}: mean RMSE {vals.mean():.4f} m (sd {vals.std():.4f}) over {len(seeds)} seeds")
    if "random" in results:
        rnd = np.array([r.average_rmse for r in results["random"]])
        for p in policies:
            if p != "random":
                wins = np.mean(np.array([r.average_rmse for r in results[p]]) < rnd)
                print(f"{p} beats random in {100 * wins:.0f}% of seeds")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_predict_scatter(args) -> int:
    cfg = build_config(args, {"model.path": args.model, "run.output_dir": args.out,
                              "scheduler.policy": "dnn"})
    if not cfg.model.path:
        raise ConfigError("pass --model or set model.path")
    model = load_model(cfg.model.path)
    out = Path(cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.data:
        samples = read_samples(args.data)
        X = np.array([s.x for s in samples])
        pairs = list(zip(model.predict_raw(X).ravel(), (s.y for s in samples)))
    else:
        seed = cfg.run.seeds[0] if args.seed is None else args.seed
        pairs = run_simulation(cfg, seed, model=model).scatter_prediction
    write_csv(out / "scatter_prediction.csv", ["y_hat", "y"], pairs)
    if len(pairs) > 1:
        y_hat, y = zip(*pairs)
        print(f"{len(pairs)} pairs, Pearson {_pearson(y_hat, y):.4f}")
    print(f"wrote {out / 'scatter_prediction.csv'}")
    return EXIT_OK


# --- parser ---------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config with sections dataset/noise/scheduler/model/run")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set scheduler.q=3 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="clsched", description="Cooperative localization measurement scheduling.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", parents=[common], help="parse and validate a dataset")
    p.add_argument("--data", help="UTIAS-format directory (overrides dataset.path)")
    p.add_argument("--seed", type=int, help="scenario seed for synthetic data")
    p.add_argument("--write", metavar="DIR", help="export the logs in UTIAS layout")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("gen-data", parents=[common], help="generate surrogate training samples")
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--count", type=int, help="number of samples (model.samples)")
    p.add_argument("--seed", type=int, help="data seed (model.data_seed)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train the surrogate MLP")
    p.add_argument("--data", required=True, help="samples CSV from gen-data")
    p.add_argument("--out", help="model file (model.path)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", parents=[common], help="run one scenario with one policy")
    p.add_argument("--policy", choices=POLICIES)
    p.add_argument("--q", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--model", help="model file (model.path)")
    p.add_argument("--out", help="output directory (run.output_dir)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", parents=[common], help="Monte Carlo comparison of policies")
    p.add_argument("--seed", type=int, required=True, help="first seed")
    p.add_argument("--n-seeds", type=int, default=20)
    p.add_argument("--policies", default="full,dnn,random")
    p.add_argument("--model", help="model file (model.path)")
    p.add_argument("--out", help="output directory (run.output_dir)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("predict-scatter", parents=[common],
                       help="predicted vs actual updated trace, from a samples CSV or a dnn run")
    p.add_argument("--data", help="samples CSV; without it a dnn simulation is run")
    p.add_argument("--seed", type=int)
    p.add_argument("--model", help="model file (model.path)")
    p.add_argument("--out", help="output directory (run.output_dir)")
    p.set_defaults(func=cmd_predict_scatter)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "compare" and args.n_seeds < 1:
        parser.error("--n-seeds must be >= 1")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SchemaError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
