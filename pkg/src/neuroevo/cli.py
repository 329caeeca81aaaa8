"""Command-line entry points tying the pipeline together.

One binary, six subcommands:

  synth      generate a deterministic synthetic corpus
  correlate  rank channels by correlation against the vibration target
  train      train a fully connected network from a config file
  evolve     search gate connectivity with the ant colony (local/master/worker)
  evaluate   score a saved model and emit plot-ready prediction CSVs
  report     summarize an evolution log into a top-K table

Every run writes its resolved configuration next to its outputs, so a
result directory is self-describing. Outputs are plain CSV or the
checksummed binary model/mesh formats. Set NEUROEVO_LOG=info or =debug
for progress diagnostics on stderr; stdout carries only the results.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .aco import local_evaluator, write_evolution_log, read_evolution_log
from .config import (
    RunConfig,
    apply_overrides,
    config_digest,
    load_config,
    parse_addr,
    write_config,
)
from .dist import Master, run_local, serve_master, tcp_worker
from .errors import ConfigError, EmptyFile, NeuroevoError, NoFlights
from .flightdata import (
    VIB_CHANNEL,
    channel_ranges,
    load_flight_csv,
    make_windows,
    normalize,
    rank_parameters,
    save_flight_csv,
    synth_flights,
)
from .lstm import (
    ARCH_DEFAULT_T,
    ARCHS,
    Mesh,
    build_network,
    deserialize_network,
    forward_batch,
    serialize_mesh,
    serialize_network,
)
from .trainer import evaluate, train, write_train_report

log = logging.getLogger("neuroevo.cli")

RANGES_SUFFIX = ".ranges.csv"


def _setup_logging() -> None:
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    name = os.environ.get("NEUROEVO_LOG", "error").lower()
    if name not in levels:
        raise ConfigError(f"NEUROEVO_LOG must be one of {sorted(levels)}, got {name!r}")
    logging.basicConfig(level=levels[name],
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _load_dir(path):
    d = Path(path)
    if not d.is_dir():
        raise NoFlights(f"not a directory: {d}")
    flights = [load_flight_csv(f) for f in sorted(d.glob("*.csv"))]
    if not flights:
        raise NoFlights(f"no flight CSVs under {d}")
    return flights


def _prepare(cfg: RunConfig):
    """Load, normalize, and window the corpora a config names.

    Normalization ranges always come from the training corpus; the test
    corpus reuses them verbatim. Returns (train_ds, test_ds_or_None,
    ranges, channel_order, T).
    """
    if cfg.train_dir is None:
        raise ConfigError("train_dir is required")
    train = _load_dir(cfg.train_dir)
    ranges = channel_ranges(train)
    train_norm = [normalize(f, ranges) for f in train]
    if cfg.channels is not None:
        order = list(cfg.channels)
    else:
        order = [n for n in rank_parameters(train_norm).names() if n != VIB_CHANNEL]
    T = cfg.window or ARCH_DEFAULT_T[cfg.arch]
    train_ds = make_windows(train_norm, T, cfg.horizon, order)
    test_ds = None
    if cfg.test_dir is not None:
        test_norm = [normalize(f, ranges) for f in _load_dir(cfg.test_dir)]
        test_ds = make_windows(test_norm, T, cfg.horizon, order)
    log.info("prepared %d train windows%s, %d input lines, T=%d H=%d",
             len(train_ds), "" if test_ds is None else f" / {len(test_ds)} test windows",
             train_ds.width, T, cfg.horizon)
    return train_ds, test_ds, ranges, order, T


def _write_ranges_sidecar(path, order, ranges) -> None:
    """Model input schema: channel order and min-max ranges, target last."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["channel", "min", "max"])
        for name in list(order) + [VIB_CHANNEL]:
            lo, hi = ranges[name]
            writer.writerow([name, repr(float(lo)), repr(float(hi))])


def _read_ranges_sidecar(path):
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read model schema {path}: {exc}") from None
    with fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["channel", "min", "max"]:
        raise ConfigError(f"{path}: expected a channel,min,max header")
    ranges = {}
    order = []
    for name, lo, hi in rows[1:]:
        ranges[name] = (float(lo), float(hi))
        order.append(name)
    if not order or order[-1] != VIB_CHANNEL:
        raise ConfigError(f"{path}: last row must be the {VIB_CHANNEL} target")
    return order[:-1], ranges


def _save_model(out_dir: Path, stem: str, net, order, ranges) -> Path:
    path = out_dir / f"{stem}.bin"
    path.write_bytes(serialize_network(net))
    _write_ranges_sidecar(f"{path}{RANGES_SUFFIX}", order, ranges)
    return path


# ------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    flights = synth_flights(args.seed, args.n, args.length, args.channels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for flight in flights:
        save_flight_csv(flight, out / f"{flight.id}.csv")
    print(f"wrote {len(flights)} flights of {args.length} s x "
          f"{args.channels} channels to {out}")
    return 0


def cmd_correlate(args) -> int:
    flights = _load_dir(args.data_dir)
    ranges = channel_ranges(flights)
    ranking = rank_parameters([normalize(f, ranges) for f in flights])
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "score"])
        for name, score in ranking.entries:
            writer.writerow([name, repr(float(score))])
    print(f"wrote ranking of {len(ranking.entries)} channels to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    train_ds, test_ds, ranges, order, T = _prepare(cfg)
    if test_ds is None:
        log.info("no test_dir configured; test metrics use the training set")
        test_ds = train_ds
    net = build_network(cfg.arch, Mesh.full(train_ds.width), horizon=cfg.horizon,
                        seed=cfg.seed, T=T)
    report = train(net, train_ds, test_ds, cfg.train_config())
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model_path = _save_model(out, "model", net, order, ranges)
    write_train_report(report, out / "train_report.csv")
    write_config(cfg, out / "config.txt")
    print(f"trained arch {cfg.arch} (T={T}, H={cfg.horizon}) for {cfg.epochs} epochs "
          f"on {len(train_ds)} windows in {report.wall_time_s:.1f} s")
    print(f"final_train_mse={report.final_train_mse:.6g} "
          f"test_mse={report.test_mse:.6g} test_mae={report.test_mae:.6g}")
    print(f"wrote {model_path}, {model_path}{RANGES_SUFFIX}, "
          f"{out / 'train_report.csv'}, {out / 'config.txt'}")
    return 0


def cmd_evolve(args) -> int:
    cfg = _config_from_args(args)
    if cfg.test_dir is None:
        raise ConfigError("test_dir is required for evolve (fitness is test MAE)")
    train_ds, test_ds, ranges, order, T = _prepare(cfg)
    train_cfg = cfg.train_config()
    aco_cfg = cfg.aco_config()
    digest = config_digest(cfg)
    evaluator = local_evaluator(train_ds, test_ds, cfg.arch, train_cfg,
                                horizon=cfg.horizon, T=T)

    if args.role == "worker":
        addr = parse_addr(cfg.master_addr or cfg.master_bind)
        reported = tcp_worker(addr, evaluator, digest)
        print(f"worker done: reported {reported} evaluations")
        return 0

    if args.role == "local":
        result = run_local(aco_cfg, evaluator, n_workers=cfg.workers, digest=digest,
                           n_inputs=train_ds.width, job_timeout_s=cfg.job_timeout_s)
    else:
        master = Master(aco_cfg, digest, n_inputs=train_ds.width,
                        job_timeout_s=cfg.job_timeout_s)

        def on_bound(addr):
            print(f"master listening on {addr[0]}:{addr[1]}", flush=True)

        result = serve_master(master, bind=parse_addr(cfg.master_bind),
                              on_bound=on_bound)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_evolution_log(result.logs, out / "evolution_log.csv")
    with open(out / "population.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "fitness", "m1_count", "m2_count",
                         "total_connections"])
        for rank, (fitness, mesh) in enumerate(result.population.entries):
            writer.writerow([rank, repr(float(fitness)), mesh.m1_count,
                             mesh.m2_count, mesh.m1_count + mesh.m2_count])
    (out / "best_mesh.bin").write_bytes(
        serialize_mesh(result.best_mesh, cfg.arch, T, cfg.horizon))
    # retrain the winning connectivity into a deployable model
    best_net = build_network(cfg.arch, result.best_mesh, horizon=cfg.horizon,
                             seed=train_cfg.seed, T=T)
    train(best_net, train_ds, test_ds, train_cfg)
    best_model = _save_model(out, "best_model", best_net, order, ranges)
    write_config(cfg, out / "config.txt")
    print(f"evolved {len(result.population)} networks "
          f"({result.failures} failed evaluations); best test MAE "
          f"{result.best_fitness:.6g} with "
          f"{result.best_mesh.m1_count + result.best_mesh.m2_count} connections")
    print(f"wrote {out / 'evolution_log.csv'}, {out / 'population.csv'}, "
          f"{out / 'best_mesh.bin'}, {best_model}, {out / 'config.txt'}")
    return 0


def cmd_evaluate(args) -> int:
    model_path = Path(args.model)
    try:
        blob = model_path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read model {model_path}: {exc}") from None
    net = deserialize_network(blob)
    order, ranges = _read_ranges_sidecar(f"{model_path}{RANGES_SUFFIX}")
    files = sorted(Path(args.data_dir).glob("*.csv"))
    if not files:
        raise NoFlights(f"no flight CSVs under {args.data_dir}")
    schema = order + [VIB_CHANNEL]
    flights = [normalize(load_flight_csv(f, schema=schema), ranges) for f in files]
    combined = make_windows(flights, net.T, net.horizon, order)
    summary = evaluate(net, combined)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lo, hi = ranges[VIB_CHANNEL]
    for flight in flights:
        ds = make_windows([flight], net.T, net.horizon, order)
        preds = forward_batch(net, ds.X)
        times = ds.starts + net.T - 1 + net.horizon
        with open(out / f"pred_{flight.id}.csv", "w", newline="",
                  encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time", "actual", "predicted"])
            for t, actual, pred in zip(times, ds.y, preds):
                # back to raw units for plotting; metrics stay normalized
                writer.writerow([int(t), repr(lo + (hi - lo) * float(actual)),
                                 repr(lo + (hi - lo) * float(pred))])
    with open(out / "evaluation.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerow(["mse", repr(float(summary["mse"]))])
        writer.writerow(["mae", repr(float(summary["mae"]))])
    print(f"mse={summary['mse']:.6g} mae={summary['mae']:.6g} "
          f"over {len(combined)} windows from {len(flights)} flights")
    print(f"wrote {len(flights)} prediction files and evaluation.csv to {out}")
    return 0


def cmd_report(args) -> int:
    if args.top < 1:
        raise ConfigError("--top must be >= 1")
    entries = read_evolution_log(args.log)
    if not entries:
        raise EmptyFile(f"evolution log {args.log} has no rows")
    ranked = sorted(entries, key=lambda e: e["fitness"])[:args.top]
    lines = ["rank,iteration,fitness,m1_count,m2_count,total_connections,wall_time_s"]
    for rank, e in enumerate(ranked):
        lines.append(f"{rank},{e['iteration']},{e['fitness']!r},{e['m1_count']},"
                     f"{e['m2_count']},{e['total_connections']},{e['wall_time_s']!r}")
    for field in ("m1_count", "m2_count", "total_connections"):
        vals = np.array([e[field] for e in ranked])
        lines.append(f"# {field}: mean={vals.mean():.2f} min={vals.min()} "
                     f"max={vals.max()}")
    lines.append(f"# fitness: best={ranked[0]['fitness']!r} "
                 f"worst_shown={ranked[-1]['fitness']!r} of {len(entries)} rows")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote top-{len(ranked)} table to {args.out}")
    else:
        print(text, end="")
    return 0


# -------------------------------------------------------------- parsing

def _add_run_flags(sp, with_aco: bool) -> None:
    sp.add_argument("--config", required=True, help="run configuration file")
    sp.add_argument("--seed", type=int, default=None, help="override seed")
    sp.add_argument("--out", default=None, help="override out_dir")
    sp.add_argument("--epochs", type=int, default=None, help="override epochs")
    sp.add_argument("--horizon", type=int, default=None, help="override horizon")
    sp.add_argument("--arch", choices=ARCHS, default=None, help="override arch")
    if with_aco:
        sp.add_argument("--ants", type=int, default=None, help="override ants")
        sp.add_argument("--iterations", type=int, default=None,
                        help="override iterations")


def _config_from_args(args) -> RunConfig:
    cfg = load_config(args.config)
    return apply_overrides(cfg, seed=args.seed, out_dir=args.out,
                           epochs=args.epochs, horizon=args.horizon,
                           arch=args.arch, ants=getattr(args, "ants", None),
                           iterations=getattr(args, "iterations", None))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neuroevo",
        description="Evolve sparse gate connectivity for windowed "
                    "time-series forecasting networks.")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a deterministic synthetic corpus")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n", type=int, default=5, help="number of flights")
    sp.add_argument("--length", type=int, default=300, help="seconds per flight")
    sp.add_argument("--channels", type=int, default=9,
                    help="channel count including the vibration target")
    sp.add_argument("--out", default="data", help="output directory")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("correlate",
                        help="rank channels by correlation against the target")
    sp.add_argument("data_dir")
    sp.add_argument("--out", default="ranking.csv")
    sp.set_defaults(func=cmd_correlate)

    sp = sub.add_parser("train", help="train a fully connected network")
    _add_run_flags(sp, with_aco=False)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evolve", help="search gate connectivity with ants")
    _add_run_flags(sp, with_aco=True)
    sp.add_argument("--role", choices=("master", "worker", "local"),
                    default="local")
    sp.set_defaults(func=cmd_evolve)

    sp = sub.add_parser("evaluate",
                        help="score a model and emit prediction CSVs")
    sp.add_argument("model")
    sp.add_argument("data_dir")
    sp.add_argument("--out", default="eval")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("report", help="summarize an evolution log")
    sp.add_argument("log")
    sp.add_argument("--top", type=int, default=30)
    sp.add_argument("--out", default=None,
                    help="write the table here instead of stdout")
    sp.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NeuroevoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
