"""Command-line front end.

Exit codes: 0 success, 1 configuration error, 2 verification failure, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import load_config
from .errors import ConfigError, FSRealError, VerificationError
from .metrics import append_csv_row, read_csv_rows, summarize, summary_columns
from .sim import SimConfig, SimResult, run

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY, EXIT_RUNTIME = 0, 1, 2, 3
METRICS_FILE = "metrics.csv"

log = logging.getLogger("fsreal")


def _setup_logging() -> None:
    level = os.environ.get("FSREAL_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)


def _run_row(name: str, cfg: SimConfig, result: SimResult) -> dict:
    row = {"name": name, "seed": cfg.seed, "mode": cfg.mode, "algorithm": cfg.algorithm, "codec": cfg.codec,
           "distribution": cfg.distribution, "total_clients": cfg.total_clients,
           "rounds_run": len(result.events.of_type("aggregate"))}
    row.update(result.report.as_dict())
    return row


def _write_run(out: Path, name: str, cfg: SimConfig, result: SimResult, tag: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / f"{name}_{tag}_seed{cfg.seed}.jsonl"
    result.events.write(log_path)
    append_csv_row(out / METRICS_FILE, _run_row(name, cfg, result))
    return log_path


def _summary_line(cfg: SimConfig, result: SimResult) -> str:
    r = result.report
    return (f"seed {cfg.seed}: acc {r.acc_mean_weighted:.4f}  bottom10 {r.acc_bottom_decile:.4f}  "
            f"conv round {r.conv_round} ({'converged' if r.converged else 'not converged'})  "
            f"t_conv {r.t_conv_hours:.3f} h  uti {r.uti_mean:.3f}  bytes {r.total_bytes}  "
            f"digest {result.final_model.digest()[:16]}")


def cmd_simulate(args) -> int:
    exp = load_config(args.config)
    out = Path(args.out or exp.out_dir)
    configs = [exp.sim_config(seed) for seed in exp.seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(run, configs))
    else:
        results = [run(c) for c in configs]
    for cfg, result in zip(configs, results):  # rows land in seed order either way
        path = _write_run(out, exp.name, cfg, result, "sim")
        print(_summary_line(cfg, result))
        print(f"  log: {path}")
    print(f"metrics: {out / METRICS_FILE}")
    return EXIT_OK


def cmd_serve(args) -> int:
    from .net.client import parse_endpoint
    from .net.server import NetServer

    exp = load_config(args.config)
    try:
        host, port = parse_endpoint(args.listen)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cfg = exp.net_sim_config()
    server = NetServer(cfg, host, port, wait_s=exp.net_wait_s)
    print(f"listening on {server.address[0]}:{server.address[1]} for {cfg.total_clients} clients", flush=True)
    result = server.run()
    path = _write_run(Path(args.out or exp.out_dir), exp.name, cfg, result, "net")
    print(_summary_line(cfg, result))
    print(f"  log: {path}")
    return EXIT_OK


def cmd_client(args) -> int:
    from .net.client import client_executor_loop, parse_endpoint

    try:
        endpoint = parse_endpoint(args.connect)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if args.latency < 0:
        raise ConfigError(f"--latency must be >= 0, got {args.latency}")
    rounds = client_executor_loop(endpoint, args.client_id_file, latency_s=args.latency)
    print(f"trained {rounds} rounds")
    return EXIT_OK


def cmd_replay(args) -> int:
    from .replay import verify_log

    digest = verify_log(args.log)
    print(f"replay ok: final digest {digest}")
    return EXIT_OK


def cmd_report(args) -> int:
    src = Path(args.in_dir)
    out = Path(args.out)
    paths = sorted(p for p in src.glob("*.csv") if p.resolve() != out.resolve())
    if not paths:
        raise ConfigError(f"no CSV files in {src}")
    summary = summarize(read_csv_rows(paths))
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=summary_columns(), lineterminator="\n")
        writer.writeheader()
        for row in summary:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    print(f"{len(summary)} configuration(s) summarised into {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fsreal", description="Cross-device federated learning orchestration.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run the discrete-event simulation over the config's seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (default: out_dir from the config)")
    p.add_argument("--jobs", type=int, default=1, help="seeds to run in parallel")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("serve", help="run the server for a distributed federation")
    p.add_argument("--config", required=True)
    p.add_argument("--listen", required=True, metavar="HOST:PORT")
    p.add_argument("--out")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("client", help="run one client executor")
    p.add_argument("--connect", required=True, metavar="HOST:PORT")
    p.add_argument("--client-id-file", required=True, help="where the assigned id is kept across reconnects")
    p.add_argument("--latency", type=float, default=0.0, help="seconds of artificial delay before each upload")
    p.set_defaults(func=cmd_client)

    p = sub.add_parser("replay", help="verify that an event log reproduces its final model")
    p.add_argument("--log", required=True)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("report", help="mean and std of every metric per configuration")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging()
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except VerificationError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (FSRealError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
