"""Command-line entry point: ``nfstate {run,sweep,timelapse,verify,replay}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

from .config import ConfigError, read_config
from .experiments import (bundle_config, bundle_trace_hash, rows_to_csv, run_experiment,
                          run_timelapse, sweep, trace_hash, verify_bundle)

EXIT_OK, EXIT_VERDICT, EXIT_CONFIG = 0, 1, 2

GOLDEN = os.path.join(os.path.dirname(os.path.dirname(__file__)), "data", "golden")


def _values(text: str) -> List[object]:
    out = []
    for part in text.split(","):
        part = part.strip()
        try:
            out.append(json.loads(part))
        except json.JSONDecodeError:
            out.append(part)
    return out


def _write(path: Optional[str], text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="") as fp:
            fp.write(text)


def cmd_run(args) -> int:
    cfg = read_config(args.config)
    res = run_experiment(cfg, args.out)
    row = res.row
    print(f"released={row['released']} latency_ns={row['latency_ns']:.1f} "
          f"throughput_pps={row['throughput_pps']:.1f} drops={row['drops']} "
          f"verdict={row['verdict']}")
    for f in res.report.findings[:20]:
        print(f"  {f.check}: {f.message}", file=sys.stderr)
    return EXIT_OK if res.passed else EXIT_VERDICT


def cmd_sweep(args) -> int:
    cfg = read_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = sweep(cfg, args.param, _values(args.values), seeds, jobs=args.jobs)
    _write(args.out, rows_to_csv(rows))
    return EXIT_OK if all(r["verdict"] == "pass" for r in rows) else EXIT_VERDICT


def cmd_timelapse(args) -> int:
    cfg = read_config(args.config)
    tl = run_timelapse(cfg, args.burst, args.at_packet)
    _write(args.out, tl.to_csv())
    rec = "never" if tl.recovery_window is None else f"window {tl.recovery_window}"
    print(f"pre={tl.pre_throughput:.1f}pps dip={tl.dip_throughput:.1f}pps recovered at {rec}",
          file=sys.stderr)
    return EXIT_OK if tl.report.passed else EXIT_VERDICT


def cmd_verify(args) -> int:
    path = GOLDEN if args.golden else args.bundle
    if path is None:
        raise ConfigError("bundle", "give a run directory or --golden")
    rep = verify_bundle(path)
    print(json.dumps(rep.to_dict(), indent=2))
    return EXIT_OK if rep.passed else EXIT_VERDICT


def cmd_replay(args) -> int:
    cfg = bundle_config(args.bundle)
    want = bundle_trace_hash(args.bundle)
    got = trace_hash(run_experiment(cfg).run.trace)
    same = got == want
    print(f"stored={want}\nreplay={got}\n{'identical' if same else 'DIFFERENT'}")
    return EXIT_OK if same else EXIT_VERDICT


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nfstate",
                                description="Replicated NF state management simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment config")
    r.add_argument("config")
    r.add_argument("--out", help="directory for trace, packets, state and metrics")
    r.set_defaults(fn=cmd_run)

    s = sub.add_parser("sweep", help="run a parameter grid into one CSV")
    s.add_argument("config")
    s.add_argument("--param", required=True, help="dotted config key to vary")
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--seeds", default="0")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", default="-")
    s.set_defaults(fn=cmd_sweep)

    t = sub.add_parser("timelapse", help="windowed series around a global-update burst")
    t.add_argument("config")
    t.add_argument("--burst", type=int, required=True)
    t.add_argument("--at-packet", type=int, required=True)
    t.add_argument("--out", default="-")
    t.set_defaults(fn=cmd_timelapse)

    v = sub.add_parser("verify", help="re-check a stored run against the reference")
    v.add_argument("bundle", nargs="?")
    v.add_argument("--golden", action="store_true", help="check the bundled golden run")
    v.set_defaults(fn=cmd_verify)

    rp = sub.add_parser("replay", help="re-run a stored config and compare trace hashes")
    rp.add_argument("bundle")
    rp.set_defaults(fn=cmd_replay)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
