"""Command-line entry points.

Subcommands:

* ``dhash bench``            one benchmark run, report to stdout or a file
* ``dhash measure-rebuild``  timed explicit rebuilds over a range of sizes
* ``dhash stress lemmaN``    the rebuild-guarantee stress suites
* ``dhash check histories``  linearizability verdicts for recorded histories

Exit status is 0 on a clean run and nonzero on configuration errors, runtime
errors, or any correctness violation.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from . import checker, harness
from .harness import ConfigError, WorkloadConfig


def _parse_mix(text: str):
    try:
        parts = tuple(int(x) for x in text.replace("/", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad mix {text!r}; expected L,I,D")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("mix needs exactly three percentages")
    return parts


def _add_workload_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mix", type=_parse_mix, default=(90, 5, 5),
                   help="lookup,insert,delete percentages (default 90,5,5)")
    p.add_argument("--load-factor", type=float, default=2.0)
    p.add_argument("--buckets", type=int, default=1024)
    p.add_argument("--keys", type=int, default=10_000_000,
                   help="key range upper bound (default ten million)")
    p.add_argument("--threads", type=int, default=2, help="worker threads")
    p.add_argument("--seconds", type=float, default=10.0)
    p.add_argument("--rebuild", choices=["off", "continuous"], default="off")
    p.add_argument("--alt-buckets", type=int, default=None,
                   help="bucket count the continuous rebuild alternates to (default 2x)")
    p.add_argument("--same-hash", action="store_true",
                   help="continuous rebuild keeps one hash function")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--pin", choices=["perf-first", "none"], default="perf-first")
    p.add_argument("--out", type=Path, default=None, help="write report here instead of stdout")
    p.add_argument("--format", choices=["csv", "json", "text"], default="text")
    p.add_argument("--figures", action="store_true",
                   help="render PNG figures next to the report file")


def _config_from(args) -> WorkloadConfig:
    return WorkloadConfig(
        mix=args.mix,
        load_factor=args.load_factor,
        nbuckets=args.buckets,
        key_range=args.keys,
        workers=args.threads,
        seconds=args.seconds,
        rebuild_mode=args.rebuild,
        alt_buckets=args.alt_buckets,
        same_hash=args.same_hash,
        seed=args.seed,
        pinning=args.pin,
    )


def _emit(text: str, out: Optional[Path]) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)


def _cmd_bench(args) -> int:
    config = _config_from(args)
    config.validate()
    report = harness.run(config)
    if args.format == "csv":
        text = harness.report_to_csv(report)
    elif args.format == "json":
        text = harness.report_to_json(report) + "\n"
    else:
        text = harness.report_to_text(report)
    _emit(text, args.out)
    if args.figures:
        if args.out is None:
            print("--figures requires --out to anchor the PNG path", file=sys.stderr)
            return 2
        from . import figures

        fig = figures.throughput_figure(report)
        path = figures.save_figure(fig, figures.figure_path_for(args.out, "throughput"))
        print(f"figure written to {path}", file=sys.stderr)
    if report.leaked_nodes:
        print(f"error: {report.leaked_nodes} nodes leaked", file=sys.stderr)
        return 1
    return 0


def _cmd_measure_rebuild(args) -> int:
    config = _config_from(args)
    counts = [int(x) for x in args.counts.split(",")]
    timings = harness.measure_rebuild(config, counts, repeats=args.repeats)
    if args.format == "json":
        text = harness.rebuild_timings_to_json(timings) + "\n"
    else:
        text = harness.rebuild_timings_to_csv(timings)
    _emit(text, args.out)
    if args.figures:
        if args.out is None:
            print("--figures requires --out to anchor the PNG path", file=sys.stderr)
            return 2
        from . import figures

        fig = figures.rebuild_time_figure(timings)
        path = figures.save_figure(fig, figures.figure_path_for(args.out, "rebuild"))
        print(f"figure written to {path}", file=sys.stderr)
    return 0


def _cmd_stress(args) -> int:
    if args.suite == "lemma1":
        result = checker.lemma1_stress(seconds=args.seconds, seed=args.seed,
                                       readers=args.threads)
    elif args.suite == "lemma2":
        result = checker.lemma2_stress(seconds=args.seconds, seed=args.seed,
                                       deleters=args.threads)
    else:
        result = checker.lemma3_stress(seconds=args.seconds, seed=args.seed,
                                       inserters=args.threads)
    print(json.dumps(result.to_dict()))
    return 0 if result.passed else 1


def _cmd_check(args) -> int:
    failures = 0
    for path in args.files:
        history = checker.History.from_json(Path(path).read_text())
        verdict = checker.check_linearizable(history, budget=args.budget)
        if verdict.linearizable is True:
            status = "PASS"
        elif verdict.linearizable is False:
            status = "FAIL"
            failures += 1
        else:
            status = "INCONCLUSIVE"
            failures += 1
        line = {"file": str(path), "status": status, "explored": verdict.explored}
        if verdict.violation:
            line["violation"] = verdict.violation
        print(json.dumps(line))
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dhash",
                                     description="dynamic hash table benchmark and checker")
    sub = parser.add_subparsers(dest="command", required=True)

    p_bench = sub.add_parser("bench", help="run one benchmark workload")
    _add_workload_args(p_bench)
    p_bench.set_defaults(fn=_cmd_bench)

    p_mr = sub.add_parser("measure-rebuild", help="time explicit rebuilds by table size")
    _add_workload_args(p_mr)
    p_mr.add_argument("--counts", default="10000,100000",
                      help="comma-separated node counts to prefill")
    p_mr.add_argument("--repeats", type=int, default=3)
    p_mr.set_defaults(fn=_cmd_measure_rebuild)

    p_stress = sub.add_parser("stress", help="rebuild-guarantee stress suites")
    p_stress.add_argument("suite", choices=["lemma1", "lemma2", "lemma3"])
    p_stress.add_argument("--seconds", type=float, default=10.0)
    p_stress.add_argument("--seed", type=int, default=1)
    p_stress.add_argument("--threads", type=int, default=4)
    p_stress.set_defaults(fn=_cmd_stress)

    p_check = sub.add_parser("check", help="verify recorded histories")
    check_sub = p_check.add_subparsers(dest="what", required=True)
    p_hist = check_sub.add_parser("histories", help="linearizability of history files")
    p_hist.add_argument("files", nargs="+")
    p_hist.add_argument("--budget", type=int, default=10_000_000)
    p_hist.set_defaults(fn=_cmd_check)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except checker.MalformedHistory as exc:
        print(f"malformed history: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
