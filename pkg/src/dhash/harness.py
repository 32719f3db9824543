"""Benchmark harness: workload workers, throughput reports, rebuild timing.

A run spawns worker threads that each draw an endless stream of operations
from a seeded per-thread generator (so the op/key sequences are reproducible;
the generator is CPython's Mersenne Twister via :mod:`random` and is recorded
in the report).  An optional rebuild thread continuously rebuilds the table
between its base and alternate shapes.  Workers can be pinned round-robin to
the available cores ("performance-first" mapping: each new worker goes to the
core hosting the fewest workers).

Report formats
--------------
CSV column order is fixed:

    row, thread, lookups, inserts, deletes, total, elapsed_s, ops_per_sec,
    rebuilds, rebuild_seconds, final_population, leaked_nodes, pinned,
    generator, host, cpus, python, mix, load_factor, buckets, alt_buckets,
    keys, threads, seconds, rebuild_mode, same_hash, seed, pin

The first data row is the run summary (``row == "summary"``), followed by one
row per worker thread (``row == "thread"``) carrying only the counters.  The
JSON format mirrors the same fields; both round-trip through the parsers in
this module.
"""

from __future__ import annotations

import json
import os
import platform
import random
import statistics
import threading
import time
from dataclasses import dataclass, field, replace
from io import StringIO
from typing import Iterator, List, Optional, Sequence, TextIO, Tuple

from .reclaim import ReclaimDomain
from .table import DHashTable, RebuildResult

_M64 = (1 << 64) - 1

GENERATOR_NAME = "python-random-mt19937"


def mult_hash_a(key: int) -> int:
    """Default multiplicative hash (golden-ratio constant)."""
    return (key * 0x9E3779B97F4A7C15) & _M64


def mult_hash_b(key: int) -> int:
    """Alternate multiplicative hash used by continuous rebuilds."""
    return (key * 0xC2B2AE3D27D4EB4F) & _M64


class ConfigError(ValueError):
    """Invalid workload configuration."""


@dataclass(frozen=True)
class WorkloadConfig:
    """One benchmark run: operation mix, table shape, threads, duration."""

    mix: Tuple[int, int, int] = (90, 5, 5)  # lookup%, insert%, delete%
    load_factor: float = 2.0
    nbuckets: int = 1024
    key_range: int = 10_000_000
    workers: int = 2
    seconds: float = 10.0
    rebuild_mode: str = "off"  # "off" | "continuous"
    alt_buckets: Optional[int] = None  # default: 2 * nbuckets
    same_hash: bool = False  # continuous mode keeps one hash fn (comparability mode)
    seed: int = 1
    pinning: str = "perf-first"  # "perf-first" | "none"

    def validate(self) -> None:
        if sum(self.mix) != 100 or any(m < 0 for m in self.mix):
            raise ConfigError(f"mix must be non-negative and sum to 100, got {self.mix}")
        if self.load_factor <= 0:
            raise ConfigError("load factor must be positive")
        if self.nbuckets < 1:
            raise ConfigError("need at least one bucket")
        if self.key_range < 1:
            raise ConfigError("key range must be positive")
        if self.prefill_count() > self.key_range:
            raise ConfigError(
                f"prefill {self.prefill_count()} exceeds key range {self.key_range}")
        if self.workers < 1:
            raise ConfigError("need at least one worker")
        if self.seconds <= 0:
            raise ConfigError("duration must be positive")
        if self.rebuild_mode not in ("off", "continuous"):
            raise ConfigError(f"unknown rebuild mode {self.rebuild_mode!r}")
        if self.pinning not in ("perf-first", "none"):
            raise ConfigError(f"unknown pinning mode {self.pinning!r}")

    def prefill_count(self) -> int:
        return int(round(self.load_factor * self.nbuckets))

    def alt_nbuckets(self) -> int:
        return self.alt_buckets if self.alt_buckets else 2 * self.nbuckets


@dataclass(frozen=True)
class ThroughputReport:
    config: WorkloadConfig
    elapsed_s: float
    per_thread: Tuple[Tuple[int, int, int], ...]  # (lookups, inserts, deletes)
    rebuilds: int
    rebuild_seconds: Tuple[float, ...]
    pinned: bool
    final_population: int
    leaked_nodes: int
    generator: str = GENERATOR_NAME
    host: str = field(default_factory=platform.node)
    cpus: int = field(default_factory=lambda: os.cpu_count() or 1)
    python: str = field(default_factory=platform.python_version)

    @property
    def totals(self) -> Tuple[int, int, int]:
        lk = sum(t[0] for t in self.per_thread)
        ins = sum(t[1] for t in self.per_thread)
        dl = sum(t[2] for t in self.per_thread)
        return (lk, ins, dl)

    @property
    def ops_total(self) -> int:
        return sum(self.totals)

    @property
    def ops_per_sec(self) -> float:
        return self.ops_total / self.elapsed_s if self.elapsed_s else 0.0


# -- workload generation -------------------------------------------------------

OP_LOOKUP, OP_INSERT, OP_DELETE = 0, 1, 2


def thread_seed(master_seed: int, tid: int) -> int:
    return (master_seed * 0x9E3779B1 + tid * 0x85EBCA77 + 1) & _M64


def op_stream(config: WorkloadConfig, tid: int) -> Iterator[Tuple[int, int]]:
    """The deterministic (op, key) stream worker ``tid`` executes."""
    rng = random.Random(thread_seed(config.seed, tid))
    rand = rng.random
    lookup_t = config.mix[0] / 100.0
    insert_t = lookup_t + config.mix[1] / 100.0
    span = config.key_range
    while True:
        r = rand()
        key = int(rand() * span)
        if r < lookup_t:
            yield OP_LOOKUP, key
        elif r < insert_t:
            yield OP_INSERT, key
        else:
            yield OP_DELETE, key


# -- pinning ---------------------------------------------------------------------


def pinning_supported() -> bool:
    return hasattr(os, "sched_setaffinity")


def plan_pinning(workers: int) -> List[int]:
    """Performance-first mapping: worker i goes to the core with fewest workers."""
    cores = sorted(os.sched_getaffinity(0)) if pinning_supported() else [0]
    return [cores[i % len(cores)] for i in range(workers)]


def pin_worker(index: int, plan: Sequence[int]) -> bool:
    """Bind the calling thread per ``plan``; False (and no-op) if unsupported."""
    if not pinning_supported():
        return False
    try:
        os.sched_setaffinity(0, {plan[index]})
        return True
    except OSError:
        return False


# -- run -------------------------------------------------------------------------


class _RunControl:
    __slots__ = ("stop",)

    def __init__(self):
        self.stop = False


def prefill(table: DHashTable, config: WorkloadConfig,
            count: Optional[int] = None) -> List[int]:
    """Insert ``count`` (default load_factor * nbuckets) distinct uniform keys."""
    n = config.prefill_count() if count is None else count
    if n > config.key_range:
        raise ConfigError(f"prefill {n} exceeds key range {config.key_range}")
    rng = random.Random(thread_seed(config.seed, 0x5EED))
    keys = rng.sample(range(config.key_range), n)
    table.domain.register()
    for key in keys:
        if not table.insert(key):
            raise RuntimeError("prefill key collided; sample should be distinct")
    return keys


def _worker(table: DHashTable, config: WorkloadConfig, tid: int,
            ctl: _RunControl, plan: Sequence[int], out: list,
            pinned_flags: list, barrier: threading.Barrier) -> None:
    domain = table.domain
    domain.register()
    try:
        if config.pinning == "perf-first":
            pinned_flags[tid] = pin_worker(tid, plan)
        lookups = inserts = deletes = 0
        contains, insert, delete = table.contains, table.insert, table.delete
        stream = op_stream(config, tid)
        barrier.wait()
        for op, key in stream:
            if ctl.stop:
                break
            if op == OP_LOOKUP:
                contains(key)
                lookups += 1
            elif op == OP_INSERT:
                insert(key)
                inserts += 1
            else:
                delete(key)
                deletes += 1
        out[tid] = (lookups, inserts, deletes)
    finally:
        domain.unregister()


def _rebuild_loop(table: DHashTable, config: WorkloadConfig, ctl: _RunControl,
                  out: dict, barrier: threading.Barrier) -> None:
    domain = table.domain
    domain.register()
    try:
        base, alt = config.nbuckets, config.alt_nbuckets()
        hashes = (mult_hash_a, mult_hash_a) if config.same_hash else (mult_hash_a, mult_hash_b)
        count = 0
        durations: List[float] = []
        flip = 1
        barrier.wait()
        while not ctl.stop:
            nb = alt if flip else base
            hf = hashes[flip]
            t0 = time.perf_counter()
            if table.rebuild(nb, hf) is RebuildResult.SUCCESS:
                count += 1
                durations.append(time.perf_counter() - t0)
            flip ^= 1
        out["count"] = count
        out["durations"] = durations
    finally:
        domain.unregister()


def run(config: WorkloadConfig) -> ThroughputReport:
    """Execute one benchmark run and return its report.

    The table is torn down afterwards; the report carries the post-run census
    (live keys after workers stopped) and the leak counter (nodes neither
    reclaimed nor live after teardown, which must be zero).
    """
    config.validate()
    domain = ReclaimDomain()
    table = DHashTable(config.nbuckets, mult_hash_a, domain)
    prefill(table, config)

    ctl = _RunControl()
    plan = plan_pinning(config.workers)
    counts: list = [(0, 0, 0)] * config.workers
    pinned_flags: list = [False] * config.workers
    rebuild_out: dict = {"count": 0, "durations": []}
    parties = config.workers + 1 + (1 if config.rebuild_mode == "continuous" else 0)
    barrier = threading.Barrier(parties)

    threads = [
        threading.Thread(target=_worker, name=f"worker-{tid}",
                         args=(table, config, tid, ctl, plan, counts, pinned_flags, barrier))
        for tid in range(config.workers)
    ]
    if config.rebuild_mode == "continuous":
        threads.append(threading.Thread(target=_rebuild_loop, name="rebuilder",
                                        args=(table, config, ctl, rebuild_out, barrier)))
    for t in threads:
        t.start()
    barrier.wait()
    t0 = time.perf_counter()
    time.sleep(config.seconds)
    ctl.stop = True
    for t in threads:
        t.join()
    elapsed = time.perf_counter() - t0

    domain.drain()
    population = len(table.snapshot_keys())
    table.dispose()
    domain.drain()
    leaked = table.stats.live()
    domain.unregister()

    return ThroughputReport(
        config=config,
        elapsed_s=elapsed,
        per_thread=tuple(counts),
        rebuilds=rebuild_out["count"],
        rebuild_seconds=tuple(rebuild_out["durations"]),
        pinned=all(pinned_flags) if config.pinning == "perf-first" else False,
        final_population=population,
        leaked_nodes=leaked,
    )


# -- rebuild timing ----------------------------------------------------------------


@dataclass(frozen=True)
class RebuildTiming:
    node_count: int
    mean_s: float
    stdev_s: float
    times: Tuple[float, ...]


def measure_rebuild(config: WorkloadConfig, node_counts: Sequence[int],
                    repeats: int = 3, scale_key_range: bool = True) -> List[RebuildTiming]:
    """Time explicit rebuilds at each prefill size, workers churning meanwhile.

    ``scale_key_range`` narrows the churn key range to twice the prefill so
    the population stays at the prefill size while the rebuild is timed (the
    insert and delete shares then cancel in expectation).
    """
    if config.rebuild_mode != "off":
        raise ConfigError("measure_rebuild requires rebuild_mode == 'off'")
    results: List[RebuildTiming] = []
    for count in node_counts:
        cfg = replace(config,
                      key_range=max(2 * count, 2) if scale_key_range else config.key_range,
                      rebuild_mode="off")
        domain = ReclaimDomain()
        table = DHashTable(cfg.nbuckets, mult_hash_a, domain)
        if count:
            prefill(table, cfg, count=count)
        else:
            table.domain.register()
        ctl = _RunControl()
        plan = plan_pinning(cfg.workers)
        counts_out: list = [(0, 0, 0)] * cfg.workers
        pinned: list = [False] * cfg.workers
        barrier = threading.Barrier(cfg.workers + 1)
        threads = [
            threading.Thread(target=_worker, name=f"worker-{tid}",
                             args=(table, cfg, tid, ctl, plan, counts_out, pinned, barrier))
            for tid in range(cfg.workers)
        ]
        for t in threads:
            t.start()
        barrier.wait()
        times: List[float] = []
        shapes = [(cfg.alt_nbuckets(), mult_hash_b), (cfg.nbuckets, mult_hash_a)]
        for rep in range(repeats):
            nb, hf = shapes[rep % 2]
            t0 = time.perf_counter()
            r = table.rebuild(nb, hf)
            times.append(time.perf_counter() - t0)
            if r is not RebuildResult.SUCCESS:
                raise RuntimeError(f"timed rebuild failed: {r}")
        ctl.stop = True
        for t in threads:
            t.join()
        domain.drain()
        table.dispose()
        domain.drain()
        if table.stats.live():
            raise RuntimeError(f"leak during rebuild timing: {table.stats.live()} nodes")
        domain.unregister()
        results.append(RebuildTiming(
            node_count=count,
            mean_s=statistics.fmean(times),
            stdev_s=statistics.stdev(times) if len(times) > 1 else 0.0,
            times=tuple(times),
        ))
    return results


# -- report serialization -------------------------------------------------------------

CSV_COLUMNS = (
    "row", "thread", "lookups", "inserts", "deletes", "total", "elapsed_s",
    "ops_per_sec", "rebuilds", "rebuild_seconds", "final_population",
    "leaked_nodes", "pinned", "generator", "host", "cpus", "python",
    "mix", "load_factor", "buckets", "alt_buckets", "keys", "threads",
    "seconds", "rebuild_mode", "same_hash", "seed", "pin",
)


def _summary_row(report: ThroughputReport) -> List[str]:
    cfg = report.config
    lk, ins, dl = report.totals
    return [
        "summary", "", str(lk), str(ins), str(dl), str(report.ops_total),
        repr(report.elapsed_s), repr(report.ops_per_sec), str(report.rebuilds),
        ";".join(repr(x) for x in report.rebuild_seconds),
        str(report.final_population), str(report.leaked_nodes),
        str(int(report.pinned)), report.generator, report.host,
        str(report.cpus), report.python,
        "/".join(str(m) for m in cfg.mix), repr(cfg.load_factor),
        str(cfg.nbuckets), str(cfg.alt_buckets) if cfg.alt_buckets else "",
        str(cfg.key_range), str(cfg.workers), repr(cfg.seconds),
        cfg.rebuild_mode, str(int(cfg.same_hash)), str(cfg.seed), cfg.pinning,
    ]


def report_to_csv(report: ThroughputReport) -> str:
    out = StringIO()
    out.write(",".join(CSV_COLUMNS) + "\n")
    out.write(",".join(_summary_row(report)) + "\n")
    for tid, (lk, ins, dl) in enumerate(report.per_thread):
        row = ["thread", str(tid), str(lk), str(ins), str(dl), str(lk + ins + dl)]
        row += [""] * (len(CSV_COLUMNS) - len(row))
        out.write(",".join(row) + "\n")
    return out.getvalue()


def report_from_csv(text: str) -> ThroughputReport:
    lines = [ln for ln in text.strip().splitlines() if ln]
    header = lines[0].split(",")
    if tuple(header) != CSV_COLUMNS:
        raise ValueError("unrecognized CSV header")
    rows = [ln.split(",") for ln in lines[1:]]
    summary = next(r for r in rows if r[0] == "summary")
    col = {name: summary[i] for i, name in enumerate(CSV_COLUMNS)}
    config = WorkloadConfig(
        mix=tuple(int(x) for x in col["mix"].split("/")),
        load_factor=float(col["load_factor"]),
        nbuckets=int(col["buckets"]),
        key_range=int(col["keys"]),
        workers=int(col["threads"]),
        seconds=float(col["seconds"]),
        rebuild_mode=col["rebuild_mode"],
        alt_buckets=int(col["alt_buckets"]) if col["alt_buckets"] else None,
        same_hash=bool(int(col["same_hash"])),
        seed=int(col["seed"]),
        pinning=col["pin"],
    )
    per_thread = tuple(
        (int(r[2]), int(r[3]), int(r[4])) for r in rows if r[0] == "thread"
    )
    rebuild_seconds = tuple(
        float(x) for x in col["rebuild_seconds"].split(";") if x
    )
    return ThroughputReport(
        config=config,
        elapsed_s=float(col["elapsed_s"]),
        per_thread=per_thread,
        rebuilds=int(col["rebuilds"]),
        rebuild_seconds=rebuild_seconds,
        pinned=bool(int(col["pinned"])),
        final_population=int(col["final_population"]),
        leaked_nodes=int(col["leaked_nodes"]),
        generator=col["generator"],
        host=col["host"],
        cpus=int(col["cpus"]),
        python=col["python"],
    )


def report_to_json(report: ThroughputReport) -> str:
    cfg = report.config
    doc = {
        "summary": {
            "lookups": report.totals[0],
            "inserts": report.totals[1],
            "deletes": report.totals[2],
            "total": report.ops_total,
            "elapsed_s": report.elapsed_s,
            "ops_per_sec": report.ops_per_sec,
            "rebuilds": report.rebuilds,
            "rebuild_seconds": list(report.rebuild_seconds),
            "final_population": report.final_population,
            "leaked_nodes": report.leaked_nodes,
            "pinned": report.pinned,
            "generator": report.generator,
            "host": report.host,
            "cpus": report.cpus,
            "python": report.python,
        },
        "config": {
            "mix": list(cfg.mix),
            "load_factor": cfg.load_factor,
            "buckets": cfg.nbuckets,
            "alt_buckets": cfg.alt_buckets,
            "keys": cfg.key_range,
            "threads": cfg.workers,
            "seconds": cfg.seconds,
            "rebuild_mode": cfg.rebuild_mode,
            "same_hash": cfg.same_hash,
            "seed": cfg.seed,
            "pin": cfg.pinning,
        },
        "per_thread": [
            {"thread": tid, "lookups": lk, "inserts": ins, "deletes": dl}
            for tid, (lk, ins, dl) in enumerate(report.per_thread)
        ],
    }
    return json.dumps(doc, indent=2)


def report_from_json(text: str) -> ThroughputReport:
    doc = json.loads(text)
    s, c = doc["summary"], doc["config"]
    return ThroughputReport(
        config=WorkloadConfig(
            mix=tuple(c["mix"]),
            load_factor=c["load_factor"],
            nbuckets=c["buckets"],
            key_range=c["keys"],
            workers=c["threads"],
            seconds=c["seconds"],
            rebuild_mode=c["rebuild_mode"],
            alt_buckets=c["alt_buckets"],
            same_hash=c["same_hash"],
            seed=c["seed"],
            pinning=c["pin"],
        ),
        elapsed_s=s["elapsed_s"],
        per_thread=tuple((p["lookups"], p["inserts"], p["deletes"])
                         for p in doc["per_thread"]),
        rebuilds=s["rebuilds"],
        rebuild_seconds=tuple(s["rebuild_seconds"]),
        pinned=s["pinned"],
        final_population=s["final_population"],
        leaked_nodes=s["leaked_nodes"],
        generator=s["generator"],
        host=s["host"],
        cpus=s["cpus"],
        python=s["python"],
    )


def report_to_text(report: ThroughputReport) -> str:
    lk, ins, dl = report.totals
    cfg = report.config
    lines = [
        f"workers={cfg.workers} mix={cfg.mix[0]}/{cfg.mix[1]}/{cfg.mix[2]} "
        f"load_factor={cfg.load_factor:g} buckets={cfg.nbuckets} "
        f"keys={cfg.key_range} rebuild={cfg.rebuild_mode} seed={cfg.seed}",
        f"elapsed {report.elapsed_s:.3f}s  total {report.ops_total} ops  "
        f"{report.ops_per_sec:,.0f} ops/s",
        f"  lookups {lk}  inserts {ins}  deletes {dl}",
        f"  rebuilds {report.rebuilds}"
        + (f"  mean {statistics.fmean(report.rebuild_seconds) * 1e3:.1f} ms"
           if report.rebuild_seconds else ""),
        f"  final population {report.final_population}  leaked {report.leaked_nodes}"
        f"  pinned {report.pinned}",
    ]
    for tid, (l, i, d) in enumerate(report.per_thread):
        lines.append(f"  thread {tid}: {l + i + d} ops ({l}/{i}/{d})")
    return "\n".join(lines) + "\n"


def emit_report(report: ThroughputReport, fmt: str, out: TextIO) -> None:
    """Write the report in ``fmt`` (csv, json, or text) to ``out``."""
    if fmt == "csv":
        out.write(report_to_csv(report))
    elif fmt == "json":
        out.write(report_to_json(report) + "\n")
    elif fmt == "text":
        out.write(report_to_text(report))
    else:
        raise ConfigError(f"unknown report format {fmt!r}")


def rebuild_timings_to_csv(timings: Sequence[RebuildTiming]) -> str:
    out = StringIO()
    out.write("node_count,mean_s,stdev_s,times\n")
    for t in timings:
        out.write(f"{t.node_count},{t.mean_s!r},{t.stdev_s!r},"
                  + ";".join(repr(x) for x in t.times) + "\n")
    return out.getvalue()


def rebuild_timings_to_json(timings: Sequence[RebuildTiming]) -> str:
    return json.dumps([
        {"node_count": t.node_count, "mean_s": t.mean_s,
         "stdev_s": t.stdev_s, "times": list(t.times)}
        for t in timings
    ], indent=2)
