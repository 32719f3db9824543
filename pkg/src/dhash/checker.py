"""Correctness harness: recorded histories, linearizability, targeted stresses.

Three layers:

* :func:`record_run` drives a few threads of table operations (optionally
  with a rebuild thread churning underneath) and captures a complete
  invoke/response history with monotonic timestamps.
* :func:`check_linearizable` decides whether a history has a sequential
  ordering, consistent with real time and with set semantics (lookup finds a
  key iff it is in the abstract set, insert succeeds iff absent, delete
  succeeds iff present).  The search is exhaustive with memoized pruning and
  a state budget; exceeding the budget yields an inconclusive verdict, which
  is distinct from a violation.
* ``lemma?_stress`` functions hammer the guarantees that make the table
  usable under a continuous rebuild: lookups of resident keys never miss,
  deletes of owned present keys never miss, and an insert is immediately
  visible to its own thread, with an exact post-run census.

The hazard-window tests replay every reachable interleaving of one
operation's pause points against the four pause points of one node's
redistribution, using the schedule driver.
"""

from __future__ import annotations

import json
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

from . import schedule as _sched
from .harness import mult_hash_a, mult_hash_b
from .reclaim import ReclaimDomain
from .table import DHashTable, RebuildResult


class MalformedHistory(ValueError):
    """Events do not pair into per-thread invoke/response operations."""


@dataclass(frozen=True)
class HistoryEvent:
    thread_id: int
    op: str          # "lookup" | "insert" | "delete"
    key: int
    phase: str       # "invoke" | "response"
    result: Optional[str]  # responses only: found/notfound/success/exists
    ts: int          # monotonic nanoseconds


@dataclass
class History:
    events: List[HistoryEvent] = field(default_factory=list)
    rebuild_windows: List[Tuple[int, int]] = field(default_factory=list)
    meta: Dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "events": [
                [e.thread_id, e.op, e.key, e.phase, e.result, e.ts]
                for e in self.events
            ],
            "rebuild_windows": self.rebuild_windows,
            "meta": self.meta,
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "History":
        doc = json.loads(text)
        return cls(
            events=[HistoryEvent(*row) for row in doc["events"]],
            rebuild_windows=[tuple(w) for w in doc.get("rebuild_windows", [])],
            meta=doc.get("meta", {}),
        )


@dataclass(frozen=True)
class _Op:
    tid: int
    kind: str
    key: int
    result: str
    inv: int
    resp: int


@dataclass
class Verdict:
    linearizable: Optional[bool]  # None = inconclusive (budget exceeded)
    witness: Optional[List[Tuple[int, str, int, str]]]  # (tid, op, key, result)
    violation: Optional[str]
    explored: int

    def __bool__(self) -> bool:
        return self.linearizable is True


def pair_operations(history: History) -> List[_Op]:
    """Validate per-thread alternation and pair events into operations."""
    pending: Dict[int, HistoryEvent] = {}
    ops: List[_Op] = []
    by_thread: Dict[int, List[HistoryEvent]] = {}
    for ev in history.events:
        by_thread.setdefault(ev.thread_id, []).append(ev)
    for tid, evs in by_thread.items():
        evs = sorted(evs, key=lambda e: e.ts)
        for ev in evs:
            if ev.phase == "invoke":
                if tid in pending:
                    raise MalformedHistory(f"thread {tid}: invoke while op pending")
                pending[tid] = ev
            elif ev.phase == "response":
                inv = pending.pop(tid, None)
                if inv is None or inv.op != ev.op or inv.key != ev.key:
                    raise MalformedHistory(f"thread {tid}: unmatched response {ev}")
                if ev.result is None:
                    raise MalformedHistory(f"thread {tid}: response without result")
                ops.append(_Op(tid, ev.op, ev.key, ev.result, inv.ts, ev.ts))
            else:
                raise MalformedHistory(f"unknown phase {ev.phase!r}")
        if tid in pending:
            raise MalformedHistory(f"thread {tid}: dangling invoke {pending[tid]}")
    return ops


def _apply(kind: str, result: str, bit: int, state: int) -> Optional[int]:
    """Next abstract-set state, or None if the recorded result contradicts it."""
    present = state & bit
    if kind == "lookup":
        if result == "found":
            return state if present else None
        return None if present else state
    if kind == "insert":
        if result == "success":
            return None if present else state | bit
        return state if present else None
    if kind == "delete":
        if result == "success":
            return state & ~bit if present else None
        return None if present else state
    raise MalformedHistory(f"unknown op kind {kind!r}")


class _BudgetExceeded(Exception):
    pass


def check_linearizable(history: History, budget: int = 10_000_000) -> Verdict:
    """Exhaustive search for a legal linearization of ``history``."""
    ops = pair_operations(history)
    n = len(ops)
    if n == 0:
        return Verdict(True, [], None, 0)
    keys = sorted({op.key for op in ops})
    kbit = {k: 1 << i for i, k in enumerate(keys)}
    bits = [1 << i for i in range(n)]
    full = (1 << n) - 1
    memo = set()
    order: List[int] = []
    explored = 0

    def search(mask: int, state: int) -> bool:
        nonlocal explored
        if mask == full:
            return True
        packed = (mask, state)
        if packed in memo:
            return False
        explored += 1
        if explored > budget:
            raise _BudgetExceeded
        rmin = min(ops[i].resp for i in range(n) if not mask & bits[i])
        for i in range(n):
            if mask & bits[i]:
                continue
            op = ops[i]
            if op.inv > rmin:
                continue  # an unlinearized op responded before this invoke
            nstate = _apply(op.kind, op.result, kbit[op.key], state)
            if nstate is None:
                continue
            order.append(i)
            if search(mask | bits[i], nstate):
                return True
            order.pop()
        memo.add(packed)
        return False

    try:
        ok = search(0, 0)
    except _BudgetExceeded:
        return Verdict(None, None, f"budget of {budget} states exceeded", explored)
    if ok:
        witness = [(ops[i].tid, ops[i].kind, ops[i].key, ops[i].result) for i in order]
        return Verdict(True, witness, None, explored)
    return Verdict(False, None, _describe_conflict(ops), explored)


def _describe_conflict(ops: Sequence[_Op]) -> str:
    """Best-effort minimal conflict: replay in response order, report the first
    operation no state can justify together with its latest same-key
    predecessor in real time."""
    by_resp = sorted(ops, key=lambda o: o.resp)
    state = 0
    keys = sorted({op.key for op in ops})
    kbit = {k: 1 << i for i, k in enumerate(keys)}
    for op in by_resp:
        nstate = _apply(op.kind, op.result, kbit[op.key], state)
        if nstate is None:
            prior = [p for p in by_resp
                     if p.key == op.key and p.resp < op.inv]
            culprit = prior[-1] if prior else None
            msg = (f"{op.kind}({op.key})={op.result} by thread {op.tid} "
                   f"has no consistent placement")
            if culprit is not None:
                msg += (f"; completed {culprit.kind}({culprit.key})={culprit.result} "
                        f"by thread {culprit.tid} precedes it")
            return msg
        state = nstate
    return "no sequential witness exists (conflict spans concurrent operations)"


# -- recording -----------------------------------------------------------------


_RESULT_NAME = {
    ("lookup", True): "found",
    ("lookup", False): "notfound",
    ("insert", True): "success",
    ("insert", False): "exists",
    ("delete", True): "success",
    ("delete", False): "notfound",
}


def record_run(threads: int = 3, ops_per_thread: int = 6, key_space: int = 4,
               with_rebuild: bool = True, seed: int = 1) -> History:
    """Record one small concurrent run against a fresh table."""
    if not 2 <= threads <= 4 or ops_per_thread > 8 or key_space > 4:
        raise ValueError("recording is meant for small histories (2..4 threads, <=8 ops, <=4 keys)")
    domain = ReclaimDomain()
    table = DHashTable(2, mult_hash_a, domain)
    logs: List[List[HistoryEvent]] = [[] for _ in range(threads)]
    barrier = threading.Barrier(threads + (1 if with_rebuild else 0))
    stop = threading.Event()
    windows: List[Tuple[int, int]] = []

    def worker(tid: int) -> None:
        rng = random.Random(seed * 1_000_003 + tid)
        domain.register()
        log = logs[tid]
        try:
            barrier.wait()
            for _ in range(ops_per_thread):
                kind = ("lookup", "insert", "delete")[rng.randrange(3)]
                key = rng.randrange(key_space)
                log.append(HistoryEvent(tid, kind, key, "invoke", None,
                                        time.monotonic_ns()))
                if kind == "lookup":
                    out = table.contains(key)
                elif kind == "insert":
                    out = table.insert(key)
                else:
                    out = table.delete(key)
                log.append(HistoryEvent(tid, kind, key, "response",
                                        _RESULT_NAME[(kind, out)],
                                        time.monotonic_ns()))
        finally:
            domain.unregister()

    def rebuilder() -> None:
        domain.register()
        try:
            barrier.wait()
            flip = 1
            while not stop.is_set():
                t0 = time.monotonic_ns()
                r = table.rebuild(3 if flip else 2,
                                  mult_hash_b if flip else mult_hash_a)
                if r is RebuildResult.SUCCESS:
                    windows.append((t0, time.monotonic_ns()))
                flip ^= 1
        finally:
            domain.unregister()

    ts = [threading.Thread(target=worker, args=(tid,)) for tid in range(threads)]
    rb = threading.Thread(target=rebuilder) if with_rebuild else None
    for t in ts:
        t.start()
    if rb:
        rb.start()
    for t in ts:
        t.join()
    stop.set()
    if rb:
        rb.join()
    domain.register()
    domain.drain()
    table.dispose()
    domain.drain()
    leaked = table.stats.live()
    domain.unregister()
    events = [ev for log in logs for ev in log]
    return History(events=events, rebuild_windows=windows,
                   meta={"threads": threads, "ops_per_thread": ops_per_thread,
                         "key_space": key_space, "with_rebuild": with_rebuild,
                         "seed": seed, "leaked_nodes": leaked})


# -- lemma stress suites ------------------------------------------------------------


@dataclass
class StressResult:
    name: str
    elapsed_s: float
    operations: int
    violations: int
    rebuilds: int
    census_ok: bool
    leaked_nodes: int
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.violations == 0 and self.census_ok and self.leaked_nodes == 0

    def to_dict(self) -> Dict:
        return {
            "suite": self.name,
            "elapsed_s": round(self.elapsed_s, 3),
            "operations": self.operations,
            "violations": self.violations,
            "rebuilds": self.rebuilds,
            "census_ok": self.census_ok,
            "leaked_nodes": self.leaked_nodes,
            "passed": self.passed,
            "detail": self.detail,
        }


class _StressControl:
    __slots__ = ("stop",)

    def __init__(self):
        self.stop = False


def _continuous_rebuild(table: DHashTable, ctl: _StressControl, base: int,
                        counter: List[int]) -> None:
    domain = table.domain
    domain.register()
    try:
        flip = 1
        while not ctl.stop:
            nb = base * 2 if flip else base
            hf = mult_hash_b if flip else mult_hash_a
            if table.rebuild(nb, hf) is RebuildResult.SUCCESS:
                counter[0] += 1
            flip ^= 1
    finally:
        domain.unregister()


def lemma1_stress(seconds: float = 60.0, readers: int = 4, resident: int = 512,
                  seed: int = 1, min_lookups: int = 0,
                  bucket_factory=None) -> StressResult:
    """Readers hammer lookups of never-deleted keys under continuous rebuild.

    Any NotFound on a resident key is a violation.  Runs for at least
    ``seconds`` and, if requested, until ``min_lookups`` lookups accumulated.
    """
    domain = ReclaimDomain()
    kwargs = {} if bucket_factory is None else {"bucket_factory": bucket_factory}
    table = DHashTable(256, mult_hash_a, domain, **kwargs)
    rng = random.Random(seed)
    keys = rng.sample(range(1_000_000), resident)
    domain.register()
    for k in keys:
        table.insert(k)

    ctl = _StressControl()
    counts = [0] * readers
    misses = [0] * readers
    rebuilds = [0]

    def reader(tid: int) -> None:
        domain.register()
        try:
            local = list(keys)
            random.Random(seed + tid).shuffle(local)
            contains = table.contains
            n = 0
            miss = 0
            while not ctl.stop:
                for k in local:
                    if not contains(k):
                        miss += 1
                n += len(local)
                counts[tid] = n
            misses[tid] = miss
        finally:
            domain.unregister()

    threads = [threading.Thread(target=reader, args=(t,)) for t in range(readers)]
    rb = threading.Thread(target=_continuous_rebuild, args=(table, ctl, 256, rebuilds))
    t0 = time.perf_counter()
    for t in threads:
        t.start()
    rb.start()
    while True:
        time.sleep(0.25)
        elapsed = time.perf_counter() - t0
        if elapsed >= seconds and sum(counts) >= min_lookups:
            break
    ctl.stop = True
    for t in threads:
        t.join()
    rb.join()
    elapsed = time.perf_counter() - t0

    domain.drain()
    census_ok = table.snapshot_keys() == sorted(keys)
    placement_ok = table.check_placement()
    table.dispose()
    domain.drain()
    leaked = table.stats.live()
    domain.unregister()
    return StressResult(
        name="lemma1",
        elapsed_s=elapsed,
        operations=sum(counts),
        violations=sum(misses),
        rebuilds=rebuilds[0],
        census_ok=census_ok and placement_ok,
        leaked_nodes=leaked,
        detail=f"{readers} readers, {resident} resident keys",
    )


def lemma2_stress(seconds: float = 10.0, deleters: int = 2, keys_per: int = 64,
                  seed: int = 1, bucket_factory=None) -> StressResult:
    """Each deleter owns disjoint keys and loops insert-then-delete on them.

    The insert must succeed (the key is absent by ownership), and the delete
    of the key known present must succeed, rebuild or not.  The post-run
    census must be exactly the untouched resident set.
    """
    domain = ReclaimDomain()
    kwargs = {} if bucket_factory is None else {"bucket_factory": bucket_factory}
    table = DHashTable(64, mult_hash_a, domain, **kwargs)
    rng = random.Random(seed)
    resident = sorted(rng.sample(range(10_000_000, 11_000_000), 128))
    domain.register()
    for k in resident:
        table.insert(k)

    ctl = _StressControl()
    ops = [0] * deleters
    bad = [0] * deleters
    rebuilds = [0]

    def deleter(tid: int) -> None:
        domain.register()
        try:
            own = [tid * keys_per + j for j in range(keys_per)]
            insert, delete = table.insert, table.delete
            n = b = 0
            while not ctl.stop:
                for k in own:
                    if not insert(k):
                        b += 1
                    if not delete(k):
                        b += 1
                    n += 2
                ops[tid] = n
            bad[tid] = b
        finally:
            domain.unregister()

    threads = [threading.Thread(target=deleter, args=(t,)) for t in range(deleters)]
    rb = threading.Thread(target=_continuous_rebuild, args=(table, ctl, 64, rebuilds))
    t0 = time.perf_counter()
    for t in threads:
        t.start()
    rb.start()
    time.sleep(seconds)
    ctl.stop = True
    for t in threads:
        t.join()
    rb.join()
    elapsed = time.perf_counter() - t0

    domain.drain()
    census = table.snapshot_keys()
    census_ok = census == resident
    table.dispose()
    domain.drain()
    leaked = table.stats.live()
    domain.unregister()
    return StressResult(
        name="lemma2",
        elapsed_s=elapsed,
        operations=sum(ops),
        violations=sum(bad),
        rebuilds=rebuilds[0],
        census_ok=census_ok,
        leaked_nodes=leaked,
        detail=f"{deleters} deleters x {keys_per} owned keys",
    )


def lemma3_stress(seconds: float = 10.0, inserters: int = 2, seed: int = 1,
                  bucket_factory=None) -> StressResult:
    """Inserters add fresh keys under continuous rebuild.

    Every insert must succeed (keys are fresh), the same thread must find the
    key immediately afterwards, and the post-run census must contain every
    inserted key exactly once.
    """
    domain = ReclaimDomain()
    kwargs = {} if bucket_factory is None else {"bucket_factory": bucket_factory}
    table = DHashTable(128, mult_hash_a, domain, **kwargs)
    rng = random.Random(seed)
    resident = sorted(rng.sample(range(1 << 40, (1 << 40) + 1_000_000), 64))
    domain.register()
    for k in resident:
        table.insert(k)

    ctl = _StressControl()
    ops = [0] * inserters
    bad = [0] * inserters
    highwater = [0] * inserters
    rebuilds = [0]

    def inserter(tid: int) -> None:
        domain.register()
        try:
            insert, contains = table.insert, table.contains
            k = tid
            n = b = 0
            while not ctl.stop:
                if not insert(k):
                    b += 1
                if not contains(k):
                    b += 1
                n += 2
                k += inserters
            ops[tid] = n
            highwater[tid] = k
            bad[tid] = b
        finally:
            domain.unregister()

    threads = [threading.Thread(target=inserter, args=(t,)) for t in range(inserters)]
    rb = threading.Thread(target=_continuous_rebuild, args=(table, ctl, 128, rebuilds))
    t0 = time.perf_counter()
    for t in threads:
        t.start()
    rb.start()
    time.sleep(seconds)
    ctl.stop = True
    for t in threads:
        t.join()
    rb.join()
    elapsed = time.perf_counter() - t0

    domain.drain()
    expected = sorted(
        set(resident)
        | {k for tid in range(inserters)
           for k in range(tid, highwater[tid], inserters)}
    )
    census_ok = table.snapshot_keys() == expected
    table.dispose()
    domain.drain()
    leaked = table.stats.live()
    domain.unregister()
    return StressResult(
        name="lemma3",
        elapsed_s=elapsed,
        operations=sum(ops),
        violations=sum(bad),
        rebuilds=rebuilds[0],
        census_ok=census_ok,
        leaked_nodes=leaked,
        detail=f"{inserters} inserters, {sum(ops) // 2} fresh keys",
    )


# -- schedule-forced hazard-window tests ------------------------------------------


REBUILD_POINTS = ("rebuild:cur_set", "rebuild:old_deleted",
                  "rebuild:new_inserted", "rebuild:cur_cleared")

OP_POINTS = {
    "lookup": ("checker:start", "lookup:old", "lookup:hazard", "lookup:new"),
    "delete": ("checker:start", "delete:old", "delete:hazard", "delete:new"),
}


def hazard_schedules() -> Iterator[Tuple[str, ...]]:
    """All reachable label interleavings of one redistribution vs one operation.

    The final rebuild step runs the grace periods and the table swap, which
    wait for the operation's critical section; label sequences that place that
    step inside the operation's open section cannot occur (the wait would
    forbid them) and are filtered out.
    """
    for merge in _sched.interleavings(["rebuild"] * 4, ["op"] * 4):
        ridx = [i for i, l in enumerate(merge) if l == "rebuild"]
        oidx = [i for i, l in enumerate(merge) if l == "op"]
        if oidx[0] < ridx[3] < oidx[3]:
            continue
        yield merge


def run_hazard_case(kind: str, labels: Sequence[str], key: int = 5) -> dict:
    """Replay one schedule; returns outcome facts for the caller to assert."""
    if kind not in OP_POINTS:
        raise ValueError(f"kind must be lookup or delete, not {kind!r}")
    domain = ReclaimDomain()
    table = DHashTable(1, mult_hash_a, domain)
    domain.register()
    table.insert(key)

    driver = _sched.ScheduleDriver(
        {"rebuild": set(REBUILD_POINTS), "op": set(OP_POINTS[kind])}, timeout=20)
    out: dict = {}

    def op_runner() -> None:
        domain.register()
        driver.attach("op")
        try:
            driver.hit("checker:start")
            if kind == "lookup":
                out["result"] = table.contains(key)
            else:
                out["result"] = table.delete(key)
        except Exception as exc:  # noqa: BLE001 - surfaced via out
            out["error"] = exc
        finally:
            driver.complete("op")
            domain.unregister()

    def rebuild_runner() -> None:
        domain.register()
        driver.attach("rebuild")
        try:
            out["rebuild"] = table.rebuild(2, mult_hash_b)
        except Exception as exc:  # noqa: BLE001
            out["error"] = exc
        finally:
            driver.complete("rebuild")
            domain.unregister()

    with _sched.installed(driver):
        t_op = threading.Thread(target=op_runner, name="hazard-op")
        t_rb = threading.Thread(target=rebuild_runner, name="hazard-rebuild")
        t_rb.start()
        t_op.start()
        driver.run(labels, tolerate_stalls=True)
        t_op.join(20)
        t_rb.join(20)
        if t_op.is_alive() or t_rb.is_alive():
            raise _sched.ScheduleError(f"threads hung under {labels}: {driver.trace}")

    if "error" in out:
        raise out["error"]
    domain.drain()
    out["census"] = table.snapshot_keys()
    out["nbuckets"] = table.nbuckets
    table.dispose()
    domain.drain()
    out["leaked"] = table.stats.live()
    domain.unregister()
    return out
