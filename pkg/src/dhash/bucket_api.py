"""The bucket-set seam: what a set algorithm must provide to back the table.

Any implementation with this surface can serve as the table's bucket type:

* ``find(key) -> (found, prev, cur, nxt)`` snapshot search over live nodes,
* ``insert(node) -> InsertResult`` with set semantics (EXISTS on a live
  duplicate) honoring the REFUSED signal once the owning table published a
  replacement,
* ``delete(key, flag) -> node | None`` two-stage deletion, where the
  IS_BEING_DISTRIBUTED flag surrenders the unlinked node to the caller
  without reclaiming it,
* ``first() / iter_nodes()`` an ordered traversal entry point for the
  rebuilder and for whole-table scans,
* a ``progress`` class attribute (``"lock_free"`` or ``"blocking"``) that the
  table's progress guarantee inherits.

Implementations must also declare how they tolerate node reuse during
redistribution: the shipped lock-free list re-validates the predecessor word
before advancing (its marked-word discipline), while the blocking variant
below holds an exclusive lock across structural changes.

:func:`conformance_suite` exercises a candidate against the contract clause
by clause and is itself the oracle for the shipped implementations.
"""

from __future__ import annotations

import random
import threading
from dataclasses import dataclass, field
from typing import Callable, List, Optional

from . import schedule as _sched
from .ordered_set import (
    IS_BEING_DISTRIBUTED,
    LOGICALLY_REMOVED,
    InsertResult,
    LockFreeOrderedList,
    Node,
)
from .reclaim import ReclaimDomain


class LockedOrderedList:
    """Contract-conformant ordered set using one mutex per list.

    Deliberately different from the lock-free list: traversal and structural
    changes happen under an exclusive lock, and physical unlinking is
    synchronous.  Flag words are still mutated through the per-cell atomic
    helpers because the table's hazard path marks nodes without taking the
    list lock.
    """

    __slots__ = ("head", "domain", "_retire", "rebuild_guard", "_lock")

    progress = "blocking"

    def __init__(self, domain, retire: Optional[Callable[[Node], None]] = None,
                 rebuild_guard=None):
        from .ordered_set import Cell, poison_node

        self.head = Cell()
        self.domain = domain
        if retire is None:
            retire = lambda node: domain.defer_free(node, poison_node)
        self._retire = retire
        self.rebuild_guard = rebuild_guard
        self._lock = threading.Lock()

    def _scan(self, key: int):
        """Under the lock: unlink whatever is marked, then locate ``key``."""
        prev = self.head
        cur = prev.succ[0]
        while cur is not None:
            nxt, flags = cur.succ
            if flags:
                prev.set_ptr_keep_flags(nxt)
                if not flags & IS_BEING_DISTRIBUTED:
                    self._retire(cur)
                cur = nxt
                continue
            if cur.key >= key:
                return prev, cur, nxt
            prev = cur
            cur = nxt
        return prev, None, None

    def find(self, key: int):
        with self._lock:
            prev, cur, nxt = self._scan(key)
            return (cur is not None and cur.key == key, prev, cur, nxt)

    def insert(self, node: Node) -> InsertResult:
        with self._lock:
            guard_tbl = self.rebuild_guard
            if guard_tbl is not None and guard_tbl.replacement is not None:
                return InsertResult.REFUSED
            prev, cur, _nxt = self._scan(node.key)
            if cur is not None and cur.key == node.key:
                return InsertResult.EXISTS
            node.set_ptr_keep_flags(cur)
            prev.set_ptr_keep_flags(node)
            return InsertResult.SUCCESS

    def delete(self, key: int, flag: int) -> Optional[Node]:
        if flag not in (LOGICALLY_REMOVED, IS_BEING_DISTRIBUTED):
            raise ValueError("flag must be exactly one of the two mark bits")
        with self._lock:
            prev, cur, nxt = self._scan(key)
            if cur is None or cur.key != key:
                return None
            if flag == IS_BEING_DISTRIBUTED:
                if not cur.cas(nxt, 0, nxt, IS_BEING_DISTRIBUTED):
                    return None  # a racing delete marked it first
                prior = 0
            else:
                prior = cur.fetch_or_flags(LOGICALLY_REMOVED)
                if prior & LOGICALLY_REMOVED:
                    return None
            prev.set_ptr_keep_flags(cur.succ[0])
            if flag == LOGICALLY_REMOVED and not prior & IS_BEING_DISTRIBUTED:
                self._retire(cur)
            return cur

    def first(self) -> Optional[Node]:
        return self.head.succ[0]

    def iter_nodes(self):
        cur = self.head.succ[0]
        while cur is not None:
            nxt, flags = cur.succ
            yield cur, flags
            cur = nxt

    def live_keys(self) -> list:
        return [n.key for n, f in self.iter_nodes() if not f]


@dataclass
class ClauseResult:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class ConformanceReport:
    implementation: str
    clauses: List[ClauseResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.clauses)

    def failed_clauses(self) -> List[str]:
        return [c.name for c in self.clauses if not c.passed]

    def __str__(self) -> str:
        lines = [f"conformance: {self.implementation}"]
        for c in self.clauses:
            mark = "ok" if c.passed else "FAIL"
            lines.append(f"  [{mark}] {c.name}" + (f": {c.detail}" if c.detail else ""))
        return "\n".join(lines)


def conformance_suite(factory: Callable[..., object], *, seed: int = 7,
                      ops: int = 20_000) -> ConformanceReport:
    """Run the contract suite against lists built by ``factory``.

    ``factory(domain, retire=..., rebuild_guard=...)`` must return a fresh
    bucket-set instance.  Each clause failure is reported individually.
    """
    name = getattr(factory, "__name__", repr(factory))
    report = ConformanceReport(implementation=name)
    checks = [
        ("sequential-oracle", _clause_sequential_oracle),
        ("snapshot-contract", _clause_snapshot),
        ("flag-semantics", _clause_flags),
        ("marked-invisibility", _clause_marked_invisible),
        ("link-refusal", _clause_refusal),
        ("concurrent-membership", _clause_concurrent),
        ("suspension-progress", _clause_suspension),
    ]
    for clause_name, fn in checks:
        try:
            detail = fn(factory, seed, ops) or ""
            report.clauses.append(ClauseResult(clause_name, True, detail))
        except AssertionError as exc:
            report.clauses.append(ClauseResult(clause_name, False, str(exc)))
        except Exception as exc:  # a crash is a failure of the clause, not the suite
            report.clauses.append(ClauseResult(clause_name, False, f"{type(exc).__name__}: {exc}"))
    return report


def _fresh(factory):
    domain = ReclaimDomain()
    domain.register()
    return domain, factory(domain)


def _clause_sequential_oracle(factory, seed, ops):
    domain, lst = _fresh(factory)
    rng = random.Random(seed)
    oracle = set()
    with domain.reading():
        for _ in range(ops):
            key = rng.randrange(256)
            op = rng.random()
            if op < 0.5:
                found = lst.find(key)[0]
                assert found == (key in oracle), f"find({key}) disagrees with oracle"
            elif op < 0.75:
                r = lst.insert(Node(key))
                expect = InsertResult.EXISTS if key in oracle else InsertResult.SUCCESS
                assert r == expect, f"insert({key}) -> {r}, oracle says {expect}"
                oracle.add(key)
            else:
                got = lst.delete(key, LOGICALLY_REMOVED)
                assert (got is not None) == (key in oracle), f"delete({key}) disagrees"
                oracle.discard(key)
        assert sorted(oracle) == lst.live_keys(), "final membership diverged"
    domain.unregister()
    return f"{ops} ops"


def _clause_snapshot(factory, seed, ops):
    domain, lst = _fresh(factory)
    with domain.reading():
        for key in (30, 10, 20):
            lst.insert(Node(key))
        found, prev, cur, nxt = lst.find(20)
        assert found and cur.key == 20, "exact match not reported"
        assert prev.succ[0] is cur, "prev does not address the word linking cur"
        assert nxt is not None and nxt.key == 30, "next is not cur's successor"
        found, _p, cur, _n = lst.find(15)
        assert not found and cur.key == 20, "cur must be first live key >= probe"
        found, _p, cur, _n = lst.find(99)
        assert not found and cur is None, "probe beyond the tail must report null"
        assert lst.live_keys() == [10, 20, 30], "keys not in sorted order"
    domain.unregister()


def _clause_flags(factory, seed, ops):
    domain, lst = _fresh(factory)
    with domain.reading():
        lst.insert(Node(1))
        lst.insert(Node(2))
        got = lst.delete(1, IS_BEING_DISTRIBUTED)
        assert got is not None and got.key == 1, "distribution claim failed"
        assert got.succ is not None and got.succ[1] & IS_BEING_DISTRIBUTED, \
            "surrendered node must carry the distribution bit"
    domain.wait_for_readers()
    domain.drain()
    assert got.succ is not None, "distribution-claimed node must not be reclaimed"
    with domain.reading():
        other = factory(domain)
        from .ordered_set import clean_flag
        clean_flag(got, IS_BEING_DISTRIBUTED)
        assert other.insert(got) == InsertResult.SUCCESS, "surrendered node not re-insertable"
        assert other.live_keys() == [1]
        gone = lst.delete(2, LOGICALLY_REMOVED)
        assert gone is not None, "plain delete failed"
    domain.wait_for_readers()
    domain.drain()
    assert gone.succ is None, "deleted node must be reclaimed after a grace period"
    domain.unregister()


def _clause_marked_invisible(factory, seed, ops):
    domain, lst = _fresh(factory)
    with domain.reading():
        for key in (1, 2, 3):
            lst.insert(Node(key))
        node = lst.lookup_node(2) if hasattr(lst, "lookup_node") else lst.find(2)[2]
        node.fetch_or_flags(LOGICALLY_REMOVED)
        assert lst.find(2)[0] is False, "marked node must never be found"
        assert lst.live_keys() == [1, 3]
        assert lst.find(2)[0] is False
    domain.unregister()


def _clause_refusal(factory, seed, ops):
    class _FakeTable:
        replacement = None

    domain = ReclaimDomain()
    domain.register()
    tbl = _FakeTable()
    lst = factory(domain, rebuild_guard=tbl)
    with domain.reading():
        assert lst.insert(Node(1)) == InsertResult.SUCCESS
        tbl.replacement = object()
        assert lst.insert(Node(2)) == InsertResult.REFUSED, \
            "links must be refused once a replacement is published"
        assert lst.live_keys() == [1]
    domain.unregister()


def _clause_concurrent(factory, seed, ops):
    domain = ReclaimDomain()
    lst = factory(domain)
    nthreads, span = 4, 64
    errors: List[str] = []

    def worker(tid: int) -> None:
        rng = random.Random(seed * 31 + tid)
        domain.register()
        mine = set()
        try:
            with domain.reading():
                base = tid * span
                for _ in range(3000):
                    key = base + rng.randrange(span)
                    if rng.random() < 0.5:
                        if lst.insert(Node(key)) == InsertResult.SUCCESS:
                            mine.add(key)
                        elif key not in mine:
                            errors.append(f"duplicate reported for foreign-free key {key}")
                    else:
                        got = lst.delete(key, LOGICALLY_REMOVED)
                        if got is not None:
                            mine.discard(key)
                        elif key in mine:
                            errors.append(f"owned key {key} missing")
                for key in sorted(mine):
                    if not lst.find(key)[0]:
                        errors.append(f"final member {key} not found")
        except Exception as exc:  # noqa: BLE001 - report into the clause
            errors.append(f"worker {tid}: {type(exc).__name__}: {exc}")
        finally:
            domain.unregister()

    threads = [threading.Thread(target=worker, args=(t,)) for t in range(nthreads)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    domain.register()
    domain.drain()
    domain.unregister()
    assert not errors, "; ".join(errors[:4])
    return f"{nthreads} threads"


def _clause_suspension(factory, seed, ops):
    domain = ReclaimDomain()
    lst = factory(domain)
    if getattr(lst, "progress", "blocking") != "lock_free":
        return "skipped (declared blocking)"

    driver = _sched.ScheduleDriver({"victim": {"list:insert:link"}}, timeout=10)

    def victim() -> None:
        domain.register()
        driver.attach("victim")
        try:
            with domain.reading():
                lst.insert(Node(500))
        finally:
            driver.complete("victim")
            domain.unregister()

    with _sched.installed(driver):
        vt = threading.Thread(target=victim)
        vt.start()
        try:
            driver.wait_parked("victim")  # victim is mid-insert, about to link
            domain.register()
            try:
                with domain.reading():
                    for key in range(40):
                        assert lst.insert(Node(key)) == InsertResult.SUCCESS
                    for key in range(0, 40, 2):
                        assert lst.delete(key, LOGICALLY_REMOVED) is not None
                    assert lst.find(1)[0]
            finally:
                domain.unregister()
        finally:
            try:
                while driver.step("victim") is not None:
                    pass  # its link raced our updates; release each retry
            except _sched.ScheduleError:
                pass
            vt.join(5)
        assert not vt.is_alive(), "victim failed to finish after release"
    domain.register()
    with domain.reading():
        assert lst.find(500)[0], "victim's insert was lost"
    domain.unregister()
    return "progress with one thread suspended at its link point"
