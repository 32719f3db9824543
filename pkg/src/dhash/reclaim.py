"""Quiescent-state based deferred reclamation.

Readers bracket access to shared nodes with enter/exit of a critical section;
any reference loaded inside the section stays valid until the section ends.
Writers unlink a node first, then hand it to :meth:`ReclaimDomain.defer_free`;
the reclamation action runs only after every critical section that was active
at hand-off time has ended.

The scheme is quiescent-state tracking with an owner-local nesting counter
plus a handshake for waiters: :meth:`ReclaimDomain.wait_for_readers` passes a
record the moment it observes depth zero, and otherwise raises the record's
``report`` flag, which the reader clears on its next outermost exit.  Either
observation proves a quiescent point after the wait began, so the section
seen at snapshot time has ended.  The read side is plain attribute loads and
stores (no read-modify-write, no locks); the flag test costs one slot load on
outermost exits only.

Threads must register with a domain before entering sections; the harness (or
the embedding application) owns registration.  Visibility of the per-thread
fields relies on CPython's global interpreter lock, which orders plain loads
and stores sequentially; every cross-thread mutation elsewhere in the package
goes through a per-word lock.

Reclamation actions used by the table poison the freed node (its successor
word becomes None), so a traversal that ever touches reclaimed memory fails
loudly instead of returning stale data.
"""

from __future__ import annotations

import threading
import time
from typing import Any, Callable, List, Optional, Tuple


class ReclaimError(RuntimeError):
    """Misuse of the reclamation protocol (wrong thread, bad nesting, ...)."""


class ReaderRecord:
    """Per-thread registration handle; doubles as the critical-section guard.

    A record is owned by exactly one thread and must not be shared.  Entering
    is reentrant; protection lasts until the outermost exit.
    """

    __slots__ = ("domain", "thread", "depth", "report", "online")

    def __init__(self, domain: "ReclaimDomain"):
        self.domain = domain
        self.thread = threading.current_thread()
        self.depth = 0
        self.report = False
        self.online = True

    def enter(self) -> "ReaderRecord":
        self.depth += 1
        return self

    def exit(self) -> None:
        d = self.depth - 1
        if d < 0:
            raise ReclaimError("critical section exited more times than entered")
        self.depth = d
        if not d and self.report:
            self.report = False  # ack a pending wait: this is a quiescent point

    __enter__ = enter

    def __exit__(self, *exc) -> None:
        self.exit()

    def __repr__(self) -> str:
        return f"<ReaderRecord {self.thread.name!r} depth={self.depth}>"


class ReclaimDomain:
    """A reclamation domain: registered reader threads plus deferred callbacks."""

    def __init__(self):
        self.epoch = 1
        self._records: List[ReaderRecord] = []
        self._reg_lock = threading.Lock()
        self._sync_lock = threading.Lock()
        self._cb_lock = threading.Lock()
        self._callbacks: List[Tuple[int, Any, Callable[[Any], None]]] = []
        self._tls = threading.local()

    # -- registration ------------------------------------------------------

    def register(self) -> ReaderRecord:
        """Register the calling thread; idempotent."""
        rec = getattr(self._tls, "rec", None)
        if rec is not None and rec.online:
            return rec
        rec = ReaderRecord(self)
        self._tls.rec = rec
        with self._reg_lock:
            self._records.append(rec)
        return rec

    def unregister(self) -> None:
        rec = getattr(self._tls, "rec", None)
        if rec is None or not rec.online:
            return
        if rec.depth:
            raise ReclaimError("cannot unregister inside a critical section")
        rec.online = False
        with self._reg_lock:
            self._records.remove(rec)
        self._tls.rec = None

    def reader(self) -> ReaderRecord:
        """The calling thread's record; raises if the thread never registered."""
        rec = getattr(self._tls, "rec", None)
        if rec is None or not rec.online:
            raise ReclaimError("calling thread is not registered with this domain")
        return rec

    def in_critical_section(self) -> bool:
        rec = getattr(self._tls, "rec", None)
        return rec is not None and rec.depth > 0

    # -- read side -----------------------------------------------------------

    def enter_critical(self) -> ReaderRecord:
        return self.reader().enter()

    def exit_critical(self, guard: ReaderRecord) -> None:
        rec = getattr(self._tls, "rec", None)
        if guard is not rec:
            raise ReclaimError("guard released by a thread that does not own it")
        guard.exit()

    def reading(self) -> ReaderRecord:
        """Context manager form: ``with domain.reading(): ...``."""
        return self.reader()

    # -- write side ----------------------------------------------------------

    def wait_for_readers(self) -> None:
        """Return once every critical section active at call time has ended."""
        rec = getattr(self._tls, "rec", None)
        if rec is not None and rec.depth:
            raise ReclaimError("wait_for_readers inside a critical section would deadlock")
        with self._sync_lock:
            target = self.epoch + 1
            self.epoch = target
            with self._reg_lock:
                records = list(self._records)
            waiting = []
            for r in records:
                if r.depth:
                    r.report = True
                    waiting.append(r)
            for r in waiting:
                spins = 0
                while r.online and r.depth and r.report:
                    if not r.thread.is_alive():
                        raise ReclaimError(f"registered thread died inside a critical section: {r!r}")
                    spins += 1
                    time.sleep(0 if spins < 64 else 0.0002)
                r.report = False
            ready = self._take_ready(target)
        for _tag, obj, action in ready:
            action(obj)

    def defer_free(self, obj: Any, action: Callable[[Any], None]) -> None:
        """Run ``action(obj)`` after a future grace period; never blocks.

        Safe to call inside a critical section; ``obj`` must already be
        unreachable from every data-structure entry point.
        """
        with self._cb_lock:
            self._callbacks.append((self.epoch, obj, action))

    def drain(self) -> None:
        """Execute all pending deferred callbacks; no thread may be reading."""
        for _ in range(4):
            if not self.pending():
                return
            self.wait_for_readers()
        if self.pending():
            raise ReclaimError("drain did not converge; callbacks keep being enqueued")

    def pending(self) -> int:
        with self._cb_lock:
            return len(self._callbacks)

    def _take_ready(self, target: int):
        with self._cb_lock:
            ready = [item for item in self._callbacks if item[0] < target]
            if ready:
                self._callbacks = [item for item in self._callbacks if item[0] >= target]
        return ready


_default: Optional[ReclaimDomain] = None
_default_lock = threading.Lock()


def default_domain() -> ReclaimDomain:
    """Process-wide domain shared by tables that are not given their own."""
    global _default
    if _default is None:
        with _default_lock:
            if _default is None:
                _default = ReclaimDomain()
    return _default


class _LoadStorePair:
    """Baseline for the read-side overhead benchmark: one load plus one store."""

    __slots__ = ("a", "b")

    def __init__(self):
        self.a = 0
        self.b = 0

    def op(self):
        self.a = self.b


def reader_overhead_benchmark(iterations: int = 200_000, repeats: int = 5) -> dict:
    """Compare enter+exit of an empty critical section to a plain load/store pair.

    Both sides are dispatched the same way (a bound-method call per operation),
    so the ratio isolates what the reclamation fast path does beyond plain
    attribute loads and stores.  Returns per-operation nanoseconds and their
    ratio, using the best repeat of each side.
    """
    domain = ReclaimDomain()
    rec = domain.register()
    base = _LoadStorePair()
    enter, exit_, op = rec.enter, rec.exit, base.op
    r = range(iterations)

    def best(fn) -> float:
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return min(times)

    def guard_loop():
        for _ in r:
            enter()
            exit_()

    def base_loop():
        for _ in r:
            op()
            op()

    guard_s = best(guard_loop)
    base_s = best(base_loop)
    domain.unregister()
    guard_ns = guard_s / (2 * iterations) * 1e9
    base_ns = base_s / (2 * iterations) * 1e9
    return {
        "guard_ns_per_op": guard_ns,
        "baseline_ns_per_op": base_ns,
        "ratio": guard_ns / base_ns if base_ns else float("inf"),
    }
