"""Named pause points for schedule-controlled concurrency tests.

Hot paths contain call sites of the form::

    ctl = schedule.controller
    if ctl is not None:
        ctl.hit("lookup:old")

With no controller installed (the default) a site costs one module attribute
load and a branch.  Tests install a :class:`ScheduleDriver` to stop threads at
named points and replay exact interleavings; the driver releases one thread at
a time and waits for it to reach its next managed point, so every step of a
schedule runs with all other participants parked.
"""

from __future__ import annotations

import threading
import time
from contextlib import contextmanager
from typing import Iterable, Iterator, Optional, Sequence

controller: Optional["ScheduleDriver"] = None


class ScheduleError(RuntimeError):
    """A scheduled thread failed to reach its next pause point in time."""


class ScheduleDriver:
    """Serializes attached threads through managed pause points.

    ``managed`` maps a thread label to the set of point names at which that
    thread must park.  Unattached threads and unmanaged points pass through
    without blocking.  A thread that finished its work calls
    :meth:`complete`, after which pending steps for it are skipped.
    """

    def __init__(self, managed: dict, timeout: float = 20.0):
        self._managed = {label: set(points) for label, points in managed.items()}
        self._cv = threading.Condition()
        self._parked: dict = {}
        self._grants: dict = {label: 0 for label in managed}
        self._completed: set = set()
        self._tls = threading.local()
        self._timeout = timeout
        self.trace: list = []

    def attach(self, label: str) -> None:
        if label not in self._managed:
            raise ValueError(f"unknown schedule label {label!r}")
        self._tls.label = label

    def hit(self, point: str) -> None:
        label = getattr(self._tls, "label", None)
        if label is None or point not in self._managed[label]:
            return
        deadline = time.monotonic() + self._timeout
        with self._cv:
            self._parked[label] = point
            self.trace.append(("park", label, point))
            self._cv.notify_all()
            while self._grants[label] == 0:
                if not self._cv.wait(timeout=deadline - time.monotonic()):
                    raise ScheduleError(f"no grant for {label!r} at {point!r}: {self.trace}")
            self._grants[label] -= 1
            del self._parked[label]
            self.trace.append(("run", label, point))
            self._cv.notify_all()

    def complete(self, label: str) -> None:
        with self._cv:
            self._completed.add(label)
            self.trace.append(("complete", label))
            self._cv.notify_all()

    def wait_parked(self, label: str) -> Optional[str]:
        """Block until ``label`` parks (returns the point) or completes (None)."""
        deadline = time.monotonic() + self._timeout
        with self._cv:
            while label not in self._parked and label not in self._completed:
                if not self._cv.wait(timeout=deadline - time.monotonic()):
                    raise ScheduleError(f"{label!r} neither parked nor done: {self.trace}")
            return self._parked.get(label)

    def _await_motion(self, label: str, timeout: float) -> bool:
        """True once the last grant is consumed and ``label`` parked again or
        completed; False if that does not happen within ``timeout``."""
        deadline = time.monotonic() + timeout
        with self._cv:
            while (self._grants[label] > 0
                   or (label not in self._parked and label not in self._completed)):
                if not self._cv.wait(timeout=deadline - time.monotonic()):
                    return False
        return True

    def step(self, label: str) -> Optional[str]:
        """Release ``label`` from its park and wait for its next park or completion.

        Returns the point the thread parked at next, or None if it completed
        (or had already completed, in which case the step is a no-op).
        """
        point = self.wait_parked(label)
        if point is None:
            return None
        with self._cv:
            self._grants[label] += 1
            self._cv.notify_all()
        if not self._await_motion(label, self._timeout):
            raise ScheduleError(f"{label!r} neither re-parked nor completed: {self.trace}")
        with self._cv:
            return self._parked.get(label)

    def try_step(self, label: str, grace: float = 0.5) -> str:
        """Like :meth:`step`, but tolerant of blocked threads.

        A thread that neither parks nor completes within ``grace`` reports
        "stalled" (it is blocked outside the managed points, for example
        waiting out a grace period, and cannot take its turn yet).  A granted
        thread that fails to re-park within ``grace`` reports "running"; its
        later tokens will find it stalled or done.
        """
        deadline = time.monotonic() + grace
        with self._cv:
            while label not in self._parked and label not in self._completed:
                if not self._cv.wait(timeout=deadline - time.monotonic()):
                    return "stalled"
            if label in self._completed and label not in self._parked:
                return "done"
            self._grants[label] += 1
            self._cv.notify_all()
        return "ok" if self._await_motion(label, grace) else "running"

    def run(self, labels: Sequence[str], tolerate_stalls: bool = False) -> None:
        """Issue one step per label in order.

        With ``tolerate_stalls`` a stalled thread's token is retried after the
        next successful step (the literal interleaving is unreachable then;
        the run degenerates to the closest reachable one).
        """
        if not tolerate_stalls:
            for label in labels:
                self.step(label)
            return
        queue = list(labels)
        stalled: list = []
        while queue:
            label = queue.pop(0)
            status = self.try_step(label)
            if status == "stalled":
                stalled.append(label)
                continue
            if stalled:
                queue = stalled + queue
                stalled = []


@contextmanager
def installed(driver: ScheduleDriver) -> Iterator[ScheduleDriver]:
    """Install ``driver`` as the process-wide hook controller."""
    global controller
    if controller is not None:
        raise RuntimeError("a schedule controller is already installed")
    controller = driver
    try:
        yield driver
    finally:
        controller = None


def interleavings(a: Sequence, b: Sequence) -> Iterator[tuple]:
    """All order-preserving merges of two sequences."""
    if not a:
        yield tuple(b)
        return
    if not b:
        yield tuple(a)
        return
    for rest in interleavings(a[1:], b):
        yield (a[0],) + rest
    for rest in interleavings(a, b[1:]):
        yield (b[0],) + rest
