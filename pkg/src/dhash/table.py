"""Hash table with a runtime-replaceable hash function (live rebuild).

The handle users hold (:class:`DHashTable`) stays valid across rebuilds; it
points at the current bucket table and swaps that pointer when a rebuild
installs its replacement.  A rebuild walks the retiring table bucket by
bucket and redistributes every node with ordinary list operations: pull the
head node out under the IS_BEING_DISTRIBUTED mark, publish it in the table's
*hazard reference* for the interval in which it is in neither table, then
reinsert it under the new hash function and clear the reference.

Readers tolerate an in-progress rebuild by checking three places in a fixed
order: the retiring table's bucket, then the hazard reference, then the
replacement's bucket.  As long as a key is continuously present, at least one
of the three checks observes it, whichever side of the per-node transfer the
search lands on.  CPython's interpreter lock already gives these loads and
stores a sequential order; the named schedule points below sit exactly at the
positions where paired write/read fences would go, and double as pause points
for the interleaving tests.

Inserts decide which table takes the new key.  A bucket of a table that has
published a replacement refuses new links (the check happens inside the link
step, see the list module), so the full decision is: try the current table's
bucket; if that bucket refuses, the key belongs to the replacement, but first
re-check the retiring bucket and the hazard reference so a key that is still
migrating is reported as a duplicate rather than inserted twice.

Values are opaque payloads attached to nodes, readable through
:meth:`DHashTable.guarded_read` / :meth:`DHashTable.get`.
"""

from __future__ import annotations

import threading
from enum import IntEnum
from typing import Any, Callable, List, Optional

from . import schedule as _sched
from .ordered_set import (
    IS_BEING_DISTRIBUTED,
    LOGICALLY_REMOVED,
    InsertResult,
    LockFreeOrderedList,
    Node,
    clean_flag,
)
from .reclaim import ReclaimDomain, default_domain

BucketFactory = Callable[..., LockFreeOrderedList]


class RebuildResult(IntEnum):
    SUCCESS = 0
    BUSY = 1          # another rebuild holds the lock
    NOT_REQUIRED = 2  # the trigger predicate declined


class TableStats:
    """Node allocation accounting; the leak oracle for tests and teardown."""

    __slots__ = ("_lk", "allocated", "reclaimed")

    def __init__(self):
        self._lk = threading.Lock()
        self.allocated = 0
        self.reclaimed = 0

    def inc_allocated(self) -> None:
        with self._lk:
            self.allocated += 1

    def inc_reclaimed(self) -> None:
        with self._lk:
            self.reclaimed += 1

    def live(self) -> int:
        with self._lk:
            return self.allocated - self.reclaimed


class _Table:
    """One bucket array plus its hash function; `replacement` links the next."""

    __slots__ = ("nbuckets", "hash_fn", "buckets", "replacement")

    def __init__(self, nbuckets: int, hash_fn: Callable[[int], int],
                 domain: ReclaimDomain, retire, bucket_factory: BucketFactory):
        if nbuckets < 1:
            raise ValueError("a table needs at least one bucket")
        self.nbuckets = nbuckets
        self.hash_fn = hash_fn
        self.replacement: Optional[_Table] = None
        self.buckets: List[LockFreeOrderedList] = [
            bucket_factory(domain, retire=retire, rebuild_guard=self)
            for _ in range(nbuckets)
        ]

    def bucket_for(self, key: int) -> LockFreeOrderedList:
        return self.buckets[self.hash_fn(key) % self.nbuckets]


class DHashTable:
    """Concurrent integer-keyed map whose hash function can be rebuilt live.

    lookup/insert/delete are callable from any number of registered threads
    and are lock-free given the shipped bucket list.  ``rebuild`` blocks (it
    waits for grace periods) and is serialized per table; it must be called
    outside any critical section.
    """

    def __init__(self, nbuckets: int, hash_fn: Callable[[int], int],
                 domain: Optional[ReclaimDomain] = None,
                 bucket_factory: BucketFactory = LockFreeOrderedList):
        self._domain = domain if domain is not None else default_domain()
        self.stats = TableStats()
        self._bucket_factory = bucket_factory
        self._current = _Table(nbuckets, hash_fn, self._domain, self._retire_node,
                               bucket_factory)
        self._rebuild_lock = threading.Lock()
        self._rebuild_cur: Optional[Node] = None  # hazard reference; rebuilder-only writes
        self._trigger: Optional[Callable[["DHashTable"], bool]] = None

    # -- plumbing ------------------------------------------------------------

    @property
    def domain(self) -> ReclaimDomain:
        return self._domain

    @property
    def nbuckets(self) -> int:
        return self._current.nbuckets

    @property
    def hash_fn(self) -> Callable[[int], int]:
        return self._current.hash_fn

    def _new_node(self, key: int, value: Any) -> Node:
        self.stats.inc_allocated()
        return Node(key, value)

    def _retire_node(self, node: Node) -> None:
        self._domain.defer_free(node, self._reclaim_node)

    def _reclaim_node(self, node: Node) -> None:
        node.succ = None  # poison: see the reclaim module
        self.stats.inc_reclaimed()

    def _free_unpublished(self, node: Node) -> None:
        # Fresh node nobody else ever saw; no grace period needed.
        node.succ = None
        self.stats.inc_reclaimed()

    # -- operations ------------------------------------------------------------

    def lookup(self, key: int) -> Optional[Node]:
        """Return the live node holding ``key``, or None.

        The reference is only dereferenceable inside a caller-held critical
        section; use :meth:`guarded_read` to read the value safely.
        """
        rec = self._domain.reader()
        rec.enter()
        try:
            ctl = _sched.controller
            htp = self._current
            found, _p, cur, _n = htp.bucket_for(key).find(key)
            if ctl is not None:
                ctl.hit("lookup:old")
            if found:
                return cur
            new = htp.replacement
            if new is None:
                return None
            cur = self._rebuild_cur
            if cur is not None and cur.key == key and not cur.succ[1] & LOGICALLY_REMOVED:
                return cur
            if ctl is not None:
                ctl.hit("lookup:hazard")
            found, _p, cur, _n = new.bucket_for(key).find(key)
            if ctl is not None:
                ctl.hit("lookup:new")
            return cur if found else None
        finally:
            rec.exit()

    def contains(self, key: int) -> bool:
        return self.lookup(key) is not None

    def guarded_read(self, key: int, reader: Callable[[Any], Any]) -> Any:
        """Run ``reader`` on the value stored under ``key`` inside a guard.

        Raises KeyError when the key is absent.  ``reader`` must not block on
        reclamation or call rebuild.
        """
        rec = self._domain.reader()
        rec.enter()
        try:
            node = self.lookup(key)
            if node is None:
                raise KeyError(key)
            return reader(node.value)
        finally:
            rec.exit()

    def get(self, key: int, default: Any = None) -> Any:
        try:
            return self.guarded_read(key, lambda v: v)
        except KeyError:
            return default

    def insert(self, key: int, value: Any = None) -> bool:
        """Insert ``key``; False means a live node with the key already exists."""
        rec = self._domain.reader()
        rec.enter()
        try:
            htp = self._current
            node = self._new_node(key, value)
            r = htp.bucket_for(key).insert(node)
            if r is InsertResult.SUCCESS:
                return True
            if r is InsertResult.EXISTS:
                self._free_unpublished(node)
                return False
            # Refused: a replacement is published, so the key belongs there.
            # Check the places a still-migrating key can live, in the same
            # order lookups use, then commit to the replacement's bucket.
            new = htp.replacement
            found, _p, _c, _n = htp.bucket_for(key).find(key)
            if found:
                self._free_unpublished(node)
                return False
            cur = self._rebuild_cur
            if cur is not None and cur.key == key and not cur.succ[1] & LOGICALLY_REMOVED:
                self._free_unpublished(node)
                return False
            r = new.bucket_for(key).insert(node)
            if r is InsertResult.SUCCESS:
                return True
            if r is InsertResult.EXISTS:
                self._free_unpublished(node)
                return False
            raise AssertionError("replacement table refused a link mid-rebuild")
        finally:
            rec.exit()

    def delete(self, key: int) -> bool:
        """Delete ``key``; False means no live node with the key was found."""
        rec = self._domain.reader()
        rec.enter()
        try:
            ctl = _sched.controller
            htp = self._current
            got = htp.bucket_for(key).delete(key, LOGICALLY_REMOVED)
            if ctl is not None:
                ctl.hit("delete:old")
            if got is not None:
                return True
            new = htp.replacement
            if new is None:
                return False
            cur = self._rebuild_cur
            if cur is not None and cur.key == key:
                prior = cur.fetch_or_flags(LOGICALLY_REMOVED)
                if not prior & LOGICALLY_REMOVED:
                    return True
                # Someone else deleted the migrating node; fall through to the
                # replacement in case the key was re-inserted there since.
            if ctl is not None:
                ctl.hit("delete:hazard")
            got = new.bucket_for(key).delete(key, LOGICALLY_REMOVED)
            if ctl is not None:
                ctl.hit("delete:new")
            return got is not None
        finally:
            rec.exit()

    # -- rebuild -----------------------------------------------------------------

    def set_rebuild_trigger(self, predicate: Optional[Callable[["DHashTable"], bool]]) -> None:
        """Install the predicate consulted under the rebuild lock; None = always."""
        self._trigger = predicate

    def rebuild(self, nbuckets: int, hash_fn: Callable[[int], int]) -> RebuildResult:
        """Replace bucket count and hash function without stopping readers.

        Serialized per table; returns BUSY if another rebuild is running and
        NOT_REQUIRED if the trigger predicate declines.  Must be called
        outside any critical section (it waits for readers).
        """
        dom = self._domain
        if dom.in_critical_section():
            raise RuntimeError("rebuild called inside a critical section")
        if not self._rebuild_lock.acquire(blocking=False):
            return RebuildResult.BUSY
        try:
            trigger = self._trigger
            if trigger is not None and not trigger(self):
                return RebuildResult.NOT_REQUIRED
            ctl = _sched.controller
            old = self._current
            new = _Table(nbuckets, hash_fn, dom, self._retire_node, self._bucket_factory)
            old.replacement = new
            # Operations that never saw the replacement finish here; from now
            # on every insert lands in (or is refused toward) the new table.
            dom.wait_for_readers()
            for bucket in old.buckets:
                while True:
                    node = bucket.head.succ[0]
                    if node is None:
                        break
                    self._rebuild_cur = node
                    if ctl is not None:
                        ctl.hit("rebuild:cur_set")
                    key = node.key
                    got = bucket.delete(key, IS_BEING_DISTRIBUTED)
                    if ctl is not None:
                        ctl.hit("rebuild:old_deleted")
                    if got is None:
                        # A concurrent delete beat us to the node; it is not
                        # ours to move.  Keep the hazard reference accurate.
                        self._rebuild_cur = None
                        if ctl is not None:
                            ctl.hit("rebuild:cur_cleared")
                        continue
                    clean_flag(got, IS_BEING_DISTRIBUTED)
                    if new.bucket_for(key).insert(got) is not InsertResult.SUCCESS:
                        # The key reappeared in the replacement first; drop
                        # the surplus node once current readers are done.
                        self._retire_node(got)
                    if ctl is not None:
                        ctl.hit("rebuild:new_inserted")
                    self._rebuild_cur = None
                    if ctl is not None:
                        ctl.hit("rebuild:cur_cleared")
            # Readers may still be walking the retiring buckets.
            dom.wait_for_readers()
            self._current = new
            # And some may have loaded the retiring table before the swap.
            dom.wait_for_readers()
        finally:
            self._rebuild_lock.release()
        old.buckets = None  # retire the bucket array; stragglers now fail loudly
        return RebuildResult.SUCCESS

    # -- whole-table views --------------------------------------------------------

    def snapshot_keys(self) -> List[int]:
        """Sorted live keys.  Exact only while no rebuild is running."""
        rec = self._domain.reader()
        rec.enter()
        try:
            htp = self._current
            keys = []
            for bucket in htp.buckets:
                keys.extend(bucket.live_keys())
            new = htp.replacement
            if new is not None:
                for bucket in new.buckets:
                    keys.extend(bucket.live_keys())
            keys.sort()
            return keys
        finally:
            rec.exit()

    def check_placement(self) -> bool:
        """Every live node sits in the bucket its key hashes to (quiescent check)."""
        rec = self._domain.reader()
        rec.enter()
        try:
            htp = self._current
            for i, bucket in enumerate(htp.buckets):
                for node, flags in bucket.iter_nodes():
                    if not flags and htp.hash_fn(node.key) % htp.nbuckets != i:
                        return False
            return True
        finally:
            rec.exit()

    def dispose(self) -> None:
        """Quiescent teardown: unlink and retire every node still in the table."""
        rec = self._domain.reader()
        rec.enter()
        try:
            htp = self._current
            if htp.replacement is not None:
                raise RuntimeError("dispose during a rebuild")
            for bucket in htp.buckets:
                nodes = [n for n, _f in bucket.iter_nodes()]
                bucket.head.succ = (None, 0)
                for n in nodes:
                    self._retire_node(n)
        finally:
            rec.exit()
