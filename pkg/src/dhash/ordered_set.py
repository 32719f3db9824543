"""Lock-free ordered linked list protected by quiescent-state reclamation.

Nodes carry an integer key and a single *successor word* packing the link to
the next node together with two flag bits:

* ``LOGICALLY_REMOVED``: the node was deleted; finds ignore it and unlink it
  in passing, after which it is handed to the reclamation domain.
* ``IS_BEING_DISTRIBUTED``: the node was pulled out of this list by a table
  rebuild.  It is unlinked but never reclaimed here; the rebuilder owns it
  and will reinsert it elsewhere.

Keeping the flags inside the successor word means "is this node still live,
and who follows it" is one atomic load.  A traversal additionally re-reads the
predecessor's word before acting on a loaded successor; if the node under foot
was unlinked (and possibly already relinked into a different list by the
rebuilder) the re-read no longer matches and the walk restarts from the head,
so node reuse can never silently redirect a traversal into another list.

The word itself is a tuple held in a slot, loaded bare (a single interpreter
operation) and mutated only through per-cell locked read-modify-write helpers,
mirroring an atomic compare-and-swap at word granularity.  The per-cell lock
is never held across anything that can block.

Every operation requires the caller to hold a critical-section guard of the
list's reclamation domain.
"""

from __future__ import annotations

import threading
from enum import IntEnum
from typing import Any, Callable, Iterator, Optional, Tuple

from . import schedule as _sched

LOGICALLY_REMOVED = 1 << 0
IS_BEING_DISTRIBUTED = 1 << 1
FLAG_MASK = LOGICALLY_REMOVED | IS_BEING_DISTRIBUTED


class InsertResult(IntEnum):
    SUCCESS = 0
    EXISTS = 1
    REFUSED = 2  # the owning table has published a replacement; link elsewhere


class Cell:
    """One successor word: ``succ`` is an immutable (pointer, flags) tuple."""

    __slots__ = ("succ", "_lk")

    def __init__(self):
        self.succ: Tuple[Optional["Node"], int] = (None, 0)
        self._lk = threading.Lock()

    def cas(self, expect_ptr, expect_flags: int, ptr, flags: int) -> bool:
        lk = self._lk
        lk.acquire()
        w = self.succ
        if w[0] is expect_ptr and w[1] == expect_flags:
            self.succ = (ptr, flags)
            lk.release()
            return True
        lk.release()
        return False

    def fetch_or_flags(self, bits: int) -> int:
        lk = self._lk
        lk.acquire()
        ptr, flags = self.succ
        self.succ = (ptr, flags | bits)
        lk.release()
        return flags

    def fetch_and_flags(self, mask: int) -> int:
        lk = self._lk
        lk.acquire()
        ptr, flags = self.succ
        self.succ = (ptr, flags & mask)
        lk.release()
        return flags

    def set_ptr_keep_flags(self, ptr) -> int:
        lk = self._lk
        lk.acquire()
        _old, flags = self.succ
        self.succ = (ptr, flags)
        lk.release()
        return flags


class Node(Cell):
    """List node: key, opaque value, and the successor word inherited from Cell.

    The value is read-only once the node is published.  A reclaimed node has
    ``succ = None``, so touching it from a traversal raises immediately.
    """

    __slots__ = ("key", "value")

    def __init__(self, key: int, value: Any = None):
        super().__init__()
        self.key = key
        self.value = value

    def flags(self) -> int:
        return self.succ[1]

    def __repr__(self) -> str:
        w = self.succ
        state = "reclaimed" if w is None else f"flags={w[1]}"
        return f"<Node {self.key} {state}>"


def set_flag(node: Node, flag: int) -> int:
    """Atomically OR ``flag`` into the node's word; returns the prior flag bits."""
    return node.fetch_or_flags(flag) & FLAG_MASK


def clean_flag(node: Node, flag: int) -> int:
    """Atomically clear ``flag``; returns the prior flag bits."""
    return node.fetch_and_flags(~flag) & FLAG_MASK


def poison_node(node: Node) -> None:
    """Reclamation action: make any later traversal through the node explode."""
    node.succ = None


class LockFreeOrderedList:
    """Ordered set of live nodes with two-stage (logical, physical) deletion.

    ``retire(node)`` is called for every node whose reclamation this list
    owns, exactly once per such node; the default defers a poisoning free to
    the domain.  ``rebuild_guard`` is the table owning this list as a bucket,
    if any: once that table has published a replacement the list refuses new
    links, which gives inserts a single serialization point against table
    publication (see the table module).
    """

    __slots__ = ("head", "domain", "_retire", "rebuild_guard")

    progress = "lock_free"

    def __init__(self, domain, retire: Optional[Callable[[Node], None]] = None,
                 rebuild_guard=None):
        self.head = Cell()
        self.domain = domain
        if retire is None:
            retire = lambda node: domain.defer_free(node, poison_node)
        self._retire = retire
        self.rebuild_guard = rebuild_guard

    # -- search --------------------------------------------------------------

    def find(self, key: int):
        """Snapshot search: returns ``(found, prev, cur, nxt)``.

        ``cur`` is the first live node with key >= ``key`` (or None), ``prev``
        the cell whose word linked to it at observation time, ``nxt`` its
        successor.  ``found`` is True iff ``cur`` matches exactly.  Marked
        nodes encountered on the way are physically unlinked; those removed by
        deletes (not by a rebuild) are retired here.
        """
        retire = self._retire
        while True:
            prev: Cell = self.head
            cur = prev.succ[0]
            while True:
                if cur is None:
                    return (False, prev, None, None)
                nxt, cflags = cur.succ
                w = prev.succ
                if w[0] is not cur or w[1]:
                    break  # predecessor changed under us; restart from head
                if cflags:
                    if not prev.cas(cur, 0, nxt, 0):
                        break
                    if not cflags & IS_BEING_DISTRIBUTED:
                        retire(cur)
                    cur = nxt
                    continue
                ckey = cur.key
                if ckey >= key:
                    return (ckey == key, prev, cur, nxt)
                prev = cur
                cur = nxt

    # -- updates ---------------------------------------------------------------

    def insert(self, node: Node) -> InsertResult:
        """Link ``node`` at its sorted position unless a live equal key exists.

        A REFUSED result means the owning table has a published replacement;
        the node is untouched and the caller must insert it elsewhere.  The
        link preserves flag bits concurrently set on ``node`` (a rebuild
        reinserts nodes that a racing delete may have marked already).
        """
        key = node.key
        guard_tbl = self.rebuild_guard
        ctl = _sched.controller
        while True:
            found, prev, cur, _nxt = self.find(key)
            if found:
                return InsertResult.EXISTS
            node.set_ptr_keep_flags(cur)
            if ctl is not None:
                ctl.hit("list:insert:link")
            if guard_tbl is None:
                if prev.cas(cur, 0, node, 0):
                    return InsertResult.SUCCESS
            else:
                r = self._link_checked(prev, cur, node, guard_tbl)
                if r:
                    return InsertResult.SUCCESS
                if r is None:
                    return InsertResult.REFUSED

    @staticmethod
    def _link_checked(prev: Cell, cur, node: Node, table) -> Optional[bool]:
        # The replacement check and the link are one atomic step with respect
        # to publication, so an insert can never slip a key into a table
        # that concurrent same-key inserts already treat as superseded.
        lk = prev._lk
        lk.acquire()
        if table.replacement is not None:
            lk.release()
            return None
        w = prev.succ
        if w[0] is cur and w[1] == 0:
            prev.succ = (node, 0)
            lk.release()
            return True
        lk.release()
        return False

    def delete(self, key: int, flag: int) -> Optional[Node]:
        """Logically remove the live node matching ``key`` by setting ``flag``.

        Returns the node on success, None if no live match exists.  The node
        is physically unlinked before return (directly or by a helping find).
        With LOGICALLY_REMOVED the node is retired unless a rebuild already
        claimed it; with IS_BEING_DISTRIBUTED nothing is reclaimed and the
        caller takes ownership, and the claim fails if a delete got there
        first.
        """
        if flag not in (LOGICALLY_REMOVED, IS_BEING_DISTRIBUTED):
            raise ValueError("flag must be exactly one of the two mark bits")
        ctl = _sched.controller
        while True:
            found, prev, cur, nxt = self.find(key)
            if not found:
                return None
            if ctl is not None:
                ctl.hit("list:delete:mark")
            if flag == IS_BEING_DISTRIBUTED:
                # claim only a clean node; a concurrent delete wins otherwise
                if not cur.cas(nxt, 0, nxt, IS_BEING_DISTRIBUTED):
                    continue
                prior = 0
            else:
                prior = cur.fetch_or_flags(LOGICALLY_REMOVED)
                if prior & LOGICALLY_REMOVED:
                    continue  # somebody else deleted it; rescan
            # We own the logical deletion; ensure the physical unlink.  The
            # pointer field is frozen once the node is marked, so re-reading
            # it here gives the true successor.
            nxt2 = cur.succ[0]
            if prev.cas(cur, 0, nxt2, 0):
                if flag == LOGICALLY_REMOVED and not prior & IS_BEING_DISTRIBUTED:
                    self._retire(cur)
            else:
                # A completed scan unlinks every marked node before this key's
                # position, ours included; whoever unlinks also retires when
                # that is owed.
                self.find(key)
            return cur

    # -- traversal ---------------------------------------------------------------

    def first(self) -> Optional[Node]:
        return self.head.succ[0]

    def iter_nodes(self) -> Iterator[Tuple[Node, int]]:
        """Weakly consistent walk yielding (node, flags-at-visit) pairs."""
        cur = self.head.succ[0]
        while cur is not None:
            nxt, flags = cur.succ
            yield cur, flags
            cur = nxt

    def live_keys(self) -> list:
        return [n.key for n, f in self.iter_nodes() if not f]
