"""DHash: a concurrent hash table whose hash function can be rebuilt live.

The table keeps serving lock-free lookups, inserts, and deletes while a
rebuild redistributes every node into a new bucket array under a new hash
function.  Ships with a quiescent-state reclamation layer, a pluggable
bucket-set contract, a benchmark harness, and a linearizability checker.
"""

from .bucket_api import ConformanceReport, LockedOrderedList, conformance_suite
from .checker import (
    History,
    HistoryEvent,
    Verdict,
    check_linearizable,
    lemma1_stress,
    lemma2_stress,
    lemma3_stress,
    record_run,
)
from .harness import (
    ThroughputReport,
    WorkloadConfig,
    measure_rebuild,
    mult_hash_a,
    mult_hash_b,
    prefill,
    run,
)
from .ordered_set import (
    IS_BEING_DISTRIBUTED,
    LOGICALLY_REMOVED,
    InsertResult,
    LockFreeOrderedList,
    Node,
    clean_flag,
    set_flag,
)
from .reclaim import ReclaimDomain, ReclaimError, default_domain
from .table import DHashTable, RebuildResult

__version__ = "0.1.0"

__all__ = [
    "ConformanceReport",
    "DHashTable",
    "History",
    "HistoryEvent",
    "IS_BEING_DISTRIBUTED",
    "InsertResult",
    "LOGICALLY_REMOVED",
    "LockFreeOrderedList",
    "LockedOrderedList",
    "Node",
    "RebuildResult",
    "ReclaimDomain",
    "ReclaimError",
    "ThroughputReport",
    "Verdict",
    "WorkloadConfig",
    "check_linearizable",
    "clean_flag",
    "conformance_suite",
    "default_domain",
    "lemma1_stress",
    "lemma2_stress",
    "lemma3_stress",
    "measure_rebuild",
    "mult_hash_a",
    "mult_hash_b",
    "prefill",
    "record_run",
    "run",
    "set_flag",
]
