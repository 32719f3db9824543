import itertools
import json
import os
from pathlib import Path

import pytest

from dhash.harness import (
    ConfigError,
    GENERATOR_NAME,
    ThroughputReport,
    WorkloadConfig,
    emit_report,
    measure_rebuild,
    mult_hash_a,
    op_stream,
    pin_worker,
    plan_pinning,
    prefill,
    report_from_csv,
    report_from_json,
    report_to_csv,
    report_to_json,
    report_to_text,
    run,
)
from dhash.reclaim import ReclaimDomain
from dhash.table import DHashTable


def small_cfg(**kw):
    base = dict(mix=(90, 5, 5), load_factor=2, nbuckets=32, key_range=128,
                workers=2, seconds=1.0, rebuild_mode="off", seed=7)
    base.update(kw)
    return WorkloadConfig(**base)


# -- configuration -----------------------------------------------------------------


def test_mix_must_sum_to_100():
    with pytest.raises(ConfigError):
        small_cfg(mix=(90, 5, 4)).validate()


def test_prefill_cannot_exceed_key_range():
    with pytest.raises(ConfigError):
        small_cfg(load_factor=8, nbuckets=32, key_range=100).validate()


def test_bad_modes_rejected():
    with pytest.raises(ConfigError):
        small_cfg(rebuild_mode="sometimes").validate()
    with pytest.raises(ConfigError):
        small_cfg(pinning="alphabetical").validate()
    with pytest.raises(ConfigError):
        small_cfg(seconds=0).validate()


# -- prefill -----------------------------------------------------------------------


def test_prefill_counts():
    domain = ReclaimDomain()
    table = DHashTable(4, mult_hash_a, domain)
    cfg = small_cfg(load_factor=2, nbuckets=4, key_range=64)
    keys = prefill(table, cfg)
    assert len(keys) == 8 == len(set(keys))
    assert table.snapshot_keys() == sorted(keys)


@pytest.mark.slow
def test_prefill_heavy_load_factor():
    domain = ReclaimDomain()
    table = DHashTable(1024, mult_hash_a, domain)
    cfg = WorkloadConfig(load_factor=200, nbuckets=1024, key_range=10_000_000,
                         workers=1, seconds=1)
    prefill(table, cfg)
    assert len(table.snapshot_keys()) == 204_800


# -- determinism ---------------------------------------------------------------------


def test_op_streams_are_deterministic_per_seed_and_thread():
    cfg = small_cfg(seed=123)
    a = list(itertools.islice(op_stream(cfg, 0), 500))
    b = list(itertools.islice(op_stream(cfg, 0), 500))
    c = list(itertools.islice(op_stream(cfg, 1), 500))
    assert a == b
    assert a != c
    d = list(itertools.islice(op_stream(small_cfg(seed=124), 0), 500))
    assert a != d


# -- pinning ------------------------------------------------------------------------


def test_pinning_plan_is_balanced():
    cores = sorted(os.sched_getaffinity(0))
    plan = plan_pinning(len(cores))
    assert sorted(plan) == cores  # one worker per core
    plan8 = plan_pinning(4 * len(cores))
    counts = {c: plan8.count(c) for c in cores}
    assert max(counts.values()) - min(counts.values()) == 0  # pigeonhole balance


def test_pin_worker_applies_affinity():
    before = os.sched_getaffinity(0)
    try:
        assert pin_worker(0, plan_pinning(2))
        assert len(os.sched_getaffinity(0)) == 1
    finally:
        os.sched_setaffinity(0, before)


# -- runs --------------------------------------------------------------------------


def test_pure_lookup_run_counts_only_lookups():
    rep = run(small_cfg(mix=(100, 0, 0), workers=1, seconds=0.5, pinning="none"))
    lk, ins, dl = rep.totals
    assert lk > 0 and ins == 0 and dl == 0
    assert rep.rebuilds == 0 and rep.rebuild_seconds == ()
    assert rep.leaked_nodes == 0


def test_report_conservation_and_elapsed():
    rep = run(small_cfg(workers=3, seconds=0.5, pinning="none"))
    assert len(rep.per_thread) == 3
    assert rep.ops_total == sum(sum(t) for t in rep.per_thread)
    assert rep.elapsed_s >= 0.5
    assert rep.generator == GENERATOR_NAME


@pytest.mark.slow
def test_steady_state_population_with_continuous_rebuild():
    # insert% == delete% and a key range of twice the prefill keeps the
    # population in equilibrium at the prefill size
    cfg = WorkloadConfig(mix=(90, 5, 5), load_factor=2, nbuckets=512,
                         key_range=2048, workers=2, seconds=5.0,
                         rebuild_mode="continuous", seed=3)
    rep = run(cfg)
    target = cfg.prefill_count()
    assert rep.rebuilds > 0
    assert abs(rep.final_population - target) <= 0.05 * target
    assert rep.leaked_nodes == 0


# -- report formats ------------------------------------------------------------------


def fixed_report():
    return ThroughputReport(
        config=small_cfg(workers=2, alt_buckets=64),
        elapsed_s=1.5,
        per_thread=((100, 10, 5), (90, 12, 7)),
        rebuilds=3,
        rebuild_seconds=(0.01, 0.0203040506, 0.3),
        pinned=True,
        final_population=64,
        leaked_nodes=0,
        host="testhost",
        cpus=2,
        python="3.10.12",
    )


def test_csv_shape_for_two_thread_run():
    lines = report_to_csv(fixed_report()).strip().splitlines()
    assert len(lines) == 4  # header + summary + one row per thread
    assert lines[1].startswith("summary,")
    assert lines[2].startswith("thread,0,")
    assert lines[3].startswith("thread,1,")


def test_csv_round_trip_identity():
    rep = fixed_report()
    assert report_from_csv(report_to_csv(rep)) == rep


def test_json_mirrors_csv_field_by_field():
    rep = fixed_report()
    via_csv = report_from_csv(report_to_csv(rep))
    via_json = report_from_json(report_to_json(rep))
    assert via_csv == via_json == rep
    doc = json.loads(report_to_json(rep))
    assert doc["summary"]["total"] == rep.ops_total
    assert doc["config"]["buckets"] == rep.config.nbuckets


def test_real_run_round_trips():
    rep = run(small_cfg(workers=2, seconds=0.3, rebuild_mode="continuous", pinning="none"))
    assert report_from_csv(report_to_csv(rep)) == rep
    assert report_from_json(report_to_json(rep)) == rep


def test_text_format_mentions_totals():
    text = report_to_text(fixed_report())
    assert "224 ops" in text
    assert "thread 1" in text


def test_emit_report_formats(tmp_path):
    rep = fixed_report()
    for fmt in ("csv", "json", "text"):
        out = tmp_path / f"r.{fmt}"
        with out.open("w") as fh:
            emit_report(rep, fmt, fh)
        assert out.stat().st_size > 0
    with pytest.raises(ConfigError):
        emit_report(rep, "xml", None)


# -- rebuild measurement --------------------------------------------------------------


def test_measure_rebuild_zero_count_is_cheap():
    cfg = small_cfg(workers=1, nbuckets=16)
    (t0,) = measure_rebuild(cfg, [0], repeats=3)
    assert t0.node_count == 0
    assert t0.mean_s < 0.5  # grace periods only


def test_measure_rebuild_grows_with_population():
    cfg = small_cfg(workers=1, nbuckets=64)
    t_small, t_big = measure_rebuild(cfg, [500, 5000], repeats=2)
    assert t_big.mean_s > t_small.mean_s
    assert len(t_small.times) == 2


# -- figures ---------------------------------------------------------------------------


def test_figures_render_to_files(tmp_path):
    from dhash import figures

    rep = fixed_report()
    p1 = figures.save_figure(figures.throughput_figure(rep), tmp_path / "t.png")
    assert p1.stat().st_size > 0
    cfg = small_cfg(workers=1, nbuckets=16)
    timings = measure_rebuild(cfg, [0, 200], repeats=2)
    p2 = figures.save_figure(figures.rebuild_time_figure(timings), tmp_path / "r.png")
    assert p2.stat().st_size > 0


def test_figure_path_side_by_side():
    from dhash.figures import figure_path_for

    assert figure_path_for(Path("/x/report.csv"), "throughput") == Path("/x/report_throughput.png")
