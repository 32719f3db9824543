"""Matplotlib rendering for benchmark reports, written next to the data files.

matplotlib is imported lazily with the Agg backend so the CLI stays headless
and reports can be emitted without a display.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

from .harness import RebuildTiming, ThroughputReport


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def throughput_figure(report: ThroughputReport):
    """Two panels: ops/s by operation type, and total ops per worker thread."""
    plt = _plt()
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    lk, ins, dl = report.totals
    el = report.elapsed_s or 1.0
    ax1.bar(["lookup", "insert", "delete"],
            [lk / el, ins / el, dl / el], color=["#4878d0", "#ee854a", "#6acc64"])
    ax1.set_ylabel("operations / s")
    cfg = report.config
    ax1.set_title(f"mix {cfg.mix[0]}/{cfg.mix[1]}/{cfg.mix[2]}, "
                  f"{cfg.workers} workers, rebuild {cfg.rebuild_mode}")
    totals = [sum(t) for t in report.per_thread]
    ax2.bar([str(i) for i in range(len(totals))], totals, color="#4878d0")
    ax2.set_xlabel("worker thread")
    ax2.set_ylabel("operations")
    ax2.set_title(f"{report.ops_per_sec:,.0f} ops/s total"
                  + (f", {report.rebuilds} rebuilds" if report.rebuilds else ""))
    fig.tight_layout()
    return fig


def rebuild_time_figure(timings: Sequence[RebuildTiming]):
    """Rebuild duration vs. node count on log-log axes with error bars."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.6))
    xs = [t.node_count for t in timings]
    ys = [t.mean_s for t in timings]
    errs = [t.stdev_s for t in timings]
    ax.errorbar(xs, ys, yerr=errs, marker="o", capsize=3, color="#4878d0")
    if all(x > 0 for x in xs):
        ax.set_xscale("log")
    if all(y > 0 for y in ys):
        ax.set_yscale("log")
    ax.set_xlabel("nodes in table")
    ax.set_ylabel("rebuild time (s)")
    ax.set_title("rebuild cost vs. population")
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    return fig


def save_figure(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    import matplotlib.pyplot as plt

    plt.close(fig)
    return path


def figure_path_for(out_path, suffix: str) -> Path:
    """Default figure location: next to the report file, `.png` extension."""
    out = Path(out_path)
    return out.with_name(out.stem + f"_{suffix}.png")
