"""The four figure kinds regenerated from metrics csv files.

Every number that appears in a figure is recomputed from the csv rows at
plot time; nothing is hard-coded. ``plot`` returns the computed series so
callers (and tests) can check exactly what was drawn.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
from matplotlib.ticker import MaxNLocator

from .reader import Run, SchemaError, load_run

KINDS = ("accuracy_vs_round", "comm_cost_bars", "epsilon_sweep", "noniid_sweep")

GIB = 2**30


@dataclass(frozen=True)
class PlotSpec:
    csv_paths: list[str]
    kind: str
    out_path: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"unknown figure kind {self.kind!r}; pick one of {KINDS}")
        if not self.csv_paths:
            raise SchemaError("need at least one csv file")


@dataclass
class PlotResult:
    kind: str
    out_path: str
    series: dict[str, tuple[list[float], list[float]]] = field(default_factory=dict)
    bars: dict[str, float] = field(default_factory=dict)


def _accuracy_vs_round(runs: list[Run], ax) -> PlotResult:
    result = PlotResult("accuracy_vs_round", "")
    for run in runs:
        xs = [float(r.round) for r in run.rows]
        ys = [r.test_accuracy for r in run.rows]
        result.series[run.label] = (xs, ys)
        ax.plot(xs, ys, marker="o", markersize=3, label=run.label)
    ax.set_xlabel("communication round")
    ax.set_ylabel("test accuracy")
    ax.xaxis.set_major_locator(MaxNLocator(integer=True, nbins=20))
    ax.legend()
    return result


def _comm_cost_bars(runs: list[Run], ax) -> PlotResult:
    result = PlotResult("comm_cost_bars", "")
    for run in runs:
        result.bars[run.label] = run.final_cumulative_bytes / GIB
    labels = list(result.bars)
    ax.bar(range(len(labels)), [result.bars[k] for k in labels])
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_xlabel("strategy")
    ax.set_ylabel("communication cost (GiB)")
    return result


def _sweep(runs: list[Run], ax, kind: str, xlabel: str) -> PlotResult:
    result = PlotResult(kind, "")
    by_strategy: dict[str, list[tuple[float, float]]] = {}
    for run in runs:
        by_strategy.setdefault(run.strategy, []).append(
            (run.sweep_value(), run.final_accuracy)
        )
    for strategy, points in by_strategy.items():
        points.sort()
        xs = [p[0] for p in points]
        ys = [p[1] for p in points]
        result.series[strategy] = (xs, ys)
        ax.plot(xs, ys, marker="o", label=strategy)
    if kind == "epsilon_sweep":
        ax.set_xscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("final test accuracy")
    ax.legend()
    return result


def plot(spec: PlotSpec) -> PlotResult:
    """Render one figure from the csvs; returns what was drawn."""
    runs = [load_run(p) for p in spec.csv_paths]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    try:
        if spec.kind == "accuracy_vs_round":
            result = _accuracy_vs_round(runs, ax)
        elif spec.kind == "comm_cost_bars":
            result = _comm_cost_bars(runs, ax)
        elif spec.kind == "epsilon_sweep":
            result = _sweep(runs, ax, spec.kind, "privacy budget epsilon")
        else:
            result = _sweep(runs, ax, spec.kind, "classes per client")
        fig.tight_layout()
        fig.savefig(spec.out_path, dpi=120)
    finally:
        plt.close(fig)
    result.out_path = spec.out_path
    return result
