from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

HEADER = ("method", "slot", "round", "epoch", "client", "metric", "value")


@dataclass(frozen=True)
class MetricRow:
    method: str
    slot: str
    round: int
    epoch: int
    client: str
    metric: str
    value: float


@dataclass
class MetricsLog:
    rows: list[MetricRow] = field(default_factory=list)

    def add(self, method, slot, round, epoch, client, metric, value) -> None:
        value = float(value)
        if not math.isfinite(value):
            raise ValueError(f"non-finite metric {metric}={value} for client {client}")
        self.rows.append(MetricRow(method, slot, int(round), int(epoch), client, metric, value))

    def extend(self, other: "MetricsLog") -> None:
        self.rows.extend(other.rows)

    def select(self, **match) -> list[MetricRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in match.items())]

    def final(self, method: str, metric: str = "accuracy", slot: str | None = None) -> dict[str, float]:
        """Last recorded value of ``metric`` per client."""
        out = {}
        for r in self.rows:
            if r.method == method and r.metric == metric and (slot is None or r.slot == slot):
                out[r.client] = r.value
        return out

    def __len__(self) -> int:
        return len(self.rows)


def _sort_key(r: MetricRow):
    return (r.method, r.slot, r.round, r.epoch, r.client)


def emit_metrics_csv(log: MetricsLog, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(HEADER)
        for r in sorted(log.rows, key=_sort_key):
            w.writerow([r.method, r.slot, r.round, r.epoch, r.client, r.metric, f"{r.value:.6f}"])


def read_metrics_csv(path) -> MetricsLog:
    log = MetricsLog()
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if tuple(header) != HEADER:
            raise ValueError(f"unexpected header {header}")
        for method, slot, rnd, epoch, client, metric, value in reader:
            log.add(method, slot, int(rnd), int(epoch), client, metric, float(value))
    return log


def accuracy_curves(log: MetricsLog, metric: str = "accuracy") -> dict[str, list[tuple[int, float]]]:
    """Client-averaged ``metric`` against cumulative epoch, per method."""
    acc = defaultdict(lambda: defaultdict(list))
    for r in log.rows:
        if r.metric == metric:
            acc[r.method][r.epoch].append(r.value)
    return {m: sorted((e, sum(v) / len(v)) for e, v in by_epoch.items()) for m, by_epoch in sorted(acc.items())}


def write_accuracy_svg(log: MetricsLog, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "pepinet"
    fig, ax = plt.subplots(figsize=(6, 4))
    for method, points in accuracy_curves(log).items():
        xs, ys = zip(*points)
        ax.plot(xs, ys, marker="o", label=method)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean test accuracy")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(Path(path), format="svg", metadata={"Date": None})
    plt.close(fig)
