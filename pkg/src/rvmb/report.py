"""Deterministic experiment reports: CSV table, JSON sidecar, figures.

Byte stability is part of the contract: rows serialize in append order,
floats through repr (shortest round trip), JSON with sorted keys and
fixed separators. Wall-clock time goes to a separate .log sidecar so
the comparable artifacts carry no timing jitter. Figures render through
the Agg backend with fixed size, dpi, and metadata.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

__all__ = ["MetricRow", "Report", "row_le", "row_ge", "row_gt", "row_band", "row_info"]


@dataclass(frozen=True)
class MetricRow:
    criterion: str
    metric: str
    value: float
    target: str
    passed: bool


def _num(value) -> float:
    return float(value)


def row_le(criterion: str, metric: str, value, bound: float) -> MetricRow:
    v = _num(value)
    return MetricRow(criterion, metric, v, f"<= {repr(float(bound))}", v <= bound)


def row_ge(criterion: str, metric: str, value, bound: float) -> MetricRow:
    v = _num(value)
    return MetricRow(criterion, metric, v, f">= {repr(float(bound))}", v >= bound)


def row_gt(criterion: str, metric: str, value, bound: float) -> MetricRow:
    v = _num(value)
    return MetricRow(criterion, metric, v, f"> {repr(float(bound))}", v > bound)


def row_band(criterion: str, metric: str, value, lo: float, hi: float) -> MetricRow:
    v = _num(value)
    return MetricRow(
        criterion, metric, v, f"in [{repr(float(lo))}, {repr(float(hi))}]", lo <= v <= hi
    )


def row_info(criterion: str, metric: str, value) -> MetricRow:
    """Reported-only quantity; always passes."""
    return MetricRow(criterion, metric, _num(value), "reported", True)


@dataclass
class Report:
    """One experiment's outcome: metric rows plus rendered figures."""

    name: str
    config: dict
    rows: list[MetricRow] = field(default_factory=list)
    wall_clock: float = 0.0
    _figures: list = field(default_factory=list)

    def add(self, row: MetricRow) -> None:
        self.rows.append(row)

    def extend(self, rows) -> None:
        self.rows.extend(rows)

    def add_figure(self, fig, name: str) -> None:
        self._figures.append((name, fig))

    @property
    def all_pass(self) -> bool:
        return all(r.passed for r in self.rows)

    @property
    def failures(self) -> list[MetricRow]:
        return [r for r in self.rows if not r.passed]

    def to_csv(self) -> str:
        lines = ["criterion,metric,value,target,pass"]
        for r in self.rows:
            target = r.target.replace(",", ";")
            lines.append(
                f"{r.criterion},{r.metric},{repr(r.value)},{target},{str(r.passed).lower()}"
            )
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        payload = {
            "experiment": self.name,
            "config": self.config,
            "rows": [
                {
                    "criterion": r.criterion,
                    "metric": r.metric,
                    "value": r.value,
                    "target": r.target,
                    "pass": r.passed,
                }
                for r in self.rows
            ],
            "all_pass": self.all_pass,
        }
        return json.dumps(payload, sort_keys=True, indent=1, separators=(",", ": ")) + "\n"

    def write(self, outdir: str | Path) -> list[Path]:
        """Write CSV/JSON/figures/log; returns the created paths."""
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        csv_path = out / f"{self.name}.csv"
        csv_path.write_text(self.to_csv())
        paths.append(csv_path)
        json_path = out / f"{self.name}.json"
        json_path.write_text(self.to_json())
        paths.append(json_path)
        for figname, fig in self._figures:
            png = out / f"{self.name}_{figname}.png"
            fig.savefig(png, dpi=110, metadata={"Software": "rvmb"})
            plt.close(fig)
            paths.append(png)
        self._figures = []
        log_path = out / f"{self.name}.log"
        log_path.write_text(
            f"experiment={self.name} wall_clock_s={self.wall_clock:.3f} "
            f"rows={len(self.rows)} all_pass={self.all_pass}\n"
        )
        paths.append(log_path)
        return paths


def new_figure(width: float = 6.0, height: float = 4.0):
    """Figure with the fixed geometry every report plot uses."""
    return plt.figure(figsize=(width, height))
