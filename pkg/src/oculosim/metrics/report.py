"""Per-sample metric rows and their mean / s.d. aggregates."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class MetricRow:
    sample_id: str
    metric: str
    value: float
    task: str = ""
    error: str = ""


def _stats(values: list[float]) -> dict:
    n = len(values)
    if n == 0:
        return {"mean": math.nan, "sd": math.nan, "n": 0}
    if any(math.isinf(v) for v in values):
        finite = [v for v in values if not math.isinf(v)]
        mean = math.inf if all(v > 0 for v in values if math.isinf(v)) else -math.inf
        sd = 0.0 if not finite and len(set(values)) == 1 else math.nan
        return {"mean": mean, "sd": sd, "n": n}
    mean = math.fsum(values) / n
    sd = math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (n - 1)) if n > 1 else 0.0
    return {"mean": mean, "sd": sd, "n": n}


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)

    def add(self, sample_id: str, metric: str, value: float, task: str = "") -> None:
        self.rows.append(MetricRow(sample_id, metric, float(value), task))

    def add_failure(self, sample_id: str, task: str, error: str) -> None:
        self.rows.append(MetricRow(sample_id, "failure", math.nan, task, error))

    def aggregates(self, by_task: bool = False) -> dict:
        """``{metric: {mean, sd, n}}``, or ``{task: {metric: ...}}`` when ``by_task``."""
        groups: dict = {}
        for r in self.rows:
            if r.metric == "failure":
                continue
            key = (r.task, r.metric) if by_task else (None, r.metric)
            groups.setdefault(key, []).append(r.value)
        if not by_task:
            return {m: _stats(v) for (_, m), v in sorted(groups.items(), key=lambda kv: kv[0][1])}
        out: dict = {}
        for (t, m), v in sorted(groups.items()):
            out.setdefault(t, {})[m] = _stats(v)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "task", "metric", "value", "error"])
        for r in self.rows:
            w.writerow([r.sample_id, r.task, r.metric, repr(r.value), r.error])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricReport":
        rows = [MetricRow(d["sample_id"], d["metric"], float(d["value"]), d.get("task", ""), d.get("error", ""))
                for d in csv.DictReader(io.StringIO(text))]
        return cls(rows)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "metrics.csv").write_text(self.to_csv())
        (d / "aggregates.json").write_text(json.dumps(self.aggregates(by_task=True), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "MetricReport":
        return cls.from_csv((Path(directory) / "metrics.csv").read_text())
