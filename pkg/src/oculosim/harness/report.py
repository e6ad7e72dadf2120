"""Reports over one or more evaluation bundles: markdown tables, CSV and grouped bar plots."""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..metrics import MetricReport  # noqa: E402
from ..metrics.report import MetricRow  # noqa: E402


class EmptyReportError(ValueError):
    pass


def fmt(mean: float, sd: float) -> str:
    """``mean ± s.d.`` with three decimals."""
    def one(v):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "+inf" if v > 0 else "-inf"
        return f"{v:.3f}"
    return f"{one(mean)} ± {one(sd)}"


def load_bundle(path, group_by: str = "task") -> MetricReport:
    """Metric rows of a bundle; with ``group_by='modality'`` the task column becomes the phantom kind."""
    path = Path(path)
    if not (path / "metrics.csv").exists():
        raise FileNotFoundError(f"{path} is not an evaluation bundle (metrics.csv missing)")
    report = MetricReport.load(path)
    if group_by == "modality":
        bundle = json.loads((path / "bundle.json").read_text())
        prov = json.loads((Path(bundle["manifest"]).parent / "provenance.json").read_text())["records"]
        report = MetricReport([MetricRow(r.sample_id, r.metric, r.value, prov.get(r.sample_id, {}).get("kind", "unknown"),
                                         r.error) for r in report.rows])
    return report


def aggregate(reports: dict[str, MetricReport]) -> list[dict]:
    """Flat rows ``{model, group, metric, mean, sd, n}`` in a stable order."""
    rows = []
    for model, rep in reports.items():
        for group, metrics in rep.aggregates(by_task=True).items():
            for metric, st in metrics.items():
                rows.append({"model": model, "group": group, "metric": metric, **st})
    if not rows:
        raise EmptyReportError("no metric rows to report")
    return rows


def markdown(rows: list[dict], models: list[str]) -> str:
    out = ["# Evaluation report", ""]
    for group in sorted({r["group"] for r in rows}):
        sub = [r for r in rows if r["group"] == group]
        metrics = sorted({r["metric"] for r in sub})
        out += [f"## {group}", "", "| model | " + " | ".join(metrics) + " |",
                "|---|" + "---|" * len(metrics)]
        for model in models:
            cells = {r["metric"]: fmt(r["mean"], r["sd"]) for r in sub if r["model"] == model}
            if cells:
                out.append(f"| {model} | " + " | ".join(cells.get(m, "") for m in metrics) + " |")
        out.append("")
    return "\n".join(out)


def to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "group", "metric", "mean", "sd", "n"])
    for r in rows:
        w.writerow([r["model"], r["group"], r["metric"], repr(float(r["mean"])), repr(float(r["sd"])), r["n"]])
    return buf.getvalue()


def from_csv(text: str) -> list[dict]:
    return [{"model": d["model"], "group": d["group"], "metric": d["metric"], "mean": float(d["mean"]),
             "sd": float(d["sd"]), "n": int(d["n"])} for d in csv.DictReader(io.StringIO(text))]


def bar_plot(rows: list[dict], group: str, models: list[str], path) -> None:
    sub = [r for r in rows if r["group"] == group and math.isfinite(r["mean"])]
    metrics = sorted({r["metric"] for r in sub})
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(metrics) * max(1, len(models)) / 2), 3.2), dpi=100)
    width = 0.8 / max(len(models), 1)
    x = np.arange(len(metrics))
    for k, model in enumerate(models):
        vals = {r["metric"]: r for r in sub if r["model"] == model}
        means = [vals[m]["mean"] if m in vals else np.nan for m in metrics]
        sds = [vals[m]["sd"] if m in vals and math.isfinite(vals[m]["sd"]) else 0.0 for m in metrics]
        ax.bar(x + (k - (len(models) - 1) / 2) * width, means, width, yerr=sds, capsize=2, label=model)
    ax.set_xticks(x)
    ax.set_xticklabels(metrics, rotation=30, ha="right")
    ax.set_title(group)
    if len(models) > 1:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def render_report(reports: dict[str, MetricReport], out_dir) -> Path:
    """Write ``report.md``, ``report.csv`` and one bar plot per group; returns the markdown path."""
    rows = aggregate(reports)
    models = list(reports)
    out = Path(out_dir)
    (out / "plots").mkdir(parents=True, exist_ok=True)
    (out / "report.md").write_text(markdown(rows, models))
    (out / "report.csv").write_text(to_csv(rows))
    for group in sorted({r["group"] for r in rows}):
        safe = "".join(c if c.isalnum() else "_" for c in group) or "all"
        bar_plot(rows, group, models, out / "plots" / f"{safe}.png")
    return out / "report.md"


def cmd_report(bundles: dict[str, str], out_dir, group_by: str = "task") -> Path:
    if not bundles:
        raise EmptyReportError("no bundles given")
    reports = {name: load_bundle(path, group_by) for name, path in bundles.items()}
    return render_report(reports, out_dir)
