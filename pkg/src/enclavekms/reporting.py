"""Benchmark report artifacts: latency CSV, JSON summary, and rendered figures."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .cluster import BenchReport

CSV_FIELDS = ["user", "request", "connect_ms", "processing_ms", "total_ms", "ok", "bytes_sent", "backend"]


def write_latency_csv(rows: list, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return path


def write_report(report: BenchReport, rows: list, out_path: str | Path) -> dict:
    """Write the JSON report plus the latency CSV and figures alongside it.

    Returns a map of artifact name -> path.
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(report.to_json())
    stem = out_path.with_suffix("")
    artifacts = {"report": out_path}
    artifacts["latencies"] = write_latency_csv(rows, Path(f"{stem}_latencies.csv"))
    completed = [row for row in rows if row.get("ok")]
    if completed:
        artifacts["latency_figure"] = latency_figure(report, completed, Path(f"{stem}_latency.png"))
        if report.per_backend_requests:
            artifacts["backend_figure"] = backend_figure(report, Path(f"{stem}_backends.png"))
    return artifacts


def latency_figure(report: BenchReport, completed_rows: list, path: Path) -> Path:
    totals = [row["total_ms"] for row in completed_rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(totals, bins=min(40, max(5, len(totals) // 5)), color="#37618e", alpha=0.85)
    ax.axvline(report.mean_time_per_request_ms, color="firebrick", linestyle="--",
               label=f"mean {report.mean_time_per_request_ms:.1f} ms")
    ax.set_xlabel("request time (ms)")
    ax.set_ylabel("requests")
    ax.set_title(f"{report.workload}: {report.requests_per_second:.2f} req/s")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def backend_figure(report: BenchReport, path: Path) -> Path:
    names = sorted(report.per_backend_requests)
    counts = [report.per_backend_requests[name] for name in names]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(names, counts, color="#4f8a5a")
    ax.set_xlabel("backend")
    ax.set_ylabel("requests served")
    ax.set_title(f"{report.workload}: request distribution")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def throughput_comparison_figure(reports: dict, path: str | Path) -> Path:
    """Bar chart of requests/second across labelled runs (e.g. 1 vs 4 instances)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labels = list(reports)
    values = [reports[label].requests_per_second for label in labels]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(labels, values, color=["#37618e", "#4f8a5a", "#b0713c", "#7d5a9e"][: len(labels)])
    ax.set_ylabel("requests / second")
    ax.set_title("throughput by deployment")
    for index, value in enumerate(values):
        ax.text(index, value, f"{value:.2f}", ha="center", va="bottom", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
