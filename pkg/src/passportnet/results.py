"""Append-only results store and report generation.

Each run writes one JSON record under runs/<timestamp>-<confighash>/; record
directories are created atomically so concurrent runs never clobber each
other.  Reports aggregate records into a summary table plus the standard
plots (pruning curve, valid-vs-fake accuracy histogram).
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:10]


def new_run_dir(root, config):
    """Create a unique run directory; suffix a counter on collisions."""
    root = Path(root)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = f"{stamp}-{config_hash(config)}"
    for attempt in range(1000):
        candidate = root / (base if attempt == 0 else f"{base}-{attempt}")
        try:
            candidate.mkdir(parents=True, exist_ok=False)
            return candidate
        except FileExistsError:
            continue
    raise RuntimeError(f"could not allocate a run directory under {root}")


def write_record(run_dir, record):
    """Atomically write record.json (tmp file + rename)."""
    run_dir = Path(run_dir)
    path = run_dir / "record.json"
    tmp = run_dir / f".record.{os.getpid()}.tmp"
    tmp.write_text(json.dumps(record, indent=2, sort_keys=True, default=str))
    tmp.rename(path)
    return path


def load_records(root):
    root = Path(root)
    records = []
    if not root.exists():
        return records
    for path in sorted(root.glob("*/record.json")):
        try:
            record = json.loads(path.read_text())
        except json.JSONDecodeError:
            continue
        record["_run"] = path.parent.name
        records.append(record)
    return records


def _fmt(value):
    if isinstance(value, float):
        return f"{value:.2f}"
    return str(value)


def render_report(records, out_dir):
    """Write summary.md and any plots the records support; returns paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    lines = ["# Experiment summary", "", f"{len(records)} run(s).", ""]
    if records:
        lines += ["| run | command | key metrics |", "|---|---|---|"]
        for record in records:
            metrics = record.get("metrics", {})
            shown = {
                k: _fmt(v)
                for k, v in metrics.items()
                if isinstance(v, (int, float, str)) and not isinstance(v, bool)
            }
            cell = ", ".join(f"{k}={v}" for k, v in list(shown.items())[:6])
            lines.append(f"| {record['_run']} | {record.get('command', '?')} | {cell} |")
    summary = out_dir / "summary.md"
    summary.write_text("\n".join(lines) + "\n")
    written.append(summary)

    sweeps = [r for r in records if r.get("metrics", {}).get("prune_sweep")]
    if sweeps:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for record in sweeps:
            curve = record["metrics"]["prune_sweep"]
            rates = [p["rate"] for p in curve]
            if any("accuracy" in p for p in curve):
                ax.plot(rates, [p.get("accuracy") for p in curve], marker="o",
                        label=f"{record['_run']} accuracy")
            if any("signature_detection" in p for p in curve):
                ax.plot(rates, [100 * p.get("signature_detection", 0) for p in curve],
                        marker="s", linestyle="--", label=f"{record['_run']} detection")
        ax.set_xlabel("pruning rate")
        ax.set_ylabel("percent")
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / "prune_curve.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    histogram = {}
    for record in records:
        metrics = record.get("metrics", {})
        if record.get("command") == "attack" and metrics.get("accuracies"):
            histogram.setdefault("fake1", []).extend(metrics["accuracies"])
        if metrics.get("best_accuracy") is not None and record.get("kind") == "reverse-passport":
            histogram.setdefault("fake2", []).append(metrics["best_accuracy"])
        if metrics.get("valid_accuracy") is not None:
            histogram.setdefault("valid", []).append(metrics["valid_accuracy"])
    if histogram:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for label, values in histogram.items():
            ax.hist(values, bins=20, range=(0, 100), alpha=0.6, label=label)
        ax.set_xlabel("accuracy (%)")
        ax.set_ylabel("count")
        ax.legend()
        fig.tight_layout()
        path = out_dir / "ambiguity_hist.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
