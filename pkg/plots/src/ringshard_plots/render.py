"""Render line charts from ringshard CSV output.

Reads two file shapes, recognized by header:

  * metrics CSV (schema version 1): one row per finished scenario run. Every
    column that varies across rows becomes an x axis; each (axis, metric)
    pair gets one line chart. Rows that differ in some other swept column
    split into separate series.
  * timeline CSV (``t_s,txns,throughput_tps``): throughput over time for one
    run, drawn as a single line; a sustained dip (a view change, say) is
    shaded and the recovery point marked.

The renderer is read-only over its inputs and deliberately knows nothing
about the simulator: the column list below *is* the interface. Alongside the
charts it writes ``manifest.json`` recording the exact data series each chart
drew, so a chart can be audited against its CSV with no image parsing.

Usage: ringshard-plots metrics.csv [timeline.csv ...] --out charts/
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend first)

SCHEMA_VERSION = "1"

METRICS_COLUMNS = (
    "schema_version", "scenario", "seed", "shards", "replicas_per_shard",
    "faults", "clients", "batch_size", "cross_pct", "involved_shards",
    "deps_per_txn", "drop_pct", "txns_submitted", "txns_acked",
    "batches_acked", "duration_s", "throughput_tps", "latency_avg_ms",
    "latency_p50_ms", "latency_p99_ms", "messages_total", "messages_per_txn",
    "retransmissions", "view_changes", "checkpoints_stable", "completed",
)

TIMELINE_COLUMNS = ("t_s", "txns", "throughput_tps")

# Columns worth using as an x axis when they vary across rows.
AXIS_COLUMNS = (
    "shards", "replicas_per_shard", "clients", "batch_size", "cross_pct",
    "involved_shards", "deps_per_txn", "drop_pct", "seed",
)

# Columns worth plotting against an axis.
METRIC_COLUMNS = (
    "throughput_tps", "latency_avg_ms", "latency_p50_ms", "latency_p99_ms",
)


class InputError(Exception):
    """A problem with one input file; rendering of that file is abandoned."""


def _read_rows(path: str) -> tuple[list[str], list[dict]]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            rows = list(reader)
    except OSError as exc:
        raise InputError(f"cannot read: {exc}")
    return list(header), rows


def _check_schema(header: list[str], expected: tuple[str, ...]) -> None:
    missing = [c for c in expected if c not in header]
    extra = [c for c in header if c not in expected]
    if missing or extra:
        parts = []
        if missing:
            parts.append(f"missing columns {missing}")
        if extra:
            parts.append(f"unexpected columns {extra}")
        raise InputError("schema mismatch: " + ", ".join(parts))


def _classify(header: list[str]) -> str:
    if header == list(TIMELINE_COLUMNS):
        return "timeline"
    if "schema_version" in header:
        _check_schema(header, METRICS_COLUMNS)
        return "metrics"
    raise InputError(
        "schema mismatch: header matches neither the metrics schema"
        f" (version {SCHEMA_VERSION}) nor the timeline schema"
        f" {','.join(TIMELINE_COLUMNS)}"
    )


def _num(raw: str) -> float:
    return float(raw)


def _base_name(scenario: str) -> str:
    return scenario.split("[", 1)[0]


def _slug(text: str) -> str:
    keep = [ch if ch.isalnum() or ch in "._-" else "_" for ch in text]
    return "".join(keep).strip("_") or "chart"


def _line_chart(path: str, title: str, x_label: str, y_label: str,
                series: dict[str, tuple[list, list]]) -> None:
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for label, (xs, ys) in sorted(series.items()):
        ax.plot(xs, ys, marker="o", label=label)
    ax.set_xlabel(x_label)
    ax.set_ylabel(y_label)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    if len(series) > 1 or any(label for label in series):
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _render_metrics(path: str, rows: list[dict], out_dir: str,
                    manifest: dict) -> list[str]:
    if not rows:
        raise InputError("no data rows")
    bad = {r.get("schema_version") for r in rows} - {SCHEMA_VERSION}
    if bad:
        raise InputError(
            f"schema mismatch: version(s) {sorted(bad)} present,"
            f" expected {SCHEMA_VERSION}"
        )
    stem = _slug(os.path.splitext(os.path.basename(path))[0])
    written = []
    varying = [c for c in AXIS_COLUMNS
               if len({r[c] for r in rows}) > 1]
    if not varying:
        # Nothing swept: compare scenarios side by side instead.
        for metric in METRIC_COLUMNS:
            xs = [r["scenario"] for r in rows]
            ys = [_num(r[metric]) for r in rows]
            name = f"{stem}__{metric}_by_scenario.png"
            target = os.path.join(out_dir, name)
            fig, ax = plt.subplots(figsize=(6.4, 4.2))
            ax.bar(range(len(xs)), ys)
            ax.set_xticks(range(len(xs)))
            ax.set_xticklabels(xs, rotation=30, ha="right", fontsize=8)
            ax.set_ylabel(metric)
            ax.set_title(f"{metric} by scenario")
            fig.tight_layout()
            fig.savefig(target, dpi=110)
            plt.close(fig)
            manifest[name] = {
                "source": os.path.basename(path),
                "x_label": "scenario", "x": xs,
                "series": {metric: ys},
            }
            written.append(target)
        return written
    for axis in varying:
        others = [c for c in varying if c != axis]
        for metric in METRIC_COLUMNS:
            series: dict[str, tuple[list, list]] = {}
            for row in rows:
                label_bits = [_base_name(row["scenario"])]
                label_bits += [f"{c}={row[c]}" for c in others]
                label = " ".join(dict.fromkeys(label_bits))
                xs, ys = series.setdefault(label, ([], []))
                xs.append(_num(row[axis]))
                ys.append(_num(row[metric]))
            for xs, ys in series.values():
                order = sorted(range(len(xs)), key=lambda i: xs[i])
                xs[:] = [xs[i] for i in order]
                ys[:] = [ys[i] for i in order]
            name = f"{stem}__{metric}_vs_{axis}.png"
            target = os.path.join(out_dir, name)
            _line_chart(target, f"{metric} vs {axis}", axis, metric, series)
            manifest[name] = {
                "source": os.path.basename(path),
                "x_label": axis,
                "series": {label: {"x": xs, "y": ys}
                           for label, (xs, ys) in sorted(series.items())},
            }
            written.append(target)
    return written


def _find_dip(tps: list[float]) -> tuple[int, int] | None:
    """Longest interior stretch clearly below the typical rate; returns
    (start, end) bucket indexes, end exclusive."""
    positive = sorted(v for v in tps if v > 0)
    if not positive:
        return None
    median = positive[len(positive) // 2]
    first = min(i for i, v in enumerate(tps) if v > 0)
    last = max(i for i, v in enumerate(tps) if v > 0)
    best = None
    run_start = None
    for i in range(first, last + 1):
        if tps[i] < 0.5 * median:
            if run_start is None:
                run_start = i
        elif run_start is not None:
            if best is None or i - run_start > best[1] - best[0]:
                best = (run_start, i)
            run_start = None
    if run_start is not None and (best is None
                                  or last + 1 - run_start > best[1] - best[0]):
        best = (run_start, last + 1)
    return best


def _render_timeline(path: str, rows: list[dict], out_dir: str,
                     manifest: dict) -> list[str]:
    if not rows:
        raise InputError("no data rows")
    xs = [_num(r["t_s"]) for r in rows]
    ys = [_num(r["throughput_tps"]) for r in rows]
    stem = _slug(os.path.splitext(os.path.basename(path))[0])
    name = f"{stem}__throughput_over_time.png"
    target = os.path.join(out_dir, name)
    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    ax.plot(xs, ys, marker=".", lw=1.2)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("throughput (txn/s)")
    ax.set_title("throughput over time")
    ax.grid(True, alpha=0.3)
    entry = {
        "source": os.path.basename(path),
        "x_label": "t_s", "x": xs,
        "series": {"throughput_tps": ys},
    }
    dip = _find_dip(ys)
    if dip is not None:
        start, end = dip
        end_t = xs[end] if end < len(xs) else xs[-1]
        ax.axvspan(xs[start], end_t, color="tab:red", alpha=0.15)
        ax.annotate("dip", xy=(xs[start], max(ys) * 0.5),
                    xytext=(xs[start], max(ys) * 0.75),
                    arrowprops=dict(arrowstyle="->"), fontsize=9)
        if end < len(xs):
            ax.annotate("recovered", xy=(xs[end], ys[end]),
                        xytext=(xs[end], max(ys) * 0.9),
                        arrowprops=dict(arrowstyle="->"), fontsize=9)
        entry["dip"] = {"start_t_s": xs[start], "end_t_s": end_t}
    fig.tight_layout()
    fig.savefig(target, dpi=110)
    plt.close(fig)
    manifest[name] = entry
    return [target]


def render_file(path: str, out_dir: str, manifest: dict) -> list[str]:
    header, rows = _read_rows(path)
    kind = _classify(header)
    if kind == "timeline":
        return _render_timeline(path, rows, out_dir, manifest)
    return _render_metrics(path, rows, out_dir, manifest)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ringshard-plots",
        description="render charts from ringshard metrics/timeline CSVs")
    parser.add_argument("csv", nargs="+", help="input CSV file(s)")
    parser.add_argument("--out", required=True, help="output directory")
    args = parser.parse_args(argv)
    os.makedirs(args.out, exist_ok=True)
    manifest: dict = {}
    failed = False
    for path in args.csv:
        try:
            written = render_file(path, args.out, manifest)
        except InputError as exc:
            print(f"ringshard-plots: {path}: {exc}", file=sys.stderr)
            failed = True
            continue
        for target in written:
            print(target)
    if manifest:
        with open(os.path.join(args.out, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
    return 2 if failed else 0


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
