"""Command line front end: run scenario files, write delimited metrics,
optionally render quick-look figures next to them.

    ringshard run --scenario scenarios/baseline.scn --out results/
    ringshard run --scenario batch_size --figures --assert on
    ringshard list-scenarios

Each run (or sweep combo) appends one row to metrics.csv in the output
directory. Scenarios with `timeline = true` also write timeline.csv bucketing
acknowledged transactions over virtual time. Full traces land in
<name>.trace.jsonl when the scenario sets trace = full. --figures renders
PNG charts for whatever was produced. Exit status is nonzero if any run
failed its safety checks (--assert on) or did not complete.
"""

from __future__ import annotations

import argparse
import os
import sys
from importlib import resources

from . import scenario as scn
from . import verify, workload


def _packaged_scenarios() -> dict[str, str]:
    out = {}
    root = resources.files("ringshard").joinpath("scenarios")
    if root.is_dir():
        for entry in sorted(root.iterdir()):
            if entry.name.endswith(".scn"):
                out[entry.name[:-4]] = str(entry)
    return out


def _resolve_scenario(arg: str) -> str:
    if os.path.exists(arg):
        return arg
    packaged = _packaged_scenarios()
    if arg in packaged:
        return packaged[arg]
    raise SystemExit(
        f"scenario {arg!r} not found (not a file, not one of:"
        f" {', '.join(sorted(packaged)) or 'none'})"
    )


def _render_figures(out_dir: str, rows: list[dict],
                    timelines: dict[str, list[dict]]) -> list[str]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    if rows:
        labels = [r["scenario"] for r in rows]
        short = [l if len(l) <= 28 else "…" + l[-27:] for l in labels]
        for metric, fname, ylabel in (
            ("throughput_tps", "throughput.png", "throughput (txn/s)"),
            ("latency_avg_ms", "latency.png", "avg latency (ms)"),
        ):
            fig, ax = plt.subplots(figsize=(max(6, len(rows) * 0.7), 4))
            ax.bar(range(len(rows)), [float(r[metric]) for r in rows],
                   color="#4878a8")
            ax.set_xticks(range(len(rows)))
            ax.set_xticklabels(short, rotation=45, ha="right", fontsize=7)
            ax.set_ylabel(ylabel)
            ax.set_title(f"{metric} by run")
            fig.tight_layout()
            path = os.path.join(out_dir, fname)
            fig.savefig(path, dpi=110)
            plt.close(fig)
            written.append(path)
    for name, buckets in timelines.items():
        if not buckets:
            continue
        fig, ax = plt.subplots(figsize=(7, 3.5))
        ax.plot([b["t_s"] for b in buckets],
                [b["throughput_tps"] for b in buckets],
                color="#a85048", linewidth=1.4)
        ax.set_xlabel("time (s)")
        ax.set_ylabel("throughput (txn/s)")
        ax.set_title(f"{name}: acknowledged over time")
        fig.tight_layout()
        path = os.path.join(out_dir, f"{name}.timeline.png")
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)
    return written


def cmd_run(args) -> int:
    path = _resolve_scenario(args.scenario)
    base = scn.parse_scenario(path)
    if args.seed is not None:
        base = scn.replace(base, seed=args.seed)
    if args.trace:
        base = scn.replace(base, trace=args.trace)
    if args.deadline:
        base = scn.replace(base, deadline_s=args.deadline)
    combos = scn.expand(base)
    os.makedirs(args.out, exist_ok=True)

    rows: list[dict] = []
    timelines: dict[str, list[dict]] = {}
    failures = 0
    for combo in combos:
        res, sim, spec, registry, metrics = scn.run_one(combo)
        row = metrics.row()
        rows.append(row)
        status = "ok" if res.all_acked() else "INCOMPLETE"
        problems: list[str] = []
        if args.assert_mode == "on":
            problems = verify.run_all(res, registry)
            if problems:
                status = "SAFETY"
        if status != "ok":
            failures += 1
        print(f"{combo.name}: {status} tput={row['throughput_tps']}"
              f" lat_avg_ms={row['latency_avg_ms']}"
              f" acked={row['txns_acked']}/{row['txns_submitted']}"
              f" msgs={row['messages_total']}")
        for p in problems[:8]:
            print(f"  problem: {p}", file=sys.stderr)
        if combo.timeline:
            timelines[combo.name] = workload.ack_timeline(
                res, bucket_ms=combo.bucket_ms
            )
        if combo.trace == "full":
            tpath = os.path.join(args.out, f"{combo.name}.trace.jsonl")
            with open(tpath, "wb") as fh:
                fh.write(res.trace_bytes())

    csv_path = os.path.join(args.out, "metrics.csv")
    workload.write_csv(csv_path, rows)
    print(f"wrote {csv_path} ({len(rows)} rows)")
    for name, buckets in timelines.items():
        tl_path = os.path.join(args.out, f"{name}.timeline.csv")
        _write_timeline(tl_path, buckets)
        print(f"wrote {tl_path}")
    if args.figures:
        for fig_path in _render_figures(args.out, rows, timelines):
            print(f"wrote {fig_path}")
    return 1 if failures else 0


def _write_timeline(path: str, buckets: list[dict]) -> None:
    import csv as _csv
    with open(path, "w", newline="") as fh:
        writer = _csv.DictWriter(fh, fieldnames=("t_s", "txns",
                                                 "throughput_tps"))
        writer.writeheader()
        writer.writerows(buckets)


def cmd_list(_args) -> int:
    packaged = _packaged_scenarios()
    if not packaged:
        print("no packaged scenarios")
        return 0
    for name, spath in packaged.items():
        print(f"{name:28s} {spath}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ringshard",
        description="sharded consensus simulator and scenario runner",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    runp = sub.add_parser("run", help="run a scenario file or packaged name")
    runp.add_argument("--scenario", required=True,
                      help="path to a .scn file or a packaged scenario name")
    runp.add_argument("--out", default="results",
                      help="output directory (default: results)")
    runp.add_argument("--seed", type=int, default=None,
                      help="override the scenario seed")
    runp.add_argument("--trace", choices=("counts", "full"), default=None,
                      help="override the scenario trace level")
    runp.add_argument("--deadline", type=int, default=None,
                      help="override the virtual-time deadline (seconds)")
    runp.add_argument("--assert", dest="assert_mode", choices=("on", "off"),
                      default="on", help="run safety checks (default: on)")
    runp.add_argument("--figures", action="store_true",
                      help="render quick-look PNG charts next to the CSV")
    runp.set_defaults(func=cmd_run)

    listp = sub.add_parser("list-scenarios", help="show packaged scenarios")
    listp.set_defaults(func=cmd_list)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
