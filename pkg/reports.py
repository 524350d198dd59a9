"""Persistence and text formatting for metric, cost and gradient-check reports."""

import json
import math
import os


def write_json(path: str, payload: dict) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, default=float)
    return path


def read_json(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def format_gradcheck_table(reports: list) -> str:
    width = max([len(r.op_name) for r in reports] + [9])
    lines = [f"{'operation':<{width}}  {'max rel err':>12}  {'tol':>8}  result"]
    for r in reports:
        mark = "✅ pass" if r.passed else "❌ FAIL"
        lines.append(f"{r.op_name:<{width}}  {r.max_rel_error:>12.3e}  {r.tolerance:>8.0e}  {mark}")
    failed = sum(not r.passed for r in reports)
    lines.append(f"{len(reports) - failed}/{len(reports)} passed")
    return "\n".join(lines)


def format_metric_report(report, title: str = "Results") -> str:
    lines = [f"📊 {title}: Success {report.success:.2f} | Precision {report.precision:.2f} "
             f"| {report.frames} frames"]
    for category, row in report.per_category.items():
        lines.append(f"   {category:<12} Success {row['success']:6.2f}  Precision {row['precision']:6.2f}"
                     f"  ({row['frames']} frames)")
    return "\n".join(lines)


def format_cost_report(report) -> str:
    lines = [f"🧮 Parameters: {report.params:,}", f"🧮 FLOPs per forward: {report.flops / 1e9:.3f} G"]
    for name, value in report.flops_by_component.items():
        lines.append(f"   {name:<5} {value / 1e6:12.2f} M")
    if not math.isnan(report.ms):
        lines.append(f"⏱️  {report.ms:.2f} ms/frame ({report.fps:.1f} fps)")
    return "\n".join(lines)
