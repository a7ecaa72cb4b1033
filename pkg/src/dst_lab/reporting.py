"""Deterministic rendering of evaluation reports: JSON, CSV, and SVG charts.

All outputs are pure functions of the report contents: no timestamps, no
library-assigned element ids, byte-identical across runs. SVG charts are
self-contained hand-rolled documents.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .metrics import EvalReport

NO_DATA_MARKER = "# no data"


# ---------------------------------------------------------------------------
# Method-comparison table (headline-style JGA table)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MethodComparisonRow:
    label: str
    dev_jga_percent: float
    test_jga_percent: float


def render_method_comparison(rows: list[MethodComparisonRow]) -> str:
    """CSV with one row per context-management method, dev and test columns."""
    lines = ["model,swoz_dev,swoz_test"]
    for row in rows:
        lines.append(f"{row.label},{row.dev_jga_percent:.2f}%,{row.test_jga_percent:.2f}%")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# CSV renderers (column orders are frozen)
# ---------------------------------------------------------------------------


def _summary_csv(report: EvalReport) -> str:
    lines = ["metric,value"]
    if report.n_turns == 0:
        lines.append(NO_DATA_MARKER)
    lines.append(f"jga,{report.jga!r}")
    lines.append(f"jga_post,{report.jga_post!r}")
    lines.append(f"domain_accuracy,{report.domain_accuracy!r}")
    lines.append(f"n_dialogues,{report.n_dialogues}")
    lines.append(f"n_turns,{report.n_turns}")
    return "\n".join(lines) + "\n"


def _per_turn_csv(report: EvalReport) -> str:
    lines = ["turn_index,jga,count"]
    if not report.per_turn:
        lines.append(NO_DATA_MARKER)
    for idx in sorted(report.per_turn):
        value, count = report.per_turn[idx]
        lines.append(f"{idx},{value!r},{count}")
    return "\n".join(lines) + "\n"


def _group_f1_csv(report: EvalReport) -> str:
    lines = ["group,precision,recall,f1"]
    if not report.group_f1:
        lines.append(NO_DATA_MARKER)
    for group, (p, r, f1) in report.group_f1.items():
        lines.append(f"{group},{p!r},{r!r},{f1!r}")
    return "\n".join(lines) + "\n"


def _slot_errors_csv(report: EvalReport) -> str:
    lines = ["domain,slot,insertions,deletions,imperfect_matches,matched,mean_fuzzy_ratio"]
    if not report.slot_errors:
        lines.append(NO_DATA_MARKER)
    for (domain, slot), entry in report.slot_errors.items():
        matched = len(entry.matched_ratios)
        mean_ratio = sum(entry.matched_ratios) / matched if matched else 1.0
        lines.append(
            f"{domain},{slot},{entry.insertions},{entry.deletions},"
            f"{entry.imperfect_matches},{matched},{mean_ratio!r}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# SVG helpers
# ---------------------------------------------------------------------------

_SVG_HEADER = (
    '<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
    'viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">'
)


def _svg(width: int, height: int, body: list[str]) -> str:
    parts = [_SVG_HEADER.format(w=width, h=height)]
    parts.extend(body)
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _no_data_svg(title: str) -> str:
    body = [
        f'<text x="10" y="20" font-weight="bold">{title}</text>',
        '<text x="10" y="45" fill="#777">no data</text>',
    ]
    return _svg(320, 60, body)


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _line_chart(title: str, points: list[tuple[float, float]], x_label: str, y_label: str) -> str:
    if not points:
        return _no_data_svg(title)
    width, height, margin = 480, 280, 48
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    x_min, x_max = min(xs), max(xs)
    span_x = (x_max - x_min) or 1.0
    y_max = max(1e-9, max(ys))
    plot_w, plot_h = width - 2 * margin, height - 2 * margin

    def sx(x: float) -> float:
        return margin + (x - x_min) / span_x * plot_w

    def sy(y: float) -> float:
        return height - margin - y / y_max * plot_h

    path = " ".join(
        f"{'M' if i == 0 else 'L'} {_fmt(sx(x))} {_fmt(sy(y))}" for i, (x, y) in enumerate(points)
    )
    body = [
        f'<text x="{margin}" y="20" font-weight="bold">{title}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="#333"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="#333"/>',
        f'<path d="{path}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>',
        f'<text x="{width // 2}" y="{height - 10}" text-anchor="middle">{x_label}</text>',
        f'<text x="14" y="{height // 2}" transform="rotate(-90 14 {height // 2})" text-anchor="middle">{y_label}</text>',
        f'<text x="{margin - 6}" y="{height - margin + 4}" text-anchor="end">0</text>',
        f'<text x="{margin - 6}" y="{margin + 4}" text-anchor="end">{_fmt(y_max)}</text>',
    ]
    for x, y in points:
        body.append(f'<circle cx="{_fmt(sx(x))}" cy="{_fmt(sy(y))}" r="2" fill="#1f77b4"/>')
    return _svg(width, height, body)


def _grouped_bar_chart(
    title: str,
    groups: list[str],
    series: list[tuple[str, str, list[float]]],
) -> str:
    """series: (label, color, one value per group)."""
    if not groups or not series:
        return _no_data_svg(title)
    width, height, margin = 560, 300, 52
    plot_w, plot_h = width - 2 * margin, height - 2 * margin - 20
    y_max = max(1e-9, max(v for _, _, values in series for v in values))
    slot_w = plot_w / len(groups)
    bar_w = slot_w * 0.8 / len(series)
    body = [f'<text x="{margin}" y="20" font-weight="bold">{title}</text>']
    base_y = height - margin - 20
    body.append(
        f'<line x1="{margin}" y1="{base_y}" x2="{width - margin}" y2="{base_y}" stroke="#333"/>'
    )
    for gi, group in enumerate(groups):
        x0 = margin + gi * slot_w + slot_w * 0.1
        for si, (label, color, values) in enumerate(series):
            v = values[gi]
            h = v / y_max * plot_h
            x = x0 + si * bar_w
            body.append(
                f'<rect x="{_fmt(x)}" y="{_fmt(base_y - h)}" width="{_fmt(bar_w)}" '
                f'height="{_fmt(h)}" fill="{color}"/>'
            )
        body.append(
            f'<text x="{_fmt(margin + gi * slot_w + slot_w / 2)}" y="{base_y + 14}" '
            f'text-anchor="middle">{group}</text>'
        )
    legend_x = margin
    for si, (label, color, _) in enumerate(series):
        lx = legend_x + si * 130
        body.append(f'<rect x="{lx}" y="{height - 18}" width="10" height="10" fill="{color}"/>')
        body.append(f'<text x="{lx + 14}" y="{height - 9}">{label}</text>')
    return _svg(width, height, body)


def _group_f1_svg(report: EvalReport) -> str:
    if not report.group_f1:
        return _no_data_svg("Slot value F1 by group")
    groups = list(report.group_f1)
    series = [
        ("precision", "#9ecae1", [report.group_f1[g][0] for g in groups]),
        ("recall", "#fdae6b", [report.group_f1[g][1] for g in groups]),
        ("f1", "#31a354", [report.group_f1[g][2] for g in groups]),
    ]
    return _grouped_bar_chart("Slot value F1 by group", groups, series)


def _per_turn_svg(report: EvalReport) -> str:
    points = [(float(idx), report.per_turn[idx][0]) for idx in sorted(report.per_turn)]
    return _line_chart("JGA per turn", points, "turn index", "JGA")


def _slot_errors_svg(report: EvalReport) -> str:
    if not report.slot_errors:
        return _no_data_svg("Most error-prone slots")
    groups = [f"{d}-{s}" for d, s in report.slot_errors]
    entries = list(report.slot_errors.values())
    series = [
        ("insertions", "#ff7f0e", [float(e.insertions) for e in entries]),
        ("deletions", "#d62728", [float(e.deletions) for e in entries]),
        ("substitutions", "#1f77b4", [float(e.imperfect_matches) for e in entries]),
    ]
    return _grouped_bar_chart("Most error-prone slots", groups, series)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def render_report(
    report: EvalReport, formats: set[str], out_dir: str | Path
) -> list[Path]:
    """Write the report in the requested formats; returns the files written."""
    unknown = set(formats) - {"json", "csv", "svg"}
    if unknown:
        raise ValueError(f"unknown report formats: {sorted(unknown)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def emit(name: str, content: str) -> None:
        path = out / name
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(content)
        written.append(path)

    if "json" in formats:
        emit("report.json", json.dumps(report.to_json_obj(), indent=2) + "\n")
    if "csv" in formats:
        emit("summary.csv", _summary_csv(report))
        emit("per_turn.csv", _per_turn_csv(report))
        emit("group_f1.csv", _group_f1_csv(report))
        emit("slot_errors.csv", _slot_errors_csv(report))
    if "svg" in formats:
        emit("per_turn_jga.svg", _per_turn_svg(report))
        emit("group_f1.svg", _group_f1_svg(report))
        emit("slot_errors.svg", _slot_errors_svg(report))
    return written


def render_context_lengths(rows) -> str:
    """CSV for context-length reports (strategy, n_queries, turn_index, mean rows)."""
    lines = ["strategy,n_queries,turn_index,mean_rows,n_turns"]
    if not rows:
        lines.append(NO_DATA_MARKER)
    for row in rows:
        n_queries = "" if row.n_queries is None else row.n_queries
        lines.append(
            f"{row.strategy.value},{n_queries},{row.turn_index},{row.mean_rows!r},{row.n_turns}"
        )
    return "\n".join(lines) + "\n"


def render_retention_table(rows: list[tuple[int, int, float]]) -> str:
    """CSV of (seed, n_queries, accuracy) triples from retention probes."""
    lines = ["seed,n_queries,accuracy"]
    for seed, n_queries, acc in rows:
        lines.append(f"{seed},{n_queries},{acc!r}")
    return "\n".join(lines) + "\n"
