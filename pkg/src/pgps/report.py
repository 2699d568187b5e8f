"""Reporting: benchmark-style tables from saved runs and SVG line charts.

A report scans run directories written by the harness (summary.json,
trace.csv, epochs.csv, schedule.json) and renders one row per sampling
strategy: Dice, relative Dice delta against the reference strategy,
median virtual relative runtime, and relative iterated-voxel FLOPs.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .schedule import CurriculumSchedule
from .stats import RunTrace, virtual_relative_runtime


@dataclass
class RunRecord:
    path: Path
    mode: str
    seed: int
    fraction: int
    dice: float | None
    iterated_voxels: int
    trace: RunTrace
    schedule: CurriculumSchedule


def _read_trace(run_dir: Path) -> RunTrace:
    rows = (run_dir / "trace.csv").read_text().strip().splitlines()[1:]
    cols = [r.split(",") for r in rows]
    epoch_rows = (run_dir / "epochs.csv").read_text().strip().splitlines()[1:]
    ecols = [r.split(",") for r in epoch_rows]
    return RunTrace(
        stage_index=np.array([int(c[1]) for c in cols], dtype=np.int64),
        fg_fraction=np.array([float(c[2]) for c in cols]),
        unique_class_fraction=np.array([float(c[3]) for c in cols]),
        tensor_voxels=np.array([int(c[4]) for c in cols], dtype=np.int64),
        loss=np.array([float(c[5]) for c in cols]),
        epoch_seconds=[float(c[2]) for c in ecols],
        epoch_stage=[int(c[1]) for c in ecols],
    )


def load_runs(root) -> list[RunRecord]:
    root = Path(root)
    records = []
    for summary_path in sorted(root.glob("**/summary.json")):
        run_dir = summary_path.parent
        summary = json.loads(summary_path.read_text())
        schedule = CurriculumSchedule.from_json((run_dir / "schedule.json").read_text())
        dice = summary.get("dice")
        records.append(
            RunRecord(
                path=run_dir,
                mode=summary["mode"],
                seed=int(summary["seed"]),
                fraction=int(summary["fraction"]),
                dice=None if dice is None else dice.get("mean"),
                iterated_voxels=int(summary["iterated_voxels"]),
                trace=_read_trace(run_dir),
                schedule=schedule,
            )
        )
    if not records:
        raise ValueError(f"no runs found under {root}")
    return records


def build_table(records: list[RunRecord], reference_mode: str = "CPS") -> list[dict]:
    """One row per mode: mean Dice, relative Dice delta, median virtual
    relative runtime, relative FLOPs against the reference mode's runs."""
    by_mode: dict[str, list[RunRecord]] = {}
    for rec in records:
        by_mode.setdefault(rec.mode, []).append(rec)
    if reference_mode not in by_mode:
        raise ValueError(f"no {reference_mode!r} runs to normalize against")
    ref_runs = by_mode[reference_mode]
    ref_dice = float(np.mean([r.dice for r in ref_runs if r.dice is not None]))
    ref_voxels = float(np.mean([r.iterated_voxels for r in ref_runs]))
    rows = []
    for mode in sorted(by_mode):
        runs = by_mode[mode]
        dices = [r.dice for r in runs if r.dice is not None]
        dice = float(np.mean(dices)) if dices else float("nan")
        rel_dice = (dice / ref_dice - 1.0) * 100.0 if ref_dice else float("nan")
        vrr = float(
            np.median([virtual_relative_runtime(r.trace, r.schedule) for r in runs])
        )
        rel_flops = float(np.mean([r.iterated_voxels for r in runs])) / ref_voxels
        rows.append(
            {
                "mode": mode,
                "runs": len(runs),
                "dice": dice,
                "rel_dice_delta_pct": rel_dice,
                "rel_runtime_pct": vrr * 100.0,
                "rel_flops_pct": rel_flops * 100.0,
            }
        )
    return rows


def table_to_csv(rows: list[dict]) -> str:
    header = "mode,runs,dice,rel_dice_delta_pct,rel_runtime_pct,rel_flops_pct"
    lines = [header]
    for row in rows:
        lines.append(
            f"{row['mode']},{row['runs']},{row['dice']:.6f},"
            f"{row['rel_dice_delta_pct']:.4f},{row['rel_runtime_pct']:.2f},"
            f"{row['rel_flops_pct']:.2f}"
        )
    return "\n".join(lines) + "\n"


_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b")


def svg_line_chart(
    series: dict[str, tuple],
    title: str,
    x_label: str,
    y_label: str,
    width: int = 640,
    height: int = 400,
) -> str:
    """A minimal deterministic SVG line chart; series maps name -> (xs, ys)."""
    margin = 56
    xs_all = np.concatenate([np.asarray(xs, dtype=float) for xs, _ in series.values()])
    ys_all = np.concatenate([np.asarray(ys, dtype=float) for _, ys in series.values()])
    x_lo, x_hi = float(xs_all.min()), float(xs_all.max())
    y_lo, y_hi = float(ys_all.min()), float(ys_all.max())
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0

    def px(x):
        return margin + (x - x_lo) / (x_hi - x_lo) * (width - 2 * margin)

    def py(y):
        return height - margin - (y - y_lo) / (y_hi - y_lo) * (height - 2 * margin)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width/2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{margin}" y1="{height-margin}" x2="{width-margin}" y2="{height-margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height-margin}" stroke="black"/>',
        f'<text x="{width/2:.1f}" y="{height-12}" text-anchor="middle" font-size="12">{x_label}</text>',
        f'<text x="16" y="{height/2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 16 {height/2:.1f})">{y_label}</text>',
        f'<text x="{margin}" y="{height-margin+16}" font-size="10" text-anchor="middle">{x_lo:.3g}</text>',
        f'<text x="{width-margin}" y="{height-margin+16}" font-size="10" text-anchor="middle">{x_hi:.3g}</text>',
        f'<text x="{margin-6}" y="{height-margin}" font-size="10" text-anchor="end">{y_lo:.3g}</text>',
        f'<text x="{margin-6}" y="{margin+4}" font-size="10" text-anchor="end">{y_hi:.3g}</text>',
    ]
    for i, (name, (xs, ys)) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        points = " ".join(
            f"{px(float(x)):.2f},{py(float(y)):.2f}" for x, y in zip(xs, ys)
        )
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{points}"/>'
        )
        ly = margin + 16 * i
        parts.append(
            f'<line x1="{width-margin-110}" y1="{ly}" x2="{width-margin-90}" y2="{ly}" '
            f'stroke="{color}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{width-margin-84}" y="{ly+4}" font-size="11">{name}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_trace_charts(records: list[RunRecord], out_dir) -> list[Path]:
    """Per-iteration trace charts (class balance, unique classes, tensor
    voxels) with one line per mode, using each mode's first run."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    first_by_mode: dict[str, RunRecord] = {}
    for rec in records:
        first_by_mode.setdefault(rec.mode, rec)
    charts = {
        "fg_fraction": ("Foreground voxel fraction per iteration", "fraction"),
        "unique_class_fraction": ("Unique classes per iteration", "fraction"),
        "tensor_voxels": ("Input tensor voxels per iteration", "voxels"),
    }
    written = []
    for attr, (title, ylabel) in charts.items():
        series = {}
        for mode, rec in sorted(first_by_mode.items()):
            values = getattr(rec.trace, attr)
            series[mode] = (np.arange(len(values)), np.asarray(values, dtype=float))
        path = out_dir / f"trace_{attr}.svg"
        path.write_text(svg_line_chart(series, title, "iteration", ylabel))
        written.append(path)
    return written


def write_convergence_chart(report: dict, out_path) -> Path:
    """Normalized Dice vs training-length fraction, one line per mode."""
    series: dict[str, tuple] = {}
    by_mode: dict[str, list[tuple]] = {}
    for row in report["rows"]:
        by_mode.setdefault(row["mode"], []).append(
            (row["fraction"], row["normalized_dice"])
        )
    for mode, points in sorted(by_mode.items()):
        points.sort()
        series[mode] = ([p[0] for p in points], [p[1] for p in points])
    out_path = Path(out_path)
    out_path.write_text(
        svg_line_chart(
            series, "Convergence over training length", "fraction of training [%]",
            "normalized Dice",
        )
    )
    return out_path
