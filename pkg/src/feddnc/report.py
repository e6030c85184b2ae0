"""Multi-run comparison: aligned accuracy tables, per-algorithm summaries over
seeds, transfer accounting, and a self-contained SVG chart."""

from __future__ import annotations

import configparser
import csv
from dataclasses import dataclass
from pathlib import Path

from .checkpoint import load_checkpoint
from .errors import ConfigurationError, FormatError

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
            "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


@dataclass
class LoadedRun:
    label: str
    name: str
    algorithm: str
    seed: int
    dataset_signature: str
    rounds: list[dict]          # metrics.csv rows, parsed
    training_rounds: list[dict]  # rows whose mode is not 'prepass'
    full_model_scalars: int
    transferred_scalars: int     # training rounds only
    full_equivalent_scalars: int  # what full-model transfers would have cost
    transfer_matched: bool


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def load_run(run_dir: str | Path) -> LoadedRun:
    run_dir = Path(run_dir)
    manifest = run_dir / "manifest.txt"
    if not manifest.is_file():
        raise ConfigurationError(f"{run_dir}: missing manifest.txt")
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_string(manifest.read_text(encoding="utf-8"), source=str(manifest))
    try:
        name = parser["experiment"]["name"]
        algorithm = parser["experiment"]["algorithm"]
        seed = int(parser["experiment"]["seed"])
        signature = "\n".join(
            f"{k}={v}" for section in ("dataset", "partition")
            for k, v in sorted(parser[section].items())
        )
    except KeyError as exc:
        raise FormatError(f"{manifest}: missing section or key {exc}") from None
    transfer_matched = parser.get("dnc", "transfer_matched", fallback="false") == "true"

    rounds = _read_csv(run_dir / "metrics.csv")
    if not rounds:
        raise FormatError(f"{run_dir}: metrics.csv has no rows")
    training = [r for r in rounds if r["mode"] != "prepass"]
    full = load_checkpoint(run_dir / "checkpoint.fdnc").total_scalars

    training_round_ids = {r["round"] for r in training}
    transferred = 0
    transfers = 0
    for row in _read_csv(run_dir / "ledger.csv"):
        if row["round"] in training_round_ids:
            transferred += int(row["scalar_count"])
            transfers += 1
    algo_label = "dnc_matched" if (algorithm == "dnc" and transfer_matched) else algorithm
    return LoadedRun(
        label=f"{name}@seed{seed}",
        name=name,
        algorithm=algo_label,
        seed=seed,
        dataset_signature=signature,
        rounds=rounds,
        training_rounds=training,
        full_model_scalars=full,
        transferred_scalars=transferred,
        full_equivalent_scalars=transfers * full,
        transfer_matched=transfer_matched,
    )


def compare_report(run_dirs: list[str | Path], out_dir: str | Path) -> Path:
    """Build the comparison table, per-algorithm summary, and SVG chart."""
    if len(run_dirs) < 2:
        raise ConfigurationError("comparison needs at least 2 runs")
    runs = [load_run(d) for d in run_dirs]
    base_sig = runs[0].dataset_signature
    for run in runs[1:]:
        if run.dataset_signature != base_sig:
            raise ConfigurationError(
                f"runs '{runs[0].label}' and '{run.label}' use different "
                "dataset/partition settings and cannot be compared"
            )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    notes: list[str] = []

    counts = {len(r.training_rounds) for r in runs}
    aligned = min(counts)
    if len(counts) > 1:
        notes.append(
            f"round counts differ across runs ({sorted(counts)}); "
            f"comparison aligned on the first {aligned} training rounds"
        )

    header = ["round"] + [r.label for r in runs]
    lines = [",".join(header)]
    for i in range(aligned):
        cells = [str(i + 1)] + [r.training_rounds[i]["accuracy"] for r in runs]
        lines.append(",".join(cells))
    (out / "comparison.csv").write_text("\n".join(lines) + "\n",
                                        encoding="utf-8", newline="\n")

    by_algo: dict[str, list[LoadedRun]] = {}
    for run in runs:
        by_algo.setdefault(run.algorithm, []).append(run)
    summary = ["algorithm,runs,final_accuracy_mean,final_accuracy_min,final_accuracy_max,"
               "transferred_scalars_mean,transfer_ratio"]
    for algo in sorted(by_algo):
        group = by_algo[algo]
        finals = [float(r.training_rounds[-1]["accuracy"]) for r in group]
        mean_transfer = sum(r.transferred_scalars for r in group) / len(group)
        ratio = sum(r.transferred_scalars for r in group) / sum(
            r.full_equivalent_scalars for r in group
        )
        summary.append(
            f"{algo},{len(group)},{sum(finals) / len(finals):.6f},{min(finals):.6f},"
            f"{max(finals):.6f},{mean_transfer:.1f},{ratio:.6f}"
        )
    summary.append("fedma,0,not implemented,not implemented,not implemented,"
                   "not implemented,not implemented")
    (out / "summary.csv").write_text("\n".join(summary) + "\n",
                                     encoding="utf-8", newline="\n")

    (out / "comparison.svg").write_text(_render_svg(runs, aligned),
                                        encoding="utf-8", newline="\n")

    report_lines = [f"compared {len(runs)} runs over {aligned} aligned training rounds"]
    report_lines += [f"note: {n}" for n in notes]
    for algo in sorted(by_algo):
        group = by_algo[algo]
        finals = [float(r.training_rounds[-1]["accuracy"]) for r in group]
        report_lines.append(
            f"{algo}: final accuracy mean {sum(finals) / len(finals):.4f} "
            f"(min {min(finals):.4f}, max {max(finals):.4f}) over {len(group)} run(s)"
        )
    report_lines.append("fedma: not implemented")
    (out / "report.txt").write_text("\n".join(report_lines) + "\n",
                                    encoding="utf-8", newline="\n")
    return out


def _render_svg(runs: list[LoadedRun], aligned: int, width: int = 640, height: int = 420) -> str:
    """Accuracy-vs-round polylines; no external assets, deterministic bytes."""
    margin_l, margin_r, margin_t, margin_b = 60, 20, 20, 60
    plot_w = width - margin_l - margin_r
    plot_h = height - margin_t - margin_b

    def x_pos(round_i: int) -> float:
        if aligned == 1:
            return margin_l + plot_w / 2
        return margin_l + plot_w * (round_i - 1) / (aligned - 1)

    def y_pos(acc: float) -> float:
        return margin_t + plot_h * (1.0 - acc)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{margin_l}" y="{margin_t}" width="{plot_w}" height="{plot_h}" '
        'fill="none" stroke="#333333" stroke-width="1"/>',
    ]
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = y_pos(tick)
        parts.append(
            f'<line x1="{margin_l - 4}" y1="{y:.1f}" x2="{margin_l}" y2="{y:.1f}" '
            'stroke="#333333"/>'
        )
        parts.append(
            f'<text x="{margin_l - 8}" y="{y + 4:.1f}" font-size="11" '
            f'text-anchor="end" font-family="sans-serif">{tick:.2f}</text>'
        )
    tick_rounds = sorted({1, max(1, aligned // 2), aligned})
    for r in tick_rounds:
        x = x_pos(r)
        parts.append(
            f'<line x1="{x:.1f}" y1="{margin_t + plot_h}" x2="{x:.1f}" '
            f'y2="{margin_t + plot_h + 4}" stroke="#333333"/>'
        )
        parts.append(
            f'<text x="{x:.1f}" y="{margin_t + plot_h + 18}" font-size="11" '
            f'text-anchor="middle" font-family="sans-serif">{r}</text>'
        )
    parts.append(
        f'<text x="{margin_l + plot_w / 2:.1f}" y="{height - 16}" font-size="13" '
        'text-anchor="middle" font-family="sans-serif">round</text>'
    )
    parts.append(
        f'<text x="16" y="{margin_t + plot_h / 2:.1f}" font-size="13" '
        f'text-anchor="middle" font-family="sans-serif" '
        f'transform="rotate(-90 16 {margin_t + plot_h / 2:.1f})">accuracy</text>'
    )
    for i, run in enumerate(runs):
        color = _PALETTE[i % len(_PALETTE)]
        points = " ".join(
            f"{x_pos(j + 1):.2f},{y_pos(float(run.training_rounds[j]['accuracy'])):.2f}"
            for j in range(aligned)
        )
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{points}"/>'
        )
        parts.append(
            f'<text x="{margin_l + 8}" y="{margin_t + 16 + 14 * i}" font-size="11" '
            f'font-family="sans-serif" fill="{color}">{run.label} ({run.algorithm})</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
