"""Report rendering: delimited output, aligned text table and figures.

The evaluation report is written three ways:

* ``report.tsv`` - machine-readable long format (stage, metric, key, value)
* ``report.txt`` - aligned table, metric rows by stage, speaker columns,
  severity correlation columns r / |r| / r_GT
* ``figures/*.png`` - per-metric speaker bars by stage and a
  severity-correlation scatter
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .evalkit import EvalReport  # noqa: E402

_METRIC_LABELS = {"p_stoi": "P-STOI", "p_estoi": "P-ESTOI", "per": "PER"}
_METRIC_ORDER = ("p_stoi", "p_estoi", "per")


def _fmt(value, metric: str) -> str:
    if value is None:
        return "-"
    return "%.1f" % value if metric == "per" else "%.3f" % value


def report_rows(report: EvalReport) -> list:
    """Long-format rows (stage, metric, key, value-string) for the TSV."""
    rows = []
    for u in report.utterance_scores:
        for metric in _METRIC_ORDER:
            if u[metric] is not None:
                rows.append((u["stage"], metric, "utt:%s" % u["utt_id"],
                             "%.6f" % u[metric]))
    stages = tuple(report.stages) + (("GT",) if report.gt_correlations
                                     or any(k[0] == "GT" for k in report.speaker_means)
                                     else ())
    for stage in stages:
        for metric in _METRIC_ORDER:
            means = report.speaker_means.get((stage, metric), {})
            for spk in report.speakers:
                if spk in means:
                    rows.append((stage, metric, "speaker:%s" % spk,
                                 "%.6f" % means[spk]))
            r = (report.gt_correlations.get(metric) if stage == "GT"
                 else report.correlations.get((stage, metric)))
            if r is not None:
                rows.append((stage, metric, "r", "%.6f" % r))
                rows.append((stage, metric, "r_abs", "%.6f" % abs(r)))
    for spk, ster in sorted(report.ster.items()):
        rows.append(("-", "ster", "speaker:%s" % spk, "%.6f" % ster))
    return rows


def write_report_tsv(report: EvalReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["stage\tmetric\tkey\tvalue"]
    lines += ["\t".join(r) for r in report_rows(report)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def format_report_table(report: EvalReport) -> str:
    """Aligned severity table: metric-by-stage rows, speaker columns."""
    speakers = list(report.speakers)
    header = [""] + speakers + ["r", "|r|", "r_GT"]
    body = []
    for metric in _METRIC_ORDER:
        for stage in report.stages:
            means = report.speaker_means.get((stage, metric), {})
            if not means:
                continue
            r = report.correlations.get((stage, metric))
            r_gt = report.gt_correlations.get(metric)
            body.append(["%s %s" % (_METRIC_LABELS[metric], stage)]
                        + [_fmt(means.get(s), metric) for s in speakers]
                        + [_fmt(r, "r"), _fmt(None if r is None else abs(r), "r"),
                           _fmt(r_gt, "r")])
    if report.ster:
        body.append(["STER"] + [_fmt(report.ster.get(s), "per") for s in speakers]
                    + ["1.000", "1.000", "-"])
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    lines = []
    for row in [header] + body:
        lines.append("  ".join(cell.rjust(w) if i else cell.ljust(w)
                               for i, (cell, w) in enumerate(zip(row, widths))))
    return "\n".join(lines)


def write_report_text(report: EvalReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_report_table(report) + "\n", encoding="utf-8")
    return path


def render_figures(report: EvalReport, out_dir) -> list:
    """Write one bar chart per metric and a severity scatter; returns paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    speakers = list(report.speakers)
    stage_list = list(report.stages)
    if any((("GT", m) in report.speaker_means and report.speaker_means[("GT", m)])
           for m in _METRIC_ORDER):
        stage_list = stage_list + ["GT"]

    for metric in _METRIC_ORDER:
        data = {stage: [report.speaker_means.get((stage, metric), {}).get(s)
                        for s in speakers]
                for stage in stage_list}
        if not any(v is not None for vals in data.values() for v in vals):
            continue
        fig, ax = plt.subplots(figsize=(6.4, 3.6))
        x = np.arange(len(speakers))
        width = 0.8 / max(1, len(stage_list))
        for i, stage in enumerate(stage_list):
            vals = [np.nan if v is None else v for v in data[stage]]
            ax.bar(x + (i - (len(stage_list) - 1) / 2) * width, vals, width,
                   label=stage)
        ax.set_xticks(x)
        ax.set_xticklabels(speakers)
        ax.set_ylabel(_METRIC_LABELS[metric])
        ax.set_xlabel("target speaker")
        ax.legend()
        fig.tight_layout()
        path = out_dir / ("%s_by_speaker.png" % metric)
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)

    if report.ster:
        fig, ax = plt.subplots(figsize=(6.4, 3.6))
        drew = False
        for metric in _METRIC_ORDER:
            for stage in stage_list:
                means = report.speaker_means.get((stage, metric), {})
                pts = [(report.ster[s], means[s]) for s in speakers
                       if s in means and s in report.ster]
                if len(pts) < 2 or metric == "per":
                    continue
                xs, ys = zip(*pts)
                r = (report.gt_correlations.get(metric) if stage == "GT"
                     else report.correlations.get((stage, metric)))
                label = "%s %s" % (_METRIC_LABELS[metric], stage)
                if r is not None:
                    label += " (r=%.2f)" % r
                ax.plot(xs, ys, "o-", label=label)
                drew = True
        if drew:
            ax.set_xlabel("STER (%)")
            ax.set_ylabel("score")
            ax.legend(fontsize=7)
            fig.tight_layout()
            path = out_dir / "severity_scatter.png"
            fig.savefig(path, dpi=120)
            paths.append(path)
        plt.close(fig)
    return paths
