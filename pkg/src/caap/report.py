"""Run artifacts: metrics/prediction/policy CSVs, key=value summaries, SVG charts."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .metrics import Predictions, bias_confusion, swise_metrics
from .transforms import TransformId


def fmt(v) -> str:
    """Fixed text form for floats so repeated runs give byte-identical files."""
    if v is None:
        return ""
    v = float(v)
    return "nan" if np.isnan(v) else f"{v:.6f}"


METRIC_FIELDS = [
    "method", "fold", "class", "n", "accuracy", "macro_recall", "recall",
    "swise_improve", "swise_bias", "swise_gain", "stp", "sfp", "sfn", "stn",
    "search_recall", "w_noaug",
]


def metrics_rows(reports) -> list[dict]:
    """One row per (method, fold, class) plus a ``macro`` row per (method, fold)."""
    rows = []
    for rep in reports:
        k = rep.num_classes
        recall = rep.class_recall
        sw = rep.swise
        bc = bias_confusion(rep.noaug, rep.predictions, k) if rep.noaug is not None else None
        n = np.bincount(rep.predictions.y_true, minlength=k)
        common = {"method": rep.method, "fold": rep.fold, "accuracy": fmt(rep.accuracy), "macro_recall": fmt(rep.macro_recall)}
        for c in range(k):
            rows.append({
                **common, "class": str(c), "n": int(n[c]), "recall": fmt(recall[c]),
                "swise_improve": fmt(sw.improve[c]) if sw else "",
                "swise_bias": fmt(sw.bias[c]) if sw else "",
                "swise_gain": fmt(sw.gain[c]) if sw else "",
                "stp": int(bc.stp[c]) if bc else "", "sfp": int(bc.sfp[c]) if bc else "",
                "sfn": int(bc.sfn[c]) if bc else "", "stn": int(bc.stn[c]) if bc else "",
                "search_recall": fmt(rep.search_recall[c]) if rep.search_recall is not None else "",
                "w_noaug": fmt(rep.w_noaug[c]) if rep.w_noaug is not None else "",
            })
        rows.append({
            **common, "class": "macro", "n": int(n.sum()), "recall": fmt(rep.macro_recall),
            "swise_improve": fmt(sw.macro_improve) if sw else "",
            "swise_bias": fmt(sw.macro_bias) if sw else "",
            "swise_gain": fmt(sw.macro_gain) if sw else "",
            "stp": "", "sfp": "", "sfn": "", "stn": "", "search_recall": "", "w_noaug": "",
        })
    return rows


def write_rows(path: str | Path, fields: Sequence[str], rows: Sequence[dict]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def write_metrics_csv(path: str | Path, reports) -> None:
    write_rows(path, METRIC_FIELDS, metrics_rows(reports))


def summary_lines(reports) -> list[str]:
    """Fixed ``key=value`` lines: per-method means over folds, then per-fold extras."""
    lines = []
    methods = list(dict.fromkeys(r.method for r in reports))
    for m in methods:
        reps = [r for r in reports if r.method == m]
        lines.append(f"{m}.folds={len(reps)}")
        lines.append(f"{m}.accuracy={fmt(np.mean([r.accuracy for r in reps]))}")
        lines.append(f"{m}.macro_recall={fmt(np.mean([r.macro_recall for r in reps]))}")
        sws = [r.swise for r in reps if r.swise is not None]
        if sws:
            for key in ("macro_improve", "macro_bias", "macro_gain"):
                lines.append(f"{m}.swise_{key}={fmt(np.mean([getattr(s, key) for s in sws]))}")
        for r in reps:
            if r.policy_losses:
                lines.append(f"{m}.fold{r.fold}.policy_loss=" + ",".join(fmt(v) for v in r.policy_losses))
            if r.w_noaug is not None:
                lines.append(f"{m}.fold{r.fold}.w_noaug=" + ",".join(fmt(v) for v in r.w_noaug))
            if r.policy_digest:
                lines.append(f"{m}.fold{r.fold}.policy_digest={r.policy_digest}")
    return lines


def write_summary(path: str | Path, reports, extra: dict | None = None) -> None:
    lines = summary_lines(reports) + [f"{k}={v}" for k, v in (extra or {}).items()]
    Path(path).write_text("\n".join(lines) + "\n")


def write_predictions_csv(path: str | Path, preds: Predictions) -> None:
    p = preds.sorted()
    write_rows(path, ["id", "y_true", "y_pred"],
               [{"id": int(i), "y_true": int(t), "y_pred": int(q)} for i, t, q in zip(p.ids, p.y_true, p.y_pred)])


def read_predictions_csv(path: str | Path) -> Predictions:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return Predictions([int(r["id"]) for r in rows], [int(r["y_true"]) for r in rows], [int(r["y_pred"]) for r in rows])


def write_policy_csv(path: str | Path, table, transforms: Sequence[TransformId]) -> None:
    names = [TransformId(t).value for t in transforms]
    fields = ["id", "class"] + [f"p_{n}" for n in names] + [f"m_{n}" for n in names]
    rows = []
    for i in range(len(table.ids)):
        row = {"id": int(table.ids[i]), "class": int(table.labels[i])}
        row.update({f"p_{n}": fmt(v) for n, v in zip(names, table.p[i])})
        row.update({f"m_{n}": fmt(v) for n, v in zip(names, table.m[i])})
        rows.append(row)
    write_rows(path, fields, rows)


def write_saliency_csv(path: str | Path, ids, labels, slc: np.ndarray, regions) -> None:
    """One row per sample: id, label, selected region and the saliency vector."""
    length = slc.shape[1]
    fields = ["id", "label", "region_start", "region_len", "region_score"] + [f"s{t}" for t in range(length)]
    rows = []
    for i, r in enumerate(regions):
        row = {"id": int(ids[i]), "label": int(labels[i]), "region_start": r.start,
               "region_len": r.len, "region_score": fmt(r.score)}
        row.update({f"s{t}": fmt(v) for t, v in enumerate(slc[i])})
        rows.append(row)
    write_rows(path, fields, rows)


SWEEP_FIELDS = ["q", "accuracy", "macro_recall", "swise_improve", "swise_bias", "swise_gain"]


def sweep_rows(points) -> list[dict]:
    rows = []
    for pt in points:
        rep, sw = pt.report, pt.report.swise
        row = {"q": f"{pt.q:g}", "accuracy": fmt(rep.accuracy), "macro_recall": fmt(rep.macro_recall),
               "swise_improve": fmt(sw.macro_improve), "swise_bias": fmt(sw.macro_bias), "swise_gain": fmt(sw.macro_gain)}
        row.update({f"recall_c{c}": fmt(v) for c, v in enumerate(rep.class_recall)})
        rows.append(row)
    return rows


def write_sweep_csv(path: str | Path, points) -> None:
    rows = sweep_rows(points)
    k = points[0].report.num_classes if points else 0
    write_rows(path, SWEEP_FIELDS + [f"recall_c{c}" for c in range(k)], rows)


# ---------------------------------------------------------------------------
# SVG charts (line + grouped bar only)
# ---------------------------------------------------------------------------

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]


def _panel(x0, y0, w, h, labels, bars, lines, title, ylabel) -> list[str]:
    values = [v for s in list(bars.values()) + list(lines.values()) for v in s if np.isfinite(v)]
    lo = min(0.0, min(values, default=0.0))
    hi = max(values, default=1.0)
    if hi <= lo:
        hi = lo + 1.0
    pad = 0.05 * (hi - lo)
    lo, hi = lo - (pad if lo < 0 else 0), hi + pad

    def ypix(v):
        return y0 + h - (v - lo) / (hi - lo) * h

    n = len(labels)
    slot = w / max(n, 1)
    out = [f'<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="#444"/>',
           f'<text x="{x0 + w / 2:.1f}" y="{y0 - 8}" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<text x="{x0 - 45}" y="{y0 + h / 2:.1f}" font-size="11" transform="rotate(-90 {x0 - 45} {y0 + h / 2:.1f})" text-anchor="middle">{escape(ylabel)}</text>']
    for t in np.linspace(lo, hi, 5):
        out.append(f'<line x1="{x0 - 4}" y1="{ypix(t):.1f}" x2="{x0}" y2="{ypix(t):.1f}" stroke="#444"/>')
        out.append(f'<text x="{x0 - 6}" y="{ypix(t) + 4:.1f}" font-size="10" text-anchor="end">{t:.3g}</text>')
    if lo < 0 < hi:
        out.append(f'<line x1="{x0}" y1="{ypix(0):.1f}" x2="{x0 + w}" y2="{ypix(0):.1f}" stroke="#999" stroke-dasharray="3,3"/>')
    for i, lab in enumerate(labels):
        out.append(f'<text x="{x0 + (i + 0.5) * slot:.1f}" y="{y0 + h + 14}" font-size="10" text-anchor="middle">{escape(str(lab))}</text>')
    nb = max(len(bars), 1)
    bw = 0.8 * slot / nb
    series = 0
    legend = []
    for name, vals in bars.items():
        color = PALETTE[series % len(PALETTE)]
        for i, v in enumerate(vals):
            if not np.isfinite(v):
                continue
            bx = x0 + i * slot + 0.1 * slot + (series * bw)
            top, base = ypix(max(v, 0.0)), ypix(min(v, 0.0))
            out.append(f'<rect class="bar" data-series="{escape(name)}" x="{bx:.1f}" y="{top:.1f}" width="{bw:.1f}" height="{max(base - top, 0.0):.1f}" fill="{color}"/>')
        legend.append((name, color, "bar"))
        series += 1
    for name, vals in lines.items():
        color = PALETTE[series % len(PALETTE)]
        pts = [f"{x0 + (i + 0.5) * slot:.1f},{ypix(v):.1f}" for i, v in enumerate(vals) if np.isfinite(v)]
        out.append(f'<polyline class="line" data-series="{escape(name)}" points="{" ".join(pts)}" fill="none" stroke="{color}" stroke-width="2"/>')
        legend.append((name, color, "line"))
        series += 1
    for j, (name, color, _) in enumerate(legend):
        lx = x0 + w + 12
        ly = y0 + 14 + 16 * j
        out.append(f'<rect x="{lx}" y="{ly - 9}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{lx + 14}" y="{ly}" font-size="11">{escape(name)}</text>')
    return out


def chart_svg(path: str | Path, panels: Sequence[dict], xlabel: str = "", width: int = 720) -> None:
    """Stacked panels; each dict has ``labels``, ``bars``, ``lines``, ``title``, ``ylabel``."""
    ph, gap, left, top = 220, 70, 70, 40
    height = top + len(panels) * (ph + gap) + 10
    w = width - left - 150
    body = []
    for k, p in enumerate(panels):
        y0 = top + k * (ph + gap)
        body += _panel(left, y0, w, ph, p["labels"], p.get("bars", {}), p.get("lines", {}), p.get("title", ""), p.get("ylabel", ""))
    if xlabel:
        body.append(f'<text x="{left + w / 2:.1f}" y="{height - 8}" font-size="11" text-anchor="middle">{escape(xlabel)}</text>')
    svg = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
           '<rect width="100%" height="100%" fill="white"/>', *body, "</svg>"]
    Path(path).write_text("\n".join(svg) + "\n")


def sweep_chart(path: str | Path, points, argmax_acc: float, argmax_gain: float) -> None:
    """Accuracy line on top, Swise improve/bias bars with a gain line below."""
    labels = [f"{p.q:g}" for p in points]
    acc = [100 * p.report.accuracy for p in points]
    sw = [p.report.swise for p in points]
    chart_svg(path, [
        {"labels": labels, "lines": {"accuracy": acc}, "ylabel": "accuracy (%)",
         "title": f"accuracy vs NoAug percentage (best q={argmax_acc:g})"},
        {"labels": labels,
         "bars": {"swise_improve": [100 * s.macro_improve for s in sw], "swise_bias": [100 * s.macro_bias for s in sw]},
         "lines": {"swise_gain": [100 * s.macro_gain for s in sw]}, "ylabel": "Swise (%)",
         "title": f"Swise metrics vs NoAug percentage (best gain q={argmax_gain:g})"},
    ], xlabel="NoAug percentage q")


def methods_chart(path: str | Path, reports) -> None:
    """Grouped bars of mean accuracy and macro Swise metrics per method."""
    methods = list(dict.fromkeys(r.method for r in reports))

    def mean(m, f):
        vals = [f(r) for r in reports if r.method == m]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else float("nan")

    chart_svg(path, [
        {"labels": methods, "bars": {"accuracy": [100 * mean(m, lambda r: r.accuracy) for m in methods],
                                     "macro_recall": [100 * mean(m, lambda r: r.macro_recall) for m in methods]},
         "ylabel": "%", "title": "accuracy and macro recall"},
        {"labels": methods, "bars": {
            "swise_improve": [100 * mean(m, lambda r: r.swise.macro_improve if r.swise else None) for m in methods],
            "swise_bias": [100 * mean(m, lambda r: r.swise.macro_bias if r.swise else None) for m in methods],
            "swise_gain": [100 * mean(m, lambda r: r.swise.macro_gain if r.swise else None) for m in methods]},
         "ylabel": "%", "title": "Swise metrics vs NOAUG"},
    ], xlabel="method")


def write_run_dir(out: str | Path, reports, extra: dict | None = None) -> None:
    """metrics.csv, summary.txt, methods.svg and per-run prediction CSVs."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", reports)
    write_summary(out / "summary.txt", reports, extra)
    methods_chart(out / "methods.svg", reports)
    for r in reports:
        write_predictions_csv(out / f"predictions_{r.method}_fold{r.fold}.csv", r.predictions)
