"""
Run reports: plain text for reading, ``key=value`` lines for scripts.

Floats in the key-value file use ``repr`` so they round-trip exactly and an
external script can recompute the summary from the per-trial entries.
Wall-clock timings go to a separate file so that reports of two identical
runs are byte-identical.
"""

import csv
import os

import numpy as np

from .config import config_digest
from .hsidata import default_palette, render_map
from .pipeline import TRACE_COLUMNS

METRICS = ("oa", "aa", "kc")


def report_items(report, cfg):
    """Ordered ``(key, value)`` pairs of the machine-readable report."""
    mean, std = report.summary()
    items = [("variant", report.variant), ("config_digest", config_digest(cfg)),
             ("seed", cfg.run.seed), ("trials", len(report.trials)),
             ("classes", len(report.class_names))]
    for t in report.trials:
        for m, v in zip(METRICS, (t.oa, t.aa, t.kc)):
            items.append((f"trial.{t.trial}.{m}", repr(float(v))))
    for i, m in enumerate(METRICS):
        items.append((f"mean.{m}", repr(float(mean[i]))))
        items.append((f"std.{m}", repr(float(std[i]))))
    for j, (name, acc) in enumerate(zip(report.class_names, report.per_class_mean())):
        items.append((f"class.{j + 1}.name", name))
        items.append((f"class.{j + 1}.accuracy", repr(float(acc))))
    if report.source_losses:
        tail = report.source_losses[-50:]
        items.append(("source.final_loss_avg50", repr(float(np.mean(tail)))))
    for key in sorted(report.paths):
        items.append((f"path.{key}", report.paths[key]))
    return items


def format_kv(items):
    return "".join(f"{k}={v}\n" for k, v in items)


def read_kv(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line:
                key, value = line.split("=", 1)
                out[key] = value
    return out


def per_trial_table(kv):
    """Rebuild the (trials, 3) metric table from a parsed key-value report."""
    n = int(kv["trials"])
    keys = sorted({int(k.split(".")[1]) for k in kv if k.startswith("trial.")})
    if len(keys) != n:
        raise ValueError(f"report lists {len(keys)} trials, header says {n}")
    return np.array([[float(kv[f"trial.{t}.{m}"]) for m in METRICS] for t in keys])


def format_text(report, cfg):
    mean, std = report.summary()
    lines = [f"variant: {report.variant}",
             f"config digest: {config_digest(cfg)}  seed: {cfg.run.seed}  "
             f"trials: {len(report.trials)}  shots: {cfg.run.k_shot}",
             "",
             f"{'trial':>5}  {'OA (%)':>8}  {'AA (%)':>8}  {'KC (%)':>8}"]
    for t in report.trials:
        lines.append(f"{t.trial:>5}  {100 * t.oa:8.2f}  {100 * t.aa:8.2f}  {100 * t.kc:8.2f}")
    lines.append(f"{'mean':>5}  " + "  ".join(f"{100 * m:8.2f}" for m in mean))
    lines.append(f"{'std':>5}  " + "  ".join(f"{100 * s:8.2f}" for s in std))
    lines += ["", "per-class accuracy (mean over trials):"]
    for name, acc in zip(report.class_names, report.per_class_mean()):
        lines.append(f"  {name:<16} {100 * acc:6.2f}")
    if report.paths:
        lines += ["", "files:"] + [f"  {k}: {v}" for k, v in sorted(report.paths.items())]
    return "\n".join(lines) + "\n"


def write_trace(report, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("trial",) + TRACE_COLUMNS)
        for t in report.trials:
            for row in t.trace:
                w.writerow((t.trial,) + tuple(repr(float(v)) if isinstance(v, float) else v
                                              for v in row))


def read_trace(path):
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: float(v) for k, v in r.items()} for r in rows]


def write_audit(report, path):
    items = []
    for t in report.trials:
        for a in t.audit:
            pre = f"trial.{t.trial}.epoch.{a['epoch']}"
            items += [(f"{pre}.selected", a["selected"]),
                      (f"{pre}.per_class", ",".join(map(str, a["per_class"]))),
                      (f"{pre}.support_only", ",".join(map(str, a["support_only"]))),
                      (f"{pre}.mean_confidence", repr(a["mean_confidence"]))]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_kv(items))


def write_timings(report, path):
    items = [(f"{k}_seconds", f"{v:.3f}") for k, v in sorted(report.timings.items())]
    for t in report.trials:
        items += [(f"trial.{t.trial}.{k}_seconds", f"{v:.3f}") for k, v in t.timings.items()]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_kv(items))


def write_report(report, cfg, outdir, figures=True):
    """Write every report artefact of one variant under ``outdir``; returns paths."""
    os.makedirs(outdir, exist_ok=True)
    stem = report.variant
    paths = {"trace": f"{stem}.trace.csv", "audit": f"{stem}.audit.kv",
             "map": f"{stem}.map.ppm"}
    if figures:
        paths.update(schedule_figure=f"{stem}.schedule.png",
                     per_class_figure=f"{stem}.per_class.png")
    report.paths.update(paths)
    full = {k: os.path.join(outdir, v) for k, v in report.paths.items()}
    write_trace(report, full["trace"])
    write_audit(report, full["audit"])
    render_map(report.trials[0].prediction_map, default_palette(len(report.class_names)),
               full["map"])
    if figures:
        from .plotting import plot_per_class, plot_schedule_trace
        plot_schedule_trace(report, full["schedule_figure"])
        plot_per_class(report, full["per_class_figure"])
    full["text"] = os.path.join(outdir, f"{stem}.report.txt")
    full["kv"] = os.path.join(outdir, f"{stem}.report.kv")
    full["timings"] = os.path.join(outdir, f"{stem}.timings.kv")
    with open(full["text"], "w", encoding="utf-8") as fh:
        fh.write(format_text(report, cfg))
    with open(full["kv"], "w", encoding="utf-8") as fh:
        fh.write(format_kv(report_items(report, cfg)))
    write_timings(report, full["timings"])
    return full


def ablation_lines(reports):
    """One line per variant with mean OA and its difference to ``full``."""
    base = reports["full"].summary()[0][0] if "full" in reports else None
    lines = []
    for name, rep in reports.items():
        mean, std = rep.summary()
        delta = "" if base is None or name == "full" else \
            f"  (full - {name} = {100 * (base - mean[0]):+.2f})"
        lines.append(f"{name:<16} OA {100 * mean[0]:6.2f} +- {100 * std[0]:5.2f}{delta}")
    return lines
