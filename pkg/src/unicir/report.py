"""Report rendering: delimited metric/loss/retrieval files plus figures.

Every reporting path writes machine-readable delimited output first
(TSV/JSON/JSONL) and then, unless figures are disabled, a matplotlib PNG next
to it. Figures use the Agg backend so runs stay headless. The delimited files
use repr-precision floats and sorted keys, so identical runs produce
byte-identical files; the figures are presentation only.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .evaluation import MetricsReport


def _pyplot():
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    return plt


def write_metrics_report(
    report: MetricsReport, out_dir: str | Path, stem: str = "metrics", figures: bool = True
) -> list[Path]:
    """Write <stem>.json, <stem>.tsv and optionally <stem>_recall_bars.png."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    json_path = out / f"{stem}.json"
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append(json_path)

    tsv_path = out / f"{stem}.tsv"
    with open(tsv_path, "w", encoding="utf-8") as fh:
        fh.write("section\tmetric\tpercent\tvalue\n")
        for name in sorted(report.values):
            v = report.values[name]
            fh.write(f"overall\t{name}\t{v:.2f}\t{v!r}\n")
        for cat in sorted(report.per_category):
            for name in sorted(report.per_category[cat]):
                v = report.per_category[cat][name]
                fh.write(f"category:{cat}\t{name}\t{v:.2f}\t{v!r}\n")
        for name in sorted(report.aggregates):
            v = report.aggregates[name]
            fh.write(f"aggregate\t{name}\t{v:.2f}\t{v!r}\n")
    written.append(tsv_path)

    if figures and report.values:
        plt = _pyplot()
        names = sorted(report.values)
        values = [report.values[n] for n in names]
        fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(names)), 3.2))
        ax.bar(range(len(names)), values, color="#3465a4")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=30, ha="right")
        ax.set_ylim(0, 100)
        ax.set_ylabel("percent")
        ax.set_title(f"{report.protocol} / {report.mode}")
        for i, v in enumerate(values):
            ax.text(i, v + 1, f"{v:.1f}", ha="center", fontsize=8)
        fig.tight_layout()
        fig_path = out / f"{stem}_recall_bars.png"
        fig.savefig(fig_path, dpi=110)
        plt.close(fig)
        written.append(fig_path)
    return written


def write_seed_summary(
    reports: dict[int, MetricsReport], out_dir: str | Path, figures: bool = True
) -> list[Path]:
    """Aggregate per-seed reports into mean/std delimited files and a figure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    seeds = sorted(reports)
    metric_names = sorted({name for r in reports.values() for name in r.values})
    agg_names = sorted({name for r in reports.values() for name in r.aggregates})

    tsv_path = out / "metrics_by_seed.tsv"
    with open(tsv_path, "w", encoding="utf-8") as fh:
        fh.write("metric\t" + "\t".join(f"seed{s}" for s in seeds) + "\tmean\tstd\n")
        for name in metric_names + [f"Avg:{a}" for a in agg_names]:
            if name.startswith("Avg:"):
                vals = [reports[s].aggregates.get(name[4:], float("nan")) for s in seeds]
            else:
                vals = [reports[s].values.get(name, float("nan")) for s in seeds]
            mean = float(np.mean(vals))
            std = float(np.std(vals))
            fh.write(name + "\t" + "\t".join(repr(v) for v in vals) + f"\t{mean!r}\t{std!r}\n")
    written.append(tsv_path)

    if figures and metric_names:
        plt = _pyplot()
        fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(metric_names)), 3.2))
        means = [float(np.mean([reports[s].values[n] for s in seeds])) for n in metric_names]
        stds = [float(np.std([reports[s].values[n] for s in seeds])) for n in metric_names]
        ax.bar(range(len(metric_names)), means, yerr=stds, capsize=3, color="#73d216")
        ax.set_xticks(range(len(metric_names)))
        ax.set_xticklabels(metric_names, rotation=30, ha="right")
        ax.set_ylim(0, 100)
        ax.set_ylabel("percent (mean over seeds)")
        fig.tight_layout()
        fig_path = out / "metrics_by_seed.png"
        fig.savefig(fig_path, dpi=110)
        plt.close(fig)
        written.append(fig_path)
    return written


def write_loss_log(
    history: list[float],
    out_dir: str | Path,
    wall_times: list[float] | None = None,
    stem: str = "loss_log",
    figures: bool = True,
) -> list[Path]:
    """Write <stem>.tsv (deterministic), train_log.jsonl (with timings) and a curve.

    The TSV carries only (epoch, mean_loss) with repr floats, so two identical
    runs emit byte-identical files; wall-clock timings live in the JSONL.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    tsv_path = out / f"{stem}.tsv"
    with open(tsv_path, "w", encoding="utf-8") as fh:
        fh.write("epoch\tmean_loss\n")
        for epoch, loss in enumerate(history):
            fh.write(f"{epoch}\t{loss!r}\n")
    written.append(tsv_path)

    jsonl_path = out / f"{stem.replace('loss_log', 'train_log') or 'train_log'}.jsonl"
    with open(jsonl_path, "w", encoding="utf-8") as fh:
        for epoch, loss in enumerate(history):
            row = {"epoch": epoch, "mean_loss": loss}
            if wall_times is not None and epoch < len(wall_times):
                row["wall_time_s"] = wall_times[epoch]
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    written.append(jsonl_path)

    if figures and history:
        plt = _pyplot()
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot(range(len(history)), history, color="#cc0000")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean loss")
        ax.set_yscale("log" if min(history) > 0 else "linear")
        ax.set_title("training loss")
        fig.tight_layout()
        fig_path = out / f"{stem}.png"
        fig.savefig(fig_path, dpi=110)
        plt.close(fig)
        written.append(fig_path)
    return written


def write_retrieval_report(
    out_dir: str | Path,
    modification_text: str,
    lam: float,
    results: list[tuple[str, float]],
    reference_image: np.ndarray | None = None,
    result_images: list[np.ndarray] | None = None,
    figures: bool = True,
) -> list[Path]:
    """Write retrieval.tsv and a case-study montage figure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    tsv_path = out / "retrieval.tsv"
    with open(tsv_path, "w", encoding="utf-8") as fh:
        fh.write(f"# modification_text\t{modification_text}\n")
        fh.write(f"# lambda\t{lam!r}\n")
        fh.write("rank\timage_id\tcosine\n")
        for i, (cid, score) in enumerate(results, start=1):
            fh.write(f"{i}\t{cid}\t{score!r}\n")
    written.append(tsv_path)

    if figures and reference_image is not None and result_images:
        plt = _pyplot()
        n = len(result_images)
        fig, axes = plt.subplots(1, n + 1, figsize=(2.2 * (n + 1), 2.8))
        axes = np.atleast_1d(axes)
        axes[0].imshow(reference_image)
        axes[0].set_title("reference", fontsize=9)
        for ax, img, (cid, score) in zip(axes[1:], result_images, results):
            ax.imshow(img)
            ax.set_title(f"{cid}\n{score:.3f}", fontsize=8)
        for ax in axes:
            ax.axis("off")
        fig.suptitle(f"{modification_text!r}  (lambda={lam:.3f})", fontsize=9)
        fig.tight_layout()
        fig_path = out / "retrieval.png"
        fig.savefig(fig_path, dpi=110)
        plt.close(fig)
        written.append(fig_path)
    return written
