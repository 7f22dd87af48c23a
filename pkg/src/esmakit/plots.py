"""Static plot emission from reports.

Renders the standard diagnostic figures (binned density/consistency curves,
the risk-vs-length scatter, PSNR bars) as PNG files named by report hash
and kind. Output is deterministic: fixed metadata, no timestamps, so the
same report and renderer version produce byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

PLOT_KINDS = ("density-curves", "risk-scatter", "psnr-bars")

_SAVE_KWARGS = {"dpi": 100, "metadata": {"Software": "esmakit"}}


class UnknownPlotKindError(ValueError):
    def __init__(self, kind: str):
        super().__init__(f"unknown plot kind {kind!r}; available: {', '.join(PLOT_KINDS)}")


def emit_plots(report, kinds: list[str], out_dir: str | Path) -> list[Path]:
    """Render the requested plot kinds for a report; returns written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for kind in kinds:
        if kind not in PLOT_KINDS:
            raise UnknownPlotKindError(kind)
        name = f"{report.config_hash[:12]}_{kind}"
        if kind == "density-curves":
            written.extend(_density_curves(report, out_dir, name))
        elif kind == "risk-scatter":
            written.append(_risk_scatter(report, out_dir, name))
        elif kind == "psnr-bars":
            written.append(_psnr_bars(report, out_dir, name))
    return written


def plot_consistency_curves(consistency_report, out_dir: str | Path, stem: str) -> list[Path]:
    """Four curve files from a toy-lab consistency report."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    panels = [
        ("difference_vs_density", consistency_report.difference_vs_density, "density bin", "output difference"),
        ("risk_vs_lossgrad", consistency_report.risk_vs_lossgrad, "loss+gradnorm bin", "local risk"),
        ("risk_vs_density", consistency_report.risk_vs_density, "density bin", "local risk"),
        ("density_vs_lossgrad", consistency_report.density_vs_lossgrad, "loss+gradnorm bin", "density"),
    ]
    paths = []
    for name, stat, xlabel, ylabel in panels:
        fig, ax = plt.subplots(figsize=(4, 3))
        centers = 0.5 * (stat.bin_edges[:-1] + stat.bin_edges[1:])
        mask = stat.populated
        ax.plot(centers[mask], stat.means[mask], marker="o")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_title(f"{name} (spearman {consistency_report.spearman.get(name, float('nan')):.2f})")
        fig.tight_layout()
        path = out_dir / f"{stem}_{name}.png"
        fig.savefig(path, **_SAVE_KWARGS)
        plt.close(fig)
        paths.append(path)
    return paths


def _density_curves(report, out_dir: Path, name: str) -> list[Path]:
    """Clean-vs-adversarial binned density counts from a density-shift report."""
    paths = []
    shifts = [json.loads(n) for n in report.notes if n.startswith("{")]
    if not shifts:
        raise ValueError("report carries no density-shift data")
    for i, shift in enumerate(shifts):
        fig, ax = plt.subplots(figsize=(5, 3))
        edges = shift["bin_edges"]
        centers = [(edges[b] + edges[b + 1]) / 2 for b in range(len(edges) - 1)]
        width = 0.4 * (edges[1] - edges[0])
        ax.bar([c - width / 2 for c in centers], shift["clean_counts"], width=width, label="clean")
        ax.bar(
            [c + width / 2 for c in centers],
            shift["adversarial_counts"],
            width=width,
            label="attacked",
        )
        ax.set_xlabel("normalized target-class density")
        ax.set_ylabel("count")
        ax.legend()
        fig.tight_layout()
        path = out_dir / f"{name}_{i}.png"
        fig.savefig(path, **_SAVE_KWARGS)
        plt.close(fig)
        paths.append(path)
    return paths


def _risk_scatter(report, out_dir: Path, name: str) -> Path:
    """Erasure/tampering rates against message length."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for metric, marker in (("erasure_detection", "o"), ("tamper_detection", "s")):
        cells = [c for c in report.cells if c["metric"] == metric]
        by_attack: dict[str, dict[int, list[float]]] = {}
        for c in cells:
            by_attack.setdefault(c.get("attack", "?"), {}).setdefault(c["L"], []).append(c["value"])
        for attack, series in sorted(by_attack.items()):
            lengths = sorted(series)
            means = [sum(series[L]) / len(series[L]) for L in lengths]
            ax.plot(lengths, means, marker=marker, label=f"{metric.split('_')[0]} / {attack}")
    ax.set_xlabel("message length")
    ax.set_ylabel("rate")
    ax.set_ylim(-0.05, 1.05)
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = out_dir / f"{name}.png"
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)
    return path


def _psnr_bars(report, out_dir: Path, name: str) -> Path:
    """Watermark / attack / noise PSNR per message length."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    metrics = ("watermark_psnr", "attack_psnr", "gaussian_psnr")
    lengths = sorted({c["L"] for c in report.cells if c["metric"] in metrics})
    bar_w = 0.25
    for i, metric in enumerate(metrics):
        values = []
        for L in lengths:
            cells = [c["value"] for c in report.cells if c["metric"] == metric and c["L"] == L]
            values.append(sum(cells) / len(cells) if cells else 0.0)
        ax.bar([x + (i - 1) * bar_w for x in range(len(lengths))], values, width=bar_w, label=metric)
    ax.set_xticks(range(len(lengths)))
    ax.set_xticklabels([str(L) for L in lengths])
    ax.set_xlabel("message length")
    ax.set_ylabel("PSNR (dB)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = out_dir / f"{name}.png"
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)
    return path
