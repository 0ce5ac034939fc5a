"""Rendering of evaluation reports and training curves.

Text output comes in two parallel forms: a human-readable table and a
tab-separated key-value file with stable field names and ordering, so the
same run can be read by eyes and by scripts. Figures are rendered headless
to PNG files next to the text artifacts.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .data import SYNTH_PALETTE
from .losses import ClassReport


def render_report_text(report: ClassReport) -> str:
    lines = []
    width = max([len(n) for n in report.dsc] + [len(n) for n in report.excluded] + [5])
    lines.append(f"{'class':<{width}}  {'dsc':>8}  {'support_px':>10}")
    for name, score in report.dsc.items():
        lines.append(f"{name:<{width}}  {score:8.4f}  {report.support.get(name, 0):>10}")
    for name in report.excluded:
        lines.append(f"{name:<{width}}  {'--':>8}  {report.support.get(name, 0):>10}")
    lines.append("")
    lines.append(f"mean foreground DSC: {report.mean_foreground:.4f}")
    if report.excluded:
        lines.append("excluded (no support in prediction or truth): " + ", ".join(report.excluded))
    lines.append(f"aggregation: {report.aggregation}")
    return "\n".join(lines) + "\n"


def render_report_tsv(report: ClassReport) -> str:
    lines = [f"mean_foreground\t{report.mean_foreground:.6f}", f"aggregation\t{report.aggregation}"]
    for name, score in report.dsc.items():
        lines.append(f"dsc.{name}\t{score:.6f}")
    for name, count in report.support.items():
        lines.append(f"support.{name}\t{count}")
    lines.append("excluded\t" + ",".join(report.excluded))
    return "\n".join(lines) + "\n"


def save_dsc_figure(report: ClassReport, path) -> None:
    """Horizontal bar chart of per-class DSC with the foreground mean marked."""
    names = list(report.dsc)
    scores = [report.dsc[n] for n in names]
    fig, ax = plt.subplots(figsize=(7, max(2.5, 0.4 * len(names) + 1.5)))
    ypos = np.arange(len(names))
    ax.barh(ypos, scores, color="#4878a8")
    ax.axvline(report.mean_foreground, color="#b04030", linestyle="--", linewidth=1.2,
               label=f"mean {report.mean_foreground:.3f}")
    ax.set_yticks(ypos)
    ax.set_yticklabels(names)
    ax.invert_yaxis()
    ax.set_xlim(0, 1)
    ax.set_xlabel("DSC")
    ax.set_title(f"per-class DSC ({report.aggregation}-level)")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_loss_curve(records, path) -> None:
    """Loss and learning rate against iteration, twin axes."""
    iters = [r.iteration for r in records]
    loss = [r.loss for r in records]
    lrs = [r.lr for r in records]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(iters, loss, color="#4878a8", linewidth=1.0, label="loss")
    ax.set_xlabel("iteration")
    ax.set_ylabel("combined loss")
    ax2 = ax.twinx()
    ax2.plot(iters, lrs, color="#b04030", linewidth=1.0, linestyle=":", label="lr")
    ax2.set_ylabel("learning rate")
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def mask_to_color(mask: np.ndarray) -> np.ndarray:
    """Index mask (H, W) -> RGB uint8 using the fixed class palette."""
    k = int(mask.max()) + 1 if mask.size else 1
    palette = SYNTH_PALETTE
    if k > palette.shape[0]:
        extra_rng = np.random.default_rng(7)
        palette = np.concatenate([palette, extra_rng.uniform(0.2, 0.95, (k - palette.shape[0], 3))])
    rgb = palette[mask]
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)


def save_prediction_images(image: np.ndarray, mask: np.ndarray, out_dir) -> tuple[Path, Path]:
    """Write mask.png (raw indices) and overlay.png (class colors blended
    onto the input where the prediction is foreground)."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mask_path = out_dir / "mask.png"
    overlay_path = out_dir / "overlay.png"
    Image.fromarray(mask.astype(np.uint8), mode="L").save(mask_path)

    base = np.clip(image.transpose(1, 2, 0), 0.0, 1.0)
    color = SYNTH_PALETTE[np.clip(mask, 0, SYNTH_PALETTE.shape[0] - 1)]
    fg = (mask > 0)[..., None]
    blended = np.where(fg, 0.45 * base + 0.55 * color, base)
    Image.fromarray(np.clip(np.round(blended * 255.0), 0, 255).astype(np.uint8), mode="RGB").save(
        overlay_path
    )
    return mask_path, overlay_path
