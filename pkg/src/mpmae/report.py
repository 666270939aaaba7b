"""Static reports: comparison grid, label-efficiency curves, s_t curves, reconstructions."""

from __future__ import annotations

import csv
import os
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
from einops import rearrange  # noqa: E402

from .errors import DataError  # noqa: E402
from .evaluation.probe import FT, LP, MetricReport  # noqa: E402
from .masking import PatchGrid, sample_masks, upsample_mask_to_pixels  # noqa: E402
from .pretrain import TrainLog  # noqa: E402

MISSING = "—"
RGB_BANDS = (3, 2, 1)  # red, green, blue in the 12-band optical stack


def comparison_grid(reports: Sequence[MetricReport], fraction: float = 1.0) -> tuple[list[str], list[str], dict]:
    """Mean test value per (checkpoint, task, mode) at one training fraction.

    Segmentation phase-1 reports are excluded; the FT cell holds the final
    two-phase result.
    """
    cells: dict = defaultdict(list)
    for r in reports:
        if r.mode in (FT, LP) and abs(r.fraction - fraction) < 1e-9:
            cells[(r.checkpoint, r.task, r.mode)].append(r.value)
    rows = sorted({k[0] for k in cells})
    cols = sorted({k[1] for k in cells})
    return rows, cols, {k: float(np.mean(v)) for k, v in cells.items()}


def _fmt(cells: dict, key) -> str:
    return f"{100 * cells[key]:.1f}" if key in cells else MISSING


def grid_tables(reports: Sequence[MetricReport]) -> tuple[list[list[str]], str]:
    """Return CSV rows and a markdown table with FT / LP sub-columns per task."""
    rows, cols, cells = comparison_grid(reports)
    header = ["checkpoint"] + [f"{t}/{m}" for t in cols for m in ("FT", "LP")]
    table = [header]
    for ck in rows:
        table.append([ck] + [_fmt(cells, (ck, t, m)) for t in cols for m in (FT, LP)])
    md = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    md += ["| " + " | ".join(r) + " |" for r in table[1:]]
    return table, "\n".join(md) + "\n"


def sweep_data(reports: Sequence[MetricReport], task: str | None = None) -> dict[str, dict[float, list[float]]]:
    """LP values per checkpoint per fraction, restricted to checkpoints swept at >1 fraction."""
    data: dict = defaultdict(lambda: defaultdict(list))
    for r in reports:
        if r.mode == LP and (task is None or r.task == task):
            data[r.checkpoint][r.fraction].append(r.value)
    return {ck: dict(v) for ck, v in data.items() if len(v) > 1}


def plot_label_efficiency(data: dict, path: Path, task: str) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for ck, by_frac in sorted(data.items()):
        fr = sorted(by_frac)
        mean = [np.mean(by_frac[f]) * 100 for f in fr]
        std = [np.std(by_frac[f]) * 100 for f in fr]
        ax.errorbar(fr, mean, yerr=std, marker="o", capsize=3, label=ck)
    ax.set_xscale("log")
    ax.set_xlabel("fraction of training labels")
    ax.set_ylabel(f"{task} LP score (%)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_log_vars(logs: dict[str, TrainLog], path: Path) -> None:
    """One panel per run, one line per task: s_t over epochs."""
    n = len(logs)
    fig, axes = plt.subplots(1, n, figsize=(4.5 * n, 3.5), squeeze=False)
    for ax, (name, lg) in zip(axes[0], sorted(logs.items())):
        series = defaultdict(list)
        for r in lg.rows:
            series[r["task_id"]].append((r["epoch"], r["log_var"]))
        for tid, pts in series.items():
            e, s = zip(*pts)
            ax.plot(e, s, label=tid)
        ax.set_title(name, fontsize=8)
        ax.set_xlabel("epoch")
        ax.set_ylabel("s_t = log var")
        ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# reconstructions


def denormalize_patches(pred: torch.Tensor, target: torch.Tensor, grid: PatchGrid, eps: float = 1e-6) -> torch.Tensor:
    """Map patch-normalized predictions back using each patch's target moments."""
    p = grid.patch_size
    blocks = rearrange(target, "b c (gh p1) (gw p2) -> b c gh gw (p1 p2)", p1=p, p2=p)
    mean = blocks.mean(-1, keepdim=True)
    std = torch.sqrt(blocks.var(-1, unbiased=False, keepdim=True).clamp_min(eps))
    pb = rearrange(pred, "b c (gh p1) (gw p2) -> b c gh gw (p1 p2)", p1=p, p2=p)
    return rearrange(pb * std + mean, "b c gh gw (p1 p2) -> b c (gh p1) (gw p2)", p1=p, p2=p)


def compose_reconstruction(inputs: torch.Tensor, decoded: torch.Tensor, mask: torch.Tensor, grid: PatchGrid) -> torch.Tensor:
    """Masked cells from the decoder, visible cells from the input."""
    pix = upsample_mask_to_pixels(mask, grid).unsqueeze(1)
    return torch.where(pix, decoded, inputs)


@torch.no_grad()
def reconstruction_examples(
    model, dataset, count: int = 4, ratio: float = 0.6, seed: int = 0, patch_normalized: bool = True
) -> dict[str, np.ndarray]:
    """Run the optical decoder on ``count`` samples and build display arrays."""
    from .pretrain import StatsTensors, load_batch

    model.eval()
    enc = model.enc_cfg
    idx = np.arange(min(count, len(dataset)))
    batch = load_batch(dataset, idx, StatsTensors(dataset.stats, dataset.registry), [])
    x = batch["input"][..., : enc.image_size, : enc.image_size]
    grid = PatchGrid(x.shape[-1], enc.patch_size)
    mask = sample_masks(grid, ratio, len(idx), torch.Generator().manual_seed(seed))
    decoded = model(x, mask)["sentinel2"]
    if patch_normalized:
        decoded = denormalize_patches(decoded, x, grid)
    pix = upsample_mask_to_pixels(mask, grid).unsqueeze(1)
    return {
        "input": x.numpy(),
        "masked": torch.where(pix, torch.zeros(()), x).numpy(),
        "reconstruction": compose_reconstruction(x, decoded, mask, grid).numpy(),
        "mask": pix[:, 0].numpy(),
    }


def _rgb(a: np.ndarray) -> np.ndarray:
    img = np.stack([a[b] for b in RGB_BANDS], axis=-1)
    lo, hi = np.percentile(img, [2, 98])
    return np.clip((img - lo) / max(hi - lo, 1e-6), 0, 1)


def plot_reconstructions(ex: dict[str, np.ndarray], path: Path) -> None:
    n = len(ex["input"])
    cols = ("input", "masked", "reconstruction")
    fig, axes = plt.subplots(n, 3, figsize=(6, 2 * n), squeeze=False)
    for i in range(n):
        for j, k in enumerate(cols):
            axes[i, j].imshow(_rgb(ex[k][i]))
            axes[i, j].set_axis_off()
            if i == 0:
                axes[i, j].set_title(k, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------


def build_report(
    reports: Sequence[MetricReport],
    out_dir: str | os.PathLike,
    train_logs: dict[str, TrainLog] | None = None,
    reconstructions: dict[str, np.ndarray] | None = None,
    sweep_task: str = "scene",
) -> dict[str, Path | str]:
    """Write every report artifact; returns name -> path (or a notice string)."""
    if not reports:
        raise DataError("results store is empty; run `mpmae eval` first")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path | str] = {}

    table, md = grid_tables(reports)
    with open(out / "comparison.csv", "w", newline="") as fh:
        csv.writer(fh).writerows(table)
    (out / "comparison.md").write_text(md)
    written["comparison"] = out / "comparison.md"

    data = sweep_data(reports, sweep_task)
    if data:
        plot_label_efficiency(data, out / "label_efficiency.png", sweep_task)
        written["label_efficiency"] = out / "label_efficiency.png"
    else:
        written["label_efficiency"] = "notice: no label-efficiency sweep in the results store; curve panel omitted"

    if train_logs:
        plot_log_vars(train_logs, out / "log_vars.png")
        written["log_vars"] = out / "log_vars.png"
    if reconstructions is not None:
        plot_reconstructions(reconstructions, out / "reconstructions.png")
        written["reconstructions"] = out / "reconstructions.png"
    return written
