"""Figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .cost import CostReport, cost_report  # noqa: E402

FIG_WIDTH = 6.0
GOLDEN = 0.618


def _new(width: float = FIG_WIDTH, height: float | None = None):
    fig, ax = plt.subplots(figsize=(width, height or width * GOLDEN))
    ax.grid(True, alpha=0.3)
    return fig, ax


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_loss_trace(trace, path: str | Path) -> Path:
    """Per-iteration L1 loss with the learning rate on a twin axis."""
    fig, ax = _new()
    its = [r.iteration for r in trace]
    ax.plot(its, [r.loss for r in trace], lw=0.8, color="tab:blue")
    ax.set_xlabel("iteration")
    ax.set_ylabel("L1 loss")
    ax2 = ax.twinx()
    ax2.step(its, [r.lr for r in trace], where="post", color="tab:red", lw=0.8)
    ax2.set_ylabel("learning rate", color="tab:red")
    return _save(fig, path)


def plot_metrics(report, path: str | Path) -> Path:
    fig, ax = _new()
    names = [r.file for r in report.rows]
    ax.bar(range(len(names)), [min(r.psnr_db, 100.0) for r in report.rows], color="tab:green")
    ax.axhline(report.mean_psnr, color="k", ls="--", lw=0.8, label=f"mean {report.mean_psnr:.2f} dB")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("PSNR on Y (dB)")
    ax.set_title(f"{report.model_id}  {report.spec.kind.value} x{report.spec.scale}")
    ax.legend(fontsize=8)
    return _save(fig, path)


def cost_sweep(H: int, W: int, C: int, sizes: Sequence[int]) -> list[CostReport]:
    return [cost_report(H, W, C, p) for p in sizes]


def plot_cost_sweep(reports: Sequence[CostReport], path: str | Path) -> Path:
    """MAC ratio and SRNL memory peak against the block size."""
    fig, ax = _new()
    ps = [r.P for r in reports]
    ax.semilogy(ps, [r.ratio for r in reports], "o-", color="tab:blue")
    ax.set_xlabel("block size P")
    ax.set_ylabel("non-local / SRNL MACs", color="tab:blue")
    ax2 = ax.twinx()
    ax2.semilogy(ps, [r.mem_srnl_gib for r in reports], "s--", color="tab:orange")
    ax2.set_ylabel("SRNL memory peak (GiB)", color="tab:orange")
    r0 = reports[0]
    ax.set_title(f"{r0.W}x{r0.H}, C={r0.C}")
    return _save(fig, path)
