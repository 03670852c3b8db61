"""Closed-form compute and memory model for full vs. block-divided non-local attention."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .modules import NonLocal, nonlocal_block, srnl_forward

GIB = 2**30
BYTES_PER_SCALAR = 4
MODELED_TAGS = ("transform", "match", "reconstruct")


def _check_positive(*vals: int) -> None:
    if min(vals) < 1:
        raise ValueError("extents must be positive")


def mac_nonlocal(H: int, W: int, C: int) -> int:
    """Three 1x1 embeddings plus the two attention products, with C1 == C."""
    _check_positive(H, W, C)
    return 3 * W * H * C * C + 2 * H * H * W * W * C


def mac_srnl(H: int, W: int, C: int, P: int) -> int:
    _check_positive(H, W, C, P)
    blocks = math.ceil(W / P) * math.ceil(H / P)
    return 3 * blocks * P * P * C * C + 2 * blocks * P**4 * C


def memory_peak(H: int, W: int, P: int | None = None) -> int:
    """Bytes held by the attention matrices; ``P=None`` means one full-map block."""
    if P is None:
        _check_positive(H, W)
        return (H * W) ** 2 * BYTES_PER_SCALAR
    _check_positive(H, W, P)
    return math.ceil(H / P) * math.ceil(W / P) * P**4 * BYTES_PER_SCALAR


@dataclass
class CostReport:
    H: int
    W: int
    C: int
    P: int
    mac_nl: int
    mac_srnl: int
    ratio: float
    mem_nl_bytes: int
    mem_srnl_bytes: int

    @property
    def mem_nl_gib(self) -> float:
        return self.mem_nl_bytes / GIB

    @property
    def mem_srnl_gib(self) -> float:
        return self.mem_srnl_bytes / GIB

    def table(self) -> str:
        return (
            f"input {self.W}x{self.H}, C={self.C}, P={self.P}\n"
            f"  non-local MACs : {self.mac_nl:,}\n"
            f"  SRNL MACs      : {self.mac_srnl:,}\n"
            f"  ratio          : {self.ratio:.2f}\n"
            f"  non-local peak : {self.mem_nl_gib:.2f} GiB\n"
            f"  SRNL peak      : {self.mem_srnl_gib:.2f} GiB\n"
        )


CSV_FIELDS = ("H", "W", "C", "P", "mac_nl", "mac_srnl", "ratio", "mem_nl_bytes", "mem_srnl_bytes",
              "mem_nl_gib", "mem_srnl_gib")


def cost_report(H: int, W: int, C: int, P: int) -> CostReport:
    nl, sr = mac_nonlocal(H, W, C), mac_srnl(H, W, C, P)
    return CostReport(H, W, C, P, nl, sr, nl / sr, memory_peak(H, W), memory_peak(H, W, P))


def reports_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(CSV_FIELDS)
    for r in reports:
        row = asdict(r)
        w.writerow([row[k] for k in CSV_FIELDS[:-2]] + [f"{r.mem_nl_gib:.6f}", f"{r.mem_srnl_gib:.6f}"])
    return buf.getvalue()


@dataclass
class MacCrosscheck:
    H: int
    W: int
    C: int
    P: int
    counted_nl: dict
    counted_srnl: dict
    formula_nl: int
    formula_srnl: int

    @staticmethod
    def modeled(counts: dict) -> int:
        return sum(counts.get(k, 0) for k in MODELED_TAGS)

    @staticmethod
    def unmodeled(counts: dict) -> dict:
        return {k: v for k, v in counts.items() if k not in MODELED_TAGS}

    @property
    def nl_match(self) -> bool:
        return self.modeled(self.counted_nl) == self.formula_nl

    @property
    def srnl_match(self) -> bool:
        return self.modeled(self.counted_srnl) == self.formula_srnl


def measured_mac_crosscheck(H: int, W: int, C: int, P: int, seed: int = 0) -> MacCrosscheck:
    """Run instrumented kernels with C1 == C and compare against the closed forms.

    Counted MACs exclude bias adds, softmax and the residual; the output
    projection is counted under the unmodeled ``output`` tag.
    """
    rng = np.random.default_rng(seed)
    with T.precision(np.float64), T.no_grad():
        nl = NonLocal(C, C, rng)
        x = T.Tensor(rng.normal(size=(1, C, H, W)))
        with T.count_macs() as full:
            nonlocal_block(x, nl)
        with T.count_macs() as blocked:
            srnl_forward(x, P, nl)
    return MacCrosscheck(H, W, C, P, dict(full), dict(blocked), mac_nonlocal(H, W, C), mac_srnl(H, W, C, P))
