"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, record_kinks

ABS_FLOOR = 1e-8


@dataclass
class GradcheckEntry:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    error: float
    kink: bool = False


@dataclass
class GradcheckReport:
    label: str
    tolerance: float
    entries: list[GradcheckEntry] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max((e.error for e in self.entries if not e.kink), default=0.0)

    @property
    def kinks(self) -> int:
        return sum(e.kink for e in self.entries)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{self.label}: {status} max_rel_err={self.max_error:.3e} "
                f"tol={self.tolerance:.0e} checked={len(self.entries) - self.kinks} kinks_skipped={self.kinks}")


def element_error(analytic: float, numeric: float) -> float:
    """Relative error, or absolute error when the analytic value is tiny."""
    if abs(analytic) < ABS_FLOOR:
        return abs(analytic - numeric)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric))


def gradcheck(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    *,
    names: Sequence[str] | None = None,
    h: float = 1e-5,
    samples: int | None = None,
    rng: np.random.Generator | None = None,
    tolerance: float = 1e-6,
    label: str = "gradcheck",
    order: int = 2,
) -> GradcheckReport:
    """Compare ``backward`` against central differences.

    ``loss_fn`` must rebuild the graph from ``params`` on every call and
    return a scalar. With ``samples`` set, that many scalar positions are drawn
    uniformly over all parameter elements; otherwise every element is checked.
    Positions where the +h and -h evaluations see different PReLU/abs sign
    patterns straddle a kink; they are flagged, excluded from the error and,
    when sampling, replaced by a fresh draw.

    ``order=4`` uses the five-point stencil, whose O(h^4) truncation allows a
    larger ``h`` and hence less roundoff on small gradient entries.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    offsets_h = (1, -1) if order == 2 else (1, -1, 2, -2)
    names = list(names) if names is not None else [getattr(p, "name", "") or f"p{i}" for i, p in enumerate(params)]
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    sizes = np.array([p.size for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(sizes.sum())

    def locate(f: int) -> tuple[int, tuple[int, ...]]:
        k = int(np.searchsorted(offsets, f, side="right") - 1)
        return k, tuple(int(i) for i in np.unravel_index(int(f - offsets[k]), params[k].shape))

    if samples is None:
        queue = list(range(total))
        wanted = total
    else:
        rng = rng or np.random.default_rng(0)
        queue = [int(f) for f in rng.permutation(total)]
        wanted = min(samples, total)

    report = GradcheckReport(label, tolerance)
    good = 0
    for f in queue:
        if good >= wanted:
            break
        k, idx = locate(f)
        p = params[k]
        orig = p.data[idx].copy()
        vals, signs = [], []
        for j in offsets_h:
            p.data[idx] = orig + j * h
            with record_kinks() as log:
                vals.append(float(loss_fn().data))
            signs.append(log)
        p.data[idx] = orig
        kink = any(len(sig) != len(signs[0]) or any(not np.array_equal(a, b) for a, b in zip(sig, signs[0]))
                   for sig in signs[1:])
        if order == 2:
            numeric = (vals[0] - vals[1]) / (2 * h)
        else:
            numeric = (8 * (vals[0] - vals[1]) - (vals[2] - vals[3])) / (12 * h)
        a = float(analytic[k][idx])
        report.entries.append(GradcheckEntry(names[k], idx, a, numeric, element_error(a, numeric), kink))
        good += not kink
    return report


# ---------------------------------------------------------------- standard targets

TOLERANCES = {"tensor": 1e-6, "tfm": 1e-5, "srnl": 1e-5, "ca": 1e-5, "model": 1e-4}
TARGETS = tuple(TOLERANCES)


def _probe(rng: np.random.Generator, out: Tensor) -> np.ndarray:
    return rng.normal(size=out.shape)


def _objective(fn: Callable[[], Tensor], rng: np.random.Generator) -> Callable[[], Tensor]:
    """Random linear functional of ``fn()``; smooth, and sensitive to every output."""
    weights = _probe(rng, fn())
    return lambda: (fn() * weights).sum()


def check_tensor_ops(rng: np.random.Generator, tolerance: float) -> list[GradcheckReport]:
    from . import tensor as T

    def leaf(*shape):
        return T.Tensor(rng.normal(size=shape), requires_grad=True)

    x, k, kt = leaf(1, 2, 4, 4), leaf(3, 2, 3, 3), leaf(2, 3, 2, 2)
    bias = leaf(3)
    slope = T.Tensor(np.full(2, 0.25), requires_grad=True)
    a, b = leaf(4, 4), leaf(4, 4)
    cases = {
        "conv2d": (lambda: T.conv2d(x, k, bias, 1, 1), [x, k, bias]),
        "conv2d_stride2": (lambda: T.conv2d(x, k, None, 2, 1), [x, k]),
        "conv_transpose2d": (lambda: T.conv_transpose2d(x, kt, None, 2, 0), [x, kt]),
        "softmax": (lambda: T.softmax(x, 1), [x]),
        "prelu": (lambda: T.prelu(x, slope), [x, slope]),
        "bilinear_resize": (lambda: T.bilinear_resize(x, 3, 2), [x]),
        "global_avg_pool": (lambda: T.global_avg_pool(x), [x]),
        "matmul": (lambda: T.matmul(a, b), [a, b]),
    }
    return [gradcheck(_objective(fn, rng), ps, tolerance=tolerance, label=f"tensor.{name}")
            for name, (fn, ps) in cases.items()]


def check_tfm(rng: np.random.Generator, tolerance: float) -> list[GradcheckReport]:
    from . import tensor as T
    from .modules import TFM, TfmConfig

    cfg = TfmConfig(N=3, R=2, K=3, s=2)
    tfm = TFM(2, cfg, 1, rng)
    tfm.assign_names()
    x = T.Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
    fn = _objective(lambda: tfm(x, 0), rng)
    return [gradcheck(fn, tfm.parameters() + [x], names=[p.name for p in tfm.parameters()] + ["input"],
                      tolerance=tolerance, label="tfm")]


def check_srnl(rng: np.random.Generator, tolerance: float) -> list[GradcheckReport]:
    from . import tensor as T
    from .modules import SRNL

    srnl = SRNL(3, 2, 3, rng)
    srnl.assign_names()
    x = T.Tensor(rng.normal(size=(1, 3, 5, 5)), requires_grad=True)
    fn = _objective(lambda: srnl(x), rng)
    return [gradcheck(fn, srnl.parameters() + [x], names=[p.name for p in srnl.parameters()] + ["input"],
                      tolerance=tolerance, label="srnl")]


def check_ca(rng: np.random.Generator, tolerance: float) -> list[GradcheckReport]:
    from . import tensor as T
    from .modules import ChannelAttention

    ca = ChannelAttention(4, 2, rng)
    ca.assign_names()
    x = T.Tensor(rng.normal(size=(1, 4, 4, 4)), requires_grad=True)
    fn = _objective(lambda: ca(x), rng)
    return [gradcheck(fn, ca.parameters() + [x], names=[p.name for p in ca.parameters()] + ["input"],
                      tolerance=tolerance, label="ca")]


def check_model(rng: np.random.Generator, tolerance: float, samples: int = 50) -> list[GradcheckReport]:
    from . import tensor as T
    from .net import TfmanConfig, build

    model = build(TfmanConfig(s=2, n=2, C=16), seed=int(rng.integers(2**31)))
    x = T.Tensor(rng.uniform(0, 255, size=(1, 3, 6, 6)))
    # the constant mean offset is left out: adding then removing it costs ~2 digits to cancellation
    fn = _objective(lambda: model.reconstruct(x), rng)
    params = model.parameters()
    return [gradcheck(fn, params, names=[p.name for p in params], samples=samples, rng=rng,
                      tolerance=tolerance, label="model")]


def run_target(target: str, tolerance: float | None = None, seed: int = 0) -> list[GradcheckReport]:
    """Run one named gradient check in double precision."""
    from . import tensor as T

    if target not in TOLERANCES:
        raise ValueError(f"unknown gradcheck target {target!r}; choose from {TARGETS}")
    tol = TOLERANCES[target] if tolerance is None else tolerance
    rng = np.random.default_rng(seed)
    runner = {"tensor": check_tensor_ops, "tfm": check_tfm, "srnl": check_srnl,
              "ca": check_ca, "model": check_model}[target]
    with T.precision(np.float64):
        return runner(rng, tol)
