"""Command-line entry point: ``tfman <command> [options]``.

Exit codes: 0 success, 1 internal failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import parallel
from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .cost import cost_report, measured_mac_crosscheck, reports_csv
from .gradcheck import TARGETS, run_target
from .image import DegradationSpec, SamplingError, degrade, list_images, read_png, write_png, ImageRGB
from .net import VARIANTS, TfmanConfig, build, parameter_breakdown, parameter_count, parse_value
from .tensor import ConfigurationError
from .training import ScheduleSpec, train, write_trace

log = logging.getLogger("tfman")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad flags, config or inputs; maps to exit code 2."""


# ---------------------------------------------------------------- run configuration

_SCHEDULE_KEYS = {"base_lr": float, "iters_per_epoch": int, "batch": int, "patch": int, "epochs": int}


@dataclass
class RunConfig:
    """Everything a training run needs; defaults follow the published recipe."""

    model: TfmanConfig = field(default_factory=TfmanConfig)
    kind: str = "bi"
    base_lr: float = 1e-4
    iters_per_epoch: int = 50
    batch: int = 16
    patch: int = 48
    epochs: int | None = None
    iterations: int | None = None
    seed: int = 0
    threads: int | None = None
    data_dir: str | None = None
    out: str | None = None
    resume: str | None = None

    @property
    def task(self) -> str:
        return "BI" if self.kind.lower() == "bi" else "BD_DN"

    def schedule(self) -> ScheduleSpec:
        kw = {"base_lr": self.base_lr, "iters_per_epoch": self.iters_per_epoch,
              "batch": self.batch, "patch": self.patch}
        if self.epochs is not None:
            kw["epochs"] = self.epochs
        return ScheduleSpec.for_task(self.task, **kw)

    def degradation(self, scale: int | None = None) -> DegradationSpec:
        return DegradationSpec(self.kind, scale or self.model.s)


_RUN_KEYS = {f.name: f.type for f in fields(RunConfig) if f.name != "model"}
_MODEL_KEYS = {f.name: f.type for f in fields(TfmanConfig)}
_OPTIONAL_INT = {"epochs", "iterations", "threads"}


def _coerce(key: str, val: str):
    if key in _OPTIONAL_INT:
        return None if val.lower() in ("", "none") else int(val)
    if key in _SCHEDULE_KEYS:
        return _SCHEDULE_KEYS[key](val)
    if key == "seed":
        return int(val)
    return val


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse ``key=value`` lines; ``#`` starts a comment. Unknown keys name their line."""
    run: dict = {}
    model: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        where = f"{source}:{lineno}"
        if not sep:
            raise UsageError(f"{where}: expected key=value, got {raw.strip()!r}")
        try:
            if key in _MODEL_KEYS:
                model[key] = parse_value(val, _MODEL_KEYS[key])
            elif key in _RUN_KEYS:
                run[key] = _coerce(key, val)
            else:
                raise UsageError(f"{where}: unknown config key {key!r}")
        except (ValueError, ConfigurationError) as exc:
            if isinstance(exc, UsageError):
                raise
            raise UsageError(f"{where}: bad value for {key!r}: {exc}") from None
    try:
        return RunConfig(model=TfmanConfig(**model), **run)
    except ConfigurationError as exc:
        raise UsageError(f"{source}: {exc}") from None


# ---------------------------------------------------------------- commands


def cmd_degrade(args) -> int:
    hr_dir = Path(args.hr_dir)
    if not hr_dir.is_dir():
        raise UsageError(f"HR directory not found: {hr_dir}")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = list_images(hr_dir)
    if not paths:
        raise UsageError(f"no PNG images in {hr_dir}")

    def one(path: Path) -> bool:
        try:
            hr = read_png(path)
        except Exception as exc:
            log.warning("skipping %s: %s", path.name, exc)
            return False
        write_png(degrade(hr, DegradationSpec(args.kind, args.scale, args.seed)), out_dir / path.name)
        return True

    done = parallel.map_ordered(one, paths)
    print(f"wrote {sum(done)} of {len(paths)} images to {out_dir}")
    return EXIT_OK if any(done) else EXIT_FAIL


def _load_images(data_dir: str) -> list[tuple[str, ImageRGB]]:
    d = Path(data_dir)
    if not d.is_dir():
        raise UsageError(f"data directory not found: {d}")
    paths = list_images(d)
    if not paths:
        raise UsageError(f"no PNG images in {d}")
    return [(p.stem, read_png(p)) for p in paths]


def build_run_config(args) -> RunConfig:
    cfg = parse_config(Path(args.config).read_text(), args.config) if args.config else RunConfig()
    overrides = {k: getattr(args, k) for k in ("data_dir", "out", "resume", "seed", "iterations", "kind",
                                                 "base_lr", "batch", "patch", "threads")
                 if getattr(args, k, None) is not None}
    cfg = dataclasses.replace(cfg, **overrides)
    if args.scale is not None:
        cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, s=args.scale))
    return cfg


def cmd_train(args) -> int:
    cfg = build_run_config(args)
    if cfg.threads is not None:
        parallel.set_threads(cfg.threads)
    if not cfg.data_dir:
        raise UsageError("--data-dir is required (flag or config key data_dir)")
    if not cfg.out:
        raise UsageError("--out is required (flag or config key out)")
    images = _load_images(cfg.data_dir)
    if cfg.resume:
        model = load_checkpoint(cfg.resume)
        if args.scale is not None and model.cfg.s != args.scale:
            raise UsageError(f"checkpoint is x{model.cfg.s} but --scale is {args.scale}")
    else:
        model = build(cfg.model, seed=cfg.seed)
    schedule = cfg.schedule()
    out = Path(cfg.out)
    log.info("training %s x%d, %s schedule from lr %g", cfg.kind, model.cfg.s, schedule.task,
             schedule.lr(0))
    result = train(model, images, cfg.degradation(model.cfg.s), schedule, seed=cfg.seed, iterations=cfg.iterations,
                   on_epoch_end=lambda epoch, m: save_checkpoint(m, out))
    save_checkpoint(model, out)
    trace_path = out.with_suffix(".loss.csv")
    write_trace(result.trace, trace_path)
    from .plotting import plot_loss_trace

    plot_loss_trace(result.trace, out.with_suffix(".loss.png"))
    first, last = result.trace[0].loss, result.trace[-1].loss
    print(f"{len(result.trace)} iterations, loss {first:.4f} -> {last:.4f}; checkpoint {out}, trace {trace_path}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model = load_checkpoint(args.ckpt)
    img = read_png(args.input)
    dtype = model.parameters()[0].dtype
    x = T.Tensor(img.data.astype(dtype))
    with T.no_grad():
        if args.dump_features:
            dump = Path(args.dump_features)
            dump.mkdir(parents=True, exist_ok=True)
            for i, f in enumerate(model.features(x[None])):
                np.save(dump / f"feature_{i:02d}.npy", f.data[0])
        out = model(x).data.astype(np.float64)
    if not np.all(np.isfinite(out)):
        log.error("model produced non-finite values")
        return EXIT_FAIL
    write_png(ImageRGB(np.clip(out, 0, 255)), args.output)
    print(f"{img.width}x{img.height} -> {out.shape[2]}x{out.shape[1]} written to {args.output}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import bicubic_upscaler, evaluate, model_upscaler

    if not Path(args.dataset).is_dir():
        raise UsageError(f"dataset directory not found: {args.dataset}")
    if args.ckpt:
        model = load_checkpoint(args.ckpt)
        if model.cfg.s != args.scale:
            raise UsageError(f"checkpoint is x{model.cfg.s} but --scale is {args.scale}")
        upscale, model_id = model_upscaler(model), Path(args.ckpt).stem
    else:
        upscale, model_id = bicubic_upscaler(args.scale), "bicubic"
    spec = DegradationSpec(args.kind, args.scale, args.seed)
    report = evaluate(upscale, args.dataset, spec, crop=args.crop, model_id=model_id)
    if not report.rows:
        raise UsageError(f"no readable PNG images in {args.dataset}")
    print(report.table(), end="")
    if args.csv:
        report.write_csv(args.csv)
        if args.plot:
            from .plotting import plot_metrics

            plot_metrics(report, Path(args.csv).with_suffix(".png"))
    return EXIT_OK


def cmd_cost(args) -> int:
    sizes = args.sweep or [args.p]
    reports = [cost_report(args.height, args.width, args.channels, p) for p in sizes]
    if args.csv == "-":
        sys.stdout.write(reports_csv(reports))
    else:
        for r in reports:
            print(r.table(), end="")
        if args.csv:
            Path(args.csv).write_text(reports_csv(reports))
            if args.plot:
                from .plotting import plot_cost_sweep

                plot_cost_sweep(reports, Path(args.csv).with_suffix(".png"))
    if args.measure:
        chk = measured_mac_crosscheck(args.measure[0], args.measure[1], args.measure[2], args.measure[3])
        print(f"measured non-local: {chk.modeled(chk.counted_nl):,} (formula {chk.formula_nl:,}) "
              f"unmodeled {chk.unmodeled(chk.counted_nl)}")
        print(f"measured SRNL     : {chk.modeled(chk.counted_srnl):,} (formula {chk.formula_srnl:,}) "
              f"unmodeled {chk.unmodeled(chk.counted_srnl)}")
        if not (chk.nl_match and chk.srnl_match):
            return EXIT_FAIL
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ok = True
    for target in args.module:
        for report in run_target(target, args.tol, args.seed):
            print(report.summary())
            ok &= report.passed
    return EXIT_OK if ok else EXIT_FAIL


def cmd_params(args) -> int:
    model = build(TfmanConfig.variant(args.variant, s=args.scale))
    print(f"variant {args.variant} x{args.scale}: {parameter_count(model):,} parameters")
    for name, count in parameter_breakdown(model, args.depth).items():
        print(f"  {name:<24} {count:>10,}")
    return EXIT_OK


# ---------------------------------------------------------------- argument parsing


def _positive(val: str) -> int:
    n = int(val)
    if n < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return n


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=_positive, default=None,
                        help="worker threads (default: $TFMAN_THREADS or 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tfman", description="TFMAN super-resolution toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("degrade", parents=[common], help="synthesize LR images from HR PNGs")
    p.add_argument("--hr-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--kind", choices=["bi", "bd", "dn"], default="bi")
    p.add_argument("--scale", type=_positive, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("train", parents=[common], help="train or fine-tune a model")
    p.add_argument("--config", help="key=value file; flags override it")
    p.add_argument("--data-dir")
    p.add_argument("--out", help="checkpoint path; the loss CSV and plot go next to it")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=_positive)
    p.add_argument("--kind", choices=["bi", "bd", "dn"])
    p.add_argument("--scale", type=_positive)
    p.add_argument("--base-lr", type=float)
    p.add_argument("--batch", type=_positive)
    p.add_argument("--patch", type=_positive)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="super-resolve one PNG")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--dump-features", metavar="DIR", help="save each recurrence's feature map as .npy")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM on the Y channel over a dataset")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--baseline", choices=["bicubic"])
    p.add_argument("--dataset", required=True)
    p.add_argument("--kind", choices=["bi", "bd", "dn"], default="bi")
    p.add_argument("--scale", type=_positive, default=2)
    p.add_argument("--crop", type=int, default=None, help="border shave (default: scale)")
    p.add_argument("--seed", type=int, default=0, help="noise seed for dn")
    p.add_argument("--csv", help="write per-image scores here")
    p.add_argument("--plot", action="store_true", help="also render a bar chart next to the CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cost", parents=[common], help="non-local vs SRNL compute and memory")
    p.add_argument("--height", type=_positive, default=360)
    p.add_argument("--width", type=_positive, default=640)
    p.add_argument("--channels", type=_positive, default=128)
    p.add_argument("--p", type=_positive, default=48)
    p.add_argument("--sweep", type=_positive, nargs="+", metavar="P", help="several block sizes")
    p.add_argument("--csv", help="CSV path, or - for stdout")
    p.add_argument("--plot", action="store_true", help="also render the sweep next to the CSV")
    p.add_argument("--measure", type=_positive, nargs=4, metavar=("H", "W", "C", "P"),
                   help="cross-check the formulas with instrumented kernels")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--module", choices=TARGETS, nargs="+", default=list(TARGETS))
    p.add_argument("--tol", type=float, default=None, help="override the per-target tolerance")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", parents=[common], help="parameter counts per subtree")
    p.add_argument("--variant", choices=sorted(VARIANTS), default="original")
    p.add_argument("--scale", type=_positive, default=2)
    p.add_argument("--depth", type=_positive, default=2)
    p.set_defaults(func=cmd_params)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    parallel.set_threads(args.threads)
    try:
        return args.func(args)
    except (UsageError, ConfigurationError, SamplingError, CheckpointError, FileNotFoundError) as exc:
        print(f"tfman {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # pragma: no cover - reported, not hidden
        log.exception("internal failure")
        print(f"tfman {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
