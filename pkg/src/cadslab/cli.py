"""Command line entry point: ``cadslab {train,sample,eval,ablate,plot,data}``.

Exit status is 0 on success, 1 for usage or configuration errors and 2 for
runtime failures. ``CADSLAB_OUTPUT_DIR`` overrides the configured output
directory when ``--out`` is not given.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

from . import io as cio
from .config import ConfigError, ExperimentConfig, config_to_dict, load_config
from .harness import (
    GRID_KEYS,
    evaluate_samples,
    make_source,
    parse_grid,
    reference_set,
    run_ablation,
    run_sampler,
)
from .model import TrainingDiverged, load_checkpoint, save_checkpoint, train
from .plotting import ablation_figure, per_condition_figure, scatter_panels
from .sampler import ChainAborted, SamplerConfig
from .schedule import NOISE_FAMILIES, AnnealSchedule, CadsConfig

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; route it to our usage code instead
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load(args) -> ExperimentConfig:
    return load_config(args.config) if args.config else ExperimentConfig()


def _sampler_flags(p) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="trained denoiser checkpoint")
    src.add_argument("--oracle", action="store_true", help="use exact mixture scores")
    p.add_argument("--sampler", choices=("ddpm", "ddim"))
    p.add_argument("--steps", type=int)
    p.add_argument("--cfg", type=float, help="guidance weight")
    p.add_argument("--eta", type=float)
    p.add_argument("--cads", action="store_true", help="enable condition annealing")
    p.add_argument("--s", type=float, help="CADS noise scale")
    p.add_argument("--tau1", type=float)
    p.add_argument("--tau2", type=float)
    p.add_argument("--psi", type=float, help="mixing factor")
    p.add_argument("--no-rescale", action="store_true")
    p.add_argument("--noise-dist", choices=NOISE_FAMILIES)
    p.add_argument("--dynamic-cfg", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--per-class", type=int)
    p.add_argument("--workers", type=int)


def _sampler_config(args, cfg: ExperimentConfig) -> SamplerConfig:
    """Config-file sampler settings with command line overrides applied."""
    base = cfg.sampler_config()
    kind = args.sampler or base.kind
    if args.eta is not None and kind == "ddpm":
        _log("warning: --eta has no effect with --sampler ddpm; ignored")
        eta = base.eta
    else:
        eta = base.eta if args.eta is None else args.eta
    cads = base.cads
    if args.cads or cads is not None:
        c = cads or cfg.cads
        a = c.anneal
        try:
            if args.tau1 is not None or args.tau2 is not None:
                a = AnnealSchedule.linear(
                    a.tau1 if args.tau1 is None else args.tau1,
                    a.tau2 if args.tau2 is None else args.tau2,
                )
            cads = CadsConfig(
                noise_scale=c.noise_scale if args.s is None else args.s,
                mixing_factor=c.mixing_factor if args.psi is None else args.psi,
                rescale=c.rescale and not args.no_rescale,
                noise_distribution=args.noise_dist or c.noise_distribution,
                anneal=a,
            )
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    elif any(v is not None for v in (args.s, args.tau1, args.tau2, args.psi, args.noise_dist)) or args.no_rescale:
        _log("warning: CADS flags given without --cads; ignored")
    dyn = base.dynamic_cfg
    if args.dynamic_cfg and dyn is None:
        dyn = cfg.dynamic_cfg
    try:
        return SamplerConfig(
            kind=kind,
            num_steps=base.num_steps if args.steps is None else args.steps,
            guidance_weight=base.guidance_weight if args.cfg is None else args.cfg,
            eta=eta,
            cads=cads,
            dynamic_cfg=dyn,
            seed=base.seed if args.seed is None else args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _sampler_dict(sc: SamplerConfig) -> dict:
    d = dataclasses.asdict(sc)
    return json.loads(json.dumps(d))


def _source(args, spec):
    net = load_checkpoint(args.checkpoint) if args.checkpoint else None
    return make_source(spec, net)


def cmd_train(args) -> int:
    cfg = _load(args)
    tc = cfg.train
    if args.epochs is not None:
        tc = dataclasses.replace(tc, epochs=args.epochs)
    if args.seed is not None:
        tc = dataclasses.replace(tc, seed=args.seed)
    out = cio.resolve_output_dir(args.out, cfg.output_dir)
    with cio.output_lock(out):
        t0 = time.perf_counter()
        net = train(cfg.gmm.build(), tc, log=_log if args.verbose else None)
        elapsed = time.perf_counter() - t0
        ckpt = out / "checkpoint.bin"
        save_checkpoint(net, ckpt)
        man = cio.RunManifest("train", {**config_to_dict(cfg), "train": dataclasses.asdict(tc)}, tc.seed)
        if args.config:
            man.add_input("config", args.config)
        man.add_output("checkpoint", ckpt)
        man.timings["train_seconds"] = round(elapsed, 3)
        man.extra["loss_curve"] = net.loss_curve
        man.write(out / "train_manifest.json")
    print(f"checkpoint\t{ckpt}")
    print(f"final_loss\t{net.loss_curve[-1]:.6f}" if net.loss_curve else "final_loss\tnan")
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = _load(args)
    sc = _sampler_config(args, cfg)
    spec = cfg.gmm.build()
    per_class = cfg.sampler.per_class if args.per_class is None else args.per_class
    workers = cfg.sampler.workers if args.workers is None else args.workers
    source = _source(args, spec)
    out = cio.resolve_output_dir(args.out, cfg.output_dir)
    with cio.output_lock(out):
        t0 = time.perf_counter()
        pts, labs = run_sampler(source, sc, per_class, workers)
        elapsed = time.perf_counter() - t0
        path = out / f"{args.name}.csv"
        cio.write_samples_csv(path, pts, labs)
        man = cio.RunManifest("sample", {**config_to_dict(cfg), "sampler_effective": _sampler_dict(sc)}, sc.seed)
        if args.checkpoint:
            man.add_input("checkpoint", args.checkpoint)
        man.add_output("samples", path)
        man.timings["sample_seconds"] = round(elapsed, 3)
        man.extra["label"] = _run_label(args, sc)
        man.write(out / f"{args.name}.manifest.json")
    print(f"samples\t{path}\t{len(labs)} rows")
    return EXIT_OK


def _run_label(args, sc: SamplerConfig) -> str:
    parts = ["oracle" if args.oracle else "model", sc.kind, f"w={sc.guidance_weight:g}"]
    if sc.cads_active:
        parts.append(f"CADS s={sc.cads.noise_scale:g}")
    if sc.dynamic_cfg is not None:
        parts.append("dynamic CFG")
    return " ".join(parts)


def _reference(args, cfg: ExperimentConfig, spec):
    if args.reference:
        ref_pts, ref_labs, _ = cio.read_points_csv(args.reference)
        return ref_pts, ref_labs
    return reference_set(spec, cfg.metrics.reference_per_class, cfg.metrics.reference_seed)


def cmd_eval(args) -> int:
    cfg = _load(args)
    spec = cfg.gmm.build()
    pts, labs, _ = cio.read_points_csv(args.samples)
    ref_pts, ref_labs = _reference(args, cfg, spec)
    report = evaluate_samples(pts, labs, ref_pts, ref_labs, spec, cfg.metrics.k, cfg.metrics.bandwidth)
    out = cio.resolve_output_dir(args.out, cfg.output_dir)
    stem = args.name or Path(args.samples).stem
    with cio.output_lock(out):
        cio.write_json(out / f"{stem}.metrics.json", report.to_dict())
        rows = [{"label": lab, **vals} for lab, vals in sorted(report.per_condition.items())]
        cols = ["label", "count", "vendi", "mss", "std", "alignment"]
        cio.write_table_csv(out / f"{stem}.per_condition.csv", cols, rows)
        per_condition_figure(out / f"{stem}.per_condition.svg", report.per_condition)
    for key, val in report.summary().items():
        print(f"{key}\t{'' if val is None else format(val, '.6g')}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load(args)
    try:
        grid = parse_grid(args.grid or [])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    sc = _sampler_config(args, cfg)
    spec = cfg.gmm.build()
    per_class = cfg.sampler.per_class if args.per_class is None else args.per_class
    workers = cfg.sampler.workers if args.workers is None else args.workers
    source = _source(args, spec)
    ref_pts, ref_labs = reference_set(spec, cfg.metrics.reference_per_class, cfg.metrics.reference_seed)
    out = cio.resolve_output_dir(args.out, cfg.output_dir)
    with cio.output_lock(out):
        rows = run_ablation(source, spec, sc, grid, per_class, ref_pts, ref_labs,
                            cfg.metrics.k, cfg.metrics.bandwidth, workers)
        cols = list(grid) + ["recall", "precision", "vendi", "mss", "fd2d", "alignment_accuracy", "support_coverage_rate"]
        path = out / f"{args.name}.csv"
        cio.write_table_csv(path, cols, rows)
        first = next(iter(grid))
        if len(grid) == 1:
            ablation_figure(out / f"{args.name}.svg", first, grid[first], rows)
    for row in rows:
        print("\t".join(_cell(row[c]) for c in cols))
    return EXIT_OK


def _cell(v) -> str:
    if v is None:
        return ""
    return format(v, ".6g") if isinstance(v, float) else str(v)


def cmd_plot(args) -> int:
    if not args.samples:
        raise UsageError("plot: at least one samples file is required")
    cfg = _load(args)
    spec = cfg.gmm.build()
    panels = []
    for path in args.samples:
        pts, labs, _ = cio.read_points_csv(path)
        name = Path(path).stem
        man = Path(path).with_suffix(".manifest.json")
        if man.exists():
            name = json.loads(man.read_text()).get("label", name)
        panels.append((name, pts, labs))
    extent = float(max(abs(spec.means).max() + 3 * spec.covariances[:, 0, 0].max() ** 0.5, 1.0)) + 0.5
    out = Path(args.output)
    scatter_panels(out, panels, extent, title=args.title, num_classes=spec.K)
    print(f"figure\t{out}")
    return EXIT_OK


def cmd_data(args) -> int:
    cfg = _load(args)
    spec = cfg.gmm.build()
    pts, labs = reference_set(spec, args.per_class, args.seed)
    out = cio.resolve_output_dir(args.out, cfg.output_dir)
    with cio.output_lock(out):
        path = out / f"{args.name}.csv"
        cio.write_dataset_csv(path, pts, labs)
    print(f"dataset\t{path}\t{len(labs)} rows")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cadslab", description="Condition-annealed diffusion sampling on a 2D Gaussian mixture.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="INI experiment config")
        sp.add_argument("--out", help="output directory")

    t = sub.add_parser("train", help="train the conditional denoiser")
    common(t)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw labelled samples")
    common(s)
    _sampler_flags(s)
    s.add_argument("--name", default="samples", help="output file stem")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="score a samples file")
    common(e)
    e.add_argument("samples")
    e.add_argument("--reference", help="reference CSV (default: fresh draw from the mixture)")
    e.add_argument("--name", help="output file stem")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="sweep sampler settings")
    common(a)
    _sampler_flags(a)
    a.add_argument("--grid", action="append", metavar="KEY=V1,V2",
                   help=f"grid axis, repeatable; keys: {', '.join(GRID_KEYS)}")
    a.add_argument("--name", default="ablation", help="output file stem")
    a.set_defaults(func=cmd_ablate)

    pl = sub.add_parser("plot", help="scatter panels from samples files")
    pl.add_argument("--config", help="INI experiment config")
    pl.add_argument("samples", nargs="*")
    pl.add_argument("-o", "--output", default="samples.svg")
    pl.add_argument("--title")
    pl.set_defaults(func=cmd_plot)

    d = sub.add_parser("data", help="export the mixture dataset")
    common(d)
    d.add_argument("--per-class", type=int, default=100)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--name", default="dataset")
    d.set_defaults(func=cmd_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        _log(f"error: {exc}")
        return EXIT_USAGE
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_USAGE
    except (TrainingDiverged, ChainAborted, cio.OutputLocked, cio.CsvFormatError, ValueError, OSError) as exc:
        _log(f"error: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
