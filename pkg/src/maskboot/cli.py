"""Command-line entry point: config parsing, dispatch, seeds, exit codes."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import FORMAT_VERSION, echo_config, parse_config
from .errors import ConfigError, MaskbootError

log = logging.getLogger("maskboot")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maskboot", description=__doc__)
    p.add_argument("--version", action="version", version=f"maskboot {__version__} (format {FORMAT_VERSION})")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="render a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=None)
    g.add_argument("--size", type=int, default=None)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--config", default=None)
    g.add_argument("--set", action="append", default=[], dest="overrides", metavar="group.key=value")

    t = sub.add_parser("train", help="run the training schedule")
    t.add_argument("--config", default=None)
    t.add_argument("--data", required=True)
    t.add_argument("--out", default=None)
    t.add_argument("--resume", default=None)
    t.add_argument("--dry-run", action="store_true", help="emit the event log only")
    t.add_argument("--dump-augmented", default=None, metavar="DIR")
    t.add_argument("--kmin", type=int, default=None)
    t.add_argument("--kmax", type=int, default=None)
    t.add_argument("--set", action="append", default=[], dest="overrides", metavar="group.key=value")

    b = sub.add_parser("bootstrap", help="regenerate masks from a checkpoint")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--kmin", type=int, default=None)
    b.add_argument("--kmax", type=int, default=None)
    b.add_argument("--stage", default=None)
    b.add_argument("--seed", type=int, default=None)

    e = sub.add_parser("eval", help="score mask snapshots and baselines against ground truth")
    e.add_argument("--ckpt", required=True, help="run checkpoint (for config echo)")
    e.add_argument("--data", required=True)
    e.add_argument("--run", default=None, help="run dir with masks/ snapshots (default: ckpt's parent run)")
    e.add_argument("--out", required=True)

    pr = sub.add_parser("probe", help="linear-probe a checkpoint's frozen features")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--stage", default=None)
    pr.add_argument("--steps", type=int, default=None)
    pr.add_argument("--seed", type=int, default=None)

    r = sub.add_parser("report", help="aggregate run artifacts into tables and plots")
    r.add_argument("--runs", required=True, help="a run dir, or a dir of run dirs")
    r.add_argument("--out", required=True)
    return p


def _load_config(args) -> "RunConfig":
    overrides = list(getattr(args, "overrides", []))
    if getattr(args, "count", None) is not None:
        overrides.append(f"scenegen.scene_count={args.count}")
    if getattr(args, "size", None) is not None:
        overrides.append(f"scenegen.image_size={args.size}")
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "kmin", None) is not None:
        overrides.append(f"bootstrap.k_min={args.kmin}")
    if getattr(args, "kmax", None) is not None:
        overrides.append(f"bootstrap.k_max={args.kmax}")
    return parse_config(getattr(args, "config", None), overrides)


def _cmd_generate_data(args) -> int:
    from .scenegen import generate_dataset, write_dataset

    cfg = _load_config(args)
    scenes, _ = generate_dataset(cfg.scenegen, cfg.seed)
    manifest = write_dataset(scenes, args.out, cfg.scenegen)
    log.info("wrote %d scenes to %s", manifest.scene_count, args.out)
    return 0


def _cmd_train(args) -> int:
    from .trainer import train

    cfg = _load_config(args)
    out = args.out or cfg.out_dir
    events = train(
        cfg,
        data_dir=args.data,
        out_dir=out,
        resume=args.resume,
        dry_run=args.dry_run,
        dump_augmented=args.dump_augmented,
    )
    log.info("finished: %d scheduled events, outputs in %s", len(events), out)
    return 0


def _cmd_bootstrap(args) -> int:
    from .bootstrap import bootstrap_masks
    from .scenegen import load_dataset, write_mask_png
    from .trainer import load_model_from_checkpoint
    from .rng import stream

    online, _, cfg = load_model_from_checkpoint(args.ckpt)
    if args.kmin is not None:
        cfg.bootstrap.k_min = args.kmin
    if args.kmax is not None:
        cfg.bootstrap.k_max = args.kmax
    if args.stage is not None:
        cfg.bootstrap.stage = args.stage
    if not (2 <= cfg.bootstrap.k_min <= cfg.bootstrap.k_max):
        raise ConfigError(
            f"bootstrap.k_min ({cfg.bootstrap.k_min}) and bootstrap.k_max "
            f"({cfg.bootstrap.k_max}) must satisfy 2 <= k_min <= k_max"
        )
    seed = args.seed if args.seed is not None else cfg.seed
    scenes, _ = load_dataset(args.data)
    sets, prov = bootstrap_masks(
        online.backbone, [s.image for s in scenes], cfg.bootstrap, stream(seed, "kmeans")
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, mset in enumerate(sets):
        write_mask_png(mset.grid, out / f"{i:05d}.png")
    (out / "provenance.json").write_text(
        json.dumps(
            {
                "epoch": prov.epoch,
                "k_values": prov.k_values,
                "objectives": prov.objectives,
                "reseeds": prov.reseeds,
                "dead_rows": prov.dead_rows,
            },
            indent=2,
        )
        + "\n"
    )
    log.info("wrote %d mask sets to %s", len(sets), out)
    return 0


def _cmd_eval(args) -> int:
    from .eval import (
        baseline_masks,
        dataset_mask_quality,
        emit_report,
        load_mask_snapshot,
    )
    from .scenegen import load_dataset
    from .trainer import read_checkpoint
    from .rng import stream

    payload = read_checkpoint(args.ckpt)
    scenes, _ = load_dataset(args.data)
    run_dir = Path(args.run) if args.run else Path(args.ckpt).parent.parent
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    mask_reports = []
    masks_root = run_dir / "masks"
    if masks_root.exists():
        for snap in sorted(masks_root.glob("epoch_*")):
            epoch = int(snap.name.split("_")[1])
            sets, prov = load_mask_snapshot(snap, len(scenes))
            mask_reports.append(
                dataset_mask_quality(sets, scenes, epoch, prov.get("k_values"))
            )

    rng = stream(payload["config"]["seed"], "kmeans", 999)
    with open(out / "baselines.csv", "w") as fh:
        fh.write("kind,mean_miou\n")
        for kind in ("random_crop", "grid", "ground_truth"):
            sets = [baseline_masks(kind, s, rng) for s in scenes]
            rep = dataset_mask_quality(sets, scenes, 0)
            fh.write(f"{kind},{rep.mean_miou:.6f}\n")

    emit_report(run_dir / "metrics.jsonl", mask_reports, [], out)
    log.info("evaluated %d mask snapshots; outputs in %s", len(mask_reports), out)
    return 0


def _cmd_probe(args) -> int:
    from .eval import linear_probe
    from .scenegen import load_dataset
    from .trainer import load_model_from_checkpoint, read_checkpoint
    from .rng import stream

    online, _, cfg = load_model_from_checkpoint(args.ckpt)
    payload = read_checkpoint(args.ckpt)
    if args.stage is not None:
        cfg.probe.stage = args.stage
    if args.steps is not None:
        cfg.probe.steps = args.steps
    seed = args.seed if args.seed is not None else cfg.seed
    scenes, _ = load_dataset(args.data)
    report = linear_probe(
        online.backbone,
        scenes,
        cfg.probe,
        cfg.scenegen.num_classes,
        stream(seed, "probe"),
        epoch=payload["epoch"],
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    row = {
        "epoch": report.epoch,
        "pixel_accuracy": report.pixel_accuracy,
        "miou": report.miou,
        "stage": cfg.probe.stage,
    }
    with open(out / "probe_report.jsonl", "a") as fh:
        fh.write(json.dumps(row) + "\n")
    print(json.dumps(row))
    return 0


def _cmd_report(args) -> int:
    from .eval import MaskQualityReport, ProbeReport, emit_report, parse_metrics

    runs = Path(args.runs)
    run_dirs = [runs] if (runs / "metrics.jsonl").exists() else sorted(
        d for d in runs.iterdir() if d.is_dir() and (d / "metrics.jsonl").exists()
    )
    if not run_dirs:
        print(f"warning: no runs found under {runs}", file=sys.stderr)
        return 0
    for run in run_dirs:
        out = Path(args.out) / run.name if len(run_dirs) > 1 else Path(args.out)
        probe_reports = []
        probe_path = run / "probe_report.jsonl"
        if probe_path.exists():
            for row in parse_metrics(probe_path):
                probe_reports.append(
                    ProbeReport(
                        epoch=row["epoch"],
                        pixel_accuracy=row["pixel_accuracy"],
                        miou=row["miou"],
                    )
                )
        mask_reports: list[MaskQualityReport] = []
        emit_report(run / "metrics.jsonl", mask_reports, probe_reports, out)
        log.info("report for %s written to %s", run, out)
    return 0


_COMMANDS = {
    "generate-data": _cmd_generate_data,
    "train": _cmd_train,
    "bootstrap": _cmd_bootstrap,
    "eval": _cmd_eval,
    "probe": _cmd_probe,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 on --help/--version
        return 1 if exc.code else 0
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except MaskbootError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
