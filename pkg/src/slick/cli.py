"""Command-line entry point: ``slick <command> [--config c.json] [--seed n] [--out dir]``."""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy
from threadpoolctl import threadpool_limits

from . import __version__
from . import tensor as T
from .bench import flop_ratio, flops, run_bench
from .blocks import StructuralPriorGraph
from .calibrate import PartDamagePriorTable, build_table, calibrate_all
from .config import ConfigError, RunConfig
from .distill import graph_edges
from .infer import mean_mask_iou, predict, read_slkp, write_slkp
from .model import forward, load_checkpoint, save_checkpoint
from .synthdata import Taxonomy, export_dataset, generate_many, import_dataset, make_graph
from .train import distill_student, train_teacher


def _threads() -> int:
    raw = os.environ.get("SLICK_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError("SLICK_THREADS", f"expected a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("SLICK_THREADS", f"expected a positive integer, got {raw!r}")
    return n


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise ConfigError("seed", "expected an unsigned 64-bit integer")
        cfg = cfg.with_seed(args.seed)
    return cfg


def write_manifest(out: Path, command: str, cfg: RunConfig, artifacts, extra: dict | None = None,
                   name: str = "run_manifest.json") -> Path:
    """Run provenance with no wall-clock fields so reruns produce identical files."""
    manifest = {
        "command": command,
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "seeds": {"run": cfg.seed, "teacher": cfg.train.seed, "student": cfg.distill_train.seed},
        "versions": {"slick": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "threads": _threads(),
        "artifacts": sorted(str(a) for a in artifacts),
        **(extra or {}),
    }
    path = out / name
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_samples(cfg: RunConfig, split: str):
    """Samples from a gen-data directory, or generated in memory from seeds."""
    ds = cfg.dataset
    if ds.path:
        samples, taxonomy = import_dataset(Path(ds.path) / split)
        return samples, taxonomy
    if split == "train":
        seeds = range(ds.num_train)
    else:
        seeds = range(ds.test_seed_offset, ds.test_seed_offset + ds.num_test)
    return generate_many(seeds, ds.image_size, ds.image_size), Taxonomy()


def cooccurrence_table(samples, taxonomy: Taxonomy, alpha: float = 1.0) -> PartDamagePriorTable:
    annotations = [a for s in samples for a in s.annotations]
    return build_table(annotations, taxonomy.parts, taxonomy.damages_with_none, alpha=alpha)


def _log(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, cfg: RunConfig, out: Path):
    ds = cfg.dataset
    train = generate_many(range(ds.num_train), ds.image_size, ds.image_size)
    test = generate_many(range(ds.test_seed_offset, ds.test_seed_offset + ds.num_test),
                         ds.image_size, ds.image_size)
    export_dataset(train, out / "train")
    export_dataset(test, out / "test")
    _log(f"wrote {len(train)} train and {len(test)} test scenes to {out}")
    return ["train", "test"], {}


def cmd_train_teacher(args, cfg: RunConfig, out: Path):
    samples, taxonomy = load_samples(cfg, "train")
    graph = make_graph(taxonomy)
    train = cfg.train
    if train.workers == 1 and _threads() > 1:
        train = replace(train, workers=_threads())
    params, history = train_teacher(samples, cfg.teacher, graph, cfg.loss_weights, cfg.optimizer, train,
                                    log=_log)
    save_checkpoint(out / "teacher", cfg.teacher, params, meta={"graph": graph.to_json()})
    (out / "history.json").write_text(json.dumps({"steps": history.steps, "epochs": history.epochs},
                                                 indent=1, sort_keys=True))
    extra = {}
    if history.epochs:
        first, last = history.epochs[0]["loss"], history.epochs[-1]["loss"]
        extra = {"first_epoch_loss": first, "final_epoch_loss": last}
        _log(f"loss {first:.4f} -> {last:.4f}")
    return ["teacher", "history.json"], extra


def cmd_distill(args, cfg: RunConfig, out: Path):
    tcfg, tparams, meta = load_checkpoint(args.teacher, requires_grad=False)
    samples, taxonomy = load_samples(cfg, "train")
    graph = StructuralPriorGraph.from_json(meta["graph"]) if "graph" in meta else make_graph(taxonomy)
    table = cooccurrence_table(samples, taxonomy)
    edges = graph_edges(graph, len(taxonomy.parts), table.counts[:, :len(taxonomy.damages)])
    train = cfg.distill_train
    if train.workers == 1 and _threads() > 1:
        train = replace(train, workers=_threads())
    params, proj, history = distill_student(samples, tparams, tcfg, cfg.student, graph, edges, cfg.distill,
                                            cfg.loss_weights, cfg.optimizer, train, log=_log)
    save_checkpoint(out / "student", cfg.student, params, meta={"graph": graph.to_json()})
    save_checkpoint(out / "projections", cfg.student, proj)
    table.save(out / "table.json")
    (out / "history.json").write_text(json.dumps({"steps": history.steps, "epochs": history.epochs},
                                                 indent=1, sort_keys=True))
    extra = {"teacher": str(args.teacher), "edges": [list(e) for e in edges]}
    if history.steps:
        extra["initial_distill"] = history.steps[0].get("distill")
        extra["final_distill"] = history.epochs[-1].get("distill")
        _log(f"distill loss {extra['initial_distill']:.4f} -> {extra['final_distill']:.4f} (epoch mean)")
    return ["student", "projections", "table.json", "history.json"], extra


def cmd_infer(args, cfg: RunConfig, out: Path):
    mcfg, params, meta = load_checkpoint(args.ckpt, requires_grad=False)
    graph = StructuralPriorGraph.from_json(meta["graph"]) if "graph" in meta else make_graph()
    table = PartDamagePriorTable.load(args.table) if args.table else None
    if args.image:
        images = [(Path(args.image).stem, T.load_tensor(args.image), None)]
        heat = T.load_tensor(args.heat) if args.heat else None
        taxonomy = Taxonomy()
        samples = None
    else:
        if args.data:
            samples, taxonomy = import_dataset(args.data)
        else:
            samples, taxonomy = load_samples(cfg, "test")
        images = [(f"sample_{i:05d}", s.image, s.heatmap) for i, s in enumerate(samples)]
        heat = None
    pred_dir = out / "preds"
    pred_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, img, h in images:
        h = heat if h is None else h
        preds = predict(params, mcfg, img[None], None if h is None else h[None], graph, cfg.nms, table,
                        refine=args.refine)[0]
        write_slkp(pred_dir / f"{name}.slkp", preds, taxonomy.parts, taxonomy.damages_with_none,
                   img.shape[:2])
        written.append(f"preds/{name}.slkp")
    extra = {}
    if samples is not None and args.evaluate:
        miou = mean_mask_iou(params, mcfg, samples, graph, cfg.nms, table=table)
        extra["mean_mask_iou"] = miou
        _log(f"mean mask IoU {miou:.4f}")
    _log(f"wrote {len(written)} prediction files to {pred_dir}")
    return written, extra


def cmd_calibrate(args, cfg: RunConfig, out: Path):
    if args.build:
        samples, taxonomy = import_dataset(args.build) if Path(args.build).is_dir() else load_samples(cfg, "train")
        table = cooccurrence_table(samples, taxonomy, alpha=args.alpha)
        dest = Path(args.table) if args.table else out / "table.json"
        table.save(dest)
        _log(f"wrote prior table to {dest}")
        return [dest.name], {}
    table = PartDamagePriorTable.load(args.table)
    header, preds = read_slkp(args.input)
    cal = calibrate_all(preds, table)
    dest = Path(args.output) if args.output else out / Path(args.input).name
    dest.parent.mkdir(parents=True, exist_ok=True)
    write_slkp(dest, cal, header["classes"]["parts"], header["classes"]["damages"], header["image_size"])
    _log(f"wrote calibrated predictions to {dest}")
    return [dest.name], {}


def cmd_bench(args, cfg: RunConfig, out: Path):
    if args.teacher and args.student:
        tcfg, tparams, _ = load_checkpoint(args.teacher, requires_grad=False)
        scfg, sparams, _ = load_checkpoint(args.student, requires_grad=False)
    else:
        from .model import init_params
        tcfg, scfg = cfg.teacher, cfg.student
        tparams, sparams = init_params(tcfg, cfg.seed), init_params(scfg, cfg.seed)
    graph = make_graph()

    def fwd(params, mcfg, x):
        return forward(params, mcfg, x, graph=graph)

    report = run_bench(fwd, tcfg, tparams, scfg, sparams, size=args.size, runs=args.runs, warmup=args.warmup,
                       seed=cfg.seed)
    report.save(out / "bench.json")
    (out / "bench.txt").write_text(report.table() + "\n")
    _log(report.table())
    return ["bench.json", "bench.txt"], {"flop_ratio": report.flop_ratio,
                                        "teacher_macs": flops(tcfg, args.size, args.size),
                                        "student_macs": flops(scfg, args.size, args.size)}


def cmd_verify(args, cfg: RunConfig, out: Path):
    from .verify import run_all
    results = run_all(quick=args.quick, log=_log)
    (out / "verify.json").write_text(json.dumps(results, indent=2, sort_keys=True))
    failed = [r["name"] for r in results if not r["passed"]]
    return ["verify.json"], {"failed": failed}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "infer": cmd_infer,
    "calibrate": cmd_calibrate,
    "bench": cmd_bench,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run-config JSON file")
    common.add_argument("--seed", type=int, help="override every seed in the run config")
    common.add_argument("--out", default="runs/latest", help="artifact directory")

    parser = argparse.ArgumentParser(prog="slick", description=__doc__)
    parser.add_argument("--version", action="version", version=f"slick {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write train/test synthetic datasets")
    sub.add_parser("train-teacher", parents=[common], help="train the teacher network")
    p = sub.add_parser("distill", parents=[common], help="distill a student from a teacher checkpoint")
    p.add_argument("--teacher", required=True, help="teacher checkpoint directory")
    p = sub.add_parser("infer", parents=[common], help="predict instances and write .slkp files")
    p.add_argument("--ckpt", required=True, help="model checkpoint directory")
    p.add_argument("--data", help="dataset directory (default: generated test split)")
    p.add_argument("--image", help="single SLKT image (H, W, 3)")
    p.add_argument("--heat", help="SLKT damage heatmap for --image")
    p.add_argument("--table", help="prior table JSON for calibration")
    p.add_argument("--refine", action="store_true", help="run the bootstrap second pass")
    p.add_argument("--evaluate", action="store_true", help="report mean mask IoU against ground truth")
    p = sub.add_parser("calibrate", parents=[common], help="build a prior table or calibrate predictions")
    p.add_argument("--table", help="prior table JSON (read, or written with --build)")
    p.add_argument("--in", dest="input", help="input .slkp file")
    p.add_argument("--build", metavar="DATA", help="build the table from a dataset directory ('-' for config)")
    p.add_argument("--alpha", type=float, default=1.0, help="additive smoothing for --build")
    # `calibrate --out file.slkp` names the output file; a directory is used as-is
    p = sub.add_parser("bench", parents=[common], help="latency and FLOP comparison")
    p.add_argument("--teacher", help="teacher checkpoint (default: freshly initialised config model)")
    p.add_argument("--student", help="student checkpoint")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--runs", type=int, default=50)
    p.add_argument("--warmup", type=int, default=5)
    p = sub.add_parser("verify", parents=[common], help="run the property suite")
    p.add_argument("--quick", action="store_true", help="fewer random cases per property")
    return parser


def _check_args(args) -> None:
    if args.command == "calibrate" and not args.build and not (args.table and args.input):
        raise ConfigError("calibrate", "needs --table and --in, or --build")
    if args.command == "infer" and args.image and args.data:
        raise ConfigError("infer", "--image and --data are exclusive")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        threads = _threads()
        _check_args(args)
    except ConfigError as exc:
        print(f"slick: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"slick: cannot read config: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out)
    args.output = None
    if args.command == "calibrate" and out.suffix == ".slkp":
        args.output, out = str(out), out.parent
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    # BLAS stays single-threaded; SLICK_THREADS only sets data-parallel workers
    with threadpool_limits(limits=1):
        try:
            artifacts, extra = COMMANDS[args.command](args, cfg, out)
        except ConfigError as exc:
            print(f"slick: {exc}", file=sys.stderr)
            return 2
    name = "run_manifest.json" if args.output is None else Path(args.output).name + ".manifest.json"
    write_manifest(out, args.command, cfg, artifacts, extra, name=name)
    _log(f"{args.command} finished in {time.perf_counter() - t0:.1f}s (threads={threads})")
    if args.command == "verify" and extra.get("failed"):
        return 1
    return 0


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
