"""``mpmae gen|pretrain|eval|report``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .config import ExperimentConfig, apply_overrides, load_config, write_provenance
from .errors import ConfigError, DataError, MPMAEError, ShapeMismatch

log = logging.getLogger("mpmae")

RULE = "=" * 60


def _section(title: str) -> None:
    print(f"{RULE}\n{title}\n{RULE}")


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _csv_ints(text: str) -> list[int]:
    return [int(v) for v in _csv_floats(text)]


def _resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output_dir = args.out
    return cfg


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args) -> int:
    from .evaluation.downstream import build_downstream
    from .synthgen import build_dataset

    cfg = _resolve(args)
    apply_overrides(cfg, "gen", samples_total=args.samples, biome_count=args.biomes, raster_size=args.raster)
    cfg.validate()
    world = cfg.gen.world_config(cfg.seed)
    for d in (cfg.data_dir, cfg.downstream_dir):
        if d.exists() and any(d.iterdir()):
            if not args.force:
                raise ConfigError(f"output directory {d} is not empty; pass --force to overwrite")
            shutil.rmtree(d)
    ds, per_biome = build_dataset(world, cfg.data_dir)
    held_out = cfg.gen.world_config(cfg.seed + cfg.gen.downstream_seed_offset)
    build_downstream(held_out, ds.stats, cfg.downstream_dir, cfg.gen.downstream_train, cfg.gen.downstream_val, cfg.gen.downstream_test)
    for d in (cfg.data_dir, cfg.downstream_dir):
        write_provenance(d, cfg, "gen")
    _section("per-biome sample counts")
    print("biome,count")
    for b, n in per_biome.items():
        print(f"{b},{n}")
    print(f"total,{len(ds)}")
    print(f"strata,{len(per_biome)}")
    print(f"dataset,{cfg.data_dir}")
    print(f"downstream,{cfg.downstream_dir}")
    return 0


# ---------------------------------------------------------------------------
# pretrain


def cmd_pretrain(args) -> int:
    from .pretrain import run_pretraining
    from .schema import select_tasks
    from .synthgen import read_dataset

    cfg = _resolve(args)
    apply_overrides(cfg, "pretrain", tasks=args.tasks, loss_mode=args.loss, epochs=args.epochs, encoder=args.encoder, run_name=args.run_name)
    cfg.validate()
    if not (cfg.data_dir / "manifest.json").exists():
        raise DataError(f"no dataset at {cfg.data_dir}; run `mpmae gen` first")
    ds = read_dataset(cfg.data_dir)
    pcfg = cfg.pretrain.pretrain_config(cfg.seed)
    tasks = select_tasks(ds.registry, pcfg.tasks)
    out = cfg.pretrain_dir()
    write_provenance(out, cfg, "pretrain")
    result = run_pretraining(ds, pcfg, out, resume=args.resume)
    _section("pretraining")
    print(f"tasks,{len(tasks)},{' '.join(t.task_id for t in tasks)}")
    print(f"loss_mode,{pcfg.loss_mode}")
    totals = result.log.totals()
    print(f"epochs,{result.epoch}")
    if totals:
        print(f"first_total,{totals[0]!r}")
        print(f"last_total,{totals[-1]!r}")
    print(f"checkpoint,{result.checkpoint_path}")
    print(f"log,{out / 'train_log.csv'}")
    return 0


# ---------------------------------------------------------------------------
# eval


@dataclass(frozen=True)
class EvalJob:
    checkpoint: str
    downstream: str
    task: str
    mode: str
    fraction: float
    seed: int
    params: tuple  # ProbeConfig overrides as sorted items
    archive_dir: str


def checkpoint_id(path: str | Path) -> str:
    p = Path(path)
    return f"{p.parent.name}:{p.stem}"


def load_encoder(path: str | Path):
    from .checkpoint import load_checkpoint
    from .pretrain import model_from_checkpoint

    return model_from_checkpoint(load_checkpoint(path)).encoder


def run_job(job: EvalJob, threads: int | None = None) -> list[dict]:
    """One (checkpoint, task, mode, fraction, seed) evaluation; returns report dicts."""
    import torch

    from .checkpoint import save_checkpoint
    from .evaluation import SEGMENTATION, fine_tune_classifier, linear_probe, load_downstream
    from .evaluation.probe import ProbeConfig
    from .evaluation.segmentation import build_unet_segmenter, fine_tune_segmenter_two_phase
    from .evaluation.sweep import sweep_train_subset

    if threads:
        torch.set_num_threads(threads)
    encoder = load_encoder(job.checkpoint)
    task = load_downstream(job.downstream, job.task)
    in_ch = task.x.shape[1]
    if encoder.cfg.in_channels != in_ch:
        raise ShapeMismatch(f"checkpoint encoder expects {encoder.cfg.in_channels} input bands, downstream data has {in_ch}")
    if task.x.shape[-1] % encoder.cfg.patch_size:
        raise ShapeMismatch(f"downstream raster {task.x.shape[-1]} not divisible by checkpoint patch size {encoder.cfg.patch_size}")
    if (task.kind == SEGMENTATION) != (job.mode == "ft-seg"):
        raise ConfigError(f"mode {job.mode!r} does not apply to task {job.task!r} ({task.kind})")
    params = dict(job.params)
    cfg = ProbeConfig(mode="lp" if job.mode == "lp" else "ft", seed=job.seed, **params)
    sub = sweep_train_subset(task, job.fraction, job.seed)
    ck = checkpoint_id(job.checkpoint)
    if job.mode == "lp":
        return [linear_probe(encoder, sub, cfg, ck, job.fraction).to_dict()]
    if job.mode == "ft":
        return [fine_tune_classifier(encoder, sub, cfg, ck, job.fraction)[0].to_dict()]

    torch.manual_seed(job.seed)
    model = build_unet_segmenter(encoder, task.num_classes, cfg.seg_decoder_width)
    archive = Path(job.archive_dir)
    archive.mkdir(parents=True, exist_ok=True)
    stem = f"{ck.replace(':', '_')}-{job.task}-f{job.fraction:g}-s{job.seed}"

    def keep(phase, m):
        save_checkpoint(archive / f"{stem}-phase{phase}.ckpt", m, {"probe": cfg.to_dict(), "source": job.checkpoint}, phase)

    p1, p2 = fine_tune_segmenter_two_phase(model, sub, cfg, ck, job.fraction, on_phase_end=keep)
    return [p1.to_dict(), p2.to_dict()]


def cmd_eval(args) -> int:
    from .evaluation.probe import MetricReport
    from .evaluation.sweep import ResultsStore

    cfg = _resolve(args)
    apply_overrides(cfg, "eval", mode=args.mode, sweep=args.sweep or None, jobs=args.jobs, fractions=args.fractions, seeds=args.seeds, epochs=args.epochs)
    if args.checkpoint:
        cfg.eval.checkpoints = list(args.checkpoint)
    if args.task:
        cfg.eval.tasks = list(args.task)
    cfg.validate()
    ev = cfg.eval
    if not ev.checkpoints:
        raise ConfigError("no checkpoints given; pass --checkpoint or set eval.checkpoints")
    for c in ev.checkpoints:
        if not Path(c).exists():
            raise DataError(f"checkpoint not found: {c}")
    if not (cfg.downstream_dir / "manifest.json").exists():
        raise DataError(f"no downstream dataset at {cfg.downstream_dir}; run `mpmae gen` first")
    fractions = ev.fractions if ev.sweep else [1.0]
    if ev.sweep and ev.mode != "lp":
        raise ConfigError("--sweep runs linear probes; use it with --mode lp")
    params = tuple(sorted(ev.params.items()))
    jobs = [
        EvalJob(str(c), str(cfg.downstream_dir), t, ev.mode, f, s, params, str(cfg.results_dir / "archive"))
        for c in ev.checkpoints
        for t in ev.tasks
        for f in fractions
        for s in ev.seeds
    ]
    write_provenance(cfg.results_dir, cfg, "eval")
    if ev.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=ev.jobs) as pool:
            results = list(pool.map(run_job, jobs, [1] * len(jobs)))
    else:
        results = [run_job(j) for j in jobs]
    reports = [MetricReport(**d) for rows in results for d in rows]
    store = ResultsStore(cfg.results_dir)
    store.add(reports)
    _section("evaluation")
    print("checkpoint,task,mode,fraction,seed,metric,value,train_value")
    for r in reports:
        print(f"{r.checkpoint},{r.task},{r.mode},{r.fraction:g},{r.seed},{r.metric},{r.value:.4f},{r.train_value:.4f}")
    print(f"store,{store.json_path}")
    return 0


# ---------------------------------------------------------------------------
# report


def cmd_report(args) -> int:
    from .checkpoint import load_checkpoint
    from .evaluation.sweep import ResultsStore
    from .pretrain import TrainLog, model_from_checkpoint
    from .report import build_report, grid_tables, reconstruction_examples
    from .synthgen import read_dataset

    cfg = _resolve(args)
    if args.checkpoint:
        cfg.report.reconstruction_checkpoint = args.checkpoint
    results_dir = Path(args.results) if args.results else cfg.results_dir
    store = ResultsStore(results_dir)
    reports = store.reports()
    if not reports:
        raise DataError(f"results store at {results_dir} is empty; run `mpmae eval` first")
    logs = {p.parent.name: TrainLog.read_csv(p) for p in sorted((cfg.root / "pretrain").glob("*/train_log.csv"))}
    recon = None
    notices = []
    ck = cfg.report.reconstruction_checkpoint
    if ck:
        ckpt = load_checkpoint(ck)
        if not (cfg.data_dir / "manifest.json").exists():
            raise DataError(f"reconstructions need the pretraining dataset at {cfg.data_dir}")
        norm = "sentinel2" in ckpt.config["pretrain"].get("patch_norm_tasks", ["sentinel2"])
        recon = reconstruction_examples(
            model_from_checkpoint(ckpt), read_dataset(cfg.data_dir), cfg.report.reconstruction_examples, seed=cfg.seed, patch_normalized=norm
        )
    else:
        notices.append("notice: no checkpoint given; reconstruction grid omitted")
    if not logs:
        notices.append("notice: no train_log.csv under the output directory; s_t panel omitted")
    written = build_report(reports, cfg.report_dir, logs or None, recon, cfg.report.sweep_task)
    write_provenance(cfg.report_dir, cfg, "report")
    _section("comparison grid (test metric, %)")
    print(grid_tables(reports)[1], end="")
    _section("artifacts")
    for k, v in written.items():
        print(f"{k},{v}")
    for n in notices:
        print(n)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpmae", description="Multi-pretext masked autoencoder experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int, help="global seed (overrides MPMAE_SEED and the config)")
        p.add_argument("--out", help="output root directory")

    g = sub.add_parser("gen", help="generate the synthetic pretraining and downstream datasets")
    common(g)
    g.add_argument("--samples", type=int, help="number of pretraining samples")
    g.add_argument("--biomes", type=int, help="number of biome strata")
    g.add_argument("--raster", type=int, help="raster side length in pixels")
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    g.set_defaults(func=cmd_gen)

    p = sub.add_parser("pretrain", help="run multi-pretext pretraining")
    common(p)
    p.add_argument("--tasks", help="task preset (s2, pixel, image, all) or comma-separated task ids")
    p.add_argument("--loss", choices=("equal", "uncertainty"), help="multi-task loss weighting")
    p.add_argument("--epochs", type=int)
    p.add_argument("--encoder", help="encoder preset")
    p.add_argument("--run-name", help="subdirectory name under <out>/pretrain")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_pretrain)

    e = sub.add_parser("eval", help="linear probe, fine-tune or segment with pretrained checkpoints")
    common(e)
    e.add_argument("--checkpoint", action="append", help="checkpoint file (repeatable)")
    e.add_argument("--task", action="append", help="downstream task: scene, presence, landcover (repeatable)")
    e.add_argument("--mode", choices=("lp", "ft", "ft-seg"))
    e.add_argument("--sweep", action="store_true", help="label-efficiency sweep over training fractions")
    e.add_argument("--fractions", type=_csv_floats, help="comma-separated training fractions for --sweep")
    e.add_argument("--seeds", type=_csv_ints, help="comma-separated evaluation seeds")
    e.add_argument("--epochs", type=int, help="downstream training epochs")
    e.add_argument("--jobs", type=int, help="parallel evaluation processes")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="render tables and figures from the results store")
    common(r)
    r.add_argument("--results", help="results directory (default <out>/eval)")
    r.add_argument("--checkpoint", help="checkpoint for the reconstruction grid")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MPMAEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
