"""Command-line pipeline driver.

`mrcfit run --config CFG --stage STAGE [--seed N --out DIR --workers N]`
executes one pipeline stage into a fixed run-directory layout (config copy,
data/, logs/, checkpoints/, samples/, plots/); `mrcfit plot` turns emitted
logs into deterministic SVG charts.

Exit codes: 0 success, 2 config error, 3 missing prerequisite, 4 stage failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from . import diffusion, imgproc, mrc, nncore, rlft, sceneworld
from .errors import ConfigError, EmptyCatalog, MissingPrerequisite, MrcfitError
from .plotting import Series, render_line_chart
from .runconfig import RunConfig, load_config

STAGES = ("gen_data", "sft", "rlft", "eval", "distort", "scale", "curate")
PLOT_KINDS = ("reward", "kl", "distortion", "scaling")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PREREQ = 3
EXIT_FAILURE = 4


def _run_dirs(out_dir: Path) -> dict[str, Path]:
    dirs = {name: out_dir / name for name in ("data", "logs", "checkpoints",
                                              "samples", "plots")}
    for path in [out_dir, *dirs.values()]:
        path.mkdir(parents=True, exist_ok=True)
    return dirs


def _net_dims(cfg: RunConfig) -> nncore.NetDims:
    return nncore.NetDims(data_dim=(2 * cfg.view_res) ** 2, hidden=cfg.hidden_width,
                          embed=cfg.embed_dim, freqs=cfg.freq_count,
                          num_prompts=cfg.total_prompts())


def cmd_gen_data(cfg: RunConfig, out_dir: Path) -> None:
    """Generate catalog scenes, render tiled views, and write the manifest."""
    if cfg.total_prompts() < 1:
        raise EmptyCatalog("catalog_size + test_catalog_size must be >= 1")
    dirs = _run_dirs(out_dir)
    rig = cfg.rig()
    rows = []
    for prompt in range(cfg.total_prompts()):
        scene = sceneworld.generate_scene(prompt, cfg.scene_resolution)
        _, tile = sceneworld.render_multiview(scene, rig)
        scene_path = dirs["data"] / f"scene_{prompt:04d}.voxs"
        tile_path = dirs["data"] / f"tile_{prompt:04d}.raw"
        sceneworld.save_scene(scene, scene_path)
        imgproc.save_raw(tile, tile_path)
        rows.append((prompt, tile_path.name))
    with open(dirs["data"] / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("prompt", "tile"))
        writer.writerows(rows)


def _load_dataset(cfg: RunConfig, out_dir: Path) -> list[tuple[np.ndarray, int]]:
    manifest = out_dir / "data" / "manifest.csv"
    if not manifest.exists():
        raise MissingPrerequisite("run the gen_data stage first (no data/manifest.csv)")
    dataset = []
    with open(manifest, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for prompt, tile_name in reader:
            tile = imgproc.load_raw(out_dir / "data" / tile_name)
            dataset.append((tile.data.ravel(), int(prompt)))
    return dataset


def cmd_sft(cfg: RunConfig, out_dir: Path) -> None:
    """Pretrain the denoiser on the rendered tiles; writes checkpoints/sft.ckpt."""
    dirs = _run_dirs(out_dir)
    dataset = _load_dataset(cfg, out_dir)
    params = nncore.init_params(_net_dims(cfg), seed=cfg.seed)
    params, losses = diffusion.sft_train(params, dataset, cfg.sft_steps,
                                         cfg.sft_drop_prob, seed=cfg.seed,
                                         schedule=cfg.schedule(),
                                         opt=nncore.OptConfig(lr=cfg.sft_lr))
    nncore.save_checkpoint(params, dirs["checkpoints"] / "sft.ckpt")
    with open(dirs["logs"] / "sft_loss.jsonl", "w") as fh:
        for step, loss in enumerate(losses):
            fh.write(json.dumps({"step": step, "loss": loss},
                                separators=(",", ":")) + "\n")
    _write_sample_pngs(cfg, params, dirs["samples"], tag="sft")


def _write_sample_pngs(cfg: RunConfig, params: nncore.DenoiserParams,
                       samples_dir: Path, tag: str) -> None:
    schedule = cfg.schedule()
    rig = cfg.rig()
    for prompt in range(min(2, cfg.catalog_size)):
        traj = diffusion.sample_trajectory(params, params, prompt,
                                           seed=cfg.seed + prompt, schedule=schedule,
                                           cfg_scale=cfg.cfg_scale)
        views = rlft.tile_to_views(traj.x0, rig)
        imgproc.save_png(sceneworld.tile_views(list(views)),
                         samples_dir / f"{tag}_prompt{prompt}.png")


def _latest_checkpoint(out_dir: Path) -> Path:
    for name in ("rlft_final.ckpt", "sft.ckpt"):
        path = out_dir / "checkpoints" / name
        if path.exists():
            return path
    raise MissingPrerequisite("no checkpoint found; run the sft stage first")


def _rlft_prompts(cfg: RunConfig, out_dir: Path) -> list[int]:
    curated = out_dir / "curated_prompts.json"
    if curated.exists():
        return [int(p) for p in json.loads(curated.read_text())]
    return cfg.train_prompts()[:cfg.curate_k]


def cmd_rlft(cfg: RunConfig, out_dir: Path) -> None:
    """Finetune from the pretrained checkpoint; logs one JSON line per epoch."""
    dirs = _run_dirs(out_dir)
    sft_path = out_dir / "checkpoints" / "sft.ckpt"
    if not sft_path.exists():
        raise MissingPrerequisite("run the sft stage first (no checkpoints/sft.ckpt)")
    params = nncore.load_checkpoint(sft_path)
    base = nncore.freeze(nncore.load_checkpoint(sft_path))
    prompts = _rlft_prompts(cfg, out_dir)
    log_path = dirs["logs"] / "rlft.jsonl"

    with open(log_path, "w") as fh:
        def on_epoch(state: rlft.TrainerState, log: rlft.EpochLog) -> None:
            fh.write(log.to_json() + "\n")
            fh.flush()
            nncore.save_checkpoint(state.params,
                                   dirs["checkpoints"] / f"rlft_epoch_{log.epoch:03d}.ckpt")

        final, logs = rlft.run_rlft(params, base, prompts, cfg.trainer_config(),
                                    cfg.mrc_config(), cfg.schedule(), cfg.rig(),
                                    on_epoch=on_epoch)
    nncore.save_checkpoint(final, dirs["checkpoints"] / "rlft_final.ckpt")
    _write_sample_pngs(cfg, final, dirs["samples"], tag="rlft")
    for kind, out_name in (("reward", "reward.svg"), ("kl", "kl.svg")):
        svg = _plot_epoch_log(log_path, kind)
        (dirs["plots"] / out_name).write_text(svg)


def cmd_eval(cfg: RunConfig, out_dir: Path) -> None:
    """Mean reward per held-out prompt under the latest checkpoint."""
    dirs = _run_dirs(out_dir)
    params = nncore.load_checkpoint(_latest_checkpoint(out_dir))
    means = rlft.evaluate_prompts(params, cfg.test_prompts(),
                                  cfg.eval_samples_per_prompt, cfg.trainer_config(),
                                  cfg.mrc_config(), cfg.schedule(), cfg.rig(),
                                  seed=cfg.seed)
    with open(dirs["logs"] / "eval.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("prompt", "reward"))
        for prompt in sorted(means):
            writer.writerow((prompt, repr(means[prompt])))


_DISTORT_KINDS = {
    "patch": (mrc.DistortionKind.PATCH, "patch_intensities"),
    "azimuth": (mrc.DistortionKind.AZIMUTH, "azimuth_intensities"),
    "elevation": (mrc.DistortionKind.ELEVATION, "elevation_intensities"),
}


def cmd_distort(cfg: RunConfig, out_dir: Path) -> None:
    """Distortion-sensitivity curves for every metric kind, one CSV per distortion."""
    dirs = _run_dirs(out_dir)
    for name, (kind, intensity_key) in _DISTORT_KINDS.items():
        report = mrc.metric_comparison_report(
            cfg.distort_prompts, kind, getattr(cfg, intensity_key), seed=cfg.seed,
            cfg=cfg.mrc_config(), rig=cfg.rig(), scene_resolution=cfg.scene_resolution)
        csv_path = dirs["logs"] / f"distort_{name}.csv"
        mrc.write_curves_csv(csv_path, mrc.report_rows(report))
        (dirs["plots"] / f"distort_{name}.svg").write_text(
            _plot_curves_csv(csv_path, title=f"distortion: {name}"))


def cmd_scale(cfg: RunConfig, out_dir: Path) -> None:
    """Reward curves over the batch-size x data-size grid from the sft checkpoint."""
    dirs = _run_dirs(out_dir)
    sft_path = out_dir / "checkpoints" / "sft.ckpt"
    if not sft_path.exists():
        raise MissingPrerequisite("run the sft stage first (no checkpoints/sft.ckpt)")
    params = nncore.load_checkpoint(sft_path)
    grid = [(batch, data) for batch in cfg.scale_batches for data in cfg.scale_datas]
    rows = rlft.scaling_run(params, grid, cfg.scale_epochs, cfg.scale_seeds,
                            cfg.train_prompts(), cfg.trainer_config(),
                            cfg.mrc_config(), cfg.schedule(), cfg.rig())
    csv_path = dirs["logs"] / "scaling.csv"
    rlft.write_scaling_csv(csv_path, rows)
    (dirs["plots"] / "scaling.svg").write_text(_plot_scaling_csv(csv_path))


def cmd_curate(cfg: RunConfig, out_dir: Path) -> None:
    """Pick the lowest-reward training prompts and store them for the rlft stage."""
    _run_dirs(out_dir)
    params = nncore.load_checkpoint(_latest_checkpoint(out_dir))
    chosen = rlft.curate_prompts(params, cfg.train_prompts(), cfg.curate_k,
                                 cfg.curate_samples_per_prompt, cfg.trainer_config(),
                                 cfg.mrc_config(), cfg.schedule(), cfg.rig(),
                                 seed=cfg.seed)
    (out_dir / "curated_prompts.json").write_text(json.dumps(chosen) + "\n")


_STAGE_FUNCS = {
    "gen_data": cmd_gen_data,
    "sft": cmd_sft,
    "rlft": cmd_rlft,
    "eval": cmd_eval,
    "distort": cmd_distort,
    "scale": cmd_scale,
    "curate": cmd_curate,
}


# --------------------------------------------------------------------------
# Plot rendering from emitted artifacts

def _plot_epoch_log(path: Path, kind: str) -> str:
    by_seed: dict[int, list[tuple[float, float]]] = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            log = rlft.EpochLog.from_json(line)
            value = log.reward_mean if kind == "reward" else log.kl_mean
            by_seed.setdefault(log.seed, []).append((float(log.epoch), value))
    if not by_seed:
        raise MrcfitError(f"no epoch records in {path}")
    series = [Series(name=f"seed {seed}", points=tuple(points))
              for seed, points in sorted(by_seed.items())]
    label = "mean reward" if kind == "reward" else "mean KL estimate"
    return render_line_chart(series, title=f"finetuning {kind}", x_label="epoch",
                             y_label=label)


def _plot_curves_csv(path: Path, title: str) -> str:
    groups: dict[str, list[tuple[float, float]]] = {}
    for kind, intensity, score in mrc.read_curves_csv(path):
        groups.setdefault(kind, []).append((intensity, score))
    series = [Series(name=kind, points=tuple(points))
              for kind, points in sorted(groups.items())]
    return render_line_chart(series, title=title, x_label="intensity", y_label="score")


def _plot_scaling_csv(path: Path) -> str:
    groups: dict[tuple[int, int, int], list[tuple[float, float]]] = {}
    for batch, data, seed, epoch, reward, _ in rlft.read_scaling_csv(path):
        groups.setdefault((batch, data, seed), []).append((float(epoch), reward))
    series = [Series(name=f"b{batch} d{data} s{seed}", points=tuple(points))
              for (batch, data, seed), points in sorted(groups.items())]
    return render_line_chart(series, title="scaling grid", x_label="epoch",
                             y_label="mean reward")


def cmd_plot(input_path: Path, kind: str, out_path: Path) -> None:
    if kind == "reward" or kind == "kl":
        svg = _plot_epoch_log(input_path, kind)
    elif kind == "distortion":
        svg = _plot_curves_csv(input_path, title="distortion curves")
    else:
        svg = _plot_scaling_csv(input_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(svg)


# --------------------------------------------------------------------------
# Entry point

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrcfit",
                                     description="toy multi-view consistency pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="execute one pipeline stage")
    run.add_argument("--config", required=True, type=Path, help="run config file")
    run.add_argument("--stage", required=True, choices=STAGES)
    run.add_argument("--seed", type=int, default=None, help="override config seed")
    run.add_argument("--out", type=Path, default=None, help="override output directory")
    run.add_argument("--workers", type=int, default=None,
                     help="override reward-evaluation workers")
    plot = sub.add_parser("plot", help="render an SVG chart from a log or CSV")
    plot.add_argument("--input", required=True, type=Path)
    plot.add_argument("--kind", required=True, choices=PLOT_KINDS)
    plot.add_argument("--out", required=True, type=Path)
    return parser


def _run_stage(args: argparse.Namespace) -> None:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workers is not None:
        cfg.workers = args.workers
    out_dir = args.out if args.out is not None else Path("runs") / "default"
    _run_dirs(out_dir)
    copied = out_dir / "config.txt"
    if args.config.resolve() != copied.resolve():
        shutil.copyfile(args.config, copied)
        overrides = [(key, value) for key, value in
                     (("seed", args.seed), ("workers", args.workers)) if value is not None]
        if overrides:
            with open(copied, "a") as fh:
                fh.write("# command-line overrides\n")
                for key, value in overrides:
                    fh.write(f"{key} = {value}\n")
    _STAGE_FUNCS[args.stage](cfg, out_dir)


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            _run_stage(args)
        else:
            cmd_plot(args.input, args.kind, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingPrerequisite as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except (MrcfitError, OSError) as exc:
        print(f"stage failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
