"""Command-line entry point.

Every command is a batch process: it reads files, writes files, exits.
Exit codes: 0 success, 2 configuration errors, 3 data/checkpoint errors,
4 numeric failures. Each command writes a `run_meta.json` provenance
record of its inputs and outputs into its output directory.
"""

from __future__ import annotations

import functools
import json
import sys
import time
from pathlib import Path

import click
import numpy as np
import torch

from . import __version__
from .backbone import extract_subcrop_tokens, write_feature_cache
from .config import RunConfig
from .data import TokenVocabulary, load_manifest
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .evaluation import deterministic_test_crops, evaluate_run, generate_for_sample
from .failure import run_failure_analysis, stub_classifier
from .images import load_rgb, save_rgb
from .plots import plot_failure_bars, plot_loss_curves
from .stain import dab_channel, dab_intensity_score
from .training import Trainer, build_backbone, load_inference_modules, read_checkpoint

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _handled(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except (DataError, CheckpointError) as exc:
            click.echo(f"data error: {exc}", err=True)
            sys.exit(EXIT_DATA)
        except NumericError as exc:
            click.echo(f"numeric error: {exc}", err=True)
            sys.exit(EXIT_NUMERIC)

    return wrapper


def _write_provenance(out_dir: Path, command: str, inputs: dict, outputs: list[str], seed) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "tool": f"virtstain {__version__}",
        "command": command,
        "argv": sys.argv[1:],
        "seed": seed,
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "outputs": sorted(outputs),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out_dir / "run_meta.json").write_text(json.dumps(meta, indent=2))


def _load_config(config_path, seed_override, device_override) -> RunConfig:
    cfg = RunConfig.from_yaml(config_path) if config_path else RunConfig().validate()
    if seed_override is not None:
        cfg.seed = seed_override
    if device_override is not None:
        cfg.device = device_override
    return cfg


@click.group()
@click.version_option(__version__)
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--device", default=None, help="Compute device (cpu).")
@click.option("--workers", type=int, default=0, help="Data workers (pipeline is seed-deterministic regardless).")
@click.pass_context
def main(ctx, seed, device, workers):
    """Virtual IHC staining toolkit."""
    ctx.obj = {"seed": seed, "device": device, "workers": workers}


@main.command("extract-features")
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--backbone", "backbone_kind", type=click.Choice(["toy", "pretrained"]), default="toy")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.pass_context
@_handled
def extract_features(ctx, manifest_path, backbone_kind, out_dir, config_path):
    """Precompute frozen-backbone token grids for every manifest image."""
    cfg = _load_config(config_path, ctx.obj["seed"], ctx.obj["device"])
    cfg.backbone.kind = backbone_kind
    handle = build_backbone(cfg)
    samples = load_manifest(manifest_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for sample in samples:
        img = torch.from_numpy(load_rgb(sample.hne)).permute(2, 0, 1)
        grid = extract_subcrop_tokens(img, handle)
        path = out / f"{sample.source_id}.tokens"
        write_feature_cache(path, sample.source_id, grid)
        written.append(path.name)
    _write_provenance(out, "extract-features", {"manifest": manifest_path}, written, cfg.seed)
    click.echo(f"wrote {len(written)} token grids to {out}")


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--resume", "resume_path", type=click.Path(), default=None)
@click.option("--steps", type=int, default=None, help="Override training.steps.")
@click.pass_context
@_handled
def train(ctx, config_path, manifest_path, out_dir, resume_path, steps):
    """Run the optimization loop and write a checkpoint."""
    cfg = _load_config(config_path, ctx.obj["seed"], ctx.obj["device"])
    samples = [s for s in load_manifest(manifest_path) if s.split == "train"]
    if not samples:
        raise DataError("manifest has no train-split samples")
    out = Path(out_dir)
    trainer = Trainer(cfg, samples, workdir=out)
    if resume_path:
        trainer.load_checkpoint(resume_path)
    n_steps = steps if steps is not None else cfg.training.steps
    ckpt = out / "checkpoint.pt"
    trainer.train(n_steps, checkpoint_path=ckpt)
    counts = trainer.parameter_counts()
    _write_provenance(
        out,
        "train",
        {"config": config_path, "manifest": manifest_path, "resume": resume_path},
        [ckpt.name, "loss_log.jsonl"],
        cfg.seed,
    )
    click.echo(
        f"trained to step {trainer.step} "
        f"({counts['generator_side']:,} generator-side params); checkpoint at {ckpt}"
    )


def _resolve_token(token: str, vocab: TokenVocabulary) -> str:
    if token in vocab.names:
        return token
    if token.isdigit() and int(token) < len(vocab.names):
        return vocab.names[int(token)]
    raise DataError(f"invalid conditioning token {token!r}; valid tokens: {vocab.names}")


@main.command("infer")
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path())
@click.option("--manifest", "manifest_path", type=click.Path(), default=None)
@click.option("--image", "image_path", type=click.Path(), default=None)
@click.option("--stain-token", "stain_token", required=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.pass_context
@_handled
def infer(ctx, ckpt_path, manifest_path, image_path, stain_token, out_dir):
    """Translate H&E inputs with the EMA generator; write PNGs + DAB sidecar."""
    if (manifest_path is None) == (image_path is None):
        raise DataError("provide exactly one of --manifest or --image")
    payload = read_checkpoint(ckpt_path)
    generator, processor, vocab, cfg = load_inference_modules(payload)
    backbone = build_backbone(cfg)
    token = _resolve_token(stain_token, vocab)
    res = cfg.generator.resolution

    inputs: list[tuple[str, np.ndarray]] = []
    if image_path:
        inputs.append((Path(image_path).stem, load_rgb(image_path)))
    else:
        for sample in load_manifest(manifest_path):
            inputs.append((sample.source_id, load_rgb(sample.hne)))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    matrix = cfg.stain_matrix()
    written = []
    sidecar = out / "dab_scores.jsonl"
    with open(sidecar, "w") as fh:
        for name, img in inputs:
            side = img.shape[0]
            if side == 2 * res:
                crops = deterministic_test_crops(img, res)
            elif side == res:
                crops = [img]
            else:
                raise DataError(
                    f"{name}: input side {side} must be {res} or {2 * res} for this checkpoint"
                )
            for idx, crop in enumerate(crops):
                fake = generate_for_sample(
                    generator, processor, backbone, vocab, crop, token,
                    cfg.backbone.spatial_mode,
                )
                fname = f"{name}_q{idx}_{token}.png" if len(crops) > 1 else f"{name}_{token}.png"
                save_rgb(out / fname, fake)
                written.append(fname)
                score = float(
                    dab_intensity_score(
                        dab_channel(torch.from_numpy(fake.astype(np.float64)), matrix, cfg.stain.od_eps),
                        cfg.stain.top_fraction,
                    )
                )
                fh.write(json.dumps({"image": fname, "token": token, "dab_score": score}) + "\n")
    _write_provenance(
        out,
        "infer",
        {"ckpt": ckpt_path, "manifest": manifest_path, "image": image_path, "token": token},
        written + [sidecar.name],
        cfg.seed,
    )
    click.echo(f"wrote {len(written)} images to {out}")


@main.command("evaluate")
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path())
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--split", default="test", show_default=True)
@click.pass_context
@_handled
def evaluate(ctx, ckpt_path, manifest_path, out_dir, split):
    """Deterministic-crop evaluation: metric report + generated images."""
    report = evaluate_run(ckpt_path, manifest_path, out_dir, split=split)
    out = Path(out_dir)
    _write_provenance(
        out,
        "evaluate",
        {"ckpt": ckpt_path, "manifest": manifest_path},
        ["report.json", "report.txt", "generated/"],
        None,
    )
    click.echo(report.to_text())


@main.command("stratify-failures")
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path())
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--classifier", type=click.Choice(["stub", "external"]), default="stub")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--split", default="test", show_default=True)
@click.pass_context
@_handled
def stratify_failures(ctx, ckpt_path, manifest_path, classifier, out_dir, split):
    """Tissue-stratified failure table, worst-case grids, failure-rate bars."""
    if classifier == "external":
        raise ConfigError(
            "no external zero-shot tissue classifier is bundled; plug a "
            "TissueClassifier into run_failure_analysis or use --classifier stub"
        )
    payload = read_checkpoint(ckpt_path)
    cfg = RunConfig.from_dict(payload["config"]).validate()
    clf = stub_classifier(list(cfg.failure.tissue_labels), cfg.failure.classifier_side)
    summary = run_failure_analysis(ckpt_path, manifest_path, out_dir, classifier=clf, split=split)
    out = Path(out_dir)
    plot_failure_bars(summary["per_tissue"], out / "failure_bars.png")
    _write_provenance(
        out,
        "stratify-failures",
        {"ckpt": ckpt_path, "manifest": manifest_path, "classifier": classifier},
        ["records.jsonl", "stratified.json", "stratified.txt", "failure_bars.png", "worst_cases/"],
        cfg.seed,
    )
    click.echo((out / "stratified.txt").read_text())
    if summary["predictor_auc"] is not None:
        click.echo(f"failure-predictor AUC (held out): {summary['predictor_auc']:.3f}")


@main.command("export-grids")
@click.option(
    "--dir",
    "dirs",
    multiple=True,
    required=True,
    help="Column source as label=path; repeat in column order.",
)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--manifest", "manifest_path", type=click.Path(), default=None,
              help="Orders rows and supplies stain row labels by source_id prefix.")
@click.pass_context
@_handled
def export_grids_cmd(ctx, dirs, out_path, manifest_path):
    """Row-per-sample, column-per-source comparison grid."""
    parsed = []
    for spec in dirs:
        if "=" not in spec:
            raise ConfigError(f"--dir must be label=path, got {spec!r}")
        label, _, path = spec.partition("=")
        parsed.append((label, Path(path)))
    row_labels = None
    order = None
    if manifest_path:
        samples = load_manifest(manifest_path)
        order_map = {}
        row_labels = {}
        for s in samples:
            order_map[s.source_id] = len(order_map)
            row_labels[s.source_id] = s.stain
        order = order_map
    out = export_grids(parsed, out_path, order=order, row_labels=row_labels)
    _write_provenance(
        Path(out_path).parent,
        "export-grids",
        {"dirs": ";".join(dirs), "manifest": manifest_path},
        [Path(out_path).name],
        None,
    )
    click.echo(f"wrote {out}")


@main.command("plot-losses")
@click.option("--log", "log_path", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.pass_context
@_handled
def plot_losses(ctx, log_path, out_path):
    """Loss-curve panels from a training loss log."""
    out = plot_loss_curves(log_path, out_path)
    _write_provenance(Path(out_path).parent, "plot-losses", {"log": log_path}, [Path(out_path).name], None)
    click.echo(f"wrote {out}")


def export_grids(
    dirs: list[tuple[str, Path]],
    out_path: str | Path,
    order: dict[str, int] | None = None,
    row_labels: dict[str, str] | None = None,
    annotation_width: int = 72,
) -> Path:
    """Compose aligned images from several directories into one grid.

    Every directory must contain exactly the same PNG filenames; rows
    follow manifest order when given (matching on source_id prefixes),
    else sorted filenames. A left annotation strip carries the row label.
    """
    from PIL import Image, ImageDraw

    name_sets = []
    for label, path in dirs:
        if not path.is_dir():
            raise DataError(f"{label}: {path} is not a directory")
        name_sets.append({p.name for p in path.glob("*.png")})
    common = set.intersection(*name_sets)
    union = set.union(*name_sets)
    if union != common:
        diff = sorted(union - common)
        raise DataError(f"filename sets differ across directories: {diff}")
    if not common:
        raise DataError("no common images across the given directories")

    def _row_key(name: str):
        if order is not None:
            for source_id, pos in order.items():
                if name.startswith(source_id):
                    return (pos, name)
            return (len(order), name)
        return (0, name)

    names = sorted(common, key=_row_key)
    first = load_rgb(dirs[0][1] / names[0])
    tile_h, tile_w = first.shape[:2]
    width = annotation_width + len(dirs) * tile_w
    height = len(names) * tile_h
    canvas = Image.new("RGB", (width, height), (255, 255, 255))
    draw = ImageDraw.Draw(canvas)
    for row, name in enumerate(names):
        label = name
        if row_labels is not None:
            for source_id, stain in row_labels.items():
                if name.startswith(source_id):
                    label = stain
                    break
        draw.text((4, row * tile_h + 4), label[:16], fill=(0, 0, 0))
        for col, (_, path) in enumerate(dirs):
            img = load_rgb(path / name)
            if img.shape[:2] != (tile_h, tile_w):
                raise DataError(f"{name} in {path} has mismatched size")
            tile = Image.fromarray((np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8))
            canvas.paste(tile, (annotation_width + col * tile_w, row * tile_h))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(out_path, format="PNG")
    return out_path


if __name__ == "__main__":
    main()
