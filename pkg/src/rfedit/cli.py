"""Command-line interface.

Every command reads an optional JSON config plus flag overrides, writes a run
directory, and exits nonzero on error: 1 for runtime/editing failures, 2 for
usage errors (click), 3 for a missing or unreadable checkpoint, 4 for a
malformed config.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import sys
from pathlib import Path

import click

from .data import generate_dataset, dataset_hash
from .errors import CheckpointError, ConfigError, RFEditError
from .experiments import (ablation_jobs, aggregate_report, format_table,
                          make_color_edit_cases, run_edit_case, run_grid,
                          summarize, sweep_jobs)
from .mask import load_mask_png
from .metrics import psnr, ssim
from .model import ModelConfig, ToyMMDiT, load_checkpoint, save_checkpoint
from .pipeline import EditConfig, edit, reconstruct
from .runio import (load_image_png, save_image_png, sha256_file, write_json,
                    write_run_dir)
from .train import TrainConfig, train_toy

EXIT_RUNTIME = 1
EXIT_MISSING_CHECKPOINT = 3
EXIT_BAD_CONFIG = 4


def _guarded(f):
    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except CheckpointError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_MISSING_CHECKPOINT)
        except ConfigError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_BAD_CONFIG)
        except RFEditError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_RUNTIME)
    return wrapper


def _load_model(checkpoint: str) -> ToyMMDiT:
    path = Path(checkpoint)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    model, _ = load_checkpoint(path)
    return model


def parse_steps(spec: str):
    """'all' -> None; '0-3,9' -> (0, 1, 2, 3, 9)."""
    spec = spec.strip()
    if spec.lower() == "all":
        return None
    steps = []
    for token in spec.split(","):
        token = token.strip()
        if "-" in token:
            lo, hi = token.split("-", 1)
            steps.extend(range(int(lo), int(hi) + 1))
        elif token:
            steps.append(int(token))
    if not steps:
        raise ConfigError(f"cannot parse step spec {spec!r}")
    return tuple(steps)


def _build_config(config_path, **overrides) -> EditConfig:
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        base = EditConfig.from_json(path.read_text())
    else:
        base = EditConfig()
    fields = {k: v for k, v in overrides.items() if v is not None}
    if "inject_steps" in fields:
        fields["inject_steps"] = parse_steps(fields["inject_steps"])
    return dataclasses.replace(base, **fields) if fields else base


def _config_options(f):
    opts = [
        click.option("--config", "config_path", type=str, default=None,
                     help="JSON config file; flags override its values."),
        click.option("--steps", "num_steps", type=int, default=None),
        click.option("--delta", type=float, default=None),
        click.option("--beta", type=float, default=None),
        click.option("--attn-mode", type=str, default=None),
        click.option("--inject-steps", type=str, default=None,
                     help="'all' or e.g. '0-7,10'"),
        click.option("--solver", type=str, default=None),
        click.option("--noise-seed", type=int, default=None),
        click.option("--mask-k", type=float, default=None),
        click.option("--mask-dilation", type=int, default=None),
        click.option("--kvmix/--no-kvmix", "kvmix_on", default=None),
        click.option("--latents-shift/--no-latents-shift", "latents_shift_on", default=None),
        click.option("--baseline-mode", type=str, default=None),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


@click.group()
def main():
    """Training-free editing toolkit for a toy rectified-flow model."""


@main.command("gen-data")
@click.option("--n", default=64, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=str)
@_guarded
def gen_data(n, seed, out):
    """Generate the captioned-shapes dataset and write a PNG preview."""
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    samples = generate_dataset(n, seed)
    captions = []
    for i, s in enumerate(samples):
        save_image_png(s.image, out / "images" / f"{i:05d}.png")
        captions.append(s.caption)
    write_json(out / "meta.json", {"n": n, "seed": seed, "hash": dataset_hash(samples),
                                   "captions": captions})
    click.echo(f"wrote {n} samples to {out} (hash {dataset_hash(samples)})")


@main.command("train")
@click.option("--out", required=True, type=str, help="Checkpoint output path.")
@click.option("--steps", default=4000, show_default=True)
@click.option("--batch-size", default=32, show_default=True)
@click.option("--lr", default=2e-3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--data-n", default=2048, show_default=True)
@click.option("--data-seed", default=7, show_default=True)
@click.option("--run-dir", type=str, default=None, help="Where to write the loss curve.")
@_guarded
def train(out, steps, batch_size, lr, seed, data_n, data_seed, run_dir):
    """Train the toy velocity model and save a checkpoint."""
    dataset = generate_dataset(data_n, data_seed)
    cfg = TrainConfig(steps=steps, batch_size=batch_size, lr=lr, seed=seed)
    model, history, manifest = train_toy(ModelConfig(), dataset, cfg, log=click.echo)
    manifest["data_seed"] = data_seed
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out, manifest)
    if run_dir is not None:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        write_json(Path(run_dir) / "loss_curve.json",
                   {"steps": [s for s, _ in history], "loss": [l for _, l in history]})
    click.echo(f"saved checkpoint to {out} ({model.parameter_count():,} parameters, "
               f"hash {sha256_file(out)})")


@main.command("reconstruct")
@click.option("--checkpoint", required=True, type=str)
@click.option("--image", "image_path", required=True, type=click.Path(exists=True))
@click.option("--prompt", required=True, type=str)
@click.option("--out", required=True, type=str)
@_config_options
@_guarded
def reconstruct_cmd(checkpoint, image_path, prompt, out, config_path, **overrides):
    """Invert and re-sample with the same prompt; reports fidelity."""
    model = _load_model(checkpoint)
    config = _build_config(config_path, **overrides)
    image = load_image_png(image_path)
    recon = reconstruct(model, image, prompt, config)
    metrics = {"psnr_db": psnr(recon, image), "ssim": ssim(recon, image)}
    write_run_dir(out, config,
                  manifest={"command": "reconstruct", "prompt": prompt,
                            "image": str(image_path),
                            "checkpoint_hash": sha256_file(checkpoint),
                            "seeds": {"noise": config.noise_seed, "model": config.model_seed}},
                  images={"source": image, "reconstructed": recon},
                  patch_size=model.config.patch_size, metrics=metrics)
    click.echo(f"reconstruction PSNR {metrics['psnr_db']:.2f} dB, "
               f"SSIM {metrics['ssim']:.4f} -> {out}")


@main.command("edit")
@click.option("--checkpoint", required=True, type=str)
@click.option("--image", "image_path", required=True, type=click.Path(exists=True))
@click.option("--source", required=True, type=str, help="Source prompt.")
@click.option("--target", required=True, type=str, help="Target prompt.")
@click.option("--mask", "mask_path", type=click.Path(exists=True), default=None,
              help="Override mask PNG (patch or pixel resolution).")
@click.option("--out", required=True, type=str)
@_config_options
@_guarded
def edit_cmd(checkpoint, image_path, source, target, mask_path, out, config_path, **overrides):
    """Edit an image from a source prompt to a target prompt."""
    model = _load_model(checkpoint)
    config = _build_config(config_path, **overrides)
    image = load_image_png(image_path)
    gs = model.config.grid_size
    override = load_mask_png(mask_path, (gs, gs)) if mask_path else None
    result = edit(model, image, source, target, config, mask_override=override)
    metrics = {"psnr_db": psnr(result.edited, image), "ssim": ssim(result.edited, image)}
    write_run_dir(out, config,
                  manifest={"command": "edit", "source": source, "target": target,
                            "image": str(image_path),
                            "checkpoint_hash": sha256_file(checkpoint),
                            "seeds": {"noise": config.noise_seed, "model": config.model_seed},
                            "timing": result.timing},
                  images={"source": image, "edited": result.edited},
                  mask=result.mask, patch_size=model.config.patch_size,
                  metrics=metrics,
                  diagnostics={"velocity_norms": result.velocity_norms})
    click.echo(f"edited image written to {out} (whole-image PSNR {metrics['psnr_db']:.2f} dB)")


@main.command("ablate")
@click.option("--checkpoint", required=True, type=str)
@click.option("--out", required=True, type=str)
@click.option("--cases", "n_cases", default=8, show_default=True)
@click.option("--data-n", default=256, show_default=True)
@click.option("--data-seed", default=7, show_default=True)
@click.option("--case-seed", default=11, show_default=True)
@click.option("--workers", default=1, show_default=True)
@_config_options
@_guarded
def ablate_cmd(checkpoint, out, n_cases, data_n, data_seed, case_seed, workers,
               config_path, **overrides):
    """Run the module ablation grid: none, KV-mix, Latents-Shift, both."""
    model = _load_model(checkpoint)  # validates early; workers reload themselves
    base = _build_config(config_path, **overrides)
    cases = make_color_edit_cases(generate_dataset(data_n, data_seed), n_cases, case_seed)
    jobs = ablation_jobs(cases, base, out_dir=out, checkpoint_hash=sha256_file(checkpoint))
    rows = run_grid(checkpoint, jobs, workers=workers)
    table = summarize(rows)
    write_json(Path(out) / "summary.json", {"rows": table})
    click.echo(format_table(table))
    del model


@main.command("sweep")
@click.option("--checkpoint", required=True, type=str)
@click.option("--out", required=True, type=str)
@click.option("--modes", default="V,QV,QKV,KV", show_default=True)
@click.option("--inject-steps", "step_specs", default="all", show_default=True,
              help="Semicolon-separated step specs, e.g. 'all;0-7'.")
@click.option("--cases", "n_cases", default=8, show_default=True)
@click.option("--data-n", default=256, show_default=True)
@click.option("--data-seed", default=7, show_default=True)
@click.option("--case-seed", default=11, show_default=True)
@click.option("--workers", default=1, show_default=True)
@click.option("--config", "config_path", type=str, default=None)
@_guarded
def sweep_cmd(checkpoint, out, modes, step_specs, n_cases, data_n, data_seed,
              case_seed, workers, config_path):
    """Sweep attention-combination modes and injection-step schedules."""
    _load_model(checkpoint)
    base = _build_config(config_path)
    mode_list = [m.strip() for m in modes.split(",") if m.strip()]
    specs = [parse_steps(s) for s in step_specs.split(";") if s.strip()]
    cases = make_color_edit_cases(generate_dataset(data_n, data_seed), n_cases, case_seed)
    jobs = sweep_jobs(cases, base, mode_list, specs, out_dir=out,
                      checkpoint_hash=sha256_file(checkpoint))
    rows = run_grid(checkpoint, jobs, workers=workers)
    table = summarize(rows)
    write_json(Path(out) / "summary.json", {"rows": table})
    click.echo(format_table(table))


@main.command("report")
@click.argument("roots", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--allow-mixed-checkpoints", is_flag=True, default=False)
@_guarded
def report_cmd(roots, allow_mixed_checkpoints):
    """Aggregate metrics across run directories into a comparison table."""
    run_dirs = []
    for root in roots:
        root = Path(root)
        if (root / "metrics.json").exists():
            run_dirs.append(root)
        run_dirs.extend(sorted(p.parent for p in root.rglob("metrics.json")))
    try:
        rows = aggregate_report(run_dirs, allow_mixed_checkpoints=allow_mixed_checkpoints)
    except ValueError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_RUNTIME)
    if not rows:
        click.echo("no completed runs found", err=True)
        sys.exit(EXIT_RUNTIME)
    click.echo(format_table(summarize(
        [{**r, "label": r["label"]} for r in rows])))


if __name__ == "__main__":
    main()
