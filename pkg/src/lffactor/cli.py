"""Command line entry point: gen | solve | train | infer | eval | bench.

Flag precedence is defaults < --config JSON file < explicit flags; the
fully resolved configuration is echoed to run_config.json in the output
directory. All randomness flows from --seed. Exit codes: 0 success, 1
validation error, 2 runtime error.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from .data import (DatasetManifest, generate_dataset, read_dataset, write_dataset,
                   write_pfm, write_png)
from .lightfield import ADDITIVE, DisplayGeometry, LayerStack, LightField, reconstruct
from .networks import (Checkpoint, NetworkSpec, forward_infer, load_checkpoint,
                       save_checkpoint)
from .solvers import SolveConfig, export_trace, solve_additive, solve_multiplicative
from .training import (TrainConfig, bench_compare, evaluate_psnr, train,
                       write_bench_csv)

DEFAULT_GEOMETRY = dict(layer_depths=[-5.0, 0.0, 5.0], pixel_pitch=0.1,
                        span_u=10.0, span_v=10.0, views_u=5, views_v=5,
                        mode=ADDITIVE)


class CliError(click.ClickException):
    exit_code = 1


def _load_config(config_path):
    if config_path is None:
        return {}
    try:
        return json.loads(Path(config_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise CliError(f"cannot read config file: {e}")


def _resolve(ctx, config_file, **flags):
    """defaults < config file < explicitly passed flags."""
    merged = dict(flags)
    file_values = _load_config(config_file)
    for key, value in file_values.items():
        if key in merged and ctx.get_parameter_source(key).name != "COMMANDLINE":
            merged[key] = value
    return merged


def _geometry(geometry_file, mode=None):
    if geometry_file is None:
        d = dict(DEFAULT_GEOMETRY)
    else:
        try:
            d = json.loads(Path(geometry_file).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise CliError(f"cannot read geometry file: {e}")
    if mode is not None:
        d["mode"] = mode
    try:
        return DisplayGeometry.from_dict(d)
    except (KeyError, ValueError, TypeError) as e:
        raise CliError(f"invalid geometry: {e}")


def _echo_run_config(out_dir, resolved):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(
        json.dumps(resolved, indent=2, default=str), encoding="utf-8")


def _read_lf(path):
    """Load a single light field: a dataset dir's first sample."""
    try:
        manifest, samples = read_dataset(path)
    except (OSError, ValueError) as e:
        raise CliError(f"cannot load light field from {path}: {e}")
    if not samples:
        raise CliError(f"{path} contains no samples")
    return manifest, samples[0]


def _write_layers(stack, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, layer in enumerate(stack.layers):
        write_png(layer, out_dir / f"layer_{i}.png")
        write_pfm(layer, out_dir / f"layer_{i}.pfm")


def _read_layers(path, num_layers, mode):
    from .data import read_pfm
    layers = []
    for i in range(num_layers):
        p = Path(path) / f"layer_{i}.pfm"
        if not p.exists():
            raise CliError(f"missing layer file {p}")
        layers.append(read_pfm(p))
    return LayerStack(np.stack(layers), mode=mode)


@click.group()
def main():
    """Layer-image synthesis for compressive multi-layer light field displays."""


@main.command()
@click.option("--seed", default=0, show_default=True, help="Master random seed.")
@click.option("--scenes", default=20, show_default=True, help="Number of train scenes.")
@click.option("--test-scenes", default=1, show_default=True,
              help="Held-out full-frame test scenes.")
@click.option("--planes", default=3, show_default=True, help="Planes per scene.")
@click.option("--geometry", "geometry_file", type=click.Path(exists=True),
              default=None, help="Display geometry JSON (default: built-in desk scale).")
@click.option("--crop", default=64, show_default=True, help="Training patch size.")
@click.option("--crops-per-scale", default=1, show_default=True)
@click.option("--scales", default="1.0,0.75,0.5,0.25", show_default=True,
              help="Comma-separated intensity scales.")
@click.option("--scene-size", default=96, show_default=True,
              help="Scene texture side length.")
@click.option("--config", "config_file", type=click.Path(exists=True), default=None,
              help="JSON config file (flags override it).")
@click.option("--threads", default=0, show_default=True,
              help="Worker cap; 0 = machine parallelism. Results are identical for any value.")
@click.option("--out", required=True, type=click.Path(), help="Output directory.")
@click.pass_context
def gen(ctx, seed, scenes, test_scenes, planes, geometry_file, crop, crops_per_scale,
        scales, scene_size, config_file, threads, out):
    """Generate a procedural train/test dataset."""
    resolved = _resolve(ctx, config_file, seed=seed, scenes=scenes,
                        test_scenes=test_scenes, planes=planes,
                        geometry=geometry_file, crop=crop,
                        crops_per_scale=crops_per_scale, scales=scales,
                        scene_size=scene_size, threads=threads, out=out)
    geom = _geometry(resolved["geometry"])
    try:
        scale_list = tuple(float(s) for s in str(resolved["scales"]).split(","))
    except ValueError:
        raise CliError(f"bad --scales value {resolved['scales']!r}")
    _echo_run_config(out, {"command": "gen", **resolved,
                           "geometry_resolved": geom.to_dict()})
    size = (int(resolved["scene_size"]),) * 2
    manifest, patches = generate_dataset(
        geom, int(resolved["scenes"]), int(resolved["seed"]),
        crop_size=int(resolved["crop"]),
        crops_per_scale=int(resolved["crops_per_scale"]),
        scales=scale_list, num_planes=int(resolved["planes"]), scene_size=size)
    write_dataset(manifest, patches, Path(out) / "train")
    test_manifest, test_lfs = generate_dataset(
        geom, int(resolved["test_scenes"]), int(resolved["seed"]) + 1,
        crop_size=size[0], crops_per_scale=1, scales=(1.0,),
        num_planes=int(resolved["planes"]), scene_size=size, split="test")
    write_dataset(test_manifest, test_lfs, Path(out) / "test")
    click.echo(f"wrote {len(patches)} train patches and {len(test_lfs)} "
               f"test light fields to {out}")


@main.command()
@click.option("--mode", type=click.Choice([ADDITIVE, "multiplicative"]),
              default=ADDITIVE, show_default=True)
@click.option("--iters", default=100, show_default=True)
@click.option("--omega", default=1.0, show_default=True, help="Relaxation in (0,2].")
@click.option("--trace-every", default=1, show_default=True)
@click.option("--lf", "lf_dir", required=True, type=click.Path(exists=True),
              help="Dataset directory holding the target light field.")
@click.option("--geometry", "geometry_file", type=click.Path(exists=True), default=None)
@click.option("--config", "config_file", type=click.Path(exists=True), default=None)
@click.option("--threads", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.pass_context
def solve(ctx, mode, iters, omega, trace_every, lf_dir, geometry_file, config_file,
          threads, out):
    """Decompose a target light field iteratively; write layers and a trace."""
    resolved = _resolve(ctx, config_file, mode=mode, iters=iters, omega=omega,
                        trace_every=trace_every, lf=lf_dir, geometry=geometry_file,
                        threads=threads, out=out)
    manifest, target = _read_lf(resolved["lf"])
    geom = (_geometry(resolved["geometry"], mode=resolved["mode"])
            if resolved["geometry"] else
            DisplayGeometry.from_dict({**manifest.geometry.to_dict(),
                                       "mode": resolved["mode"]}))
    try:
        cfg = SolveConfig(iterations=int(resolved["iters"]),
                          omega=float(resolved["omega"]),
                          trace_every=int(resolved["trace_every"]))
    except ValueError as e:
        raise CliError(str(e))
    _echo_run_config(out, {"command": "solve", **resolved,
                           "geometry_resolved": geom.to_dict()})
    solver = solve_additive if geom.mode == ADDITIVE else solve_multiplicative
    stack, trace = solver(target, geom, cfg)
    _write_layers(stack, out)
    export_trace(trace, Path(out) / "trace.csv")
    click.echo(f"final PSNR {trace.records[-1][2]:.2f} dB after "
               f"{cfg.iterations} iterations")


@main.command(name="train")
@click.option("--arch", type=click.Choice(["unet", "stacked"]), default="unet",
              show_default=True)
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True),
              help="Dataset root with train/ and test/ subdirectories.")
@click.option("--epochs", default=100, show_default=True)
@click.option("--batch", default=15, show_default=True)
@click.option("--lr", default=1e-4, show_default=True)
@click.option("--lambda-reg", default=0.01, show_default=True)
@click.option("--base-channels", default=64, show_default=True)
@click.option("--unet-depth", default=4, show_default=True)
@click.option("--stacked-modules", default=19, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--config", "config_file", type=click.Path(exists=True), default=None)
@click.option("--threads", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.pass_context
def train_cmd(ctx, arch, data_dir, epochs, batch, lr, lambda_reg, base_channels,
              unet_depth, stacked_modules, seed, config_file, threads, out):
    """Train a network on a generated dataset; write the best checkpoint."""
    resolved = _resolve(ctx, config_file, arch=arch, data=data_dir, epochs=epochs,
                        batch=batch, lr=lr, lambda_reg=lambda_reg,
                        base_channels=base_channels, unet_depth=unet_depth,
                        stacked_modules=stacked_modules, seed=seed,
                        threads=threads, out=out)
    root = Path(resolved["data"])
    try:
        manifest, patches = read_dataset(root / "train")
        _, test_lfs = read_dataset(root / "test")
    except (OSError, ValueError, FileNotFoundError) as e:
        raise CliError(f"cannot load dataset: {e}")
    if not test_lfs:
        raise CliError("dataset has no test light field")
    geom = manifest.geometry
    spec = NetworkSpec(arch=resolved["arch"], in_channels=geom.num_views,
                       out_channels=geom.num_layers,
                       base_channels=int(resolved["base_channels"]),
                       stacked_modules=int(resolved["stacked_modules"]),
                       unet_depth=int(resolved["unet_depth"]),
                       seed=int(resolved["seed"]))
    try:
        cfg = TrainConfig(epochs=int(resolved["epochs"]),
                          batch_size=int(resolved["batch"]),
                          lr=float(resolved["lr"]),
                          lambda_reg=float(resolved["lambda_reg"]),
                          seed=int(resolved["seed"]))
    except ValueError as e:
        raise CliError(str(e))
    _echo_run_config(out, {"command": "train", **resolved,
                           "geometry_resolved": geom.to_dict()})
    ckpt, report = train(patches, test_lfs[0], geom, spec, cfg)
    save_checkpoint(ckpt, Path(out) / "checkpoint")
    report.write_csv(Path(out) / "report.csv")
    click.echo(f"best test PSNR {report.best_test_psnr:.2f} dB "
               f"at epoch {report.best_epoch}")


@main.command()
@click.option("--ckpt", "ckpt_dir", required=True, type=click.Path(exists=True))
@click.option("--lf", "lf_dir", required=True, type=click.Path(exists=True))
@click.option("--clamp/--no-clamp", default=True, show_default=True)
@click.option("--config", "config_file", type=click.Path(exists=True), default=None)
@click.option("--threads", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.pass_context
def infer(ctx, ckpt_dir, lf_dir, clamp, config_file, threads, out):
    """Synthesize display layers from a light field with a trained network."""
    resolved = _resolve(ctx, config_file, ckpt=ckpt_dir, lf=lf_dir, clamp=clamp,
                        threads=threads, out=out)
    try:
        ckpt = load_checkpoint(resolved["ckpt"])
    except (OSError, ValueError) as e:
        raise CliError(f"cannot load checkpoint: {e}")
    manifest, target = _read_lf(resolved["lf"])
    _echo_run_config(out, {"command": "infer", **resolved})
    stack = forward_infer(ckpt.network(), target, clamp=bool(resolved["clamp"]),
                          mode=manifest.geometry.mode)
    _write_layers(stack, out)
    click.echo(f"wrote {stack.layers.shape[0]} layers to {out}")


@main.command(name="eval")
@click.option("--lf", "lf_dir", required=True, type=click.Path(exists=True))
@click.option("--layers", "layers_dir", required=True, type=click.Path(exists=True))
@click.option("--geometry", "geometry_file", type=click.Path(exists=True), default=None)
@click.option("--crop-border", default=-1, show_default=True,
              help="Border pixels excluded from PSNR; -1 = ceil(max shift).")
@click.option("--config", "config_file", type=click.Path(exists=True), default=None)
@click.option("--report", "report_path", required=True, type=click.Path())
@click.pass_context
def eval_cmd(ctx, lf_dir, layers_dir, geometry_file, crop_border, config_file,
             report_path):
    """Reconstruct stored layers and report PSNR/uniformity against a target."""
    from .solvers import _crop  # same border policy as solver traces
    from .training import layer_uniformity
    resolved = _resolve(ctx, config_file, lf=lf_dir, layers=layers_dir,
                        geometry=geometry_file, crop_border=crop_border,
                        report=report_path)
    manifest, target = _read_lf(resolved["lf"])
    geom = (_geometry(resolved["geometry"]) if resolved["geometry"]
            else manifest.geometry)
    stack = _read_layers(resolved["layers"], geom.num_layers, geom.mode)
    border = int(resolved["crop_border"])
    if border < 0:
        border = _crop(geom, SolveConfig(), target.views.shape[-2:])
    recon = reconstruct(stack, geom)
    psnr = evaluate_psnr(recon, target, border)
    means, cv = layer_uniformity(stack)
    with open(resolved["report"], "w", encoding="utf-8") as f:
        f.write("metric,value\n")
        f.write(f"psnr_db,{psnr:.6g}\n")
        f.write(f"uniformity_cv,{cv:.6g}\n")
        for i, m in enumerate(means):
            f.write(f"layer_mean_{i},{m:.6g}\n")
    click.echo(f"PSNR {psnr:.2f} dB, uniformity CV {cv:.4f}")


@main.command()
@click.option("--ckpt", "ckpt_dir", required=True, type=click.Path(exists=True))
@click.option("--lf", "lf_dir", required=True, type=click.Path(exists=True))
@click.option("--iters", default="20,50,100", show_default=True,
              help="Comma-separated solver iteration counts.")
@click.option("--config", "config_file", type=click.Path(exists=True), default=None)
@click.option("--threads", default=0, show_default=True)
@click.option("--report", "report_path", required=True, type=click.Path())
@click.pass_context
def bench(ctx, ckpt_dir, lf_dir, iters, config_file, threads, report_path):
    """Time network inference against iterative solves; write a CSV table."""
    resolved = _resolve(ctx, config_file, ckpt=ckpt_dir, lf=lf_dir, iters=iters,
                        threads=threads, report=report_path)
    try:
        ckpt = load_checkpoint(resolved["ckpt"])
    except (OSError, ValueError) as e:
        raise CliError(f"cannot load checkpoint: {e}")
    manifest, target = _read_lf(resolved["lf"])
    try:
        iter_list = tuple(int(s) for s in str(resolved["iters"]).split(","))
    except ValueError:
        raise CliError(f"bad --iters value {resolved['iters']!r}")
    rows = bench_compare(target, manifest.geometry, ckpt, iters=iter_list)
    write_bench_csv(rows, resolved["report"])
    for method, n_it, psnr, ms in rows:
        click.echo(f"{method:10s} iters={n_it:<4d} {psnr:6.2f} dB  {ms:8.1f} ms")


def run(argv=None):
    """Programmatic entry point returning the exit code (0/1/2)."""
    try:
        main.main(args=argv, standalone_mode=False)
        return 0
    except click.ClickException as e:
        e.show()
        return 1  # validation / usage error
    except click.exceptions.Abort:
        return 1
    except SystemExit as e:
        return int(e.code or 0)
    except Exception as e:
        click.echo(f"error: {e}", err=True)
        return 2


def cli_main():
    sys.exit(run())


if __name__ == "__main__":
    cli_main()
