"""Command-line interface: run, eval, mesh, render."""

from __future__ import annotations

import os
import sys

import click
import numpy as np

from . import report
from .config import RunConfig
from .errors import ConfigError, DeskSlamError
from .evaluation import ate_rmse, extract_mesh, mesh_to_ply, write_metrics_json
from .geometry import read_tum_trajectory
from .gs.model import rasterize
from .nerf.model import render_image
from .slam import load_checkpoint_map, run as run_pipeline


def _fail(msg: str) -> None:
    click.echo(f"error: {msg}", err=True)
    sys.exit(1)


@click.group()
def main():
    """Dense RGB-D SLAM with implicit-surface and Gaussian map backends."""


def _build_config(config_file, overrides, **kw) -> RunConfig:
    cfg = RunConfig.default()
    if config_file:
        cfg.update_from_file(config_file)
    for key, val in kw.items():
        if val is not None:
            cfg.set(key.replace("__", "."), val)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v.strip())
    return cfg


@main.command("run")
@click.option("--backend", type=click.Choice(["nerf", "gs"]), default=None)
@click.option("--dataset", default=None,
              help="synthetic:builtin, synthetic:<scene-file>, or tum:<dir>")
@click.option("--features", default=None, help="synthetic or files:<dir>")
@click.option("--frames", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", default=None)
@click.option("--deterministic/--no-deterministic", default=None)
@click.option("--config", "config_file", type=click.Path(exists=True),
              default=None, help="key=value config file")
@click.option("--set", "overrides", multiple=True,
              help="override any config key, e.g. --set nerf.window=4")
@click.option("--dump-config", is_flag=True,
              help="print the resolved configuration and exit")
@click.option("--quiet", is_flag=True)
def run_cmd(backend, dataset, features, frames, seed, out, deterministic,
            config_file, overrides, dump_config, quiet):
    """Run tracking + mapping end to end and write all artifacts."""
    try:
        cfg = _build_config(config_file, overrides, backend=backend,
                            dataset=dataset, features=features, frames=frames,
                            seed=seed, out=out, deterministic=deterministic)
    except (ConfigError, OSError) as e:
        _fail(str(e))
    if dump_config:
        click.echo(cfg.dump(), nl=False)
        return
    progress = None
    if not quiet:
        def progress(i, n):
            click.echo(f"frame {i + 1}/{n}", err=True)
    try:
        result = run_pipeline(cfg, progress=progress)
    except (ConfigError, DeskSlamError, OSError) as e:
        _fail(str(e))
    click.echo(report.metrics_table(result["metrics"]))
    click.echo(f"artifacts written to {cfg['out']}")


@main.command("eval")
@click.argument("est_trajectory", type=click.Path(exists=True))
@click.argument("gt_trajectory", type=click.Path(exists=True))
@click.option("--out", default=None, help="also write metrics.json + plot here")
def eval_cmd(est_trajectory, gt_trajectory, out):
    """Absolute trajectory error between two trajectory files."""
    try:
        est = read_tum_trajectory(est_trajectory)
        gt = read_tum_trajectory(gt_trajectory)
        ate = ate_rmse(est, gt)
    except (DeskSlamError, OSError, ValueError) as e:
        _fail(str(e))
    metrics = {"ate_rmse_cm": ate}
    click.echo(report.metrics_table(metrics))
    if out:
        os.makedirs(out, exist_ok=True)
        write_metrics_json(os.path.join(out, "metrics.json"), metrics)
        report.plot_trajectory(os.path.join(out, "trajectory.png"), est, gt)


@main.command("mesh")
@click.argument("checkpoint", type=click.Path(exists=True))
@click.argument("output_ply", type=click.Path())
@click.option("--voxel", type=float, default=0.02, show_default=True)
def mesh_cmd(checkpoint, output_ply, voxel):
    """Extract a triangle mesh from an implicit-map checkpoint."""
    try:
        m, _, backend = load_checkpoint_map(checkpoint)
        if backend != "nerf":
            _fail("mesh extraction needs an implicit-map (nerf) checkpoint")
        mesh = extract_mesh(m.sdf_numpy, m.geometry.bbox_lo,
                            m.geometry.bbox_hi, voxel)
        mesh_to_ply(output_ply, mesh)
    except (DeskSlamError, OSError, ValueError) as e:
        _fail(str(e))
    click.echo(f"{len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles"
               f" -> {output_ply}")


@main.command("render")
@click.argument("checkpoint", type=click.Path(exists=True))
@click.argument("trajectory", type=click.Path(exists=True))
@click.argument("outdir", type=click.Path())
@click.option("--every", type=int, default=1, show_default=True)
@click.option("--near", type=float, default=0.05)
@click.option("--far", type=float, default=8.0)
def render_cmd(checkpoint, trajectory, outdir, every, near, far):
    """Render color and depth images along a trajectory file."""
    import torch

    try:
        m, K, backend = load_checkpoint_map(checkpoint)
        traj = read_tum_trajectory(trajectory)
    except (DeskSlamError, OSError, ValueError) as e:
        _fail(str(e))
    os.makedirs(outdir, exist_ok=True)
    count = 0
    for i, (_, pose) in enumerate(traj):
        if i % max(1, every):
            continue
        if backend == "gs":
            with torch.no_grad():
                view = rasterize(m, pose, K)
            color = view["color"].numpy()
            depth = view["depth"].numpy()
        else:
            view = render_image(m, pose, K, near, far)
            color, depth = view["color"], view["depth"]
        report.save_image(os.path.join(outdir, f"render_{i:06d}.png"), color)
        report.save_image(os.path.join(outdir, f"depth_{i:06d}.png"),
                          np.asarray(depth))
        count += 1
    click.echo(f"rendered {count} views into {outdir}")


if __name__ == "__main__":
    main()
