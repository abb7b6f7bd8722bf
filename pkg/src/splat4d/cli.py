"""Command-line pipeline: synth -> fit-static -> fit-4d -> render -> eval, plus export and info.

Every command writes into ``--out`` and echoes its effective configuration to
``config.resolved``; all but ``synth`` also record stage wall-clock in
``timing.csv`` (synth output must stay byte-identical per seed). Errors
print one line ``error[<code>]: <message>`` to stderr and exit with 2 (usage),
3 (format/schema), 4 (numeric) or 5 (io).
"""

from __future__ import annotations

import csv
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import click
import numpy as np

from . import io as sio
from .camera import CameraIntrinsics, matrix_rig
from .config import RunConfig, load_config, stage_seed, write_resolved
from .deformation import deform, fit_dynamic
from .errors import InvalidArgumentError, Splat4dError, StorageError
from .image_matrix import ImageMatrix, load_matrix, save_matrix, synthesize_matrix
from .metrics import SEQUENCE_MODES, cosine_similarity, fvd_score, psnr, sequence_indices
from .rasterizer import render
from .scene import PRESETS, evaluate_scene, make_preset
from .static_fit import fit_static


LOSS_HEADER = ["step", "loss", "psnr", "gaussian_count", "wall_ms"]
METRICS_HEADER = ["metric", "mode", "value", "frames"]


class Timer:
    def __init__(self):
        self.rows: list[tuple[str, float]] = []

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        yield
        self.rows.append((name, (time.perf_counter() - start) * 1000.0))

    def write(self, out_dir: Path) -> None:
        _write_csv(out_dir / "timing.csv", ["stage", "wall_ms"], [(n, f"{ms:.3f}") for n, ms in self.rows])


def _write_csv(path: Path, header, rows) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc.strerror or exc}") from None


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def _out_dir(ctx) -> Path:
    out = Path(ctx.obj["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create output directory {out}: {exc.strerror or exc}") from None
    return out


def _config(ctx, **extra) -> RunConfig:
    overrides = dict(ctx.obj["overrides"])
    overrides.update({k: v for k, v in extra.items() if v is not None})
    if ctx.obj["seed"] is not None:
        overrides["run.seed"] = ctx.obj["seed"]
    if ctx.obj["threads"] is not None:
        overrides["run.threads"] = ctx.obj["threads"]
    return load_config(ctx.obj["config"], overrides)


def _loss_rows(log):
    return [(r.step, _fmt(r.loss), _fmt(r.psnr), r.gaussian_count, f"{r.wall_ms:.3f}") for r in log]


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="INI config file.")
@click.option("--seed", type=click.IntRange(0, 2**64 - 1), help="Root seed, split per stage.")
@click.option("--threads", type=click.IntRange(1, None), help="Worker cap; results do not depend on it.")
@click.option("--out", default="out", show_default=True, type=click.Path(file_okay=False),
              help="Output directory.")
@click.option("--set", "sets", multiple=True, metavar="SECTION.KEY=VALUE", help="Config override.")
@click.pass_context
def cli(ctx, config_path, seed, threads, out, sets):
    """Multi-view image matrix to 4D Gaussian splatting pipeline."""
    overrides = {}
    for item in sets:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise click.BadParameter(f"expected SECTION.KEY=VALUE, got {item!r}", param_hint="--set")
        overrides[key.strip()] = value.strip()
    ctx.obj = {"config": config_path, "seed": seed, "threads": threads, "out": out, "overrides": overrides}


@cli.command()
@click.option("--preset", help=f"Scene preset: {', '.join(PRESETS)}.")
@click.option("--views", type=int, help="Views in the rig.")
@click.option("--times", type=int, help="Timestamps, evenly spaced over [0, 1].")
@click.pass_context
def synth(ctx, preset, views, times):
    """Synthesize an image matrix and ground-truth PLYs from a preset scene."""
    cfg = _config(ctx, **{"scene.preset": preset, "rig.views": views, "rig.times": times})
    out = _out_dir(ctx)
    write_resolved(cfg, out)
    seed = stage_seed(cfg.seed, "synth")
    # no timing.csv here: the same seed must reproduce the directory byte for byte
    spec = make_preset(cfg.scene.preset, cfg.scene.count, cfg.scene.extent, seed, cfg.scene.background)
    rig = matrix_rig(cfg.rig.views, cfg.rig.elevation, cfg.rig.radius)
    stamps = np.linspace(0.0, 1.0, cfg.rig.times) if cfg.rig.times > 1 else np.array([0.0])
    intr = CameraIntrinsics(cfg.rig.width, cfg.rig.height, cfg.rig.focal)
    matrix = synthesize_matrix(spec, rig, stamps, intr, seed=seed, noise_sigma=cfg.rig.noise,
                               threads=cfg.threads)
    save_matrix(matrix, out)
    gt = out / "gt"
    gt.mkdir(exist_ok=True)
    for i, t in enumerate(stamps):
        sio.save_ply(evaluate_scene(spec, float(t)), gt / f"t{i:03d}.ply")
    click.echo(f"wrote {matrix.num_views}x{matrix.num_times} matrix to {out}")


@cli.command("fit-static")
@click.argument("matrix_dir", type=click.Path())
@click.pass_context
def fit_static_cmd(ctx, matrix_dir):
    """Fit a static Gaussian cloud to the t=0 column of a matrix."""
    cfg = _config(ctx)
    out = _out_dir(ctx)
    write_resolved(cfg, out)
    timer = Timer()
    with timer.stage("load"):
        matrix = load_matrix(matrix_dir)
    with timer.stage("fit-static"):
        result = fit_static(matrix, cfg.static_config())
    with timer.stage("save"):
        sio.save_ply(result.cloud, out / "cloud.ply")
        sio.save_train_state(result.state, out / "state.bin")
        _write_csv(out / "loss.csv", LOSS_HEADER, _loss_rows(result.log))
    timer.write(out)
    last = result.log[-1] if result.log else None
    click.echo(f"static fit: {len(result.cloud)} Gaussians" + (f", psnr {last.psnr:.2f} dB" if last else ""))


@cli.command("fit-4d")
@click.argument("matrix_dir", type=click.Path())
@click.argument("cloud_ply", type=click.Path())
@click.pass_context
def fit_4d_cmd(ctx, matrix_dir, cloud_ply):
    """Train a deformation field against every cell of a matrix."""
    cfg = _config(ctx)
    out = _out_dir(ctx)
    write_resolved(cfg, out)
    timer = Timer()
    with timer.stage("load"):
        matrix = load_matrix(matrix_dir)
        cloud = sio.load_ply(cloud_ply)
    with timer.stage("fit-4d"):
        result = fit_dynamic(cloud, matrix, cfg.dynamic_config())
    with timer.stage("save"):
        sio.save_field(result.field, out / "field.bin")
        if cfg.dynamic.train_canonical:
            sio.save_ply(result.canonical, out / "canonical.ply")
        _write_csv(out / "loss.csv", LOSS_HEADER, _loss_rows(result.log))
    timer.write(out)
    last = result.log[-1] if result.log else None
    click.echo("dynamic fit done" + (f", batch psnr {last.psnr:.2f} dB" if last else ""))


def _target_layout(cfg: RunConfig, matrix_dir):
    if matrix_dir is not None:
        ref = load_matrix(matrix_dir)
        return ref.views, ref.times, ref.intrinsics, ref.background
    rig = matrix_rig(cfg.rig.views, cfg.rig.elevation, cfg.rig.radius)
    stamps = np.linspace(0.0, 1.0, cfg.rig.times) if cfg.rig.times > 1 else np.array([0.0])
    return tuple(rig), stamps, CameraIntrinsics(cfg.rig.width, cfg.rig.height, cfg.rig.focal), \
        tuple(cfg.scene.background)


@cli.command("render")
@click.argument("cloud_ply", type=click.Path())
@click.option("--field", "field_path", type=click.Path(), help="Deformation-field checkpoint.")
@click.option("--matrix", "matrix_dir", type=click.Path(),
              help="Take poses, times and intrinsics from this matrix (default: the config rig).")
@click.pass_context
def render_cmd(ctx, cloud_ply, field_path, matrix_dir):
    """Render a cloud (optionally deformed over time) into a matrix directory of numbered PNGs."""
    cfg = _config(ctx)
    out = _out_dir(ctx)
    write_resolved(cfg, out)
    timer = Timer()
    with timer.stage("load"):
        cloud = sio.load_ply(cloud_ply)
        field_ = sio.load_field(field_path) if field_path else None
        views, stamps, intr, bg = _target_layout(cfg, matrix_dir)
    with timer.stage("render"):
        cells = np.empty((len(views), len(stamps), intr.height, intr.width, 3))
        for t_idx, t in enumerate(stamps):
            frame_cloud = deform(field_, cloud, float(t)) if field_ is not None else cloud
            for v_idx, pose in enumerate(views):
                cells[v_idx, t_idx] = render(frame_cloud, pose, intr, np.asarray(bg), threads=cfg.threads).image
        save_matrix(ImageMatrix(tuple(views), stamps, cells, intr, tuple(bg)), out)
    timer.write(out)
    click.echo(f"rendered {len(views)}x{len(stamps)} cells to {out}")


@cli.command("eval")
@click.argument("generated_dir", type=click.Path())
@click.argument("reference_dir", type=click.Path())
@click.pass_context
def eval_cmd(ctx, generated_dir, reference_dir):
    """Compare two matrices: PSNR and cosine per cell, Frechet scores in every sequence mode."""
    cfg = _config(ctx)
    out = _out_dir(ctx)
    write_resolved(cfg, out)
    timer = Timer()
    with timer.stage("load"):
        gen = load_matrix(generated_dir)
        ref = load_matrix(reference_dir)
        if gen.cells.shape != ref.cells.shape:
            raise InvalidArgumentError(f"generated matrix shape {gen.cells.shape[:3]} differs from "
                                       f"reference {ref.cells.shape[:3]}")
    rows = []
    with timer.stage("eval"):
        for metric, fn in (("psnr", psnr), ("cosine", cosine_similarity)):
            values = []
            for v, t in ref.cell_indices():
                value = fn(gen.cells[v, t], ref.cells[v, t])
                values.append(value)
                rows.append((metric, f"v{v:03d}_t{t:03d}", _fmt(value), 1))
            rows.append((metric, "mean", _fmt(float(np.mean(values))), len(values)))
        for mode in SEQUENCE_MODES:
            frames = sum(len(s) for s in sequence_indices(ref.num_views, ref.num_times, mode))
            rows.append(("fd", mode, _fmt(fvd_score(gen, ref, mode)), frames))
    # wall-clock lives in timing.csv so this file stays byte-identical across runs
    _write_csv(out / "metrics.csv", METRICS_HEADER, rows)
    timer.write(out)
    means = {m: v for m, s, v, _ in rows if s == "mean"}
    click.echo(f"psnr {float(means['psnr']):.2f} dB, cosine {float(means['cosine']):.4f}")


@cli.command("export")
@click.argument("cloud_ply", type=click.Path())
@click.option("--field", "field_path", type=click.Path(), help="Deformation-field checkpoint.")
@click.option("--times", "times_spec", default="0", show_default=True,
              help="Comma-separated normalized times to export.")
@click.pass_context
def export_cmd(ctx, cloud_ply, field_path, times_spec):
    """Write the (deformed) cloud at each requested time as a splat PLY."""
    cfg = _config(ctx)
    out = _out_dir(ctx)
    write_resolved(cfg, out)
    try:
        stamps = [float(x) for x in times_spec.split(",")]
    except ValueError:
        raise InvalidArgumentError(f"bad --times {times_spec!r}") from None
    timer = Timer()
    with timer.stage("export"):
        cloud = sio.load_ply(cloud_ply)
        field_ = sio.load_field(field_path) if field_path else None
        for i, t in enumerate(stamps):
            frame = deform(field_, cloud, t) if field_ is not None else cloud
            sio.save_ply(frame, out / f"cloud_t{i:03d}.ply")
    timer.write(out)
    click.echo(f"exported {len(stamps)} PLY file(s) to {out}")


@cli.command("info")
@click.argument("path", type=click.Path())
def info_cmd(path):
    """Describe a PLY, checkpoint or matrix directory."""
    p = Path(path)
    if p.is_dir() or p.name == "manifest.json":
        m = load_matrix(p)
        intr = m.intrinsics
        click.echo(f"matrix: {m.num_views} views x {m.num_times} times, {intr.width}x{intr.height}, "
                   f"focal {intr.focal}")
        return
    head = sio.read_bytes(p)
    if head.startswith(sio.FIELD_MAGIC):
        f = sio.import_field(head)
        enc, dec = f.encoder, f.decoder
        heads = ",".join(n for n, on in dec.enabled.items() if on) or "none"
        click.echo(f"field: resolution {enc.base_resolution}, levels {enc.levels}, features {enc.features}, "
                   f"hidden {dec.hidden}, heads {heads}, extent {enc.extent:g}")
    elif head.startswith(sio.STATE_MAGIC):
        s = sio.import_train_state(head)
        click.echo(f"train state: step {s.step}, {len(s.cloud)} Gaussians")
    else:
        c = sio.import_ply(head)
        lo, hi = c.positions.min(axis=0), c.positions.max(axis=0)
        click.echo(f"cloud: {len(c)} Gaussians, bounds {np.round(lo, 4).tolist()} to {np.round(hi, 4).tolist()}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="splat4d", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("error[aborted]: interrupted", err=True)
        return 1
    except click.ClickException as exc:
        click.echo(f"error[usage]: {exc.format_message()}".replace("\n", " "), err=True)
        return 2
    except Splat4dError as exc:
        click.echo(f"error[{exc.code}]: {exc}".replace("\n", " "), err=True)
        return exc.exit_status
    except OSError as exc:
        click.echo(f"error[io]: {exc}".replace("\n", " "), err=True)
        return 5
    return 0


if __name__ == "__main__":
    sys.exit(main())
