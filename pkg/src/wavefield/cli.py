"""Command-line surface tying synthesis, training, reconstruction, baselines,
and evaluation into reproducible runs.

Every command resolves one configuration document (file plus ``--set``
overrides), writes its outputs into a target directory, and drops a
``manifest.json`` there recording the resolved config, its hash, seeds, and
library versions.  Exit codes: 0 success, 2 usage or configuration error,
1 runtime error.
"""
from __future__ import annotations

import functools
import json
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import click
import numpy as np
import scipy

from . import __version__, training
from .autodiff import NumericError
from .baselines import (
    build_spherical_dictionary,
    default_spherical_sources,
    dump_pw_coefficients,
    dump_td_coefficients,
    planewave_directions,
    pw_solve,
    reconstruct_baseline,
    td_sparse_solve,
    SparseSolverConfig,
)
from .config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    build_config,
    config_hash,
    derive_bounds,
    load_config,
    resolved_dict,
    subset_indices,
)
from .gridio import FieldGrid, export_grid_csv, read_grid, write_grid
from .metrics import (
    ReconReport,
    binned_distance_trend,
    distance_study,
    nmse_db,
    pearson,
    snapshot_metrics,
    write_report_csv,
)
from .network import NetField, init_siren, load_checkpoint, save_checkpoint
from .oracle import (
    GaussianPulse,
    GridRequest,
    PlaneWaveComponent,
    PlaneWavePulseSpec,
    RoomSpec,
    SourceSpec,
    particle_velocity,
    planewave_pulse_field,
    rir_grid,
)
from .training import load_train_checkpoint, save_train_checkpoint


@click.group()
@click.version_option(__version__, prog_name="wavefield")
def main():
    """Sound field reconstruction from sparse microphone measurements."""


def config_options(fn):
    fn = click.option("--config", "-c", "config_path",
                      type=click.Path(exists=True, dir_okay=False),
                      default=None, help="YAML or JSON run configuration.")(fn)
    fn = click.option("--set", "-s", "overrides", multiple=True,
                      metavar="KEY=VALUE",
                      help="Override a config key (dotted path, YAML value).")(fn)
    return fn


def run_guard(fn):
    """Map configuration problems to exit 2 and runtime failures to exit 1."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            raise click.UsageError(str(exc))
        except (ValueError, OSError, NumericError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)

    return wrapper


def _resolve(config_path, overrides):
    doc = load_config(config_path) if config_path else {}
    apply_overrides(doc, overrides)
    return doc, build_config(doc)


def _write_manifest(out_dir, command: str, cfg: RunConfig, extra: dict = None):
    doc = {
        "command": command,
        "config_hash": config_hash(cfg),
        "config": resolved_dict(cfg),
        "seeds": {"run": cfg.seed, "train": cfg.train.seed},
        "versions": {"package": __version__,
                     "python": platform.python_version(),
                     "numpy": np.__version__,
                     "scipy": scipy.__version__},
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    if extra:
        doc.update(extra)
    path = Path(out_dir) / "manifest.json"
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _out_dir(out) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _synthesize(cfg: RunConfig) -> FieldGrid:
    grid = cfg.grid
    if cfg.field.kind == "pulses":
        comps = [PlaneWaveComponent(p.theta,
                                    GaussianPulse(p.f_c, p.t_peak, p.sigma, p.phase),
                                    p.amplitude)
                 for p in cfg.field.pulses]
        request = GridRequest(grid.positions(), grid.fs, grid.duration,
                              grid.t0, grid.z)
        out, _ = planewave_pulse_field(PlaneWavePulseSpec(comps), cfg.medium, request)
        return out
    room_cfg = cfg.field.room
    room = RoomSpec(room_cfg.dimensions, room_cfg.beta_pairs(),
                    room_cfg.source, room_cfg.max_order)
    waveform = None
    if room_cfg.drive_f_c is not None:
        pulse = GaussianPulse(room_cfg.drive_f_c, room_cfg.drive_t_peak)
        waveform = pulse(grid.times() - grid.t0)
    if grid.t0 != 0.0:
        raise ConfigError("room synthesis starts at t=0; set grid.t0: 0")
    src = SourceSpec(waveform=waveform)
    return rir_grid(room, src, grid.positions(), grid.z, grid.fs,
                    grid.duration, cfg.medium)


@main.command()
@config_options
@click.option("--out", "-o", required=True, type=click.Path(file_okay=False),
              help="Output directory.")
@run_guard
def synth(config_path, overrides, out):
    """Synthesize the configured field: truth grid plus training subset."""
    _, cfg = _resolve(config_path, overrides)
    out = _out_dir(out)
    truth = _synthesize(cfg)
    idx = subset_indices(cfg.grid, rng=cfg.seed)
    train_grid = truth.subset(idx)
    write_grid(out / "truth.wfgd", truth)
    write_grid(out / "train.wfgd", train_grid)
    _write_manifest(out, "synth", cfg, {
        "outputs": {"truth": "truth.wfgd", "train": "train.wfgd"},
        "n_positions": truth.n_pos,
        "n_train_positions": train_grid.n_pos,
        "train_indices": [int(i) for i in idx],
    })
    click.echo(f"wrote {truth.n_pos} positions ({train_grid.n_pos} training) to {out}")


@main.command("train")
@config_options
@click.option("--data", "data_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Training grid (WFGD).")
@click.option("--out", "-o", required=True, type=click.Path(file_okay=False),
              help="Output directory.")
@click.option("--resume", "resume_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="Continue from a saved training state.")
@run_guard
def train_command(config_path, overrides, data_path, out, resume_path):
    """Fit the neural field to a measured grid; emits model + log + state."""
    doc, cfg = _resolve(config_path, overrides)
    out = _out_dir(out)
    data = read_grid(data_path)

    resume = None
    if resume_path is not None:
        resume, net_cfg = load_train_checkpoint(resume_path)
        net = NetField(resume.params, net_cfg)
    else:
        net_cfg = cfg.net
        if "bounds" not in (doc.get("net") or {}):
            # untouched default bounds are a placeholder; fit them to the data
            net_cfg = replace(net_cfg, bounds=derive_bounds(data))
        net = NetField(init_siren(net_cfg, np.random.default_rng(cfg.seed)), net_cfg)

    try:
        params, log, checkpoints = training.train(net, cfg.train, data,
                                                  cfg.medium, resume=resume)
    except training.DivergenceError as exc:
        # keep the last good state and partial log for post-mortem
        if exc.checkpoint is not None:
            save_train_checkpoint(out / "diverged_state.wfpn", exc.checkpoint,
                                  net_cfg)
        exc.log.to_csv(out / "train_log.csv")
        raise

    log.to_csv(out / "train_log.csv")
    save_checkpoint(out / "model.wfpn", params, net_cfg,
                    extra={"iteration": cfg.train.iterations,
                           "config_hash": config_hash(cfg)})
    save_train_checkpoint(out / "state.wfpn", checkpoints[-1], net_cfg)
    ld = log.column("loss_data")
    lf = log.column("loss_pde")
    _write_manifest(out, "train", cfg, {
        "outputs": {"model": "model.wfpn", "state": "state.wfpn",
                    "log": "train_log.csv"},
        "data": str(data_path),
        "resumed_from": str(resume_path) if resume_path else None,
        "final_loss_data": float(ld[-1]),
        "final_loss_pde": float(lf[-1]),
    })
    click.echo(f"trained to iteration {cfg.train.iterations}: "
               f"data MAE {ld[-1]:.3e}, PDE MAE {lf[-1]:.3e}")


def _read_positions(path) -> np.ndarray:
    if str(path).endswith(".wfgd"):
        return read_grid(path).positions
    pts = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    if pts.shape[1] < 2:
        raise ValueError(f"{path}: expected x,y columns")
    return pts[:, :2]


@main.command()
@config_options
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Trained model checkpoint.")
@click.option("--out", "-o", required=True, type=click.Path(file_okay=False),
              help="Output directory.")
@click.option("--positions", "positions_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="Positions to evaluate: CSV x,y rows or a WFGD grid "
                   "(default: the configured grid).")
@click.option("--velocity", is_flag=True,
              help="Also write in-plane particle velocity (CSV).")
@click.option("--intensity", is_flag=True,
              help="Also write instantaneous intensity (CSV).")
@run_guard
def reconstruct(config_path, overrides, model_path, out, positions_path,
                velocity, intensity):
    """Evaluate a trained model at arbitrary positions and times."""
    _, cfg = _resolve(config_path, overrides)
    out = _out_dir(out)
    params, net_cfg, _ = load_checkpoint(model_path)
    net = NetField(params, net_cfg)

    if positions_path is not None:
        positions = _read_positions(positions_path)
    else:
        positions = cfg.grid.positions()
    t = cfg.grid.times()
    pts = np.empty((t.size * positions.shape[0], 3))
    pts[:, :2] = np.tile(positions, (t.size, 1))
    pts[:, 2] = np.repeat(t, positions.shape[0])
    pressure = net(pts).reshape(t.size, positions.shape[0])
    grid_out = FieldGrid(positions, pressure, cfg.grid.fs, cfg.grid.t0,
                         cfg.grid.z)
    write_grid(out / "recon.wfgd", grid_out)

    written = {"grid": "recon.wfgd"}
    if velocity or intensity:
        u = np.stack([particle_velocity(net, cfg.medium, r, t)
                      for r in positions])          # (M, T, 2)
        if velocity:
            _write_vector_csv(out / "velocity.csv", t, positions, u,
                              ("ux", "uy"))
            written["velocity"] = "velocity.csv"
        if intensity:
            flux = pressure.T[:, :, None] * u       # (M, T, 2)
            _write_vector_csv(out / "intensity.csv", t, positions, flux,
                              ("ix", "iy"))
            written["intensity"] = "intensity.csv"

    _write_manifest(out, "reconstruct", cfg, {
        "outputs": written,
        "model": str(model_path),
        "n_positions": int(positions.shape[0]),
    })
    click.echo(f"reconstructed {positions.shape[0]} positions x {t.size} samples")


def _write_vector_csv(path, t, positions, comps, labels):
    """comps: (M, T, 2) per-position planar vector signals."""
    cols = [t]
    names = ["t"]
    for m, (x, y) in enumerate(positions):
        for k, lab in enumerate(labels):
            cols.append(comps[m, :, k])
            names.append(f"{lab}({x:.6g}|{y:.6g})")
    table = np.column_stack(cols)
    np.savetxt(path, table, delimiter=",", header=",".join(names), comments="")


@main.command()
@config_options
@click.option("--data", "data_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Training grid (WFGD).")
@click.option("--method", type=click.Choice(["td-laplace", "pw-rls"]),
              default=None, help="Override the configured baseline method.")
@click.option("--targets", "targets_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="Positions to reconstruct at (CSV or WFGD; default: "
                   "the configured grid).")
@click.option("--out", "-o", required=True, type=click.Path(file_okay=False),
              help="Output directory.")
@run_guard
def baseline(config_path, overrides, data_path, method, targets_path, out):
    """Fit a sparse-regression baseline and reconstruct at target positions."""
    _, cfg = _resolve(config_path, overrides)
    out = _out_dir(out)
    measured = read_grid(data_path)
    method = method or cfg.baseline.method

    n_time = measured.n_time
    if targets_path is not None:
        if str(targets_path).endswith(".wfgd"):
            target_grid = read_grid(targets_path)
            targets, n_time = target_grid.positions, target_grid.n_time
        else:
            targets = _read_positions(targets_path)
    else:
        targets = cfg.grid.positions()

    solver = SparseSolverConfig(lam=cfg.baseline.lam,
                                max_iter=cfg.baseline.max_iter,
                                tol=cfg.baseline.tol,
                                kind=cfg.baseline.solver,
                                debias=cfg.baseline.debias)
    if method == "td-laplace":
        sources = default_spherical_sources(measured.positions, measured.z,
                                            cfg.baseline.sources,
                                            cfg.baseline.radius_factor)
        receivers = np.column_stack([measured.positions,
                                     np.full(measured.n_pos, measured.z)])
        dictionary = build_spherical_dictionary(sources, receivers,
                                                measured.fs, medium=cfg.medium)
        fit = td_sparse_solve(dictionary, measured, solver)
        dump_td_coefficients(out / "coefficients.csv", fit, threshold=1e-12)
        diagnostics = {"converged": bool(fit.converged),
                       "iterations": int(fit.n_iter),
                       "objective": float(fit.objective[-1]),
                       "active_atoms": int(np.count_nonzero(fit.alpha))}
    else:
        fit = pw_solve(measured, planewave_directions(cfg.baseline.directions),
                       cfg.baseline.freq_range, solver, cfg.medium)
        dump_pw_coefficients(out / "coefficients.csv", fit)
        diagnostics = {"bins": int(fit.bins.size),
                       "freq_lo": float(fit.freqs.min()),
                       "freq_hi": float(fit.freqs.max()),
                       "active_coefficients": int(np.count_nonzero(fit.beta))}

    recon = reconstruct_baseline(fit, targets, n_time, cfg.medium)
    write_grid(out / "recon.wfgd", recon)
    _write_manifest(out, "baseline", cfg, {
        "outputs": {"grid": "recon.wfgd", "coefficients": "coefficients.csv"},
        "method": method,
        "data": str(data_path),
        "diagnostics": diagnostics,
    })
    click.echo(f"{method}: reconstructed {recon.n_pos} positions; "
               + ", ".join(f"{k}={v}" for k, v in diagnostics.items()))


@main.command()
@config_options
@click.option("--truth", "truth_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Reference grid (WFGD).")
@click.option("--est", "est_paths", multiple=True, required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Reconstruction to score (repeatable).")
@click.option("--train-data", "train_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="Training grid; enables distance-to-aperture analysis.")
@click.option("--out", "-o", required=True, type=click.Path(file_okay=False),
              help="Output directory.")
@run_guard
def evaluate(config_path, overrides, truth_path, est_paths, train_path, out):
    """Score reconstructions against a truth grid; one report CSV each."""
    _, cfg = _resolve(config_path, overrides)
    out = _out_dir(out)
    truth = read_grid(truth_path)
    train_positions = (read_grid(train_path).positions
                       if train_path else np.empty((0, 2)))

    reports = {}
    for path in est_paths:
        est = read_grid(path)
        if (est.pressure.shape != truth.pressure.shape
                or est.fs != truth.fs or est.t0 != truth.t0
                or not np.array_equal(est.positions, truth.positions)):
            raise click.UsageError(
                f"{path} is not aligned with the truth grid "
                "(same positions, sample count, fs, and t0 required)")
        name = Path(path).stem if Path(path).stem != "recon" \
            else Path(path).parent.name or Path(path).stem
        windows = snapshot_metrics(truth, est, cfg.metrics.window,
                                   cfg.metrics.hop)
        rows = distance_study(truth, est, train_positions)
        report = ReconReport(name, config_hash(cfg), windows, rows)
        csv_name = f"report_{name}.csv"
        write_report_csv(out / csv_name, report)
        reports[name] = csv_name

        corr = pearson(truth.pressure.ravel(), est.pressure.ravel())
        level = nmse_db(truth.pressure.ravel(), est.pressure.ravel())
        line = f"{name}: correlation {corr:.4f}, NMSE {level:.2f} dB"
        if train_positions.size:
            try:
                _, _, rho = binned_distance_trend(rows, cfg.metrics.distance_bins)
                line += f", distance-trend rank {rho:.3f}"
            except ValueError:
                pass
        click.echo(line)

    _write_manifest(out, "evaluate", cfg, {
        "outputs": reports,
        "truth": str(truth_path),
    })


@main.command()
@click.argument("grid_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "-o", required=True, type=click.Path(dir_okay=False),
              help="Destination CSV file.")
@run_guard
def export(grid_path, out):
    """Convert a binary grid container to plot-ready CSV."""
    grid = read_grid(grid_path)
    out = Path(out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    export_grid_csv(out, grid)
    click.echo(f"exported {grid.n_pos} positions x {grid.n_time} samples to {out}")


if __name__ == "__main__":
    main()
