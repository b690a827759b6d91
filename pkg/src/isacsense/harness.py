"""Experiment driver: configs, presets, Monte Carlo sweeps, persistence.

A sweep runs (variant x SNR x overlap x trial) cells. Scenes, pilots, and
noise are seeded per (overlap, trial) so the same data is reused across
variants and SNR points (paired comparisons); every CSV row carries the
seeds that regenerate it. Results are written as CSV (17 significant
digits) plus a JSON manifest with the config hash and per-cell status, so
an interrupted sweep resumes where it left off. ``ISAC_WORKERS`` caps the
process pool.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .baselines import omp_solve
from .errors import ConfigError
from .estimator import LinkModel, TurboIfVbiEstimator
from .geometry import ArrayConfig, OfdmConfig, Region
from .grids import GridConfig, build_grids
from .metrics import MetricsRecord, evaluate_estimate
from .scene import SceneConfig, make_pilots, observe, synthesize_scene

CSV_SCHEMA_VERSION = 1
_FIELDS = [f.name for f in dataclasses.fields(MetricsRecord)]


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat, JSON-serializable description of one experiment."""

    name: str = "desk"
    seed: int = 0
    trials: int = 100
    snr_db: tuple = (-5.0,)
    overlaps: tuple = (2,)
    variants: tuple = ("mrf",)
    # link
    num_antennas: int = 16
    num_subcarriers: int = 256
    subcarrier_spacing: float = 30e3
    carrier_freq: float = 3.5e9
    pilot_interval: int = 16
    region_size: float = 100.0
    resolution: float = 10.0
    num_angles: int = 16
    num_delays: int = 8
    tau_grid_extra: float = 1.0e-6
    pilot_norm: str = "per_antenna"
    # scene
    num_targets: int = 4
    num_scatterers: int = 5
    num_multibounce: int = 1
    cluster_halfwidths: tuple = (10.0, 20.0)
    off_grid_jitter: float = 5.0
    user_echo_prob: float = 0.5
    multibounce_gain_scale: float = 0.1
    bs: tuple = (-50.0, 0.0)
    user_nominal: tuple = (50.0, 0.0)
    user_prior_var: float = 1.0
    # estimator
    inner_iters: int = 5
    outer_iters: int = 30
    tol: float = 1e-2
    mrf_rounds: int = 4
    omp_margin: float = 1.2
    omp_max_atoms: int = 40
    out_dir: str = "results"

    # ------------------------------------------------------------------
    @property
    def bandwidth(self) -> float:
        return self.num_subcarriers * self.subcarrier_spacing

    @property
    def tau_bound(self) -> float:
        return 2.0 / self.bandwidth

    def region(self) -> Region:
        half = self.region_size / 2.0
        return Region(-half, half, -half, half)

    def array(self) -> ArrayConfig:
        return ArrayConfig(self.num_antennas)

    def ofdm(self) -> OfdmConfig:
        pilots = tuple(range(0, self.num_subcarriers, self.pilot_interval))
        return OfdmConfig(
            num_subcarriers=self.num_subcarriers,
            subcarrier_spacing=self.subcarrier_spacing,
            carrier_freq=self.carrier_freq,
            radar_pilots=pilots,
            comm_pilots=pilots,
        )

    def grid_config(self) -> GridConfig:
        return GridConfig(
            region=self.region(),
            resolution=self.resolution,
            num_angles=self.num_angles,
            num_delays=self.num_delays,
            tau_min=-self.tau_bound,
            tau_max=self.tau_bound + self.tau_grid_extra,
        )

    def scene_config(self, snr_db: float, overlap: int) -> SceneConfig:
        return SceneConfig(
            region=self.region(),
            bs=self.bs,
            user_nominal=self.user_nominal,
            user_prior_var=self.user_prior_var,
            num_targets=self.num_targets,
            num_scatterers=self.num_scatterers,
            num_multibounce=self.num_multibounce,
            overlap=overlap,
            grid_resolution=self.resolution,
            cluster_halfwidths=self.cluster_halfwidths,
            off_grid_jitter=self.off_grid_jitter,
            user_echo_prob=self.user_echo_prob,
            multibounce_gain_scale=self.multibounce_gain_scale,
            tau_offset_bound=self.tau_bound,
            snr_db=snr_db,
        )

    # ------------------------------------------------------------------
    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def preset(name: str, **overrides) -> ExperimentConfig:
    """Factory for the built-in presets; overrides are keyword fields."""
    if name == "desk":
        base = {}
    elif name == "paper":
        base = dict(
            name="paper",
            num_antennas=64,
            num_subcarriers=1024,
            pilot_interval=32,
            resolution=5.0,
            num_angles=64,
            num_delays=16,
            num_targets=11,
            num_scatterers=13,
            num_multibounce=2,
            off_grid_jitter=2.5,
        )
    else:
        raise ConfigError(f"unknown preset {name!r}")
    base.update(overrides)
    return ExperimentConfig(**base)


# ---------------------------------------------------------------------------
# Single-cell execution
# ---------------------------------------------------------------------------


def _cell_seeds(cfg: ExperimentConfig, overlap: int, trial: int):
    root = int(cfg.seed)
    return {
        "scene": [root, 101, int(overlap), int(trial)],
        "pilots": [root, 202, int(overlap), int(trial)],
        "noise": [root, 303, int(overlap), int(trial)],
    }


def make_link(cfg: ExperimentConfig, pilots) -> LinkModel:
    pos_grid, ad_grid = build_grids(cfg.grid_config())
    return LinkModel(
        array=cfg.array(),
        ofdm=cfg.ofdm(),
        pilots=pilots,
        pos_grid=pos_grid,
        ad_grid=ad_grid,
        bs=np.asarray(cfg.bs, dtype=float),
        user_prior_mean=np.asarray(cfg.user_nominal, dtype=float),
        user_prior_var=cfg.user_prior_var,
        tau_bound=cfg.tau_bound,
    )


def _run_omp(link: LinkModel, obs, scene, cfg: ExperimentConfig):
    """Greedy baseline on the fixed grid; two independent runs per block."""
    model = link.builder.build(link.builder.initial_params(link.user_prior_mean))
    t0 = time.perf_counter()
    tol_r = cfg.omp_margin * model.rows_r / scene.gamma_r
    tol_c = cfg.omp_margin * model.rows_c / scene.gamma_c
    cap = min(cfg.omp_max_atoms, model.dim_r - 1, model.rows_r)
    sup_r, coef_r = omp_solve(obs.y_r, model.phi_r, max_atoms=cap, residual_tol=tol_r)
    cap_c = min(cfg.omp_max_atoms, model.dim_c - 1, model.rows_c)
    sup_c, coef_c = omp_solve(obs.y_c, model.phi_c, max_atoms=cap_c, residual_tol=tol_c)
    elapsed = time.perf_counter() - t0
    q_n = link.pos_grid.size
    act_r = np.zeros(q_n)
    act_c = np.zeros(q_n)
    cells_r = [s - 1 for s in sup_r if 1 <= s <= q_n]
    cells_c = [s - 1 for s in sup_c if 1 <= s <= q_n]
    act_r[cells_r] = 1.0
    act_c[cells_c] = 1.0
    scores = evaluate_estimate(
        scene, link,
        radar_activity=act_r, comm_activity=act_c,
        radar_positions=link.pos_grid.points[cells_r],
        comm_positions=link.pos_grid.points[cells_c],
        h_hat_r=model.phi_r @ coef_r, h_hat_c=model.phi_c @ coef_c,
    )
    return scores, elapsed, elapsed, True, 1, np.linalg.norm(link.user_prior_mean - scene.user)


def run_cell(cfg: ExperimentConfig, variant: str, snr_db: float, overlap: int,
             trial: int) -> MetricsRecord:
    """One fully seeded (variant, SNR, overlap, trial) evaluation."""
    seeds = _cell_seeds(cfg, overlap, trial)
    pilots = make_pilots(cfg.array(), cfg.ofdm(), np.random.SeedSequence(seeds["pilots"]),
                         norm=cfg.pilot_norm)
    link = make_link(cfg, pilots)
    scene = synthesize_scene(cfg.scene_config(snr_db, overlap),
                             np.random.SeedSequence(seeds["scene"]), link.ad_grid)
    obs = observe(scene, pilots, cfg.array(), cfg.ofdm(), np.random.SeedSequence(seeds["noise"]))

    if variant == "omp":
        scores, total, per_iter, converged, n_outer, user_err = _run_omp(link, obs, scene, cfg)
    else:
        est = TurboIfVbiEstimator(
            link=link, variant=variant, inner_iters=cfg.inner_iters,
            outer_iters=cfg.outer_iters, tol=cfg.tol, mrf_rounds=cfg.mrf_rounds,
        )
        est.fit(obs.stacked, scene=scene)
        res = est.result_
        h_hat_r, h_hat_c = res.reconstruct()
        scores = evaluate_estimate(
            scene, link,
            radar_activity=res.pi[res.model.idx_xr],
            comm_activity=res.pi[res.model.idx_xc],
            radar_positions=res.radar_positions(),
            comm_positions=res.comm_positions(),
            h_hat_r=h_hat_r, h_hat_c=h_hat_c,
        )
        total, per_iter = res.runtime_total, res.runtime_per_outer
        converged, n_outer = res.converged, res.n_outer
        user_err = float(np.linalg.norm(res.theta.p_u - scene.user))

    return MetricsRecord(
        variant=variant, snr_db=snr_db, overlap=overlap, trial=trial,
        seed=json.dumps(seeds), converged=converged, n_outer=n_outer,
        runtime_total=total, runtime_per_iteration=per_iter,
        user_error=float(user_err), **scores,
    )


# ---------------------------------------------------------------------------
# Sweep driver with resume
# ---------------------------------------------------------------------------


def _cell_id(variant, snr_db, overlap, trial) -> str:
    return f"{variant}|snr={snr_db:g}|ov={overlap}|trial={trial}"


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def _append_row(csv_path: Path, record: MetricsRecord, write_header: bool):
    with open(csv_path, "a", newline="") as f:
        writer = csv.writer(f)
        if write_header:
            writer.writerow([f"#schema={CSV_SCHEMA_VERSION}"])
            writer.writerow(_FIELDS)
        writer.writerow([_fmt(getattr(record, name)) for name in _FIELDS])


def read_results(csv_path) -> list[dict]:
    """Parse a sweep CSV back into typed dicts (floats bit-exact)."""
    rows = []
    with open(csv_path, newline="") as f:
        reader = csv.reader(f)
        header = None
        for row in reader:
            if not row or row[0].startswith("#"):
                continue
            if header is None:
                header = row
                continue
            d = dict(zip(header, row))
            for key in d:
                if key in ("variant", "seed"):
                    continue
                if key == "converged":
                    d[key] = d[key] == "True"
                elif key in ("overlap", "trial", "n_outer"):
                    d[key] = int(d[key])
                else:
                    d[key] = float(d[key])
            rows.append(d)
    return rows


def _worker(args):
    cfg_dict, variant, snr_db, overlap, trial = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    return run_cell(cfg, variant, snr_db, overlap, trial)


def sweep(cfg: ExperimentConfig, progress=None) -> Path:
    """Run the full grid; returns the output directory.

    Cells already marked done in a matching manifest are skipped. Failures
    are recorded per cell and do not stop the sweep.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "results.csv"
    manifest_path = out / "manifest.json"
    cfg_hash = cfg.hash()

    manifest = None
    if manifest_path.exists():
        with open(manifest_path) as f:
            previous = json.load(f)
        if previous.get("config_hash") == cfg_hash:
            manifest = previous
    if manifest is None:
        manifest = {
            "schema": "isacsense.sweep/1",
            "config_hash": cfg_hash,
            "config": json.loads(cfg.to_json()),
            "package_version": _package_version(),
            "cells": {},
        }
        if csv_path.exists():
            csv_path.unlink()

    def save_manifest():
        with open(manifest_path, "w") as f:
            json.dump(manifest, f, indent=1)

    cells = [
        (variant, snr, overlap, trial)
        for variant in cfg.variants
        for snr in cfg.snr_db
        for overlap in cfg.overlaps
        for trial in range(cfg.trials)
    ]
    pending = [c for c in cells if manifest["cells"].get(_cell_id(*c), {}).get("status") != "done"]

    workers = int(os.environ.get("ISAC_WORKERS", "0") or 0)
    if workers <= 0:
        workers = min(4, os.cpu_count() or 1)
    write_header = not csv_path.exists()

    def record_done(cell, record: MetricsRecord):
        nonlocal write_header
        _append_row(csv_path, record, write_header)
        write_header = False
        manifest["cells"][_cell_id(*cell)] = {
            "status": "done",
            "seed": json.loads(record.seed),
        }
        save_manifest()
        if progress:
            progress(cell, record)

    def record_failed(cell, err):
        manifest["cells"][_cell_id(*cell)] = {
            "status": "failed",
            "error": repr(err),
            "seed": _cell_seeds(cfg, cell[2], cell[3]),
        }
        save_manifest()

    if workers > 1 and len(pending) > 1:
        cfg_dict = json.loads(cfg.to_json())
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {
                pool.submit(_worker, (cfg_dict, *cell)): cell for cell in pending
            }
            for future in as_completed(futures):
                cell = futures[future]
                try:
                    record_done(cell, future.result())
                except Exception as err:  # noqa: BLE001 - per-cell isolation
                    record_failed(cell, err)
    else:
        for cell in pending:
            try:
                record_done(cell, run_cell(cfg, *cell))
            except Exception as err:  # noqa: BLE001 - per-cell isolation
                record_failed(cell, err)

    save_manifest()
    return out


def _package_version() -> str:
    try:
        from importlib.metadata import version

        return version("isacsense")
    except Exception:  # pragma: no cover - dev tree fallback
        return "unknown"
