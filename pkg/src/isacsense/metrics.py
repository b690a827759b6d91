"""Detection, localization, and channel-estimation metrics."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigError
from .grids import PositionGrid
from .scene import Scene, noiseless_observation


@dataclass
class MetricsRecord:
    """One evaluated run; distances in meters, NMSE linear (dB on export)."""

    variant: str
    snr_db: float
    overlap: int
    trial: int
    seed: str
    rmse_target: float
    rmse_scatterer: float
    nmse_radar: float
    nmse_comm: float
    miss_rate: float
    false_alarm_rate: float
    user_error: float
    converged: bool
    n_outer: int
    runtime_total: float
    runtime_per_iteration: float

    def as_dict(self) -> dict:
        return asdict(self)


def compute_detection(activity, truth_cells, total_cells: int):
    """(miss_rate, false_alarm_rate) at the 0.5 posterior threshold.

    ``activity`` holds per-cell activity probabilities (or hard 0/1 for the
    greedy baseline); ``truth_cells`` the grid indices that actually hold a
    target.
    """
    activity = np.asarray(activity, dtype=float)
    detected = activity > 0.5
    truth = np.zeros(total_cells, dtype=bool)
    truth_cells = np.asarray(truth_cells, dtype=int)
    truth[truth_cells] = True
    n_true = int(truth.sum())
    n_empty = total_cells - n_true
    miss = float(np.sum(truth & ~detected) / n_true) if n_true else 0.0
    fa = float(np.sum(~truth & detected) / n_empty) if n_empty else 0.0
    return miss, fa


def greedy_match(estimates, truths, gate: float = 10.0):
    """Greedy nearest-pair matching within a gate; returns index pairs."""
    estimates = np.atleast_2d(np.asarray(estimates, dtype=float))
    truths = np.atleast_2d(np.asarray(truths, dtype=float))
    if estimates.size == 0 or truths.size == 0:
        return []
    d = np.linalg.norm(estimates[:, None, :] - truths[None, :, :], axis=-1)
    pairs = []
    d = d.copy()
    while True:
        idx = np.unravel_index(np.argmin(d), d.shape)
        if not np.isfinite(d[idx]) or d[idx] > gate:
            break
        pairs.append(idx)
        d[idx[0], :] = np.inf
        d[:, idx[1]] = np.inf
        if len(pairs) == min(estimates.shape[0], truths.shape[0]):
            break
    return pairs


def compute_rmse(estimates, truths, gate: float = 10.0) -> tuple[float, int]:
    """RMSE over greedily matched pairs; (nan, 0) when nothing matches."""
    estimates = np.atleast_2d(np.asarray(estimates, dtype=float))
    truths = np.atleast_2d(np.asarray(truths, dtype=float))
    pairs = greedy_match(estimates, truths, gate)
    if not pairs:
        return float("nan"), 0
    errs = [np.sum((estimates[i] - truths[j]) ** 2) for i, j in pairs]
    return float(np.sqrt(np.mean(errs))), len(pairs)


def compute_nmse(h_hat, h_true) -> float:
    """||h_hat - h_true||^2 / ||h_true||^2 on stacked channel vectors."""
    h_hat = np.asarray(h_hat, dtype=complex)
    h_true = np.asarray(h_true, dtype=complex)
    denom = float(np.sum(np.abs(h_true) ** 2))
    if denom == 0:
        raise ConfigError("true channel has zero norm")
    return float(np.sum(np.abs(h_hat - h_true) ** 2) / denom)


def truth_grid_cells(grid: PositionGrid, positions) -> np.ndarray:
    """Nearest grid index for each true position."""
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    if positions.size == 0:
        return np.zeros(0, dtype=int)
    return np.array([grid.nearest_index(p) for p in positions], dtype=int)


def evaluate_estimate(scene: Scene, link, radar_activity, comm_activity,
                      radar_positions, comm_positions, h_hat_r, h_hat_c,
                      gate: float = 10.0) -> dict:
    """Shared scoring path for the Bayesian variants and the greedy baseline."""
    grid = link.pos_grid
    clean = noiseless_observation(scene, link.pilots, link.array, link.ofdm)
    miss, fa = compute_detection(
        radar_activity, truth_grid_cells(grid, scene.target_positions), grid.size
    )
    rmse_t, _ = compute_rmse(radar_positions, scene.target_positions, gate)
    rmse_s, _ = compute_rmse(comm_positions, scene.scatterer_positions, gate)
    return {
        "rmse_target": rmse_t,
        "rmse_scatterer": rmse_s,
        "nmse_radar": compute_nmse(h_hat_r, clean.y_r),
        "nmse_comm": compute_nmse(h_hat_c, clean.y_c),
        "miss_rate": miss,
        "false_alarm_rate": fa,
    }
