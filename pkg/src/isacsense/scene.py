"""Ground-truth scene generation and the noisy forward model.

The simulator draws targets and scatterers as two spatial clusters on the
lattice of the position grid, with a configurable number of exact
target/scatterer overlaps, then emits pilot observations

    y_n^r = H_n^r v_n^r + z_n^r   (downlink sensing subcarriers)
    y_n^c = h_n^c u_n^c + z_n^c   (uplink estimation subcarriers)

with circular complex Gaussian noise of per-block precisions gamma_r,
gamma_c.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .geometry import (
    ArrayConfig,
    OfdmConfig,
    Region,
    aoa,
    delay_vector,
    radar_round_trip_delay,
    single_bounce_relative_delay,
    steering_vector,
)


@dataclass(frozen=True)
class SceneConfig:
    """Knobs for the random scene generator."""

    region: Region
    bs: tuple = (-50.0, 0.0)
    user_nominal: tuple = (50.0, 0.0)
    user_prior_var: float = 1.0  # sigma_p^2, split evenly across x and y
    num_targets: int = 11
    num_scatterers: int = 13
    num_multibounce: int = 2
    overlap: int = 0
    grid_resolution: float = 5.0
    cluster_halfwidths: tuple = (10.0, 20.0)
    off_grid_jitter: float = 0.0
    user_echo_prob: float = 0.5
    multibounce_gain_scale: float = 0.1
    tau_offset_bound: float = 0.0  # |tau_o| <= bound; 0 disables the offset
    mb_delay_range: tuple = (0.0, 2e-6)
    snr_db: float = 0.0

    def __post_init__(self):
        if self.overlap > min(self.num_targets, self.num_scatterers):
            raise ConfigError("overlap exceeds min(num_targets, num_scatterers)")
        if self.overlap < 0:
            raise ConfigError("overlap must be nonnegative")
        if self.grid_resolution <= 0:
            raise ConfigError("grid_resolution must be positive")


@dataclass
class Scene:
    """Ground truth for one simulated link."""

    bs: np.ndarray
    user: np.ndarray
    target_positions: np.ndarray  # (K, 2)
    target_gains: np.ndarray  # (K,) complex
    user_echo_gain: complex
    scatterer_positions: np.ndarray  # (L, 2)
    scatterer_gains: np.ndarray  # (L,) complex
    los_gain: complex
    mb_angles: np.ndarray  # (J,)
    mb_delays: np.ndarray  # (J,) relative delays
    mb_gains: np.ndarray  # (J,) complex
    time_offset: float
    gamma_r: float
    gamma_c: float
    overlap: int = 0

    @property
    def num_targets(self) -> int:
        return len(self.target_gains)

    @property
    def num_scatterers(self) -> int:
        return len(self.scatterer_gains)

    def to_dict(self) -> dict:
        def cplx(z):
            z = np.asarray(z, dtype=complex)
            return np.stack([z.real, z.imag], axis=-1).tolist()

        return {
            "schema": "isacsense.scene/1",
            "bs": self.bs.tolist(),
            "user": self.user.tolist(),
            "target_positions": self.target_positions.tolist(),
            "target_gains": cplx(self.target_gains),
            "user_echo_gain": cplx(self.user_echo_gain),
            "scatterer_positions": self.scatterer_positions.tolist(),
            "scatterer_gains": cplx(self.scatterer_gains),
            "los_gain": cplx(self.los_gain),
            "mb_angles": self.mb_angles.tolist(),
            "mb_delays": self.mb_delays.tolist(),
            "mb_gains": cplx(self.mb_gains),
            "time_offset": self.time_offset,
            "gamma_r": self.gamma_r,
            "gamma_c": self.gamma_c,
            "overlap": self.overlap,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        if d.get("schema") != "isacsense.scene/1":
            raise ConfigError(f"unknown scene schema: {d.get('schema')!r}")

        def cplx(v):
            a = np.asarray(v, dtype=float)
            return (a[..., 0] + 1j * a[..., 1]).reshape(a.shape[:-1])

        return cls(
            bs=np.asarray(d["bs"], dtype=float),
            user=np.asarray(d["user"], dtype=float),
            target_positions=np.asarray(d["target_positions"], dtype=float).reshape(-1, 2),
            target_gains=np.atleast_1d(cplx(d["target_gains"])),
            user_echo_gain=complex(cplx(d["user_echo_gain"])),
            scatterer_positions=np.asarray(d["scatterer_positions"], dtype=float).reshape(-1, 2),
            scatterer_gains=np.atleast_1d(cplx(d["scatterer_gains"])),
            los_gain=complex(cplx(d["los_gain"])),
            mb_angles=np.asarray(d["mb_angles"], dtype=float),
            mb_delays=np.asarray(d["mb_delays"], dtype=float),
            mb_gains=np.atleast_1d(cplx(d["mb_gains"])) if len(d["mb_gains"]) else np.zeros(0, complex),
            time_offset=float(d["time_offset"]),
            gamma_r=float(d["gamma_r"]),
            gamma_c=float(d["gamma_c"]),
            overlap=int(d.get("overlap", 0)),
        )

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)

    @classmethod
    def load(cls, path) -> "Scene":
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass(frozen=True)
class PilotSet:
    """Unit-power pilot symbols, one per pilot subcarrier.

    ``downlink`` has shape (|N_b|, M) with random-phase unit-modulus
    entries (unit power per antenna); ``uplink`` has shape (|N_u|,) with
    unit-modulus scalars.
    """

    downlink: np.ndarray
    uplink: np.ndarray


@dataclass(frozen=True)
class Observation:
    """Stacked pilot observations, ascending subcarrier order."""

    y_r: np.ndarray
    y_c: np.ndarray

    @property
    def stacked(self) -> np.ndarray:
        return np.concatenate([self.y_r, self.y_c])


def make_pilots(array: ArrayConfig, ofdm: OfdmConfig, seed, norm: str = "per_antenna") -> PilotSet:
    """Draw random-phase pilots.

    ``norm`` selects the downlink power convention: "per_antenna" gives
    unit-modulus entries (||v||^2 = M), "unit" rescales to ||v|| = 1.
    """
    rng = np.random.default_rng(seed)
    m = array.num_antennas
    v = np.exp(2j * np.pi * rng.random((len(ofdm.radar_pilots), m)))
    if norm == "unit":
        v = v / np.sqrt(m)
    elif norm != "per_antenna":
        raise ConfigError(f"unknown pilot norm {norm!r}")
    u = np.exp(2j * np.pi * rng.random(len(ofdm.comm_pilots)))
    return PilotSet(downlink=v, uplink=u)


def _snap(points, region: Region, res: float) -> np.ndarray:
    """Snap points onto the cell-center lattice of the position grid."""
    points = np.asarray(points, dtype=float)
    j = np.floor((points[..., 0] - region.xmin) / res)
    i = np.floor((points[..., 1] - region.ymin) / res)
    nx = int(round((region.xmax - region.xmin) / res))
    ny = int(round((region.ymax - region.ymin) / res))
    j = np.clip(j, 0, nx - 1)
    i = np.clip(i, 0, ny - 1)
    x = region.xmin + (j + 0.5) * res
    y = region.ymin + (i + 0.5) * res
    return np.stack([x, y], axis=-1)


def synthesize_scene(cfg: SceneConfig, seed, angle_delay_grid=None) -> Scene:
    """Draw a random scene; deterministic per seed.

    Targets and scatterers fall in two rectangular clusters of different
    sizes, snapped to the position-grid lattice so that the configured
    number of exact overlaps is well defined. ``off_grid_jitter`` then
    moves every occupied cell by a shared per-cell offset, which keeps
    overlapping pairs coincident. If ``angle_delay_grid`` is given, the
    multi-bounce angles and (delay + offset) values are drawn from its
    grid points.
    """
    rng = np.random.default_rng(seed)
    region, res = cfg.region, cfg.grid_resolution

    tau_o = float(rng.uniform(-cfg.tau_offset_bound, cfg.tau_offset_bound)) if cfg.tau_offset_bound else 0.0

    # Two cluster centers, kept a cluster-width apart so the clusters read
    # as distinct blobs.
    hw = np.asarray(cfg.cluster_halfwidths, dtype=float)
    inset_x = (region.xmin + hw.max(), region.xmax - hw.max())
    inset_y = (region.ymin + hw.max(), region.ymax - hw.max())
    for _ in range(200):
        centers = np.stack(
            [rng.uniform(*inset_x, size=2), rng.uniform(*inset_y, size=2)], axis=-1
        )
        if np.linalg.norm(centers[0] - centers[1]) >= hw.max():
            break

    def draw_cells(count, taken):
        cells = []
        while len(cells) < count:
            c = int(rng.integers(2))
            p = centers[c] + rng.uniform(-hw[c], hw[c], size=2)
            p = tuple(_snap(p, region, res))
            if p not in taken and p not in cells:
                cells.append(p)
        return cells

    target_cells = draw_cells(cfg.num_targets, taken=set())
    shared = [target_cells[i] for i in rng.permutation(cfg.num_targets)[: cfg.overlap]]
    extra = draw_cells(cfg.num_scatterers - cfg.overlap, taken=set(target_cells))
    scatterer_cells = shared + extra

    # Per-cell jitter so overlapping pairs stay coincident off-grid.
    jitter = {}
    for cell in set(target_cells) | set(scatterer_cells):
        jitter[cell] = rng.uniform(-cfg.off_grid_jitter, cfg.off_grid_jitter, size=2) if cfg.off_grid_jitter else np.zeros(2)

    def place(cells):
        if not cells:
            return np.zeros((0, 2))
        return region.clip(np.asarray([np.asarray(c) + jitter[c] for c in cells]))

    target_positions = place(target_cells)
    scatterer_positions = place(scatterer_cells)

    def cn(shape=()):
        z = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        return z / np.sqrt(2)

    user = np.asarray(cfg.user_nominal, dtype=float) + rng.normal(
        0.0, np.sqrt(cfg.user_prior_var / 2), size=2
    )
    echo = complex(cn()) if rng.random() < cfg.user_echo_prob else 0.0

    j_paths = cfg.num_multibounce
    if angle_delay_grid is not None and j_paths:
        sin_grid = np.asarray(angle_delay_grid.sin_angles)
        tau_grid = np.asarray(angle_delay_grid.delays)
        mb_angles = np.arcsin(rng.choice(sin_grid, size=j_paths))
        ok = tau_grid[tau_grid >= tau_o] if np.any(tau_grid >= tau_o) else tau_grid[-1:]
        mb_delays = rng.choice(ok, size=j_paths) - tau_o
    else:
        lo, hi = cfg.mb_delay_range
        mb_angles = np.arcsin(rng.uniform(-1, 1, size=j_paths))
        mb_delays = rng.uniform(max(lo, 0.0), hi, size=j_paths)

    gamma = 10.0 ** (cfg.snr_db / 10.0)
    return Scene(
        bs=np.asarray(cfg.bs, dtype=float),
        user=user,
        target_positions=target_positions,
        target_gains=cn(cfg.num_targets),
        user_echo_gain=echo,
        scatterer_positions=scatterer_positions,
        scatterer_gains=cn(cfg.num_scatterers),
        los_gain=complex(cn()),
        mb_angles=mb_angles,
        mb_delays=mb_delays,
        mb_gains=cfg.multibounce_gain_scale * cn(j_paths),
        time_offset=tau_o,
        gamma_r=gamma,
        gamma_c=gamma,
        overlap=cfg.overlap,
    )


def radar_channel(scene: Scene, array: ArrayConfig, ofdm: OfdmConfig, n: int) -> np.ndarray:
    """M x M radar channel matrix on subcarrier n (user echo is term k=0)."""
    positions = np.vstack([scene.user[None, :], scene.target_positions])
    gains = np.concatenate([[scene.user_echo_gain], scene.target_gains])
    thetas = aoa(scene.bs, positions)
    taus = radar_round_trip_delay(scene.bs, positions)
    a = steering_vector(array, thetas)  # (M, K+1)
    w = gains * np.exp(-2j * np.pi * n * ofdm.subcarrier_spacing * taus)
    return (a * w) @ a.T


def comm_channel(scene: Scene, array: ArrayConfig, ofdm: OfdmConfig, n: int) -> np.ndarray:
    """Uplink channel vector on subcarrier n: LoS + single- + multi-bounce."""
    f0 = ofdm.subcarrier_spacing
    tau_o = scene.time_offset
    h = scene.los_gain * np.exp(-2j * np.pi * n * f0 * tau_o) * steering_vector(
        array, aoa(scene.bs, scene.user)
    )
    if scene.num_scatterers:
        thetas = aoa(scene.bs, scene.scatterer_positions)
        taus = single_bounce_relative_delay(scene.bs, scene.scatterer_positions, scene.user)
        a = steering_vector(array, thetas)
        w = scene.scatterer_gains * np.exp(-2j * np.pi * n * f0 * (taus + tau_o))
        h = h + a @ w
    if len(scene.mb_gains):
        a = steering_vector(array, scene.mb_angles)
        w = scene.mb_gains * np.exp(-2j * np.pi * n * f0 * (scene.mb_delays + tau_o))
        h = h + a @ w
    return h


def noiseless_observation(scene: Scene, pilots: PilotSet, array: ArrayConfig, ofdm: OfdmConfig) -> Observation:
    """Model output with the noise switched off."""
    y_r = np.concatenate(
        [radar_channel(scene, array, ofdm, n) @ pilots.downlink[i] for i, n in enumerate(ofdm.radar_pilots)]
    )
    y_c = np.concatenate(
        [comm_channel(scene, array, ofdm, n) * pilots.uplink[i] for i, n in enumerate(ofdm.comm_pilots)]
    )
    return Observation(y_r=y_r, y_c=y_c)


def observe(scene: Scene, pilots: PilotSet, array: ArrayConfig, ofdm: OfdmConfig, seed, noiseless: bool = False) -> Observation:
    """Noisy pilot observation; deterministic per seed."""
    clean = noiseless_observation(scene, pilots, array, ofdm)
    if noiseless:
        return clean
    rng = np.random.default_rng(seed)

    def noise(size, gamma):
        z = rng.standard_normal(size) + 1j * rng.standard_normal(size)
        return z * np.sqrt(1.0 / (2.0 * gamma))

    return Observation(
        y_r=clean.y_r + noise(clean.y_r.size, scene.gamma_r),
        y_c=clean.y_c + noise(clean.y_c.size, scene.gamma_c),
    )


def delay_phase(ofdm: OfdmConfig, subcarriers, taus) -> np.ndarray:
    """Convenience wrapper: phase ramps for a batch of delays, (n, K)."""
    return delay_vector(ofdm, np.asarray(taus, dtype=float), subcarriers)
