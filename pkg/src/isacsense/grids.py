"""Position/angle/delay grids and the linear measurement model.

The position grid is a 2-D lattice of Q = H * W points stored column-major
(q = j * H + i for row i, column j), so the vertical neighbors of q are
q +- 1 and the horizontal neighbors are q +- H. The measurement model maps
the sparse coefficient vector

    x = [x0_r, x_r (Q), x0_c, x_c (Q), x_mb (U*V)]

to the stacked pilot observation through a block-diagonal matrix
Phi = BlockDiag(Phi_r, Phi_c); a diagonal matrix T with per-block scalars
T_r >= lambda_max(Phi_r^H Phi_r), T_c >= lambda_max(Phi_c^H Phi_c) bounds
the Gram matrix for the inverse-free updates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GeometryError
from .geometry import (
    ArrayConfig,
    OfdmConfig,
    Region,
    SPEED_OF_LIGHT,
    aoa,
    aoa_gradient,
    delay_vector,
    radar_delay_gradient,
    radar_round_trip_delay,
    single_bounce_delay_gradients,
    single_bounce_relative_delay,
    steering_derivative,
    steering_vector,
)
from .scene import PilotSet

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GridConfig:
    """Sizes of the position grid and the fixed angle/delay grid."""

    region: Region
    resolution: float
    num_angles: int
    num_delays: int
    tau_min: float
    tau_max: float

    def __post_init__(self):
        for name, extent in (("x", self.region.xmax - self.region.xmin),
                             ("y", self.region.ymax - self.region.ymin)):
            ratio = extent / self.resolution
            if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
                raise ConfigError(f"region {name}-extent is not a multiple of the resolution")
        if self.num_angles < 1 or self.num_delays < 1:
            raise ConfigError("angle/delay grid sizes must be >= 1")
        if self.tau_max < self.tau_min:
            raise ConfigError("tau_max < tau_min")


@dataclass(frozen=True)
class PositionGrid:
    """Uniform H x W lattice over the region, column-major point order."""

    region: Region
    rows: int  # H
    cols: int  # W
    points: np.ndarray = field(repr=False)  # (Q, 2)

    @property
    def size(self) -> int:
        return self.rows * self.cols

    def flat_index(self, i, j):
        return np.asarray(j) * self.rows + np.asarray(i)

    def nearest_index(self, p) -> int:
        """Flat index of the grid point closest to p."""
        d = np.linalg.norm(self.points - np.asarray(p, dtype=float)[None, :], axis=1)
        return int(np.argmin(d))


@dataclass(frozen=True)
class AngleDelayGrid:
    """Fixed multibounce basis: sin(angle) uniform on [-1, 1], delays on [tau_min, tau_max]."""

    sin_angles: np.ndarray  # (U,)
    delays: np.ndarray  # (V,)

    @property
    def angles(self) -> np.ndarray:
        return np.arcsin(self.sin_angles)

    @property
    def size(self) -> int:
        return len(self.sin_angles) * len(self.delays)


def build_grids(cfg: GridConfig) -> tuple[PositionGrid, AngleDelayGrid]:
    """Uniform grids per the configured region and sizes; deterministic."""
    region, res = cfg.region, cfg.resolution
    cols = int(round((region.xmax - region.xmin) / res))
    rows = int(round((region.ymax - region.ymin) / res))
    xs = region.xmin + (np.arange(cols) + 0.5) * res
    ys = region.ymin + (np.arange(rows) + 0.5) * res
    # Column-major: q = j * rows + i.
    jj, ii = np.meshgrid(np.arange(cols), np.arange(rows), indexing="ij")
    points = np.stack([xs[jj.ravel()], ys[ii.ravel()]], axis=-1)
    sin_angles = np.linspace(-1.0, 1.0, cfg.num_angles) if cfg.num_angles > 1 else np.zeros(1)
    delays = (
        np.linspace(cfg.tau_min, cfg.tau_max, cfg.num_delays)
        if cfg.num_delays > 1
        else np.array([cfg.tau_min])
    )
    return (
        PositionGrid(region=region, rows=rows, cols=cols, points=points),
        AngleDelayGrid(sin_angles=sin_angles, delays=delays),
    )


@dataclass
class SensingParams:
    """The continuously refined parameters: dynamic grid, user position, time offset."""

    r: np.ndarray  # (Q, 2)
    p_u: np.ndarray  # (2,)
    tau_o: float

    def copy(self) -> "SensingParams":
        return SensingParams(self.r.copy(), self.p_u.copy(), float(self.tau_o))

    def as_vector(self, c: float = SPEED_OF_LIGHT) -> np.ndarray:
        """Real vector in common units (meters; tau_o scaled by c)."""
        return np.concatenate([self.r.ravel(), self.p_u, [self.tau_o * c]])


@dataclass
class MeasurementModel:
    """Assembled measurement matrices and the diagonal Gram bound."""

    phi_r: np.ndarray  # (M * |N_b|, Q + 1)
    phi_c: np.ndarray  # (M * |N_u|, Q + U * V + 1)
    num_grid: int  # Q
    num_mb: int  # U * V
    T_r: float = 0.0
    T_c: float = 0.0

    # --- index bookkeeping for the stacked coefficient vector -----------
    @property
    def dim_r(self) -> int:
        return self.phi_r.shape[1]

    @property
    def dim_c(self) -> int:
        return self.phi_c.shape[1]

    @property
    def dim(self) -> int:
        return self.dim_r + self.dim_c

    @property
    def rows_r(self) -> int:
        return self.phi_r.shape[0]

    @property
    def rows_c(self) -> int:
        return self.phi_c.shape[0]

    @property
    def idx_r0(self) -> int:
        return 0

    @property
    def idx_xr(self) -> slice:
        return slice(1, 1 + self.num_grid)

    @property
    def idx_c0(self) -> int:
        return self.dim_r

    @property
    def idx_xc(self) -> slice:
        return slice(self.dim_r + 1, self.dim_r + 1 + self.num_grid)

    @property
    def idx_mb(self) -> slice:
        return slice(self.dim_r + 1 + self.num_grid, self.dim)

    @property
    def slice_r(self) -> slice:
        return slice(0, self.dim_r)

    @property
    def slice_c(self) -> slice:
        return slice(self.dim_r, self.dim)

    # --- block products --------------------------------------------------
    def matvec(self, x: np.ndarray) -> np.ndarray:
        return np.concatenate([self.phi_r @ x[self.slice_r], self.phi_c @ x[self.slice_c]])

    def rmatvec(self, y: np.ndarray) -> np.ndarray:
        yr, yc = y[: self.rows_r], y[self.rows_r:]
        return np.concatenate([self.phi_r.conj().T @ yr, self.phi_c.conj().T @ yc])

    def dense(self) -> np.ndarray:
        """Materialized BlockDiag(phi_r, phi_c); test/desk scale only."""
        out = np.zeros((self.rows_r + self.rows_c, self.dim), dtype=complex)
        out[: self.rows_r, self.slice_r] = self.phi_r
        out[self.rows_r:, self.slice_c] = self.phi_c
        return out

    def t_coef(self) -> np.ndarray:
        """Diagonal of T on the coefficient side, length dim."""
        return np.concatenate([np.full(self.dim_r, self.T_r), np.full(self.dim_c, self.T_c)])

    def gamma_coef(self, gamma_r: float, gamma_c: float) -> np.ndarray:
        return np.concatenate([np.full(self.dim_r, gamma_r), np.full(self.dim_c, gamma_c)])

    def gamma_obs(self, gamma_r: float, gamma_c: float) -> np.ndarray:
        return np.concatenate([np.full(self.rows_r, gamma_r), np.full(self.rows_c, gamma_c)])

    def column_norms_sq(self) -> np.ndarray:
        return np.concatenate([
            np.sum(np.abs(self.phi_r) ** 2, axis=0),
            np.sum(np.abs(self.phi_c) ** 2, axis=0),
        ])


def _power_lambda_max(phi: np.ndarray, tol: float = 1e-8, max_iters: int = 500, v0=None):
    """Largest eigenvalue of phi^H phi by power iteration on the Gram product.

    Returns (lambda_max, eigvec). Falls back to the Frobenius bound
    ||phi||_F^2 when the iteration fails to settle. The result is inflated
    by a 1e-7 relative margin so the returned scalar dominates the Gram
    matrix despite the Rayleigh quotient converging from below.
    """
    d = phi.shape[1]
    if v0 is None or v0.shape != (d,):
        rng = np.random.default_rng(0)
        v0 = rng.standard_normal(d) + 1j * rng.standard_normal(d)
    v = v0 / np.linalg.norm(v0)
    lam_old = np.inf
    for _ in range(max_iters):
        w = phi.conj().T @ (phi @ v)
        lam = float(np.real(np.vdot(v, w)))
        norm_w = np.linalg.norm(w)
        if norm_w == 0:
            return 0.0, v
        v = w / norm_w
        if abs(lam - lam_old) <= tol * max(lam, 1e-300):
            return lam * (1 + 1e-7), v
        lam_old = lam
    frob = float(np.sum(np.abs(phi) ** 2))
    logger.warning("power iteration did not converge; using Frobenius bound %.6g", frob)
    return frob, v


def compute_T(model: MeasurementModel, tol: float = 1e-8, max_iters: int = 500,
              warm_start: tuple | None = None) -> tuple[float, float, tuple]:
    """Fill in the per-block Gram bounds T_r, T_c on the model.

    Returns (T_r, T_c, eigvecs); the eigvecs tuple can be fed back as
    ``warm_start`` when the matrices change only slightly between calls.
    """
    v_r, v_c = warm_start if warm_start is not None else (None, None)
    model.T_r, v_r = _power_lambda_max(model.phi_r, tol, max_iters, v_r)
    model.T_c, v_c = _power_lambda_max(model.phi_c, tol, max_iters, v_c)
    return model.T_r, model.T_c, (v_r, v_c)


@dataclass
class ModelGradients:
    """Per-column derivatives of the measurement matrices.

    Shapes: d_phi_xr / d_phi_xc are (rows, Q, 2) for the (x, y) coordinates
    of the matching grid point; d_phi_c1_pu is (rows_c, Q, 2) for the user
    position entering the bounce delays; d_r0_pu / d_c0_pu are (rows, 2)
    for the user-echo and LoS columns; d_c_tauo is (rows_c, Q + 1) covering
    the LoS and single-bounce columns (the multibounce block is fixed).
    """

    d_phi_xr: np.ndarray
    d_phi_xc: np.ndarray
    d_phi_c1_pu: np.ndarray
    d_r0_pu: np.ndarray
    d_c0_pu: np.ndarray
    d_c_tauo: np.ndarray


class MeasurementBuilder:
    """Assembles the measurement model for a given set of sensing parameters."""

    def __init__(self, array: ArrayConfig, ofdm: OfdmConfig, pilots: PilotSet,
                 pos_grid: PositionGrid, ad_grid: AngleDelayGrid, bs,
                 c: float = SPEED_OF_LIGHT):
        self.array = array
        self.ofdm = ofdm
        self.pilots = pilots
        self.pos_grid = pos_grid
        self.ad_grid = ad_grid
        self.bs = np.asarray(bs, dtype=float)
        self.c = c
        if pilots.downlink.shape != (len(ofdm.radar_pilots), array.num_antennas):
            raise ConfigError("downlink pilots do not match the configs")
        if pilots.uplink.shape != (len(ofdm.comm_pilots),):
            raise ConfigError("uplink pilots do not match the configs")
        # The multibounce basis never moves; build it once.
        abar = steering_vector(array, ad_grid.angles)  # (M, U)
        dbar = delay_vector(ofdm, ad_grid.delays, ofdm.comm_pilots)  # (|N_u|, V)
        self._phi_c2 = np.kron(pilots.uplink[:, None] * dbar, abar)
        self._warm = None

    def initial_params(self, user_prior_mean) -> SensingParams:
        """Uniform grid, user at its prior mean, zero time offset."""
        return SensingParams(
            r=self.pos_grid.points.copy(),
            p_u=np.asarray(user_prior_mean, dtype=float).copy(),
            tau_o=0.0,
        )

    def _radar_stack(self, positions, n_list, with_grads: bool):
        """Columns e^{-j 2 pi n f0 tau(r)} (v_n^T a) a stacked over n.

        Returns (cols, d_cols) with cols of shape (M * len(n), Q) and
        d_cols of shape (M * len(n), Q, 2) or None.
        """
        array, V = self.array, self.pilots.downlink
        m = array.num_antennas
        positions = np.atleast_2d(positions)
        if np.any(np.all(positions == self.bs, axis=-1)):
            raise GeometryError("grid point coincides with the base station")
        thetas = aoa(self.bs, positions)
        taus = radar_round_trip_delay(self.bs, positions, self.c)
        A = steering_vector(array, thetas)  # (M, Q)
        P = delay_vector(self.ofdm, taus, n_list)  # (n, Q)
        W = V @ A  # (n, Q)
        cols = np.einsum("nq,mq->nmq", P * W, A).reshape(m * len(n_list), -1)
        if not with_grads:
            return cols, None
        dA = steering_derivative(array, thetas)  # (M, Q)
        dW = V @ dA  # (n, Q)
        dtheta = aoa_gradient(self.bs, positions)  # (Q, 2)
        dtau = radar_delay_gradient(self.bs, positions, self.c)  # (Q, 2)
        nfac = -2j * np.pi * self.ofdm.subcarrier_spacing * np.asarray(n_list)  # (n,)
        d_cols = np.empty((m * len(n_list), positions.shape[0], 2), dtype=complex)
        for axis in range(2):
            # product rule over the delay phase, the pilot projection, and
            # the steering vector
            dP = P * (nfac[:, None] * dtau[None, :, axis])
            part = np.einsum("nq,mq->nmq", dP * W + P * dW * dtheta[None, :, axis], A)
            part += np.einsum("nq,mq->nmq", P * W, dA * dtheta[None, :, axis])
            d_cols[:, :, axis] = part.reshape(m * len(n_list), -1)
        return cols, d_cols

    def build(self, theta: SensingParams, with_grads: bool = False):
        """Assemble Phi(theta); optionally also its column derivatives."""
        array, ofdm = self.array, self.ofdm
        m = array.num_antennas
        n_b, n_u = ofdm.radar_pilots, ofdm.comm_pilots
        u = self.pilots.uplink
        r, p_u, tau_o = theta.r, theta.p_u, theta.tau_o
        f0 = ofdm.subcarrier_spacing

        # Radar block: user-echo column + dynamic-grid columns.
        phi_r1, d_r1 = self._radar_stack(r, n_b, with_grads)
        col_r0, d_r0 = self._radar_stack(p_u[None, :], n_b, with_grads)
        phi_r = np.concatenate([col_r0, phi_r1], axis=1)

        # Comm block: LoS column, single-bounce columns, fixed multibounce basis.
        theta_q = aoa(self.bs, r)
        A = steering_vector(array, theta_q)  # (M, Q)
        tau_c = single_bounce_relative_delay(self.bs, r, p_u, self.c)
        Pc = delay_vector(ofdm, tau_c + tau_o, n_u)  # (n, Q)
        phi_c1 = np.einsum("n,nq,mq->nmq", u, Pc, A).reshape(m * len(n_u), -1)

        theta_u = aoa(self.bs, p_u)
        a_u = steering_vector(array, theta_u)  # (M,)
        ramp_o = delay_vector(ofdm, tau_o, n_u)  # (n,)
        col_c0 = np.einsum("n,m->nm", u * ramp_o, a_u).reshape(-1, 1)

        phi_c = np.concatenate([col_c0, phi_c1, self._phi_c2], axis=1)
        model = MeasurementModel(
            phi_r=phi_r, phi_c=phi_c,
            num_grid=self.pos_grid.size, num_mb=self.ad_grid.size,
        )
        if not with_grads:
            return model

        nfac = -2j * np.pi * f0 * np.asarray(n_u)
        dA = steering_derivative(array, theta_q)
        dtheta = aoa_gradient(self.bs, r)  # (Q, 2)
        d_tau_r, d_tau_u = single_bounce_delay_gradients(self.bs, r, p_u, self.c)
        d_c1 = np.empty((m * len(n_u), r.shape[0], 2), dtype=complex)
        d_c1_pu = np.empty_like(d_c1)
        for axis in range(2):
            dP = Pc * (nfac[:, None] * d_tau_r[None, :, axis])
            part = np.einsum("n,nq,mq->nmq", u, dP, A)
            part += np.einsum("n,nq,mq->nmq", u, Pc, dA * dtheta[None, :, axis])
            d_c1[:, :, axis] = part.reshape(m * len(n_u), -1)
            dPu = Pc * (nfac[:, None] * d_tau_u[None, :, axis])
            d_c1_pu[:, :, axis] = np.einsum("n,nq,mq->nmq", u, dPu, A).reshape(m * len(n_u), -1)

        da_u = steering_derivative(array, theta_u)  # (M,)
        dtheta_u = aoa_gradient(self.bs, p_u)  # (2,)
        d_c0_pu = np.einsum("n,m,k->nmk", u * ramp_o, da_u, dtheta_u).reshape(-1, 2)

        d_c_tauo = np.concatenate(
            [(col_c0 * np.repeat(nfac, m)[:, None]),
             phi_c1 * np.repeat(nfac, m)[:, None]], axis=1
        )
        grads = ModelGradients(
            d_phi_xr=d_r1,
            d_phi_xc=d_c1,
            d_phi_c1_pu=d_c1_pu,
            d_r0_pu=d_r0[:, 0, :],
            d_c0_pu=d_c0_pu,
            d_c_tauo=d_c_tauo,
        )
        return model, grads

    def build_with_T(self, theta: SensingParams) -> MeasurementModel:
        """Assemble and bound; warm-starts the power iteration across calls."""
        model = self.build(theta)
        _, _, self._warm = compute_T(model, warm_start=self._warm)
        return model
