"""Planar geometry: angles, delays, and array/delay response vectors.

Positions are 2-D points in meters, given as array-likes of shape (2,) or
batches of shape (..., 2). The base station array is a uniform linear array
with half-wavelength spacing, so the phase progression across antennas is
pi * sin(theta) per element.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GeometryError

SPEED_OF_LIGHT = 299_792_458.0


@dataclass(frozen=True)
class ArrayConfig:
    """Uniform linear array at the base station."""

    num_antennas: int

    def __post_init__(self):
        if self.num_antennas < 1:
            raise ConfigError("num_antennas must be >= 1")


@dataclass(frozen=True)
class OfdmConfig:
    """OFDM numerology and the pilot subcarrier index sets.

    ``radar_pilots`` are the downlink sensing subcarriers, ``comm_pilots``
    the uplink estimation subcarriers. Both are subsets of 0..N-1, kept in
    ascending order; they may overlap.
    """

    num_subcarriers: int
    subcarrier_spacing: float
    carrier_freq: float
    radar_pilots: tuple = field(default=())
    comm_pilots: tuple = field(default=())

    def __post_init__(self):
        for name in ("radar_pilots", "comm_pilots"):
            idx = np.asarray(getattr(self, name), dtype=int)
            if idx.size < 1:
                raise ConfigError(f"{name} must contain at least one subcarrier")
            if idx.min() < 0 or idx.max() >= self.num_subcarriers:
                raise ConfigError(f"{name} outside 0..{self.num_subcarriers - 1}")
            if np.any(np.diff(idx) <= 0):
                raise ConfigError(f"{name} must be strictly ascending")
            object.__setattr__(self, name, tuple(int(n) for n in idx))

    @property
    def bandwidth(self) -> float:
        return self.num_subcarriers * self.subcarrier_spacing


@dataclass(frozen=True)
class Region:
    """Axis-aligned box containing the scene."""

    xmin: float
    xmax: float
    ymin: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ConfigError("degenerate region box")

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.xmin + self.xmax) / 2, (self.ymin + self.ymax) / 2])

    def contains(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return (
            (p[..., 0] >= self.xmin)
            & (p[..., 0] <= self.xmax)
            & (p[..., 1] >= self.ymin)
            & (p[..., 1] <= self.ymax)
        )

    def clip(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        out = p.copy()
        out[..., 0] = np.clip(out[..., 0], self.xmin, self.xmax)
        out[..., 1] = np.clip(out[..., 1], self.ymin, self.ymax)
        return out


def aoa(ref, p):
    """Angle of arrival at ``ref`` of a point ``p``, anticlockwise from +x.

    Computed as arctan(dy/dx) + pi * 1(dx < 0), which lands in
    (-pi/2, 3*pi/2). The vertical case dx == 0 returns +-pi/2 by the sign
    of dy. Vectorized over a trailing batch of points.
    """
    ref = np.asarray(ref, dtype=float)
    p = np.asarray(p, dtype=float)
    d = p - ref
    dx, dy = d[..., 0], d[..., 1]
    if np.any((dx == 0) & (dy == 0)):
        raise GeometryError("aoa undefined for coincident points")
    with np.errstate(divide="ignore"):
        theta = np.where(
            dx == 0,
            np.sign(dy) * (np.pi / 2),
            np.arctan(dy / np.where(dx == 0, 1.0, dx)) + np.pi * (dx < 0),
        )
    return theta if theta.ndim else float(theta)


def aoa_gradient(ref, p):
    """d(aoa)/dp, shape (..., 2). The branch offset is locally constant."""
    ref = np.asarray(ref, dtype=float)
    p = np.asarray(p, dtype=float)
    d = p - ref
    r2 = np.sum(d * d, axis=-1)
    if np.any(r2 == 0):
        raise GeometryError("aoa gradient undefined for coincident points")
    return np.stack([-d[..., 1] / r2, d[..., 0] / r2], axis=-1)


def radar_round_trip_delay(bs, p, c: float = SPEED_OF_LIGHT):
    """Two-way propagation delay between the base station and ``p``."""
    bs = np.asarray(bs, dtype=float)
    p = np.asarray(p, dtype=float)
    return 2.0 * np.linalg.norm(p - bs, axis=-1) / c


def radar_delay_gradient(bs, p, c: float = SPEED_OF_LIGHT):
    """Gradient of the round-trip delay w.r.t. p, shape (..., 2)."""
    bs = np.asarray(bs, dtype=float)
    p = np.asarray(p, dtype=float)
    d = p - bs
    r = np.linalg.norm(d, axis=-1, keepdims=True)
    if np.any(r == 0):
        raise GeometryError("delay gradient undefined at the base station")
    return 2.0 * d / (r * c)


def single_bounce_relative_delay(bs, scatterer, user, c: float = SPEED_OF_LIGHT):
    """Excess delay of a bounce path relative to the direct bs-user path.

    Nonnegative by the triangle inequality; zero iff the scatterer lies on
    the bs-user segment.
    """
    bs = np.asarray(bs, dtype=float)
    s = np.asarray(scatterer, dtype=float)
    u = np.asarray(user, dtype=float)
    excess = (
        np.linalg.norm(bs - s, axis=-1)
        + np.linalg.norm(u - s, axis=-1)
        - np.linalg.norm(bs - u, axis=-1)
    )
    return excess / c


def single_bounce_delay_gradients(bs, scatterer, user, c: float = SPEED_OF_LIGHT):
    """Gradients of the bounce delay w.r.t. (scatterer, user), each (..., 2)."""
    bs = np.asarray(bs, dtype=float)
    s = np.asarray(scatterer, dtype=float)
    u = np.asarray(user, dtype=float)

    def unit(v):
        n = np.linalg.norm(v, axis=-1, keepdims=True)
        if np.any(n == 0):
            raise GeometryError("bounce delay gradient undefined for coincident points")
        return v / n

    d_s = (unit(s - bs) + unit(s - u)) / c
    d_u = (unit(u - s) - unit(u - bs)) / c
    return d_s, d_u


def steering_vector(cfg: ArrayConfig, theta):
    """ULA response; entry m is exp(j*pi*(m-1)*sin(theta)) / sqrt(M).

    Scalar theta gives shape (M,); a length-K batch gives (M, K). Unit
    Euclidean norm per column.
    """
    m = np.arange(cfg.num_antennas)
    s = np.sin(np.asarray(theta, dtype=float))
    phase = np.multiply.outer(m, s)
    return np.exp(1j * np.pi * phase) / np.sqrt(cfg.num_antennas)


def steering_derivative(cfg: ArrayConfig, theta):
    """d a(theta) / d theta, same shape convention as steering_vector."""
    m = np.arange(cfg.num_antennas)
    theta = np.asarray(theta, dtype=float)
    a = steering_vector(cfg, theta)
    factor = 1j * np.pi * np.multiply.outer(m, np.cos(theta))
    return factor * a


def delay_vector(cfg: OfdmConfig, tau, subcarriers=None):
    """Per-subcarrier phase ramp exp(-j*2*pi*n*f0*tau), ascending n.

    ``subcarriers`` defaults to the comm pilot set. Scalar tau gives shape
    (len(n),); a length-K batch gives (len(n), K).
    """
    n = np.asarray(cfg.comm_pilots if subcarriers is None else subcarriers)
    tau = np.asarray(tau, dtype=float)
    phase = np.multiply.outer(n, tau) * cfg.subcarrier_spacing
    return np.exp(-2j * np.pi * phase)
