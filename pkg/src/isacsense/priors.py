"""Three-layer sparse prior and the non-stationary Ising support model.

Support values live in {-1, +1}. The joint support field s_bar follows

    p(s_bar) = exp( sum_q ( 0.5 * sum_{i in N_q} beta_iq * s_i - alpha_q ) * s_q ) / Z

on the 4-connected H x W lattice; conditioned on s_bar, the per-branch
supports s_r / s_c are Bernoulli with success probability lambda when
s_bar = +1 and are forced to -1 otherwise. Precisions are a two-component
gamma mixture (active: Gamma(a, b), inactive: Gamma(a_bar, b_bar)) and the
signals are conditionally complex Gaussian.

Grids are stored column-major (q = j * H + i), matching the position grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, SizeGuardError

PROB_FLOOR = 1e-12


def clip_prob(p):
    """Clamp probabilities away from {0, 1} for log-domain safety."""
    return np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)


@dataclass(frozen=True)
class HyperParams:
    """Gamma-mixture and Bernoulli hyperparameters of the three-layer prior."""

    a: float = 1.0
    b: float = 1.0
    a_bar: float = 1.0
    b_bar: float = 1e-5
    c: float = 1e-6
    d: float = 1e-6
    lambda_r: float = 0.5  # P(s_r = 1 | s_bar = 1)
    lambda_c: float = 0.5
    lambda_r0: float = 0.5  # user-echo activity
    lambda_c0: float = 0.5  # LoS activity
    lambda_mb: float = 0.1  # multibounce-entry activity

    def __post_init__(self):
        for name in ("a", "b", "a_bar", "b_bar", "c", "d"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("lambda_r", "lambda_c", "lambda_r0", "lambda_c0", "lambda_mb"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")


@dataclass
class MrfParams:
    """Node biases and edge couplings of the 4-connected Ising field.

    ``alpha`` has shape (H, W). ``beta_right[i, j]`` couples (i, j) with
    (i, j + 1); ``beta_down[i, j]`` couples (i, j) with (i + 1, j). The
    storage is symmetric by construction (one scalar per undirected edge).
    """

    alpha: np.ndarray
    beta_right: np.ndarray
    beta_down: np.ndarray

    def __post_init__(self):
        h, w = self.alpha.shape
        if self.beta_right.shape != (h, max(w - 1, 0)):
            raise ConfigError("beta_right shape mismatch")
        if self.beta_down.shape != (max(h - 1, 0), w):
            raise ConfigError("beta_down shape mismatch")

    @classmethod
    def uniform(cls, rows: int, cols: int, alpha: float = 0.3, beta: float = 0.6) -> "MrfParams":
        return cls(
            alpha=np.full((rows, cols), float(alpha)),
            beta_right=np.full((rows, max(cols - 1, 0)), float(beta)),
            beta_down=np.full((max(rows - 1, 0), cols), float(beta)),
        )

    @property
    def shape(self) -> tuple:
        return self.alpha.shape

    @property
    def size(self) -> int:
        return self.alpha.size

    def copy(self) -> "MrfParams":
        return MrfParams(self.alpha.copy(), self.beta_right.copy(), self.beta_down.copy())

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.alpha.ravel(), self.beta_right.ravel(), self.beta_down.ravel()])

    def edges(self):
        """Yield (q_i, q_j, beta) per undirected edge, column-major flat indices."""
        h, w = self.shape
        flat = lambda i, j: j * h + i
        for i in range(h):
            for j in range(w - 1):
                yield flat(i, j), flat(i, j + 1), self.beta_right[i, j]
        for i in range(h - 1):
            for j in range(w):
                yield flat(i, j), flat(i + 1, j), self.beta_down[i, j]

    def neighbor_field(self, s_grid: np.ndarray) -> np.ndarray:
        """sum_{i in N_q} beta_iq * s_i for every node, shape (H, W)."""
        out = np.zeros_like(self.alpha)
        if self.shape[1] > 1:
            out[:, :-1] += self.beta_right * s_grid[:, 1:]
            out[:, 1:] += self.beta_right * s_grid[:, :-1]
        if self.shape[0] > 1:
            out[:-1, :] += self.beta_down * s_grid[1:, :]
            out[1:, :] += self.beta_down * s_grid[:-1, :]
        return out


def to_grid(flat: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Column-major flat vector -> (H, W) grid."""
    return np.asarray(flat).reshape(cols, rows).T


def to_flat(grid: np.ndarray) -> np.ndarray:
    """(H, W) grid -> column-major flat vector."""
    return np.asarray(grid).T.ravel()


def mrf_unnormalized_logp(mrf: MrfParams, s) -> float:
    """Log numerator of the Ising prior at a support configuration."""
    s = np.asarray(s, dtype=float)
    grid = to_grid(s, *mrf.shape) if s.ndim == 1 else s
    if grid.shape != mrf.shape:
        raise ConfigError("support shape does not match the MRF")
    pair = 0.0
    if mrf.shape[1] > 1:
        pair += float(np.sum(mrf.beta_right * grid[:, :-1] * grid[:, 1:]))
    if mrf.shape[0] > 1:
        pair += float(np.sum(mrf.beta_down * grid[:-1, :] * grid[1:, :]))
    return pair - float(np.sum(mrf.alpha * grid))


def _all_states(q: int) -> np.ndarray:
    """(2^Q, Q) matrix of +-1 states; column q flips fastest with bit q."""
    if q > 20:
        raise SizeGuardError(f"brute force limited to Q <= 20, got {q}")
    codes = np.arange(2 ** q, dtype=np.int64)
    bits = (codes[:, None] >> np.arange(q)[None, :]) & 1
    return (2 * bits - 1).astype(np.int8)


def brute_force_mrf(mrf: MrfParams):
    """Exact log-partition, node marginals, and per-edge joint tables.

    Returns (log_z, p_plus_flat, pairwise) where p_plus_flat[q] is
    P(s_q = +1) in column-major order, and pairwise maps (q_i, q_j) to the
    2 x 2 table P(s_i = a, s_j = b) indexed by (a, b) in {-1:0, +1:1}.
    """
    q = mrf.size
    states = _all_states(q)
    alpha_flat = to_flat(mrf.alpha)
    logp = -(states @ alpha_flat).astype(float)
    edge_list = list(mrf.edges())
    for qi, qj, beta in edge_list:
        logp += beta * (states[:, qi] * states[:, qj]).astype(float)
    log_z = float(logsumexp(logp))
    weights = np.exp(logp - log_z)
    p_plus = weights @ (states == 1)
    pairwise = {}
    for qi, qj, _ in edge_list:
        table = np.zeros((2, 2))
        for a in (0, 1):
            for b in (0, 1):
                mask = (states[:, qi] == 2 * a - 1) & (states[:, qj] == 2 * b - 1)
                table[a, b] = float(weights[mask].sum())
        pairwise[(qi, qj)] = table
    return log_z, p_plus, pairwise


def gibbs_support_samples(mrf: MrfParams, n_samples: int, seed, sweeps: int = 2000,
                          burn_in: int = 500) -> np.ndarray:
    """Raster-scan Gibbs draws from the Ising field, (n_samples, Q) in {-1, +1}.

    Samples are taken at evenly spaced sweeps after burn-in; ``sweeps``
    counts the total number of full passes.
    """
    if sweeps <= burn_in:
        raise ConfigError("sweeps must exceed burn_in")
    h, w = mrf.shape
    rng = np.random.default_rng(seed)
    s = rng.choice(np.array([-1, 1], dtype=np.int8), size=(h, w))
    keep = set(np.linspace(burn_in, sweeps - 1, n_samples).astype(int).tolist())
    out = np.empty((n_samples, h * w), dtype=np.int8)
    k = 0
    uniforms = rng.random((sweeps, h, w))
    for sweep in range(sweeps):
        for j in range(w):
            for i in range(h):
                field = 0.0
                if j > 0:
                    field += mrf.beta_right[i, j - 1] * s[i, j - 1]
                if j < w - 1:
                    field += mrf.beta_right[i, j] * s[i, j + 1]
                if i > 0:
                    field += mrf.beta_down[i - 1, j] * s[i - 1, j]
                if i < h - 1:
                    field += mrf.beta_down[i, j] * s[i + 1, j]
                p_plus = 1.0 / (1.0 + np.exp(-2.0 * (field - mrf.alpha[i, j])))
                s[i, j] = 1 if uniforms[sweep, i, j] < p_plus else -1
        if sweep in keep:
            out[k] = to_flat(s)
            k += 1
    return out[:k]


@dataclass
class PriorSample:
    """Draws from the full generative prior, one row per draw."""

    s_bar: np.ndarray  # (n, Q) in {-1, +1}
    s_r: np.ndarray
    s_c: np.ndarray
    rho_r: np.ndarray  # (n, Q) precisions
    rho_c: np.ndarray
    x_r: np.ndarray  # (n, Q) complex
    x_c: np.ndarray


def sample_three_layer_prior(hyper: HyperParams, mrf: MrfParams, seed,
                             n_draws: int = 1, sweeps: int = 2000,
                             burn_in: int = 500) -> PriorSample:
    """Ancestral draws: s_bar via Gibbs, then supports, precisions, signals."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    support_seed, layer_seed = ss.spawn(2)
    s_bar = gibbs_support_samples(mrf, n_draws, support_seed, sweeps=sweeps, burn_in=burn_in)
    rng = np.random.default_rng(layer_seed)

    def branch(lam):
        active = (s_bar == 1) & (rng.random(s_bar.shape) < lam)
        s = np.where(active, 1, -1).astype(np.int8)
        shape = np.where(s == 1, hyper.a, hyper.a_bar)
        rate = np.where(s == 1, hyper.b, hyper.b_bar)
        rho = rng.gamma(shape, 1.0 / rate)
        x = (rng.standard_normal(s.shape) + 1j * rng.standard_normal(s.shape)) * np.sqrt(
            1.0 / (2.0 * rho)
        )
        return s, rho, x

    s_r, rho_r, x_r = branch(hyper.lambda_r)
    s_c, rho_c, x_c = branch(hyper.lambda_c)
    return PriorSample(s_bar=s_bar, s_r=s_r, s_c=s_c, rho_r=rho_r, rho_c=rho_c, x_r=x_r, x_c=x_c)
