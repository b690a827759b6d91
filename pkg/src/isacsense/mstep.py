"""Surrogate maximization: grid/user/offset refinement and MRF learning.

The sensing parameters theta = {r, p_u, tau_o} ascend the EM surrogate

    Q_theta = -(y - Phi mu)^H Gamma (y - Phi mu) - tr(Gamma Phi Sigma Phi^H)
              + ln p(theta)

with Armijo backtracking per block in the order r -> p_u -> tau_o. The MRF
parameters zeta ascend the expected log pseudo-likelihood of the joint
support field under the factorized posterior from the message-passing
module; the partition function never appears.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product as iter_product

import numpy as np

from .errors import ConfigError
from .geometry import Region
from .grids import MeasurementBuilder, MeasurementModel, SensingParams
from .priors import MrfParams, to_grid


@dataclass(frozen=True)
class StepControl:
    """Armijo backtracking parameters."""

    shrink: float = 0.5
    sufficient_decrease: float = 1e-4
    max_backtracks: int = 20


@dataclass(frozen=True)
class ThetaPrior:
    """Prior over the sensing parameters: Gaussian on p_u, boxes elsewhere."""

    user_mean: np.ndarray
    user_var: float  # sigma_p^2, split across the two coordinates
    region: Region
    tau_bound: float


def log_prior_theta(theta: SensingParams, prior: ThetaPrior) -> float:
    d = theta.p_u - prior.user_mean
    return -float(d @ d) / prior.user_var


@dataclass
class PosteriorSummary:
    """What the M-step needs from the E-step."""

    mu: np.ndarray
    sigma_diag: np.ndarray
    gamma_r: float
    gamma_c: float
    sigma_r_full: np.ndarray | None = None
    sigma_c_full: np.ndarray | None = None

    @property
    def dense(self) -> bool:
        return self.sigma_r_full is not None


def surrogate_q_theta(builder: MeasurementBuilder, theta: SensingParams,
                      post: PosteriorSummary, y: np.ndarray, prior: ThetaPrior,
                      model: MeasurementModel | None = None) -> float:
    """Evaluate Q_theta; ``model`` may pass in an already-built Phi(theta)."""
    if model is None:
        model = builder.build(theta)
    resid = y - model.matvec(post.mu)
    g_obs = model.gamma_obs(post.gamma_r, post.gamma_c)
    value = -float(np.real(np.vdot(resid, g_obs * resid)))
    if post.dense:
        value -= post.gamma_r * float(np.real(np.sum((model.phi_r @ post.sigma_r_full) * model.phi_r.conj())))
        value -= post.gamma_c * float(np.real(np.sum((model.phi_c @ post.sigma_c_full) * model.phi_c.conj())))
    else:
        g_coef = model.gamma_coef(post.gamma_r, post.gamma_c)
        value -= float(np.sum(post.sigma_diag * g_coef * model.column_norms_sq()))
    return value + log_prior_theta(theta, prior)


@dataclass
class ThetaGrads:
    r: np.ndarray  # (Q, 2)
    p_u: np.ndarray  # (2,)
    tau_o: float

    def sq_norm(self) -> float:
        return float(np.sum(self.r ** 2) + np.sum(self.p_u ** 2) + self.tau_o ** 2)


def grad_theta(builder: MeasurementBuilder, theta: SensingParams,
               post: PosteriorSummary, y: np.ndarray, prior: ThetaPrior) -> ThetaGrads:
    """Analytic gradient of Q_theta via per-column derivatives of Phi."""
    model, grads = builder.build(theta, with_grads=True)
    resid = y - model.matvec(post.mu)
    g_obs = model.gamma_obs(post.gamma_r, post.gamma_c)
    weighted = g_obs * resid
    wr, wc = weighted[: model.rows_r], weighted[model.rows_r:]
    mu = post.mu

    # Columns that move with each parameter, paired with their data weights.
    mu_xr = mu[model.idx_xr]
    mu_xc = mu[model.idx_xc]

    def data_term(w_vec, d_cols, mu_cols):
        # 2 Re{ mu_i * <Gamma resid, d phi_i> } accumulated per column
        inner = np.einsum("n,nqa->qa", w_vec.conj(), d_cols)
        return 2.0 * np.real(mu_cols[:, None] * inner)

    def trace_term_diag(phi_cols, d_cols, weights):
        inner = np.einsum("nq,nqa->qa", phi_cols.conj(), d_cols)
        return -2.0 * np.real(weights[:, None] * inner)

    def trace_term_dense(c_cols, d_cols):
        inner = np.einsum("nqa,nq->qa", d_cols.conj(), c_cols)
        return -2.0 * np.real(inner)

    if post.dense:
        c_r = post.gamma_r * (model.phi_r @ post.sigma_r_full)
        c_c = post.gamma_c * (model.phi_c @ post.sigma_c_full)
    else:
        g_coef = model.gamma_coef(post.gamma_r, post.gamma_c)
        w_cols = post.sigma_diag * g_coef

    # --- dynamic grid points ------------------------------------------------
    g_r = data_term(wr, grads.d_phi_xr, mu_xr) + data_term(wc, grads.d_phi_xc, mu_xc)
    if post.dense:
        g_r += trace_term_dense(c_r[:, model.idx_xr], grads.d_phi_xr)
        g_r += trace_term_dense(c_c[:, 1 : 1 + model.num_grid], grads.d_phi_xc)
    else:
        g_r += trace_term_diag(model.phi_r[:, 1:], grads.d_phi_xr, w_cols[model.idx_xr])
        g_r += trace_term_diag(model.phi_c[:, 1 : 1 + model.num_grid], grads.d_phi_xc,
                               w_cols[model.idx_xc])

    # --- user position -------------------------------------------------------
    g_pu = 2.0 * np.real(mu[model.idx_r0] * np.einsum("n,na->a", wr.conj(), grads.d_r0_pu))
    g_pu += 2.0 * np.real(mu[model.idx_c0] * np.einsum("n,na->a", wc.conj(), grads.d_c0_pu))
    g_pu += data_term(wc, grads.d_phi_c1_pu, mu_xc).sum(axis=0)
    if post.dense:
        g_pu += trace_term_dense(c_r[:, :1], grads.d_r0_pu[:, None, :]).sum(axis=0)
        g_pu += trace_term_dense(c_c[:, :1], grads.d_c0_pu[:, None, :]).sum(axis=0)
        g_pu += trace_term_dense(c_c[:, 1 : 1 + model.num_grid], grads.d_phi_c1_pu).sum(axis=0)
    else:
        g_pu += trace_term_diag(model.phi_r[:, :1], grads.d_r0_pu[:, None, :],
                                w_cols[model.idx_r0 : model.idx_r0 + 1]).sum(axis=0)
        g_pu += trace_term_diag(model.phi_c[:, :1], grads.d_c0_pu[:, None, :],
                                w_cols[model.idx_c0 : model.idx_c0 + 1]).sum(axis=0)
        g_pu += trace_term_diag(model.phi_c[:, 1 : 1 + model.num_grid], grads.d_phi_c1_pu,
                                w_cols[model.idx_xc]).sum(axis=0)
    g_pu += -2.0 * (theta.p_u - prior.user_mean) / prior.user_var

    # --- time offset ----------------------------------------------------------
    mu_c_head = np.concatenate([[mu[model.idx_c0]], mu_xc])
    inner = np.einsum("n,nq->q", wc.conj(), grads.d_c_tauo)
    g_tau = float(np.sum(2.0 * np.real(mu_c_head * inner)))
    if post.dense:
        inner2 = np.einsum("nq,nq->q", grads.d_c_tauo.conj(), c_c[:, : 1 + model.num_grid])
        g_tau += float(np.sum(-2.0 * np.real(inner2)))
    # The diagonal trace term is phase-invariant in tau_o (columns only
    # rotate), so it contributes nothing.

    return ThetaGrads(r=g_r, p_u=g_pu, tau_o=g_tau)


def grad_theta_fd(builder: MeasurementBuilder, theta: SensingParams,
                  post: PosteriorSummary, y: np.ndarray, prior: ThetaPrior,
                  rel_h: float = 1e-4) -> ThetaGrads:
    """Central finite differences of Q_theta; the oracle mode."""

    def q_of(th):
        return surrogate_q_theta(builder, th, post, y, prior)

    def step(value):
        return rel_h * max(1.0, abs(value))

    g_r = np.zeros_like(theta.r)
    for q in range(theta.r.shape[0]):
        for axis in range(2):
            h = step(theta.r[q, axis])
            for sign, bucket in ((+1, 1), (-1, -1)):
                th = theta.copy()
                th.r[q, axis] += sign * h
                if sign > 0:
                    hi = q_of(th)
                else:
                    lo = q_of(th)
            g_r[q, axis] = (hi - lo) / (2 * h)
    g_pu = np.zeros(2)
    for axis in range(2):
        h = step(theta.p_u[axis])
        th_hi, th_lo = theta.copy(), theta.copy()
        th_hi.p_u[axis] += h
        th_lo.p_u[axis] -= h
        g_pu[axis] = (q_of(th_hi) - q_of(th_lo)) / (2 * h)
    h = rel_h * max(1e-9, abs(theta.tau_o))
    th_hi, th_lo = theta.copy(), theta.copy()
    th_hi.tau_o += h
    th_lo.tau_o -= h
    g_tau = (q_of(th_hi) - q_of(th_lo)) / (2 * h)
    return ThetaGrads(r=g_r, p_u=g_pu, tau_o=float(g_tau))


def _armijo(objective, x0, grad, step_scale: float, ctrl: StepControl, project):
    """Backtracking ascent for one parameter block; returns (x, f, step)."""
    f0 = objective(x0)
    g = np.asarray(grad, dtype=float)
    gmax = float(np.max(np.abs(g))) if g.size else 0.0
    if not np.isfinite(gmax) or gmax == 0.0:
        return x0, f0, 0.0
    g2 = float(np.sum(g * g))
    t = step_scale / gmax
    for _ in range(ctrl.max_backtracks):
        x1 = project(x0 + t * g)
        f1 = objective(x1)
        if f1 >= f0 + ctrl.sufficient_decrease * t * g2:
            return x1, f1, t
        t *= ctrl.shrink
    return x0, f0, 0.0


@dataclass(frozen=True)
class ThetaStepScales:
    """Largest first-trial move per block (own units)."""

    r: float = 1.0  # meters
    p_u: float = 0.5  # meters
    tau_o: float = 1e-8  # seconds


def update_theta(builder: MeasurementBuilder, theta: SensingParams,
                 post: PosteriorSummary, y: np.ndarray, prior: ThetaPrior,
                 ctrl: StepControl = StepControl(),
                 scales: ThetaStepScales = ThetaStepScales(),
                 update_user: bool = True) -> tuple[SensingParams, float]:
    """One ascent pass over r, then p_u, then tau_o; Q_theta never decreases.

    ``update_user=False`` freezes p_u and tau_o (the genie wiring). Returns
    the new parameters and the final surrogate value.
    """
    theta = theta.copy()

    grads = grad_theta(builder, theta, post, y, prior)
    r0 = theta.r.copy()

    def f_r(r_flat):
        th = theta.copy()
        th.r = r_flat.reshape(-1, 2)
        return surrogate_q_theta(builder, th, post, y, prior)

    def proj_r(r_flat):
        return prior.region.clip(r_flat.reshape(-1, 2)).ravel()

    r_new, value, _ = _armijo(f_r, r0.ravel(), grads.r.ravel(), scales.r, ctrl, proj_r)
    theta.r = r_new.reshape(-1, 2)

    if update_user:
        grads = grad_theta(builder, theta, post, y, prior)

        def f_pu(pu):
            th = theta.copy()
            th.p_u = pu
            return surrogate_q_theta(builder, th, post, y, prior)

        pu_new, value, _ = _armijo(f_pu, theta.p_u.copy(), grads.p_u, scales.p_u, ctrl,
                                   lambda x: x)
        theta.p_u = pu_new

        grads = grad_theta(builder, theta, post, y, prior)

        def f_tau(tau_arr):
            th = theta.copy()
            th.tau_o = float(tau_arr[0])
            return surrogate_q_theta(builder, th, post, y, prior)

        def proj_tau(tau_arr):
            return np.clip(tau_arr, -prior.tau_bound, prior.tau_bound)

        tau_new, value, _ = _armijo(f_tau, np.array([theta.tau_o]),
                                    np.array([grads.tau_o]), scales.tau_o, ctrl, proj_tau)
        theta.tau_o = float(tau_new[0])
    return theta, value


# ---------------------------------------------------------------------------
# Pseudo-likelihood learning of the MRF parameters
# ---------------------------------------------------------------------------


def _interior_mask(rows: int, cols: int) -> np.ndarray:
    """Interior nodes: away from every boundary of a dimension of size > 1."""
    mask = np.ones((rows, cols), dtype=bool)
    if rows > 1:
        mask[0, :] = False
        mask[-1, :] = False
    if cols > 1:
        mask[:, 0] = False
        mask[:, -1] = False
    return mask


def _neighbors(mrf: MrfParams, i: int, j: int):
    """[(i', j', beta, 'right'|'down', edge-index)] for the 4-neighborhood."""
    h, w = mrf.shape
    out = []
    if j > 0:
        out.append((i, j - 1, mrf.beta_right[i, j - 1], "right", (i, j - 1)))
    if j < w - 1:
        out.append((i, j + 1, mrf.beta_right[i, j], "right", (i, j)))
    if i > 0:
        out.append((i - 1, j, mrf.beta_down[i - 1, j], "down", (i - 1, j)))
    if i < h - 1:
        out.append((i + 1, j, mrf.beta_down[i, j], "down", (i, j)))
    return out


def _node_expectations(mrf: MrfParams, p_plus: np.ndarray, i: int, j: int):
    """Exact expectations over the factorized neighbor configurations.

    Returns (E[tanh(u)], {edge: E[s_nbr tanh(u)]}, E[ln 2 cosh(u)]) with
    u = sum_k beta_k s_k - alpha_q.
    """
    nbrs = _neighbors(mrf, i, j)
    e_tanh = 0.0
    e_cosh = 0.0
    e_s_tanh = {nb[:2]: 0.0 for nb in nbrs}
    for signs in iter_product((-1.0, 1.0), repeat=len(nbrs)):
        weight = 1.0
        u = -mrf.alpha[i, j]
        for s, nb in zip(signs, nbrs):
            pi, pj, beta = nb[0], nb[1], nb[2]
            weight *= p_plus[pi, pj] if s > 0 else 1.0 - p_plus[pi, pj]
            u += beta * s
        t = np.tanh(u)
        e_tanh += weight * t
        e_cosh += weight * (np.log(2.0) + np.abs(u) + np.log1p(np.exp(-2.0 * np.abs(u))))
        for s, nb in zip(signs, nbrs):
            e_s_tanh[nb[:2]] += weight * s * t
    return e_tanh, e_s_tanh, e_cosh


def pl_objective(mrf: MrfParams, pi_s_bar: np.ndarray) -> float:
    """E_q[ln PL(s_bar; zeta)] over interior nodes, factorized posterior q."""
    h, w = mrf.shape
    interior = _interior_mask(h, w)
    if not interior.any():
        raise ConfigError("grid too small for pseudo-likelihood learning")
    p_plus = to_grid(np.asarray(pi_s_bar, dtype=float), h, w)
    m = 2.0 * p_plus - 1.0
    total = 0.0
    for i in range(h):
        for j in range(w):
            if not interior[i, j]:
                continue
            _, _, e_cosh = _node_expectations(mrf, p_plus, i, j)
            pair = sum(nb[2] * m[nb[0], nb[1]] for nb in _neighbors(mrf, i, j))
            total += -mrf.alpha[i, j] * m[i, j] + pair * m[i, j] - e_cosh
    return float(total)


def pl_grad_zeta(mrf: MrfParams, pi_s_bar: np.ndarray):
    """Gradients of the expected log pseudo-likelihood w.r.t. alpha and beta.

    Returns (g_alpha (H, W), g_beta_right, g_beta_down); entries belonging
    to nodes or edges outside the pseudo-likelihood product are zero.
    """
    h, w = mrf.shape
    interior = _interior_mask(h, w)
    if not interior.any():
        raise ConfigError("grid too small for pseudo-likelihood learning")
    p_plus = to_grid(np.asarray(pi_s_bar, dtype=float), h, w)
    m = 2.0 * p_plus - 1.0
    g_alpha = np.zeros_like(mrf.alpha)
    g_beta_right = np.zeros_like(mrf.beta_right)
    g_beta_down = np.zeros_like(mrf.beta_down)
    for i in range(h):
        for j in range(w):
            if not interior[i, j]:
                continue
            e_tanh, e_s_tanh, _ = _node_expectations(mrf, p_plus, i, j)
            g_alpha[i, j] = -m[i, j] + e_tanh
            for nb in _neighbors(mrf, i, j):
                contrib = m[nb[0], nb[1]] * m[i, j] - e_s_tanh[nb[:2]]
                if nb[3] == "right":
                    g_beta_right[nb[4]] += contrib
                else:
                    g_beta_down[nb[4]] += contrib
    return g_alpha, g_beta_right, g_beta_down


def update_zeta(mrf: MrfParams, pi_s_bar: np.ndarray,
                ctrl: StepControl = StepControl(), step_scale: float = 0.25,
                clamp: float = 5.0) -> tuple[MrfParams, float]:
    """Armijo ascent on the expected log pseudo-likelihood, alpha then beta."""
    g_alpha, g_br, g_bd = pl_grad_zeta(mrf, pi_s_bar)
    current = mrf.copy()

    def f_alpha(alpha_flat):
        trial = current.copy()
        trial.alpha = alpha_flat.reshape(current.alpha.shape)
        return pl_objective(trial, pi_s_bar)

    clip = lambda x: np.clip(x, -clamp, clamp)
    alpha_new, value, _ = _armijo(f_alpha, current.alpha.ravel(), g_alpha.ravel(),
                                  step_scale, ctrl, clip)
    current.alpha = alpha_new.reshape(current.alpha.shape)

    nb_sizes = (current.beta_right.size, current.beta_down.size)

    def f_beta(beta_flat):
        trial = current.copy()
        trial.beta_right = beta_flat[: nb_sizes[0]].reshape(current.beta_right.shape)
        trial.beta_down = beta_flat[nb_sizes[0]:].reshape(current.beta_down.shape)
        return pl_objective(trial, pi_s_bar)

    _, g_br, g_bd = pl_grad_zeta(current, pi_s_bar)
    beta0 = np.concatenate([current.beta_right.ravel(), current.beta_down.ravel()])
    gbeta = np.concatenate([g_br.ravel(), g_bd.ravel()])
    beta_new, value, _ = _armijo(f_beta, beta0, gbeta, step_scale, ctrl, clip)
    current.beta_right = beta_new[: nb_sizes[0]].reshape(current.beta_right.shape)
    current.beta_down = beta_new[nb_sizes[0]:].reshape(current.beta_down.shape)
    return current, value
