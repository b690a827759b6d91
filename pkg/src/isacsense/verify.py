"""Oracle and property checks runnable from the CLI.

Each check returns a dict with ``name``, ``passed``, and a human-readable
``detail`` string; ``run_all`` prints one line per check. The acceptance
test suite drives the same functions, so the CLI and the tests cannot
drift apart.
"""

from __future__ import annotations

import time

import numpy as np

from . import ifvbi
from .baselines import exact_elbo, exact_qx
from .errors import ConfigError
from .geometry import ArrayConfig, OfdmConfig, Region
from .grids import GridConfig, MeasurementModel, SensingParams, build_grids, compute_T
from .estimator import LinkModel
from .mrf import pass_messages
from .mstep import (
    PosteriorSummary,
    ThetaPrior,
    grad_theta,
    grad_theta_fd,
    pl_grad_zeta,
    pl_objective,
)
from .priors import HyperParams, MrfParams, brute_force_mrf, to_flat
from .scene import PilotSet


# ---------------------------------------------------------------------------
# Shared scaffolding
# ---------------------------------------------------------------------------


def toy_model(phi_r: np.ndarray) -> MeasurementModel:
    """Wrap an arbitrary matrix as the radar block; trivial comm block."""
    model = MeasurementModel(
        phi_r=np.asarray(phi_r, dtype=complex),
        phi_c=np.ones((1, 1), dtype=complex),
        num_grid=phi_r.shape[1] - 1,
        num_mb=0,
    )
    compute_T(model)
    return model


def _random_instance(rng, rows: int, dim: int, rho_low: float = 0.5, rho_high: float = 2.0):
    phi = (rng.standard_normal((rows, dim)) + 1j * rng.standard_normal((rows, dim))) / np.sqrt(
        2 * rows
    )
    model = toy_model(phi)
    x = (rng.standard_normal(dim) + 1j * rng.standard_normal(dim)) / np.sqrt(2)
    y_r = phi @ x + 0.1 * (rng.standard_normal(rows) + 1j * rng.standard_normal(rows))
    y = np.concatenate([y_r, [0.0]])
    rho = rng.uniform(rho_low, rho_high, dim + 1)
    gamma = rng.uniform(0.5, 2.0)
    return model, y, rho, gamma


def _fixed_point_state(model, y, rho, gamma, iters: int):
    """Iterate only q(x) and w at frozen rho/gamma; returns the state."""
    hyper = HyperParams()
    state = ifvbi.init_state(model, hyper, y, np.full(model.dim, 0.5))
    # Pin the precision mixture mean at exactly rho for any pi.
    state.rho_rate_active = (hyper.a + 1.0) / rho
    state.rho_rate_inactive = (hyper.a_bar + 1.0) / rho
    state.gamma_r = ifvbi.GammaPosterior(gamma, 1.0)
    state.gamma_c = ifvbi.GammaPosterior(gamma, 1.0)
    for _ in range(iters):
        ifvbi.update_qx(state, model, y)
        ifvbi.update_w(state)
    return state


def small_link(seed: int = 0) -> LinkModel:
    """A tiny but fully featured link for gradient and smoke checks."""
    rng = np.random.default_rng(seed)
    array = ArrayConfig(4)
    ofdm = OfdmConfig(32, 30e3, 3.5e9, radar_pilots=(0, 8, 16, 24), comm_pilots=(0, 8, 16, 24))
    region = Region(-15.0, 15.0, -15.0, 15.0)
    grid_cfg = GridConfig(region, 10.0, num_angles=2, num_delays=2,
                          tau_min=-2e-6, tau_max=2e-6)
    pos_grid, ad_grid = build_grids(grid_cfg)
    m = array.num_antennas
    pilots = PilotSet(
        downlink=np.exp(2j * np.pi * rng.random((4, m))),
        uplink=np.exp(2j * np.pi * rng.random(4)),
    )
    return LinkModel(
        array=array, ofdm=ofdm, pilots=pilots, pos_grid=pos_grid, ad_grid=ad_grid,
        bs=np.array([-40.0, 3.0]), user_prior_mean=np.array([25.0, -2.0]),
        user_prior_var=1.0, tau_bound=2e-6,
    )


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------


def check_tree_exactness(seed: int = 0) -> dict:
    """Belief-propagation marginals vs enumeration: exact on chains, close on 3x3."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst_chain = 0.0
    for w in (2, 5, 16):
        mrf = MrfParams(
            alpha=rng.uniform(-2, 2, (1, w)),
            beta_right=rng.uniform(-2, 2, (1, w - 1)),
            beta_down=np.zeros((0, w)),
        )
        pi_r = rng.uniform(0.05, 0.95, w)
        pi_c = rng.uniform(0.05, 0.95, w)
        lam_r = rng.uniform(0.2, 0.95, w)
        lam_c = rng.uniform(0.2, 0.95, w)
        beliefs = pass_messages(mrf, pi_r, pi_c, lam_r, lam_c)
        oracle = _posterior_by_enumeration(mrf, beliefs.pi_u_r, beliefs.pi_u_c)
        worst_chain = max(worst_chain, float(np.max(np.abs(beliefs.pi_s_bar - oracle))))
    worst_loopy = 0.0
    for _ in range(5):
        mrf = MrfParams(
            alpha=rng.uniform(-2, 2, (3, 3)),
            beta_right=rng.uniform(-0.8, 0.8, (3, 2)),
            beta_down=rng.uniform(-0.8, 0.8, (2, 3)),
        )
        pi_r = rng.uniform(0.05, 0.95, 9)
        pi_c = rng.uniform(0.05, 0.95, 9)
        lam_r = rng.uniform(0.2, 0.95, 9)
        lam_c = rng.uniform(0.2, 0.95, 9)
        beliefs = pass_messages(mrf, pi_r, pi_c, lam_r, lam_c)
        oracle = _posterior_by_enumeration(mrf, beliefs.pi_u_r, beliefs.pi_u_c)
        worst_loopy = max(worst_loopy, float(np.max(np.abs(beliefs.pi_s_bar - oracle))))
    elapsed = time.perf_counter() - t0
    passed = worst_chain <= 1e-10 and worst_loopy <= 0.05 and elapsed < 10.0
    return {
        "name": "mrf_sum_product_vs_enumeration",
        "passed": bool(passed),
        "detail": (
            f"chain max err {worst_chain:.2e} (tol 1e-10), "
            f"3x3 max err {worst_loopy:.3f} (tol 0.05), {elapsed:.2f}s"
        ),
    }


def _posterior_by_enumeration(mrf: MrfParams, pi_u_r, pi_u_c) -> np.ndarray:
    """Exact s_bar marginals with the inbound evidence folded into alpha."""
    lo = lambda p: np.log(p) - np.log1p(-p)
    h_, w_ = mrf.shape
    evidence = (lo(np.asarray(pi_u_r)) + lo(np.asarray(pi_u_c))) / 2.0
    tilted = mrf.copy()
    tilted.alpha = mrf.alpha - evidence.reshape(w_, h_).T
    _, p_plus, _ = brute_force_mrf(tilted)
    return p_plus


def check_inverse_free(seed: int = 1) -> dict:
    """Converged inverse-free q(x) means vs the dense-solve oracle."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    # Orthonormal columns: agreement to 1e-6.
    raw = rng.standard_normal((40, 20)) + 1j * rng.standard_normal((40, 20))
    q_mat, _ = np.linalg.qr(raw)
    model = toy_model(q_mat)
    x = rng.standard_normal(20) + 1j * rng.standard_normal(20)
    y = np.concatenate([q_mat @ x, [0.0]])
    rho = rng.uniform(0.5, 2.0, 21)
    gamma = 1.3
    state = _fixed_point_state(model, y, rho, gamma, iters=50)
    mu_exact, _ = exact_qx(y[:-1], q_mat, gamma, rho[:-1])
    err_orth = np.linalg.norm(state.mu[:-1] - mu_exact) / np.linalg.norm(mu_exact)
    # Random well-conditioned design: 1e-3 within 200 inner iterations.
    model, y, rho, gamma = _random_instance(rng, rows=40, dim=20)
    state = _fixed_point_state(model, y, rho, gamma, iters=200)
    mu_exact, _ = exact_qx(y[:-1], model.phi_r, gamma, rho[:-1])
    err_rand = np.linalg.norm(state.mu[:-1] - mu_exact) / np.linalg.norm(mu_exact)
    elapsed = time.perf_counter() - t0
    passed = err_orth <= 1e-6 and err_rand <= 1e-3 and elapsed < 30.0
    return {
        "name": "inverse_free_vs_dense_posterior",
        "passed": bool(passed),
        "detail": (
            f"orthonormal rel err {err_orth:.2e} (tol 1e-6), "
            f"random rel err {err_rand:.2e} (tol 1e-3), {elapsed:.2f}s"
        ),
    }


def check_bound_validity(seed: int = 2) -> dict:
    """Relaxed ELBO never exceeds the exact ELBO; g(x, x) is the exact quadratic."""
    rng = np.random.default_rng(seed)
    hyper = HyperParams()
    worst_gap = -np.inf
    worst_equality = 0.0
    for _ in range(50):
        model, y, rho, gamma = _random_instance(rng, rows=16, dim=10)
        pi_in = rng.uniform(0.05, 0.95, model.dim)
        state = ifvbi.run_inner(model, hyper, y, pi_in, None, iters=rng.integers(1, 4))
        # Perturb the anchor so the bound is evaluated away from w = mu too.
        state.w = state.mu + 0.1 * (rng.standard_normal(model.dim) + 1j * rng.standard_normal(model.dim))
        relaxed = ifvbi.relaxed_elbo(state, model, hyper, y, pi_in)
        exact = exact_elbo(state, model, hyper, y, pi_in)
        worst_gap = max(worst_gap, relaxed - exact)
        x_point = state.mu
        g_val = ifvbi.g_quadratic(model, y, 1.0, 1.0, x_point, x_point)
        resid = y - model.matvec(x_point)
        exact_quad = float(np.real(np.vdot(resid, resid)))
        worst_equality = max(worst_equality, abs(g_val - exact_quad) / max(exact_quad, 1e-12))
    passed = worst_gap <= 1e-9 and worst_equality <= 1e-12
    return {
        "name": "relaxed_bound_validity",
        "passed": bool(passed),
        "detail": (
            f"max(relaxed - exact) = {worst_gap:.2e} (must be <= 1e-9), "
            f"g(x,x) max rel dev {worst_equality:.2e}"
        ),
    }


def check_gradients(seed: int = 3) -> dict:
    """Analytic theta- and zeta-gradients vs their independent oracles."""
    rng = np.random.default_rng(seed)
    link = small_link(seed)
    builder = link.builder
    theta = builder.initial_params(link.user_prior_mean)
    theta.r = theta.r + rng.uniform(-2.0, 2.0, theta.r.shape)
    theta.p_u = theta.p_u + rng.uniform(-1.0, 1.0, 2)
    theta.tau_o = 3e-7
    model = builder.build(theta)
    dim = model.dim
    post = PosteriorSummary(
        mu=(rng.standard_normal(dim) + 1j * rng.standard_normal(dim)) / np.sqrt(2),
        sigma_diag=rng.uniform(0.01, 0.5, dim),
        gamma_r=1.7,
        gamma_c=0.8,
    )
    y = model.matvec(post.mu) + 0.3 * (
        rng.standard_normal(model.rows_r + model.rows_c)
        + 1j * rng.standard_normal(model.rows_r + model.rows_c)
    )
    prior = ThetaPrior(link.user_prior_mean, link.user_prior_var,
                       link.pos_grid.region, link.tau_bound)
    g = grad_theta(builder, theta, post, y, prior)
    g_fd = grad_theta_fd(builder, theta, post, y, prior)

    def rel(a, b):
        scale = max(float(np.linalg.norm(np.atleast_1d(b))), 1e-12)
        return float(np.linalg.norm(np.atleast_1d(a) - np.atleast_1d(b))) / scale

    err_r = rel(g.r, g_fd.r)
    err_pu = rel(g.p_u, g_fd.p_u)
    err_tau = rel(g.tau_o, g_fd.tau_o)
    theta_err = max(err_r, err_pu, err_tau)

    mrf = MrfParams(
        alpha=rng.uniform(-1, 1, (3, 3)),
        beta_right=rng.uniform(-1, 1, (3, 2)),
        beta_down=rng.uniform(-1, 1, (2, 3)),
    )
    pi = rng.uniform(0.05, 0.95, 9)
    ga, gbr, gbd = pl_grad_zeta(mrf, pi)
    h = 1e-6
    fd_alpha = np.zeros_like(ga)
    for i in range(3):
        for j in range(3):
            hi, lo_ = mrf.copy(), mrf.copy()
            hi.alpha[i, j] += h
            lo_.alpha[i, j] -= h
            fd_alpha[i, j] = (pl_objective(hi, pi) - pl_objective(lo_, pi)) / (2 * h)
    fd_br = np.zeros_like(gbr)
    for i in range(3):
        for j in range(2):
            hi, lo_ = mrf.copy(), mrf.copy()
            hi.beta_right[i, j] += h
            lo_.beta_right[i, j] -= h
            fd_br[i, j] = (pl_objective(hi, pi) - pl_objective(lo_, pi)) / (2 * h)
    fd_bd = np.zeros_like(gbd)
    for i in range(2):
        for j in range(3):
            hi, lo_ = mrf.copy(), mrf.copy()
            hi.beta_down[i, j] += h
            lo_.beta_down[i, j] -= h
            fd_bd[i, j] = (pl_objective(hi, pi) - pl_objective(lo_, pi)) / (2 * h)
    zeta_vec = np.concatenate([ga.ravel(), gbr.ravel(), gbd.ravel()])
    zeta_fd = np.concatenate([fd_alpha.ravel(), fd_br.ravel(), fd_bd.ravel()])
    zeta_err = float(np.linalg.norm(zeta_vec - zeta_fd) / max(np.linalg.norm(zeta_fd), 1e-12))

    passed = theta_err < 1e-5 and zeta_err < 1e-3
    return {
        "name": "analytic_gradients_vs_finite_differences",
        "passed": bool(passed),
        "detail": (
            f"theta rel err {theta_err:.2e} (tol 1e-5: r {err_r:.1e}, "
            f"p_u {err_pu:.1e}, tau {err_tau:.1e}), zeta rel err {zeta_err:.2e} (tol 1e-3)"
        ),
    }


def check_complexity(seed: int = 4, sizes=(200, 400, 800), rows: int = 256,
                     reps: int = 15) -> dict:
    """Per-iteration cost: inverse-free near-linear in D, dense solve superquadratic."""
    rng = np.random.default_rng(seed)
    hyper = HyperParams()
    t_if, t_exact = {}, {}
    for dim in sizes:
        model, y, rho, gamma = _random_instance(rng, rows=rows, dim=dim)
        pi_in = np.full(model.dim, 0.5)
        state = ifvbi.init_state(model, hyper, y, pi_in)

        def one_inner():
            ifvbi.update_qx(state, model, y)
            ifvbi.update_w(state)
            ifvbi.update_rho_s(state, hyper, pi_in)
            ifvbi.update_gamma(state, model, hyper, y)

        one_inner()  # warm up
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            one_inner()
            times.append(time.perf_counter() - t0)
        t_if[dim] = float(np.median(times))
        times = []
        for _ in range(max(3, reps // 3)):
            t0 = time.perf_counter()
            exact_qx(y[:-1], model.phi_r, gamma, rho[:-1])
            times.append(time.perf_counter() - t0)
        t_exact[dim] = float(np.median(times))

    d1, d3 = sizes[0], sizes[-1]
    lin_ok = all(
        (t_if[b] / t_if[a]) <= 2.0 * (b / a)
        for a, b in zip(sizes[:-1], sizes[1:])
    )
    exact_ratio = t_exact[d3] / t_exact[d1]
    super_quadratic = exact_ratio >= (d3 / d1) ** 2
    lines = [f"{'D':>6} {'t_inverse_free':>16} {'t_dense_solve':>16}"]
    for dim in sizes:
        lines.append(f"{dim:>6} {t_if[dim]:>16.6f} {t_exact[dim]:>16.6f}")
    lines.append(
        f"inverse-free growth {t_if[d3] / t_if[d1]:.1f}x over {d3 // d1}x size; "
        f"dense growth {exact_ratio:.1f}x (superquadratic needs >= {(d3 // d1) ** 2}x)"
    )
    return {
        "name": "per_iteration_complexity_scaling",
        "passed": bool(lin_ok and super_quadratic),
        "detail": "\n".join(lines),
    }


ALL_CHECKS = (
    check_tree_exactness,
    check_inverse_free,
    check_bound_validity,
    check_gradients,
    check_complexity,
)


def run_all(verbose: bool = True) -> bool:
    ok = True
    for check in ALL_CHECKS:
        result = check()
        ok &= result["passed"]
        if verbose:
            status = "PASS" if result["passed"] else "FAIL"
            detail = result["detail"]
            if "\n" in detail:
                print(f"[{status}] {result['name']}:")
                for line in detail.split("\n"):
                    print(f"    {line}")
            else:
                print(f"[{status}] {result['name']}: {detail}")
    return ok
