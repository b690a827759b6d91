"""Sum-product message passing over the joint-support Ising field (Module B).

The factor graph couples the radar and comm support variables through the
shared field s_bar on the H x W lattice. Messages are Bernoulli; all
products are accumulated in the log-odds domain and clipped so that
probabilities stay inside [PROB_FLOOR, 1 - PROB_FLOOR].

Direction conventions follow the lattice storage: the left/right neighbors
of flat node q are q -+ H (adjacent columns), the top/bottom neighbors are
q -+ 1 (adjacent rows). Messages into a node are stored per direction in
an (H, W, 4) array ordered [left, right, top, bottom]; absent neighbors
keep the neutral value (log-odds 0, probability 0.5).

The spatial sweep runs a fixed raster schedule: per round, one pass per
direction, each pass chaining its own direction's fresh messages while
reading the cross-direction messages from a per-round snapshot. One round
is exact on 1-D chains; the default of 4 rounds is used on loopy grids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .priors import MrfParams, PROB_FLOOR, clip_prob, to_flat

LEFT, RIGHT, TOP, BOTTOM = 0, 1, 2, 3
_LO_CAP = float(np.log((1.0 - PROB_FLOOR) / PROB_FLOOR))


def _logodds(p):
    p = clip_prob(np.asarray(p, dtype=float))
    return np.log(p) - np.log1p(-p)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -_LO_CAP, _LO_CAP)))


def inbound(pi_r_in, pi_c_in, lambda_r, lambda_c):
    """Messages from the support-coupling factors up to s_bar.

    Closed form of the sum over the branch support: with extrinsic activity
    pi and coupling probability lambda,

        pi_{u -> s_bar} = N / (N + (1 - pi)),  N = lambda*pi + (1-lambda)*(1-pi).

    Returns (pi_u_r, pi_u_c) with the same flat shape as the inputs.
    """

    def one(pi, lam):
        pi = clip_prob(np.asarray(pi, dtype=float))
        lam = np.asarray(lam, dtype=float)
        num = lam * pi + (1.0 - lam) * (1.0 - pi)
        return clip_prob(num / (num + (1.0 - pi)))

    return one(pi_r_in, lambda_r), one(pi_c_in, lambda_c)


def _edge_message(h, beta):
    """Log-odds of the message through an Ising edge given the source belief h."""
    out = np.logaddexp(h + beta, -beta) - np.logaddexp(h - beta, beta)
    return np.clip(out, -_LO_CAP, _LO_CAP)


def propagate_spatial(mrf: MrfParams, pi_u_r, pi_u_c, rounds: int = 4) -> np.ndarray:
    """Run the raster message schedule; returns kappa (H, W, 4) probabilities."""
    h_, w_ = mrf.shape
    unary = (
        _logodds(np.asarray(pi_u_r).reshape(w_, h_).T)
        + _logodds(np.asarray(pi_u_c).reshape(w_, h_).T)
        - 2.0 * mrf.alpha
    )
    msgs = np.zeros((h_, w_, 4))
    for _ in range(rounds):
        snap = msgs.copy()
        cross_tb = snap[:, :, TOP] + snap[:, :, BOTTOM]
        cross_lr = snap[:, :, LEFT] + snap[:, :, RIGHT]
        for j in range(1, w_):  # into (i, j) from its left neighbor
            h = unary[:, j - 1] + msgs[:, j - 1, LEFT] + cross_tb[:, j - 1]
            msgs[:, j, LEFT] = _edge_message(h, mrf.beta_right[:, j - 1])
        for j in range(w_ - 2, -1, -1):  # from the right neighbor
            h = unary[:, j + 1] + msgs[:, j + 1, RIGHT] + cross_tb[:, j + 1]
            msgs[:, j, RIGHT] = _edge_message(h, mrf.beta_right[:, j])
        for i in range(1, h_):  # from the top neighbor
            h = unary[i - 1, :] + msgs[i - 1, :, TOP] + cross_lr[i - 1, :]
            msgs[i, :, TOP] = _edge_message(h, mrf.beta_down[i - 1, :])
        for i in range(h_ - 2, -1, -1):  # from the bottom neighbor
            h = unary[i + 1, :] + msgs[i + 1, :, BOTTOM] + cross_lr[i + 1, :]
            msgs[i, :, BOTTOM] = _edge_message(h, mrf.beta_down[i, :])
    return _sigmoid(msgs)


@dataclass
class MrfBeliefs:
    """Module B outputs: extrinsic activity priors and the joint posterior."""

    pi_u_r: np.ndarray  # inbound messages to s_bar, flat (Q,)
    pi_u_c: np.ndarray
    kappa: np.ndarray  # spatial messages, (H, W, 4)
    sbar_to_ur: np.ndarray  # variable-to-factor messages, flat (Q,)
    sbar_to_uc: np.ndarray
    pi_out_r: np.ndarray  # messages back to the branch supports, flat (Q,)
    pi_out_c: np.ndarray
    pi_s_bar: np.ndarray  # joint support posterior, flat (Q,)


def outbound_and_joint(mrf: MrfParams, kappa: np.ndarray, pi_u_r, pi_u_c,
                       lambda_r, lambda_c) -> MrfBeliefs:
    """Variable-to-factor messages, branch priors, and the joint posterior."""
    h_, w_ = mrf.shape
    lo = np.log(kappa) - np.log1p(-kappa)
    spatial = (lo[:, :, LEFT] + lo[:, :, RIGHT]) + (lo[:, :, TOP] + lo[:, :, BOTTOM])
    lo_u_r = _logodds(np.asarray(pi_u_r).reshape(w_, h_).T)
    lo_u_c = _logodds(np.asarray(pi_u_c).reshape(w_, h_).T)
    base = spatial - 2.0 * mrf.alpha
    sbar_to_ur = _sigmoid(base + lo_u_c)
    sbar_to_uc = _sigmoid(base + lo_u_r)
    pi_s_bar = _sigmoid(base + lo_u_c + lo_u_r)
    lam_r = np.asarray(lambda_r, dtype=float).reshape(-1)
    lam_c = np.asarray(lambda_c, dtype=float).reshape(-1)
    return MrfBeliefs(
        pi_u_r=np.asarray(pi_u_r, dtype=float).reshape(-1),
        pi_u_c=np.asarray(pi_u_c, dtype=float).reshape(-1),
        kappa=kappa,
        sbar_to_ur=to_flat(sbar_to_ur),
        sbar_to_uc=to_flat(sbar_to_uc),
        pi_out_r=clip_prob(to_flat(sbar_to_ur) * lam_r),
        pi_out_c=clip_prob(to_flat(sbar_to_uc) * lam_c),
        pi_s_bar=to_flat(pi_s_bar),
    )


def pass_messages(mrf: MrfParams, pi_r_in, pi_c_in, lambda_r, lambda_c,
                  rounds: int = 4) -> MrfBeliefs:
    """Full Module B step: inbound, spatial sweeps, outbound, joint posterior."""
    pi_u_r, pi_u_c = inbound(pi_r_in, pi_c_in, lambda_r, lambda_c)
    kappa = propagate_spatial(mrf, pi_u_r, pi_u_c, rounds=rounds)
    return outbound_and_joint(mrf, kappa, pi_u_r, pi_u_c, lambda_r, lambda_c)
