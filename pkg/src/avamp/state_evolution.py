"""
state_evolution.py: deterministic scalar recursion predicting the
per-iteration error variances, precisions and parameter estimates of
Adaptive VAMP.

Input-side expectations (error E1, sensitivity A1, EM statistic mu1) are
integrals over R = X0 + P with X0 ~ BG(theta1_true), P ~ N(0, tau1).  They
are split into the spike branch (X0 = 0) and the slab branch, and each
branch is integrated over R with composite Gauss-Legendre panels.  Panel
breakpoints follow both the branch's own scale and the (analytically
located) switching points of the BG posterior, where the denoiser changes
over a width ~ 1/|d logodds/dr| that can be orders of magnitude narrower
than the branch itself at high SNR.

Output-side quantities are exact finite averages over the singular values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .denoiser import (
    AutoTune,
    EmClosedForm,
    FiniteGrid,
    Oracle,
    bg_em_statistic,
    bg_params_from_statistic,
    bg_posterior_moments,
    expected_log_prior,
)
from .model import BgParams, InvalidConfig

DEFAULT_ORDER = 12
SPAN = 10.0  # branch support in standard deviations


@lru_cache(maxsize=None)
def _legendre(order):
    return np.polynomial.legendre.leggauss(order)


def _composite_rule(breaks, center, sd, order):
    """Nodes/weights for E[f(R)], R ~ N(center, sd^2), over sorted breakpoints."""
    x, w = _legendre(order)
    a, b = breaks[:-1], breaks[1:]
    half = 0.5 * (b - a)
    nodes = (0.5 * (a + b))[:, None] + half[:, None] * x[None, :]
    wts = half[:, None] * w[None, :]
    nodes, wts = nodes.ravel(), wts.ravel()
    dens = np.exp(-0.5 * ((nodes - center) / sd) ** 2) / (sd * math.sqrt(2 * math.pi))
    return nodes, wts * dens


def _switch_points(gamma1, theta_hat):
    """
    Real roots of the posterior log-odds (a quadratic in r) and the local
    transition widths.
    """
    if not (0.0 < theta_hat.beta < 1.0):
        return []
    v0 = 1.0 / gamma1
    va = theta_hat.tau + v0
    qa = 0.5 * (1.0 / v0 - 1.0 / va)
    qb = theta_hat.mu / va
    qc = (
        math.log(theta_hat.beta) - math.log1p(-theta_hat.beta)
        - 0.5 * math.log(va / v0) - theta_hat.mu**2 / (2 * va)
    )
    disc = qb * qb - 4 * qa * qc
    if disc < 0 or qa <= 0:
        return []
    sq = math.sqrt(disc)
    out = []
    for root in ((-qb - sq) / (2 * qa), (-qb + sq) / (2 * qa)):
        slope = abs(2 * qa * root + qb)
        width = 1.0 / max(slope, math.sqrt(qa))
        out.append((root, width))
    return out


def _branch_breaks(center, sd, switches):
    lo, hi = center - SPAN * sd, center + SPAN * sd
    pts = [center + sd * np.linspace(-SPAN, SPAN, 4 * int(SPAN) + 1)]
    for root, width in switches:
        pts.append(root + width * np.linspace(-40.0, 40.0, 41))
    b = np.concatenate(pts)
    b = np.unique(np.clip(b, lo, hi))
    return b


@dataclass(frozen=True)
class _Branch:
    weight: float  # prior mass of the branch
    nodes: np.ndarray  # R values
    wts: np.ndarray  # quadrature weights for the branch's law of R
    m0: np.ndarray  # E[X0 | R, branch]
    v0: float  # Var[X0 | R, branch]


def _branches(gamma1, tau1, theta_hat, theta_true, order):
    switches = _switch_points(gamma1, theta_hat)
    out = []
    b0 = theta_true.beta
    if b0 < 1.0:
        if tau1 > 0:
            sd = math.sqrt(tau1)
            nodes, wts = _composite_rule(_branch_breaks(0.0, sd, switches), 0.0, sd, order)
        else:
            nodes, wts = np.zeros(1), np.ones(1)
        out.append(_Branch(1.0 - b0, nodes, wts, np.zeros_like(nodes), 0.0))
    if b0 > 0.0:
        t0, mu0 = theta_true.tau, theta_true.mu
        sd = math.sqrt(t0 + tau1)
        nodes, wts = _composite_rule(_branch_breaks(mu0, sd, switches), mu0, sd, order)
        if tau1 > 0:
            m0 = (nodes * t0 + mu0 * tau1) / (t0 + tau1)
            v0 = t0 * tau1 / (t0 + tau1)
        else:
            m0, v0 = nodes.copy(), 0.0
        out.append(_Branch(b0, nodes, wts, m0, v0))
    return out


def _check(gamma1, tau1):
    if not gamma1 > 0:
        raise ValueError("gamma1 must be positive")
    if not tau1 >= 0:
        raise ValueError("tau1 must be nonnegative")


def error_fn_e1(gamma1, tau1, theta1_hat, theta1_true, order=DEFAULT_ORDER):
    """E[(g1(X0 + P) - X0)^2] with P ~ N(0, tau1)."""
    _check(gamma1, tau1)
    total = 0.0
    for br in _branches(gamma1, tau1, theta1_hat, theta1_true, order):
        g, _ = bg_posterior_moments(br.nodes, gamma1, theta1_hat)
        total += br.weight * float(br.wts @ ((g - br.m0) ** 2 + br.v0))
    return total


def sens_a1(gamma1, tau1, theta1_hat, theta1_true, order=DEFAULT_ORDER):
    """E[g1'(X0 + P)]; g1' = gamma1 * posterior variance."""
    _check(gamma1, tau1)
    total = 0.0
    for br in _branches(gamma1, tau1, theta1_hat, theta1_true, order):
        _, pv = bg_posterior_moments(br.nodes, gamma1, theta1_hat)
        total += br.weight * float(br.wts @ (gamma1 * pv))
    return total


def se_mu1(gamma1, tau1, theta1_hat, theta1_true, order=DEFAULT_ORDER):
    """Expected EM statistic (pi, pi m, pi (m^2 + v)) under R = X0 + P."""
    _check(gamma1, tau1)
    total = np.zeros(3)
    for br in _branches(gamma1, tau1, theta1_hat, theta1_true, order):
        total += br.weight * (bg_em_statistic(br.nodes, gamma1, theta1_hat) @ br.wts)
    return total


def se_grid_scores(gamma1, tau1, theta1_hat, theta1_true, candidates, order=DEFAULT_ORDER):
    _check(gamma1, tau1)
    scores = np.zeros(len(candidates))
    for br in _branches(gamma1, tau1, theta1_hat, theta1_true, order):
        for i, c in enumerate(candidates):
            scores[i] += br.weight * float(br.wts @ expected_log_prior(br.nodes, gamma1, theta1_hat, c))
    return scores


# ---------------------------------------------------------------------------
# output side: exact averages over the spectrum


def error_fn_e2(gamma2, tau2, theta2_hat, s, theta2_true):
    """(1/N) sum [theta2_hat^2 s^2 / theta2_true + gamma2^2 tau2] / (theta2_hat s^2 + gamma2)^2."""
    s2 = np.asarray(s, dtype=float) ** 2
    den = theta2_hat * s2 + gamma2
    return float(np.mean((theta2_hat**2 * s2 / theta2_true + gamma2**2 * tau2) / den**2))


def sens_a2(gamma2, theta2_hat, s):
    s2 = np.asarray(s, dtype=float) ** 2
    return float(np.mean(gamma2 / (theta2_hat * s2 + gamma2)))


def se_mu2(gamma2, tau2, theta2_hat, s_meas, theta2_true):
    """Expected phi2 averaged over the measurement-row singular values."""
    s2 = np.asarray(s_meas, dtype=float) ** 2
    den = s2 * theta2_hat + gamma2
    return float(np.mean(gamma2**2 * (s2 * tau2 + 1.0 / theta2_true) / den**2 + s2 / den))


# ---------------------------------------------------------------------------
# recursion


@dataclass(frozen=True)
class SeConfig:
    """
    ``s`` is the zero-padded length-N singular value vector; the first
    ``m_rows`` entries belong to measurement rows.  ``deterministic_start``
    models the r10 = 0 start exactly at k = 0 (R10 is the constant 0, so
    tau10 = E[X0^2]); otherwise R10 = X0 + N(0, tau10).
    """

    theta1_true: BgParams
    theta2_true: float
    s: np.ndarray
    m_rows: int
    gamma10: float
    theta1_init: BgParams
    theta2_init: float
    n_iters: int = 40
    theta1_rule: object = EmClosedForm()
    theta2_rule: str = "em"
    order: int = DEFAULT_ORDER
    deterministic_start: bool = True
    tau10: float | None = None
    gamma_min: float = 1e-11
    gamma_max: float = 1e11

    def __post_init__(self):
        if self.tau10 is not None and self.tau10 < 0:
            raise InvalidConfig("tau10 must be nonnegative")
        if self.n_iters < 1:
            raise InvalidConfig("n_iters must be >= 1")


@dataclass
class SeState:
    k: int
    tau1: float
    tau2: float
    gamma1_bar: float
    gamma2_bar: float
    eta1_bar: float
    eta2_bar: float
    alpha1_bar: float
    alpha2_bar: float
    theta1_bar: BgParams
    theta2_bar: float
    mse1: float
    nmse1_db: float
    valid: bool = True
    flags: list = field(default_factory=list)


def _det_start_input(gamma1, theta_hat, theta_true):
    """k = 0 input-side quantities with R10 = 0: (alpha1, E1, tau2, mu1)."""
    r = np.zeros(1)
    g, pv = bg_posterior_moments(r, gamma1, theta_hat)
    g, pv = float(g[0]), float(pv[0])
    alpha = gamma1 * pv
    ex, ex2 = theta_true.beta * theta_true.mu, theta_true.second_moment
    e1 = g * g - 2 * g * ex + ex2
    c = g / (1.0 - alpha)
    tau2 = c * c - 2 * c * ex + ex2
    mu1 = bg_em_statistic(r, gamma1, theta_hat)[:, 0]
    return alpha, e1, tau2, mu1


def se_run(cfg):
    """Iterate the state evolution; stops at the first invalid iteration."""
    th0, th20 = cfg.theta1_true, cfg.theta2_true
    ex2 = th0.second_moment
    s = np.asarray(cfg.s, dtype=float)
    s_meas = s[: cfg.m_rows]
    rule = cfg.theta1_rule
    oracle1 = isinstance(rule, Oracle)
    th1 = th0 if oracle1 else cfg.theta1_init
    th2 = th20 if cfg.theta2_rule == "oracle" else cfg.theta2_init
    g1 = float(np.clip(cfg.gamma10, cfg.gamma_min, cfg.gamma_max))
    tau1 = ex2 if cfg.tau10 is None else cfg.tau10
    out = []
    for k in range(cfg.n_iters):
        flags = []
        det = cfg.deterministic_start and k == 0
        if isinstance(rule, AutoTune) and not det:
            # consistent limit of the auto-tuning estimate
            g1, th1 = 1.0 / tau1 if tau1 > 0 else cfg.gamma_max, th0
            flags.append("autotune_limit")
        if det:
            a1, e1, tau2, mu1 = _det_start_input(g1, th1, th0)
        else:
            a1 = sens_a1(g1, tau1, th1, th0, cfg.order)
            e1 = error_fn_e1(g1, tau1, th1, th0, cfg.order)
            tau2 = None
            mu1 = None
        valid = 0.0 < a1 < 1.0
        eta1 = g1 / a1 if a1 > 0 else math.inf
        g2 = eta1 - g1
        if tau2 is None and valid:
            tau2 = (e1 - a1**2 * tau1) / (1.0 - a1) ** 2
        if tau2 is None or tau2 < 0:
            valid = False
        nmse = 10 * math.log10(max(e1 / ex2, 1e-32))
        if not valid:
            out.append(SeState(k, tau1, math.nan, g1, g2, eta1, math.nan, a1, math.nan,
                               th1, th2, e1, nmse, valid=False, flags=flags + ["alpha1_or_tau2"]))
            break
        g2 = float(np.clip(g2, cfg.gamma_min, cfg.gamma_max))

        # input parameter update
        if oracle1:
            th1_next = th0
        elif isinstance(rule, FiniteGrid):
            if det:
                r = np.zeros(1)
                sc = [float(expected_log_prior(r, g1, th1, c)[0]) for c in rule.candidates]
            else:
                sc = se_grid_scores(g1, tau1, th1, th0, rule.candidates, cfg.order)
            th1_next = rule.candidates[int(np.argmax(sc))]
        elif isinstance(rule, AutoTune) and not det:
            th1_next = th0
        else:
            if mu1 is None:
                mu1 = se_mu1(g1, tau1, th1, th0, cfg.order)
            th1_next = bg_params_from_statistic(mu1, th1)

        if cfg.theta2_rule == "ml":
            th2 = th20
            g2 = float(np.clip(1.0 / tau2 if tau2 > 0 else math.inf, cfg.gamma_min, cfg.gamma_max))
            flags.append("ml_limit")

        a2 = sens_a2(g2, th2, s)
        eta2 = g2 / a2
        g1_next = eta2 - g2
        e2 = error_fn_e2(g2, tau2, th2, s, th20)
        mu2 = se_mu2(g2, tau2, th2, s_meas, th20)
        st = SeState(k, tau1, tau2, g1, g2, eta1, eta2, a1, a2, th1, th2, e1, nmse, flags=flags)
        out.append(st)
        if not (0.0 < a2 < 1.0):
            st.valid = False
            st.flags.append("alpha2")
            break
        tau1_next = (e2 - a2**2 * tau2) / (1.0 - a2) ** 2
        if tau1_next < 0:
            st.valid = False
            st.flags.append("tau1")
            break

        if cfg.theta2_rule == "em":
            th2 = 1.0 / mu2
        elif cfg.theta2_rule == "oracle":
            th2 = th20
        th1 = th1_next
        g1 = float(np.clip(g1_next, cfg.gamma_min, cfg.gamma_max))
        tau1 = tau1_next
    return out


def expected_init(theta1_true, theta2_true, s, m_rows):
    """
    Large-system limits of the data-driven initialization (theta1, theta2)
    used by the solver, with E||y||^2 = E[x^2] sum(s^2) + M / theta2.
    """
    n = len(s)
    fro = float(np.sum(np.asarray(s) ** 2))
    ey2 = theta1_true.second_moment * fro + m_rows / theta2_true
    beta = (m_rows / 2) / n
    return BgParams(beta, 0.0, ey2 / (fro * beta)), m_rows / ey2


def se_config_for_mode(mode, theta1_true, theta2_true, s, m_rows, n_iters, gamma10_scale=None,
                       order=DEFAULT_ORDER, theta1_candidates=None):
    """SeConfig mirroring vamp.mode_config for the same mode name."""
    from .vamp import GAMMA10_SCALE, mode_config

    vc = mode_config(mode, theta1_candidates=theta1_candidates)
    th1_init, th2_init = expected_init(theta1_true, theta2_true, s, m_rows)
    if isinstance(vc.theta1_rule, Oracle):
        th1_init = theta1_true
    scale = GAMMA10_SCALE if gamma10_scale is None else gamma10_scale
    return SeConfig(
        theta1_true=theta1_true, theta2_true=theta2_true, s=np.asarray(s), m_rows=m_rows,
        gamma10=scale / th1_init.second_moment, theta1_init=th1_init, theta2_init=th2_init,
        n_iters=n_iters, theta1_rule=vc.theta1_rule, theta2_rule=vc.theta2_rule, order=order,
    )
