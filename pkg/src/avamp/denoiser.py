"""
denoiser.py: Bernoulli-Gaussian MMSE denoiser and theta1 adaptation rules.

The denoiser sees r = x + N(0, 1/gamma1) with x ~ BG(beta, mu, tau).  All
mixture weights are computed from log-odds so that large |r| or large
gamma1 never overflow.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit, xlogy

from .model import BgParams

LOG_2PI = np.log(2 * np.pi)

DERIV_FLOOR = 1e-11
DERIV_CEIL = 1.0 - 1e-11
BETA_EPS = 1e-12


class DivergenceWarning(RuntimeWarning):
    """Average denoiser derivative left (0, 1); gamma2 = eta1 - gamma1 would not be positive."""


class NumericalFailure(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# adaptation rules


@dataclass(frozen=True)
class Oracle:
    """Keep theta1 fixed at the supplied (true) value."""

    name = "oracle"


@dataclass(frozen=True)
class EmClosedForm:
    """Closed-form BG M-step computed from the belief estimate."""

    name = "em"


@dataclass(frozen=True)
class AutoTune:
    """Joint ML of (1/gamma1, theta1) by the inner EM loop."""

    tol: float = 1e-8
    max_iters: int = 50
    name = "autotune"


@dataclass(frozen=True)
class FiniteGrid:
    """Pick the candidate maximizing the expected log prior."""

    candidates: tuple
    name = "grid"

    def __post_init__(self):
        if len(self.candidates) == 0:
            raise ValueError("FiniteGrid needs at least one candidate")
        for c in self.candidates:
            if not isinstance(c, BgParams):
                raise TypeError("FiniteGrid candidates must be BgParams")


AdaptationRule = Oracle | EmClosedForm | AutoTune | FiniteGrid


# ---------------------------------------------------------------------------
# posterior under the BG prior


def _log_normal(r, mean, var):
    return -0.5 * (LOG_2PI + np.log(var)) - 0.5 * (r - mean) ** 2 / var


def bg_log_odds(r, gamma1, theta1):
    """log P(active | r) - log P(inactive | r) for 0 < beta < 1."""
    noise_var = 1.0 / gamma1
    return (
        np.log(theta1.beta)
        - np.log1p(-theta1.beta)
        + _log_normal(r, theta1.mu, theta1.tau + noise_var)
        - _log_normal(r, 0.0, noise_var)
    )


def bg_posterior_stats(r, gamma1, theta1):
    """
    Posterior of x given r under the BG prior and Gaussian noise of precision gamma1.

    Returns (pi, m, v): probability that x is drawn from the active branch,
    and mean / variance of x conditioned on being active.
    """
    r = np.asarray(r, dtype=float)
    if not gamma1 > 0:
        raise ValueError(f"gamma1 must be positive, got {gamma1}")
    prec = gamma1 + 1.0 / theta1.tau
    m = (gamma1 * r + theta1.mu / theta1.tau) / prec
    v = 1.0 / prec
    if theta1.beta >= 1.0:
        pi = np.ones_like(r)
    elif theta1.beta <= 0.0:
        pi = np.zeros_like(r)
    else:
        pi = expit(bg_log_odds(r, gamma1, theta1))
    return pi, m, v


def bg_posterior_moments(r, gamma1, theta1):
    """Posterior mean and variance of x given r."""
    pi, m, v = bg_posterior_stats(r, gamma1, theta1)
    return pi * m, pi * v + pi * (1.0 - pi) * m**2


def bg_log_marginal(r, gamma1, theta1):
    """Per-component log p(r | gamma1, theta1)."""
    r = np.asarray(r, dtype=float)
    noise_var = 1.0 / gamma1
    la = _log_normal(r, theta1.mu, theta1.tau + noise_var)
    l0 = _log_normal(r, 0.0, noise_var)
    if theta1.beta >= 1.0:
        return la
    if theta1.beta <= 0.0:
        return l0
    return np.logaddexp(np.log1p(-theta1.beta) + l0, np.log(theta1.beta) + la)


@dataclass(frozen=True, eq=False)
class DenoiseOutput:
    xhat1: np.ndarray
    deriv_mean: float
    eta1: float
    post_var_mean: float
    deriv: np.ndarray
    clamped: bool = False


def bg_denoise(r, gamma1, theta1, floor=DERIV_FLOOR, ceil=DERIV_CEIL):
    """
    MMSE denoiser g1 and its divergence.

    The per-component derivative is gamma1 times the posterior variance.
    When the average derivative falls outside (floor, ceil) it is clamped,
    ``clamped`` is set, and a DivergenceWarning is emitted.
    """
    xhat, post_var = bg_posterior_moments(r, gamma1, theta1)
    deriv = gamma1 * post_var
    deriv_mean = float(np.mean(deriv))
    clamped = False
    if not (floor <= deriv_mean <= ceil):
        if theta1.beta > 0:
            warnings.warn(
                f"average denoiser derivative {deriv_mean:.3g} outside (0, 1)",
                DivergenceWarning,
                stacklevel=2,
            )
        deriv_mean = min(max(deriv_mean, floor), ceil)
        clamped = True
    return DenoiseOutput(
        xhat1=xhat,
        deriv_mean=deriv_mean,
        eta1=gamma1 / deriv_mean,
        post_var_mean=float(np.mean(post_var)),
        deriv=deriv,
        clamped=clamped,
    )


# ---------------------------------------------------------------------------
# EM update for theta1


def bg_em_statistic(r, gamma1, theta1):
    """
    Per-component EM statistic phi1 = (pi, pi m, pi (m^2 + v)), shape (3, N).
    """
    pi, m, v = bg_posterior_stats(r, gamma1, theta1)
    return np.stack([pi, pi * m, pi * (m**2 + v)])


def bg_params_from_statistic(mu1, theta1_old, eps=BETA_EPS):
    """
    Closed-form M-step T1: maps averaged statistics to (beta, mu, tau).

    With (almost) no active mass the previous (mu, tau) are kept and beta
    is set to ``eps``.
    """
    a, b, c = (float(t) for t in mu1)
    if a < eps:
        return BgParams(eps, theta1_old.mu, theta1_old.tau)
    mu = b / a
    tau = c / a - mu**2
    if not tau > 0:
        tau = max(c / a * 1e-12, np.finfo(float).tiny)
    return BgParams(min(a, 1.0), mu, tau)


def em_update_theta1(r, gamma1, theta1_old):
    """argmax over BG parameters of E[ln p(x | theta1) | r, gamma1, theta1_old]."""
    if theta1_old.beta <= 0.0:
        return BgParams(BETA_EPS, theta1_old.mu, theta1_old.tau)
    mu1 = bg_em_statistic(r, gamma1, theta1_old).mean(axis=1)
    return bg_params_from_statistic(mu1, theta1_old)


def _param_change(t_new, t_old):
    return max(
        abs(np.log(max(t_new.beta, BETA_EPS)) - np.log(max(t_old.beta, BETA_EPS))),
        abs(t_new.mu - t_old.mu) / np.sqrt(t_old.tau),
        abs(np.log(t_new.tau) - np.log(t_old.tau)),
    )


def auto_tune_theta1(
    r,
    gamma_init,
    theta1_init,
    tol=1e-8,
    max_iters=50,
    gamma_min=1e-11,
    gamma_max=1e11,
    history=None,
):
    """
    Variance auto-tuning: EM iterations for the joint ML estimate of
    (1/gamma1, theta1) under r = x + N(0, 1/gamma1), x ~ BG(theta1).

    Each pass denoises at the current estimate, resets 1/gamma1 to the mean
    squared denoiser residual plus the mean posterior variance, and applies
    the BG M-step.  Stops when the largest change (log gamma, log beta,
    mu / sqrt(tau), log tau) drops below ``tol``.  ``history``, if a list,
    receives every (gamma, theta) visited.
    """
    if not gamma_init > 0:
        raise ValueError("gamma_init must be positive")
    r = np.asarray(r, dtype=float)
    gamma = float(np.clip(gamma_init, gamma_min, gamma_max))
    theta = theta1_init
    if history is not None:
        history.append((gamma, theta))
    for _ in range(max_iters):
        pi, m, v = bg_posterior_stats(r, gamma, theta)
        xhat = pi * m
        post_var = pi * v + pi * (1.0 - pi) * m**2
        resid = np.mean((xhat - r) ** 2) + np.mean(post_var)
        gamma_new = 1.0 / resid if resid > 0 else np.inf
        if np.isnan(gamma_new):
            raise NumericalFailure("auto-tuning produced a NaN precision")
        gamma_new = float(np.clip(gamma_new, gamma_min, gamma_max))
        if theta.beta > 0.0:
            stat = np.array([pi.mean(), (pi * m).mean(), (pi * (m**2 + v)).mean()])
            theta_new = bg_params_from_statistic(stat, theta)
        else:
            theta_new = theta
        change = max(abs(np.log(gamma_new) - np.log(gamma)), _param_change(theta_new, theta))
        gamma, theta = gamma_new, theta_new
        if history is not None:
            history.append((gamma, theta))
        if change < tol:
            break
    return gamma, theta


# ---------------------------------------------------------------------------
# finite candidate set


def expected_log_prior(r, gamma1, theta1_hat, candidate):
    """
    E[ln p(x | candidate) | r, gamma1, theta1_hat] per component.

    The BG density is taken w.r.t. (point mass at 0) + Lebesgue, so the
    spike contributes ln(1 - beta) and the slab ln beta + ln N(x; mu, tau).
    """
    pi, m, v = bg_posterior_stats(r, gamma1, theta1_hat)
    slab = -0.5 * (LOG_2PI + np.log(candidate.tau)) - ((m - candidate.mu) ** 2 + v) / (2 * candidate.tau)
    return xlogy(1.0 - pi, 1.0 - candidate.beta) + xlogy(pi, candidate.beta) + pi * slab


def grid_select_theta1(r, gamma1, theta1_hat, candidates: Sequence[BgParams]):
    if len(candidates) == 0:
        raise ValueError("empty candidate list")
    scores = [float(np.mean(expected_log_prior(r, gamma1, theta1_hat, c))) for c in candidates]
    # np.argmax returns the first maximizer
    return candidates[int(np.argmax(scores))]
