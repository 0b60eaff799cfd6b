"""
vamp.py: Adaptive VAMP iteration (denoiser stage, LMMSE stage, parameter
adaptation, damping) and per-iteration trace recording.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .denoiser import (
    AdaptationRule,
    AutoTune,
    DivergenceWarning,
    EmClosedForm,
    FiniteGrid,
    Oracle,
    auto_tune_theta1,
    bg_denoise,
    bg_em_statistic,
    em_update_theta1,
    grid_select_theta1,
)
from .model import BgParams, InvalidConfig
from .output import (
    NotIdentifiable,
    compute_z,
    lmmse_estimate,
    ml_estimate_tau2_theta2,
    phi2,
    theta2_em_update,
    transformed_residual,
)

THETA2_RULES = ("oracle", "em", "ml")
NMSE_FLOOR_DB = -320.0
# stand-in for an infinite noise precision in oracle mode on noiseless data
THETA2_CAP = 1e12
# default gamma10 = GAMMA10_SCALE / E[x^2]: with r10 = 0 a near-zero precision
# makes the first denoiser output the prior mean with a calibrated gamma2
GAMMA10_SCALE = 1e-6


class VampFailure(RuntimeError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


@dataclass(frozen=True)
class VampInit:
    """
    Initial values.  ``None`` fields follow the default recipe: theta1 =
    (beta=(M/2)/N, mu=0, tau=||y||^2 / (||A||_F^2 beta)), theta2 = M / ||y||^2,
    gamma10 = GAMMA10_SCALE / E[x^2] under the initial theta1.  r10 is "zero" or
    "backprojection" (A^T y rescaled to unit mean square).
    """

    gamma10: float | None = None
    theta1: BgParams | None = None
    theta2: float | None = None
    r10: str = "zero"


@dataclass(frozen=True)
class VampConfig:
    n_iters: int = 40
    theta1_rule: AdaptationRule = EmClosedForm()
    theta2_rule: str = "em"
    damping: float = 1.0
    gamma_min: float = 1e-11
    gamma_max: float = 1e11
    init: VampInit = VampInit()
    ml_bins: int = 8
    record_se_inputs: bool = True

    def __post_init__(self):
        if self.n_iters < 1:
            raise InvalidConfig("n_iters must be >= 1")
        if not (0 < self.damping <= 1):
            raise InvalidConfig("damping must lie in (0, 1]")
        if not (0 < self.gamma_min < self.gamma_max):
            raise InvalidConfig("need 0 < gamma_min < gamma_max")
        if self.theta2_rule not in THETA2_RULES:
            raise InvalidConfig(f"theta2_rule must be one of {THETA2_RULES}")
        if self.init.r10 not in ("zero", "backprojection"):
            raise InvalidConfig("init.r10 must be 'zero' or 'backprojection'")


@dataclass(frozen=True, eq=False)
class VampState:
    r1: np.ndarray
    gamma1: float
    theta1_hat: BgParams
    theta2_hat: float
    r2: np.ndarray | None = None
    gamma2: float | None = None
    xhat1: np.ndarray | None = None
    xhat2: np.ndarray | None = None
    eta1: float | None = None
    eta2: float | None = None
    k: int = 0


@dataclass
class IterationRecord:
    k: int
    gamma1: float
    eta1: float
    gamma2: float
    eta2: float
    beta_hat: float
    mu_hat: float
    tau_hat: float
    theta2_hat: float
    nmse1_db: float
    nmse2_db: float
    tau1_emp: float = math.nan
    tau2_emp: float = math.nan
    kurt1: float = math.nan
    mu1: tuple = ()
    mu2: float = math.nan
    flags: list = field(default_factory=list)


def nmse_db(xhat, x0):
    den = float(np.dot(x0, x0))
    if den == 0:
        raise ValueError("NMSE undefined for an all-zero signal")
    e = np.asarray(xhat) - x0
    ratio = float(np.dot(e, e)) / den
    if ratio <= 0:
        return NMSE_FLOOR_DB
    return max(10.0 * math.log10(ratio), NMSE_FLOOR_DB)


def default_init_params(instance):
    """Data-driven initialization of (theta1, theta2)."""
    m, n = instance.m, instance.n
    y2 = float(instance.y @ instance.y)
    beta = (m / 2) / n
    tau = y2 / (float(np.sum(instance.op.s2)) * beta)
    return BgParams(beta, 0.0, tau), m / y2


def _oracle_theta2(instance):
    return min(instance.theta2_true, THETA2_CAP)


def init_state(instance, config):
    th1_default, th2_default = default_init_params(instance)
    if isinstance(config.theta1_rule, Oracle):
        th1 = instance.theta1_true
    else:
        th1 = config.init.theta1 or th1_default
    if config.theta2_rule == "oracle":
        th2 = _oracle_theta2(instance)
    else:
        th2 = config.init.theta2 or th2_default
    g10 = config.init.gamma10 or GAMMA10_SCALE / th1.second_moment
    if config.init.r10 == "zero":
        r1 = np.zeros(instance.n)
    else:
        bp = instance.op.adjoint(instance.y)
        r1 = bp / math.sqrt(float(np.mean(bp**2)))
    g10 = float(np.clip(g10, config.gamma_min, config.gamma_max))
    return VampState(r1=r1, gamma1=g10, theta1_hat=th1, theta2_hat=th2, k=0)


def _excess_kurtosis(e):
    c = e - e.mean()
    v = np.mean(c**2)
    return float(np.mean(c**4) / v**2 - 3.0) if v > 0 else math.nan


def _damp_gamma(new, old, rho):
    return math.exp(rho * math.log(new) + (1 - rho) * math.log(old))


def _clamp(g, config, flags, tag):
    if not math.isfinite(g) and not math.isinf(g):
        return g
    if g < config.gamma_min:
        flags.append(f"{tag}_min")
        return config.gamma_min
    if g > config.gamma_max:
        flags.append(f"{tag}_max")
        return config.gamma_max
    return g


def _check_finite(trace, k, **arrays):
    for name, a in arrays.items():
        if not np.all(np.isfinite(a)):
            raise VampFailure(f"non-finite {name} at iteration {k}", trace)


def step(state, instance, config, trace=None):
    """
    One Adaptive VAMP iteration.  Returns (next_state, IterationRecord).

    Order: [auto-tune gamma1, theta1] -> denoise -> gamma2, r2 ->
    theta1 update -> [ML (tau2, theta2) replaces gamma2, theta2] -> LMMSE ->
    gamma1, r1 -> theta2 update.
    """
    trace = trace if trace is not None else []
    k = state.k
    rho = config.damping
    op, y = instance.op, instance.y
    flags = []
    r1, g1 = state.r1, state.gamma1
    rule = config.theta1_rule
    th1 = instance.theta1_true if isinstance(rule, Oracle) else state.theta1_hat
    th2 = _oracle_theta2(instance) if config.theta2_rule == "oracle" else state.theta2_hat

    # auto-tuning needs a noisy r1; the zero start vector carries no noise estimate
    autotuned = isinstance(rule, AutoTune) and k > 0
    if autotuned:
        g1, th1 = auto_tune_theta1(
            r1, g1, th1, tol=rule.tol, max_iters=rule.max_iters,
            gamma_min=config.gamma_min, gamma_max=config.gamma_max,
        )

    # input denoising
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DivergenceWarning)
        den = bg_denoise(r1, g1, th1)
    if den.clamped:
        flags.append("deriv_clamp")
    xhat1, eta1 = den.xhat1, den.eta1
    g2 = eta1 - g1
    r2 = (eta1 * xhat1 - g1 * r1) / g2
    if rho < 1 and state.r2 is not None:
        r2 = rho * r2 + (1 - rho) * state.r2
        g2 = _damp_gamma(g2, state.gamma2, rho)
    g2 = _clamp(g2, config, flags, "gamma2")
    _check_finite(trace, k, xhat1=xhat1, r2=r2, gamma2=g2)

    # input parameter update, from r1 at the precision and parameters just used
    if isinstance(rule, Oracle):
        th1_next = instance.theta1_true
    elif isinstance(rule, FiniteGrid):
        th1_next = grid_select_theta1(r1, g1, th1, rule.candidates)
    elif isinstance(rule, AutoTune) and autotuned:
        th1_next = th1
    else:
        th1_next = em_update_theta1(r1, g1, th1)

    # ML estimate of (tau2, theta2) replaces gamma2 and theta2 before the LMMSE
    # (a flat spectrum cannot separate tau2 from 1/theta2; the EM noise update stands in)
    theta2_rule = config.theta2_rule
    if theta2_rule == "ml":
        z = compute_z(r2, y, op)
        try:
            tau2_hat, th2_ml = ml_estimate_tau2_theta2(z, op.s_meas, config.ml_bins)
        except NotIdentifiable:
            flags.append("ml_not_identifiable")
            theta2_rule = "em"
        else:
            th2 = min(th2_ml, THETA2_CAP)
            g2 = _clamp(1.0 / tau2_hat if tau2_hat > 0 else math.inf, config, flags, "gamma2")

    # output estimation
    out = lmmse_estimate(y, r2, g2, th2, op)
    xhat2, eta2 = out.xhat2, out.eta2
    g1_new = eta2 - g2
    if g1_new > 0:
        r1_new = (eta2 * xhat2 - g2 * r2) / g1_new
    else:
        # A carries no information; the LMMSE output equals r2
        flags.append("gamma1_min")
        g1_new = config.gamma_min
        r1_new = xhat2.copy()
    if rho < 1 and k > 0:
        r1_new = rho * r1_new + (1 - rho) * state.r1
        g1_new = _damp_gamma(g1_new, state.gamma1, rho)
    g1_new = _clamp(g1_new, config, flags, "gamma1")
    _check_finite(trace, k, xhat2=xhat2, r1=r1_new, gamma1=g1_new)

    # output parameter update
    if theta2_rule == "em":
        th2_next = theta2_em_update(y, xhat2, op, g2, th2)
    elif theta2_rule == "oracle":
        th2_next = _oracle_theta2(instance)
    else:
        th2_next = th2

    x0 = instance.x0
    rec = IterationRecord(
        k=k, gamma1=g1, eta1=eta1, gamma2=g2, eta2=eta2,
        beta_hat=th1.beta, mu_hat=th1.mu, tau_hat=th1.tau, theta2_hat=th2,
        nmse1_db=nmse_db(xhat1, x0), nmse2_db=nmse_db(xhat2, x0), flags=flags,
    )
    if config.record_se_inputs:
        e1 = r1 - x0
        tr = transformed_residual(r2, instance)
        rec.tau1_emp = float(np.mean(e1**2))
        rec.kurt1 = _excess_kurtosis(e1)
        rec.tau2_emp = float(np.mean((op.V.T @ (r2 - x0)) ** 2))
        rec.mu1 = tuple(float(t) for t in bg_em_statistic(r1, g1, th1).mean(axis=1))
        rec.mu2 = float(np.mean(phi2(tr.q, tr.xi, op.s_meas, g2, th2)))

    new_state = VampState(
        r1=r1_new, gamma1=g1_new, theta1_hat=th1_next, theta2_hat=th2_next,
        r2=r2, gamma2=g2, xhat1=xhat1, xhat2=xhat2, eta1=eta1, eta2=eta2, k=k + 1,
    )
    return new_state, rec


def run(instance, config, return_state=False):
    """
    Run config.n_iters iterations and return the trace (and the final state
    if requested).  Failures raise VampFailure carrying the partial trace.
    """
    state = init_state(instance, config)
    trace = []
    for _ in range(config.n_iters):
        try:
            state, rec = step(state, instance, config, trace)
        except VampFailure:
            raise
        except (FloatingPointError, ValueError, np.linalg.LinAlgError) as exc:
            raise VampFailure(f"iteration {state.k}: {exc}", trace) from exc
        trace.append(rec)
    return (trace, state) if return_state else trace


MODES = ("oracle", "em", "autotune", "autotune-em", "grid")


def mode_config(mode, base=None, theta1_candidates=None):
    """
    VampConfig for a named mode: oracle (true parameters), em (BG M-step and
    EM noise update), autotune (variance auto-tuning for theta1, ML binned
    estimate for theta2), autotune-em (auto-tuning with the EM noise
    update), grid (finite candidate set for theta1).
    """
    base = base or VampConfig()
    if mode == "oracle":
        return replace(base, theta1_rule=Oracle(), theta2_rule="oracle")
    if mode == "em":
        return replace(base, theta1_rule=EmClosedForm(), theta2_rule="em")
    if mode == "autotune":
        return replace(base, theta1_rule=AutoTune(), theta2_rule="ml")
    if mode == "autotune-em":
        return replace(base, theta1_rule=AutoTune(), theta2_rule="em")
    if mode == "grid":
        if not theta1_candidates:
            raise InvalidConfig("grid mode needs theta1 candidates")
        return replace(base, theta1_rule=FiniteGrid(tuple(theta1_candidates)), theta2_rule="em")
    raise InvalidConfig(f"unknown mode {mode!r}")
