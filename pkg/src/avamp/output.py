"""
output.py: LMMSE stage and theta2 (noise precision) adaptation.

Everything runs in the SVD basis, where Q = theta2_hat A^T A + gamma2 I is
diagonal.  Noise statistics are averaged over the M measurement rows: the
zero-padded rows beyond M carry no data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .denoiser import NumericalFailure


class NotIdentifiable(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class OutputEstimate:
    xhat2: np.ndarray
    eta2: float
    alpha2: float


def lmmse_estimate(y, r2, gamma2, theta2_hat, op):
    """
    xhat2 = Q^{-1} (theta2_hat A^T y + gamma2 r2) with eta2^{-1} = tr(Q^{-1}) / N.
    """
    if not (gamma2 > 0 and theta2_hat > 0):
        raise ValueError("gamma2 and theta2_hat must be positive")
    m = op.m
    d = 1.0 / (theta2_hat * op.s2 + gamma2)
    rhs = gamma2 * (op.V.T @ r2)
    rhs[:m] += theta2_hat * op.s_meas * (op.U.T @ y)
    xhat2 = op.V @ (d * rhs)
    alpha2 = gamma2 * float(np.mean(d))
    return OutputEstimate(xhat2=xhat2, eta2=gamma2 / alpha2, alpha2=alpha2)


def theta2_em_update(y, xhat2, op, gamma2, theta2_hat):
    """EM noise-precision update: M / (||y - A xhat2||^2 + tr(A Q^{-1} A^T))."""
    s2 = op.s2[: op.m]
    resid = y - op.apply(xhat2)
    denom = float(resid @ resid) + float(np.sum(s2 / (theta2_hat * s2 + gamma2)))
    val = op.m / denom
    if not np.isfinite(val) or denom <= 0:
        raise NumericalFailure(f"theta2 update is not finite (denominator {denom})")
    return val


def phi2(q, xi, s, gamma2, theta2_hat):
    """Per-component statistic whose average is the inverse EM theta2 update."""
    q, xi, s = np.asarray(q), np.asarray(xi), np.asarray(s)
    den = s**2 * theta2_hat + gamma2
    return gamma2**2 * (s * q + xi) ** 2 / den**2 + s**2 / den


def theta2_update_via_phi2(q, xi, s, gamma2, theta2_hat):
    return 1.0 / float(np.mean(phi2(q, xi, s, gamma2, theta2_hat)))


@dataclass(frozen=True, eq=False)
class TransformedResidual:
    """
    q = V^T (r2 - x0) and xi = -U^T w on the M measurement rows, so that
    z = S V^T r2 - U^T y equals s q + xi exactly.  xi is the negated noise
    projection; it has the same law as U^T w.
    """

    q: np.ndarray
    xi: np.ndarray
    z: np.ndarray


def transformed_residual(r2, instance):
    op = instance.op
    m = op.m
    q_full = op.V.T @ (r2 - instance.x0)
    xi = -(op.U.T @ instance.w)
    z = compute_z(r2, instance.y, op)
    return TransformedResidual(q=q_full[:m], xi=xi, z=z)


def compute_z(r2, y, op):
    """z = S V^T r2 - U^T y on the M measurement rows."""
    m = op.m
    return op.s_meas * (op.V.T @ r2)[:m] - op.U.T @ y


# ---------------------------------------------------------------------------
# ML estimate of (tau2, theta2) from binned singular values


@dataclass(frozen=True)
class BinnedSpectrumStats:
    bin_values: np.ndarray
    mu0: np.ndarray
    mu1: np.ndarray

    @property
    def L(self):
        return len(self.bin_values)


def bin_spectrum_stats(z, s, L=8):
    """
    Group squared singular values into at most L bins.

    If s^2 takes at most L distinct values each value is its own bin;
    otherwise components are split by rank into L equal-count bins and a_l
    is the within-bin mean of s^2.
    """
    z = np.asarray(z, dtype=float)
    s2 = np.asarray(s, dtype=float) ** 2
    if z.shape != s2.shape:
        raise ValueError("z and s must have the same length")
    n = len(z)
    uniq, inv = np.unique(s2, return_inverse=True)
    if len(uniq) <= L:
        labels, a = inv, uniq
    else:
        order = np.argsort(s2, kind="stable")
        labels = np.empty(n, dtype=int)
        for k, idx in enumerate(np.array_split(order, L)):
            labels[idx] = k
        a = np.bincount(labels, weights=s2, minlength=L) / np.bincount(labels, minlength=L)
    mu0 = np.bincount(labels, minlength=len(a)) / n
    mu1 = np.bincount(labels, weights=z**2, minlength=len(a)) / n
    keep = mu0 > 0
    return BinnedSpectrumStats(bin_values=a[keep], mu0=mu0[keep], mu1=mu1[keep])


def ml_objective(tau2, noise_var, stats):
    """Negative log-likelihood J(tau2, theta2) with noise_var = 1/theta2."""
    x = stats.bin_values * tau2 + noise_var
    return float(np.sum(stats.mu1 / x + stats.mu0 * np.log(x)))


def _objective_log(p, stats):
    # p = (log tau2, log noise_var); returns J, gradient, Hessian.
    # Far-out line-search trials overflow to a non-finite J and get rejected.
    a = stats.bin_values
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        et, ev = np.exp(p)
        x = a * et + ev
        f = stats.mu1 / x + stats.mu0 * np.log(x)
        fp = -stats.mu1 / x**2 + stats.mu0 / x
        fpp = 2 * stats.mu1 / x**3 - stats.mu0 / x**2
        dx = np.stack([a * et, np.full_like(a, ev)])
        g = dx @ fp
        h = (dx * fpp) @ dx.T
    h[0, 0] += g[0]
    h[1, 1] += g[1]
    return float(np.sum(f)), g, h


def _boundary_candidates(stats):
    out = []
    # tau2 = 0: noise-only fit
    out.append((0.0, float(np.sum(stats.mu1) / np.sum(stats.mu0))))
    if np.all(stats.bin_values > 0):
        out.append((float(np.sum(stats.mu1 / stats.bin_values) / np.sum(stats.mu0)), 0.0))
    return out


def _moment_start(stats):
    a = stats.bin_values
    c = stats.mu1 / stats.mu0
    lo, hi = np.argmin(a), np.argmax(a)
    tau = (c[hi] - c[lo]) / (a[hi] - a[lo])
    nv = c[lo] - a[lo] * tau
    scale = float(np.mean(c))
    tau = tau if tau > 0 else 1e-3 * scale / max(float(np.mean(a)), 1e-300)
    nv = nv if nv > 0 else 1e-3 * scale
    return np.log([tau, nv])


def _newton(stats, p0, max_iters=200, gtol=1e-13):
    p = np.array(p0, dtype=float)
    f, g, h = _objective_log(p, stats)
    for _ in range(max_iters):
        if np.max(np.abs(g)) < gtol:
            break
        lam = 0.0
        step = None
        for _try in range(60):
            try:
                hh = h + lam * np.eye(2)
                np.linalg.cholesky(hh)
                step = -np.linalg.solve(hh, g)
                break
            except np.linalg.LinAlgError:
                lam = max(2 * lam, 1e-8 * (1 + np.max(np.abs(h))))
        if step is None:
            step = -g
        t = 1.0
        while t > 1e-12:
            pn = p + t * step
            fn, gn, hn = _objective_log(pn, stats)
            if np.isfinite(fn) and fn <= f + 1e-4 * t * float(g @ step):
                break
            t *= 0.5
        else:
            break
        p, f, g, h = pn, fn, gn, hn
        if np.max(np.abs(t * step)) < 1e-15:
            break
    return p, f


def _grid_search(stats, p_center, half_width=12.0, n=64):
    us = p_center[0] + np.linspace(-half_width, half_width, n)
    vs = p_center[1] + np.linspace(-half_width, half_width, n)
    a = stats.bin_values[:, None, None]
    x = a * np.exp(us)[None, :, None] + np.exp(vs)[None, None, :]
    j = np.sum(stats.mu1[:, None, None] / x + stats.mu0[:, None, None] * np.log(x), axis=0)
    i, k = np.unravel_index(np.argmin(j), j.shape)
    return np.array([us[i], vs[k]]), float(j[i, k])


def ml_estimate_tau2_theta2(z, s, L=8, return_stats=False):
    """
    ML estimate of (tau2, theta2) under z_n = s_n Q + Xi, Q ~ N(0, tau2),
    Xi ~ N(0, 1/theta2), using binned squared singular values.

    Minimizes J by damped Newton in (log tau2, log 1/theta2) from a
    two-bin moment match; a 64 x 64 log grid is used if Newton does not
    improve on the start.  Boundary fits (tau2 = 0 or 1/theta2 = 0) are
    compared as well; theta2 = inf is returned for a noiseless fit.
    """
    stats = bin_spectrum_stats(z, s, L)
    if stats.L < 2:
        raise NotIdentifiable("squared singular values are constant; (tau2, theta2) not identifiable")
    p0 = _moment_start(stats)
    f0, _, _ = _objective_log(p0, stats)
    p, f = _newton(stats, p0)
    if not f < f0:
        pg, _ = _grid_search(stats, p0)
        p, f = _newton(stats, pg)
    best = (float(np.exp(p[0])), float(np.exp(p[1])), f)
    for tau, nv in _boundary_candidates(stats):
        fb = ml_objective(tau, nv, stats) if nv > 0 or tau > 0 else np.inf
        if fb < best[2]:
            best = (tau, nv, fb)
    tau2, nv = best[0], best[1]
    theta2 = 1.0 / nv if nv > 0 else np.inf
    if return_stats:
        return tau2, theta2, stats
    return tau2, theta2
