"""
model.py: problem instances for y = A x0 + w.

A is held in SVD form A = U Diag(s) V^T.  For M < N measurements U is M x M,
V is N x N and s is zero-padded to length N, so every quadratic form in the
LMMSE stage is diagonal in the V basis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InvalidConfig(ValueError):
    pass


@dataclass(frozen=True)
class BgParams:
    """Bernoulli-Gaussian prior (1-beta) delta(x) + beta N(x; mu, tau)."""

    beta: float
    mu: float
    tau: float

    def __post_init__(self):
        if not (0.0 <= self.beta <= 1.0):
            raise InvalidConfig(f"beta must lie in [0, 1], got {self.beta}")
        if not self.tau > 0:
            raise InvalidConfig(f"tau must be positive, got {self.tau}")

    @property
    def second_moment(self) -> float:
        return self.beta * (self.mu**2 + self.tau)

    def as_tuple(self):
        return (self.beta, self.mu, self.tau)


@dataclass(frozen=True)
class SingularSpectrum:
    values: np.ndarray
    kappa: float
    frobenius_sq: float


@dataclass(frozen=True, eq=False)
class SvdOperator:
    U: np.ndarray
    s: np.ndarray
    V: np.ndarray
    m_rows: int
    s2: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = self.V.shape[0]
        if self.V.shape != (n, n):
            raise ValueError("V must be square")
        if self.U.shape != (self.m_rows, self.m_rows):
            raise ValueError(f"U must be {self.m_rows} x {self.m_rows}, got {self.U.shape}")
        if self.s.shape != (n,):
            raise ValueError(f"s must have length N={n}, got {self.s.shape}")
        if self.m_rows > n:
            raise ValueError("M > N is not supported")
        if np.any(self.s < 0):
            raise ValueError("singular values must be nonnegative")
        if np.count_nonzero(self.s[self.m_rows:]):
            raise ValueError("singular values beyond m_rows must be zero")
        object.__setattr__(self, "s2", self.s**2)

    @property
    def n(self) -> int:
        return self.V.shape[0]

    @property
    def m(self) -> int:
        return self.m_rows

    @property
    def s_meas(self) -> np.ndarray:
        """Singular values attached to the M measurement rows."""
        return self.s[: self.m_rows]

    def apply(self, x):
        return self.U @ (self.s_meas * (self.V.T @ x)[: self.m_rows])

    def adjoint(self, y):
        t = np.zeros(self.n)
        t[: self.m_rows] = self.s_meas * (self.U.T @ y)
        return self.V @ t

    def dense(self) -> np.ndarray:
        return (self.U * self.s_meas) @ self.V[:, : self.m_rows].T


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    op: SvdOperator
    x0: np.ndarray
    w: np.ndarray
    y: np.ndarray
    theta1_true: BgParams
    theta2_true: float

    @property
    def n(self):
        return self.op.n

    @property
    def m(self):
        return self.op.m


def haar_orthogonal(n, rng):
    """Haar-distributed n x n orthogonal matrix (QR with sign correction)."""
    if n < 1:
        raise InvalidConfig("dimension must be >= 1")
    z = rng.standard_normal((n, n))
    q, r = np.linalg.qr(z)
    d = np.sign(np.diag(r))
    d[d == 0] = 1.0
    return q * d


def geometric_spectrum(m, n, kappa):
    """
    Geometric singular values s_i = s_1 alpha^(i-1), i = 1..m, with
    s_1 / s_m = kappa and sum s_i^2 = n.
    """
    if not (1 <= m <= n):
        raise InvalidConfig(f"need 1 <= m <= n, got m={m}, n={n}")
    if kappa < 1:
        raise InvalidConfig(f"condition number must be >= 1, got {kappa}")
    if m == 1:
        if kappa != 1:
            raise InvalidConfig("a single singular value requires kappa = 1")
        return SingularSpectrum(np.array([np.sqrt(n)]), 1.0, float(n))
    # work in logs so kappa up to ~1e150 stays finite
    log_alpha = -np.log(kappa) / (m - 1)
    shape = np.exp(log_alpha * np.arange(m))
    s = shape * np.sqrt(n / np.sum(shape**2))
    return SingularSpectrum(s, float(s[0] / s[-1]), float(np.sum(s**2)))


def assemble_operator(u, spectrum, v):
    if isinstance(spectrum, SingularSpectrum):
        vals = np.asarray(spectrum.values, dtype=float)
    else:
        vals = np.asarray(spectrum, dtype=float)
    n = v.shape[0]
    m = u.shape[0]
    if vals.shape[0] > m:
        if np.count_nonzero(vals[m:]):
            raise ValueError("more nonzero singular values than rows")
        vals = vals[:m]
    if vals.shape[0] != m:
        raise ValueError(f"spectrum length {vals.shape[0]} does not match M={m}")
    s = np.zeros(n)
    s[:m] = vals
    return SvdOperator(U=u, s=s, V=v, m_rows=m)


def sample_bg_signal(theta1, n, rng):
    active = rng.random(n) < theta1.beta
    vals = theta1.mu + np.sqrt(theta1.tau) * rng.standard_normal(n)
    return np.where(active, vals, 0.0)


def noise_precision_for_snr(s, m, theta1, snr_db):
    """
    Noise precision giving E||A x0||^2 / E||w||^2 = 10^(snr_db/10).

    E||A x0||^2 = E[x^2] sum(s^2) under the BG prior and E||w||^2 = M / theta2.
    """
    if snr_db is None or not np.isfinite(snr_db):
        raise InvalidConfig("snr_db must be finite")
    signal = theta1.second_moment * float(np.sum(np.asarray(s, dtype=float) ** 2))
    return 10.0 ** (snr_db / 10.0) * m / signal


def snr_to_noise_precision(op, theta1, snr_db):
    return noise_precision_for_snr(op.s, op.m, theta1, snr_db)


def synthesize_instance(cfg, rng):
    """
    Draw one instance.  ``cfg`` needs m, n, kappa, snr_db and theta1_true
    attributes; snr_db = None (or +inf) gives noiseless measurements.
    """
    u = haar_orthogonal(cfg.m, rng)
    v = haar_orthogonal(cfg.n, rng)
    op = assemble_operator(u, geometric_spectrum(cfg.m, cfg.n, cfg.kappa), v)
    x0 = sample_bg_signal(cfg.theta1_true, cfg.n, rng)
    noiseless = cfg.snr_db is None or np.isposinf(cfg.snr_db)
    if noiseless:
        theta2 = np.inf
        w = np.zeros(cfg.m)
    else:
        theta2 = snr_to_noise_precision(op, cfg.theta1_true, cfg.snr_db)
        w = rng.standard_normal(cfg.m) / np.sqrt(theta2)
    y = op.apply(x0) + w
    return ProblemInstance(op=op, x0=x0, w=w, y=y, theta1_true=cfg.theta1_true, theta2_true=theta2)
