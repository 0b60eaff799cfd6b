import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize

from avamp.model import geometric_spectrum
from avamp.output import (
    NotIdentifiable,
    bin_spectrum_stats,
    lmmse_estimate,
    ml_estimate_tau2_theta2,
    ml_objective,
    theta2_em_update,
    theta2_update_via_phi2,
    transformed_residual,
)

from conftest import small_instance


def dense_lmmse(a, y, r2, gamma2, theta2):
    n = a.shape[1]
    q = theta2 * a.T @ a + gamma2 * np.eye(n)
    qinv = np.linalg.inv(q)
    xhat = np.linalg.solve(q, theta2 * a.T @ y + gamma2 * r2)
    return xhat, qinv


@settings(deadline=None, max_examples=30)
@given(seed=st.integers(0, 2**31), gamma2=st.floats(0.1, 10.0), theta2=st.floats(0.1, 100.0),
       m=st.integers(4, 40), extra=st.integers(0, 24))
def test_lmmse_matches_dense(seed, gamma2, theta2, m, extra):
    # well-conditioned Q so the dense oracle itself is accurate to ~1e-12
    inst = small_instance(seed, m=m, n=m + extra)
    a = inst.op.dense()
    r2 = np.random.default_rng(seed).standard_normal(inst.n)
    out = lmmse_estimate(inst.y, r2, gamma2, theta2, inst.op)
    xhat, qinv = dense_lmmse(a, inst.y, r2, gamma2, theta2)
    np.testing.assert_allclose(out.xhat2, xhat, rtol=1e-10, atol=1e-10 * np.linalg.norm(xhat))
    assert out.alpha2 == pytest.approx(gamma2 * np.trace(qinv) / inst.n, rel=1e-10)
    assert out.eta2 == pytest.approx(inst.n / np.trace(qinv), rel=1e-10)


@pytest.mark.parametrize("gamma2,theta2", [(1e-3, 1e4), (1e3, 1e-2), (1e-4, 1e5)])
def test_lmmse_ill_conditioned_within_dense_accuracy(gamma2, theta2):
    inst = small_instance(11, m=20, n=32, kappa=100.0)
    a = inst.op.dense()
    r2 = np.random.default_rng(1).standard_normal(inst.n)
    out = lmmse_estimate(inst.y, r2, gamma2, theta2, inst.op)
    xhat, qinv = dense_lmmse(a, inst.y, r2, gamma2, theta2)
    cond = np.linalg.cond(theta2 * a.T @ a + gamma2 * np.eye(inst.n))
    tol = 50 * cond * np.finfo(float).eps
    assert np.linalg.norm(out.xhat2 - xhat) <= tol * np.linalg.norm(xhat)
    assert out.alpha2 == pytest.approx(gamma2 * np.trace(qinv) / inst.n, rel=tol)


def test_lmmse_rejects_nonpositive_precisions():
    inst = small_instance(0)
    with pytest.raises(ValueError):
        lmmse_estimate(inst.y, np.zeros(inst.n), 0.0, 1.0, inst.op)


@settings(deadline=None, max_examples=20)
@given(seed=st.integers(0, 2**31), gamma2=st.floats(1e-2, 1e2), theta2=st.floats(1e-1, 1e3))
def test_theta2_update_matches_dense_trace(seed, gamma2, theta2):
    inst = small_instance(seed, m=24, n=40)
    a = inst.op.dense()
    xhat = np.random.default_rng(seed + 1).standard_normal(inst.n)
    _, qinv = dense_lmmse(a, inst.y, xhat, gamma2, theta2)
    want = inst.m / (np.sum((inst.y - a @ xhat) ** 2) + np.trace(a @ qinv @ a.T))
    assert theta2_em_update(inst.y, xhat, inst.op, gamma2, theta2) == pytest.approx(want, rel=1e-10)


@settings(deadline=None, max_examples=40)
@given(seed=st.integers(0, 2**31), gamma2=st.floats(1e-2, 1e3), theta2=st.floats(1e-1, 1e4),
       n=st.sampled_from([16, 64, 96]))
def test_phi2_average_inverts_to_em_update(seed, gamma2, theta2, n):
    inst = small_instance(seed, m=n // 2, n=n)
    r2 = inst.x0 + np.random.default_rng(seed).standard_normal(n) * 0.3
    xhat2 = lmmse_estimate(inst.y, r2, gamma2, theta2, inst.op).xhat2
    direct = theta2_em_update(inst.y, xhat2, inst.op, gamma2, theta2)
    tr = transformed_residual(r2, inst)
    np.testing.assert_allclose(tr.z, inst.op.s_meas * tr.q + tr.xi, atol=1e-12)
    via = theta2_update_via_phi2(tr.q, tr.xi, inst.op.s_meas, gamma2, theta2)
    assert via == pytest.approx(direct, rel=1e-10)


def scalar_output_sample(n, kappa, tau2, theta2, seed):
    s = geometric_spectrum(n, 2 * n, kappa).values
    rng = np.random.default_rng(seed)
    z = s * np.sqrt(tau2) * rng.standard_normal(n) + rng.standard_normal(n) / np.sqrt(theta2)
    return z, s


def test_ml_recovers_scalar_model():
    z, s = scalar_output_sample(2**15, 10.0, 0.01, 50.0, 1)
    tau2, theta2 = ml_estimate_tau2_theta2(z, s)
    assert tau2 == pytest.approx(0.01, rel=0.05)
    assert theta2 == pytest.approx(50.0, rel=0.05)


@settings(deadline=None, max_examples=30)
@given(seed=st.integers(0, 2**31), log_tau=st.floats(-6, 1), log_nv=st.floats(-5, 1),
       kappa=st.floats(2.0, 1e3), bins=st.integers(2, 12))
def test_ml_beats_generic_optimizer(seed, log_tau, log_nv, kappa, bins):
    # independent oracle: Nelder-Mead on the same objective in log coordinates
    z, s = scalar_output_sample(400, kappa, np.exp(log_tau), np.exp(-log_nv), seed)
    tau2, theta2, stats = ml_estimate_tau2_theta2(z, s, L=bins, return_stats=True)
    ours = ml_objective(tau2, 1 / theta2 if np.isfinite(theta2) else 0.0, stats)
    f = lambda p: ml_objective(np.exp(p[0]), np.exp(p[1]), stats)
    ref = optimize.minimize(f, [log_tau, log_nv], method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 20000})
    assert ours <= ref.fun + 1e-9 * abs(ref.fun) + 1e-12


def test_ml_noiseless_boundary():
    z, s = scalar_output_sample(4000, 10.0, 0.5, 1e300, 3)
    tau2, theta2 = ml_estimate_tau2_theta2(z, s)
    assert tau2 == pytest.approx(0.5, rel=0.1)
    assert theta2 > 1e6


def test_ml_constant_spectrum_not_identifiable():
    with pytest.raises(NotIdentifiable):
        ml_estimate_tau2_theta2(np.ones(50), np.ones(50))


def test_binning():
    s = np.repeat([1.0, 2.0, 3.0], [5, 3, 2])
    z = np.arange(10.0)
    st_ = bin_spectrum_stats(z, s, L=8)
    np.testing.assert_allclose(st_.bin_values, [1.0, 4.0, 9.0])
    np.testing.assert_allclose(st_.mu0, [0.5, 0.3, 0.2])
    assert st_.mu1.sum() == pytest.approx(np.mean(z**2))
    st2 = bin_spectrum_stats(np.ones(100), np.linspace(1, 2, 100), L=4)
    assert st2.L == 4 and np.all(st2.mu0 == 0.25)
    assert np.all(np.diff(st2.bin_values) > 0)
