import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avamp.denoiser import bg_em_statistic, bg_posterior_moments
from avamp.model import BgParams, geometric_spectrum, sample_bg_signal, synthesize_instance
from avamp.output import lmmse_estimate, theta2_em_update
from avamp.state_evolution import (
    SeConfig,
    error_fn_e1,
    error_fn_e2,
    expected_init,
    se_config_for_mode,
    se_mu1,
    se_mu2,
    se_run,
    sens_a1,
    sens_a2,
)

thetas = st.builds(BgParams, beta=st.floats(0.02, 0.98), mu=st.floats(-1.5, 1.5), tau=st.floats(0.1, 3.0))


def mc_input(gamma1, tau1, th_hat, th0, n=2_000_000, seed=0):
    rng = np.random.default_rng(seed)
    x = sample_bg_signal(th0, n, rng)
    r = x + math.sqrt(tau1) * rng.standard_normal(n)
    g, pv = bg_posterior_moments(r, gamma1, th_hat)
    err = (g - x) ** 2
    return err, gamma1 * pv, bg_em_statistic(r, gamma1, th_hat)


@pytest.mark.parametrize(
    "gamma1,tau1,th_hat,th0",
    [
        (10.0, 0.1, BgParams(0.1, 0.0, 1.0), BgParams(0.1, 0.0, 1.0)),
        (50.0, 0.05, BgParams(0.3, 0.5, 2.0), BgParams(0.1, 0.0, 1.0)),
        (1e4, 1e-4, BgParams(0.1, 0.0, 1.0), BgParams(0.1, 0.0, 1.0)),
        (3.0, 1.0, BgParams(0.5, -1.0, 0.5), BgParams(0.2, 1.0, 1.5)),
    ],
)
def test_input_side_matches_monte_carlo(gamma1, tau1, th_hat, th0):
    err, deriv, phi = mc_input(gamma1, tau1, th_hat, th0)
    n = err.size
    for se_val, samples in [(error_fn_e1(gamma1, tau1, th_hat, th0), err),
                            (sens_a1(gamma1, tau1, th_hat, th0), deriv)]:
        assert abs(se_val - samples.mean()) <= 5 * samples.std() / math.sqrt(n) + 1e-12
    mu1 = se_mu1(gamma1, tau1, th_hat, th0)
    for j in range(3):
        assert abs(mu1[j] - phi[j].mean()) <= 5 * phi[j].std() / math.sqrt(n) + 1e-12


@given(th=st.builds(BgParams, beta=st.just(1.0), mu=st.floats(-2, 2), tau=st.floats(0.1, 3.0)),
       tau0=st.floats(0.1, 3.0), mu0=st.floats(-2, 2), gamma1=st.floats(0.1, 100.0), tau1=st.floats(0.0, 2.0))
def test_gaussian_prior_closed_form(th, tau0, mu0, gamma1, tau1):
    # linear denoiser g(r) = c r + d under a Gaussian true prior
    th0 = BgParams(1.0, mu0, tau0)
    c = gamma1 / (gamma1 + 1 / th.tau)
    d = (th.mu / th.tau) / (gamma1 + 1 / th.tau)
    want = (c - 1) ** 2 * (tau0 + mu0**2) + c**2 * tau1 + d**2 + 2 * (c - 1) * mu0 * d
    assert error_fn_e1(gamma1, tau1, th, th0) == pytest.approx(want, rel=1e-10, abs=1e-14)
    assert sens_a1(gamma1, tau1, th, th0) == pytest.approx(c, rel=1e-12)


@settings(deadline=None, max_examples=40)
@given(th=thetas, tau1=st.floats(1e-5, 2.0))
def test_matched_mmse_identity(th, tau1):
    # matched denoiser: E[g'] = gamma1 * E[posterior variance] = mse / tau1
    e1 = error_fn_e1(1 / tau1, tau1, th, th)
    a1 = sens_a1(1 / tau1, tau1, th, th)
    assert e1 == pytest.approx(tau1 * a1, rel=1e-8)


@settings(deadline=None, max_examples=40)
@given(th_hat=thetas, th0=thetas, tau1=st.floats(1e-6, 2.0), mis=st.floats(0.3, 3.0))
def test_quadrature_order_doubling(th_hat, th0, tau1, mis):
    gamma1 = mis / tau1
    for fn in (error_fn_e1, sens_a1):
        lo = fn(gamma1, tau1, th_hat, th0, order=12)
        hi = fn(gamma1, tau1, th_hat, th0, order=24)
        assert abs(lo - hi) <= 1e-8 * max(abs(hi), 1e-300) + 1e-15


def test_zero_input_noise_limit():
    th = BgParams(0.1, 0.0, 1.0)
    # tau1 = 0: R = X0 exactly; matched gamma1 huge gives near-zero error
    assert error_fn_e1(1e10, 0.0, th, th) < 1e-9


@pytest.mark.parametrize("tau2,gamma2,theta2_hat", [(0.01, 80.0, 500.0), (0.1, 10.0, 50.0)])
def test_output_side_matches_instances(tau2, gamma2, theta2_hat):
    th = BgParams(0.1, 0.0, 1.0)
    cfg = SimpleNamespace(m=256, n=512, kappa=10.0, snr_db=30.0, theta1_true=th)
    errs, mus = [], []
    for seed in range(30):
        inst = synthesize_instance(cfg, np.random.default_rng(seed))
        rng = np.random.default_rng(1000 + seed)
        r2 = inst.x0 + math.sqrt(tau2) * rng.standard_normal(inst.n)
        out = lmmse_estimate(inst.y, r2, gamma2, theta2_hat, inst.op)
        errs.append(np.mean((out.xhat2 - inst.x0) ** 2))
        mus.append(1 / theta2_em_update(inst.y, out.xhat2, inst.op, gamma2, theta2_hat))
    s, t2 = inst.op.s, inst.theta2_true
    e2 = error_fn_e2(gamma2, tau2, theta2_hat, s, t2)
    mu2 = se_mu2(gamma2, tau2, theta2_hat, inst.op.s_meas, t2)
    assert np.mean(errs) == pytest.approx(e2, rel=4 * np.std(errs) / np.sqrt(30) / e2 + 1e-3)
    assert np.mean(mus) == pytest.approx(mu2, rel=4 * np.std(mus) / np.sqrt(30) / mu2 + 1e-3)
    assert lmmse_estimate(inst.y, r2, gamma2, theta2_hat, inst.op).alpha2 == pytest.approx(
        sens_a2(gamma2, theta2_hat, s), rel=1e-12)


def appendix_spectrum(kappa):
    s = np.zeros(1024)
    s[:512] = geometric_spectrum(512, 1024, kappa).values
    return s


@pytest.mark.parametrize("mode", ["oracle", "em", "autotune", "autotune-em"])
@pytest.mark.parametrize("kappa", [1.0, 10.0, 100.0])
def test_se_runs_valid_and_converges(mode, kappa):
    th = BgParams(0.1, 0.0, 1.0)
    s = appendix_spectrum(kappa)
    t2 = 1e4 * 512 / (0.1 * 1024)
    states = se_run(se_config_for_mode(mode, th, t2, s, 512, 40))
    assert len(states) == 40 and all(st.valid for st in states)
    nm = [st.nmse1_db for st in states]
    assert nm[-1] < -35
    assert abs(nm[-1] - nm[-2]) < 0.05


def test_se_oracle_precisions_are_consistent():
    th = BgParams(0.1, 0.0, 1.0)
    s = appendix_spectrum(10.0)
    # the start precision gamma10 enters as an O(gamma10) mismatch; make it negligible
    cfg = se_config_for_mode("oracle", th, 1e4 * 512 / 102.4, s, 512, 30, gamma10_scale=1e-14)
    for st in se_run(cfg)[1:]:
        # matched oracle: the predicted precisions are the true error variances
        assert st.gamma1_bar == pytest.approx(1 / st.tau1, rel=1e-8)
        assert st.gamma2_bar == pytest.approx(1 / st.tau2, rel=1e-8)


def test_expected_init_limits():
    th = BgParams(0.1, 0.0, 1.0)
    s = appendix_spectrum(10.0)
    th1, th2 = expected_init(th, 100.0, s, 512)
    ey2 = 0.1 * 1024 + 512 / 100.0
    assert th2 == pytest.approx(512 / ey2)
    assert th1.beta == pytest.approx(0.25) and th1.tau == pytest.approx(ey2 / (1024 * 0.25))


def test_se_config_validation():
    th = BgParams(0.1, 0.0, 1.0)
    with pytest.raises(ValueError):
        SeConfig(th, 1.0, np.ones(4), 4, 1.0, th, 1.0, n_iters=0)
    with pytest.raises(ValueError):
        SeConfig(th, 1.0, np.ones(4), 4, 1.0, th, 1.0, tau10=-1.0)
    with pytest.raises(ValueError):
        error_fn_e1(-1.0, 0.1, th, th)
