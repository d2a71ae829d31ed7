"""Tests for PF-ODE and reverse-SDE sampling, divergence estimation and likelihoods."""

import math

import numpy as np
import pytest
import torch

from scoread.sampler import (
    NfeRecord,
    NfeStats,
    SolverConfig,
    SolverError,
    SolverMethod,
    TraceEstimator,
    TraceMode,
    decode_latent,
    divergence,
    generate_batch,
    log_likelihood,
    partial_diffuse_denoise,
    rademacher_probes,
    sample_pf_ode,
    sample_reverse_sde,
)
from scoread.scorenet import forward

PRECISE = SolverConfig(rtol=1e-6, atol=1e-6)


def decay(schedule, l_from, l_to):
    """exp(-1/2 (B(l_to) - B(l_from))): the zero-score flow multiplier from l_from to l_to."""
    return math.exp(-0.5 * (schedule.integrated_beta(l_to) - schedule.integrated_beta(l_from)))


def linear_field(n=10, seed=0):
    rng = np.random.default_rng(seed)
    a = torch.from_numpy(10 * np.eye(n) + rng.standard_normal((n, n)))
    return a, (lambda xb: xb @ a.T)


@pytest.mark.parametrize("method", list(SolverMethod))
def test_pf_ode_sample_of_zero_score_is_analytic(tiny_net, schedule, method):
    solver = SolverConfig(method=method, rtol=1e-6, atol=1e-6)
    window, nfe = sample_pf_ode(tiny_net, schedule, None, seed=3, solver=solver)
    x1 = schedule.prior_sample((5, 2), 3).double()
    expected = x1 / decay(schedule, schedule.t_eps, 1.0)
    np.testing.assert_allclose(window.double().numpy(), expected.numpy(), rtol=1e-4)
    assert nfe.kind == "pf_ode_sample"
    assert nfe.count > 0


def test_pf_ode_sample_is_deterministic(random_net, schedule):
    cond = torch.randn(4, 2, generator=torch.Generator().manual_seed(0))
    a, _ = sample_pf_ode(random_net, schedule, cond, seed=9, solver=SolverConfig())
    b, _ = sample_pf_ode(random_net, schedule, cond, seed=9, solver=SolverConfig())
    c, _ = sample_pf_ode(random_net, schedule, cond, seed=10, solver=SolverConfig())
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_step_budget(random_net, schedule):
    with pytest.raises(SolverError, match="max_steps"):
        sample_pf_ode(random_net, schedule, None, seed=0, solver=SolverConfig(max_steps=3))


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(rtol=1.0).validate()
    with pytest.raises(ValueError):
        SolverConfig(max_steps=0).validate()
    config = SolverConfig(method=SolverMethod.DOP853, rtol=1e-4)
    assert SolverConfig.from_dict(config.to_dict()) == config


def test_reverse_sde(random_net, schedule):
    a, nfe = sample_reverse_sde(random_net, schedule, None, seed=1, n_steps=50)
    b, _ = sample_reverse_sde(random_net, schedule, None, seed=1, n_steps=50)
    assert nfe.count == 50
    assert a.shape == (5, 2)
    assert torch.equal(a, b)
    with pytest.raises(ValueError):
        sample_reverse_sde(random_net, schedule, None, seed=1, n_steps=0)


def test_exact_divergence_of_linear_field():
    a, field = linear_field()
    x = torch.randn(10, dtype=torch.float64)
    value = divergence(field, x, TraceEstimator(mode=TraceMode.EXACT))
    assert value == pytest.approx(float(torch.trace(a)), rel=1e-10)


def test_exact_divergence_of_network_matches_jacobian(random_net, schedule):
    x = torch.randn(5, 2, generator=torch.Generator().manual_seed(2))

    def field(xb):
        return schedule.pf_ode_drift(xb, 0.3, random_net(xb, None, torch.full((xb.shape[0],), 0.3)))

    jacobian = torch.autograd.functional.jacobian(lambda v: field(v[None])[0], x)
    expected = float(jacobian.reshape(10, 10).trace())
    value = divergence(field, x, TraceEstimator(mode=TraceMode.EXACT))
    assert value == pytest.approx(expected, rel=1e-4, abs=1e-5)


def test_hutchinson_within_two_percent():
    a, field = linear_field()
    x = torch.zeros(10, dtype=torch.float64)
    estimate = divergence(field, x, TraceEstimator(mode=TraceMode.HUTCHINSON, n_probes=1000, seed=4))
    assert abs(estimate - float(torch.trace(a))) < 0.02 * float(torch.trace(a))


def test_hutchinson_error_shrinks_with_probes():
    a, field = linear_field()
    x = torch.zeros(10, dtype=torch.float64)
    trace = float(torch.trace(a))
    rms = {}
    for n_probes in (10, 100, 1000):
        errors = [
            divergence(field, x, TraceEstimator(TraceMode.HUTCHINSON, n_probes, seed)) - trace
            for seed in range(40)
        ]
        rms[n_probes] = math.sqrt(np.mean(np.square(errors)))
    assert rms[10] > rms[100] > rms[1000]
    # 1/sqrt(n): a factor of about 10 between 10 and 1000 probes.
    assert 5 < rms[10] / rms[1000] < 20


def test_rademacher_probes():
    probes = rademacher_probes((3, 2), 50, seed=1)
    assert probes.shape == (50, 3, 2)
    assert set(probes.unique().tolist()) == {-1.0, 1.0}
    assert torch.equal(probes, rademacher_probes((3, 2), 50, seed=1))


@pytest.mark.parametrize("mode", [TraceMode.EXACT, TraceMode.HUTCHINSON])
def test_log_likelihood_of_zero_score_is_analytic(tiny_net, schedule, mode):
    """Zero score: linear contraction, log p0 = log N(x1) - n/2 (B(1) - B(t_eps))."""
    window = torch.randn(5, 2, generator=torch.Generator().manual_seed(5))
    result = log_likelihood(tiny_net, schedule, window, None, PRECISE, TraceEstimator(mode, 4, 0))

    n = window.numel()
    shrink = decay(schedule, schedule.t_eps, 1.0)
    latent = window.double() * shrink
    expected = schedule.prior_logpdf(latent) + n * math.log(shrink)
    assert result.log_prob == pytest.approx(expected, abs=1e-3)
    np.testing.assert_allclose(result.latent.numpy(), latent.numpy(), rtol=1e-4, atol=1e-6)
    assert result.bits_per_dim == pytest.approx(-result.log_prob / (n * math.log(2)))
    assert result.nfe.kind == "likelihood" and result.nfe.count > 0


def test_log_likelihood_with_condition(random_net, schedule):
    generator = torch.Generator().manual_seed(6)
    window = torch.randn(5, 2, generator=generator)
    cond = torch.randn(4, 2, generator=generator)
    result = log_likelihood(random_net, schedule, window, cond, SolverConfig(), TraceEstimator())
    assert math.isfinite(result.log_prob)
    again = log_likelihood(random_net, schedule, window, cond, SolverConfig(), TraceEstimator())
    assert again.log_prob == result.log_prob


def test_partial_diffuse_denoise_identity_at_zero(random_net, schedule):
    x = torch.randn(5, 2)
    out, nfe = partial_diffuse_denoise(random_net, schedule, x, 0.0, seed=0, solver=SolverConfig())
    assert torch.equal(out, x)
    assert nfe.count == 0


def test_partial_diffuse_denoise_zero_score(tiny_net, schedule):
    x = torch.randn(5, 2, generator=torch.Generator().manual_seed(7))
    tau = 0.1
    out, nfe = partial_diffuse_denoise(tiny_net, schedule, x, tau, seed=11, solver=PRECISE)
    noise = torch.randn(x.shape, generator=torch.Generator().manual_seed(11))
    m = schedule.transition_moments(tau)
    expected = (m.mean_coeff * x.double() + m.std * noise.double()) / decay(schedule, schedule.t_eps, tau)
    np.testing.assert_allclose(out.double().numpy(), expected.numpy(), rtol=1e-4, atol=1e-6)
    assert nfe.count > 0
    with pytest.raises(ValueError):
        partial_diffuse_denoise(tiny_net, schedule, x, 1.5, seed=0, solver=PRECISE)


def test_partial_diffuse_denoise_below_t_eps_is_identity(random_net, schedule):
    x = torch.randn(5, 2, generator=torch.Generator().manual_seed(3))
    out, nfe = partial_diffuse_denoise(random_net, schedule, x, schedule.t_eps / 2, seed=0, solver=PRECISE)
    assert torch.equal(out, x)
    assert nfe.count == 0


def test_partial_diffuse_denoise_is_continuous_at_small_tau(random_net, schedule):
    x = torch.randn(5, 2, generator=torch.Generator().manual_seed(5))

    def rms(tau):
        diffs = [
            partial_diffuse_denoise(random_net, schedule, x, tau, seed=s, solver=PRECISE)[0] - x
            for s in range(20)
        ]
        return float(torch.stack(diffs).double().pow(2).mean().sqrt())

    small = rms(0.01)
    assert small < 0.06
    assert small < rms(0.05)


def test_adaptive_solvers_agree(random_net, schedule):
    net = random_net.double()
    cond = torch.randn(4, 2, generator=torch.Generator().manual_seed(6), dtype=torch.float64)
    rtol = 1e-4
    a, b = (
        sample_pf_ode(net, schedule, cond, seed=2, solver=SolverConfig(method=method, rtol=rtol, atol=1e-7))[0]
        for method in (SolverMethod.RK45, SolverMethod.DOP853)
    )
    # Samples are scaled up by about 1/decay; compare relative RMS.
    assert float((a - b).pow(2).mean().sqrt() / a.pow(2).mean().sqrt()) < 10 * rtol


def test_likelihood_latent_decodes_back_to_data(random_net, schedule):
    net = random_net.double()
    window = torch.randn(5, 2, generator=torch.Generator().manual_seed(8), dtype=torch.float64)
    cond = window[:-1]
    rtol = 1e-6
    solver = SolverConfig(rtol=rtol, atol=1e-10)
    result = log_likelihood(net, schedule, window, cond, solver, TraceEstimator())
    decoded, nfe = decode_latent(net, schedule, result.latent, cond, solver)
    assert nfe.count > 0
    assert float((decoded - window).pow(2).mean().sqrt()) < 10 * rtol


def test_generate_batch(random_net, schedule):
    samples, stats = generate_batch(random_net, schedule, None, seeds=[0, 1, 2])
    assert samples.shape == (3, 5, 2)
    assert len(stats.counts["pf_ode_sample"]) == 3
    _, stats = generate_batch(random_net, schedule, None, seeds=[0, 1], reverse_sde_steps=20)
    assert stats.counts["reverse_sde_sample"] == [20, 20]


def test_nfe_stats():
    stats = NfeStats()
    stats.add(NfeRecord("likelihood", 10))
    stats.add(NfeRecord("likelihood", 20))
    other = NfeStats()
    other.add(NfeRecord("purification", 0))
    stats.merge(other)
    assert stats.total("likelihood") == 30
    assert stats.rows() == [
        ["likelihood", 2, 30, 15.0, 10, 20],
        ["purification", 1, 0, 0.0, 0, 0],
    ]


@pytest.mark.slow
def test_learned_gaussian_score(gaussian_model, schedule):
    """On iid N(0, I) data the ZERO-condition score of the condition rows approaches -x."""
    generator = torch.Generator().manual_seed(0)
    omega = gaussian_model.config.omega
    ratios = []
    for l in np.arange(0.1, 1.0, 0.1):
        std = schedule.transition_moments(float(l)).std
        x = torch.randn(256, omega + 1, 2, generator=generator)
        # Marginal of the zero-padded row at time l.
        x[:, -1] *= std
        with torch.no_grad():
            score = forward(gaussian_model, x, None, float(l))
        err = ((score[:, :omega] + x[:, :omega]) ** 2).sum()
        ratios.append(float(err / (x[:, :omega] ** 2).sum()))
    assert np.mean(ratios) < 0.15


@pytest.mark.slow
def test_learned_gaussian_likelihood(gaussian_model, schedule):
    """
    Windows sharing a condition: the likelihood difference matches the analytic
    N(0, I) difference of their last rows within 0.1 nats per window dimension.
    """
    generator = torch.Generator().manual_seed(1)
    solver = SolverConfig(rtol=1e-3, atol=1e-3)
    n = gaussian_model.config.window_length * 2
    errors = []
    for _ in range(25):
        cond = torch.randn(10, 2, generator=generator)
        rows = torch.randn(2, 1, 2, generator=generator)
        a = torch.cat([cond, rows[0]])
        b = torch.cat([cond, rows[1]])
        model = (
            log_likelihood(gaussian_model, schedule, a, cond, solver, TraceEstimator()).log_prob
            - log_likelihood(gaussian_model, schedule, b, cond, solver, TraceEstimator()).log_prob
        )
        analytic = -0.5 * float((rows[0] ** 2).sum() - (rows[1] ** 2).sum())
        errors.append(abs(model - analytic) / n)
    assert np.mean(errors) < 0.1


@pytest.mark.slow
def test_ode_needs_fewer_evaluations_than_reverse_sde(gaussian_model, schedule):
    solver = SolverConfig(method=SolverMethod.RK45, rtol=1e-3, atol=1e-3)
    cond = torch.zeros(10, 2)
    _, ode = generate_batch(gaussian_model, schedule, cond, seeds=range(20), solver=solver)
    _, sde = generate_batch(gaussian_model, schedule, cond, seeds=range(2), reverse_sde_steps=2000)
    mean_ode = ode.total("pf_ode_sample") / 20
    mean_sde = sde.total("reverse_sde_sample") / 2
    assert mean_sde == 2000
    assert mean_sde / mean_ode > 2


@pytest.mark.slow
def test_reverse_sde_and_ode_samples_share_spread(gaussian_model, schedule):
    """Per-feature std of the generated row agrees across samplers within three standard errors."""
    n = 150
    omega, m = gaussian_model.config.omega, gaussian_model.config.m
    cond = torch.randn(omega, m, generator=torch.Generator().manual_seed(9))
    ode, _ = generate_batch(gaussian_model, schedule, cond, seeds=range(n), solver=SolverConfig(rtol=1e-3, atol=1e-3))
    sde, _ = generate_batch(gaussian_model, schedule, cond, seeds=range(n), reverse_sde_steps=200)
    ode_std = ode[:, -1].double().std(dim=0)
    sde_std = sde[:, -1].double().std(dim=0)
    se = torch.sqrt(ode_std ** 2 / (2 * n) + sde_std ** 2 / (2 * n))
    assert torch.all((ode_std - sde_std).abs() < 3 * se)
