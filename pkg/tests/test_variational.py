import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import trapezoid
from scipy.stats import lognorm, norm

from himvi.models import normal_logpdf
from himvi.ndcore import RngStream, Tape, grad, ops
from himvi.variational import (
    LocalApprox,
    entropy_term,
    global_sample,
    local_sample,
    make_global_approx,
    make_local_approx,
    posterior_draws,
    read_posterior_samples,
    write_posterior_samples,
)


def test_meanfield_normal_at_zero_noise():
    q = make_global_approx("meanfield_normal", 1)
    beta, log_q = global_sample(q, delta=np.zeros(1))
    assert float(beta[0]) == 0.0
    assert float(log_q) == pytest.approx(-0.918939, abs=1e-6)


def test_meanfield_lognormal_at_zero_noise():
    q = make_global_approx("meanfield_lognormal", 1)
    beta, log_q = global_sample(q, delta=np.zeros(1))
    assert float(beta[0]) == 1.0
    assert float(log_q) == pytest.approx(-0.918939, abs=1e-6)


def test_point_mass_returns_value():
    q = make_global_approx("point_mass", 2, value=[2.0, 3.0])
    rng = RngStream(0)
    for _ in range(3):
        beta, log_q = global_sample(q, rng)
        np.testing.assert_array_equal(beta, [2.0, 3.0])
        assert log_q is None
    with pytest.raises(ValueError):
        q.logpdf([2.0, 3.0])


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        make_global_approx("full_rank", 2)


@settings(max_examples=50, deadline=None)
@given(
    st.sampled_from(["meanfield_normal", "meanfield_lognormal"]),
    st.lists(st.floats(-2, 2), min_size=3, max_size=3),
    st.lists(st.floats(-1, 1), min_size=3, max_size=3),
    st.integers(0, 2**32 - 1),
)
def test_sampled_log_q_matches_density(kind, loc, log_scale, seed):
    q = make_global_approx(kind, 3, loc=loc, log_scale=log_scale)
    beta, log_q = global_sample(q, RngStream(seed))
    assert float(log_q) == pytest.approx(float(q.logpdf(beta)), rel=1e-10, abs=1e-10)


def test_meanfield_normal_moments():
    q = make_global_approx("meanfield_normal", 2, loc=[1.0, -2.0], log_scale=np.log([0.5, 2.0]))
    b, _ = posterior_draws(q, RngStream(1), 100_000)
    n = len(b)
    mu, sigma = np.array([1.0, -2.0]), np.array([0.5, 2.0])
    assert np.all(np.abs(b.mean(0) - mu) < 3 * sigma / np.sqrt(n))
    assert np.all(np.abs(b.var(0) - sigma**2) < 3 * sigma**2 * np.sqrt(2 / n))


def test_meanfield_lognormal_moments():
    q = make_global_approx("meanfield_lognormal", 2, loc=[-1.0, 0.5], log_scale=np.log([0.3, 0.5]))
    b, _ = posterior_draws(q, RngStream(2), 100_000)
    dist = lognorm(s=np.array([0.3, 0.5]), scale=np.exp([-1.0, 0.5]))
    se = b.std(0) / np.sqrt(len(b))
    assert np.all(np.abs(b.mean(0) - dist.mean()) < 3 * se)
    mean, std = q.mean_std()
    np.testing.assert_allclose(mean, dist.mean())
    np.testing.assert_allclose(std, dist.std())
    assert np.all(b > 0)


@pytest.mark.parametrize("kind", ["meanfield_normal", "meanfield_lognormal"])
def test_logpdf_integrates_to_one(kind):
    mu, sigma = 0.3, 0.7
    q = make_global_approx(kind, 1, loc=mu, log_scale=np.log(sigma))
    u = np.linspace(mu - 6 * sigma, mu + 6 * sigma, 20001)
    grid = np.exp(u) if kind == "meanfield_lognormal" else u
    dens = np.exp(q.logpdf(grid[:, None]))
    assert abs(trapezoid(dens, grid) - 1.0) < 1e-3


@pytest.mark.parametrize("kind", ["meanfield_normal", "meanfield_lognormal"])
def test_gradient_through_sample_matches_finite_differences(kind):
    q = make_global_approx(kind, 3, loc=[0.1, -0.2, 0.3], log_scale=[-0.5, 0.0, 0.2])
    delta = np.array([0.4, -1.2, 0.7])

    def objective(params):
        beta, log_q = global_sample(q, params=params, delta=delta)
        return ops.add(ops.sum(ops.mul(ops.square(beta), np.array([1.0, 2.0, -0.5]))), log_q)

    tape = Tape()
    params = tape.vars(q.params)
    g = grad(tape, objective(params), params)
    h = 1e-6
    for k in q.params:
        assert np.any(g[k] != 0)
        for i in range(3):
            plus = {kk: vv.copy() for kk, vv in q.params.items()}
            minus = {kk: vv.copy() for kk, vv in q.params.items()}
            plus[k][i] += h
            minus[k][i] -= h
            fd = (float(objective(plus)) - float(objective(minus))) / (2 * h)
            assert abs(g[k][i] - fd) / max(abs(fd), 1e-6) < 1e-4


def test_entropy_term_point_mass_flat_prior():
    q = make_global_approx("point_mass", 2, value=[1.0, 2.0])
    beta, log_q = global_sample(q)
    assert entropy_term(q, beta, log_q, None) == 0.0


def test_entropy_term_point_mass_keeps_prior():
    q = make_global_approx("point_mass", 1, value=[0.0])
    beta, log_q = global_sample(q)
    assert float(entropy_term(q, beta, log_q, lambda b: normal_logpdf(b, 0.0, 1.0))) == pytest.approx(norm.logpdf(0))


def test_entropy_term_zero_when_q_equals_prior():
    q = make_global_approx("meanfield_normal", 2)
    rng = RngStream(3)
    for _ in range(5):
        beta, log_q = global_sample(q, rng)
        assert float(entropy_term(q, beta, log_q, lambda b: normal_logpdf(b, 0.0, 1.0))) == pytest.approx(0.0, abs=1e-12)


def test_entropy_term_against_wider_prior():
    q = make_global_approx("meanfield_normal", 1)
    beta, log_q = global_sample(q, delta=np.zeros(1))
    value = float(entropy_term(q, beta, log_q, lambda b: normal_logpdf(b, 0.0, np.sqrt(2.0))))
    expected = norm.logpdf(0.0, scale=np.sqrt(2.0)) - norm.logpdf(0.0)
    assert value == pytest.approx(expected, abs=1e-12)
    assert value == pytest.approx(-0.5 * np.log(2.0), abs=1e-12)


def test_local_zero_params_give_zero():
    q = make_local_approx(RngStream(0), x_dim=3, beta_dim=2, local_dim=4)
    q = q.with_params({k: np.zeros_like(v) for k, v in q.params.items()})
    z = local_sample(q, np.random.default_rng(0).normal(size=(5, 3)), np.array([1.0, -1.0]), RngStream(1))
    np.testing.assert_array_equal(z, 0.0)


def test_local_sample_deterministic():
    q = make_local_approx(RngStream(0), x_dim=3, beta_dim=2, local_dim=4)
    x, b = np.ones((5, 3)), np.array([0.5, 0.2])
    np.testing.assert_array_equal(local_sample(q, x, b, RngStream(7)), local_sample(q, x, b, RngStream(7)))


def test_local_sample_varies_with_noise():
    q = make_local_approx(RngStream(0), x_dim=1, beta_dim=1, local_dim=2)
    z = np.asarray(local_sample(q, np.ones((1000, 1)), np.array([0.3]), RngStream(8)))
    assert np.all(z.var(axis=0) > 0)


def test_local_sample_without_beta_slot():
    q = make_local_approx(RngStream(0), x_dim=2, beta_dim=0, local_dim=3)
    z = local_sample(q, np.ones((4, 2)), None, RngStream(1))
    assert z.shape == (4, 3)


def test_local_family_exposes_no_density():
    q = make_local_approx(RngStream(0), x_dim=1, beta_dim=1, local_dim=1)
    assert isinstance(q, LocalApprox)
    assert not any(hasattr(q, name) for name in ("logpdf", "log_prob", "density", "entropy"))


def test_local_gradient_flows_to_params_and_beta():
    q = make_local_approx(RngStream(0), x_dim=2, beta_dim=1, local_dim=2, hidden=(5,), init="standard")
    tape = Tape()
    params = tape.vars(q.params)
    beta = tape.var(np.array([0.7]))
    z = local_sample(q, np.ones((3, 2)), beta, RngStream(2), params=params)
    g = grad(tape, ops.sum(ops.square(z)), [beta, params["W0"]])
    assert np.any(g[0] != 0) and np.any(g[1] != 0)


def test_posterior_samples_jsonl_roundtrip(tmp_path):
    q = make_global_approx("meanfield_lognormal", 3)
    betas, log_q = posterior_draws(q, RngStream(0), 5)
    path = tmp_path / "posterior.jsonl"
    write_posterior_samples(path, betas, log_q)
    rec = json.loads(path.read_text().splitlines()[0])
    assert set(rec) == {"beta", "log_q"}
    back, lq = read_posterior_samples(path)
    np.testing.assert_array_equal(back, betas)
    pm = make_global_approx("point_mass", 3, value=1.0)
    b2, lq2 = posterior_draws(pm, RngStream(0), 2)
    write_posterior_samples(path, b2, lq2)
    assert json.loads(path.read_text().splitlines()[0])["log_q"] is None


def test_quantiles():
    q = make_global_approx("meanfield_normal", 2, loc=[0.0, 1.0], log_scale=[0.0, np.log(2.0)])
    np.testing.assert_allclose(q.quantiles([0.5]), [[0.0, 1.0]])
    np.testing.assert_allclose(q.quantiles([0.975])[0], [1.959964, 1.0 + 2 * 1.959964], atol=1e-6)
