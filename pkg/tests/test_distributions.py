import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import trapezoid

from platedvi import tensor as T
from platedvi.distributions import (
    RNG,
    Bernoulli,
    NormalDiag,
    UnsupportedReparameterization,
    kl_normal_normal,
)
from platedvi.errors import NumericFault
from platedvi.tensor import Parameter, Tape, Tensor, backward

from oracles import central_diff


def test_normal_log_prob_examples():
    assert NormalDiag(0.0, 1.0).log_prob(0.0).item() == pytest.approx(-0.9189385, abs=1e-7)
    assert NormalDiag(1.0, 2.0).log_prob(3.0).item() == pytest.approx(-2.1120857, abs=1e-7)


def test_bernoulli_log_prob_half():
    assert Bernoulli(probs=0.5).log_prob(1.0).item() == pytest.approx(-0.6931472, abs=1e-7)


def test_kl_examples():
    assert kl_normal_normal(NormalDiag(0.0, 1.0), NormalDiag(0.0, 1.0)).item() == 0.0
    assert kl_normal_normal(NormalDiag(1.0, 1.0), NormalDiag(0.0, 1.0)).item() == pytest.approx(0.5, abs=1e-12)
    assert kl_normal_normal(NormalDiag(0.0, 2.0), NormalDiag(0.0, 1.0)).item() == pytest.approx(
        2.0 - math.log(2.0) - 0.5, abs=1e-12
    )


def test_scale_must_be_positive():
    with pytest.raises(ValueError):
        NormalDiag(0.0, 0.0)
    with pytest.raises(ValueError):
        NormalDiag(0.0, [1.0, -1.0])
    with pytest.raises(NumericFault):
        NormalDiag(0.0, float("nan"))


def test_bernoulli_needs_exactly_one_parameter():
    with pytest.raises(ValueError):
        Bernoulli()
    with pytest.raises(ValueError):
        Bernoulli(probs=0.5, logits=0.0)
    with pytest.raises(ValueError):
        Bernoulli(probs=1.0)


def test_sample_mean_within_clt_bound():
    n = 10**5
    draws = NormalDiag(2.0, 0.5).sample(RNG(0), (n,)).data
    assert draws.shape == (n,)
    assert abs(draws.mean() - 2.0) < 3 * 0.5 / math.sqrt(n)


def test_sample_shape_and_detached():
    loc = Parameter(np.zeros(3))
    with Tape():
        s = NormalDiag(loc, 1.0).sample(RNG(1), (4, 2))
    assert s.shape == (4, 2, 3)
    assert s.tape is None


def test_near_degenerate_bernoulli():
    draws = Bernoulli(probs=1 - 1e-12).sample(RNG(3), (100,)).data
    assert (draws == 1.0).all()


def test_fixed_seed_is_deterministic():
    a = NormalDiag(0.0, 1.0).sample(RNG(42), (5,)).data
    b = NormalDiag(0.0, 1.0).sample(RNG(42), (5,)).data
    np.testing.assert_array_equal(a, b)
    c = NormalDiag(0.0, 1.0).rsample(RNG(42), (5,)).data
    np.testing.assert_array_equal(a, c)


def test_rng_split_is_order_independent():
    r1 = RNG(7)
    r1.normal((10,))
    first = r1.split("z").normal((3,))
    second = RNG(7).split("z").normal((3,))
    np.testing.assert_array_equal(first, second)
    assert not np.array_equal(RNG(7).split("z").normal((3,)), RNG(7).split("w").normal((3,)))


def test_rsample_with_zero_noise_is_loc():
    d = NormalDiag(Tensor([1.5, -2.0]), Tensor([3.0, 0.1]))
    np.testing.assert_array_equal(d.rsample(RNG(0), eps=np.zeros(2)).data, [1.5, -2.0])


def test_rsample_derivatives_vs_finite_differences():
    eps = np.array([0.7, -1.3])
    mu = Parameter(np.array([0.2, 1.0]))
    sigma = Parameter(np.array([0.5, 2.0]))
    with Tape():
        loss = NormalDiag(mu, sigma).rsample(RNG(0), eps=eps).sum()
    g = backward(loss)
    f = lambda: (mu.data + sigma.data * eps).sum()
    num_mu, num_sigma = central_diff(f, [mu.data, sigma.data])
    np.testing.assert_allclose(g[mu].data, num_mu, rtol=1e-8)
    np.testing.assert_allclose(g[sigma].data, num_sigma, rtol=1e-8)
    np.testing.assert_allclose(g[mu].data, 1.0)
    np.testing.assert_allclose(g[sigma].data, eps)


def test_rsample_on_bernoulli_is_unsupported():
    with pytest.raises(UnsupportedReparameterization):
        Bernoulli(probs=0.3).rsample(RNG(0))


def test_log_prob_gradients_vs_finite_differences():
    rng = np.random.default_rng(5)
    v = Parameter(rng.normal(size=4))
    mu = Parameter(rng.normal(size=4))
    sigma = Parameter(rng.uniform(0.3, 2.0, size=4))
    with Tape():
        loss = NormalDiag(mu, sigma).log_prob(v).sum()
    g = backward(loss)
    f = lambda: NormalDiag(Tensor(mu.data), Tensor(sigma.data)).log_prob(Tensor(v.data)).sum().item()
    numeric = central_diff(f, [v.data, mu.data, sigma.data])
    for p, n in zip([v, mu, sigma], numeric):
        np.testing.assert_allclose(g[p].data, n, rtol=1e-6)


def test_bernoulli_log_prob_gradient():
    logits = Parameter(np.array([-3.0, 0.2, 4.0]))
    value = np.array([1.0, 0.0, 1.0])
    with Tape():
        loss = Bernoulli(logits=logits).log_prob(value).sum()
    g = backward(loss)
    f = lambda: Bernoulli(logits=Tensor(logits.data)).log_prob(value).sum().item()
    np.testing.assert_allclose(g[logits].data, central_diff(f, [logits.data])[0], rtol=1e-6)


# properties -------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.floats(-5, 5), st.floats(0.05, 10))
def test_density_integrates_to_one(mu, sigma):
    grid = np.linspace(mu - 8 * sigma, mu + 8 * sigma, 10**4 + 1)
    density = np.exp(NormalDiag(mu, sigma).log_prob(grid).data)
    assert abs(trapezoid(density, grid) - 1.0) < 1e-6


params = st.tuples(st.floats(-3, 3), st.floats(0.1, 3))


@given(params, params)
def test_kl_is_nonnegative(q, p):
    kl = kl_normal_normal(NormalDiag(*q), NormalDiag(*p)).item()
    assert kl >= -1e-12
    if q == p:
        assert kl == 0.0


@given(params)
def test_kl_zero_only_for_equal_parameters(q):
    mu, sigma = q
    assert kl_normal_normal(NormalDiag(mu, sigma), NormalDiag(mu + 0.5, sigma)).item() > 0
    assert kl_normal_normal(NormalDiag(mu, sigma), NormalDiag(mu, sigma * 1.5)).item() > 0


@pytest.mark.parametrize("q,p", [((0.5, 0.8), (0.0, 1.0)), ((-1.0, 2.0), (1.0, 0.5)), ((0.0, 1.0), (0.0, 1.0))])
def test_monte_carlo_kl_matches_closed_form(q, p):
    qd, pd = NormalDiag(*q), NormalDiag(*p)
    z = qd.rsample(RNG(11), (10**5,))
    diff = qd.log_prob(z).data - pd.log_prob(z).data
    se = diff.std(ddof=1) / math.sqrt(diff.size)
    exact = kl_normal_normal(qd, pd).item()
    assert abs(diff.mean() - exact) <= 3 * se + 1e-12


@given(st.floats(-50, 50))
def test_bernoulli_logit_identity(ell):
    lp = Bernoulli(logits=ell).log_prob(1.0).item()
    assert abs(lp - (-T.softplus(Tensor(-ell)).item())) < 1e-12
