import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qres import probability as P
from qres.errors import ContractError
from qres.probability import PosteriorStats, PriorStats
from qres.tensor import Tensor


def phi(x):
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def prior(mu_hat, sigma):
    return PriorStats(Tensor(np.atleast_1d(mu_hat)), Tensor(np.atleast_1d(sigma)))


# -- posterior sampling ----------------------------------------------------------

def test_posterior_sample_support_and_reproducibility():
    mu = Tensor(np.random.default_rng(0).normal(size=1000))
    z1 = P.posterior_sample_train(PosteriorStats(mu), np.random.default_rng(5))
    z2 = P.posterior_sample_train(PosteriorStats(mu), np.random.default_rng(5))
    assert np.all(np.abs(z1.data - mu.data) <= 0.5)
    assert np.array_equal(z1.data, z2.data)


def test_posterior_noise_is_centred():
    n = 10 ** 6
    mu = Tensor(np.zeros(n))
    z = P.posterior_sample_train(PosteriorStats(mu), np.random.default_rng(11)).data
    stderr = math.sqrt(1.0 / 12.0 / n)
    assert abs(z.mean()) < 3 * stderr


def test_posterior_sample_is_differentiable_in_mu():
    mu = Tensor(np.zeros(4), requires_grad=True)
    P.posterior_sample_train(PosteriorStats(mu), np.random.default_rng(0)).sum().backward()
    np.testing.assert_array_equal(mu.grad, np.ones(4))


# -- prior log-density -----------------------------------------------------------

def test_prior_logpdf_at_mean_half_scale():
    got = P.prior_logpdf(Tensor([0.3]), prior(0.3, 0.5)).data[0]
    assert abs(got - math.log(phi(1.0) - phi(-1.0))) < 1e-13
    assert abs(math.exp(got) - 0.682689492137) < 1e-12


def test_prior_logpdf_wide_scale_approaches_density():
    s = P.SIGMA_MAX
    got = math.exp(P.prior_logpdf(Tensor([1.0]), prior(1.0, s)).data[0])
    assert abs(got / (1.0 / (s * math.sqrt(2 * math.pi))) - 1.0) < 0.01


@settings(max_examples=200, deadline=None)
@given(a=st.floats(0, 50), mu=st.floats(-20, 20), s=st.floats(P.SIGMA_MIN, P.SIGMA_MAX))
def test_prior_logpdf_is_even(a, mu, s):
    plus = P.prior_logpdf(Tensor([mu + a]), prior(mu, s)).data
    minus = P.prior_logpdf(Tensor([mu - a]), prior(mu, s)).data
    # mu +- a are not exact mirror images in floating point; the offsets are
    d_plus, d_minus = (mu + a) - mu, mu - (mu - a)
    if d_plus == d_minus:
        assert plus[0] == minus[0]


def test_prior_logpdf_exactly_even_on_offsets():
    d = np.linspace(0, 30, 301)
    s = np.full_like(d, 1.7)
    mu = np.zeros_like(d)
    a = P.prior_logpdf(Tensor(d), PriorStats(Tensor(mu), Tensor(s))).data
    b = P.prior_logpdf(Tensor(-d), PriorStats(Tensor(mu), Tensor(s))).data
    assert np.array_equal(a, b)


def test_prior_logpdf_floor():
    got = P.prior_logpdf(Tensor([1000.0]), prior(0.0, P.SIGMA_MIN)).data[0]
    assert got == math.log(2.0 ** -24)


# -- prior sampling --------------------------------------------------------------

def test_prior_sample_t0_is_mean_bitwise():
    mh = np.random.default_rng(1).normal(size=50)
    pr = PriorStats(Tensor(mh), Tensor(np.full(50, 3.0)))
    out = P.prior_sample(pr, 0.0, np.random.default_rng(2)).data
    assert np.array_equal(out, mh)
    assert np.array_equal(out, P.prior_sample(pr, 0.0, np.random.default_rng(99)).data)


@pytest.mark.parametrize("t", [-0.1, 1.01, float("nan")])
def test_prior_sample_rejects_bad_temperature(t):
    with pytest.raises(ContractError):
        P.prior_sample(prior(0.0, 1.0), t, np.random.default_rng(0))


def test_prior_sample_variance_at_min_scale():
    n = 10 ** 6
    pr = PriorStats(Tensor(np.zeros(n)), Tensor(np.full(n, P.SIGMA_MIN)))
    z = P.prior_sample(pr, 1.0, np.random.default_rng(3)).data
    target = P.SIGMA_MIN ** 2 + 1.0 / 12.0
    assert abs(z.var() / target - 1.0) < 0.02


def test_prior_sample_reproducible():
    pr = prior(np.zeros(10), np.ones(10))
    a = P.prior_sample(pr, 1.0, np.random.default_rng(4)).data
    b = P.prior_sample(pr, 1.0, np.random.default_rng(4)).data
    assert np.array_equal(a, b)


# -- residual rounding -----------------------------------------------------------

@pytest.mark.parametrize("mu,mu_hat,expected", [
    (2.3, 0.0, 2.0), (1.5, 0.0, 2.0), (2.5, 0.0, 2.0), (-0.5, 0.0, -0.0), (1.7, 0.2, 2.2),
])
def test_residual_round_examples(mu, mu_hat, expected):
    z, _ = P.residual_round(np.array([mu]), np.array([mu_hat]))
    assert abs(z[0] - expected) < 1e-15


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=20))
def test_residual_round_properties(pairs):
    mu = np.array([p[0] for p in pairs])
    mh = np.array([p[1] for p in pairs])
    z, n = P.residual_round(mu, mh)
    assert np.array_equal(z, mh + n)  # z is exactly mu_hat plus an integer symbol
    assert np.all(np.abs(n - (mu - mh)) <= 0.5)
    np.testing.assert_array_equal(P.lattice_symbols(z, mh), n)


def test_lattice_symbols_rejects_off_lattice():
    with pytest.raises(ContractError):
        P.estimated_bits(np.array([0.3]), np.array([0.0]), np.array([1.0]))


# -- PMFs --------------------------------------------------------------------------

def test_pmf_min_scale_concentrates_mass():
    pmf = P.build_pmf(0.0, P.SIGMA_MIN)
    centre = -pmf.offset
    assert pmf.probabilities()[centre] >= 0.97
    assert phi(0.5 / P.SIGMA_MIN) - phi(-0.5 / P.SIGMA_MIN) >= 0.97


@settings(max_examples=300, deadline=None)
@given(mu=st.floats(-100, 100), s=st.floats(P.SIGMA_MIN, P.SIGMA_MAX))
def test_pmf_invariants(mu, s):
    pmf = P.build_pmf(mu, s)
    freqs = np.diff(pmf.cdf)
    assert pmf.cdf[0] == 0 and pmf.cdf[-1] == P.TOTAL
    assert freqs.min() >= 1
    bound = math.ceil(6 * s) + 1
    assert pmf.offset == -bound and pmf.alphabet_size == 2 * bound + 1
    # every cumulative value maps to exactly one symbol
    cf = np.random.default_rng(0).integers(0, P.TOTAL, 64)
    idx = np.searchsorted(pmf.cdf, cf, side="right") - 1
    assert np.all((pmf.cdf[idx] <= cf) & (cf < pmf.cdf[idx + 1]))


def test_pmf_masses_match_logpdf():
    s = 2.3
    bound = int(P.tail_bound(s))
    n = np.arange(-bound + 1, bound)
    masses = P.discretized_masses(s, bound)[1:-1]
    logp = P.prior_logpdf(Tensor(n.astype(float)), PriorStats(Tensor(np.zeros(n.size)),
                                                               Tensor(np.full(n.size, s)))).data
    above = masses > P.LOG_FLOOR
    assert above.sum() >= n.size - 4
    np.testing.assert_allclose(masses[above], np.exp(logp[above]), rtol=0, atol=1e-12)
    assert np.all(logp[~above] == np.log(P.LOG_FLOOR))


def test_untruncated_lattice_mass_sums_to_one():
    for s in [P.SIGMA_MIN, 0.5, 3.0, 20.0, P.SIGMA_MAX]:
        n = np.arange(-2000, 2001, dtype=float)
        total = P.lattice_mass(n, np.full(n.size, s)).sum()
        assert 1 - 1e-9 <= total <= 1 + 1e-12


def test_largest_remainder_tie_break():
    freqs = P.quantize_masses(np.array([[1.0, 1.0, 1.0]]))[0]
    assert freqs.sum() == P.TOTAL
    # 65533 units split three ways: 21844 each plus one leftover to the lowest index
    np.testing.assert_array_equal(freqs, [21846, 21845, 21845])


def test_cdf_table_matches_single_pmfs():
    sig = np.array([0.11, 0.5, 0.5, 3.3, 12.0])
    bounds, table = P.build_cdf_table(sig)
    for i, s in enumerate(sig):
        pmf = P.build_pmf(0.0, s)
        k = pmf.alphabet_size
        np.testing.assert_array_equal(table[i, :k + 1], pmf.cdf)
        assert bounds[i] == -pmf.offset


# -- rate terms ------------------------------------------------------------------

def test_rate_term_single_element():
    got = P.rate_term(Tensor([0.0]), prior(0.0, P.SIGMA_MIN)).item()
    expected = -math.log(phi(0.5 / P.SIGMA_MIN) - phi(-0.5 / P.SIGMA_MIN))
    assert abs(got - expected) < 1e-12
    assert got >= 0.0


def test_estimated_bits_oracle():
    bits = P.estimated_bits(np.array([1.25]), np.array([1.25]), np.array([0.5]))
    assert abs(bits - (-math.log2(phi(1.0) - phi(-1.0)))) < 1e-12
    # the exact value is 0.55070; a 4-digit rounding of it reads 0.5507 or 0.5508
    assert abs(bits - 0.5508) < 2e-4


def test_estimated_bits_permutation_invariant():
    rng = np.random.default_rng(0)
    n = rng.integers(-5, 6, 100).astype(float)
    s = rng.uniform(0.2, 4, 100)
    perm = rng.permutation(100)
    a = P.estimated_bits(n, np.zeros(100), s)
    b = P.estimated_bits(n[perm], np.zeros(100), s[perm])
    assert abs(a - b) < 1e-9


def test_rate_term_equals_estimated_bits_on_lattice():
    rng = np.random.default_rng(8)
    mh = rng.normal(size=200)
    s = rng.uniform(P.SIGMA_MIN, 5.0, 200)
    z, n = P.residual_round(mh + rng.normal(0, 3, 200), mh)
    floored = P.lattice_mass(n.astype(float), s) <= P.LOG_FLOOR
    keep = ~floored
    nats = P.rate_term(Tensor(z[keep]), PriorStats(Tensor(mh[keep]), Tensor(s[keep]))).item()
    assert abs(nats - P.estimated_bits(z[keep], mh[keep], s[keep]) * math.log(2)) < 1e-9
    # the floor can only shorten the training-time code length
    full = P.rate_term(Tensor(z), PriorStats(Tensor(mh), Tensor(s))).item()
    assert full <= P.estimated_bits(z, mh, s) * math.log(2) + 1e-9


def test_rate_term_gradient_wrt_mu_hat():
    from helpers import check_grads

    for seed in range(5):
        r = np.random.default_rng(seed)
        z, mh, s = r.normal(size=6), r.normal(size=6), r.uniform(0.3, 2, 6)
        err = check_grads(lambda a: P.rate_term(Tensor(z), PriorStats(a, Tensor(s))), [mh], seed)
        assert err < 1e-4
