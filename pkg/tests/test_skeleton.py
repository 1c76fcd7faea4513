"""Offspring-law derivation and sampling."""

import math

import numpy as np
import pytest
from scipy.special import gammaln

from branchlab import mechanism as M
from branchlab import skeleton as S


@pytest.fixture(scope="module")
def quad_dist():
    return S.derive_offspring(M.quadratic_mechanism())


@pytest.fixture(scope="module")
def stable_dist():
    return S.derive_offspring(M.stable_mechanism(0.5), tail_tol=1e-9)


def exact_stable_p(beta: float, kmax: int) -> np.ndarray:
    # p_k = (1+beta) Gamma(k-1-beta) / (Gamma(1-beta) k!), k >= 2
    k = np.arange(2, kmax + 1, dtype=float)
    return np.exp(math.log(1.0 + beta) + gammaln(k - 1.0 - beta)
                  - gammaln(1.0 - beta) - gammaln(k + 1.0))


def test_quadratic_offspring_exact(quad_dist):
    assert quad_dist.q == pytest.approx(1.0, abs=1e-14)
    assert quad_dist.p.tolist() == [1.0]
    assert quad_dist.tail_mass == 0.0


def test_stable_offspring_values(stable_dist):
    assert stable_dist.q == pytest.approx(0.5, abs=1e-12)
    assert stable_dist.p[0] == pytest.approx(0.75, abs=1e-10)
    assert stable_dist.p[1] == pytest.approx(0.125, abs=1e-10)
    assert stable_dist.tail_mass <= 1e-9
    assert math.fsum(stable_dist.p.tolist()) == pytest.approx(1.0, abs=1e-12)


def test_stable_offspring_matches_gamma_closed_form(stable_dist):
    pk = exact_stable_p(0.5, stable_dist.kmax)
    assert np.abs(stable_dist.p[:-1] - pk[:-1]).max() < 1e-13


def test_quadrature_path_cross_checks_closed_form():
    # oracle: the independent log-space quadrature of integral y^k e^-y pi(dy)
    mech = M.stable_mechanism(0.5)
    dq = S.derive_offspring(mech, kmax=256, tail_tol=1e-3, force_quadrature=True)
    dc = S.derive_offspring(mech, kmax=256, tail_tol=1e-3)
    assert dq.q == dc.q
    assert np.abs(dq.p - dc.p).max() < 1e-5
    assert abs(dq.mean_truncated() - dc.mean_truncated()) < 1e-4


def test_mean_identity(stable_dist, quad_dist):
    # differentiating the defining identity at s=1 gives E[L] = 1 + 1/q
    assert stable_dist.mean_exact == pytest.approx(3.0, abs=1e-12)
    assert quad_dist.mean_exact == pytest.approx(2.0)
    # folding biases the sampled mean down by the tail overshoot
    # sum_{k>K} (k-K) p_k ~ (4/3) C K^{-1/2} with C = (1+beta)/Gamma(1-beta)
    # (integral oracle for the k^{-5/2} tail at beta = 1/2)
    K = stable_dist.kmax
    overshoot = (4.0 / 3.0) * 1.5 / math.gamma(0.5) * K**-0.5
    gap = stable_dist.mean_exact - stable_dist.mean_truncated()
    assert 0.8 * overshoot <= gap <= 1.2 * overshoot


@pytest.mark.parametrize("s", np.arange(0.0, 0.95, 0.1))
def test_reconstruction_identity(stable_dist, quad_dist, s):
    # q (F(s) - s) = psi(1 - s), up to the truncated series remainder
    for dist, mech in [(stable_dist, M.stable_mechanism(0.5)),
                       (quad_dist, M.quadratic_mechanism())]:
        lhs = dist.q * (dist.pgf(s) - s)
        rhs = M.eval_psi(mech, 1.0 - s)
        assert abs(lhs - rhs) < 1e-8


def test_atoms_nonincreasing_beyond_three(stable_dist, quad_dist):
    p = stable_dist.p[1:-1]  # k >= 3, excluding the folded top atom
    assert np.all(np.diff(p) <= 1e-15)


def test_sampler_always_two_for_quadratic(quad_dist):
    rng = np.random.default_rng(0)
    ks = S.sample_offspring(quad_dist, rng, size=2000)
    assert np.all(ks == 2)


def test_sampler_binomial_ci_on_p2(stable_dist):
    rng = np.random.default_rng(123)
    n = 10**6
    ks = S.sample_offspring(stable_dist, rng, size=n)
    p2_hat = float(np.mean(ks == 2))
    se = math.sqrt(0.75 * 0.25 / n)
    assert abs(p2_hat - 0.75) <= 3 * se


def test_sampler_truncated_mean(stable_dist):
    # heavy tail: compare against the truncated exact mean, not the limit 3
    rng = np.random.default_rng(321)
    n = 10**6
    ks = S.sample_offspring(stable_dist, rng, size=n).astype(float)
    target = stable_dist.mean_truncated()
    se = float(np.std(ks)) / math.sqrt(n)
    assert abs(float(np.mean(ks)) - target) <= 3 * se


def test_alias_table_reproduces_weights():
    rng = np.random.default_rng(5)
    vals = np.array([2, 3, 5, 9])
    w = np.array([0.4, 0.3, 0.2, 0.1])
    table = S.AliasTable.build(vals, w)
    draws = table.sample(rng, size=200_000)
    for v, p in zip(vals, w):
        assert np.mean(draws == v) == pytest.approx(p, abs=0.005)


def test_tail_tolerance_unreachable_raises():
    with pytest.raises(S.DerivationError) as exc:
        S.derive_offspring(M.stable_mechanism(0.1), tail_tol=1e-14)
    assert exc.value.tail_mass > 0


def test_requires_normalized_mechanism():
    with pytest.raises(ValueError):
        S.derive_offspring(M.quadratic_mechanism(a=2.0, b=1.0))
