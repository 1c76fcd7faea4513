"""Mechanism representation, evaluation, normalization, and condition checks."""

import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import gamma as gamma_fn

from branchlab import mechanism as M


@pytest.fixture(scope="module")
def quad_mech():
    return M.quadratic_mechanism()


@pytest.fixture(scope="module")
def stable_mech():
    return M.stable_mechanism(0.5)


@pytest.fixture(scope="module")
def exp_tab_mech():
    # supercritical mechanism with an exponential jump density (a=0.5 so the
    # first moment of pi exceeds a and psi(+inf)=+inf)
    r = np.geomspace(1e-6, 60.0, 2000)
    return M.BranchingMechanism(a=0.5, b=0.0, levy=M.tabulated_measure(r, np.exp(-r)))


@pytest.fixture(scope="module")
def stable_tab_mech():
    # power tail with a decaying perturbation: pibar(r) ~ A1 r^-1.5 (1 + O(r^-0.25))
    rr = np.geomspace(1e-4, 1e7, 600)
    a1 = 0.5 / math.sqrt(math.pi)
    dens = a1 * 1.5 * rr**-2.5 * (1 + 0.3 * rr**-0.25)
    return M.BranchingMechanism(a=1.0, b=0.0, levy=M.tabulated_measure(rr, dens))


# ---------------------------------------------------------------------------
# eval_psi / eval_psi0 / eval_psi1
# ---------------------------------------------------------------------------


def test_psi_quadratic_root_and_origin(quad_mech):
    assert M.eval_psi(quad_mech, 1.0) == pytest.approx(0.0, abs=1e-14)
    assert M.eval_psi(quad_mech, 0.0) == 0.0
    assert M.eval_psi(M.stable_mechanism(0.5), 0.0) == 0.0


def test_psi_stable_closed_form_and_quadrature_cross_check(stable_mech):
    # psi(4) = -4 + 4**1.5 = 4 for the normalized stable family
    closed = M.eval_psi(stable_mech, 4.0)
    assert closed.real == pytest.approx(4.0, abs=1e-12)
    via_quad = M.eval_psi(stable_mech, 4.0, force_quadrature=True)
    assert abs(closed - via_quad) / abs(closed) < 1e-10


@pytest.mark.parametrize("z", [1 + 2j, 4j, 0.3, 0.5 + 9j, 1e-3 + 2e-3j])
def test_psi_quadrature_matches_closed_form_on_half_plane(stable_mech, z):
    closed = M.eval_psi(stable_mech, z)
    via_quad = M.eval_psi(stable_mech, z, force_quadrature=True)
    assert abs(closed - via_quad) <= 1e-10 * max(1.0, abs(closed))


def test_psi_rejects_left_half_plane(quad_mech):
    with pytest.raises(ValueError):
        M.eval_psi(quad_mech, -1.0 + 0.5j)


def test_psi0_quadratic_is_square(quad_mech):
    assert M.eval_psi0(quad_mech, 2j) == pytest.approx(-4.0 + 0.0j, abs=1e-13)


def test_psi1_stable_unit_coefficient(stable_mech):
    # A1 = beta/Gamma(1-beta) makes A2 = 1, so psi1(z) = z**1.5
    assert M.eval_psi1(stable_mech, 1.0) == pytest.approx(1.0, abs=1e-13)
    z = 2.0 + 3.0j
    assert M.eval_psi1(stable_mech, z) == pytest.approx(z**1.5, abs=1e-12)


def test_stable_A1_against_numeric_tail_integral(stable_mech):
    # independent oracle: pibar(r) from quadrature of the density must satisfy
    # pibar(r) * r**1.5 -> beta / Gamma(1-beta)
    levy = stable_mech.levy
    for r0 in [3.0, 10.0, 40.0]:
        # substitution v = r0/y makes the improper integral finite-range and smooth
        num, err = quad(lambda v: levy.density(r0 / v) * r0 / v**2, 0.0, 1.0)
        assert num * r0**1.5 == pytest.approx(0.5 / gamma_fn(0.5), rel=max(1e-9, 2 * err / num))
    assert stable_mech.stable_A2 == pytest.approx(1.0, abs=1e-14)


def test_psi0_hermitian_symmetry(quad_mech, stable_mech, exp_tab_mech):
    mechs = [quad_mech, stable_mech, M.normalize(exp_tab_mech)[0]]
    rng = np.random.default_rng(7)
    pts = rng.uniform(0, 4, size=(12, 2))
    for mech in mechs:
        for re, im in pts:
            z = complex(re, im)
            lhs = M.eval_psi0(mech, np.conj(z))
            rhs = np.conj(M.eval_psi0(mech, z))
            assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(rhs))


def test_psi_convex_on_positive_axis(quad_mech, stable_mech, exp_tab_mech):
    mechs = [quad_mech, stable_mech, M.normalize(exp_tab_mech)[0]]
    grid = np.geomspace(1e-3, 50.0, 120)
    for mech in mechs:
        vals = np.array([M.eval_psi(mech, complex(x)).real for x in grid])
        dd = np.diff(vals, 2)  # second divided differences on the log grid scale
        # convexity in the raw variable: use three-point second differences
        x0, x1, x2 = grid[:-2], grid[1:-1], grid[2:]
        second = 2 * (
            vals[:-2] / ((x1 - x0) * (x2 - x0))
            - vals[1:-1] / ((x1 - x0) * (x2 - x1))
            + vals[2:] / ((x2 - x0) * (x2 - x1))
        )
        assert np.all(second >= -1e-9)


# ---------------------------------------------------------------------------
# sigma2
# ---------------------------------------------------------------------------


def test_sigma2_quadratic(quad_mech):
    assert M.sigma2(quad_mech) == pytest.approx(2.0, abs=1e-14)


def test_sigma2_stable_is_infinite(stable_mech):
    # oracle: the tail integral of r**2 * r**-2.5 diverges at infinity
    assert math.isinf(M.sigma2(stable_mech))
    assert math.isinf(stable_mech.levy.moment(1.0, math.inf, 2.0))


def test_exponential_second_moment_is_gamma_three(exp_tab_mech):
    # integral r^2 e^-r dr = Gamma(3) = 2; oracle = independent quadrature
    got = exp_tab_mech.levy.moment(0.0, math.inf, 2.0)
    o1, _ = quad(lambda y: y**2 * exp_tab_mech.levy.density(y), 0, 1, limit=300)
    o2, _ = quad(lambda y: y**2 * exp_tab_mech.levy.density(y), 1, 80, limit=300)
    oracle = o1 + o2
    assert got == pytest.approx(2.0, abs=2e-4)
    assert got == pytest.approx(oracle, rel=1e-6)


def test_sigma2_finite_iff_second_moment_condition(quad_mech, stable_mech, exp_tab_mech):
    for mech in [quad_mech, stable_mech, M.normalize(exp_tab_mech)[0]]:
        rep = M.check_conditions(mech)
        assert math.isfinite(rep.sigma2) == rep.a1.holds


# ---------------------------------------------------------------------------
# lambda_star / normalize
# ---------------------------------------------------------------------------


def test_lambda_star_examples():
    assert M.lambda_star(M.quadratic_mechanism()) == pytest.approx(1.0, rel=1e-12)
    assert M.lambda_star(M.quadratic_mechanism(a=2.0, b=1.0)) == pytest.approx(2.0, rel=1e-12)
    # psi = -l + (1+b)^-1 l^(1+b), beta=0.5: root (1+b)^(1/b) = 2.25
    paper_stable = M.stable_mechanism(0.5, A2=1.0 / 1.5)
    assert M.lambda_star(paper_stable) == pytest.approx(2.25, rel=1e-12)


def test_lambda_star_probe_failure():
    # exponential jumps with a=1: psi(+inf) = -1, no positive root
    r = np.geomspace(1e-6, 60.0, 500)
    mech = M.BranchingMechanism(a=1.0, b=0.0, levy=M.tabulated_measure(r, np.exp(-r)))
    with pytest.raises(M.SupercriticalityError):
        M.lambda_star(mech)


def test_normalize_examples():
    m, sc = M.normalize(M.quadratic_mechanism())
    assert (sc.time_factor, sc.space_factor, sc.mass_factor) == pytest.approx((1.0, 1.0, 1.0), rel=1e-10)

    m2, sc2 = M.normalize(M.quadratic_mechanism(a=2.0, b=2.0))
    assert sc2.time_factor == pytest.approx(2.0)
    assert sc2.space_factor == pytest.approx(math.sqrt(2.0))
    assert sc2.mass_factor == pytest.approx(1.0, rel=1e-10)
    assert m2.b == pytest.approx(1.0, rel=1e-10)  # psi~ = -l + l^2

    m3, sc3 = M.normalize(M.stable_mechanism(0.5, A2=1.0 / 1.5))
    assert sc3.mass_factor == pytest.approx(2.25, rel=1e-10)
    assert m3.stable_A2 == pytest.approx(1.0, rel=1e-10)  # psi~ = -l + l^1.5


def test_normalize_idempotent(exp_tab_mech):
    for mech in [M.quadratic_mechanism(a=3.0, b=0.5), M.stable_mechanism(0.4, A2=2.0), exp_tab_mech]:
        n1, _ = M.normalize(mech)
        n2, sc2 = M.normalize(n1)
        assert sc2.time_factor == pytest.approx(1.0, abs=1e-10)
        assert sc2.mass_factor == pytest.approx(1.0, abs=1e-8)
        assert n2.a == n1.a and n2.b == pytest.approx(n1.b, abs=1e-10)
        if n1.levy.kind == "stable_tail":
            assert n2.levy.A1 == pytest.approx(n1.levy.A1, rel=1e-8)
        grid = [0.3, 1.7, 5.0]
        for x in grid:
            assert abs(M.eval_psi(n2, x) - M.eval_psi(n1, x)) <= 1e-8 * max(1.0, abs(M.eval_psi(n1, x)))


# ---------------------------------------------------------------------------
# check_conditions
# ---------------------------------------------------------------------------


def test_conditions_quadratic(quad_mech):
    rep = M.check_conditions(quad_mech)
    assert rep.a0.holds is True
    assert rep.a1.holds is True
    assert rep.a2.holds is False
    assert rep.a3.holds is True and rep.gamma_hat == pytest.approx(1.0)


def test_conditions_stable(stable_mech):
    rep = M.check_conditions(stable_mech)
    assert rep.a0.holds is True
    assert rep.a1.holds is False
    assert rep.a2.holds is True
    assert rep.beta_hat == pytest.approx(0.5, abs=1e-12)
    assert rep.a3.holds is True
    assert rep.gamma_hat == pytest.approx(0.5, abs=1e-9)
    assert rep.moment_rlogr and rep.moment_rlog2r
    # a2 invariant: 0 < beta_hat < beta_hat + delta_hat < 1
    assert 0.0 < rep.beta_hat < rep.beta_hat + rep.delta_hat < 1.0


def test_conditions_exponential_tail(exp_tab_mech):
    rep = M.check_conditions(M.normalize(exp_tab_mech)[0])
    assert rep.a1.holds is True
    assert rep.a2.holds is False          # exponential tail defeats the power-law fit
    assert rep.a2.evidence["max_rel_residual"] > 0.5
    assert rep.a0.holds is False          # psi0 grows only linearly here
    assert rep.a3.holds is False


def test_conditions_tabulated_power_tail(stable_tab_mech):
    rep = M.check_conditions(M.normalize(stable_tab_mech)[0])
    assert rep.a2.holds is True
    assert rep.beta_hat == pytest.approx(0.5, abs=0.02)
    assert "window" in rep.a2.evidence     # fitted window is reported, not asserted
    assert rep.a3.holds is True


def test_p_moment_threshold(stable_mech):
    rep = M.check_conditions(stable_mech)
    assert rep.p_moment(1.2) is True
    assert rep.p_moment(1.49) is True      # finite below 1 + beta
    assert rep.p_moment(1.51) is False
    assert rep.p_moment(2.0) is False


# ---------------------------------------------------------------------------
# power-tail comparison bound
# ---------------------------------------------------------------------------


def _fit_bound_constants(mech, A1, beta, delta, coarse):
    d = np.array([abs(M.eval_psi0(mech, z) - M.eval_psi1(mech, z, A1=A1, beta=beta)) for z in coarse])
    az = np.abs(coarse)
    denom = az**2 + az ** (1.0 + beta + delta)
    c = float(np.max(d / denom)) if np.any(d > 0) else 0.0
    return c, c


def test_power_tail_comparison_bound():
    # |psi0 - psi1| <= c1|z|^2 + c2|z|^(1+beta+delta) on |z| <= 1e3, Re z >= 0,
    # with constants fitted once on a coarse grid and then frozen.
    cases = []
    m1 = M.stable_mechanism(0.5, b=0.5, A2=1.0)
    m1 = M.normalize(m1)[0]
    rep1 = M.check_conditions(m1)
    cases.append((m1, rep1.A1_hat, rep1.beta_hat, rep1.delta_hat))
    rr = np.geomspace(1e-4, 1e7, 600)
    a1 = 0.5 / math.sqrt(math.pi)
    m2 = M.BranchingMechanism(a=1.0, b=0.0,
                              levy=M.tabulated_measure(rr, a1 * 1.5 * rr**-2.5 * (1 + 0.3 * rr**-0.25)))
    m2 = M.normalize(m2)[0]
    rep2 = M.check_conditions(m2)
    cases.append((m2, rep2.A1_hat, rep2.beta_hat, rep2.delta_hat))

    rng = np.random.default_rng(11)
    for mech, A1, beta, delta in cases:
        mags = np.geomspace(1e-2, 1e3, 9)
        args = rng.uniform(-math.pi / 2, math.pi / 2, size=9)
        coarse = mags * np.exp(1j * args)
        c1, c2 = _fit_bound_constants(mech, A1, beta, delta, coarse)
        mags_f = np.geomspace(1e-2, 1e3, 25)
        args_f = rng.uniform(-math.pi / 2, math.pi / 2, size=25)
        fine = mags_f * np.exp(1j * args_f)
        for z in fine:
            d = abs(M.eval_psi0(mech, z) - M.eval_psi1(mech, z, A1=A1, beta=beta))
            bound = c1 * abs(z) ** 2 + c2 * abs(z) ** (1.0 + beta + delta)
            assert d <= 1.5 * bound + 1e-12


def test_stable_with_diffusion_difference_is_quadratic():
    mech = M.normalize(M.stable_mechanism(0.5, b=0.5, A2=1.0))[0]
    for z in [0.5, 2.0 + 1.0j, 10.0j]:
        diff = M.eval_psi0(mech, z) - M.eval_psi1(mech, z)
        assert diff == pytest.approx(mech.b * complex(z) ** 2, rel=1e-9)


# ---------------------------------------------------------------------------
# quadrature error contract and mechanism files
# ---------------------------------------------------------------------------


def test_quadrature_error_carries_partial(stable_mech):
    with pytest.raises(M.QuadratureError) as exc:
        M._panel(stable_mech.levy, 4.0 + 0j, 0.1, 10.0, tol=0.0, max_doublings=2)
    assert isinstance(exc.value.partial, complex)
    assert abs(exc.value.partial) > 0


def test_mechanism_file_roundtrip(tmp_path):
    text = "kind = stable\nbeta = 0.5\nA2 = 1.0\n# comment\n"
    mech = M.parse_mechanism_text(text)
    assert mech.normalized and mech.levy.beta == 0.5

    table = np.column_stack([np.geomspace(1e-6, 60.0, 500), np.exp(-np.geomspace(1e-6, 60.0, 500))])
    np.savetxt(tmp_path / "dens.csv", table, delimiter=",")
    mf = tmp_path / "mech.txt"
    mf.write_text("kind = tabulated\na = 0.5\nb = 0\ndensity_table = dens.csv\n")
    mech2 = M.load_mechanism(str(mf))
    assert mech2.levy.kind == "tabulated"
    assert mech2.a == 0.5

    qf = tmp_path / "quad.txt"
    qf.write_text("kind = quadratic\na = 1\nb = 1\n")
    mech3 = M.load_mechanism(str(qf))
    assert mech3.normalized
