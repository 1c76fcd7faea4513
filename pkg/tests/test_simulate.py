"""Simulators: exactness, martingale properties, determinism."""

import math

import numpy as np
import pytest

from branchlab import mechanism as M
from branchlab import simulate as sim
from branchlab import skeleton as S
from branchlab.lab import ks_distance


@pytest.fixture(scope="module")
def quad_dist():
    return S.derive_offspring(M.quadratic_mechanism())


@pytest.fixture(scope="module")
def stable_dist():
    return S.derive_offspring(M.stable_mechanism(0.5), tail_tol=1e-6)


def bbm_reps(dist, t, snaps, reps, seed, cap=sim.DEFAULT_CAP):
    out = []
    for r in range(reps):
        out.append(sim.simulate_bbm(dist, t, snaps, cap=cap, seed=sim.rep_seed(seed, r)))
    return out


# ---------------------------------------------------------------------------
# Skeleton BBM
# ---------------------------------------------------------------------------


def test_bbm_horizon_zero(quad_dist):
    clouds = sim.simulate_bbm(quad_dist, 0.0, [0.0], seed=4)
    assert clouds[0].count == 1 and clouds[0].positions[0] == 0.0


def test_bbm_mean_population(quad_dist):
    reps = 4000
    counts = np.array([c[0].count for c in bbm_reps(quad_dist, 5.0, [5.0], reps, seed=11)])
    scaled = counts * math.exp(-5.0)
    se = scaled.std() / math.sqrt(reps)
    assert abs(scaled.mean() - 1.0) <= 3 * se


def test_bbm_second_moment_quadratic(quad_dist):
    # E[(e^-t |Z_t|)^2] = 2 - e^-t for the pure-binary skeleton
    reps = 10_000
    t = 5.0
    counts = np.array([c[0].count for c in bbm_reps(quad_dist, t, [t], reps, seed=12)])
    z2 = (counts * math.exp(-t)) ** 2
    target = 2.0 - math.exp(-t)
    se = z2.std() / math.sqrt(reps)
    assert abs(z2.mean() - target) <= 3 * se


def test_additive_martingale_point_values(quad_dist):
    cloud = sim.ParticleCloud(time=0.0, positions=np.array([0.0]))
    for lam in [0.0, 0.7, -1.2]:
        assert sim.additive_martingale(cloud, lam) == pytest.approx(1.0)
    # log-space guard: huge positions must not overflow
    far = sim.ParticleCloud(time=1000.0, positions=np.array([-1500.0, -1400.0]))
    val = sim.additive_martingale(far, 1.0)
    assert math.isfinite(val) and val > 0


@pytest.mark.parametrize("lam", [0.0, 0.5])
def test_additive_martingale_mean_one(quad_dist, lam):
    reps = 10_000
    t = 5.0
    w = np.array([sim.additive_martingale(c[0], lam)
                  for c in bbm_reps(quad_dist, t, [t], reps, seed=13)])
    se = w.std() / math.sqrt(reps)
    assert abs(w.mean() - 1.0) <= 3 * se


def test_derivative_martingale_zero_at_origin():
    cloud = sim.ParticleCloud(time=0.0, positions=np.array([0.0]))
    assert sim.derivative_martingale(cloud, +1) == 0.0
    assert sim.derivative_martingale(cloud, -1) == 0.0


@pytest.mark.slow
def test_derivative_martingale_mean_stability_and_positivity(quad_dist):
    # martingale: mean constant across t; positivity of the limit shows up as a
    # shrinking fraction of negative finite-t values
    reps = 4000
    means, ses, neg_frac = [], [], []
    for t in [4.0, 6.0, 8.0]:
        vals = np.array([sim.derivative_martingale(c[0], +1)
                         for c in bbm_reps(quad_dist, t, [t], reps, seed=14)])
        means.append(vals.mean())
        ses.append(vals.std() / math.sqrt(reps))
        neg_frac.append(float(np.mean(vals < 0)))
    for m2, s2 in zip(means[1:], ses[1:]):
        assert abs(m2 - means[0]) <= 3 * math.sqrt(s2**2 + ses[0] ** 2)
    assert neg_frac[0] > neg_frac[1] > neg_frac[2]


def test_max_position_single_particle():
    cloud = sim.ParticleCloud(time=0.0, positions=np.array([0.0]))
    assert sim.max_position(cloud) == 0.0
    with pytest.raises(ValueError):
        sim.max_position(sim.ParticleCloud(time=1.0, positions=np.empty(0)))


@pytest.mark.slow
def test_max_position_distributional_stability(quad_dist):
    # medians of the centered maximum at t=8 and t=12 stay within 0.5, and the
    # central 99% ranges are comparable (tightness)
    reps = 400
    stats = {}
    for t in [8.0, 12.0]:
        vals = np.array([sim.centered_max(c[0])
                         for c in bbm_reps(quad_dist, t, [t], reps, seed=15, cap=10**7)])
        stats[t] = (np.median(vals), np.quantile(vals, 0.995) - np.quantile(vals, 0.005))
    assert abs(stats[8.0][0] - stats[12.0][0]) < 0.5
    ratio = stats[12.0][1] / stats[8.0][1]
    assert 0.5 <= ratio <= 2.0


def test_bbm_cap_truncates_cleanly(quad_dist):
    clouds = sim.simulate_bbm(quad_dist, 8.0, [4.0, 8.0], cap=50, seed=21)
    assert any(c.truncated for c in clouds)
    for c in clouds:
        if c.truncated:
            assert c.count == 0


def test_bbm_determinism(quad_dist):
    a = sim.simulate_bbm(quad_dist, 3.0, [1.5, 3.0], seed=99)
    b = sim.simulate_bbm(quad_dist, 3.0, [1.5, 3.0], seed=99)
    for ca, cb in zip(a, b):
        assert np.array_equal(ca.positions, cb.positions)


# ---------------------------------------------------------------------------
# Exact mass samplers
# ---------------------------------------------------------------------------


def test_csbp_extinction_probability():
    rng = np.random.default_rng(31)
    m = sim.csbp_quadratic_batch(1.0, [10.0], 100_000, rng)[:, 0]
    p_hat = float(np.mean(m == 0.0))
    target = math.exp(-math.exp(10.0) / math.expm1(10.0))
    se = math.sqrt(target * (1 - target) / 100_000)
    assert abs(p_hat - target) <= 3 * se


def test_csbp_mean():
    rng = np.random.default_rng(32)
    m = sim.csbp_quadratic_batch(1.0, [5.0], 100_000, rng)[:, 0]
    scaled = m * math.exp(-5.0)
    assert abs(scaled.mean() - 1.0) <= 3 * scaled.std() / math.sqrt(m.size)


def test_csbp_laplace_functional_fixed_point():
    # E[e^{-mass_t}] = exp(-u_t(1)) = e^{-1} for every t (1 is the cumulant fixed point)
    rng = np.random.default_rng(33)
    m = sim.csbp_quadratic_batch(1.0, [2.0], 100_000, rng)[:, 0]
    vals = np.exp(-m)
    target = math.exp(-1.0)
    assert abs(vals.mean() - target) <= 3 * vals.std() / math.sqrt(m.size)


def test_csbp_semigroup_two_steps_vs_one():
    # masses after (s1 then s2) match one step of s1+s2 in law: KS <= 0.01
    rng1 = np.random.default_rng(34)
    two = sim.csbp_quadratic_batch(1.0, [1.0, 3.0], 100_000, rng1)[:, 1]
    rng2 = np.random.default_rng(35)
    one = sim.csbp_quadratic_batch(1.0, [3.0], 100_000, rng2)[:, 0]
    assert ks_distance(two, one) <= 0.01


def test_csbp_mass_path_absorbing():
    rng = np.random.default_rng(36)
    path = sim.simulate_csbp_quadratic(0.01, [1.0, 2.0, 5.0, 9.0], rng)
    assert path.masses.shape == (4,)
    # absorbing-zero validation is enforced by the MassPath constructor
    with pytest.raises(ValueError):
        sim.MassPath(times=np.array([1.0, 2.0]), masses=np.array([0.0, 1.0]),
                     initial_mass=1.0)


def test_yule_counts_match_linear_bd_and_event_chain(quad_dist):
    rng = np.random.default_rng(37)
    y = sim.yule_counts(4.0, 30_000, rng)
    rng = np.random.default_rng(38)
    bd = sim.linear_bd_counts(1.0, 0.0, 1, [4.0], 30_000, rng)[:, 0]
    assert ks_distance(y, bd) <= 0.012
    chain, n_trunc = sim.skeleton_mass_batch(quad_dist, 4.0, 30_000, seed=39)
    assert n_trunc == 0
    assert ks_distance(y, chain) <= 0.012


def test_stable_mass_chain_matches_exact_law(stable_dist):
    # oracle: the population pgf is 1 - u_t(1-s) in closed form, so the exact
    # law of the count is recoverable by FFT inversion on the unit circle
    from branchlab.analytic import cumulant_u_t

    t = 5.0
    counts, n_trunc = sim.skeleton_mass_batch(stable_dist, t, 20_000, seed=40)
    assert n_trunc == 0
    n_fft = 1 << 14
    phi = 2.0 * math.pi * np.arange(n_fft) / n_fft
    pgf_vals = np.array([1.0 - cumulant_u_t("stable", t, 1.0 - np.exp(1j * p))
                         for p in phi])
    pmf = np.fft.fft(pgf_vals).real / n_fft
    cdf = np.cumsum(np.clip(pmf, 0.0, None))
    median_exact = int(np.searchsorted(cdf, 0.5))
    frac_below = float(np.mean(counts <= median_exact))
    assert abs(frac_below - 0.5) <= 3 * 0.5 / math.sqrt(counts.size)
    # exact vs empirical CDF at a few quantiles
    for q in [0.25, 0.75, 0.9]:
        nq = int(np.searchsorted(cdf, q))
        assert abs(float(np.mean(counts <= nq)) - q) <= 0.012


# ---------------------------------------------------------------------------
# Particle approximation
# ---------------------------------------------------------------------------


def test_sbm_generator_match_quadratic():
    # rate_N * N * [F_N(1 - lam/N) - (1 - lam/N)] = -lam + lam^2 exactly
    for N in [1, 3, 10, 400]:
        off = sim.sbm_offspring("quadratic", N)
        for lam in [0.3, 1.0, min(2.5, N)]:
            s = 1.0 - lam / N
            F = off.probs[0] + off.probs[1] * s * s
            val = off.rate * N * (F - s)
            assert val == pytest.approx(-lam + lam * lam, abs=1e-9)


def test_sbm_generator_match_stable():
    mech = M.stable_mechanism(0.5)
    for N in [5, 40]:
        off = sim.sbm_offspring("stable", N, beta=0.5, tail_tol=1e-9)
        for lam in [0.2, 1.0, 3.0]:
            s = 1.0 - lam / N
            F = float(np.sum(off.probs * s ** off.kvals.astype(float)))
            val = off.rate * N * (F - s)
            target = M.eval_psi(mech, lam).real
            assert val == pytest.approx(target, abs=5e-7)


def test_sbm_single_particle_reduces_to_pure_birth():
    off = sim.sbm_offspring("quadratic", 1)
    assert off.probs[0] == 0.0 and off.probs[1] == 1.0 and off.rate == 1.0
    reps = 3000
    w = []
    for r in range(reps):
        c = sim.simulate_sbm_particles("quadratic", 1, 3.0, [3.0], seed=sim.rep_seed(41, r))
        w.append(c[0].count * math.exp(-3.0))
    w = np.array(w)
    assert abs(w.mean() - 1.0) <= 3 * w.std() / math.sqrt(reps)


def test_sbm_mass_martingale_mean_exact_path():
    rng = np.random.default_rng(42)
    w = sim.sbm_mass_quadratic_batch(100, [4.0], 50_000, rng)[:, 0] * math.exp(-4.0)
    assert abs(w.mean() - 1.0) <= 3 * w.std() / math.sqrt(w.size)


def test_sbm_exact_bd_matches_event_driven():
    # same law for the total mass: exact transitions vs the event simulator
    reps = 3000
    N, t = 10, 2.0
    ev = []
    for r in range(reps):
        c = sim.simulate_sbm_particles("quadratic", N, t, [t], seed=sim.rep_seed(43, r))
        ev.append(c[0].count)
    rng = np.random.default_rng(44)
    bd = sim.linear_bd_counts(float(N), float(N - 1), N, [t], reps, rng)[:, 0]
    assert ks_distance(np.array(ev), bd) <= 0.035


def test_sbm_counts_converge_to_continuum_mass():
    # N=400 particle counts at t=8 against the exact continuum mass law
    rng = np.random.default_rng(45)
    w = sim.sbm_mass_quadratic_batch(400, [8.0], 10_000, rng)[:, 0]
    rng2 = np.random.default_rng(46)
    x = sim.csbp_quadratic_batch(1.0, [8.0], 10_000, rng2)[:, 0]
    assert ks_distance(w, x) <= 0.03


# ---------------------------------------------------------------------------
# Fluctuation sampling
# ---------------------------------------------------------------------------


def test_fluctuation_batch_zero_mean_and_unit_cf_at_zero():
    cfg = sim.FluctuationConfig(family="quadratic", lam=0.0, t=8.0, s=10.0, process="csbp")
    batch = sim.fluctuation_batch(cfg, 50_000, seed=47)
    se = batch.D.std() / math.sqrt(batch.D.size)
    assert abs(batch.D.mean()) <= 3 * se
    from branchlab.lab import ecf

    e = ecf(batch.D, np.array([0.0]))
    assert e.values[0] == pytest.approx(1.0 + 0.0j, abs=1e-12)


def test_fluctuation_single_sample():
    cfg = sim.FluctuationConfig(family="quadratic", lam=0.0, t=4.0, s=4.0, process="csbp")
    out = sim.fluctuation_sample(cfg, seed=48)
    assert set(out) == {"W_t", "W_ts", "D"}
    assert out["D"] == pytest.approx(math.exp(2.0) * (out["W_ts"] - out["W_t"]), rel=1e-12)


def test_fluctuation_skeleton_process_runs():
    cfg = sim.FluctuationConfig(family="quadratic", lam=0.5, t=3.0, s=3.0, process="skeleton")
    batch = sim.fluctuation_batch(cfg, 500, seed=49)
    assert batch.D.size == 500 and batch.dropped == 0
    assert np.all(np.isfinite(batch.D))
