"""Event-driven and exact simulators for the branching processes under study.

Three layers:

* skeleton branching Brownian motion -- exact event-driven simulation driven
  by the offspring law from :mod:`branchlab.skeleton`;
* total-mass processes -- exact transition sampling (Poisson-Gamma steps for
  the quadratic continuous-state process, closed-form linear birth-death
  transitions for particle counts, geometric law for the pure-birth skeleton);
* branching-particle approximation of the measure-valued process -- N initial
  particles of mass 1/N whose offspring law matches the branching mechanism
  generator exactly at every N.

Per-replication RNG streams are derived from (seed, replication index), so
parallel and serial schedules agree bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from . import _kernels
from .mechanism import BranchingMechanism, quadratic_mechanism, stable_mechanism
from .skeleton import AliasTable, OffspringDistribution, derive_offspring

__all__ = [
    "ParticleCloud",
    "MassPath",
    "simulate_bbm",
    "additive_martingale",
    "derivative_martingale",
    "max_position",
    "centered_max",
    "extremal_centering",
    "simulate_csbp_quadratic",
    "csbp_quadratic_batch",
    "linear_bd_counts",
    "yule_counts",
    "skeleton_mass_batch",
    "sbm_offspring",
    "simulate_sbm_particles",
    "sbm_mass_quadratic_batch",
    "FluctuationConfig",
    "FluctuationSamples",
    "fluctuation_sample",
    "fluctuation_batch",
    "rep_seed",
]

DEFAULT_CAP = 2_000_000


def rep_seed(seed: int, rep: int, stream: int = 0) -> int:
    """Deterministic 32-bit kernel seed for one replication (and sub-stream)."""
    return int(np.random.SeedSequence((seed, rep, stream)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Clouds and their statistics
# ---------------------------------------------------------------------------


@dataclass
class ParticleCloud:
    """Positions and weights of a branching particle system at one time."""

    time: float
    positions: np.ndarray
    weight: float = 1.0            # common weight (1 for skeleton, 1/N for SBM)
    truncated: bool = False

    @property
    def count(self) -> int:
        return int(self.positions.size)

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.count, self.weight)


@dataclass
class MassPath:
    """Total-mass samples along an increasing time grid; zero is absorbing."""

    times: np.ndarray
    masses: np.ndarray
    initial_mass: float

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if np.any(self.masses < 0):
            raise ValueError("masses must be nonnegative")
        hit_zero = False
        for m in self.masses:
            if hit_zero and m != 0.0:
                raise ValueError("mass zero must be absorbing")
            hit_zero = hit_zero or m == 0.0


def _dist_tables(dist: OffspringDistribution):
    at = dist.alias
    return at.prob, at.alias, at.values


def simulate_bbm(dist: OffspringDistribution, horizon: float,
                 snapshots: Sequence[float], cap: int = DEFAULT_CAP,
                 seed: int = 0, x0: float = 0.0) -> list[ParticleCloud]:
    """One exact replication of the skeleton branching Brownian motion.

    A single particle starts at ``x0``; lifetimes are Exp(q), motion is
    standard Brownian, and deaths split into k >= 2 children.  Clouds are
    recorded at each snapshot time.  Exceeding ``cap`` aborts cleanly with
    every remaining cloud marked truncated.
    """
    snaps = list(snapshots)
    if any(s > horizon + 1e-12 for s in snaps) or any(np.diff(snaps) <= 0):
        raise ValueError("snapshots must be increasing and within the horizon")
    prob, alias, kvals = _dist_tables(dist)
    clouds: list[ParticleCloud] = []
    x = np.array([x0], dtype=float)
    t_prev = 0.0
    for j, t_snap in enumerate(snaps):
        if t_snap == t_prev:
            clouds.append(ParticleCloud(time=t_snap, positions=x.copy()))
            continue
        x, truncated = _kernels.branching_segment(
            rep_seed(seed, 0, stream=j + 1), x, t_prev, t_snap, dist.q,
            prob, alias, kvals, cap)
        if truncated:
            for t_rest in snaps[j:]:
                clouds.append(ParticleCloud(time=t_rest, positions=np.empty(0), truncated=True))
            return clouds
        clouds.append(ParticleCloud(time=t_snap, positions=x.copy()))
        t_prev = t_snap
    return clouds


def additive_martingale(cloud: ParticleCloud, lam: float) -> float:
    """sum_i w_i exp(-lam x_i) discounted by exp(-(lam^2/2 + 1) t).

    Falls back to log-space accumulation when the exponents would overflow.
    """
    c_lam = 0.5 * lam * lam + 1.0
    x = cloud.positions
    if x.size == 0:
        return 0.0
    expo = -lam * x
    m = float(np.max(expo))
    if m - c_lam * cloud.time > 600.0 or m > 600.0:
        return float(math.exp(logsumexp(expo) + math.log(cloud.weight) - c_lam * cloud.time))
    s = float(np.sum(np.exp(expo - m)))
    return cloud.weight * s * math.exp(m - c_lam * cloud.time)


def derivative_martingale(cloud: ParticleCloud, sign: int = +1) -> float:
    """exp(-2t) sum_i w_i (sqrt(2) t +- x_i) exp(-+ sqrt(2) x_i).

    ``sign=+1`` weights the left spatial tail, ``sign=-1`` the right.  The
    value may be negative at finite t; it is returned as-is.
    """
    if sign not in (+1, -1):
        raise ValueError("sign must be +1 or -1")
    x = cloud.positions
    if x.size == 0:
        return 0.0
    t = cloud.time
    expo = -sign * math.sqrt(2.0) * x
    m = float(np.max(expo))
    lin = math.sqrt(2.0) * t + sign * x
    s = float(np.sum(lin * np.exp(expo - m)))
    return cloud.weight * s * math.exp(m - 2.0 * t)


def extremal_centering(t: float) -> float:
    """sqrt(2) t - (3 / (2 sqrt(2))) log t, the centering of the rightmost particle."""
    if t <= 0:
        raise ValueError("centering needs t > 0")
    return math.sqrt(2.0) * t - 1.5 / math.sqrt(2.0) * math.log(t)


def max_position(cloud: ParticleCloud) -> float:
    if cloud.count == 0:
        raise ValueError("extinct/empty cloud has no maximum")
    return float(np.max(cloud.positions))


def centered_max(cloud: ParticleCloud) -> float:
    return max_position(cloud) - extremal_centering(cloud.time)


# ---------------------------------------------------------------------------
# Exact total-mass samplers
# ---------------------------------------------------------------------------


def csbp_quadratic_batch(x0: float, t_grid: Sequence[float], reps: int,
                         rng: np.random.Generator) -> np.ndarray:
    """Exact transitions of the quadratic-mechanism total-mass process.

    Over a step of length s the next mass given mass x is Gamma(K, e^s - 1)
    with K ~ Poisson(x e^s / (e^s - 1)); zero is absorbing.  This realizes the
    mass cumulant u_s(theta) = theta e^s / (1 + theta (e^s - 1)) exactly.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(np.diff(t_grid) <= 0) or np.any(t_grid <= 0):
        raise ValueError("t_grid must be positive and increasing")
    out = np.empty((reps, t_grid.size))
    x = np.full(reps, float(x0))
    t_prev = 0.0
    for j, t in enumerate(t_grid):
        s = t - t_prev
        c = math.expm1(s)
        rate = x * math.exp(s) / c
        k = rng.poisson(rate)
        x = np.where(k > 0, rng.gamma(np.maximum(k, 1), c), 0.0)
        x[k == 0] = 0.0
        out[:, j] = x
        t_prev = t
    return out


def simulate_csbp_quadratic(x0: float, t_grid: Sequence[float],
                            rng: np.random.Generator) -> MassPath:
    """One exact mass path of the quadratic-mechanism total-mass process."""
    masses = csbp_quadratic_batch(x0, t_grid, 1, rng)[0]
    return MassPath(times=np.asarray(t_grid, float), masses=masses, initial_mass=float(x0))


def linear_bd_counts(birth: float, death: float, n0, t_grid: Sequence[float],
                     reps: int, rng: np.random.Generator) -> np.ndarray:
    """Exact transition sampling of a linear birth-death count process.

    Per-individual birth rate ``birth`` and death rate ``death`` (growth rate
    birth - death must be nonzero).  Each ancestor line at horizon s is extinct
    with probability alpha(s), else 1 + Geometric with parameter eta(s); the
    population transition is Binomial thinning plus a negative binomial.
    """
    lam, mu = float(birth), float(death)
    delta = lam - mu
    if abs(delta) < 1e-12:
        raise ValueError("critical birth-death (birth == death) is not supported")
    t_grid = np.asarray(t_grid, dtype=float)
    n = np.full(reps, n0, dtype=np.int64) if np.isscalar(n0) else np.asarray(n0, dtype=np.int64).copy()
    out = np.empty((reps, t_grid.size), dtype=np.int64)
    t_prev = 0.0
    for j, t in enumerate(t_grid):
        s = t - t_prev
        e = math.exp(delta * s)
        alpha = mu * (e - 1.0) / (lam * e - mu)
        eta = lam * (e - 1.0) / (lam * e - mu)
        survivors = rng.binomial(n, 1.0 - alpha)
        extra = np.zeros_like(survivors)
        mask = survivors > 0
        if np.any(mask):
            extra[mask] = rng.negative_binomial(survivors[mask], 1.0 - eta)
        n = survivors + extra
        out[:, j] = n
        t_prev = t
    return out


def yule_counts(t: float, reps: int, rng: np.random.Generator) -> np.ndarray:
    """Exact pure-birth population at time t from one ancestor: Geometric(e^-t)."""
    return rng.geometric(math.exp(-t), size=reps).astype(np.int64)


def skeleton_mass_batch(dist: OffspringDistribution, t: float, reps: int,
                        seed: int, cap: int = 50_000_000) -> tuple[np.ndarray, int]:
    """Total skeleton population at time t for ``reps`` replications.

    Event-driven jump chain (exact for any offspring law).  Returns the counts
    and the number of capped replications (their counts are reported at the
    cap crossing and flagged by the second value).
    """
    prob, alias, kvals = _dist_tables(dist)
    out = np.empty(reps, dtype=np.int64)
    n_trunc = 0
    for r in range(reps):
        n, truncated = _kernels.mass_chain_segment(
            rep_seed(seed, r), 1, dist.q, t, prob, alias, kvals, cap)
        out[r] = n
        n_trunc += int(truncated)
    return out, n_trunc


# ---------------------------------------------------------------------------
# Branching-particle approximation of the measure-valued process
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SbmOffspring:
    """Branching rate and offspring law of the mass-1/N particle system."""

    N: int
    rate: float
    kvals: np.ndarray
    probs: np.ndarray
    tail_mass: float


def sbm_offspring(family: str, N: int, beta: float = 0.5,
                  tail_tol: float = 1e-9) -> SbmOffspring:
    """Offspring law of the particle approximation, exact at every N.

    With F_N(s) = s + psi(N(1-s)) / (rate_N * N) and rate_N = psi'(N), the
    rescaled generator rate_N * N * [F_N(1 - lam/N) - (1 - lam/N)] equals
    psi(lam) identically on 0 <= lam <= N; first moments of every additive
    statistic are preserved exactly.  Probabilities: p_1 = 0,
    p_0 = psi(N)/(rate_N N), p_2 gets b N / rate_N, and for the stable family
    p_k = A1 (1+beta) N^beta Gamma(k-1-beta) / (rate_N k!).
    """
    if N < 1:
        raise ValueError("need N >= 1")
    if family == "quadratic":
        rate = 2.0 * N - 1.0
        p0 = (N - 1.0) / rate
        p2 = N / rate
        kvals = np.array([0, 2], dtype=np.int64)
        probs = np.array([p0, p2])
        return SbmOffspring(N=N, rate=rate, kvals=kvals, probs=probs, tail_mass=0.0)
    if family != "stable":
        raise ValueError("family must be 'quadratic' or 'stable'")
    mech = stable_mechanism(beta)
    A1 = mech.levy.A1
    A2 = mech.stable_A2
    rate = -1.0 + (1.0 + beta) * A2 * N**beta
    if rate <= 0:
        raise ValueError("particle branching rate must be positive; increase N")
    p0 = (-N + A2 * N ** (1.0 + beta)) / (rate * N)
    kmax = 64
    log_coef = math.log(A1 * (1.0 + beta)) + beta * math.log(N) - math.log(rate)
    while True:
        ks = np.arange(2, kmax + 1, dtype=float)
        p = np.exp(log_coef + gammaln(ks - 1.0 - beta) - gammaln(ks + 1.0))
        tail = max(0.0, 1.0 - p0 - math.fsum(p.tolist()))
        if tail <= tail_tol or kmax >= 10**6:
            break
        kmax = min(2 * kmax, 10**6)
    if tail > tail_tol:
        raise RuntimeError(f"particle offspring tail {tail:.2e} above tolerance")
    p[-1] += tail
    kvals = np.concatenate([[0], np.arange(2, kmax + 1)]).astype(np.int64)
    probs = np.concatenate([[p0], p])
    probs = probs / math.fsum(probs.tolist())
    return SbmOffspring(N=N, rate=rate, kvals=kvals, probs=probs, tail_mass=tail)


def simulate_sbm_particles(family: str, N: int, horizon: float,
                           snapshots: Sequence[float], cap: int = DEFAULT_CAP,
                           seed: int = 0, beta: float = 0.5) -> list[ParticleCloud]:
    """One replication of the branching-particle approximation.

    N particles of mass 1/N start at the origin, branch at the generator-matched
    rate, and move as independent Brownian motions.
    """
    snaps = list(snapshots)
    if any(s > horizon + 1e-12 for s in snaps) or any(np.diff(snaps) <= 0):
        raise ValueError("snapshots must be increasing and within the horizon")
    off = sbm_offspring(family, N, beta=beta)
    table = AliasTable.build(off.kvals, off.probs)
    clouds: list[ParticleCloud] = []
    x = np.zeros(N, dtype=float)
    t_prev = 0.0
    for j, t_snap in enumerate(snaps):
        x, truncated = _kernels.branching_segment(
            rep_seed(seed, 0, stream=j + 1), x, t_prev, t_snap, off.rate,
            table.prob, table.alias, table.values, cap)
        if truncated:
            for t_rest in snaps[j:]:
                clouds.append(ParticleCloud(time=t_rest, positions=np.empty(0),
                                            weight=1.0 / N, truncated=True))
            return clouds
        clouds.append(ParticleCloud(time=t_snap, positions=x.copy(), weight=1.0 / N))
        t_prev = t_snap
    return clouds


def sbm_mass_quadratic_batch(N: int, t_grid: Sequence[float], reps: int,
                             rng: np.random.Generator) -> np.ndarray:
    """Total mass of the quadratic particle system by exact count transitions.

    The count process is linear birth-death with per-individual rates
    (birth, death) = (N, N-1); masses are counts / N.  Same law as the
    event-driven simulator's total mass, at O(1) cost per step.
    """
    counts = linear_bd_counts(float(N), float(N - 1), N, t_grid, reps, rng)
    return counts.astype(float) / float(N)


# ---------------------------------------------------------------------------
# Fluctuation sampling
# ---------------------------------------------------------------------------


@dataclass
class FluctuationConfig:
    """What to run for one martingale-fluctuation experiment."""

    family: str = "quadratic"          # quadratic | stable
    beta: float = 0.5
    lam: float = 0.0
    t: float = 10.0
    s: float = 15.0
    process: str = "auto"              # auto | csbp | skeleton | sbm
    N: int = 100
    cap: int = DEFAULT_CAP
    tail_tol: float = 1e-9

    def resolved_process(self) -> str:
        if self.process != "auto":
            return self.process
        if self.family == "quadratic" and self.lam == 0.0:
            return "csbp"
        return "sbm"

    def mechanism(self) -> BranchingMechanism:
        if self.family == "quadratic":
            return quadratic_mechanism()
        return stable_mechanism(self.beta)


@dataclass
class FluctuationSamples:
    """Per-replication martingale values and their normalized differences."""

    W_t: np.ndarray
    W_ts: np.ndarray
    D: np.ndarray
    dropped: int = 0
    norm_factor: float = 1.0


def _normalizer_for(cfg: FluctuationConfig) -> float:
    from .limits import normalizer, regime_for_family

    regime = regime_for_family(cfg.family, cfg.lam, cfg.beta)
    return normalizer(regime, cfg.lam, cfg.beta, cfg.t)


def fluctuation_batch(cfg: FluctuationConfig, reps: int, seed: int,
                      dist: Optional[OffspringDistribution] = None,
                      rep_offset: int = 0) -> FluctuationSamples:
    """Sample d(t) * (W_{t+s} - W_t) on ``reps`` independent paths.

    Both martingale values are taken on the same path; the later time acts as
    the proxy for the limit value.  Truncated replications are dropped and
    counted.
    """
    d_t = _normalizer_for(cfg)
    proc = cfg.resolved_process()
    lam = cfg.lam
    t, ts = cfg.t, cfg.t + cfg.s
    if proc == "csbp":
        if cfg.family != "quadratic" or lam != 0.0:
            raise ValueError("the exact mass sampler applies to the quadratic family at lam=0")
        rng = np.random.default_rng(np.random.SeedSequence((seed, rep_offset)))
        masses = csbp_quadratic_batch(1.0, [t, ts], reps, rng)
        W_t = masses[:, 0] * math.exp(-t)
        W_ts = masses[:, 1] * math.exp(-ts)
        return FluctuationSamples(W_t=W_t, W_ts=W_ts, D=d_t * (W_ts - W_t),
                                  dropped=0, norm_factor=d_t)
    if proc == "skeleton":
        if dist is None:
            dist = derive_offspring(cfg.mechanism(), tail_tol=cfg.tail_tol)
        W_t = np.empty(reps)
        W_ts = np.empty(reps)
        dropped = 0
        kept = 0
        for r in range(rep_offset, rep_offset + reps):
            clouds = simulate_bbm(dist, ts, [t, ts], cap=cfg.cap, seed=rep_seed(seed, r))
            if any(c.truncated for c in clouds):
                dropped += 1
                continue
            W_t[kept] = additive_martingale(clouds[0], lam)
            W_ts[kept] = additive_martingale(clouds[1], lam)
            kept += 1
        W_t, W_ts = W_t[:kept], W_ts[:kept]
        return FluctuationSamples(W_t=W_t, W_ts=W_ts, D=d_t * (W_ts - W_t),
                                  dropped=dropped, norm_factor=d_t)
    if proc == "sbm":
        if cfg.family == "quadratic" and lam == 0.0:
            rng = np.random.default_rng(np.random.SeedSequence((seed, rep_offset)))
            masses = sbm_mass_quadratic_batch(cfg.N, [t, ts], reps, rng)
            W_t = masses[:, 0] * math.exp(-t)
            W_ts = masses[:, 1] * math.exp(-ts)
            return FluctuationSamples(W_t=W_t, W_ts=W_ts, D=d_t * (W_ts - W_t),
                                      dropped=0, norm_factor=d_t)
        W_t = np.empty(reps)
        W_ts = np.empty(reps)
        dropped = 0
        kept = 0
        for r in range(rep_offset, rep_offset + reps):
            clouds = simulate_sbm_particles(cfg.family, cfg.N, ts, [t, ts],
                                            cap=cfg.cap, seed=rep_seed(seed, r),
                                            beta=cfg.beta)
            if any(c.truncated for c in clouds):
                dropped += 1
                continue
            W_t[kept] = additive_martingale(clouds[0], lam)
            W_ts[kept] = additive_martingale(clouds[1], lam)
            kept += 1
        W_t, W_ts = W_t[:kept], W_ts[:kept]
        return FluctuationSamples(W_t=W_t, W_ts=W_ts, D=d_t * (W_ts - W_t),
                                  dropped=dropped, norm_factor=d_t)
    raise ValueError(f"unknown process {proc!r}")


def fluctuation_sample(cfg: FluctuationConfig, seed: int,
                       dist: Optional[OffspringDistribution] = None) -> dict:
    """One replication: {'W_t': ..., 'W_ts': ..., 'D': ...}."""
    batch = fluctuation_batch(cfg, 1, seed, dist=dist)
    if batch.D.size == 0:
        raise RuntimeError("the single replication was truncated")
    return {"W_t": float(batch.W_t[0]), "W_ts": float(batch.W_ts[0]), "D": float(batch.D[0])}
