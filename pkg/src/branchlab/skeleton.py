"""Skeleton offspring law derived from a normalized branching mechanism.

The supercritical process carries an embedded branching Brownian motion whose
branching rate q and offspring probabilities {p_k : k >= 2} are pinned down by

    q * (F(s) - s) = psi(1 - s),        F(s) = sum_{k>=2} p_k s^k.

Matching Taylor coefficients at s = 0 gives q = psi'(1) and

    p_k = [ 2*b*1{k=2} + integral y^k e^{-y} pi(dy) ] / (q * k!).

There is no death and no unary branching (p_0 = p_1 = 0 by construction).
All k-factorials live in log space; for power tails the integral reduces to a
Gamma-function ratio and the quadrature path is kept as a cross-check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import gammaln

from .mechanism import BranchingMechanism, eval_psi

__all__ = [
    "DerivationError",
    "OffspringDistribution",
    "AliasTable",
    "derive_offspring",
    "sample_offspring",
    "branching_rate",
]

KMAX_CAP = 10**6


class DerivationError(RuntimeError):
    """Offspring truncation could not reach the requested tail tolerance."""

    def __init__(self, message: str, tail_mass: float):
        super().__init__(f"{message} (achieved tail mass {tail_mass:.3e})")
        self.tail_mass = tail_mass


@dataclass(frozen=True)
class AliasTable:
    """Walker alias table for O(1) draws from a finite discrete law."""

    prob: np.ndarray
    alias: np.ndarray
    values: np.ndarray

    @staticmethod
    def build(values: np.ndarray, weights: np.ndarray) -> "AliasTable":
        w = np.asarray(weights, dtype=float)
        if np.any(w < 0) or w.sum() <= 0:
            raise ValueError("alias table needs nonnegative weights with positive mass")
        n = w.size
        scaled = w * (n / w.sum())
        prob = np.ones(n)
        alias = np.arange(n, dtype=np.int64)
        small = [i for i in range(n) if scaled[i] < 1.0]
        large = [i for i in range(n) if scaled[i] >= 1.0]
        while small and large:
            s = small.pop()
            l = large.pop()
            prob[s] = scaled[s]
            alias[s] = l
            scaled[l] = scaled[l] - (1.0 - scaled[s])
            (small if scaled[l] < 1.0 else large).append(l)
        return AliasTable(prob=prob, alias=alias, values=np.asarray(values, dtype=np.int64))

    def sample(self, rng: np.random.Generator, size=None):
        n = self.prob.size
        idx = rng.integers(0, n, size=size)
        u = rng.random(size=size)
        take_alias = u >= self.prob[idx]
        out = np.where(take_alias, self.alias[idx], idx)
        return self.values[out]


@dataclass(frozen=True)
class OffspringDistribution:
    """Branching rate q and offspring atoms p_k for k = 2 .. kmax.

    ``p[j]`` is the probability of k = j + 2 after the residual ``tail_mass``
    has been folded into the top atom (keeps the law normalized; biases the
    mean down by at most kmax * tail_mass, which tests budget for).
    """

    q: float
    p: np.ndarray
    tail_mass: float

    def __post_init__(self):
        if self.q <= 0:
            raise ValueError("branching rate must be positive")
        total = math.fsum(self.p.tolist())
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"offspring atoms sum to {total!r}, not 1")
        if np.any(self.p < 0):
            raise ValueError("negative offspring probability")

    @property
    def kmax(self) -> int:
        return self.p.size + 1

    @property
    def mean_exact(self) -> float:
        """Mean offspring number implied by the defining identity: 1 + 1/q."""
        return 1.0 + 1.0 / self.q

    def mean_truncated(self) -> float:
        """Mean of the folded finite law actually sampled."""
        ks = np.arange(2, self.kmax + 1, dtype=float)
        return float(np.dot(ks, self.p))

    def pgf(self, s: complex) -> complex:
        ks = np.arange(2, self.kmax + 1)
        return complex(np.sum(self.p * np.asarray(s, dtype=complex) ** ks))

    @cached_property
    def alias(self) -> AliasTable:
        return AliasTable.build(np.arange(2, self.kmax + 1), self.p)


def _first_moment_one_minus_exp(levy) -> float:
    """integral y (1 - e^{-y}) pi(dy) for a tabulated measure (knot-aligned rule)."""
    from .mechanism import _GL_NODES, _GL_WEIGHTS

    def rule(splits: int) -> float:
        knots = np.log(levy.r)
        pieces = np.linspace(knots[:-1], knots[1:], splits + 1, axis=1)
        lo, hi = pieces[:, :-1].ravel(), pieces[:, 1:].ravel()
        mids, halves = 0.5 * (lo + hi), 0.5 * (hi - lo)
        u = mids[:, None] + halves[:, None] * _GL_NODES[None, :]
        y = np.exp(u)
        vals = y * (-np.expm1(-y)) * levy.density(y) * y  # trailing y: log Jacobian
        return float(np.sum(halves * (vals @ _GL_WEIGHTS)))

    total = rule(1)
    refined = rule(2)
    if abs(refined - total) > 1e-10 * max(1.0, abs(refined)):
        refined = rule(4)
    # stub: y beyond the table, where 1 - e^{-y} = 1 up to e^{-r_last}
    r_last = levy.r[-1]
    stub = levy.moment(r_last, math.inf, 1.0)
    if math.isfinite(stub) and r_last < 40.0 and levy.f[-1] > 0:
        u = np.linspace(math.log(r_last), math.log(r_last + 200.0), 2001)
        y = np.exp(u)
        stub -= float(np.trapezoid(y * np.exp(-y) * levy.density(y) * y, u))
    return refined + stub


def branching_rate(mech: BranchingMechanism) -> float:
    """q = psi'(1) = -1 + 2b + integral y (1 - e^{-y}) pi(dy) for normalized input."""
    if not mech.normalized:
        raise ValueError("branching_rate expects a normalized mechanism")
    levy = mech.levy
    if levy.is_zero:
        jump = 0.0
    elif levy.kind == "stable_tail":
        # d/dz [A2 z^(1+beta)] at z = 1
        jump = (1.0 + levy.beta) * float(mech.stable_A2)
    else:
        jump = _first_moment_one_minus_exp(levy)
    return -1.0 + 2.0 * mech.b + jump


def _log_moments_stable(mech: BranchingMechanism, ks: np.ndarray) -> np.ndarray:
    """log integral y^k e^{-y} pi(dy) for the exact power-tail density."""
    levy = mech.levy
    # density A1 (1+beta) y^{-(2+beta)}: integral = A1 (1+beta) Gamma(k-1-beta)
    return math.log(levy.A1 * (1.0 + levy.beta)) + gammaln(ks - 1.0 - levy.beta)


def _log_moments_quadrature(mech: BranchingMechanism, ks: np.ndarray) -> np.ndarray:
    """log integral y^k e^{-y} pi(dy) by log-space quadrature (any measure kind)."""
    levy = mech.levy
    if levy.is_zero:
        return np.full(ks.shape, -np.inf)
    k_hi = float(ks.max())
    # integrand y^k e^-y peaks at y ~ k; cover the density support and the peaks
    if levy.kind == "tabulated":
        y_min, y_max = levy.r[0], max(levy.r[-1], k_hi * 4.0 + 50.0)
    else:
        # the k=2 integrand carries the full y^-beta singularity at 0; push the
        # grid floor low enough that the un-covered mass is below 1e-10
        y_min, y_max = 1e-20, k_hi * 4.0 + 50.0
    n_dec = math.log10(y_max / y_min)
    n_nodes = int(max(800, 48 * n_dec))
    u = np.linspace(math.log(y_min), math.log(y_max), n_nodes)
    y = np.exp(u)
    du = u[1] - u[0]
    log_base = np.log(np.maximum(levy.density(y), 1e-300)) - y + u  # + u for the Jacobian
    out = np.empty(ks.size)
    chunk = 4096
    for i in range(0, ks.size, chunk):
        kc = ks[i:i + chunk, None]
        lv = kc * u[None, :] + log_base[None, :]
        m = lv.max(axis=1, keepdims=True)
        out[i:i + chunk] = (m[:, 0] + np.log(np.sum(np.exp(lv - m), axis=1) * du))
    return out


def derive_offspring(mech: BranchingMechanism, kmax: int = 64, tail_tol: float = 1e-9,
                     force_quadrature: bool = False) -> OffspringDistribution:
    """Derive (q, {p_k}) from a normalized mechanism, growing kmax until the
    un-truncated tail drops below ``tail_tol`` (hard cap at 10**6 atoms)."""
    if not mech.normalized:
        raise ValueError("derive_offspring expects a normalized mechanism")
    if kmax < 2:
        raise ValueError("kmax must be at least 2")
    q = branching_rate(mech)
    if q <= 0:
        raise DerivationError("derived branching rate is not positive", math.nan)
    use_closed = mech.levy.kind == "stable_tail" and not force_quadrature

    while True:
        ks = np.arange(2, kmax + 1, dtype=float)
        if mech.levy.is_zero:
            log_int = np.full(ks.shape, -np.inf)
        elif use_closed:
            log_int = _log_moments_stable(mech, ks)
        else:
            log_int = _log_moments_quadrature(mech, ks)
        log_p = log_int - gammaln(ks + 1.0) - math.log(q)
        p = np.exp(log_p)
        if mech.b > 0.0:
            p[0] += 2.0 * mech.b / (2.0 * q)
        tail = max(0.0, 1.0 - math.fsum(p.tolist()))
        if tail <= tail_tol:
            last = int(np.max(np.nonzero(p > 0.0)[0])) if np.any(p > 0) else 0
            p = p[: last + 1].copy()
            p[-1] += tail          # fold the residual into the top atom
            p = p / math.fsum(p.tolist())
            return OffspringDistribution(q=q, p=p, tail_mass=tail)
        if kmax >= KMAX_CAP:
            raise DerivationError("tail tolerance unreachable under the atom cap", tail)
        kmax = min(2 * kmax, KMAX_CAP)


def sample_offspring(dist: OffspringDistribution, rng: np.random.Generator, size=None):
    """Draw offspring counts k >= 2 via the alias table, O(1) per draw."""
    return dist.alias.sample(rng, size=size)
