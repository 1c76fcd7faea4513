"""Limit-law toolkit: stable distributions, fluctuation regimes, normalizing
factors, and samplers for the scale-mixture limit laws.

Regimes partition the weight parameter lam by |lam| against the thresholds
sqrt(2)/2 (finite-variance branch) or sqrt(2)/(1+beta) (power-tail branch),
with the outer nondegeneracy boundary at sqrt(2).  Each regime carries its own
normalizing factor d(t) and limiting mixture:

    small      gaussian:  sqrt(sigma^2/(1-lam^2)) sqrt(W) * U
    boundary   gaussian:  2^(3/4) pi^(-1/4) sigma sqrt(W') * U
    small      stable:    c_{lam,beta}^(1/(1+beta)) W^(1/(1+beta)) * V
    boundary   stable:    c_beta^(1/(1+beta)) W'^(1/(1+beta)) * V

where U is standard normal, V is the strictly (1+beta)-stable law with CF
exp((-i theta)^(1+beta)), W is the additive-martingale limit at 2*lam (resp.
(1+beta)*lam) and W' the derivative-martingale limit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import gamma as gamma_fn

from .mechanism import ConditionReport

__all__ = [
    "StableParams",
    "stable_cf",
    "sample_stable",
    "stable_mixture_factor",
    "Regime",
    "RegimeError",
    "regime_classify",
    "regime_for_family",
    "normalizer",
    "log_normalizer",
    "c_lambda_beta",
    "c_beta_const",
    "mixture_limit_sampler",
]

SQRT2 = math.sqrt(2.0)


class RegimeError(RuntimeError):
    """No limit theorem covers the requested parameter."""


# ---------------------------------------------------------------------------
# Stable laws
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StableParams:
    """Parameters of the alpha-stable law S_alpha(nu, eta, mu).

    The characteristic exponent is
        -nu^alpha |th|^alpha (1 - i eta sign(th) tan(pi alpha / 2)) + i mu th
    for alpha != 1 and -nu |th| (1 + i eta (2/pi) sign(th) log|th|) + i mu th
    at alpha = 1.  ``strict`` pins the shift degeneracy (mu = 0 for alpha != 1,
    eta = 0 for alpha = 1).
    """

    alpha: float
    nu: float
    eta: float = 0.0
    mu: float = 0.0
    strict: bool = True

    def __post_init__(self):
        if not (0.0 < self.alpha < 2.0):
            raise ValueError("alpha must lie in (0, 2)")
        if self.nu <= 0.0:
            raise ValueError("nu must be positive")
        if not (-1.0 <= self.eta <= 1.0):
            raise ValueError("eta must lie in [-1, 1]")
        if self.strict:
            if self.alpha != 1.0 and self.mu != 0.0:
                raise ValueError("strictly stable with alpha != 1 forces mu = 0")
            if self.alpha == 1.0 and self.eta != 0.0:
                raise ValueError("strictly stable with alpha = 1 forces eta = 0")


def stable_cf(params: StableParams, theta):
    """Characteristic function by the distinguished logarithm, vectorized."""
    th = np.asarray(theta, dtype=float)
    a, nu, eta, mu = params.alpha, params.nu, params.eta, params.mu
    ath = np.abs(th)
    sg = np.sign(th)
    if a != 1.0:
        logf = -(nu**a) * ath**a * (1.0 - 1j * eta * sg * math.tan(math.pi * a / 2.0))
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            log_ath = np.where(ath > 0, np.log(np.where(ath > 0, ath, 1.0)), 0.0)
        logf = -nu * ath * (1.0 + 1j * eta * (2.0 / math.pi) * sg * log_ath)
    return np.exp(logf + 1j * mu * th)


def sample_stable(params: StableParams, rng: np.random.Generator, size=None):
    """Exact draws via the trigonometric transform of (uniform, exponential)."""
    a, nu, eta, mu = params.alpha, params.nu, params.eta, params.mu
    th = rng.uniform(-math.pi / 2.0, math.pi / 2.0, size=size)
    e = rng.exponential(1.0, size=size)
    if a != 1.0:
        tan_half = math.tan(math.pi * a / 2.0)
        b = math.atan(eta * tan_half) / a
        s = (1.0 + eta * eta * tan_half * tan_half) ** (1.0 / (2.0 * a))
        x = (
            s
            * np.sin(a * (th + b))
            / np.cos(th) ** (1.0 / a)
            * (np.cos(th - a * (th + b)) / e) ** ((1.0 - a) / a)
        )
        return nu * x + mu
    half_pi = math.pi / 2.0
    x = (1.0 / half_pi) * (
        (half_pi + eta * th) * np.tan(th)
        - eta * np.log((half_pi * e * np.cos(th)) / (half_pi + eta * th))
    )
    return nu * x + (2.0 / math.pi) * eta * nu * math.log(nu) + mu


def stable_mixture_factor(beta: float) -> StableParams:
    """The strictly (1+beta)-stable law with CF exp((-i theta)^(1+beta))."""
    if not (0.0 < beta < 1.0):
        raise ValueError("beta must lie in (0, 1)")
    alpha = 1.0 + beta
    return StableParams(alpha=alpha, nu=math.sin(math.pi * beta / 2.0) ** (1.0 / alpha),
                        eta=1.0, mu=0.0, strict=True)


# ---------------------------------------------------------------------------
# Regimes and normalizers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Regime:
    """Fluctuation regime and the theorem branch governing it.

    kind: small | boundary | large | critical_sqrt2 | degenerate.
    theorem: 'gaussian' (finite-variance branch), 'stable' (power-tail branch),
    or 'moment' (large-|lam| convergence from a p-th moment alone).
    """

    kind: str
    theorem: Optional[str] = None
    thresholds: dict = field(default_factory=dict)


def _inner_threshold(theorem: str, beta: Optional[float]) -> float:
    if theorem == "gaussian":
        return SQRT2 / 2.0
    if theorem == "stable":
        if beta is None:
            raise ValueError("power-tail regime needs beta")
        return SQRT2 / (1.0 + beta)
    raise ValueError(f"unknown theorem branch {theorem!r}")


def _classify_against(lam: float, theorem: str, beta: Optional[float],
                      tol: float) -> Regime:
    al = abs(lam)
    thr = _inner_threshold(theorem, beta)
    info = {"inner": thr, "outer": SQRT2}
    if abs(al - SQRT2) <= tol:
        return Regime(kind="critical_sqrt2", theorem=theorem, thresholds=info)
    if al > SQRT2:
        return Regime(kind="degenerate", theorem=None, thresholds=info)
    if abs(al - thr) <= tol:
        return Regime(kind="boundary", theorem=theorem, thresholds=info)
    if al < thr:
        return Regime(kind="small", theorem=theorem, thresholds=info)
    return Regime(kind="large", theorem=theorem, thresholds=info)


def regime_for_family(family: str, lam: float, beta: Optional[float] = None,
                      tol: float = 1e-9) -> Regime:
    """Regime lookup for the built-in families (no condition report needed)."""
    theorem = "gaussian" if family == "quadratic" else "stable"
    return _classify_against(lam, theorem, beta, tol)


def regime_classify(lam: float, report: ConditionReport, tol: float = 1e-9) -> Regime:
    """Classify lam from a mechanism's condition report.

    The finite-variance branch applies when the second jump moment is finite,
    the power-tail branch when the tail expansion holds.  When neither does,
    only the large-|lam| range is reachable, through the p-th moment criterion
    (some p in (sqrt(2)/|lam|, 2/lam^2), p <= 2, with a finite p-th jump
    moment); otherwise no theorem applies.
    """
    al = abs(lam)
    if report.a1.holds:
        return _classify_against(lam, "gaussian", None, tol)
    if report.a2.holds:
        return _classify_against(lam, "stable", report.beta_hat, tol)
    if abs(al - SQRT2) <= tol:
        return Regime(kind="critical_sqrt2", theorem=None, thresholds={"outer": SQRT2})
    if al > SQRT2:
        return Regime(kind="degenerate", theorem=None, thresholds={"outer": SQRT2})
    if SQRT2 / 2.0 < al < SQRT2:
        p_lo = SQRT2 / al
        p_hi = min(2.0, 2.0 / (lam * lam))
        for p in np.linspace(min(p_lo * 1.001, p_hi), p_hi, 16):
            if p > p_lo and report.p_moment(float(p)):
                return Regime(kind="large", theorem="moment",
                              thresholds={"outer": SQRT2, "p": float(p)})
    raise RegimeError(f"no limit theorem applies at lam={lam} for this mechanism")


def log_normalizer(regime: Regime, lam: float, beta: Optional[float], t: float) -> float:
    """log d(t) for the regime's normalizing factor."""
    if t <= 0:
        raise ValueError("normalizer needs t > 0")
    al = abs(lam)
    kind, theorem = regime.kind, regime.theorem
    if kind == "critical_sqrt2":
        return 0.5 * math.log(t)
    if kind == "large":
        return (3.0 * al / (2.0 * SQRT2)) * math.log(t) + 0.5 * (SQRT2 - al) ** 2 * t
    if kind == "small" and theorem == "gaussian":
        return 0.5 * (1.0 - lam * lam) * t
    if kind == "boundary" and theorem == "gaussian":
        return 0.25 * math.log(t) + t / 4.0
    if kind == "small" and theorem == "stable":
        if beta is None:
            raise ValueError("stable-branch normalizer needs beta")
        return 0.5 * beta * (2.0 / (1.0 + beta) - lam * lam) * t
    if kind == "boundary" and theorem == "stable":
        if beta is None:
            raise ValueError("stable-branch normalizer needs beta")
        return math.log(t) / (2.0 * (1.0 + beta)) + beta * beta * t / (1.0 + beta) ** 2
    raise ValueError(f"no normalizer for regime {regime!r} at lam={lam}")


def normalizer(regime: Regime, lam: float, beta: Optional[float], t: float) -> float:
    return math.exp(log_normalizer(regime, lam, beta, t))


# ---------------------------------------------------------------------------
# Mixture limit laws
# ---------------------------------------------------------------------------


def c_lambda_beta(A1: float, beta: float, lam: float) -> float:
    """Mixture constant of the small-|lam| stable limit."""
    return A1 * beta**-2 * gamma_fn(1.0 - beta) / (1.0 - 0.5 * lam * lam * (1.0 + beta))


def c_beta_const(A1: float, beta: float) -> float:
    """Mixture constant of the boundary stable limit."""
    return A1 * beta**-3 * (1.0 + beta) * gamma_fn(1.0 - beta) * math.sqrt(2.0 / math.pi)


def mixture_limit_sampler(regime: Regime, W_samples: np.ndarray, consts: dict,
                          rng: np.random.Generator, size: int) -> np.ndarray:
    """Draws from the regime's limit law given samples of the mixing variable.

    ``W_samples`` stands in for the limit of the relevant martingale (additive
    at the shifted weight in the small regimes, derivative at the boundary);
    the independent factor is standard normal or strictly (1+beta)-stable.
    ``consts`` supplies sigma2 / A1 / beta / lam as required by the regime.
    """
    W = np.asarray(W_samples, dtype=float)
    if W.size == 0:
        raise ValueError("need at least one mixing-variable sample")
    if np.any(W < 0):
        raise ValueError("mixing-variable samples must be nonnegative")
    picks = W[rng.integers(0, W.size, size=size)]
    kind, theorem = regime.kind, regime.theorem
    if theorem == "gaussian":
        sigma2 = consts["sigma2"]
        u = rng.standard_normal(size)
        if kind == "small":
            lam = consts.get("lam", 0.0)
            scale = math.sqrt(sigma2 / (1.0 - lam * lam))
            return scale * np.sqrt(picks) * u
        if kind == "boundary":
            scale = 2.0**0.75 * math.pi**-0.25 * math.sqrt(sigma2)
            return scale * np.sqrt(picks) * u
    if theorem == "stable":
        beta = consts["beta"]
        A1 = consts["A1"]
        v = sample_stable(stable_mixture_factor(beta), rng, size=size)
        expo = 1.0 / (1.0 + beta)
        if kind == "small":
            c = c_lambda_beta(A1, beta, consts.get("lam", 0.0))
            return c**expo * picks**expo * v
        if kind == "boundary":
            c = c_beta_const(A1, beta)
            return c**expo * picks**expo * v
    raise ValueError(f"no mixture law for regime {regime!r}")
