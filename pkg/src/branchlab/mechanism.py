"""Branching mechanisms: representation, normalization, and condition checks.

A branching mechanism is the convex function

    psi(z) = -a*z + b*z**2 + integral_(0,inf) (exp(-z*y) - 1 + z*y) pi(dy)

with a > 0, b >= 0 and a jump measure ``pi`` on (0, inf) integrating
``y ∧ y**2``.  Everything downstream (skeleton derivation, cumulant flows,
fluctuation normalizers) consumes mechanisms brought to the standard form
psi'(0+) = -1, psi(1) = 0 by :func:`normalize`.

Evaluation is supported on the closed right half-plane Re z >= 0 via the
Bernstein-function representation

    psi0(z) := z + psi(z) = b*z**2 + z * integral_0^inf (1 - exp(-z*r)) pibar(r) dr

where ``pibar(r) = pi((r, inf))``.  Complex powers always use the principal
branch; inputs are confined to Re z >= 0 so the cut is never crossed.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.optimize import brentq
from scipy.special import gamma as gamma_fn

__all__ = [
    "QuadratureError",
    "SupercriticalityError",
    "LevyMeasure",
    "stable_tail_measure",
    "tabulated_measure",
    "BranchingMechanism",
    "quadratic_mechanism",
    "stable_mechanism",
    "Scaling",
    "ConditionCheck",
    "ConditionReport",
    "eval_psi",
    "eval_psi0",
    "eval_psi1",
    "sigma2",
    "lambda_star",
    "normalize",
    "check_conditions",
    "load_mechanism",
    "parse_mechanism_text",
]

ROOT_RTOL = 1e-12          # relative tolerance for the positive root of psi
NORMALIZE_TOL = 1e-10      # |psi~(1)| after normalization
QUAD_ABS_TOL = 1e-9        # absolute tolerance of condition-check quadrature
HALF_PLANE_SLACK = 1e-12   # tiny negative real parts are clamped, not fatal


class QuadratureError(RuntimeError):
    """Adaptive quadrature failed to converge; carries the partial estimate."""

    def __init__(self, message: str, partial: complex):
        super().__init__(f"{message} (partial estimate {partial!r})")
        self.partial = partial


class SupercriticalityError(RuntimeError):
    """No sign change of psi found on the probe interval."""


def _cpow(z: complex, p: float) -> complex:
    """Principal-branch power restricted to the closed right half-plane."""
    if z.real < -HALF_PLANE_SLACK * max(1.0, abs(z)):
        raise ValueError(f"principal-branch power left the right half-plane: z={z!r}")
    if z.real < 0.0:
        z = complex(0.0, z.imag)
    if z == 0:
        return 0.0 + 0.0j
    return cmath.exp(p * cmath.log(z))


# ---------------------------------------------------------------------------
# Levy measures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LevyMeasure:
    """Jump measure of a branching mechanism.

    kind is one of:

    * ``"none"``        -- no jumps.
    * ``"stable_tail"`` -- density A1*(1+beta)*r**-(2+beta) on (0, inf), so the
      tail is exactly ``pibar(r) = A1 * r**-(1+beta)`` with beta in (0, 1).
    * ``"tabulated"``   -- nonnegative density sampled on an increasing grid,
      interpolated as a power law between nodes, zero below the first node,
      with a power-law stub (exponent ``tail_exponent``) beyond the last node.
    """

    kind: str
    A1: float = 0.0
    beta: float = 0.0
    r: Optional[np.ndarray] = None
    f: Optional[np.ndarray] = None
    tail_exponent: float = 0.0
    _seg_slope: Optional[np.ndarray] = field(default=None, repr=False)
    _seg_coef: Optional[np.ndarray] = field(default=None, repr=False)
    _pibar_knots: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("none", "stable_tail", "tabulated"):
            raise ValueError(f"unknown Levy measure kind {self.kind!r}")
        if self.kind == "stable_tail":
            if not (self.A1 > 0.0):
                raise ValueError("stable_tail needs A1 > 0")
            if not (0.0 < self.beta < 1.0):
                raise ValueError("stable_tail needs beta in (0, 1)")
        if self.kind == "tabulated":
            r = np.asarray(self.r, dtype=float)
            f = np.asarray(self.f, dtype=float)
            if r.ndim != 1 or r.size < 2 or np.any(np.diff(r) <= 0) or r[0] <= 0:
                raise ValueError("tabulated grid must be increasing and positive")
            if f.shape != r.shape or np.any(f < 0):
                raise ValueError("tabulated density must be nonnegative on the grid")
            object.__setattr__(self, "r", r)
            object.__setattr__(self, "f", f)
            if self.tail_exponent == 0.0:
                if f[-1] > 0 and f[-2] > 0 and f[-1] != f[-2]:
                    p = -math.log(f[-1] / f[-2]) / math.log(r[-1] / r[-2])
                else:
                    p = math.inf
                object.__setattr__(self, "tail_exponent", float(p))
            if self.tail_exponent <= 2.0:
                raise ValueError("tail stub exponent must exceed 2 for y-integrability")
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio_f = f[1:] / f[:-1]
                slopes = np.where(
                    (f[1:] > 0) & (f[:-1] > 0),
                    np.log(np.where(ratio_f > 0, ratio_f, 1.0)) / np.log(r[1:] / r[:-1]),
                    0.0,
                )
            coefs = np.where(f[:-1] > 0, f[:-1] * r[:-1] ** (-slopes), 0.0)
            object.__setattr__(self, "_seg_slope", slopes)
            object.__setattr__(self, "_seg_coef", coefs)
            object.__setattr__(self, "_pibar_knots", self._cumulative_tail())
            m = self.moment(0.0, 1.0, 2.0) + self.moment(1.0, math.inf, 1.0)
            if not math.isfinite(m):
                raise ValueError("tabulated density violates the y ∧ y**2 integrability requirement")

    # -- piecewise power-law primitives ----------------------------------

    def _seg_moment(self, i: int, a: float, b: float, power: float) -> float:
        """integral_a^b y**power * f_i * (y/r_i)**s_i dy on segment i."""
        if b <= a or self.f[i] == 0.0:
            return 0.0
        s = self._seg_slope[i]
        m = power + s
        c = self._seg_coef[i]
        if abs(m + 1.0) < 1e-12:
            return c * math.log(b / a)
        return c * (b ** (m + 1.0) - a ** (m + 1.0)) / (m + 1.0)

    def _tail_moment(self, a: float, power: float) -> float:
        """integral_a^inf y**power * stub(y) dy with the power-law stub."""
        fl = self.f[-1]
        if fl == 0.0 or math.isinf(self.tail_exponent):
            return 0.0
        p = self.tail_exponent
        m = power - p
        if m + 1.0 >= 0.0:
            return math.inf
        c = fl * self.r[-1] ** p
        return -c * a ** (m + 1.0) / (m + 1.0)

    def _cumulative_tail(self) -> np.ndarray:
        r = self.r
        out = np.zeros(r.size)
        out[-1] = self._tail_moment(r[-1], 0.0)
        for i in range(r.size - 2, -1, -1):
            out[i] = out[i + 1] + self._seg_moment(i, r[i], r[i + 1], 0.0)
        return out

    # -- public measure functionality -------------------------------------

    def tail_bar(self, rr):
        """pibar(r) = pi((r, inf)), vectorized over r > 0."""
        x = np.atleast_1d(np.asarray(rr, dtype=float))
        if self.kind == "none":
            out = np.zeros_like(x)
        elif self.kind == "stable_tail":
            out = self.A1 * x ** (-(1.0 + self.beta))
        else:
            out = np.empty_like(x)
            r = self.r
            below = x <= r[0]
            above = x >= r[-1]
            mid = ~(below | above)
            out[below] = self._pibar_knots[0]
            if np.any(above):
                fl, p = self.f[-1], self.tail_exponent
                if fl > 0 and math.isfinite(p):
                    out[above] = fl * r[-1] ** p * x[above] ** (1.0 - p) / (p - 1.0)
                else:
                    out[above] = 0.0
            if np.any(mid):
                i = np.searchsorted(r, x[mid], side="right") - 1
                s = self._seg_slope[i]
                c = self._seg_coef[i]
                m1 = s + 1.0
                with np.errstate(divide="ignore", invalid="ignore"):
                    seg = np.where(
                        np.abs(m1) < 1e-12,
                        c * np.log(r[i + 1] / x[mid]),
                        c * (r[i + 1] ** m1 - x[mid] ** m1) / np.where(np.abs(m1) < 1e-12, 1.0, m1),
                    )
                out[mid] = self._pibar_knots[i + 1] + seg
        return out if np.ndim(rr) else float(out[0])

    def moment(self, lo: float, hi: float, power: float, log_power: int = 0) -> float:
        """integral_lo^hi y**power * (log y)**log_power pi(dy).

        Closed form for ``none``/``stable_tail`` and for plain power moments of
        tabulated measures; log-weighted tabulated moments fall back to a fine
        log-grid rule (ample for the condition checks that consume them).
        """
        if hi <= lo:
            return 0.0
        if self.kind == "none":
            return 0.0
        if self.kind == "stable_tail":
            c = self.A1 * (1.0 + self.beta)
            m = power - 2.0 - self.beta
            if log_power == 0:
                if math.isinf(hi):
                    if m + 1.0 >= 0.0:
                        return math.inf
                    return -c * lo ** (m + 1.0) / (m + 1.0)
                if abs(m + 1.0) < 1e-12:
                    return c * math.log(hi / lo)
                return c * (hi ** (m + 1.0) - lo ** (m + 1.0)) / (m + 1.0)
            if math.isinf(hi):
                if m + 1.0 >= 0.0:
                    return math.inf
                t = -(m + 1.0)
                L = math.log(lo) if lo > 0 else 0.0
                if log_power == 1:
                    return c * lo ** (-t) * (L / t + 1.0 / t**2)
                return c * lo ** (-t) * (L**2 / t + 2.0 * L / t**2 + 2.0 / t**3)
            grid = np.geomspace(lo, hi, 4097)
            vals = c * grid**m * np.log(grid) ** log_power
            return float(np.trapezoid(vals, grid))
        # tabulated
        if log_power == 0:
            total = 0.0
            r = self.r
            for i in range(r.size - 1):
                a, b = max(lo, r[i]), min(hi, r[i + 1])
                if b > a:
                    total += self._seg_moment(i, a, b, power)
            if hi > r[-1]:
                t_all = self._tail_moment(max(lo, r[-1]), power)
                if math.isinf(hi) or math.isinf(t_all):
                    total += t_all
                else:
                    total += t_all - self._tail_moment(hi, power)
            return total
        if math.isinf(hi) and power + 1.0 - self.tail_exponent + 1e-12 >= 0.0 and self.f[-1] > 0:
            return math.inf
        hi_eff = hi if math.isfinite(hi) else self.r[-1] * 1e8
        grid = np.geomspace(max(lo, self.r[0] * 1e-3), hi_eff, 8193)
        vals = self.density(grid) * grid**power * np.log(np.maximum(grid, 1e-300)) ** log_power
        return float(np.trapezoid(vals, grid))

    def density(self, y):
        """Density value, vectorized (zero below the first tabulated node)."""
        y_arr = np.atleast_1d(np.asarray(y, dtype=float))
        if self.kind == "none":
            out = np.zeros_like(y_arr)
        elif self.kind == "stable_tail":
            out = self.A1 * (1.0 + self.beta) * y_arr ** (-(2.0 + self.beta))
        else:
            out = np.zeros_like(y_arr)
            inside = (y_arr >= self.r[0]) & (y_arr <= self.r[-1])
            if np.any(inside):
                idx = np.clip(np.searchsorted(self.r, y_arr[inside], side="right") - 1, 0, self.r.size - 2)
                out[inside] = self.f[idx] * (y_arr[inside] / self.r[idx]) ** self._seg_slope[idx]
            above = y_arr > self.r[-1]
            if np.any(above) and self.f[-1] > 0 and math.isfinite(self.tail_exponent):
                out[above] = self.f[-1] * (y_arr[above] / self.r[-1]) ** (-self.tail_exponent)
        return out if np.ndim(y) else float(out[0])

    def stub_tail_params(self) -> tuple[float, float, float]:
        """(C, s, start) with pibar(y) = C * y**-s exactly for y >= start."""
        if self.kind == "stable_tail":
            return self.A1, 1.0 + self.beta, 0.0
        if self.kind == "tabulated":
            fl, p = self.f[-1], self.tail_exponent
            if fl == 0.0 or math.isinf(p):
                return 0.0, 2.0, self.r[-1]
            return fl * self.r[-1] ** p / (p - 1.0), p - 1.0, self.r[-1]
        return 0.0, 2.0, 0.0

    @property
    def is_zero(self) -> bool:
        return self.kind == "none" or (self.kind == "tabulated" and not np.any(self.f > 0))


def stable_tail_measure(A1: float, beta: float) -> LevyMeasure:
    return LevyMeasure(kind="stable_tail", A1=A1, beta=beta)


def tabulated_measure(r, f, tail_exponent: float = 0.0) -> LevyMeasure:
    return LevyMeasure(kind="tabulated", r=np.asarray(r, float), f=np.asarray(f, float),
                       tail_exponent=tail_exponent)


# ---------------------------------------------------------------------------
# Quadrature of the jump part
# ---------------------------------------------------------------------------

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(24)


def _one_minus_exp_neg(w: np.ndarray) -> np.ndarray:
    """1 - exp(-w), cancellation-safe for small |w| (complex-capable)."""
    w = np.asarray(w)
    out = -np.expm1(-w) if not np.iscomplexobj(w) else 1.0 - np.exp(-w)
    if np.iscomplexobj(w):
        small = np.abs(w) < 1e-4
        if np.any(small):
            ws = w[small]
            out[small] = ws * (1.0 - ws / 2.0 * (1.0 - ws / 3.0 * (1.0 - ws / 4.0)))
    return out


def _panel(levy: LevyMeasure, z: complex, a: float, b: float, tol: float,
           max_doublings: int = 11) -> complex:
    """integral_a^b (1 - exp(-z*y)) pibar(y) dy, adaptive composite rule in log y.

    Segment boundaries are pinned to the table knots of a tabulated measure so
    every quadrature cell sees a smooth integrand.
    """
    la, lb = math.log(a), math.log(b)
    if levy.kind == "tabulated":
        inside = (levy.r > a * (1 + 1e-12)) & (levy.r < b * (1 - 1e-12))
        base_edges = np.concatenate([[la], np.log(levy.r[inside]), [lb]])
    else:
        base_edges = np.linspace(la, lb, 3)
    prev = None
    total = 0.0 + 0.0j
    splits = 1
    for _ in range(max_doublings):
        pieces = np.linspace(base_edges[:-1], base_edges[1:], splits + 1, axis=1)
        lo = pieces[:, :-1].ravel()
        hi = pieces[:, 1:].ravel()
        mids = 0.5 * (lo + hi)
        halves = 0.5 * (hi - lo)
        u = (mids[:, None] + halves[:, None] * _GL_NODES[None, :]).ravel()
        y = np.exp(u)
        vals = (_one_minus_exp_neg(z * y) * levy.tail_bar(y) * y).reshape(-1, _GL_NODES.size)
        total = complex(np.sum(halves * (vals @ _GL_WEIGHTS)))
        if prev is not None and abs(total - prev) <= tol:
            return total
        prev = total
        splits *= 2
    if math.isinf(tol):
        return total
    raise QuadratureError("panel quadrature did not converge", total)


def _osc_tail(levy: LevyMeasure, z: complex, a: float, tol: float) -> complex:
    """integral_a^inf exp(-z*y) pibar(y) dy over the pure power-law stub region.

    Asymptotic integration-by-parts series in 1/(z*y); the truncation error is
    bounded by the first omitted term, so it reaches ``tol`` once |z|*a is a
    few dozen (which the caller arranges).
    """
    C, s, _start = levy.stub_tail_params()
    if C == 0.0:
        return 0.0 + 0.0j
    za = z * a
    if za.real > 700.0:
        return 0.0 + 0.0j
    pref = cmath.exp(-za)
    term = C * a ** (-s) / z
    total = 0.0 + 0.0j
    for k in range(200):
        total += term
        nxt = term * (-(s + k) / za)
        if abs(nxt) * max(abs(pref), 1e-300) < tol:
            return pref * (total + nxt)
        if abs(nxt) >= abs(term):
            raise QuadratureError("asymptotic tail series stalled; |z|*a too small",
                                  pref * total)
        term = nxt
    raise QuadratureError("asymptotic tail series exceeded its length budget", pref * total)


def _jump_integral(levy: LevyMeasure, z: complex, tol: float = 1e-12) -> complex:
    """z * integral_0^inf (1 - exp(-z*y)) pibar(y) dy  (the jump part of psi0)."""
    if levy.is_zero or z == 0:
        return 0.0 + 0.0j
    az = abs(z)
    y_lo = 1e-8 / max(az, 1.0)
    # inner = integral_0^inf (1-exp(-zy)) pibar(y) dy, assembled piecewise.
    # Small-y piece: 1-exp(-zy) ~ zy, with integral_0^c y pibar dy in closed form
    # (relative remainder O(|z| y_lo)).
    inner_small = z * 0.5 * (levy.moment(0.0, y_lo, 2.0) + y_lo**2 * float(levy.tail_bar(y_lo)))

    C, s, stub_start = levy.stub_tail_params()
    a_stop = max(100.0 / az, stub_start, y_lo * 2.0)
    blocks = [y_lo]
    x = y_lo
    while x < a_stop:
        x = min(x * 16.0, a_stop)
        blocks.append(x)

    # cheap magnitude pass fixes the absolute tolerance of the adaptive pass
    rough = abs(inner_small)
    for a, b in zip(blocks[:-1], blocks[1:]):
        rough += abs(_panel(levy, z, a, b, tol=math.inf, max_doublings=1))
    abs_tol = tol * max(rough, 1e-300) / max(len(blocks), 1)

    inner = inner_small
    for a, b in zip(blocks[:-1], blocks[1:]):
        inner += _panel(levy, z, a, b, tol=abs_tol)
    # stub tail: integral_{a_stop}^inf pibar minus its exp(-zy)-weighted part
    if C > 0.0 and a_stop >= stub_start:
        if s <= 1.0:
            raise QuadratureError("pibar tail is not integrable", z * inner)
        pibar_tail = C * a_stop ** (1.0 - s) / (s - 1.0)
        inner += pibar_tail - _osc_tail(levy, z, a_stop, tol=abs_tol)
    return z * inner


# ---------------------------------------------------------------------------
# Mechanism
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BranchingMechanism:
    """The triple (a, b, pi) plus the normalization flag."""

    a: float
    b: float
    levy: LevyMeasure
    normalized: bool = False

    def __post_init__(self):
        if not (self.a > 0.0):
            raise ValueError("need a > 0")
        if self.b < 0.0:
            raise ValueError("need b >= 0")

    @property
    def stable_A2(self) -> Optional[float]:
        """A2 = A1*Gamma(1-beta)/beta, the coefficient of z**(1+beta) in psi0."""
        if self.levy.kind != "stable_tail":
            return None
        return self.levy.A1 * gamma_fn(1.0 - self.levy.beta) / self.levy.beta


def quadratic_mechanism(a: float = 1.0, b: float = 1.0) -> BranchingMechanism:
    """psi(z) = -a*z + b*z**2 (no jumps)."""
    m = BranchingMechanism(a=a, b=b, levy=LevyMeasure(kind="none"))
    if a == 1.0 and b == 1.0:
        return replace(m, normalized=True)
    return m


def stable_mechanism(beta: float, a: float = 1.0, b: float = 0.0,
                     A2: float = 1.0) -> BranchingMechanism:
    """psi(z) = -a*z + b*z**2 + A2*z**(1+beta) with beta in (0, 1).

    The defaults give the normalized stable family psi(z) = -z + z**(1+beta).
    """
    A1 = A2 * beta / gamma_fn(1.0 - beta)
    m = BranchingMechanism(a=a, b=b, levy=stable_tail_measure(A1, beta))
    if a == 1.0 and b == 0.0 and abs(A2 - 1.0) < 1e-14:
        return replace(m, normalized=True)
    return m


def eval_psi(mech: BranchingMechanism, z: complex, force_quadrature: bool = False) -> complex:
    """psi(z) on Re z >= 0; closed form for stable tails unless forced to quadrature."""
    z = complex(z)
    if z.real < -HALF_PLANE_SLACK * max(1.0, abs(z)):
        raise ValueError(f"eval_psi requires Re z >= 0, got {z!r}")
    if z.real < 0.0:
        z = complex(0.0, z.imag)
    base = -mech.a * z + mech.b * z * z
    if mech.levy.is_zero:
        return base
    if mech.levy.kind == "stable_tail" and not force_quadrature:
        return base + mech.stable_A2 * _cpow(z, 1.0 + mech.levy.beta)
    return base + _jump_integral(mech.levy, z)


def eval_psi0(mech: BranchingMechanism, z: complex, force_quadrature: bool = False) -> complex:
    """psi0(z) = z + psi(z) for a normalized mechanism."""
    if not mech.normalized:
        raise ValueError("eval_psi0 expects a normalized mechanism")
    return complex(z) + eval_psi(mech, z, force_quadrature=force_quadrature)


def eval_psi1(mech: BranchingMechanism, z: complex,
              A1: Optional[float] = None, beta: Optional[float] = None) -> complex:
    """Pure power-tail comparison term A2 * z**(1+beta).

    Parameters default to the mechanism's own stable-tail data; for tabulated
    measures pass the fitted (A1_hat, beta_hat) from :func:`check_conditions`.
    """
    if not mech.normalized:
        raise ValueError("eval_psi1 expects a normalized mechanism")
    if A1 is None or beta is None:
        if mech.levy.kind != "stable_tail":
            raise ValueError("no power-tail parameters available; pass A1 and beta")
        A1, beta = mech.levy.A1, mech.levy.beta
    A2 = A1 * gamma_fn(1.0 - beta) / beta
    return A2 * _cpow(complex(z), 1.0 + beta)


def sigma2(mech: BranchingMechanism) -> float:
    """2*b + integral r**2 pi(dr); +inf when the jump tail has no second moment."""
    if not mech.normalized:
        raise ValueError("sigma2 expects a normalized mechanism")
    return 2.0 * mech.b + mech.levy.moment(0.0, math.inf, 2.0)


def _psi_real(mech: BranchingMechanism, lam: float) -> float:
    return eval_psi(mech, complex(lam, 0.0)).real


def _psi_real_batch(mech: BranchingMechanism, lams: np.ndarray) -> np.ndarray:
    """psi on a batch of real points; one shared quadrature grid for tabulated jumps."""
    lams = np.asarray(lams, dtype=float)
    base = -mech.a * lams + mech.b * lams**2
    levy = mech.levy
    if levy.is_zero:
        return base
    if levy.kind == "stable_tail":
        A2 = levy.A1 * gamma_fn(1.0 - levy.beta) / levy.beta
        return base + A2 * lams ** (1.0 + levy.beta)
    lam_min, lam_max = float(lams.min()), float(lams.max())
    C, s, stub_start = levy.stub_tail_params()
    y_lo = 1e-8 / max(lam_max, 1.0)
    a_stop = max(100.0 / max(lam_min, 1e-300), stub_start, y_lo * 2.0)
    n_dec = math.log10(a_stop / y_lo)
    segs = max(8, int(math.ceil(2.0 * n_dec)))
    edges = np.linspace(math.log(y_lo), math.log(a_stop), segs + 1)
    mids = 0.5 * (edges[1:] + edges[:-1])
    half = 0.5 * (edges[1] - edges[0])
    u = (mids[:, None] + half * _GL_NODES[None, :]).ravel()
    y = np.exp(u)
    pibar_y = np.asarray(levy.tail_bar(y)) * y
    w = np.tile(_GL_WEIGHTS, segs)
    # inner(lam) = integral (1-exp(-lam*y)) pibar(y) dy over [y_lo, a_stop]
    kernel = -np.expm1(-np.outer(lams, y))
    inner = half * kernel @ (pibar_y * w)
    small = lams * 0.5 * (levy.moment(0.0, y_lo, 2.0) + y_lo**2 * float(levy.tail_bar(y_lo)))
    inner += small
    if C > 0.0:
        # exp(-lam*y) is negligible beyond a_stop >= 100/lam for every lam
        inner += C * a_stop ** (1.0 - s) / (s - 1.0)
    return base + lams * inner


def lambda_star(mech: BranchingMechanism) -> float:
    """Unique positive root of psi (uniqueness from convexity)."""
    x = 1e-6
    if _psi_real(mech, x) >= 0.0:
        x = 1e-12
        if _psi_real(mech, x) >= 0.0:
            raise SupercriticalityError("psi does not dip below zero near 0")
    lo = None
    while x < 1e18:
        nxt = x * 2.0
        if _psi_real(mech, nxt) > 0.0:
            lo, hi = x, nxt
            break
        x = nxt
    if lo is None:
        raise SupercriticalityError("supercriticality probe failed: no sign change of psi")
    root = brentq(lambda u: _psi_real(mech, u), lo, hi, xtol=1e-300, rtol=max(ROOT_RTOL, 4e-16))
    return float(root)


@dataclass(frozen=True)
class Scaling:
    """Space-time-mass factors carrying statistics back to the original mechanism."""

    time_factor: float
    space_factor: float
    mass_factor: float


def normalize(mech: BranchingMechanism) -> tuple[BranchingMechanism, Scaling]:
    """Rescale so that psi'(0+) = -1 and the positive root of psi sits at 1.

    The transform is psi~(z) = psi(lam* z) / (a lam*); time contracts by a,
    space by sqrt(a), mass by lam*.  Idempotent on already-normalized input.
    """
    a = mech.a
    lam_s = lambda_star(mech)
    levy = mech.levy
    if levy.kind == "stable_tail":
        new_levy = stable_tail_measure(levy.A1 * lam_s**levy.beta / a, levy.beta)
    elif levy.kind == "tabulated":
        new_levy = tabulated_measure(levy.r * lam_s, levy.f / (a * lam_s**2),
                                     tail_exponent=levy.tail_exponent)
    else:
        new_levy = levy
    out = BranchingMechanism(a=1.0, b=mech.b * lam_s / a, levy=new_levy, normalized=True)
    resid = _psi_real(out, 1.0)
    if abs(resid) > NORMALIZE_TOL:
        raise RuntimeError(f"normalization failed: psi~(1) = {resid:.3e}")
    return out, Scaling(time_factor=a, space_factor=math.sqrt(a), mass_factor=lam_s)


# ---------------------------------------------------------------------------
# Condition checks
# ---------------------------------------------------------------------------


@dataclass
class ConditionCheck:
    holds: Optional[bool]           # None = inconclusive numerics
    evidence: dict


@dataclass
class ConditionReport:
    """Outcome of every standing-assumption check for a normalized mechanism.

    a0: finite extinction-time integral; a1: finite second jump moment;
    a2: power-law jump tail with fitted (A1_hat, beta_hat, delta_hat);
    a3: polynomial lower growth of psi0 with reported gamma_hat.
    """

    a0: ConditionCheck
    a1: ConditionCheck
    a2: ConditionCheck
    a3: ConditionCheck
    moment_rlogr: bool
    moment_rlog2r: bool
    A1_hat: Optional[float] = None
    beta_hat: Optional[float] = None
    delta_hat: Optional[float] = None
    gamma_hat: Optional[float] = None
    sigma2: float = math.inf
    _mech: Optional[BranchingMechanism] = field(default=None, repr=False)

    def p_moment(self, p: float) -> bool:
        """Whether integral_(1,inf) r**p pi(dr) is finite."""
        if self._mech is None:
            raise ValueError("report was built without a mechanism reference")
        return math.isfinite(self._mech.levy.moment(1.0, math.inf, p))

    def to_dict(self) -> dict:
        def cc(c: ConditionCheck) -> dict:
            ev = {}
            for k, v in c.evidence.items():
                if isinstance(v, float) and math.isinf(v):
                    ev[k] = "inf"
                else:
                    ev[k] = v
            return {"holds": c.holds, "evidence": ev}

        return {
            "a0": cc(self.a0),
            "a1": cc(self.a1),
            "a2": cc(self.a2),
            "a3": cc(self.a3),
            "moment_rlogr": self.moment_rlogr,
            "moment_rlog2r": self.moment_rlog2r,
            "A1_hat": self.A1_hat,
            "beta_hat": self.beta_hat,
            "delta_hat": self.delta_hat,
            "gamma_hat": self.gamma_hat,
            "sigma2": None if math.isinf(self.sigma2) else self.sigma2,
        }


def _check_tail_second_moment(mech: BranchingMechanism) -> ConditionCheck:
    m2 = mech.levy.moment(1.0, math.inf, 2.0)
    return ConditionCheck(holds=math.isfinite(m2), evidence={"r2_tail_moment": m2})


def _check_power_tail(mech: BranchingMechanism):
    """Fit pibar(r) ~ A1 * r**-(1+beta) on a dyadic window of the upper tail."""
    levy = mech.levy
    if levy.is_zero:
        return ConditionCheck(False, {"reason": "no jump measure"}), None, None, None
    if levy.kind == "stable_tail":
        beta = levy.beta
        ev = {"window": "exact", "max_rel_residual": 0.0, "beta_hat": beta, "A1_hat": levy.A1}
        return (ConditionCheck(0.0 < beta < 1.0, ev), levy.A1, beta, 0.5 * (1.0 - beta))
    r_hi = levy.r[-1]
    r_lo = max(levy.r[0], r_hi / 2.0**16, 1.0)
    if r_hi <= r_lo * 16:
        return ConditionCheck(None, {"reason": "table too short for a tail window"}), None, None, None
    pts = r_lo * 2.0 ** np.arange(0, int(math.floor(math.log2(r_hi / r_lo))) + 1)
    pts = pts[pts <= r_hi]
    vals = np.asarray(levy.tail_bar(pts), dtype=float)
    pos = vals > 0
    if pos.sum() < 5:
        return ConditionCheck(False, {"reason": "tail vanishes on the window"}), None, None, None
    x, y = np.log(pts[pos]), np.log(vals[pos])
    slope, intercept = np.polyfit(x, y, 1)
    beta_hat = float(-slope - 1.0)
    A1_hat = float(math.exp(intercept))
    fit = A1_hat * pts[pos] ** slope
    rel_res = np.abs(vals[pos] - fit) / vals[pos]
    max_rel = float(rel_res.max())
    evidence = {
        "window": [float(pts[pos][0]), float(pts[pos][-1])],
        "beta_hat": beta_hat,
        "A1_hat": A1_hat,
        "max_rel_residual": max_rel,
    }
    if not (0.0 < beta_hat < 1.0) or max_rel > 0.5:
        return ConditionCheck(False, evidence), A1_hat, beta_hat, None
    if max_rel > 0.05:
        return ConditionCheck(None, evidence), A1_hat, beta_hat, None
    resid = np.abs(vals[pos] - fit)
    good = resid > 0
    delta_hat = 0.5 * (1.0 - beta_hat)
    if good.sum() >= 4:
        s2, _ = np.polyfit(np.log(pts[pos][good]), np.log(resid[good]), 1)
        cand = float(-s2 - 1.0 - beta_hat)
        if cand > 0:
            delta_hat = min(cand, 1.0 - beta_hat - 1e-9)
    evidence["delta_hat"] = delta_hat
    holds = 0.0 < beta_hat < beta_hat + delta_hat < 1.0
    return ConditionCheck(holds, evidence), A1_hat, beta_hat, delta_hat


def _pibar_integral(levy: LevyMeasure, a: float, b: float) -> float:
    """integral_a^b pibar(r) dr by the Fubini identity."""
    if b <= a:
        return 0.0
    ta, tb = float(levy.tail_bar(a)), float(levy.tail_bar(b))
    return levy.moment(a, b, 1.0) - a * (ta - tb) + (b - a) * tb


def _check_growth(mech: BranchingMechanism):
    """Lower polynomial growth psi0(lam) >= c * lam**(1+gamma) for large lam.

    Automatic with b > 0 (gamma = 1).  With b = 0, probe the equivalent
    small-argument clause integral_0^1 pibar(r)(r ∧ lam) dr >= c * lam**(1-gamma)
    on a log grid and report the largest passing gamma in {0.1, ..., 1.0}.
    """
    if mech.b > 0.0:
        return ConditionCheck(True, {"reason": "b > 0", "gamma": 1.0}), 1.0
    levy = mech.levy
    if levy.is_zero:
        return ConditionCheck(False, {"reason": "b = 0 and no jumps"}), None
    lams = np.geomspace(1e-6, 1e-1, 26)
    vals = np.empty_like(lams)
    for j, lam in enumerate(lams):
        inner = 0.5 * (levy.moment(0.0, lam, 2.0) + lam**2 * float(levy.tail_bar(lam)))
        vals[j] = inner + lam * _pibar_integral(levy, lam, 1.0)
    if np.any(vals <= 0):
        return ConditionCheck(False, {"reason": "small-jump integral vanishes"}), None
    best = None
    for g in np.arange(1.0, 0.05, -0.1):
        ratios = vals / lams ** (1.0 - g)
        if ratios[0] >= 0.5 * ratios[-1]:
            best = round(float(g), 10)
            break
    ev = {"gamma": best, "integral_small": float(vals[0]), "integral_large": float(vals[-1])}
    return ConditionCheck(best is not None, ev), best


def _check_extinction_integral(mech: BranchingMechanism, gamma: Optional[float]) -> ConditionCheck:
    """Convergence at +inf of integral dxi / sqrt(integral_{lam*}^xi psi).

    Integrates on xi = (lam*+1) * e^u up to u = 40, then certifies the remainder
    with the polynomial lower bound psi0 >= c xi**(1+gamma) when one is available.
    """
    lam_s = 1.0 if mech.normalized else lambda_star(mech)
    xi0 = lam_s + 1.0
    u_grid = np.linspace(0.0, 40.0, 2001)
    xi = xi0 * np.exp(u_grid)
    psi_vals = _psi_real_batch(mech, xi)
    xi_pre = np.linspace(lam_s, xi0, 257)
    psi_pre = _psi_real_batch(mech, xi_pre)
    big_psi = float(np.trapezoid(psi_pre, xi_pre)) + np.concatenate(
        [[0.0], np.cumsum(0.5 * (psi_vals[1:] + psi_vals[:-1]) * np.diff(xi))]
    )
    integrand = xi / np.sqrt(np.maximum(big_psi, 1e-300))
    partial = float(np.trapezoid(integrand, u_grid))
    evidence: dict = {"partial_integral": partial, "u_max": 40.0}
    if gamma is not None and gamma > 0:
        xi_max = float(xi[-1])
        c_eff = psi_vals[-1] / xi_max ** (1.0 + gamma)
        if c_eff > 0:
            tail = math.sqrt((2.0 + gamma) / c_eff) * (2.0 / gamma) * xi_max ** (-gamma / 2.0)
            evidence["tail_bound"] = tail
            return ConditionCheck(True, evidence)
    peak = float(integrand.max())
    last = float(integrand[-1])
    evidence["integrand_last_over_peak"] = last / max(peak, 1e-300)
    if last < 1e-9 * peak:
        # uncertified but the du-increments have collapsed by nine decades
        return ConditionCheck(True, evidence)
    three_q = float(integrand[(3 * integrand.size) // 4])
    if last > 0.3 * three_q and last > 1e-6 * peak:
        # no decay over the last ten log-units: the integral keeps accumulating
        return ConditionCheck(False, evidence)
    return ConditionCheck(None, evidence)


def check_conditions(mech: BranchingMechanism) -> ConditionReport:
    """Run every standing-assumption check on a normalized mechanism."""
    if not mech.normalized:
        raise ValueError("check_conditions expects a normalized mechanism")
    a1 = _check_tail_second_moment(mech)
    a2, A1_hat, beta_hat, delta_hat = _check_power_tail(mech)
    a3, gamma_hat = _check_growth(mech)
    a0 = _check_extinction_integral(mech, gamma_hat)
    rlogr = math.isfinite(mech.levy.moment(1.0, math.inf, 1.0, log_power=1))
    rlog2r = math.isfinite(mech.levy.moment(1.0, math.inf, 1.0, log_power=2))
    return ConditionReport(
        a0=a0, a1=a1, a2=a2, a3=a3,
        moment_rlogr=rlogr, moment_rlog2r=rlog2r,
        A1_hat=A1_hat, beta_hat=beta_hat, delta_hat=delta_hat, gamma_hat=gamma_hat,
        sigma2=sigma2(mech), _mech=mech,
    )


# ---------------------------------------------------------------------------
# Mechanism specification files
# ---------------------------------------------------------------------------


def parse_mechanism_text(text: str, base_dir: str = ".") -> BranchingMechanism:
    """Parse a key = value mechanism description.

    Keys: ``kind`` (quadratic | stable | tabulated), ``a``, ``b``, plus per kind
    ``A1`` or ``A2`` and ``beta`` (stable), or ``density_table`` (+ optional
    ``tail_exponent``) naming a two-column CSV of (r, density).
    """
    import os

    kv: dict[str, str] = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"bad mechanism line: {line!r}")
        k, v = line.split("=", 1)
        kv[k.strip().lower()] = v.strip()
    kind = kv.get("kind")
    if kind is None:
        raise ValueError("mechanism file needs a 'kind' entry")
    a = float(kv.get("a", 1.0))
    b = float(kv.get("b", 0.0))
    if kind == "quadratic":
        return quadratic_mechanism(a=a, b=float(kv.get("b", 1.0)))
    if kind == "stable":
        beta = float(kv["beta"])
        if "a1" in kv:
            A2 = float(kv["a1"]) * gamma_fn(1.0 - beta) / beta
        else:
            A2 = float(kv.get("a2", 1.0))
        return stable_mechanism(beta=beta, a=a, b=b, A2=A2)
    if kind == "tabulated":
        path = kv["density_table"]
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        data = np.loadtxt(path, delimiter=",")
        levy = tabulated_measure(data[:, 0], data[:, 1],
                                 tail_exponent=float(kv.get("tail_exponent", 0.0)))
        return BranchingMechanism(a=a, b=b, levy=levy)
    raise ValueError(f"unknown mechanism kind {kind!r}")


def load_mechanism(path: str) -> BranchingMechanism:
    import os

    with open(path, "r", encoding="utf-8") as fh:
        return parse_mechanism_text(fh.read(), base_dir=os.path.dirname(os.path.abspath(path)))
