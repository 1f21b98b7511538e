"""System family: limiting Hamiltonian, decaying perturbations, phase law.

The limiting Hamiltonian is H0(x, y) = (x^2 + y^2)/2 - h*x^4/4 with h >= 0,
whose origin is a center with frequency omega(E) = 1 - 3*h*E/4 + O(E^2).
Perturbations are finite trig polynomials in the fast phase S(t) with
polynomial (x, y) dependence, one packet per decay power t^(-k/q).

This module provides:

* ``eval_phase``      -- the phase law S(t) and its derivative,
* ``lindstedt_expand``-- periodic-orbit series X(phi, E), Y(phi, E), omega(E),
* ``action_angle_numeric`` -- exact numeric action-angle chart (time of flight),
* ``derive_fg``       -- the perturbation written in action-angle variables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .seriesring import MixedSeries, UnbalancedHalfPower

RESONANCE_TOL = 1e-12


class OutsideDomain(Exception):
    """The level line through the requested point is not closed."""


# ---------------------------------------------------------------------------
# declarations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhaseLaw:
    """S(t) = sum_{k<q} s_k t^(1-k/q) + s_q log t, with s_0 = kappa * omega(0)."""

    q: int
    s: tuple
    kappa: int = 1

    def __post_init__(self):
        if self.q < 1:
            raise ValueError("q must be a positive integer")
        if self.kappa < 1:
            raise ValueError("kappa must be a positive integer")
        object.__setattr__(self, "s", tuple(float(v) for v in self.s))
        if len(self.s) != self.q + 1:
            raise ValueError(f"phase law needs s_0..s_q ({self.q + 1} values)")
        if self.s[0] <= 0.0:
            raise ValueError("s_0 must be positive")
        # resonance condition s_0 = kappa * omega(0), omega(0) = 1
        if abs(self.s[0] - self.kappa) > RESONANCE_TOL:
            raise ValueError(
                f"resonance condition violated: s_0={self.s[0]} != kappa={self.kappa}"
            )


def eval_phase(phase, t):
    """Return (S(t), S'(t)) for t >= 1; exact finite sums, vectorized."""
    t = np.asarray(t, dtype=float)
    q = phase.q
    S = phase.s[q] * np.log(t)
    dS = phase.s[q] / t
    for k in range(q):
        e = 1.0 - k / q
        S = S + phase.s[k] * t**e
        dS = dS + phase.s[k] * e * t ** (e - 1.0)
    if S.ndim == 0:
        return float(S), float(dS)
    return S, dS


@dataclass(frozen=True)
class Monomial:
    """coeff(S) * x^x_pow * y^y_pow with coeff(S) = cos*cos(s_harm*S) + sin*sin(s_harm*S)."""

    x_pow: int
    y_pow: int
    s_harm: int
    cos: float = 0.0
    sin: float = 0.0

    def __post_init__(self):
        if self.x_pow < 0 or self.y_pow < 0 or self.s_harm < 0:
            raise ValueError("monomial powers and harmonics must be non-negative")


@dataclass(frozen=True)
class PerturbTerm:
    """One decay packet t^(-k/q) * poly(x, y, S), Hamiltonian or force."""

    k: int
    kind: str
    poly: tuple

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("decay index k must be >= 1")
        if self.kind not in ("hamiltonian", "force"):
            raise ValueError("kind must be 'hamiltonian' or 'force'")
        object.__setattr__(self, "poly", tuple(self.poly))
        min_deg = 2 if self.kind == "hamiltonian" else 1
        for m in self.poly:
            if m.x_pow + m.y_pow < min_deg:
                raise ValueError(
                    f"{self.kind} monomial x^{m.x_pow} y^{m.y_pow} does not "
                    "preserve the equilibrium"
                )


@dataclass(frozen=True)
class SystemSpec:
    """Full description of one perturbed system."""

    h: float
    phase: PhaseLaw
    terms: tuple = field(default_factory=tuple)
    name: str = ""

    def __post_init__(self):
        if self.h < 0.0:
            raise ValueError("h must be non-negative")
        object.__setattr__(self, "terms", tuple(self.terms))

    @property
    def e_max(self):
        """Largest energy with closed level lines (1/(4h), inf for h = 0)."""
        return math.inf if self.h == 0.0 else 1.0 / (4.0 * self.h)

    def h0(self, x, y):
        return 0.5 * (np.asarray(x) ** 2 + np.asarray(y) ** 2) - 0.25 * self.h * np.asarray(x) ** 4

    def max_decay_index(self):
        return max((t.k for t in self.terms), default=0)


# ---------------------------------------------------------------------------
# Lindstedt expansion of the limiting flow
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ActionAngleSeries:
    """Periodic-orbit series: x = X(phi, E), y = Y(phi, E), frequency omega(E).

    X, Y are mixed series in (E^(1/2), phi) with no S content; omega is the
    coefficient array of the polynomial omega(E) = sum omega[i] * E^i.
    """

    X: MixedSeries
    Y: MixedSeries
    omega: tuple
    order: int
    h: float

    def omega_of(self, E):
        return np.polynomial.polynomial.polyval(np.asarray(E, dtype=float), self.omega)

    def omega_series(self, like):
        terms = {(2 * i, 0, 0): (w, 0.0) for i, w in enumerate(self.omega) if w != 0.0}
        return MixedSeries(terms, like.kappa, like.max_power, like.max_harm)


SQRT2 = math.sqrt(2.0)


def lindstedt_expand(h, order=4, kappa=1, max_power=None, max_harm=None):
    """Series solution of the limiting oscillator around the center.

    Solves omega(E)^2 X'' + X - h X^3 = 0 order by order together with the
    energy normalization H0(X, Y) = E and Y = omega X'; X is even in phi with
    X(0, E) at the rightmost point of the level line.
    """
    if order > 4:
        raise ValueError("expansion is supported up to order 4")
    if max_power is None:
        max_power = 2 * order + 6
    if max_harm is None:
        max_harm = 2 * order + 4

    X = MixedSeries.term(1, 1, 0, cos=SQRT2, kappa=kappa, max_power=max_power, max_harm=max_harm)
    omega = [1.0]

    def omega_series():
        terms = {(2 * i, 0, 0): (w, 0.0) for i, w in enumerate(omega)}
        return MixedSeries(terms, kappa, max_power, max_harm)

    for ordr in range(1, order + 1):
        p_res = 2 * ordr + 1
        ws = omega_series()
        resid = ws * ws * X.diff("theta").diff("theta") + X - h * (X * X * X)
        slice_ = {j: cs for j, cs in resid.power_slice(p_res).items()}
        # secular cos(phi) term fixes the frequency correction
        c1 = slice_.get(1, (0.0, 0.0))[0]
        omega.append(c1 / (2.0 * SQRT2))
        # non-secular harmonics fix the shape correction
        corr = {}
        for j, (c, s) in slice_.items():
            if j == 1:
                continue
            if abs(s) > 1e-12:
                raise AssertionError("odd-in-phi residual; normalization broken")
            corr[(p_res, j, 0)] = (c / (j * j - 1.0), 0.0)
        X = X + MixedSeries(corr, kappa, max_power, max_harm)
        # energy normalization pins the free cos(phi) amplitude at this order
        ws = omega_series()
        Y = ws * X.diff("theta")
        G = 0.5 * (X * X + Y * Y) - 0.25 * h * (X * X * X * X)
        g = G.power_slice(2 * ordr + 2).get(0, (0.0, 0.0))[0]
        X = X + MixedSeries.term(
            p_res, 1, 0, cos=-g / SQRT2, kappa=kappa, max_power=max_power, max_harm=max_harm
        )

    ws = omega_series()
    Y = ws * X.diff("theta")
    return ActionAngleSeries(X=X, Y=Y, omega=tuple(omega), order=order, h=h)


# ---------------------------------------------------------------------------
# exact numeric action-angle chart
# ---------------------------------------------------------------------------


def _limiting_rhs(h):
    def rhs(t, z):
        x, y = z
        return (y, -x + h * x**3)

    return rhs


def turning_point(h, E):
    """Rightmost point x_E > 0 of the level line H0 = E."""
    if E < 0:
        raise OutsideDomain("negative energy")
    if h == 0.0:
        return math.sqrt(2.0 * E)
    if E >= 1.0 / (4.0 * h):
        raise OutsideDomain(f"level line H0={E} is not closed for h={h}")
    return math.sqrt((1.0 - math.sqrt(1.0 - 4.0 * h * E)) / h)


def period_numeric(h, E, rtol=1e-12):
    """Period T(E) of the closed level line, by event integration."""
    xE = turning_point(h, E)
    if E == 0.0:
        return 2.0 * math.pi

    def section(t, z):
        return z[1]

    section.terminal = False
    section.direction = -1.0
    # leave the section, then come back: the second downward y-crossing is T
    sol = solve_ivp(
        _limiting_rhs(h),
        (0.0, 100.0),
        [xE, 0.0],
        events=section,
        rtol=rtol,
        atol=1e-14,
        dense_output=False,
        max_step=0.2,
    )
    hits = sol.t_events[0]
    hits = hits[hits > 1e-9]
    if len(hits) == 0:
        raise OutsideDomain("no return to the section; orbit not closed")
    return float(hits[0])


def omega_numeric(h, E, rtol=1e-12):
    return 2.0 * math.pi / period_numeric(h, E, rtol=rtol)


def action_angle_numeric(h, x, y, rtol=1e-12):
    """Exact (E, phi) of a point: energy plus scaled time of flight.

    phi is measured from the rightmost turning point, phi = omega(E) * tau,
    where tau is the travel time from the reference point to (x, y).
    """
    E = 0.5 * (x * x + y * y) - 0.25 * h * x**4
    if E < 0 or (h > 0 and E >= 1.0 / (4.0 * h)):
        raise OutsideDomain(f"point ({x}, {y}) lies outside the closed region")
    if E < 1e-300:
        return 0.0, 0.0
    xE = turning_point(h, E)
    if abs(y) < 1e-13 and abs(x - xE) < 1e-13:
        return E, 0.0
    T = period_numeric(h, E, rtol=rtol)

    # integrate forward until the reference section (y = 0, x > 0, y decreasing)
    def section(t, z):
        return z[1]

    section.terminal = True
    section.direction = -1.0
    sol = solve_ivp(
        _limiting_rhs(h),
        (0.0, 2.5 * T),
        [x, y],
        events=section,
        rtol=rtol,
        atol=1e-14,
        max_step=0.2,
    )
    t_hits = sol.t_events[0]
    t_hits = t_hits[t_hits > 1e-12] if (abs(y) < 1e-12 and x > 0) else t_hits
    if len(t_hits) == 0:
        raise OutsideDomain("failed to reach the reference section")
    tau = T - float(t_hits[0])
    omega = 2.0 * math.pi / T
    phi = (omega * tau) % (2.0 * math.pi)
    return E, phi


def action_angle_forward(h, E, phi, rtol=1e-12):
    """Inverse chart: integrate the limiting flow for time phi / omega(E)."""
    xE = turning_point(h, E)
    if E == 0.0:
        return 0.0, 0.0
    T = period_numeric(h, E, rtol=rtol)
    tau = (phi % (2.0 * math.pi)) / (2.0 * math.pi) * T
    if tau == 0.0:
        return xE, 0.0
    sol = solve_ivp(
        _limiting_rhs(h), (0.0, tau), [xE, 0.0], rtol=rtol, atol=1e-14, max_step=0.2
    )
    return float(sol.y[0, -1]), float(sol.y[1, -1])


# ---------------------------------------------------------------------------
# perturbation in action-angle variables
# ---------------------------------------------------------------------------


def _poly_in_aa(poly, aa, like):
    """Substitute (x, y) -> (X, Y) into a trig-polynomial packet."""
    cache = {}

    def xy_power(a, b):
        if (a, b) not in cache:
            out = MixedSeries.const(1.0, like.kappa, like.max_power, like.max_harm)
            for _ in range(a):
                out = out * aa.X
            for _ in range(b):
                out = out * aa.Y
            cache[(a, b)] = out
        return cache[(a, b)]

    total = MixedSeries.zero(like.kappa, like.max_power, like.max_harm)
    for m in poly:
        sfac = MixedSeries.term(
            0,
            0,
            m.s_harm * like.kappa,
            cos=m.cos,
            sin=m.sin,
            kappa=like.kappa,
            max_power=like.max_power,
            max_harm=like.max_harm,
        )
        total = total + xy_power(m.x_pow, m.y_pow) * sfac
    return total


def derive_fg(spec, aa, max_power=None, max_harm=None):
    """Action-angle form of the perturbation: maps k -> (f_k, g_k).

    f_k = omega(E) * (-d_phi H_k(X, Y, S) + F_k(X, Y, S) * d_phi X)
    g_k = omega(E) * ( d_E   H_k(X, Y, S) - F_k(X, Y, S) * d_E   X)

    Both are series in (E, phi, S) with f_k = O(E) and g_k = O(1).
    """
    kappa = spec.phase.kappa
    if max_power is None:
        max_power = aa.X.max_power + 3
    if max_harm is None:
        max_harm = 6 * (aa.X.max_harm + kappa)
    like = MixedSeries.zero(kappa, max_power, max_harm)
    aa_big = ActionAngleSeries(
        X=MixedSeries(dict(aa.X.terms), kappa, max_power, max_harm),
        Y=MixedSeries(dict(aa.Y.terms), kappa, max_power, max_harm),
        omega=aa.omega,
        order=aa.order,
        h=aa.h,
    )
    ws = aa_big.omega_series(like)
    Xphi = aa_big.X.diff("theta")
    XE = aa_big.X.diff("E")

    out = {}
    for term in spec.terms:
        P = _poly_in_aa(term.poly, aa_big, like)
        if term.kind == "hamiltonian":
            f_part = -P.diff("theta")
            g_part = P.diff("E")
        else:
            f_part = P * Xphi
            g_part = -(P * XE)
        f_k, g_k = out.get(term.k, (like, like))
        out[term.k] = (f_k + ws * f_part, g_k + ws * g_part)

    for k, (f_k, g_k) in out.items():
        f_k.require_min_power(2, what=f"f_{k}")
        g_k.require_min_power(0, what=f"g_{k}")
    return out
