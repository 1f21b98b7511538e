"""Truncated mixed Fourier / half-power series algebra.

The series manipulated here are finite sums of terms

    E^(p/2) * [c * cos(j*theta + (k/kappa)*S) + s * sin(j*theta + (k/kappa)*S)]

with integer half-power ``p``, integer harmonics ``j`` (in theta) and ``k``
(in S, stored in units of the base frequency ``1/kappa``).  They carry every
symbolic object of the averaging pipeline: perturbation coefficients in
action-angle form, the rescaled right-hand sides, the near-identity transform
coefficients and the averaged vector fields.

All values are immutable after construction; every operation returns a new
series.  Coefficients below ``ZERO_TOL`` are dropped to keep the term maps
sparse.  Negative half-powers may appear transiently (e.g. after a derivative
in E) but any finalized series can be checked with :meth:`MixedSeries.require_min_power`.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np

ZERO_TOL = 1e-14


class UnbalancedHalfPower(Exception):
    """A finalized series retains negative half-powers of E."""


class NonZeroMean(Exception):
    """antiderivative_S received an input with nonzero S-average."""


def _canonical(p, j, k, c, s):
    # canonical harmonic: j > 0, or j == 0 and k >= 0; (0, 0) is pure cosine
    if j < 0 or (j == 0 and k < 0):
        j, k, s = -j, -k, -s
    if j == 0 and k == 0:
        s = 0.0
    return (p, j, k), (c, s)


class MixedSeries:
    """Sparse truncated series over the (E^(1/2), theta, S) monomial basis.

    Parameters
    ----------
    terms : dict
        Map ``(p, j, k) -> (cos_coeff, sin_coeff)``.
    kappa : int
        Base period of S is ``2*pi*kappa``; ``k`` is stored in units of
        ``1/kappa``.
    max_power : int
        Largest retained half-power ``p``.
    max_harm : int
        Largest retained ``|j|`` and ``|k|``.
    """

    __slots__ = ("terms", "kappa", "max_power", "max_harm")

    def __init__(self, terms, kappa, max_power, max_harm, _clean=True):
        if _clean:
            cleaned = {}
            for (p, j, k), (c, s) in terms.items():
                if p > max_power or abs(j) > max_harm or abs(k) > max_harm:
                    continue
                key, (c, s) = _canonical(p, j, k, c, s)
                if key in cleaned:
                    c0, s0 = cleaned[key]
                    c, s = c0 + c, s0 + s
                cleaned[key] = (c, s)
            terms = {
                key: (c, s)
                for key, (c, s) in cleaned.items()
                if abs(c) > ZERO_TOL or abs(s) > ZERO_TOL
            }
        self.terms = terms
        self.kappa = kappa
        self.max_power = max_power
        self.max_harm = max_harm

    # -- constructors -------------------------------------------------------

    @classmethod
    def zero(cls, kappa=1, max_power=16, max_harm=24):
        return cls({}, kappa, max_power, max_harm, _clean=False)

    @classmethod
    def const(cls, value, kappa=1, max_power=16, max_harm=24):
        return cls({(0, 0, 0): (float(value), 0.0)}, kappa, max_power, max_harm)

    @classmethod
    def term(cls, p, j, k, cos=0.0, sin=0.0, kappa=1, max_power=16, max_harm=24):
        return cls({(p, j, k): (float(cos), float(sin))}, kappa, max_power, max_harm)

    def like(self, terms):
        return MixedSeries(terms, self.kappa, self.max_power, self.max_harm)

    # -- predicates ----------------------------------------------------------

    def is_zero(self, tol=1e-12):
        return all(abs(c) <= tol and abs(s) <= tol for c, s in self.terms.values())

    def min_power(self):
        """Smallest half-power present (None for the zero series)."""
        return min((p for p, _, _ in self.terms), default=None)

    def require_min_power(self, min_p=0, what="series"):
        mp = self.min_power()
        if mp is not None and mp < min_p:
            raise UnbalancedHalfPower(
                f"{what} retains E^({mp}/2) terms below E^({min_p}/2); "
                "increase the truncation order"
            )
        return self

    # -- ring operations -----------------------------------------------------

    def _merge_bounds(self, other):
        if self.kappa != other.kappa:
            raise ValueError("kappa mismatch between series")
        return min(self.max_power, other.max_power), min(self.max_harm, other.max_harm)

    def __add__(self, other):
        if isinstance(other, (int, float)):
            other = MixedSeries.const(other, self.kappa, self.max_power, self.max_harm)
        mp, mh = self._merge_bounds(other)
        out = dict(self.terms)
        for key, (c, s) in other.terms.items():
            c0, s0 = out.get(key, (0.0, 0.0))
            out[key] = (c0 + c, s0 + s)
        return MixedSeries(out, self.kappa, mp, mh)

    __radd__ = __add__

    def __neg__(self):
        return self.like({key: (-c, -s) for key, (c, s) in self.terms.items()})

    def __sub__(self, other):
        return self + (-other if isinstance(other, MixedSeries) else -float(other))

    def scale(self, factor):
        factor = float(factor)
        return self.like({key: (factor * c, factor * s) for key, (c, s) in self.terms.items()})

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.scale(other)
        mp, mh = self._merge_bounds(other)
        out = {}

        def acc(p, j, k, c, s):
            if p > mp or abs(j) > mh or abs(k) > mh:
                return
            key, (c, s) = _canonical(p, j, k, c, s)
            c0, s0 = out.get(key, (0.0, 0.0))
            out[key] = (c0 + c, s0 + s)

        for (p1, j1, k1), (c1, s1) in self.terms.items():
            for (p2, j2, k2), (c2, s2) in other.terms.items():
                p = p1 + p2
                # product-to-sum: u = j1*theta + ..., w = j2*theta + ...
                # cos u cos w, cos u sin w, sin u cos w, sin u sin w
                acc(p, j1 + j2, k1 + k2, 0.5 * (c1 * c2 - s1 * s2), 0.5 * (c1 * s2 + s1 * c2))
                acc(p, j1 - j2, k1 - k2, 0.5 * (c1 * c2 + s1 * s2), 0.5 * (s1 * c2 - c1 * s2))
        return MixedSeries(out, self.kappa, mp, mh)

    __rmul__ = __mul__

    # -- calculus ------------------------------------------------------------

    def diff(self, var):
        """Exact derivative with respect to ``var`` in {'E', 'theta', 'S'}."""
        out = {}
        if var == "E":
            for (p, j, k), (c, s) in self.terms.items():
                if p == 0:
                    continue
                out[(p - 2, j, k)] = (0.5 * p * c, 0.5 * p * s)
        elif var == "theta":
            for (p, j, k), (c, s) in self.terms.items():
                if j == 0:
                    continue
                out[(p, j, k)] = (j * s, -j * c)
        elif var == "S":
            for (p, j, k), (c, s) in self.terms.items():
                if k == 0:
                    continue
                w = k / self.kappa
                out[(p, j, k)] = (w * s, -w * c)
        else:
            raise ValueError(f"unknown variable {var!r}")
        return self.like(out)

    def mean_S(self):
        """Projection on the S-average: keeps exactly the k = 0 terms."""
        return self.like({key: cs for key, cs in self.terms.items() if key[2] == 0})

    def antiderivative_S(self):
        """Unique zero-mean primitive in S of a zero-average series."""
        out = {}
        for (p, j, k), (c, s) in self.terms.items():
            if k == 0:
                raise NonZeroMean("antiderivative_S requires a zero S-average input")
            w = self.kappa / k
            out[(p, j, k)] = (-w * s, w * c)
        return self.like(out)

    def shift_theta(self):
        """Substitute theta -> theta + S/kappa (phase to co-rotating frame).

        In stored units the S-harmonic gains exactly j: cos(j*phi + (k/kappa)*S)
        becomes cos(j*theta + ((k + j)/kappa)*S).
        """
        out = {}
        for (p, j, k), (c, s) in self.terms.items():
            key, cs = _canonical(p, j, k + j, c, s)
            c0, s0 = out.get(key, (0.0, 0.0))
            out[key] = (c0 + cs[0], s0 + cs[1])
        return self.like(out)

    # -- evaluation ----------------------------------------------------------

    def eval(self, E, theta, S):
        """Literal sum of terms at (E, theta, S); broadcasts over arrays."""
        E = np.asarray(E, dtype=float)
        theta = np.asarray(theta, dtype=float)
        S = np.asarray(S, dtype=float)
        total = np.zeros(np.broadcast(E, theta, S).shape)
        for (p, j, k), (c, s) in self.terms.items():
            if p == 0:
                amp = 1.0
            elif p % 2 == 0:
                amp = E ** (p // 2)
            else:
                amp = np.sqrt(E) ** p if p > 0 else E ** (0.5 * p)
            arg = j * theta + (k / self.kappa) * S
            total = total + amp * (c * np.cos(arg) + s * np.sin(arg))
        if total.ndim == 0:
            return float(total)
        return total

    # -- views ---------------------------------------------------------------

    def power_slice(self, p):
        """Coefficient of E^(p/2) as a dict j -> (cos, sin); requires k = 0."""
        out = {}
        for (pp, j, k), (c, s) in self.terms.items():
            if pp != p:
                continue
            if k != 0:
                raise ValueError("power_slice expects an S-free series")
            out[j] = (c, s)
        return out

    def powers(self):
        return sorted({p for p, _, _ in self.terms})

    # -- debug dump ----------------------------------------------------------

    def dump(self):
        """One term per line, sorted by (p, j, k), in the debug format."""
        lines = []
        for (p, j, k), (c, s) in sorted(self.terms.items()):
            for kind, coeff in (("cos", c), ("sin", s)):
                if abs(coeff) <= ZERO_TOL:
                    continue
                frac = Fraction(k, self.kappa)
                parts = []
                if j:
                    parts.append(f"{j}*theta")
                if k:
                    parts.append(f"({frac})*S")
                arg = " + ".join(parts) if parts else "0"
                lines.append(f"E^({p}/2) {kind}({arg}) * {coeff:.15g}")
        return "\n".join(lines) if lines else "0"

    def __repr__(self):
        n = len(self.terms)
        return f"MixedSeries(<{n} terms>, kappa={self.kappa})"


def series_sum(series_list):
    """Sum a list of series (empty list gives the zero series)."""
    if not series_list:
        return MixedSeries.zero()
    total = series_list[0]
    for ms in series_list[1:]:
        total = total + ms
    return total


def series_allclose(a, b, tol=1e-12):
    """Termwise coefficient comparison of two series."""
    keys = set(a.terms) | set(b.terms)
    for key in keys:
        ca, sa = a.terms.get(key, (0.0, 0.0))
        cb, sb = b.terms.get(key, (0.0, 0.0))
        if abs(ca - cb) > tol or abs(sa - sb) > tol:
            return False
    return True


def series_maxdiff(a, b):
    keys = set(a.terms) | set(b.terms)
    worst = 0.0
    for key in keys:
        ca, sa = a.terms.get(key, (0.0, 0.0))
        cb, sb = b.terms.get(key, (0.0, 0.0))
        worst = max(worst, abs(ca - cb), abs(sa - sb))
    return worst
