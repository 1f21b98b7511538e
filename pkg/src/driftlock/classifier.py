"""Stability classification of the averaged slow system.

Reads an :class:`~driftlock.averaging.AveragedModel`, detects the asymptotic
regime of the phase (locking onto a root of the leading averaged phase
velocity, or unbounded drifting), extracts the structural indices of the
action equation (leading order n, phase order m, nonlinearity exponent sigma,
gap d) and walks the decision table of stability criteria to produce a
:class:`RegimeVerdict` with a predicted decay/growth law.

Every strict inequality is evaluated with a dead zone: hypotheses closer than
``dead_zone`` to zero yield the verdict ``inconclusive`` instead of a guess.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq

STRUCT_TOL = 1e-12


class AllZero(Exception):
    """Every averaged coefficient vanishes up to the computed order."""


class DivideByZero(Exception):
    """The leading phase velocity has a root where none is allowed."""


# ---------------------------------------------------------------------------
# scalar trig polynomials in psi
# ---------------------------------------------------------------------------


class TrigPoly:
    """Finite Fourier polynomial c_0 + sum_j (c_j cos j psi + s_j sin j psi)."""

    def __init__(self, coeffs):
        self.coeffs = {j: (float(c), float(s)) for j, (c, s) in coeffs.items()
                       if abs(c) > 0.0 or abs(s) > 0.0}

    @classmethod
    def from_power_slice(cls, series, p):
        return cls(series.power_slice(p))

    def __call__(self, psi):
        psi = np.asarray(psi, dtype=float)
        out = np.zeros(psi.shape)
        for j, (c, s) in self.coeffs.items():
            out = out + c * np.cos(j * psi) + s * np.sin(j * psi)
        return out if out.ndim else float(out)

    def deriv(self):
        return TrigPoly({j: (j * s, -j * c) for j, (c, s) in self.coeffs.items() if j})

    def is_zero(self, tol=STRUCT_TOL):
        return all(abs(c) <= tol and abs(s) <= tol for c, s in self.coeffs.values())

    def is_constant(self, tol=STRUCT_TOL):
        return all(j == 0 or (abs(c) <= tol and abs(s) <= tol)
                   for j, (c, s) in self.coeffs.items())

    def mean(self):
        return self.coeffs.get(0, (0.0, 0.0))[0]

    def range(self, n_grid=4096):
        """(min, max) over one period, grid + local quadratic refinement."""
        psi = np.linspace(0.0, 2.0 * math.pi, n_grid, endpoint=False)
        vals = self(psi)
        lo, hi = float(np.min(vals)), float(np.max(vals))
        d = self.deriv()
        if not d.coeffs:
            return lo, hi
        dv = d(psi)
        for i in range(n_grid):
            a, b = dv[i], dv[(i + 1) % n_grid]
            if a == 0.0 or a * b > 0.0:
                continue
            x0, x1 = psi[i], psi[i] + (2.0 * math.pi / n_grid)
            try:
                xs = brentq(d, x0, x1, xtol=1e-13)
            except ValueError:
                continue
            v = self(xs)
            lo, hi = min(lo, v), max(hi, v)
        return lo, hi


def roots_with_slope(trig, n_grid=1024, xtol=1e-12):
    """All roots of ``trig`` in [0, 2*pi) with their derivatives."""
    psi = np.linspace(0.0, 2.0 * math.pi, n_grid, endpoint=False)
    vals = trig(psi)
    d = trig.deriv()
    out = []
    step = 2.0 * math.pi / n_grid
    for i in range(n_grid):
        a = vals[i]
        b = vals[(i + 1) % n_grid] if i + 1 < n_grid else trig(2.0 * math.pi)
        if a == 0.0:
            out.append((float(psi[i]), float(d(psi[i]))))
        elif a * b < 0.0:
            r = brentq(trig, psi[i], psi[i] + step, xtol=xtol)
            out.append((float(r), float(d(r))))
    return out


def find_locking(omega_m0, n_grid=1024):
    """Roots of the leading phase velocity with negative slope (attractors)."""
    if omega_m0.is_zero():
        raise ValueError("leading phase velocity is identically zero")
    return [(r, sl) for r, sl in roots_with_slope(omega_m0, n_grid) if sl < -1e-10]


def check_drifting(omega_m, delta, n_v=64, n_psi=256, floor=1e-9):
    """True iff |Omega_m(v, psi)| stays above ``floor`` on [0, delta] x [0, 2pi)."""
    v = np.linspace(0.0, delta, n_v)
    psi = np.linspace(0.0, 2.0 * math.pi, n_psi, endpoint=False)
    V, P = np.meshgrid(v, psi, indexing="ij")
    vals = np.abs(omega_m.eval(V, P, 0.0))
    if np.min(vals) <= floor:
        return False
    # refine around the coarse minimum
    i, j = np.unravel_index(np.argmin(vals), vals.shape)
    v2 = np.linspace(max(0.0, v[i] - delta / n_v), min(delta, v[i] + delta / n_v), 32)
    p2 = np.linspace(psi[j] - 0.1, psi[j] + 0.1, 64)
    V2, P2 = np.meshgrid(v2, p2, indexing="ij")
    return bool(np.min(np.abs(omega_m.eval(V2, P2, 0.0))) > floor)


@dataclass
class HatQuantities:
    """psi-averaged diagnostics of the drifting regime."""

    gamma_hat: float
    chi_hat: float
    Z_plus: float
    X_plus: float
    omega_minus: float

    def as_dict(self):
        return {
            "gamma_hat": self.gamma_hat,
            "chi_hat": self.chi_hat,
            "Z_plus": self.Z_plus,
            "X_plus": self.X_plus,
            "omega_minus": self.omega_minus,
        }


def _periodic_primitive_max(fun, mean, n=1 << 15):
    """max |int_0^psi (fun - mean)| over a period, composite Simpson."""
    psi = np.linspace(0.0, 2.0 * math.pi, n + 1)
    vals = fun(psi) - mean
    h = psi[1] - psi[0]
    # cumulative trapezoid is plenty at this resolution; Richardson via Simpson
    cum = np.concatenate([[0.0], np.cumsum(0.5 * h * (vals[1:] + vals[:-1]))])
    return float(np.max(np.abs(cum)))


def hat_quantities(lam, omega_m0, quad_tol=1e-12):
    """Averages of lambda/|omega|, 1/|omega| and the spans of their primitives."""
    lo, hi = omega_m0.range()
    omega_minus = min(abs(lo), abs(hi))
    if lo <= 1e-9 and hi >= -1e-9:
        raise DivideByZero("phase velocity changes sign; averaged quantities undefined")

    def gamma(psi):
        return lam(psi) / np.abs(omega_m0(psi))

    def chi(psi):
        return 1.0 / np.abs(omega_m0(psi))

    two_pi = 2.0 * math.pi
    gamma_hat = quad(gamma, 0.0, two_pi, epsabs=quad_tol, epsrel=1e-12, limit=400)[0] / two_pi
    chi_hat = quad(chi, 0.0, two_pi, epsabs=quad_tol, epsrel=1e-12, limit=400)[0] / two_pi
    Z_plus = _periodic_primitive_max(gamma, gamma_hat)
    X_plus = _periodic_primitive_max(chi, chi_hat)
    return HatQuantities(gamma_hat, chi_hat, Z_plus, X_plus, omega_minus)


# ---------------------------------------------------------------------------
# structure detection
# ---------------------------------------------------------------------------


@dataclass
class Structure:
    """Structural indices of the truncated slow system."""

    n: int
    m: int
    kind: str                      # 'linear' | 'nonlinear'
    sigma: int | None = None
    d: int | None = None           # None with kind='nonlinear' means n+d > N
    lam_n: TrigPoly | None = None          # linear: v-coefficient of Lambda_n (delta removed)
    lam_n_sigma: TrigPoly | None = None    # nonlinear: v^((sigma+1)/2) coefficient
    lam_nd: TrigPoly | None = None         # nonlinear: v-coefficient of Lambda_{n+d}
    lam_2q_sigma: TrigPoly | None = None   # v^((sigma+1)/2) coefficient of Lambda_{2q}
    omega_m0: TrigPoly | None = None
    omega_m1: TrigPoly | None = None
    ok: bool = True
    note: str = ""


def _reduced_lambda(model, k, tol=STRUCT_TOL):
    """Lambda_k minus the bookkeeping term delta_{k,2q} (l/q) v."""
    lam = model.Lambda.get(k)
    if lam is None:
        return None
    if k == 2 * model.q and model.l != 0:
        from .seriesring import MixedSeries

        lam = lam - MixedSeries.term(
            2, 0, 0, cos=model.l / model.q,
            kappa=lam.kappa, max_power=lam.max_power, max_harm=lam.max_harm,
        )
    return lam


def _significant_powers(series, tol=STRUCT_TOL):
    return sorted({p for (p, _, _), (c, s) in series.terms.items()
                   if abs(c) > tol or abs(s) > tol})


def detect_structure(model, tol=STRUCT_TOL):
    """Leading indices (n, m) and the linear / nonlinear shape of Lambda_n."""
    n = next((k for k in sorted(model.Lambda) if k <= model.N
              and not model.Lambda[k].is_zero(tol)), None)
    m = next((k for k in sorted(model.Omega) if k <= model.M
              and not model.Omega[k].is_zero(tol)), None)
    if n is None:
        raise AllZero("all averaged action coefficients vanish up to order N")
    if m is None:
        raise AllZero("all averaged phase coefficients vanish up to order M")

    om = model.Omega[m]
    omega_m0 = TrigPoly.from_power_slice(om, 0)
    omega_m1 = TrigPoly.from_power_slice(om, 1)

    lam_red = _reduced_lambda(model, n, tol)
    powers = _significant_powers(lam_red, tol)
    if not powers:
        # Lambda_n is exactly the bookkeeping term: linear with lambda_n = 0
        st = Structure(n=n, m=m, kind="linear", lam_n=TrigPoly({}),
                       omega_m0=omega_m0, omega_m1=omega_m1)
        return st

    p_min = powers[0]
    if p_min == 2:
        st = Structure(n=n, m=m, kind="linear",
                       lam_n=TrigPoly.from_power_slice(lam_red, 2),
                       omega_m0=omega_m0, omega_m1=omega_m1)
    elif p_min >= 3:
        sigma = p_min - 1
        d = None
        ok, note = True, ""
        for k in range(n + 1, model.N + 1):
            red = _reduced_lambda(model, k, tol)
            if red is None or red.is_zero(tol):
                continue
            kp = _significant_powers(red, tol)
            if kp and kp[0] == 2:
                d = k - n
                break
            if kp and kp[0] < p_min:
                ok, note = False, (
                    f"Lambda_{k} leads at half-power {kp[0]} < {p_min}; "
                    "mixed nonlinear structure not covered"
                )
                break
        st = Structure(n=n, m=m, kind="nonlinear", sigma=sigma, d=d,
                       lam_n_sigma=TrigPoly.from_power_slice(lam_red, p_min),
                       lam_nd=(TrigPoly.from_power_slice(
                           _reduced_lambda(model, n + d, tol), 2) if d else None),
                       omega_m0=omega_m0, omega_m1=omega_m1, ok=ok, note=note)
    else:
        st = Structure(n=n, m=m, kind="linear", lam_n=TrigPoly({}),
                       omega_m0=omega_m0, omega_m1=omega_m1, ok=False,
                       note=f"Lambda_{n} leads at half-power {p_min} < 2")
    q = model.q
    red2q = _reduced_lambda(model, 2 * q, tol)
    if red2q is not None and st.kind == "nonlinear" and st.sigma is not None:
        st.lam_2q_sigma = TrigPoly.from_power_slice(red2q, st.sigma + 1)
    return st


# ---------------------------------------------------------------------------
# verdict
# ---------------------------------------------------------------------------


@dataclass
class Rate:
    """Predicted envelope for the slow action v (and for r ~ sqrt(2 E))."""

    form: str                  # 'exp_of_power' | 'power' | 'none'
    alpha: float | None = None     # exponent of t in exp(c * t^alpha)
    coef_v: float | None = None    # signed coefficient for v
    v_exponent: float | None = None    # signed d(log v)/d(log t) for power laws
    r_exponent: float | None = None
    amplitude_v: float | None = None   # asymptotic amplitude of v * t^(-v_exponent)

    def as_dict(self):
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass
class RegimeVerdict:
    regime: str                    # 'locking' | 'drifting' | 'undetermined'
    stability: str                 # 'exp_stable' | 'poly_stable' | 'unstable'
    #                              | 'unstable_weighted' | 'inconclusive'
    theorem_path: str
    n: int | None = None
    m: int | None = None
    kind: str = ""
    sigma: int | None = None
    d: int | None = None
    nu: float | None = None
    psi_star: list = field(default_factory=list)
    theta_m: float | None = None
    scalars: dict = field(default_factory=dict)
    rate: Rate = field(default_factory=lambda: Rate("none"))
    weight_exp: float | None = None
    per_root: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def as_dict(self):
        return {
            "regime": self.regime,
            "class": self.stability,
            "theorem_path": self.theorem_path,
            "n": self.n,
            "m": self.m,
            "kind": self.kind,
            "sigma": self.sigma,
            "d": self.d,
            "nu": self.nu,
            "psi_star": list(self.psi_star),
            "theta_m": self.theta_m,
            "scalars": dict(self.scalars),
            "rate": self.rate.as_dict(),
            "weight_exp": self.weight_exp,
            "notes": list(self.notes),
        }


@dataclass
class ClassifierConfig:
    delta0: float = 0.25
    dead_zone: float = 1e-9
    grid: int = 256


def _full_lambda_over_v(model, k, psi_values, v_values):
    """(Lambda_k - delta l/q v) / v on a (v, psi) grid."""
    red = _reduced_lambda(model, k)
    V, P = np.meshgrid(v_values, psi_values, indexing="ij")
    return red.eval(V, P, 0.0) / V


def _min_lambda_tilde_check(model, k, psi_values, cfg, sign, base):
    """min over grid of (lambda + lambda_tilde) compared against 0.

    sign=+1 checks 'stays positive', sign=-1 checks 'stays negative';
    ``base`` are the already-evaluated lambda(psi) values (v -> 0 limit).
    """
    v_values = np.geomspace(1e-6, cfg.delta0, cfg.grid)
    grid = _full_lambda_over_v(model, k, psi_values, v_values)
    worst = float(np.min(sign * grid))
    worst = min(worst, float(np.min(sign * np.asarray(base))))
    return worst


def _exp_rate(q, k, coef):
    alpha = 1.0 - k / (2.0 * q)
    return Rate("exp_of_power", alpha=alpha, coef_v=coef * (2.0 * q / (2.0 * q - k)))


def _power_rate(v_exp, l, q, amplitude=None):
    return Rate("power", v_exponent=v_exp, r_exponent=0.5 * (v_exp - l / q),
                amplitude_v=amplitude)


def classify(model, cfg=None):
    """Walk the stability decision table and emit a verdict with a rate."""
    cfg = cfg or ClassifierConfig()
    q, l = model.q, model.l
    twoq = 2 * q
    dz = cfg.dead_zone

    try:
        st = detect_structure(model)
    except AllZero as exc:
        return RegimeVerdict("undetermined", "inconclusive", "all-zero", notes=[str(exc)])
    if not st.ok:
        return RegimeVerdict("undetermined", "inconclusive", "structure", n=st.n, m=st.m,
                             kind=st.kind, notes=[st.note])
    if st.n > twoq or st.m > twoq:
        return RegimeVerdict("undetermined", "inconclusive", "order-out-of-range",
                             n=st.n, m=st.m, kind=st.kind,
                             notes=["leading order beyond 2q; criteria do not apply"])

    roots = [] if st.omega_m0.is_zero() else find_locking(st.omega_m0)
    if roots:
        verdict = _classify_locking(model, st, roots, cfg)
    elif check_drifting(model.Omega[st.m], cfg.delta0):
        verdict = _classify_drifting(model, st, cfg)
    else:
        verdict = RegimeVerdict(
            "undetermined", "inconclusive", "regime",
            n=st.n, m=st.m, kind=st.kind,
            notes=["no attracting phase root and no uniform phase drift"],
        )
    verdict.n, verdict.m, verdict.kind = st.n, st.m, st.kind
    verdict.sigma, verdict.d = st.sigma, st.d
    if st.kind == "nonlinear" and st.sigma and st.d:
        verdict.nu = st.d / (q * (st.sigma - 1))
    return verdict


# -- locking -----------------------------------------------------------------


def _classify_locking(model, st, roots, cfg):
    q, l = model.q, model.l
    twoq = 2 * q
    dz = cfg.dead_zone
    psi_grid = np.array([r for r, _ in roots])

    per_root = []
    for psi_s, slope in roots:
        if st.kind == "linear":
            v = _lock_linear_one_root(model, st, psi_s, slope, cfg)
        else:
            v = _lock_nonlinear_one_root(model, st, psi_s, slope, cfg)
        v.psi_star = [psi_s]
        v.theta_m = slope
        per_root.append(v)

    classes = {v.stability for v in per_root}
    head = per_root[0]
    summary = RegimeVerdict(
        "locking",
        head.stability if len(classes) == 1 else "inconclusive",
        head.theorem_path if len(classes) == 1 else "mixed-roots",
        psi_star=[r for r, _ in roots],
        theta_m=per_root[0].theta_m,
        scalars=head.scalars,
        rate=head.rate,
        weight_exp=head.weight_exp,
        per_root=per_root,
        notes=head.notes if len(classes) == 1 else
        [f"root classes differ: {sorted(classes)}"],
    )
    return summary


def _lock_linear_one_root(model, st, psi_s, slope, cfg):
    q, l = model.q, model.l
    twoq = 2 * q
    dz = cfg.dead_zone
    n, m = st.n, st.m
    lam_star = float(st.lam_n(psi_s))
    scalars = {"lambda_at_star": lam_star, "theta_m": slope,
               "omega_m1_at_star": float(st.omega_m1(psi_s))}

    lam_eff = lam_star + (l / q if n == twoq else 0.0)
    psi_arr = np.array([psi_s])

    if n < twoq and m < twoq:
        if lam_star < -dz:
            return RegimeVerdict("locking", "exp_stable", "lock.linear.both-subcritical.exp",
                                 scalars=scalars, rate=_exp_rate(q, max(n, m), lam_star))
    if n < twoq and m == twoq:
        if lam_star < -dz:
            return RegimeVerdict("locking", "poly_stable", "lock.linear.slow-phase.poly",
                                 scalars=scalars, rate=_exp_rate(q, n, lam_star),
                                 notes=["action envelope remains stretched-exponential"])
    if n == twoq:
        if lam_eff < -dz:
            return RegimeVerdict("locking", "poly_stable", "lock.linear.critical-action.poly",
                                 scalars=scalars,
                                 rate=_power_rate(lam_star + l / q, l, q))
    worst_pos = _min_lambda_tilde_check(model, n, psi_arr, cfg, +1.0, [lam_star])
    if worst_pos > dz:
        rate = (_power_rate(lam_star + l / q, l, q) if n == twoq
                else _exp_rate(q, n, lam_star))
        return RegimeVerdict("locking", "unstable", "lock.linear.positive-action.unstable",
                             scalars=scalars, rate=rate)
    if n == twoq and l >= 1 and -l / q + dz < lam_star < -dz:
        return RegimeVerdict("locking", "unstable_weighted", "lock.linear.weighted",
                             scalars=scalars, weight_exp=l / twoq,
                             rate=_power_rate(lam_star + l / q, l, q),
                             notes=["instability in original variables not asserted"])
    return RegimeVerdict("locking", "inconclusive", "lock.linear.boundary", scalars=scalars)


def _lock_nonlinear_one_root(model, st, psi_s, slope, cfg):
    q, l = model.q, model.l
    twoq = 2 * q
    dz = cfg.dead_zone
    n, m, sigma, d = st.n, st.m, st.sigma, st.d
    lam_sig = float(st.lam_n_sigma(psi_s))
    scalars = {"lambda_sigma_at_star": lam_sig, "theta_m": slope}
    psi_arr = np.array([psi_s])

    if d is None:
        # n + d exceeds 2q: polynomial stability needs a nonconstant frequency
        mu = (twoq - n) / (q * (sigma - 1))
        scalars["mu"] = mu
        lam2q = float(st.lam_2q_sigma(psi_s)) if st.lam_2q_sigma else 0.0
        scalars["lambda_2q_sigma_at_star"] = lam2q
        if m <= twoq and l >= 1 and lam2q < -dz:
            xi = ((mu + l / q) / abs(lam2q)) ** (1.0 / (sigma - 1))
            return RegimeVerdict("locking", "poly_stable", "lock.nonlinear.beyond-critical.poly",
                                 scalars=scalars,
                                 rate=_power_rate(-mu, l, q, amplitude=xi * xi))
        return RegimeVerdict("locking", "inconclusive", "lock.nonlinear.beyond-critical",
                             scalars=scalars)

    nd = n + d
    nu = d / (q * (sigma - 1))
    lam_nd = float(st.lam_nd(psi_s))
    scalars.update({"lambda_nd_at_star": lam_nd, "nu": nu})
    lam_nd_eff = lam_nd + (nu + l / q if nd == twoq else 0.0)

    # instability first: both blocks push outward
    pos_nd = _min_lambda_tilde_check(model, nd, psi_arr, cfg, +1.0,
                                     [lam_nd + (l / q if nd == twoq else 0.0)])
    pos_sig = _min_lambda_tilde_check(model, n, psi_arr, cfg, +1.0, [lam_sig])
    if nd <= twoq and pos_nd > dz and pos_sig > dz:
        rate = (_power_rate(lam_nd + l / q, l, q) if nd == twoq
                else _exp_rate(q, nd, lam_nd))
        return RegimeVerdict("locking", "unstable", "lock.nonlinear.unstable",
                             scalars=scalars, rate=rate)

    if nd == twoq and m <= twoq:
        if lam_nd_eff < -dz:
            return RegimeVerdict("locking", "poly_stable", "lock.nonlinear.critical.poly",
                                 scalars=scalars, rate=_power_rate(lam_nd + l / q, l, q))
        if lam_nd_eff > dz and lam_sig < -dz:
            xi = (lam_nd_eff / abs(lam_sig)) ** (1.0 / (sigma - 1))
            scalars["xi_star"] = xi
            return RegimeVerdict("locking", "poly_stable", "lock.nonlinear.saturated.poly",
                                 scalars=scalars,
                                 rate=_power_rate(-nu, l, q, amplitude=xi * xi))
    if nd < twoq:
        if lam_nd < -dz:
            return RegimeVerdict("locking", "exp_stable", "lock.nonlinear.subcritical.exp",
                                 scalars=scalars, rate=_exp_rate(q, nd, lam_nd))
        if lam_nd > dz and lam_sig < -dz:
            xi = (lam_nd / abs(lam_sig)) ** (1.0 / (sigma - 1))
            scalars["xi_star"] = xi
            return RegimeVerdict("locking", "poly_stable", "lock.nonlinear.saturated.poly",
                                 scalars=scalars,
                                 rate=_power_rate(-nu, l, q, amplitude=xi * xi))
    return RegimeVerdict("locking", "inconclusive", "lock.nonlinear.boundary", scalars=scalars)


# -- drifting ----------------------------------------------------------------


def _classify_drifting(model, st, cfg):
    q, l = model.q, model.l
    twoq = 2 * q
    dz = cfg.dead_zone
    n, m = st.n, st.m
    psi_full = np.linspace(0.0, 2.0 * math.pi, cfg.grid, endpoint=False)

    if st.kind == "linear":
        return _drift_linear(model, st, cfg, psi_full)
    return _drift_nonlinear(model, st, cfg, psi_full)


def _drift_linear(model, st, cfg, psi_full):
    q, l = model.q, model.l
    twoq = 2 * q
    dz = cfg.dead_zone
    n, m = st.n, st.m
    lam_vals = st.lam_n(psi_full)
    lam_lo, lam_hi = st.lam_n.range()
    scalars = {"lambda_min": lam_lo, "lambda_max": lam_hi}

    # sign-definite action coefficient
    if n < twoq and lam_hi < -dz:
        hq = _hats_or_none(st)
        coef = hq.gamma_hat / hq.chi_hat if hq else 0.5 * (lam_lo + lam_hi)
        if hq:
            scalars.update(hq.as_dict())
        return RegimeVerdict("drifting", "exp_stable", "drift.linear.definite.exp",
                             scalars=scalars, rate=_exp_rate(q, n, coef))
    if n == twoq and lam_hi + l / q < -dz:
        hq = _hats_or_none(st)
        coef = hq.gamma_hat / hq.chi_hat if hq else 0.5 * (lam_lo + lam_hi)
        if hq:
            scalars.update(hq.as_dict())
        return RegimeVerdict("drifting", "poly_stable", "drift.linear.critical.poly",
                             scalars=scalars, rate=_power_rate(coef + l / q, l, q))
    worst_pos = _min_lambda_tilde_check(model, n, psi_full, cfg, +1.0, lam_vals)
    if lam_lo > dz and worst_pos > dz:
        rate = (_power_rate(lam_lo + l / q, l, q) if n == twoq else _exp_rate(q, n, lam_lo))
        return RegimeVerdict("drifting", "unstable", "drift.linear.positive.unstable",
                             scalars=scalars, rate=rate)
    if n == twoq and l >= 1 and lam_hi < -dz and lam_lo + l / q > dz:
        return RegimeVerdict("drifting", "unstable_weighted", "drift.linear.weighted",
                             scalars=scalars, weight_exp=l / twoq,
                             rate=_power_rate(0.5 * (lam_lo + lam_hi) + l / q, l, q),
                             notes=["instability in original variables not asserted"])

    # sign-changing: averaged criteria
    hq = _hats_or_none(st)
    if hq is None:
        return RegimeVerdict("drifting", "inconclusive", "drift.linear.phase-vanishes",
                             scalars=scalars)
    scalars.update(hq.as_dict())
    g = hq.gamma_hat
    coef = g / hq.chi_hat
    gamma11 = (2 <= n < twoq and 2 <= m < twoq) or (n == twoq and m == twoq)
    gamma10 = 2 <= n < m == twoq
    gamma01 = 2 <= m < n == twoq
    if gamma11 and g < -dz:
        if n < twoq:
            rate = _exp_rate(q, n, coef)
        else:
            rate = _power_rate(coef + l / q, l, q)
        return RegimeVerdict("drifting", "exp_stable", "drift.averaged.exp",
                             scalars=scalars, rate=rate)
    if gamma10 and g + hq.Z_plus * (m - n) / (q * hq.omega_minus) < -dz:
        return RegimeVerdict("drifting", "exp_stable", "drift.averaged.slow-phase.exp",
                             scalars=scalars, rate=_exp_rate(q, n, coef))
    if gamma01 and g + hq.chi_hat * l / q < -dz:
        return RegimeVerdict("drifting", "poly_stable", "drift.averaged.critical.poly",
                             scalars=scalars, rate=_power_rate(coef + l / q, l, q))
    if g > dz and _lambda_tilde_nonneg(model, st, cfg, psi_full):
        rate = (_power_rate(coef + l / q, l, q) if n == twoq else _exp_rate(q, n, coef))
        return RegimeVerdict("drifting", "unstable", "drift.averaged.unstable",
                             scalars=scalars, rate=rate)
    if n == twoq and l >= 1:
        # weighted instability: gamma_hat + l/(q |omega|) > 0 pointwise
        om_abs = np.abs(st.omega_m0(psi_full))
        if np.min(g + l / (q * om_abs)) > dz:
            return RegimeVerdict("drifting", "unstable_weighted", "drift.averaged.weighted",
                                 scalars=scalars, weight_exp=l / twoq,
                                 rate=_power_rate(coef + l / q, l, q),
                                 notes=["instability in original variables not asserted"])
    return RegimeVerdict("drifting", "inconclusive", "drift.linear.boundary", scalars=scalars)


def _lambda_tilde_nonneg(model, st, cfg, psi_full, k=None):
    """lambda_tilde(v, psi) >= 0 on the grid (within dead zone)."""
    k = k if k is not None else st.n
    v_values = np.geomspace(1e-6, cfg.delta0, 64)
    red = _reduced_lambda(model, k)
    V, P = np.meshgrid(v_values, psi_full, indexing="ij")
    over_v = red.eval(V, P, 0.0) / V
    base = st.lam_n(psi_full) if st.kind == "linear" else None
    if base is None:
        return True
    tilde = over_v - base[None, :]
    return bool(np.min(tilde) > -cfg.dead_zone)


def _hats_or_none(st):
    try:
        lam = st.lam_n if st.kind == "linear" else st.lam_nd
        if lam is None:
            return None
        return hat_quantities(lam, st.omega_m0)
    except DivideByZero:
        return None


def _drift_nonlinear(model, st, cfg, psi_full):
    q, l = model.q, model.l
    twoq = 2 * q
    dz = cfg.dead_zone
    n, m, sigma, d = st.n, st.m, st.sigma, st.d
    lam_sig_vals = st.lam_n_sigma(psi_full)
    sig_lo, sig_hi = st.lam_n_sigma.range()
    scalars = {"lambda_sigma_min": sig_lo, "lambda_sigma_max": sig_hi}

    if d is None:
        # n + d beyond 2q
        mu = (twoq - n) / (q * (sigma - 1))
        scalars["mu"] = mu
        if st.lam_2q_sigma is None or l == 0:
            return RegimeVerdict("drifting", "inconclusive", "drift.nonlinear.beyond-critical",
                                 scalars=scalars)
        try:
            hq = hat_quantities(st.lam_2q_sigma, st.omega_m0)
        except DivideByZero:
            return RegimeVerdict("drifting", "inconclusive", "drift.nonlinear.phase-vanishes",
                                 scalars=scalars)
        g_sig = hq.gamma_hat
        scalars["gamma_sigma_hat"] = g_sig
        scalars["omega_minus"] = hq.omega_minus
        if g_sig < -dz:
            R = ((mu + l / q) / abs(g_sig)) ** (1.0 / (sigma - 1))
            scalars["R_star"] = R
            return RegimeVerdict("drifting", "poly_stable", "drift.nonlinear.beyond-critical.poly",
                                 scalars=scalars,
                                 rate=_power_rate(-mu, l, q, amplitude=R * R))
        return RegimeVerdict("drifting", "inconclusive", "drift.nonlinear.beyond-critical",
                             scalars=scalars)

    nd = n + d
    nu = d / (q * (sigma - 1))
    scalars["nu"] = nu
    lam_nd_vals = st.lam_nd(psi_full)
    nd_lo, nd_hi = st.lam_nd.range()
    scalars.update({"lambda_nd_min": nd_lo, "lambda_nd_max": nd_hi})

    # pointwise sign-definite criteria
    if nd < twoq and nd_hi < -dz:
        return RegimeVerdict("drifting", "exp_stable", "drift.nonlinear.definite.exp",
                             scalars=scalars, rate=_exp_rate(q, nd, 0.5 * (nd_lo + nd_hi)))
    if nd == twoq:
        if nd_hi + nu + l / q < -dz:
            return RegimeVerdict("drifting", "poly_stable", "drift.nonlinear.critical.poly",
                                 scalars=scalars,
                                 rate=_power_rate(0.5 * (nd_lo + nd_hi) + l / q, l, q))
        if nd_hi + l / q < -dz and sig_hi < -dz:
            return RegimeVerdict("drifting", "poly_stable", "drift.nonlinear.critical.poly2",
                                 scalars=scalars,
                                 rate=_power_rate(0.5 * (nd_lo + nd_hi) + l / q, l, q))
    if nd <= twoq and nd_lo + (l / q if nd == twoq else 0.0) > dz and sig_lo > dz:
        rate = (_power_rate(nd_lo + l / q, l, q) if nd == twoq else _exp_rate(q, nd, nd_lo))
        return RegimeVerdict("drifting", "unstable", "drift.nonlinear.unstable",
                             scalars=scalars, rate=rate)

    # averaged criteria on the saturated radial variable
    try:
        hq = hat_quantities(st.lam_nd, st.omega_m0)
        hq_sig = hat_quantities(st.lam_n_sigma, st.omega_m0)
    except DivideByZero:
        return RegimeVerdict("drifting", "inconclusive", "drift.nonlinear.phase-vanishes",
                             scalars=scalars)
    g_nd, g_sig = hq.gamma_hat, hq_sig.gamma_hat
    scalars.update(hq.as_dict())
    scalars["gamma_sigma_hat"] = g_sig
    gamma11 = (2 <= nd < twoq and 2 <= m < twoq) or (nd == twoq and m == twoq)
    gamma10 = 2 <= nd < m == twoq
    gamma01 = 2 <= m < nd == twoq
    coef = g_nd / hq.chi_hat
    if gamma11 and g_nd < -dz:
        rate = _exp_rate(q, nd, coef) if nd < twoq else _power_rate(coef + l / q, l, q)
        return RegimeVerdict("drifting", "exp_stable", "drift.nonlinear.averaged.exp",
                             scalars=scalars, rate=rate)
    if gamma10 and g_nd + hq.Z_plus * (m - nd) / (q * hq.omega_minus) < -dz:
        return RegimeVerdict("drifting", "exp_stable", "drift.nonlinear.averaged.slow-phase.exp",
                             scalars=scalars, rate=_exp_rate(q, nd, coef))
    if gamma01 and g_nd + hq.chi_hat * (nu + l / q) < -dz:
        return RegimeVerdict("drifting", "poly_stable", "drift.nonlinear.averaged.critical.poly",
                             scalars=scalars, rate=_power_rate(coef + l / q, l, q))
    if m < nd <= twoq and g_nd > dz and g_sig < -dz:
        R = ((g_nd + ((nu + l / q) if nd == twoq else 0.0)) / abs(g_sig)) ** (1.0 / (sigma - 1))
        scalars["R_star"] = R
        return RegimeVerdict("drifting", "poly_stable", "drift.nonlinear.saturated.poly",
                             scalars=scalars, rate=_power_rate(-nu, l, q, amplitude=R * R))
    if nd < m <= twoq and nd_lo > dz and sig_hi < -dz:
        Rlo = (nd_lo / abs(sig_hi)) ** (1.0 / (sigma - 1))
        scalars["R_star_range"] = Rlo
        return RegimeVerdict("drifting", "poly_stable", "drift.nonlinear.pointwise-saturated.poly",
                             scalars=scalars, rate=_power_rate(-nu, l, q))
    return RegimeVerdict("drifting", "inconclusive", "drift.nonlinear.boundary", scalars=scalars)
