"""Long-time integration of the perturbed, limiting and averaged flows.

The full non-autonomous system is integrated with a Dormand-Prince 5(4)
embedded pair (PI step-size control, free 4th-order dense output) compiled
with numba; a single data-driven right-hand side covers the whole system
family, so one compilation serves every run.  The co-rotating phase
theta = phi - S(t)/kappa is carried as an auxiliary exact winding state,
which keeps it continuous without unwrapping sparse samples.

Output is sampled on a log-spaced grid (the phenomena are power laws in t).
Escape beyond a configured radius stops the run and is reported as empirical
instability, not failure; collapse far below the resolvable scale stops it
as well (the asymptotic fate is then settled).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.integrate import solve_ivp

from .model import eval_phase

STATUS_OK = 0
STATUS_ESCAPED = 1
STATUS_COLLAPSED = 2
STATUS_STEP_BUDGET = 3
STATUS_UNDERFLOW = 4

_STATUS_NAMES = {
    STATUS_OK: "completed",
    STATUS_ESCAPED: "escaped",
    STATUS_COLLAPSED: "collapsed",
    STATUS_STEP_BUDGET: "step-budget",
    STATUS_UNDERFLOW: "step-underflow",
}


class StepUnderflow(Exception):
    """Adaptive step size collapsed below the resolvable scale."""


@dataclass
class IntegratorConfig:
    rel_tol: float = 1e-10
    abs_tol: float = 1e-12
    t_end: float = 1e5
    t_start: float = 1.0
    max_step: float = np.inf
    samples_per_decade: int = 64
    escape_radius: float = 2.0
    collapse_radius: float = 1e-60
    max_steps: int = 80_000_000
    fixed_step: float = 0.0        # > 0 disables adaptivity (order tests)

    def __post_init__(self):
        for tol in (self.rel_tol, self.abs_tol):
            if not (1e-13 <= tol <= 1e-3):
                raise ValueError("tolerances must lie in [1e-13, 1e-3]")

    def sample_grid(self):
        n_dec = math.log10(self.t_end / self.t_start)
        n = max(2, int(round(n_dec * self.samples_per_decade)) + 1)
        return np.geomspace(self.t_start, self.t_end, n)


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    theta: np.ndarray              # unwrapped phi - S/kappa
    E: np.ndarray
    v_est: np.ndarray | None = None
    status: str = "completed"
    t_final: float = 0.0

    @property
    def escaped(self):
        return self.status == "escaped"

    @property
    def collapsed(self):
        return self.status == "collapsed"

    @property
    def r_E(self):
        """Smooth radius sqrt(2 E) (level-line radius, no angular wobble)."""
        return np.sqrt(2.0 * np.clip(self.E, 0.0, None))

    def to_csv(self, path):
        cols = [self.t, self.x, self.y, self.E, self.theta]
        header = "t,x,y,E,theta,v_est"
        v = self.v_est if self.v_est is not None else np.full_like(self.t, np.nan)
        cols.append(v)
        data = np.column_stack(cols)
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for row in data:
                fh.write(",".join(f"{val:.17g}" for val in row) + "\n")


# ---------------------------------------------------------------------------
# compiled kernel
# ---------------------------------------------------------------------------

# Dormand-Prince 5(4) tableau, FSAL form, with the free 4th-order interpolant.
_A = np.array(
    [
        [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [1 / 5, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3 / 40, 9 / 40, 0.0, 0.0, 0.0, 0.0],
        [44 / 45, -56 / 15, 32 / 9, 0.0, 0.0, 0.0],
        [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729, 0.0, 0.0],
        [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656, 0.0],
        [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
    ]
)
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_E = np.array(
    [71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40]
)
_P = np.array(
    [
        [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
        [0.0, 0.0, 0.0, 0.0],
        [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
        [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
        [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
        [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
        [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 117521692],
    ]
)


@njit(cache=True, fastmath=False)
def _phase_eval(svec, q, t):
    S = svec[q] * math.log(t)
    Sp = svec[q] / t
    for k in range(q):
        e = 1.0 - k / q
        te = t ** (e - 1.0)
        S += svec[k] * te * t
        Sp += svec[k] * e * te
    return S, Sp


@njit(cache=True, fastmath=False)
def _ipow(x, n):
    out = 1.0
    for _ in range(n):
        out *= x
    return out


@njit(cache=True, fastmath=False)
def _rhs(t, x, yy, ham, force, svec, q, kappa, h, out):
    S, Sp = _phase_eval(svec, q, t)
    fx = yy
    fy = -x + h * x * x * x
    for r in range(ham.shape[0]):
        kq = ham[r, 0]
        xp = int(ham[r, 1])
        yp = int(ham[r, 2])
        sh = ham[r, 3]
        amp = t ** (-kq) * (ham[r, 4] * math.cos(sh * S) + ham[r, 5] * math.sin(sh * S))
        if yp > 0:
            fx += amp * yp * _ipow(x, xp) * _ipow(yy, yp - 1)
        if xp > 0:
            fy -= amp * xp * _ipow(x, xp - 1) * _ipow(yy, yp)
    for r in range(force.shape[0]):
        kq = force[r, 0]
        xp = int(force[r, 1])
        yp = int(force[r, 2])
        sh = force[r, 3]
        amp = t ** (-kq) * (force[r, 4] * math.cos(sh * S) + force[r, 5] * math.sin(sh * S))
        fy += amp * _ipow(x, xp) * _ipow(yy, yp)
    r2 = x * x + yy * yy
    if r2 > 0.0:
        fw = (-x * fy + yy * fx) / r2 - Sp / kappa
    else:
        fw = 1.0 - Sp / kappa
    out[0] = fx
    out[1] = fy
    out[2] = fw


@njit(cache=True, fastmath=False)
def _interp(y0, K, hstep, theta, P, out):
    t2 = theta * theta
    w = np.empty(4)
    w[0] = theta
    w[1] = t2
    w[2] = t2 * theta
    w[3] = t2 * t2
    for i in range(3):
        acc = 0.0
        for s in range(7):
            ps = 0.0
            for j in range(4):
                ps += P[s, j] * w[j]
            acc += K[s, i] * ps
        out[i] = y0[i] + hstep * acc


@njit(cache=True, fastmath=False)
def _integrate(
    ham, force, svec, q, kappa, h_quartic,
    x0, y0, w0, t0, t_end,
    rtol, atol, max_step, fixed_step, max_steps,
    resc2, rfloor2, ts, xs, ys, ws,
):
    A = _A_CONST
    C = _C_CONST
    EC = _E_CONST
    P = _P_CONST

    y = np.empty(3)
    y[0] = x0
    y[1] = y0
    y[2] = w0
    t = t0
    K = np.zeros((7, 3))
    ytmp = np.empty(3)
    ynew = np.empty(3)
    yint = np.empty(3)

    _rhs(t, y[0], y[1], ham, force, svec, q, kappa, h_quartic, ytmp)
    for i in range(3):
        K[0, i] = ytmp[i]

    n_samp = ts.shape[0]
    ptr = 0
    if ts[0] <= t0 * (1.0 + 1e-15):
        xs[0] = y[0]
        ys[0] = y[1]
        ws[0] = y[2]
        ptr = 1

    hstep = 1e-3
    if fixed_step > 0.0:
        hstep = fixed_step
    facold = 1e-4
    status = STATUS_OK_C
    nstep = 0

    while t < t_end:
        nstep += 1
        if nstep > max_steps:
            status = 3
            break
        if hstep > max_step:
            hstep = max_step
        if t + hstep > t_end:
            hstep = t_end - t
        if hstep < 1e-14 * t:
            status = 4
            break

        # stages (K[0] holds f(t, y) from FSAL)
        for s in range(1, 7):
            for i in range(3):
                acc = 0.0
                for jj in range(s):
                    acc += A[s, jj] * K[jj, i]
                ytmp[i] = y[i] + hstep * acc
            _rhs(t + C[s] * hstep, ytmp[0], ytmp[1], ham, force, svec, q, kappa,
                 h_quartic, ynew)
            for i in range(3):
                K[s, i] = ynew[i]
        # 5th-order solution is stage 7's argument (a7 row == b)
        for i in range(3):
            acc = 0.0
            for jj in range(6):
                acc += A[6, jj] * K[jj, i]
            ynew[i] = y[i] + hstep * acc

        # error estimate
        err = 0.0
        for i in range(3):
            ei = 0.0
            for jj in range(7):
                ei += EC[jj] * K[jj, i]
            ei *= hstep
            sc = atol + rtol * max(abs(y[i]), abs(ynew[i]))
            err += (ei / sc) ** 2
        err = math.sqrt(err / 3.0)

        if fixed_step > 0.0:
            accept = True
        else:
            accept = err <= 1.0
        if not accept:
            fac11 = err**0.17
            hstep = hstep / min(10.0, fac11 / 0.9)
            continue

        # dense output on the sample grid
        while ptr < n_samp and ts[ptr] <= t + hstep:
            theta = (ts[ptr] - t) / hstep
            _interp(y, K, hstep, theta, P, yint)
            xs[ptr] = yint[0]
            ys[ptr] = yint[1]
            ws[ptr] = yint[2]
            ptr += 1

        t_new = t + hstep
        r2 = ynew[0] * ynew[0] + ynew[1] * ynew[1]
        if r2 >= resc2:
            # bisect the crossing on the dense interpolant
            lo = 0.0
            hi = 1.0
            for _ in range(40):
                mid = 0.5 * (lo + hi)
                _interp(y, K, hstep, mid, P, yint)
                if yint[0] * yint[0] + yint[1] * yint[1] >= resc2:
                    hi = mid
                else:
                    lo = mid
            t = t + hi * hstep
            status = 1
            break
        if r2 <= rfloor2:
            t = t_new
            status = 2
            break

        # PI controller (Hairer DOPRI5 defaults)
        if fixed_step <= 0.0:
            fac11 = err**0.17
            fac = fac11 / facold**0.04
            hstep = hstep / max(1.0 / 6.0, min(5.0, fac / 0.9))
            facold = max(err, 1e-4)

        t = t_new
        for i in range(3):
            y[i] = ynew[i]
            K[0, i] = K[6, i]  # FSAL

    return status, ptr, t


# numba cannot close over module globals in all versions; bind constants
_A_CONST = _A
_C_CONST = _C
_E_CONST = _E
_P_CONST = _P
STATUS_OK_C = 0


# ---------------------------------------------------------------------------
# wrappers
# ---------------------------------------------------------------------------


def _term_tables(spec):
    ham, force = [], []
    for term in spec.terms:
        for m in term.poly:
            row = (term.k / spec.phase.q, float(m.x_pow), float(m.y_pow),
                   float(m.s_harm), m.cos, m.sin)
            (ham if term.kind == "hamiltonian" else force).append(row)
    ham = np.array(ham, dtype=float).reshape(-1, 6)
    force = np.array(force, dtype=float).reshape(-1, 6)
    return ham, force


def integrate_full(spec, x0, y0, cfg=None, model=None):
    """Integrate the original (x, y) system with log-spaced dense output.

    Returns a :class:`Trajectory` with derived channels E = H0(x, y), the
    continuously tracked co-rotating phase theta, and (when an averaged
    ``model`` is supplied) the transformed slow action v_est.
    """
    cfg = cfg or IntegratorConfig()
    phase = spec.phase
    ham, force = _term_tables(spec)
    svec = np.array(phase.s, dtype=float)
    ts = cfg.sample_grid()
    xs = np.full(ts.shape, np.nan)
    ys = np.full(ts.shape, np.nan)
    ws = np.full(ts.shape, np.nan)

    S0, _ = eval_phase(phase, cfg.t_start)
    w0 = math.atan2(-y0, x0) - S0 / phase.kappa

    status, ptr, t_fin = _integrate(
        ham, force, svec, phase.q, float(phase.kappa), spec.h,
        float(x0), float(y0), w0, cfg.t_start, cfg.t_end,
        cfg.rel_tol, cfg.abs_tol, cfg.max_step, cfg.fixed_step, cfg.max_steps,
        cfg.escape_radius**2, cfg.collapse_radius**2, ts, xs, ys, ws,
    )
    if status == STATUS_UNDERFLOW:
        raise StepUnderflow(f"step size underflow at t = {t_fin}")

    keep = ts[:ptr] <= t_fin * (1.0 + 1e-12)
    ts, xs, ys, ws = ts[:ptr][keep], xs[:ptr][keep], ys[:ptr][keep], ws[:ptr][keep]
    E = spec.h0(xs, ys)
    v_est = None
    if model is not None:
        v_est, _ = model.slow_variables(ts, E, ws)
    return Trajectory(
        t=ts, x=xs, y=ys, theta=ws, E=E, v_est=v_est,
        status=_STATUS_NAMES[status], t_final=t_fin,
    )


def _series_table(series):
    rows = [(p, j, c, s) for (p, j, k), (c, s) in series.terms.items() if k == 0]
    return np.array(rows, dtype=float).reshape(-1, 4)


def integrate_averaged(model, v0, psi0, cfg=None, n_terms=None):
    """Integrate the truncated averaged system dv/dt, dpsi/dt.

    Stops at the v = 0 crossing (the axis is invariant for the exact flow;
    truncation can push v slightly negative, which we clamp by stopping).
    """
    cfg = cfg or IntegratorConfig()
    twoq = 2.0 * model.q
    lam_tabs = {k: _series_table(v) for k, v in model.Lambda.items()
                if k <= (n_terms or model.N) and v.terms}
    om_tabs = {k: _series_table(v) for k, v in model.Omega.items()
               if k <= (n_terms or model.M) and v.terms}

    def eval_tab(tab, v, psi):
        p, j, c, s = tab[:, 0], tab[:, 1], tab[:, 2], tab[:, 3]
        return float(np.sum(v ** (0.5 * p) * (c * np.cos(j * psi) + s * np.sin(j * psi))))

    def rhs(t, z):
        v, psi = z
        v = max(v, 0.0)
        dv = 0.0
        dpsi = 0.0
        for k, tab in lam_tabs.items():
            dv += t ** (-k / twoq) * eval_tab(tab, v, psi)
        for k, tab in om_tabs.items():
            dpsi += t ** (-k / twoq) * eval_tab(tab, v, psi)
        return (dv, dpsi)

    def hit_zero(t, z):
        return z[0]

    hit_zero.terminal = True
    hit_zero.direction = -1.0

    ts = cfg.sample_grid()
    sol = solve_ivp(
        rhs, (cfg.t_start, cfg.t_end), [float(v0), float(psi0)],
        method="DOP853", rtol=cfg.rel_tol, atol=cfg.abs_tol,
        t_eval=ts, events=hit_zero, dense_output=False,
    )
    status = "completed" if sol.status == 0 else ("collapsed" if sol.status == 1 else "failed")
    return {
        "t": sol.t,
        "v": np.clip(sol.y[0], 0.0, None),
        "psi": sol.y[1],
        "status": status,
    }


def integrate_full_scipy(spec, x0, y0, cfg=None, rtol=None, atol=None):
    """Independent cross-check route: same system via scipy DOP853."""
    cfg = cfg or IntegratorConfig()
    phase = spec.phase
    ham, force = _term_tables(spec)
    svec = np.array(phase.s, dtype=float)
    out = np.empty(3)

    def rhs(t, z):
        _rhs(t, z[0], z[1], ham, force, svec, phase.q, float(phase.kappa), spec.h, out)
        return out.copy()

    ts = cfg.sample_grid()
    S0, _ = eval_phase(phase, cfg.t_start)
    w0 = math.atan2(-y0, x0) - S0 / phase.kappa
    sol = solve_ivp(
        rhs, (cfg.t_start, cfg.t_end), [x0, y0, w0], method="DOP853",
        rtol=rtol or cfg.rel_tol, atol=atol or cfg.abs_tol, t_eval=ts,
    )
    E = spec.h0(sol.y[0], sol.y[1])
    return Trajectory(t=sol.t, x=sol.y[0], y=sol.y[1], theta=sol.y[2], E=E,
                      status="completed", t_final=float(sol.t[-1]))
