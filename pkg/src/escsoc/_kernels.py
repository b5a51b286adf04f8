"""Compiled inner loops.

Everything here works on plain float arrays so the public dataclass API in
:mod:`escsoc.model` and :mod:`escsoc.ekf` can stay readable.  Parameter tables
are passed as ``bp`` (breakpoints, ascending) and ``tab`` with columns
``r0, r1, r2, tau1, tau2, m, gamma``.  State vectors are ordered
``[z, i_r1, i_r2, h]``.
"""

import math

import numpy as np
from numba import njit

R0, R1, R2, TAU1, TAU2, M, GAMMA = range(7)
N_PARAMS = 7

MODE_CURRENT = 0
MODE_POWER = 1
MODE_VOLTAGE = 2

# stop-condition bits for run_model
STOP_NONE = 0
STOP_VMIN = 1
STOP_VMAX = 2
STOP_CUTOFF = 4
STOP_INFEASIBLE = 8


@njit(cache=True)
def locate(bp, x):
    """Return ``(j, w)`` with value = (1-w)*y[j] + w*y[j+1], clamped at the ends."""
    n = bp.shape[0]
    if x <= bp[0]:
        return 0, 0.0
    if x >= bp[n - 1]:
        return n - 2, 1.0
    lo = 0
    hi = n - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if bp[mid] <= x:
            lo = mid
        else:
            hi = mid
    return lo, (x - bp[lo]) / (bp[lo + 1] - bp[lo])


@njit(cache=True)
def interp1(bp, y, x):
    j, w = locate(bp, x)
    return (1.0 - w) * y[j] + w * y[j + 1]


@njit(cache=True)
def secant_slope(bp, y, x):
    """Slope of the bracketing interval; right interval at a breakpoint, 0 outside."""
    n = bp.shape[0]
    if x < bp[0] or x > bp[n - 1]:
        return 0.0
    j, w = locate(bp, x)
    return (y[j + 1] - y[j]) / (bp[j + 1] - bp[j])


@njit(cache=True)
def interp_row(bp, tab, x, out):
    j, w = locate(bp, x)
    for c in range(tab.shape[1]):
        out[c] = (1.0 - w) * tab[j, c] + w * tab[j + 1, c]


@njit(cache=True)
def sgn(x):
    if x > 0.0:
        return 1.0
    if x < 0.0:
        return -1.0
    return 0.0


TINY = 1e-250   # decayed RC currents below this are flushed to zero (avoids slow subnormals)


@njit(cache=True)
def rc(a, x, i):
    """One RC-branch update a*x + (1-a)*i, flushing negligible values to zero."""
    y = a * x + (1.0 - a) * i
    if abs(y) < TINY:
        return 0.0
    return y


@njit(cache=True)
def step(z, ir1, ir2, h, i, tau1, tau2, gamma, dt, q, eta):
    a1 = math.exp(-dt / tau1)
    a2 = math.exp(-dt / tau2)
    ah = math.exp(-abs(i * eta * gamma * dt / q))
    zn = z - eta * dt / q * i
    ir1n = rc(a1, ir1, i)
    ir2n = rc(a2, ir2, i)
    hn = ah * h + (ah - 1.0) * sgn(i)
    return zn, ir1n, ir2n, hn


@njit(cache=True)
def open_circuit_emf(p, ovoc, ir1, ir2, h):
    """E = v_oc + m*h - r1*i_r1 - r2*i_r2 (terminal voltage before the series drop)."""
    return ovoc + p[M] * h - p[R1] * ir1 - p[R2] * ir2


@njit(cache=True)
def power_current(emf, r0, p):
    """Smaller-magnitude root of r0*i^2 - E*i + p = 0; flag=1 if infeasible."""
    disc = emf * emf - 4.0 * r0 * p
    if disc < 0.0:
        return emf / (2.0 * r0), 1
    return 2.0 * p / (emf + math.sqrt(disc)), 0


@njit(cache=True)
def run_model(mode, u, x0, bp, tab, osoc, ovolt, dt, q, eta, v_min, v_max, stop, cutoff=0.0):
    """Simulate a current-, power- or voltage-driven schedule.

    Returns currents, voltages, states (n+1, 4), number of completed samples,
    per-sample flags (bit 0: power infeasible, bit 1: below v_min,
    bit 2: above v_max).  ``stop`` is a mask of STOP_* bits; the sample that
    triggers a stop is not applied.
    """
    n = u.shape[0]
    cur = np.zeros(n)
    volt = np.zeros(n)
    states = np.zeros((n + 1, 4))
    flags = np.zeros(n, dtype=np.int8)
    p = np.zeros(tab.shape[1])
    z = x0[0]
    ir1 = x0[1]
    ir2 = x0[2]
    h = x0[3]
    states[0, 0] = z
    states[0, 1] = ir1
    states[0, 2] = ir2
    states[0, 3] = h
    done = n
    zc = np.nan
    vo = a1 = a2 = 0.0
    for k in range(n):
        if z != zc:
            # parameters only change with SOC; rests reuse them
            interp_row(bp, tab, z, p)
            vo = interp1(osoc, ovolt, z)
            a1 = math.exp(-dt / p[TAU1])
            a2 = math.exp(-dt / p[TAU2])
            zc = z
        emf = open_circuit_emf(p, vo, ir1, ir2, h)
        if mode == MODE_POWER:
            i, bad = power_current(emf, p[R0], u[k])
            if bad:
                flags[k] |= 1
                if stop & STOP_INFEASIBLE:
                    done = k
                    break
        elif mode == MODE_VOLTAGE:
            i = (emf - u[k]) / p[R0]
            if stop & STOP_CUTOFF and abs(i) < cutoff:
                done = k
                break
        else:
            i = u[k]
        v = emf - p[R0] * i
        if v < v_min:
            flags[k] |= 2
            if stop & STOP_VMIN:
                done = k
                break
        if v > v_max:
            flags[k] |= 4
            if stop & STOP_VMAX:
                done = k
                break
        cur[k] = i
        volt[k] = v
        if i != 0.0:
            ah = math.exp(-abs(i * eta * p[GAMMA] * dt / q))
            h = ah * h + (ah - 1.0) * sgn(i)
            z = z - eta * dt / q * i
        ir1 = rc(a1, ir1, i)
        ir2 = rc(a2, ir2, i)
        states[k + 1, 0] = z
        states[k + 1, 1] = ir1
        states[k + 1, 2] = ir2
        states[k + 1, 3] = h
    return cur, volt, states, done, flags


@njit(cache=True)
def coulomb(current, z0, dt, q, eta):
    n = current.shape[0]
    z = np.empty(n + 1)
    z[0] = z0
    c = eta * dt / q
    for k in range(n):
        z[k + 1] = z[k] - c * current[k]
    return z


@njit(cache=True)
def hysteresis_path(current, h0, gamma, dt, q, eta):
    """h_k for k = 0..n under a constant rate constant."""
    n = current.shape[0]
    h = np.empty(n + 1)
    h[0] = h0
    for k in range(n):
        i = current[k]
        ah = math.exp(-abs(i * eta * gamma * dt / q))
        h[k + 1] = ah * h[k] + (ah - 1.0) * sgn(i)
    return h


@njit(cache=True)
def _run_params(theta, b, fit, jk, wk, lo, hi):
    for c in range(5):
        lo[c] = theta[c] if jk == b else fit[jk, c]
        hi[c] = theta[c] if jk + 1 == b else fit[jk + 1, c]
    sh = 0.0
    if jk == b:
        sh += 1.0 - wk
    if jk + 1 == b:
        sh += wk
    return sh


@njit(cache=True)
def lut_residual(theta, b, fit, run_start, run_j, run_w, run_i, win_run, ir0, e, dt):
    """Voltage residuals over a set of fit windows for breakpoint ``b``.

    ``fit`` holds the (r0, r1, r2, tau1, tau2) columns of the whole table and
    row ``b`` is replaced by ``theta``.  Samples are grouped in runs of
    constant interpolation row ``run_j``, weight ``run_w`` and current
    ``run_i``; run r covers samples run_start[r]:run_start[r+1].  ``e`` is the
    measured voltage minus v_oc(z) + m(z)*h per sample.  Window q begins at
    run ``win_run[q]`` with RC currents ir0[q].
    """
    nrun = run_j.shape[0]
    res = np.empty(e.shape[0])
    lo = np.empty(5)
    hi = np.empty(5)
    q = 0
    x1 = 0.0
    x2 = 0.0
    for r in range(nrun):
        if q < win_run.shape[0] and r == win_run[q]:
            x1 = ir0[q, 0]
            x2 = ir0[q, 1]
            q += 1
        wk = run_w[r]
        _run_params(theta, b, fit, run_j[r], wk, lo, hi)
        r0 = lo[0] + wk * (hi[0] - lo[0])
        r1 = lo[1] + wk * (hi[1] - lo[1])
        r2 = lo[2] + wk * (hi[2] - lo[2])
        a1 = math.exp(-dt / (lo[3] + wk * (hi[3] - lo[3])))
        a2 = math.exp(-dt / (lo[4] + wk * (hi[4] - lo[4])))
        i = run_i[r]
        v0 = r0 * i
        for k in range(run_start[r], run_start[r + 1]):
            res[k] = e[k] + r1 * x1 + r2 * x2 + v0
            x1 = rc(a1, x1, i)
            x2 = rc(a2, x2, i)
    return res


@njit(cache=True)
def lut_normal_eq(theta, steps, b, fit, run_start, run_j, run_w, run_i, win_run, ir0, e, dt):
    """Gauss-Newton normal equations of :func:`lut_residual` from central differences.

    Returns ``(JtJ, Jtr, cost)`` where column c of J is
    (r(theta + steps[c] e_c) - r(theta - steps[c] e_c)) / (2 steps[c]) and
    cost = 0.5 * r @ r.  The residual is linear in r0, r1 and r2, so their
    central differences are exact and written in closed form; the tau
    columns difference two perturbed RC recursions.  J is never stored.
    """
    nrun = run_j.shape[0]
    lo = np.empty(5)
    hi = np.empty(5)
    q = 0
    # RC currents for tau1 (nominal, +, -) and tau2 (nominal, +, -)
    x1 = x1p = x1m = x2 = x2p = x2m = 0.0
    s00 = s01 = s02 = s03 = s04 = s11 = s12 = s13 = s14 = s22 = s23 = s24 = s33 = s34 = s44 = 0.0
    t0 = t1 = t2 = t3 = t4 = 0.0
    cost = 0.0
    for r in range(nrun):
        if q < win_run.shape[0] and r == win_run[q]:
            x1 = x1p = x1m = ir0[q, 0]
            x2 = x2p = x2m = ir0[q, 1]
            q += 1
        wk = run_w[r]
        sh = _run_params(theta, b, fit, run_j[r], wk, lo, hi)
        r0 = lo[0] + wk * (hi[0] - lo[0])
        r1 = lo[1] + wk * (hi[1] - lo[1])
        r2 = lo[2] + wk * (hi[2] - lo[2])
        tt1 = lo[3] + wk * (hi[3] - lo[3])
        tt2 = lo[4] + wk * (hi[4] - lo[4])
        a1 = math.exp(-dt / tt1)
        a1p = math.exp(-dt / (tt1 + sh * steps[3]))
        a1m = math.exp(-dt / (tt1 - sh * steps[3]))
        a2 = math.exp(-dt / tt2)
        a2p = math.exp(-dt / (tt2 + sh * steps[4]))
        a2m = math.exp(-dt / (tt2 - sh * steps[4]))
        g3 = r1 / (2.0 * steps[3])
        g4 = r2 / (2.0 * steps[4])
        i = run_i[r]
        v0 = r0 * i
        c0 = sh * i
        if sh == 0.0 and x1p == x1m and x2p == x2m:
            # theta has no influence on this run yet: every J column is zero
            for k in range(run_start[r], run_start[r + 1]):
                res = e[k] + r1 * x1 + r2 * x2 + v0
                cost += res * res
                x1 = rc(a1, x1, i)
                x2 = rc(a2, x2, i)
            x1p = x1m = x1
            x2p = x2m = x2
            continue
        for k in range(run_start[r], run_start[r + 1]):
            res = e[k] + r1 * x1 + r2 * x2 + v0
            c1 = sh * x1
            c2 = sh * x2
            c3 = g3 * (x1p - x1m)
            c4 = g4 * (x2p - x2m)
            cost += res * res
            t0 += c0 * res
            t1 += c1 * res
            t2 += c2 * res
            t3 += c3 * res
            t4 += c4 * res
            s00 += c0 * c0
            s01 += c0 * c1
            s02 += c0 * c2
            s03 += c0 * c3
            s04 += c0 * c4
            s11 += c1 * c1
            s12 += c1 * c2
            s13 += c1 * c3
            s14 += c1 * c4
            s22 += c2 * c2
            s23 += c2 * c3
            s24 += c2 * c4
            s33 += c3 * c3
            s34 += c3 * c4
            s44 += c4 * c4
            x1 = rc(a1, x1, i)
            x1p = rc(a1p, x1p, i)
            x1m = rc(a1m, x1m, i)
            x2 = rc(a2, x2, i)
            x2p = rc(a2p, x2p, i)
            x2m = rc(a2m, x2m, i)
    JtJ = np.array([[s00, s01, s02, s03, s04],
                    [s01, s11, s12, s13, s14],
                    [s02, s12, s22, s23, s24],
                    [s03, s13, s23, s33, s34],
                    [s04, s14, s24, s34, s44]])
    Jtr = np.array([t0, t1, t2, t3, t4])
    return JtJ, Jtr, 0.5 * cost


# --------------------------------------------------------------------------
# filter kernels


@njit(cache=True)
def ekf_predict(x, P, i, p, dt, q, eta, Sw):
    z, ir1, ir2, h = step(x[0], x[1], x[2], x[3], i, p[TAU1], p[TAU2], p[GAMMA], dt, q, eta)
    if h > 1.0:
        h = 1.0
    elif h < -1.0:
        h = -1.0
    xn = np.empty(4)
    xn[0] = z
    xn[1] = ir1
    xn[2] = ir2
    xn[3] = h
    a = np.empty(4)
    a[0] = 1.0
    a[1] = math.exp(-dt / p[TAU1])
    a[2] = math.exp(-dt / p[TAU2])
    a[3] = math.exp(-abs(i * eta * p[GAMMA] * dt / q))
    Pn = np.empty((4, 4))
    for r in range(4):
        for c in range(4):
            Pn[r, c] = a[r] * P[r, c] * a[c] + Sw[r, c]
    for r in range(4):
        for c in range(r + 1, 4):
            s = 0.5 * (Pn[r, c] + Pn[c, r])
            Pn[r, c] = s
            Pn[c, r] = s
    return xn, Pn


@njit(cache=True)
def ekf_update(x, P, vmeas, vpred, C, sv):
    """Joseph-form scalar-measurement update. Returns x, P, innovation, its variance."""
    PC = np.zeros(4)
    for r in range(4):
        acc = 0.0
        for c in range(4):
            acc += P[r, c] * C[c]
        PC[r] = acc
    s = sv
    for r in range(4):
        s += C[r] * PC[r]
    if not (s > 0.0):
        return x, P, 0.0, s
    K = PC / s
    y = vmeas - vpred
    xn = x + K * y
    # Joseph form: (I - K C) P (I - K C)^T + K sv K^T
    IKC = np.eye(4)
    for r in range(4):
        for c in range(4):
            IKC[r, c] -= K[r] * C[c]
    Pn = IKC @ P @ IKC.T
    for r in range(4):
        for c in range(4):
            Pn[r, c] += K[r] * sv * K[c]
    for r in range(4):
        for c in range(r + 1, 4):
            m = 0.5 * (Pn[r, c] + Pn[c, r])
            Pn[r, c] = m
            Pn[c, r] = m
    return xn, Pn, y, s


@njit(cache=True)
def output_row(x, p, osoc, ovolt):
    C = np.empty(4)
    C[0] = secant_slope(osoc, ovolt, x[0])
    C[1] = -p[R1]
    C[2] = -p[R2]
    C[3] = p[M]
    return C


@njit(cache=True)
def sensitivities(x, i, p, dt, q, eta):
    """State-update derivatives w.r.t. (q, tau1, tau2, gamma) and w.r.t. current.

    Returns J (4, 4) with columns q, tau1, tau2, gamma and b (4,).
    """
    ir1, ir2, h = x[1], x[2], x[3]
    tau1 = p[TAU1]
    tau2 = p[TAU2]
    gamma = p[GAMMA]
    a1 = math.exp(-dt / tau1)
    a2 = math.exp(-dt / tau2)
    rate = abs(i * eta * gamma * dt / q)
    ah = math.exp(-rate)
    s = sgn(i)
    J = np.zeros((4, 4))
    # d/dq
    J[0, 0] = eta * dt * i / (q * q)
    J[3, 0] = ah * rate / q * (h + s)
    # d/dtau_j
    J[1, 1] = (ir1 - i) * a1 * dt / (tau1 * tau1)
    J[2, 2] = (ir2 - i) * a2 * dt / (tau2 * tau2)
    # d/dgamma
    J[3, 3] = -ah * abs(i * eta * dt / q) * (h + s)
    b = np.zeros(4)
    b[0] = -eta * dt / q
    b[1] = 1.0 - a1
    b[2] = 1.0 - a2
    b[3] = -ah * eta * gamma * dt / q * s * (h + s)
    return J, b


VAR_R0, VAR_R1, VAR_R2, VAR_TAU1, VAR_TAU2, VAR_M, VAR_Q, VAR_GAMMA, VAR_OCV = range(9)
N_VARS = 9


@njit(cache=True)
def adaptive_noise(x, i, p, var, dt, q, eta, current_var, sensor_var):
    """First-order propagation of parameter and current uncertainty.

    ``var`` holds variances ordered as the VAR_* constants, already
    interpolated at the operating SOC.
    """
    J, b = sensitivities(x, i, p, dt, q, eta)
    d = np.empty(4)
    d[0] = var[VAR_Q]
    d[1] = var[VAR_TAU1]
    d[2] = var[VAR_TAU2]
    d[3] = var[VAR_GAMMA]
    Sw = np.zeros((4, 4))
    for r in range(4):
        for c in range(4):
            acc = b[r] * current_var * b[c]
            for t in range(4):
                acc += J[r, t] * d[t] * J[c, t]
            Sw[r, c] = acc
    sv = sensor_var
    sv += i * i * var[VAR_R0]
    sv += x[1] * x[1] * var[VAR_R1]
    sv += x[2] * x[2] * var[VAR_R2]
    sv += x[3] * x[3] * var[VAR_M]
    sv += var[VAR_OCV]
    return Sw, sv


SCHEME_COULOMB = 0
SCHEME_CONSTANT = 1
SCHEME_ADAPTIVE = 2


@njit(cache=True)
def run_estimator(scheme, power, vmeas, x0, P0, bp, tab, osoc, ovolt, dt, q, eta,
                  Sw_const, sv_const, vbp, vtab, current_var, sensor_var):
    """Power-driven SOC estimation loop.

    Per sample: solve the model current from the measured power at the prior
    estimate, correct with the measured voltage (EKF schemes), then propagate.
    Returns posterior states (n, 4), current estimates, flags, P traces of z.
    """
    n = power.shape[0]
    xs = np.zeros((n, 4))
    cur = np.zeros(n)
    zsd = np.zeros(n)
    flags = np.zeros(n, dtype=np.int8)
    p = np.zeros(tab.shape[1])
    var = np.zeros(vtab.shape[1])
    x = x0.copy()
    P = P0.copy()
    for k in range(n):
        interp_row(bp, tab, x[0], p)
        voc = interp1(osoc, ovolt, x[0])
        emf = open_circuit_emf(p, voc, x[1], x[2], x[3])
        i, bad = power_current(emf, p[R0], power[k])
        if bad:
            flags[k] |= 1
        if scheme == SCHEME_ADAPTIVE:
            interp_row(vbp, vtab, x[0], var)
            Sw, sv = adaptive_noise(x, i, p, var, dt, q, eta, current_var, sensor_var)
        else:
            Sw = Sw_const
            sv = sv_const
        if scheme != SCHEME_COULOMB:
            C = output_row(x, p, osoc, ovolt)
            vpred = emf - p[R0] * i
            x, P, y, s = ekf_update(x, P, vmeas[k], vpred, C, sv)
            if not (s > 0.0):
                flags[k] |= 2
            # parameters follow the corrected SOC for the propagation
            interp_row(bp, tab, x[0], p)
        xs[k] = x
        cur[k] = i
        zsd[k] = math.sqrt(max(P[0, 0], 0.0))
        if scheme == SCHEME_COULOMB:
            z, ir1, ir2, h = step(x[0], x[1], x[2], x[3], i, p[TAU1], p[TAU2], p[GAMMA], dt, q, eta)
            x[0] = z
            x[1] = ir1
            x[2] = ir2
            x[3] = h
        else:
            if scheme == SCHEME_ADAPTIVE:
                Sw, sv = adaptive_noise(x, i, p, var, dt, q, eta, current_var, sensor_var)
            x, P = ekf_predict(x, P, i, p, dt, q, eta, Sw)
    return xs, cur, zsd, flags
