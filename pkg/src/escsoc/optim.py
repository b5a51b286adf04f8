"""Small bounded optimisers used by the identification pipeline."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class LsqResult:
    x: np.ndarray
    cost: float                 # 0.5 * ||r||^2
    iterations: int             # accepted steps
    nfev: int
    converged: bool
    message: str
    at_lower: np.ndarray
    at_upper: np.ndarray


def fd_steps(x, rel_step=1e-6, abs_step=1e-9):
    """Per-parameter finite-difference steps max(rel*|x|, abs)."""
    return np.maximum(rel_step * np.abs(x), abs_step)


def central_jacobian(fun, x, r0=None, rel_step=1e-6, abs_step=1e-9):
    """Central-difference Jacobian with per-parameter step max(rel*|x|, abs)."""
    cols = []
    steps = fd_steps(x, rel_step, abs_step)
    for j in range(x.size):
        h = steps[j]
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        cols.append((fun(xp) - fun(xm)) / (2 * h))
    return np.column_stack(cols)


def bounded_lsq(fun, x0, lower, upper, jac=None, max_iter=200, xtol=1e-10, ftol=1e-8,
                gtol=1e-14, lam0=1e-3, normal=None):
    """Projected Levenberg-Marquardt for min 0.5*||fun(x)||^2 over a box.

    Works in box-normalised coordinates so parameters of very different
    scale (ohms and seconds) are treated alike.  Only cost-decreasing steps
    are accepted, so the residual norm is monotone over accepted iterations.
    Stops when the normalised step norm falls below ``xtol``, the relative
    cost decrease below ``ftol``, or after ``max_iter`` accepted steps.

    ``normal(x)``, if given, returns the Gauss-Newton pair ``(J.T @ J, J.T @ r)``
    directly and replaces ``jac``.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    width = upper - lower
    if np.any(width <= 0):
        raise ValueError("empty box")
    if jac is None:
        jac = lambda x, r: central_jacobian(fun, x, r)

    def unscale(u):
        return lower + u * width

    u = np.clip((np.asarray(x0, dtype=float) - lower) / width, 0.0, 1.0)
    r = fun(unscale(u))
    nfev = 1
    cost = 0.5 * float(r @ r)
    if not np.isfinite(cost):
        raise FloatingPointError("non-finite residual at the initial point")
    lam = lam0
    it = 0
    converged, message = False, "iteration cap reached"
    while it < max_iter:
        if normal is not None:
            JtJ, Jtr = normal(unscale(u))[:2]
            JtJ = JtJ * np.outer(width, width)
            g = Jtr * width
        else:
            J = jac(unscale(u), r) * width
            JtJ = J.T @ J
            g = J.T @ r
        nfev += 2 * u.size
        # variables pinned at a bound with the gradient pushing outward stay fixed
        free = ~(((u <= 0.0) & (g > 0)) | ((u >= 1.0) & (g < 0)))
        if not free.any() or np.max(np.abs(g[free])) <= gtol * max(1.0, cost):
            converged, message = True, "projected gradient below tolerance"
            break
        A = JtJ[np.ix_(free, free)]
        gf = g[free]
        diag = np.diag(A).copy()
        diag[diag <= 0] = 1e-30
        accepted = False
        for _ in range(40):
            try:
                d = np.linalg.solve(A + lam * np.diag(diag), -gf)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            trial = u.copy()
            trial[free] += d
            trial = np.clip(trial, 0.0, 1.0)
            step = trial - u
            snorm = float(np.linalg.norm(step))
            if snorm < xtol:
                converged, message = True, "step norm below tolerance"
                break
            rt = fun(unscale(trial))
            nfev += 1
            ct = 0.5 * float(rt @ rt)
            if np.isfinite(ct) and ct < cost:
                rel = (cost - ct) / cost
                u, r, cost = trial, rt, ct
                lam = max(lam / 3, 1e-12)
                it += 1
                accepted = True
                if rel < ftol:
                    converged, message = True, "relative cost decrease below tolerance"
                break
            lam *= 4
        if converged:
            break
        if not accepted:
            converged, message = True, "no decrease possible (stationary point)"
            break
    x = unscale(u)
    return LsqResult(x, cost, it, nfev, converged, message, u <= 0.0, u >= 1.0)


@dataclass
class ScalarResult:
    x: float
    fun: float
    nfev: int
    history: list               # (x, f) in evaluation order
    at_bound: bool


def golden_section(f, lo, hi, tol=1.0, max_evals=40, check_bounds=True):
    """Golden-section minimisation on [lo, hi] until the bracket is <= tol wide.

    With ``check_bounds`` both end points are evaluated after the search, so
    a minimiser sitting on a bound is returned exactly even when the
    objective is flat or multimodal inside the box.
    """
    invphi = (math.sqrt(5) - 1) / 2
    cache = {}
    history = []

    def ev(x):
        if x not in cache:
            if len(cache) >= max_evals:
                raise RuntimeError("evaluation budget exhausted")
            cache[x] = float(f(x))
            history.append((x, cache[x]))
        return cache[x]

    a, b = float(lo), float(hi)
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = ev(c), ev(d)
    reserve = 2 if check_bounds else 0
    while b - a > tol and len(cache) < max_evals - reserve:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = ev(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = ev(d)
    best = min(cache, key=lambda x: (cache[x], x))
    if check_bounds:
        for x in (float(lo), float(hi)):
            if ev(x) < cache[best]:
                best = x
    return ScalarResult(best, cache[best], len(cache), history, best in (float(lo), float(hi)))


@dataclass
class FixedPointResult:
    x: np.ndarray
    iterations: int             # evaluations of the map
    residual: float             # max |G(x) - x| at the last evaluation
    converged: bool


def anderson_fixed_point(G, x0, memory=5, tol=1e-7, max_iter=50, lower=None, upper=None, restart_growth=10.0):
    """Anderson-accelerated iteration x <- G(x) (type II, least-squares mixing).

    Iterates are clipped to [lower, upper].  The history is dropped when the
    residual grows ``restart_growth``-fold over the best seen, and the best
    point so far is returned.
    """
    x = np.asarray(x0, dtype=float).ravel().copy()
    shape = np.shape(x0)

    def clip(v):
        if lower is not None or upper is not None:
            v = np.clip(v, lower, upper)
        return v

    gx = G(x.reshape(shape)).ravel()
    f = gx - x
    best = (float(np.max(np.abs(f))), gx.copy())
    dG, dF = [], []
    n = 1
    while n < max_iter and best[0] > tol:
        if dF:
            Fm = np.column_stack(dF)
            coef, *_ = np.linalg.lstsq(Fm, f, rcond=None)
            x_new = gx - np.column_stack(dG) @ coef
        else:
            x_new = gx
        x_new = clip(x_new)
        g_new = G(x_new.reshape(shape)).ravel()
        n += 1
        f_new = g_new - x_new
        res = float(np.max(np.abs(f_new)))
        if res < best[0]:
            best = (res, g_new.copy())
        if res > restart_growth * best[0]:
            dG, dF = [], []
            x, gx, f = best[1], G(best[1].reshape(shape)).ravel(), None
            n += 1
            f = gx - x
            continue
        dG.append(g_new - gx)
        dF.append(f_new - f)
        if len(dF) > memory:
            dG.pop(0)
            dF.pop(0)
        x, gx, f = x_new, g_new, f_new
    return FixedPointResult(best[1].reshape(shape), n, best[0], best[0] <= tol)
