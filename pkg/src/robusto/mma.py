"""Method of Moving Asymptotes for one inequality constraint.

Each outer iteration replaces the objective and constraint by separable
convex approximations ``sum p_j/(U_j - x_j) + q_j/(x_j - L_j)`` around the
current design and minimizes the approximation by maximizing its concave
dual over the single constraint multiplier (bisection on a monotone
function).  The optional conservative mode adds the CCSA inner loop that
raises the approximation curvature until both approximations overestimate
the true functions at the new point.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

logger = logging.getLogger(__name__)


class MmaError(RuntimeError):
    pass


@dataclass
class MmaConfig:
    max_iters: int = 300
    change_tol: float = 1e-3
    move_limit: float = 0.2
    asyinit: float = 0.5
    asyincr: float = 1.2
    asydecr: float = 0.7
    asymin: float = 0.01
    asymax: float = 10.0
    raa0: float = 1e-5
    conservative: bool = False
    max_inner: int = 10


@dataclass
class Evaluation:
    """Objective ``f``, constraint ``g <= 0`` and their gradients at a design."""

    f: float
    df: np.ndarray
    g: float
    dg: np.ndarray
    info: dict = field(default_factory=dict)


@dataclass
class MmaState:
    x: np.ndarray
    xmin: np.ndarray
    xmax: np.ndarray
    low: np.ndarray = None
    upp: np.ndarray = None
    xold1: np.ndarray = None
    xold2: np.ndarray = None
    iteration: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).copy()
        n = self.x.size
        self.xmin = np.broadcast_to(np.asarray(self.xmin, dtype=float), (n,)).copy()
        self.xmax = np.broadcast_to(np.asarray(self.xmax, dtype=float), (n,)).copy()
        if self.xold1 is None:
            self.xold1 = self.x.copy()
        if self.xold2 is None:
            self.xold2 = self.x.copy()


def update_asymptotes(state: MmaState, config: MmaConfig = MmaConfig()) -> MmaState:
    """Move the asymptotes for the next subproblem (``state.iteration`` counts solved ones).

    The first two subproblems use ``x -+ asyinit * (xmax - xmin)``.  Later,
    coordinates whose last two steps point in opposite directions get their
    asymptotes pulled in by ``asydecr``; monotone ones are pushed out by
    ``asyincr``.  Distances are clamped to ``[asymin, asymax] * width``.
    """
    x, width = state.x, state.xmax - state.xmin
    if state.iteration < 2:
        state.low = x - config.asyinit * width
        state.upp = x + config.asyinit * width
    else:
        trend = (x - state.xold1) * (state.xold1 - state.xold2)
        factor = np.ones_like(x)
        factor[trend > 0] = config.asyincr
        factor[trend < 0] = config.asydecr
        state.low = x - factor * (state.xold1 - state.low)
        state.upp = x + factor * (state.upp - state.xold1)
    state.low = np.clip(state.low, x - config.asymax * width, x - config.asymin * width)
    state.upp = np.clip(state.upp, x + config.asymin * width, x + config.asymax * width)
    return state


@dataclass
class SubproblemInfo:
    lam: float
    approx_constraint: float
    bracket_ok: bool
    bisections: int


def _approx_terms(grad, ux, xl, width, raa):
    pos, neg = np.maximum(grad, 0.0), np.maximum(-grad, 0.0)
    pq = 0.001 * (pos + neg) + raa / np.maximum(width, 1e-5)
    return (pos + pq) * ux**2, (neg + pq) * xl**2


def solve_subproblem(x, grad_f, g, grad_g, low, upp, xmin, xmax, move_limit=0.2,
                     raa0=1e-5, raa_g=None, tol=1e-14):
    """Minimize the MMA approximation subject to the approximated constraint.

    Returns ``(x_new, info)``.  The constraint approximation overestimates
    a linear constraint, so ``x_new`` is feasible for it whenever the dual
    bracket succeeded.
    """
    x = np.asarray(x, dtype=float)
    width = np.asarray(xmax, dtype=float) - np.asarray(xmin, dtype=float)
    ux, xl = upp - x, x - low
    p0, q0 = _approx_terms(np.asarray(grad_f, dtype=float), ux, xl, width, raa0)
    p1, q1 = _approx_terms(np.asarray(grad_g, dtype=float), ux, xl, width,
                           raa0 if raa_g is None else raa_g)
    b = np.sum(p1 / ux + q1 / xl) - g
    alpha = np.maximum.reduce([np.broadcast_to(xmin, x.shape), low + 0.1 * xl, x - move_limit])
    beta = np.minimum.reduce([np.broadcast_to(xmax, x.shape), upp - 0.1 * ux, x + move_limit])

    def primal(lam):
        sp_, sq = np.sqrt(p0 + lam * p1), np.sqrt(q0 + lam * q1)
        y = (sp_ * low + sq * upp) / (sp_ + sq)
        return np.clip(y, alpha, beta)

    def approx_g(y):
        return float(np.sum(p1 / (upp - y) + q1 / (y - low)) - b)

    y = primal(0.0)
    if approx_g(y) <= 0.0:
        return y, SubproblemInfo(0.0, approx_g(y), True, 0)
    lo, hi = 0.0, 1.0
    while approx_g(primal(hi)) > 0.0:
        lo, hi = hi, hi * 2.0
        if hi > 1e40:
            y = primal(hi)
            logger.warning("MMA dual bracket failed; approx constraint %.3e", approx_g(y))
            return y, SubproblemInfo(hi, approx_g(y), False, 0)
    count = 0
    while hi - lo > tol * hi and count < 200:
        mid = 0.5 * (lo + hi)
        if approx_g(primal(mid)) > 0.0:
            lo = mid
        else:
            hi = mid
        count += 1
    y = primal(hi)
    return y, SubproblemInfo(hi, approx_g(y), True, count)


def _approx_value(fx, grad, x, y, low, upp, width, raa):
    ux, xl = upp - x, x - low
    p, q = _approx_terms(grad, ux, xl, width, raa)
    return fx + float(np.sum(p / (upp - y) + q / (y - low) - p / ux - q / xl))


def run(evaluate: Callable[[np.ndarray], Evaluation], x0, xmin, xmax,
        config: MmaConfig = MmaConfig(), on_iteration: Callable | None = None):
    """Optimize until the design change drops below ``change_tol``.

    ``on_iteration(k, x, evaluation, record)`` is called for ``k = 0`` (the
    initial design) and after every accepted update.  Returns
    ``(x, history)`` where ``history`` holds one record per evaluated design.
    """
    state = MmaState(x0, xmin, xmax)
    width = state.xmax - state.xmin

    def record(k, ev, change):
        rec = {"iter": k, "objective": ev.f, "constraint": ev.g, "design_change_inf": change}
        rec.update(ev.info)
        if not math.isfinite(ev.f):
            raise MmaError(f"objective is not finite at iteration {k}")
        state.history.append(rec)
        if on_iteration is not None:
            on_iteration(k, state.x, ev, rec)

    try:
        ev = evaluate(state.x)
    except Exception as exc:
        raise MmaError(f"evaluation failed at iteration 0: {exc}") from exc
    scale = abs(ev.f) if ev.f != 0 else 1.0
    record(0, ev, float("nan"))

    for k in range(1, config.max_iters + 1):
        update_asymptotes(state, config)
        raa_f = raa_g = config.raa0
        for _ in range(config.max_inner if config.conservative else 1):
            x_new, info = solve_subproblem(
                state.x, ev.df / scale, ev.g, ev.dg, state.low, state.upp, state.xmin,
                state.xmax, config.move_limit, raa_f, raa_g)
            try:
                ev_new = evaluate(x_new)
            except Exception as exc:
                raise MmaError(f"evaluation failed at iteration {k}: {exc}") from exc
            if not config.conservative:
                break
            f_apx = _approx_value(ev.f / scale, ev.df / scale, state.x, x_new, state.low,
                                  state.upp, width, raa_f)
            g_apx = _approx_value(ev.g, ev.dg, state.x, x_new, state.low, state.upp, width, raa_g)
            ok_f = ev_new.f / scale <= f_apx + 1e-12
            ok_g = ev_new.g <= g_apx + 1e-12
            if ok_f and ok_g:
                break
            raa_f = raa_f if ok_f else 10.0 * raa_f
            raa_g = raa_g if ok_g else 10.0 * raa_g
        state.xold2, state.xold1 = state.xold1, state.x
        state.x = x_new
        state.iteration = k
        change = float(np.max(np.abs(state.x - state.xold1)))
        ev = ev_new
        record(k, ev, change)
        if not info.bracket_ok:
            logger.warning("iteration %d: subproblem dual bracket failed", k)
        if change < config.change_tol:
            break
    return state.x, state.history
