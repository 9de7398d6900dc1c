"""Riemannian conjugate gradient on the Stiefel manifold.

Hestenes-Stiefel update with projection transport, Armijo backtracking
line search, and restarts to steepest descent on non-descent directions
or every d*p iterations.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ParameterError
from .stiefel import inner, project_tangent, retract, transport

HS_DENOM_FLOOR = 1e-14


@dataclass
class RcgParams:
    max_iters: int = 50
    grad_tol: float = 1e-5
    armijo_c1: float = 1e-4
    backtrack_factor: float = 0.5
    max_backtracks: int = 30
    initial_step: float = 1.0
    seed: int = 0

    def validate(self):
        if self.max_iters < 1:
            raise ParameterError("max_iters must be >= 1")
        if not 0.0 < self.armijo_c1 < 1.0:
            raise ParameterError("armijo_c1 must be in (0, 1)")
        if not 0.0 < self.backtrack_factor < 1.0:
            raise ParameterError("backtrack_factor must be in (0, 1)")


@dataclass
class RcgTrace:
    costs: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    restarts: list = field(default_factory=list)
    converged: bool = False
    line_search_failed: bool = False

    def __len__(self):
        return len(self.costs)


def minimize(cost, euclid_grad, W0, params=None):
    """Minimize a scalar function over the Stiefel manifold from W0.

    cost maps a StiefelPoint to a scalar; euclid_grad returns the ambient
    d x p (sub)gradient at a StiefelPoint. Returns (W, RcgTrace).
    """
    params = params or RcgParams()
    params.validate()
    trace = RcgTrace()

    W = W0
    f = float(cost(W))
    if not np.isfinite(f):
        raise NumericalError("non-finite cost at the initial point", iteration=0)
    g = project_tangent(W, euclid_grad(W))
    gnorm = np.sqrt(max(inner(g, g), 0.0))
    if not np.isfinite(gnorm):
        raise NumericalError("non-finite gradient at the initial point", iteration=0)

    trace.costs.append(f)
    trace.grad_norms.append(gnorm)
    trace.steps.append(0.0)
    trace.restarts.append(False)
    if gnorm <= params.grad_tol:
        trace.converged = True
        return W, trace

    d = -g.matrix
    restart_period = W.d * W.p

    for it in range(1, params.max_iters + 1):
        restarted = False
        slope = inner(d, g)
        if slope >= 0.0 or it % restart_period == 0:
            d = -g.matrix
            slope = -gnorm * gnorm
            restarted = True

        t, W_new, f_new = _armijo(cost, W, d, f, slope, params)
        if t is None and not restarted:
            # CG direction stalled; one retry along steepest descent.
            d = -g.matrix
            slope = -gnorm * gnorm
            restarted = True
            t, W_new, f_new = _armijo(cost, W, d, f, slope, params)
        if t is None:
            trace.line_search_failed = True
            break

        g_new = project_tangent(W_new, euclid_grad(W_new))
        gnorm_new = np.sqrt(max(inner(g_new, g_new), 0.0))
        if not np.isfinite(f_new) or not np.isfinite(gnorm_new):
            raise NumericalError("non-finite cost or gradient", iteration=it)

        tg = transport(W, W_new, g)
        td = transport(W, W_new, d)
        y = g_new.matrix - tg.matrix
        denom = inner(td, y)
        if denom <= HS_DENOM_FLOOR:
            beta = 0.0
        else:
            beta = inner(g_new, y) / denom
        d_next = -g_new.matrix + beta * td.matrix
        if inner(d_next, g_new) >= 0.0:
            d_next = -g_new.matrix
            beta = 0.0

        W, f, g, gnorm, d = W_new, f_new, g_new, gnorm_new, d_next
        trace.costs.append(f)
        trace.grad_norms.append(gnorm)
        trace.steps.append(t)
        trace.restarts.append(restarted or beta == 0.0)

        if gnorm <= params.grad_tol:
            trace.converged = True
            break

    return W, trace


def _armijo(cost, W, d, f, slope, params):
    """Backtracking line search; returns (t, W_new, f_new) or (None, None, None).

    Once a step passes the sufficient-decrease test, the next-smaller step
    is probed as well and the lower of the two is kept: the first accepted
    step can straddle the minimizer with a barely-sufficient decrease, and
    the halved step escapes that oscillation at one extra cost evaluation.
    """
    t = params.initial_step
    for _ in range(params.max_backtracks + 1):
        W_trial = retract(W, d, t)
        f_trial = float(cost(W_trial))
        if np.isfinite(f_trial) and f_trial <= f + params.armijo_c1 * t * slope:
            t_half = t * params.backtrack_factor
            W_half = retract(W, d, t_half)
            f_half = float(cost(W_half))
            if np.isfinite(f_half) and f_half < f_trial:
                return t_half, W_half, f_half
            return t, W_trial, f_trial
        t *= params.backtrack_factor
    return None, None, None
