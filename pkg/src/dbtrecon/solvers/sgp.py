"""Scaled gradient projection with Barzilai-Borwein steps and Armijo backtracking."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..regularizers import grad_tv_beta, tv, tv_beta
from .common import (
    IterationRecord,
    LambdaSchedule,
    Problem,
    ReconstructionResult,
    SolverError,
    check_stop,
    initial_volume,
)

__all__ = ["SgpOptions", "scaling_entries", "scaling_bound", "bb_steplength", "sgp_reconstruct"]


@dataclass(frozen=True)
class SgpOptions:
    """Tuning of :func:`sgp_reconstruct`.

    ``alpha0=None`` starts with ``1.3 / max|g0|``. The scaling bound at
    iteration k is ``sqrt(1 + rho_scale / (k + 1)**2)``, which decreases
    towards 1. BB2 is used when ``BB2 / BB1 < bb_ratio``, BB1 otherwise.
    """

    gamma: float = 0.4
    sigma: float = 1e-4
    alpha_min: float = 1e-8
    alpha_max: float = 1e3
    alpha0: Optional[float] = None
    rho_scale: float = 1e8
    bb_ratio: float = 0.5
    max_iter: int = 500
    tol: float = 1e-6
    max_backtracks: int = 50
    scaling: bool = True

    def __post_init__(self):
        if not 0 < self.gamma < 1 or not 0 < self.sigma < 1:
            raise ValueError("gamma and sigma must lie in (0, 1)")
        if not 0 < self.alpha_min <= self.alpha_max:
            raise ValueError("need 0 < alpha_min <= alpha_max")
        if self.rho_scale <= 0:
            raise ValueError("rho_scale must be positive")


def scaling_bound(k: int, opts: SgpOptions) -> float:
    return math.sqrt(1.0 + opts.rho_scale / (k + 1) ** 2)


def scaling_entries(x: np.ndarray, v: np.ndarray, rho: float) -> np.ndarray:
    """Diagonal of the scaling matrix, ``x / V`` clipped to ``[1/rho, rho]``.

    ``v`` is the strictly positive part ``V`` of the gradient splitting
    ``grad f = V - U``.
    """
    if rho <= 1:
        raise ValueError("rho must exceed 1")
    return np.clip(x / v, 1.0 / rho, rho)


def _gradient_split_positive(mtmx, lam_gtv, floor):
    # V of grad f = V - U: 2 M^T M x plus the positive part of the TV term
    return 2.0 * mtmx + np.clip(lam_gtv, 0.0, None) + floor


def bb_steplength(s_prev, y_prev, scaling, opts: SgpOptions, k: int,
                  alpha0: Optional[float] = None) -> float:
    """Alternating scaled Barzilai-Borwein step length.

    With ``D = S^{-1}``::

        BB1 = <D s, D s> / <D s, y>        BB2 = <S y, s> / <S y, S y>

    Non-positive curvature yields ``alpha_max``. The result is clamped to
    ``[alpha_min, alpha_max]``; iteration 0 returns ``alpha0``.
    """
    if k == 0:
        a = opts.alpha0 if alpha0 is None else alpha0
        if a is None:
            raise ValueError("alpha0 required at the first iteration")
        return float(np.clip(a, opts.alpha_min, opts.alpha_max))
    ds = s_prev / scaling
    sy = y_prev * scaling
    c1 = float(np.vdot(ds, y_prev))
    c2 = float(np.vdot(sy, s_prev))
    if c1 <= 0 or c2 <= 0:
        return opts.alpha_max
    bb1 = float(np.vdot(ds, ds)) / c1
    bb2 = c2 / float(np.vdot(sy, sy))
    alpha = bb2 if bb2 / bb1 < opts.bb_ratio else bb1
    return float(np.clip(alpha, opts.alpha_min, opts.alpha_max))


def sgp_reconstruct(p: Problem, opts: SgpOptions = SgpOptions(),
                    x0: Optional[np.ndarray] = None, callback=None) -> ReconstructionResult:
    """Minimise ``||M x - b||^2 + lam TV_beta(x)`` over ``x >= 0``.

    Each iteration costs one forward and one back projection: the data
    residual along the search direction is updated linearly, so Armijo
    backtracking never projects again.

    Parameters
    ----------
    p : Problem
    opts : SgpOptions
    x0 : ndarray, optional
        Non-negative start; defaults to the rescaled back-projection.
    callback : callable, optional
        Called as ``callback(k, x)`` after iterate ``k`` is formed.
    """
    op, b, reg = p.operator, p.data, p.reg
    x = initial_volume(p) if x0 is None else np.array(x0, dtype=np.float64)
    if np.any(x < 0):
        raise ValueError("x0 must be non-negative")
    schedule = LambdaSchedule(p)
    mtb = op.adjoint(b)

    resid = op.forward(x) - b
    ls = float(np.vdot(resid, resid))
    tvb = tv_beta(x, reg)
    g_ls = 2.0 * op.adjoint(resid)
    g_tv = grad_tv_beta(x, reg)
    lam = schedule(0)
    history = [IterationRecord(0, ls + lam * tvb, ls, tv(x, reg.weights), lam, budget=0)]
    floor = 1e-12 * max(float(np.abs(mtb).max()), 1e-300)

    x_prev = g_prev_ls = g_prev_tv = None
    scale = np.ones_like(x)
    reason = "max_iter"
    for k in range(opts.max_iter):
        lam = schedule(k)
        f = ls + lam * tvb
        g = g_ls + lam * g_tv if lam else g_ls.copy()
        if not math.isfinite(f):
            raise SolverError(f"non-finite objective at iteration {k}")

        if opts.scaling:
            mtmx = 0.5 * g_ls + mtb
            v = _gradient_split_positive(mtmx, lam * g_tv, floor)
            scale = scaling_entries(x, v, scaling_bound(k, opts))
        if k == 0:
            gmax = float(np.abs(g).max())
            alpha = bb_steplength(None, None, scale, opts, 0,
                                  alpha0=opts.alpha0 if opts.alpha0 is not None
                                  else 1.3 / max(gmax, 1e-300))
        else:
            y = (g_ls - g_prev_ls) + lam * (g_tv - g_prev_tv)
            alpha = bb_steplength(x - x_prev, y, scale, opts, k)

        d = np.clip(x - alpha * scale * g, 0.0, None) - x
        slope = float(np.vdot(g, d))
        if not np.any(d) or slope >= 0:
            reason = "converged"
            break

        md = op.forward(d)
        eta, shrinks = 1.0, 0
        while True:
            resid_new = resid + eta * md
            x_new = x + eta * d
            ls_new = float(np.vdot(resid_new, resid_new))
            tvb_new = tv_beta(x_new, reg)
            f_new = ls_new + lam * tvb_new
            if f_new <= f + opts.sigma * eta * slope:
                break
            shrinks += 1
            if shrinks > opts.max_backtracks:
                raise SolverError(f"line search failed after {opts.max_backtracks} "
                                  f"reductions at iteration {k}")
            eta *= opts.gamma
        if not math.isfinite(f_new):
            raise SolverError(f"non-finite objective at iteration {k + 1}")

        x_prev, g_prev_ls, g_prev_tv = x, g_ls, g_tv
        x, resid, ls, tvb = x_new, resid_new, ls_new, tvb_new
        g_ls = 2.0 * op.adjoint(resid)
        g_tv = grad_tv_beta(x, reg)
        history.append(IterationRecord(k + 1, f_new, ls, tv(x, reg.weights), lam,
                                       alpha=alpha, backtracks=shrinks, budget=k + 1))
        if k == 0:
            schedule.observe_first(x)
        if callback is not None:
            callback(k + 1, x)
        if check_stop(f_new, f, opts.tol):
            reason = "converged"
            break

    return ReconstructionResult(x, history, reason,
                                info={"solver": "sgp", "lambda1": schedule.lam1})
