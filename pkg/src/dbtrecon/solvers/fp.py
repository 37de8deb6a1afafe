"""Lagged-diffusivity fixed point iteration with an inner conjugate gradient solve."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from ..regularizers import apply_diffusion, diffusion_weights, grad_tv_beta, tv_beta
from .common import (
    LambdaSchedule,
    Problem,
    ReconstructionResult,
    SolverError,
    check_stop,
    initial_volume,
    make_record,
)

__all__ = ["FpOptions", "cg_solve", "fp_hessian", "fp_reconstruct"]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FpOptions:
    outer_iter: int = 3
    cg_iter: int = 4
    tol: float = 0.0

    def __post_init__(self):
        if self.cg_iter < 1:
            raise ValueError("cg_iter must be >= 1")
        if self.outer_iter < 0:
            raise ValueError("outer_iter must be >= 0")

    @property
    def cost_per_outer(self) -> int:
        return self.cg_iter + 1

    @property
    def budget(self) -> int:
        """Work counted as outer plus inner iterations."""
        return self.outer_iter * self.cost_per_outer

    @classmethod
    def for_budget(cls, budget: int, cg_iter: int = 4, tol: float = 0.0) -> "FpOptions":
        """Largest number of outer steps whose total work fits in ``budget``."""
        return cls(outer_iter=budget // (cg_iter + 1), cg_iter=cg_iter, tol=tol)


def cg_solve(apply_h: Callable[[np.ndarray], np.ndarray], rhs: np.ndarray, iters: int,
             atol: float = 1e-12) -> np.ndarray:
    """Run ``iters`` conjugate gradient steps on ``H d = rhs`` from ``d = 0``.

    ``H`` is only touched through ``apply_h``. Stops early when the residual
    norm drops below ``atol``; on a non-positive curvature ``p^T H p`` the
    current iterate is returned.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    d = np.zeros_like(rhs, dtype=np.float64)
    r = np.array(rhs, dtype=np.float64)
    p = r.copy()
    rr = float(np.vdot(r, r))
    for _ in range(iters):
        if math.sqrt(rr) < atol:
            break
        hp = apply_h(p)
        curv = float(np.vdot(p, hp))
        if curv <= 0:
            log.warning("conjugate gradient breakdown: p^T H p = %g", curv)
            break
        a = rr / curv
        d += a * p
        r -= a * hp
        rr_new = float(np.vdot(r, r))
        p = r + (rr_new / rr) * p
        rr = rr_new
    return d


def fp_hessian(p: Problem, x_lag: np.ndarray, lam: float):
    """Return ``v -> M^T M v + (lam / 2) L(x_lag) v``.

    This is half the Hessian of the quadratic majoriser of the objective at
    ``x_lag``, matched to the half gradient used as right-hand side.
    """
    op, reg = p.operator, p.reg
    w = diffusion_weights(x_lag, reg) if lam else None

    def apply_h(v):
        out = op.adjoint(op.forward(v))
        if lam:
            out += 0.5 * lam * apply_diffusion(x_lag, v, reg, weights=w)
        return out

    return apply_h


def fp_reconstruct(p: Problem, opts: FpOptions = FpOptions(),
                   x0: Optional[np.ndarray] = None, callback=None) -> ReconstructionResult:
    """Lagged-diffusivity fixed point for ``||M x - b||^2 + lam TV_beta(x)``.

    Every outer step solves ``H_k d = -g / 2`` approximately with
    ``opts.cg_iter`` conjugate gradient steps and sets ``x <- x + d``.
    Iterates are unconstrained; the returned volume is projected onto
    ``x >= 0``. ``callback(k, x)`` receives the projected iterate.
    History records carry ``budget = k * (cg_iter + 1)``.
    """
    op, b, reg = p.operator, p.data, p.reg
    x = initial_volume(p) if x0 is None else np.array(x0, dtype=np.float64)
    if np.any(x < 0):
        raise ValueError("x0 must be non-negative")
    schedule = LambdaSchedule(p)

    resid = op.forward(x) - b
    ls = float(np.vdot(resid, resid))
    history = [make_record(0, p, x, ls, schedule(0), budget=0)]
    reason = "max_iter"
    for k in range(opts.outer_iter):
        lam = schedule(k)
        f = ls + lam * tv_beta(x, reg)
        g = 2.0 * op.adjoint(resid)
        if lam:
            g += lam * grad_tv_beta(x, reg)
        d = cg_solve(fp_hessian(p, x, lam), -0.5 * g, opts.cg_iter)
        x = x + d
        resid = op.forward(x) - b
        ls = float(np.vdot(resid, resid))
        rec = make_record(k + 1, p, x, ls, lam, budget=(k + 1) * opts.cost_per_outer)
        if not math.isfinite(rec.f):
            raise SolverError(f"non-finite objective at outer iteration {k + 1}")
        history.append(rec)
        if k == 0:
            schedule.observe_first(x)
        if callback is not None:
            callback(k + 1, np.clip(x, 0.0, None))
        if opts.tol > 0 and check_stop(rec.f, f, opts.tol):
            reason = "converged"
            break

    return ReconstructionResult(np.clip(x, 0.0, None), history, reason,
                                info={"solver": "fp", "lambda1": schedule.lam1,
                                      "budget": history[-1].budget,
                                      "unprojected": x})

