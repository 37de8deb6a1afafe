"""Chambolle-Pock primal-dual iteration for TV-regularised reconstruction."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..regularizers import GradientField, divergence_adjoint, estimate_operator_norm, spatial_gradient
from .common import (
    LambdaSchedule,
    Problem,
    ReconstructionResult,
    SolverError,
    check_stop,
    initial_volume,
    make_record,
)

__all__ = ["CpOptions", "cp_reconstruct", "project_dual_tv"]

PROX_VARIANTS = ("least-squares", "shrinkage")


@dataclass(frozen=True)
class CpOptions:
    """Tuning of :func:`cp_reconstruct`.

    ``prox_variant="least-squares"`` uses the exact conjugate prox of
    ``||. - b||^2``. ``"shrinkage"`` applies the shrinkage
    ``max(|y| - sigma * epsilon, 0) y / |y|`` to the whole data dual, which
    belongs to an epsilon-ball data constraint instead.
    """

    theta: float = 1.0
    epsilon: float = 0.0
    power_iters: int = 2
    max_iter: int = 500
    tol: float = 0.0
    prox_variant: str = "least-squares"

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.power_iters < 1:
            raise ValueError("power_iters must be >= 1")
        if self.prox_variant not in PROX_VARIANTS:
            raise ValueError(f"prox_variant must be one of {PROX_VARIANTS}")


def project_dual_tv(w: GradientField, lam: float) -> GradientField:
    """Scale each voxel's 3-vector back into the ball of radius ``lam``."""
    if lam == 0:
        return GradientField(np.zeros_like(w.gx), np.zeros_like(w.gy), np.zeros_like(w.gz))
    norm = np.sqrt(w.magnitude_sq())
    return w.scaled(lam / np.maximum(lam, norm))


def cp_reconstruct(p: Problem, opts: CpOptions = CpOptions(),
                   x0: Optional[np.ndarray] = None, callback=None,
                   gamma: Optional[float] = None) -> ReconstructionResult:
    """Minimise ``||M x - b||^2 + lam TV(x)`` over ``x >= 0``.

    The operator ``K = [M; grad]`` is split between a data dual ``y`` and a
    TV dual ``w``. Step sizes are ``tau = sigma = 1 / Gamma`` with ``Gamma``
    from ``opts.power_iters`` power iterations unless given explicitly.
    The extrapolated point, ``y`` and ``w`` all start at zero.

    The history objective is the smoothed one, ``||M x - b||^2 + lam
    TV_beta(x)``, so runs of different solvers can be compared directly.
    ``info["dual_tv_max"]`` holds the largest per-voxel norm of ``w`` after
    each iteration.
    """
    op, b, reg = p.operator, p.data, p.reg
    weights = reg.weights
    x = initial_volume(p) if x0 is None else np.array(x0, dtype=np.float64)
    if np.any(x < 0):
        raise ValueError("x0 must be non-negative")
    if gamma is None:
        gamma = estimate_operator_norm(op, opts.power_iters, weights)
    if not gamma > 0:
        raise SolverError(f"operator norm estimate must be positive, got {gamma}")
    tau = sigma = 1.0 / gamma
    schedule = LambdaSchedule(p)

    y = np.zeros(op.data_shape)
    w = GradientField(*(np.zeros(p.vol_shape) for _ in range(3)))
    x_bar = np.zeros(p.vol_shape)
    m_xbar = np.zeros(op.data_shape)

    mx = op.forward(x)
    ls = float(np.vdot(mx - b, mx - b))
    history = [make_record(0, p, x, ls, schedule(0), budget=0)]
    dual_max = []
    reason = "max_iter"
    for k in range(opts.max_iter):
        lam = schedule(k)
        f_prev = history[-1].f if lam == history[-1].lam else make_record(k, p, x, ls, lam).f

        if opts.prox_variant == "least-squares":
            y = (y + sigma * (m_xbar - b)) / (1.0 + 0.5 * sigma)
        else:
            y_bar = y + sigma * (m_xbar - b)
            norm = float(np.linalg.norm(y_bar))
            y = (max(norm - sigma * opts.epsilon, 0.0) / norm) * y_bar if norm > 0 else y_bar

        g = spatial_gradient(x_bar, weights)
        w = project_dual_tv(GradientField(w.gx + sigma * g.gx, w.gy + sigma * g.gy,
                                          w.gz + sigma * g.gz), lam)
        dual_max.append(float(np.sqrt(w.magnitude_sq()).max()))

        x_new = np.clip(x - tau * (op.adjoint(y) + divergence_adjoint(w, weights)), 0.0, None)
        mx_new = op.forward(x_new)
        x_bar = x_new + opts.theta * (x_new - x)
        m_xbar = mx_new + opts.theta * (mx_new - mx)
        x, mx = x_new, mx_new

        ls = float(np.vdot(mx - b, mx - b))
        rec = make_record(k + 1, p, x, ls, lam, budget=k + 1)
        if not math.isfinite(rec.f):
            raise SolverError(f"non-finite objective at iteration {k + 1}")
        history.append(rec)
        if k == 0:
            schedule.observe_first(x)
        if callback is not None:
            callback(k + 1, x)
        if opts.tol > 0 and check_stop(rec.f, f_prev, opts.tol):
            reason = "converged"
            break

    return ReconstructionResult(x, history, reason,
                                info={"solver": "cp", "gamma": gamma, "tau": tau,
                                      "sigma": sigma, "lambda1": schedule.lam1,
                                      "dual_tv_max": dual_max})
