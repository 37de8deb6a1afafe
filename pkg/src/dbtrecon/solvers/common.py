"""Objective, regularisation schedule and bookkeeping shared by the solvers."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Callable, Optional, Union

import numpy as np

from ..regularizers import RegularizerConfig, grad_tv_beta, tv, tv_beta

__all__ = [
    "SolverError",
    "Problem",
    "IterationRecord",
    "ReconstructionResult",
    "objective",
    "objective_gradient",
    "lambda_schedule",
    "LambdaSchedule",
    "check_stop",
    "initial_volume",
]

log = logging.getLogger(__name__)

Callback = Callable[[int, np.ndarray], None]


class SolverError(RuntimeError):
    """Numerical failure inside a solver (non-finite objective, stalled line search)."""


@dataclass
class Problem:
    """Regularised least-squares problem ``||M x - b||^2 + lam * TV_beta(x)``.

    Parameters
    ----------
    operator : Projector or DenseOperator
        Anything exposing ``forward``, ``adjoint``, ``vol_shape`` and
        ``data_shape``.
    data : ndarray
        Measured line integrals ``b``.
    reg : RegularizerConfig
    lam : float or "auto"
        Fixed regularisation weight, or ``"auto"`` for the decreasing
        schedule of :func:`lambda_schedule`.
    lambda_tv : {"tv", "tv_beta"}
        Which total variation enters the first scheduled weight.
    lambda_fallback : float
        Weight used by the schedule when the first iterate has zero TV.
    """

    operator: object
    data: np.ndarray
    reg: RegularizerConfig = field(default_factory=RegularizerConfig)
    lam: Union[float, str] = 0.005
    lambda_tv: str = "tv"
    lambda_fallback: float = 0.005

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != tuple(self.operator.data_shape):
            raise ValueError(f"data shape {self.data.shape} does not match operator "
                             f"{tuple(self.operator.data_shape)}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("data contains non-finite values")
        if isinstance(self.lam, str):
            if self.lam != "auto":
                raise ValueError(f"lam must be a number or 'auto', got {self.lam!r}")
        elif not self.lam >= 0:
            raise ValueError(f"lam must be non-negative, got {self.lam}")
        if self.lambda_tv not in ("tv", "tv_beta"):
            raise ValueError("lambda_tv must be 'tv' or 'tv_beta'")

    @property
    def automatic(self) -> bool:
        return self.lam == "auto"

    @property
    def vol_shape(self):
        return tuple(self.operator.vol_shape)

    def least_squares(self, x) -> float:
        r = self.operator.forward(x) - self.data
        return float(np.vdot(r, r))


def objective(x: np.ndarray, p: Problem, lam: float) -> float:
    return p.least_squares(x) + lam * tv_beta(x, p.reg)


def objective_gradient(x: np.ndarray, p: Problem, lam: float) -> np.ndarray:
    """``2 M^T (M x - b) + lam * grad TV_beta(x)``."""
    op = p.operator
    g = 2.0 * op.adjoint(op.forward(x) - p.data)
    if lam:
        g += lam * grad_tv_beta(x, p.reg)
    return g


def _first_lambda(x1: np.ndarray, p: Problem) -> Optional[float]:
    ls = p.least_squares(x1)
    total = tv(x1, p.reg.weights) if p.lambda_tv == "tv" else tv_beta(x1, p.reg)
    if total == 0.0:
        return None
    return math.sqrt(ls) / total


def lambda_schedule(k: int, x1: Optional[np.ndarray], p: Problem) -> float:
    """Regularisation weight used to compute iterate ``k + 1``.

    ``0`` at ``k = 0``, ``sqrt(LS(x1)) / TV(x1)`` at ``k = 1`` and that value
    divided by ``k`` afterwards.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0:
        return 0.0
    if x1 is None:
        raise ValueError("the first iterate is required for k >= 1")
    lam1 = _first_lambda(x1, p)
    if lam1 is None:
        log.warning("first iterate has zero total variation; using fixed lambda %g",
                    p.lambda_fallback)
        return p.lambda_fallback
    return lam1 / k if k >= 2 else lam1


class LambdaSchedule:
    """Per-iteration weights for a solver run, fixed or automatic."""

    def __init__(self, p: Problem):
        self.p = p
        self.lam1: Optional[float] = None
        self.fallback = False

    def __call__(self, k: int) -> float:
        p = self.p
        if not p.automatic:
            return float(p.lam)
        if k == 0:
            return 0.0
        if self.lam1 is None:
            raise RuntimeError("observe the first iterate before asking for k >= 1")
        return self.lam1 if self.fallback or k == 1 else self.lam1 / k

    def observe_first(self, x1: np.ndarray) -> None:
        if not self.p.automatic or self.lam1 is not None:
            return
        lam1 = _first_lambda(x1, self.p)
        if lam1 is None:
            log.warning("first iterate has zero total variation; using fixed lambda %g",
                        self.p.lambda_fallback)
            self.lam1, self.fallback = self.p.lambda_fallback, True
        else:
            self.lam1 = lam1


def check_stop(f_k: float, f_prev: float, tol: float) -> bool:
    """True when the relative objective change drops strictly below ``tol``.

    The ratio is evaluated in decimal on the shortest repr of each input, so
    ``check_stop(1.0, 1.000001, 1e-6)`` sees a ratio of exactly ``1e-6``
    rather than the binary ``9.99999999917733e-07``.
    """
    if f_k == 0.0:
        return True
    fk, fp, t = (Decimal(repr(float(v))) for v in (f_k, f_prev, tol))
    if not (fk.is_finite() and fp.is_finite()):
        return False
    return abs(fk - fp) / abs(fk) < t


@dataclass
class IterationRecord:
    k: int
    f: float
    ls: float
    tv: float
    lam: float
    alpha: float = math.nan
    backtracks: int = 0
    budget: int = 0


@dataclass
class ReconstructionResult:
    volume: np.ndarray
    history: list[IterationRecord]
    termination_reason: str
    info: dict = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        return len(self.history) - 1

    @property
    def objective_values(self) -> np.ndarray:
        return np.array([r.f for r in self.history])


def initial_volume(p: Problem, kind: str = "backprojection") -> np.ndarray:
    """Non-negative starting volume.

    ``"backprojection"`` returns ``c * M^T b`` with the scalar ``c >= 0`` that
    best fits the data in the least-squares sense, ``"uniform"`` the constant
    volume fitted the same way and ``"zeros"`` the zero volume.
    """
    if kind == "zeros":
        return np.zeros(p.vol_shape)
    if kind == "uniform":
        bp = np.ones(p.vol_shape)
    elif kind == "backprojection":
        bp = np.clip(p.operator.adjoint(p.data), 0.0, None)
    else:
        raise ValueError(f"unknown initialisation {kind!r}")
    fbp = p.operator.forward(bp)
    denom = float(np.vdot(fbp, fbp))
    if denom == 0.0:
        return np.zeros(p.vol_shape)
    return bp * max(float(np.vdot(fbp, p.data)) / denom, 0.0)


def make_record(k, p: Problem, x, ls, lam, **extra) -> IterationRecord:
    tvb = tv_beta(x, p.reg)
    return IterationRecord(k=k, f=ls + lam * tvb, ls=ls, tv=tv(x, p.reg.weights),
                           lam=lam, **extra)
