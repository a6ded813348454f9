"""Finite-difference gradient and Hessian of the misfit (baselines)."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .integrator import SolverConfig
from .likelihood import _check_problem, evaluate_misfit
from .reports import DerivativeReport, symmetrize

__all__ = ["FdConfig", "gradient_fd", "hessian_fd", "fd_steps"]

_EPS = np.finfo(float).eps
DEFAULT_GRADIENT_C = float(np.sqrt(_EPS))
# second differences divide by h², so the step balancing truncation against
# rounding is much larger than for first differences
DEFAULT_HESSIAN_C = float(_EPS ** (1 / 3))


@dataclass(frozen=True)
class FdConfig:
    """Step rule ``h_i = c * max(|theta_i|, 1)``.

    ``c=None`` picks the default for the quantity being approximated.
    """

    scheme: str = "forward"
    c: Optional[float] = None

    def __post_init__(self):
        if self.scheme not in ("forward", "central"):
            raise ValueError("scheme must be 'forward' or 'central'")
        if self.c is not None and not (np.isfinite(self.c) and self.c > 0):
            raise ValueError("c must be positive")


def fd_steps(theta, c: float) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    return c * np.maximum(np.abs(theta), 1.0)


class _Counter:
    def __init__(self, model, obs, metric, P, cfg):
        self.args = (model, obs, metric, P)
        self.cfg = cfg
        self.n = 0
        self.cost = 0

    def __call__(self, theta):
        res = evaluate_misfit(*self.args, theta, self.cfg)
        self.n += 1
        self.cost += res.cost
        return res.value


def gradient_fd(model, obs, metric, P, theta, fdcfg: FdConfig = FdConfig(),
                cfg: SolverConfig = SolverConfig()) -> DerivativeReport:
    """Forward (``p + 1`` misfits) or central (``2p`` misfits) differences."""
    start = time.perf_counter()
    _check_problem(model, obs, metric, P)
    theta = np.asarray(theta, dtype=float)
    p = theta.size
    h = fd_steps(theta, DEFAULT_GRADIENT_C if fdcfg.c is None else fdcfg.c)
    J = _Counter(model, obs, metric, P, cfg)
    eye = np.eye(p)
    grad = np.empty(p)
    if fdcfg.scheme == "forward":
        J0 = J(theta)
        for k in range(p):
            grad[k] = (J(theta + h[k] * eye[k]) - J0) / h[k]
    else:
        for k in range(p):
            grad[k] = (J(theta + h[k] * eye[k]) - J(theta - h[k] * eye[k])) / (2 * h[k])
    return DerivativeReport(
        grad, "fd", "gradient", time.perf_counter() - start, J.cost,
        {"misfit_evals": J.n, "scheme": fdcfg.scheme},
    )


def hessian_fd(model, obs, metric, P, theta, fdcfg: FdConfig = FdConfig(),
               cfg: SolverConfig = SolverConfig()) -> DerivativeReport:
    """Second differences of the misfit, symmetrized.

    Forward: ``(p+1)(p+2)/2`` misfits, central: ``2p² + 1``.
    """
    start = time.perf_counter()
    _check_problem(model, obs, metric, P)
    theta = np.asarray(theta, dtype=float)
    p = theta.size
    h = fd_steps(theta, DEFAULT_HESSIAN_C if fdcfg.c is None else fdcfg.c)
    J = _Counter(model, obs, metric, P, cfg)
    E = np.diag(h)
    H = np.empty((p, p))
    J0 = J(theta)
    if fdcfg.scheme == "forward":
        Jk = [J(theta + E[k]) for k in range(p)]
        for k in range(p):
            for l in range(k, p):
                val = (J(theta + E[k] + E[l]) - Jk[k] - Jk[l] + J0) / (h[k] * h[l])
                H[k, l] = H[l, k] = val
    else:
        Jp = [J(theta + E[k]) for k in range(p)]
        Jm = [J(theta - E[k]) for k in range(p)]
        for k in range(p):
            H[k, k] = (Jp[k] - 2 * J0 + Jm[k]) / h[k] ** 2
            for l in range(k + 1, p):
                val = (J(theta + E[k] + E[l]) - J(theta + E[k] - E[l])
                       - J(theta - E[k] + E[l]) + J(theta - E[k] - E[l])) / (4 * h[k] * h[l])
                H[k, l] = H[l, k] = val
    H, asym = symmetrize(H)
    return DerivativeReport(
        H, "fd", "hessian", time.perf_counter() - start, J.cost,
        {"misfit_evals": J.n, "scheme": fdcfg.scheme, "asymmetry": asym},
    )
