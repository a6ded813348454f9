"""Adjoint-state gradient and Hessians of the misfit.

Sign convention: the adjoint ``v`` solves ``dv/dt = -(∂f/∂u)ᵀ v`` backward
from ``v(T) = 0`` and jumps at each measurement time going backward,
``v(t_i⁻) = v(t_i⁺) + d_u(y_i, P u(t_i))``. With this ``v``

    ∇J = (∂u0/∂θ)ᵀ v(0) + ∫_0^T (∂f/∂θ)ᵀ v dt.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .forward_sens import SensitivitySolution, solve_sensitivities
from .integrator import (DenseTrajectory, IntegrationStats, QuadratureSpec, SolverConfig,
                         evaluate, integrate)
from .likelihood import _check_problem, distance_grad_state, distance_hess_state
from .quadrature import integrate_breakpoints
from .reports import DerivativeReport, symmetrize

__all__ = [
    "AdjointSolution",
    "solve_adjoint",
    "solve_adjoint_smoothed",
    "gradient_asm",
    "gradient_smoothed",
    "hessian_sa",
    "hessian_fa",
    "default_fa_steps",
]


class _CachedEval:
    """Dense-output evaluator memoising the last scalar time.

    The adjoint right-hand side and its quadrature integrand are called at
    the same stage times.
    """

    def __init__(self, traj):
        self.traj = traj
        self._t = None
        self._y = None

    def __call__(self, t):
        if t != self._t:
            self._t = t
            self._y = evaluate(self.traj, t)
        return self._y


@dataclass
class AdjointSolution:
    """Piecewise adjoint trajectory, one segment per backward restart.

    ``segments[j]`` runs from ``bounds[j]`` down to ``bounds[j + 1]`` where
    ``bounds = (T, t_n, ..., t_1, 0)``. ``quadratures`` holds
    ``∫_0^T (∂f/∂θ)ᵀ v dt`` when gradient channels were requested.
    """

    segments: list
    bounds: np.ndarray
    jumps: list  # (t_i, jump vector) in visiting (decreasing-time) order
    v0: np.ndarray
    quadratures: Optional[np.ndarray]
    stats: list = field(default_factory=list)

    @property
    def backward_steps(self) -> int:
        return sum(s.naccept + s.nreject for s in self.stats)

    @property
    def cost(self) -> int:
        return sum(s.cost for s in self.stats)

    def evaluate(self, t):
        """Evaluate ``v``; at a measurement time the post-jump (left) value is returned."""
        ts = np.atleast_1d(np.asarray(t, dtype=float))
        lo, hi = self.bounds[-1], self.bounds[0]
        if np.any(ts < lo) or np.any(ts > hi):
            raise ValueError("time outside the adjoint span")
        # segment j covers (bounds[j+1], bounds[j]]; segment -1 also contains 0
        asc = self.bounds[::-1]
        jj = np.searchsorted(asc, ts, side="left") - 1
        seg = np.clip(len(self.segments) - 1 - jj, 0, len(self.segments) - 1)
        out = np.empty((ts.size, self.v0.size))
        for j in np.unique(seg):
            sel = seg == j
            out[sel] = evaluate(self.segments[j], ts[sel])
        return out[0] if np.ndim(t) == 0 else out


def _check_fwd(fwd, model):
    a, b = sorted(fwd.span)
    if a > 0.0 or b < model.horizon:
        raise ValueError("forward trajectory does not cover [0, T]")


def solve_adjoint(model, obs, metric, P, theta, fwd: DenseTrajectory,
                  cfg: SolverConfig = SolverConfig(), gradient_channels: bool = True) -> AdjointSolution:
    """Backward adjoint solve restarted at every measurement time with the
    metric's state gradient added to the solution."""
    _check_problem(model, obs, metric, P)
    _check_fwd(fwd, model)
    theta = np.asarray(theta, dtype=float)
    m, p = model.state_dim, model.param_dim
    u_at = _CachedEval(fwd)

    def rhs(t, v):
        return -(model.jac_u(t, u_at(t), theta).T @ v)

    quad = None
    if gradient_channels:
        quad = QuadratureSpec(p, lambda t, v: model.jac_theta(t, u_at(t), theta).T @ v)

    T = model.horizon
    bounds = np.concatenate([[T], obs.times[::-1], [0.0]])
    v = np.zeros(m)
    q = np.zeros(p)
    segments, jumps, stats = [], [], []
    for j in range(bounds.size - 1):
        if j > 0:
            t_i = bounds[j]
            i = obs.n_obs - j
            jump = distance_grad_state(metric, P, obs.values[i], evaluate(fwd, t_i))
            jumps.append((float(t_i), jump))
            v = v + jump
        res = integrate(rhs, v, (bounds[j], bounds[j + 1]), quad=quad, cfg=cfg)
        segments.append(res.trajectory)
        stats.append(res.stats)
        v = res.final_state
        if quad is not None:
            q += res.quadratures
    return AdjointSolution(
        segments=segments, bounds=bounds, jumps=jumps, v0=v,
        # channels were accumulated from T down to 0
        quadratures=-q if quad is not None else None, stats=stats,
    )


def _gradient_from_adjoint(model, theta, adj):
    return model.jac_u0(theta).T @ adj.v0 + adj.quadratures


def gradient_asm(model, obs, metric, P, theta, cfg: SolverConfig = SolverConfig()) -> DerivativeReport:
    """One dense forward solve, one backward adjoint solve with ``p``
    quadrature channels."""
    start = time.perf_counter()
    _check_problem(model, obs, metric, P)
    theta = np.asarray(theta, dtype=float)
    fwd = integrate(lambda t, u: model.rhs(t, u, theta), model.u0(theta), (0.0, model.horizon),
                    stops=obs.times, cfg=cfg)
    adj = solve_adjoint(model, obs, metric, P, theta, fwd.trajectory, cfg)
    grad = _gradient_from_adjoint(model, theta, adj)
    return DerivativeReport(
        grad, "asm", "gradient", time.perf_counter() - start, fwd.stats.cost + adj.cost,
        {"forward_steps": fwd.stats.naccept + fwd.stats.nreject,
         "backward_steps": adj.backward_steps,
         "forward_cost": fwd.stats.cost, "backward_cost": adj.cost},
    )


def _smoothed_source(obs, metric, P, sigma):
    times, values = obs.times, obs.values
    norm = 1.0 / (sigma * np.sqrt(2.0 * np.pi))

    def ybar(t):
        # piecewise-linear extension of the data
        return np.array([np.interp(t, times, values[:, k]) for k in range(values.shape[1])])

    def source(t, u):
        weight = norm * np.sum(np.exp(-0.5 * ((t - times) / sigma) ** 2))
        if weight == 0.0:
            return np.zeros(u.size)
        return weight * distance_grad_state(metric, P, ybar(t), u)

    return source


def solve_adjoint_smoothed(model, obs, metric, P, theta, sigma: float, fwd: DenseTrajectory,
                           cfg: SolverConfig = SolverConfig()) -> AdjointSolution:
    """Adjoint with each Dirac source replaced by a Gaussian of width ``sigma``.

    A single backward solve with no jumps. The measurement times are passed
    as stop points so the step controller cannot step over a narrow peak.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    _check_problem(model, obs, metric, P)
    _check_fwd(fwd, model)
    theta = np.asarray(theta, dtype=float)
    p = model.param_dim
    u_at = _CachedEval(fwd)
    source = _smoothed_source(obs, metric, P, sigma)

    def rhs(t, v):
        u = u_at(t)
        return -(model.jac_u(t, u, theta).T @ v) - source(t, u)

    quad = QuadratureSpec(p, lambda t, v: model.jac_theta(t, u_at(t), theta).T @ v)
    T = model.horizon
    res = integrate(rhs, np.zeros(model.state_dim), (T, 0.0), stops=obs.times[::-1],
                    quad=quad, cfg=cfg)
    return AdjointSolution(
        segments=[res.trajectory], bounds=np.array([T, 0.0]), jumps=[], v0=res.final_state,
        quadratures=-res.quadratures, stats=[res.stats],
    )


def gradient_smoothed(model, obs, metric, P, theta, sigma: float,
                      cfg: SolverConfig = SolverConfig()) -> DerivativeReport:
    start = time.perf_counter()
    theta = np.asarray(theta, dtype=float)
    fwd = integrate(lambda t, u: model.rhs(t, u, theta), model.u0(theta), (0.0, model.horizon),
                    stops=obs.times, cfg=cfg)
    adj = solve_adjoint_smoothed(model, obs, metric, P, theta, sigma, fwd.trajectory, cfg)
    grad = _gradient_from_adjoint(model, theta, adj)
    return DerivativeReport(
        grad, f"smoothed({sigma:g})", "gradient", time.perf_counter() - start,
        fwd.stats.cost + adj.cost,
        {"forward_steps": fwd.stats.naccept + fwd.stats.nreject,
         "backward_steps": adj.backward_steps, "sigma": sigma},
    )


def _node_chunk(m, p):
    # bound the batched second-derivative arrays to ~4M entries
    return max(15, (4_000_000 // max(1, m * p * p)) // 15 * 15)


def hessian_sa(model, obs, metric, P, theta, cfg: SolverConfig = SolverConfig()) -> DerivativeReport:
    """Hessian from one adjoint solve and ``p`` forward sensitivities.

    ``H_kl = Σ_i s_kᵀ d_uu s_l + hess_u0(e_k, e_l)·v(0) + ⟨D²f[(s_k, e_k), (s_l, e_l)], v⟩``
    where the last inner product is evaluated by Gauss-Kronrod quadrature
    over the union of all stored step grids.
    """
    start = time.perf_counter()
    _check_problem(model, obs, metric, P)
    theta = np.asarray(theta, dtype=float)
    m, p = model.state_dim, model.param_dim
    sens = solve_sensitivities(model, theta, obs.times, cfg, dense=True)
    adj = solve_adjoint(model, obs, metric, P, theta, sens.u, cfg, gradient_channels=False)

    duu = distance_hess_state(metric, P)
    H = np.einsum("ikm,mn,iln->kl", sens.stop_s, duu, sens.stop_s) if obs.n_obs else np.zeros((p, p))

    eye = np.eye(p)
    h1 = eye[:, :, None]  # (p, K1=p, 1)
    h2 = eye[:, None, :]  # (p, 1, K2=p)
    H += np.einsum("mkl,m->kl", model.hess_u0(theta, h1, h2), adj.v0)

    h1n, h2n = eye[:, None, :, None], eye[:, None, None, :]
    n_integrand = [0]

    def integrand(ts):
        n_integrand[0] += ts.size
        u, S = sens.evaluate(ts)  # (N, m), (N, p, m)
        v = adj.evaluate(ts)      # (N, m)
        un = u.T[:, :, None, None]
        s1 = np.transpose(S, (2, 0, 1))[:, :, :, None]
        s2 = np.transpose(S, (2, 0, 1))[:, :, None, :]
        d2 = model.second_directional(ts, un, theta, s1, h1n, s2, h2n)  # (m, N, p, p)
        return np.einsum("mnkl,nm->nkl", d2, v)

    grid = np.unique(np.concatenate(
        [sens.trajectory.t_nodes] + [seg.t_nodes for seg in adj.segments]))
    H += integrate_breakpoints(integrand, grid, rtol=cfg.rtol, atol=cfg.atol,
                               chunk=_node_chunk(m, p))
    H, asym = symmetrize(H)
    cost = sens.stats.cost + adj.cost + n_integrand[0]
    return DerivativeReport(
        H, "sa", "hessian", time.perf_counter() - start, cost,
        {"forward_steps": sens.stats.naccept + sens.stats.nreject,
         "backward_steps": adj.backward_steps, "quadrature_nodes": n_integrand[0],
         "asymmetry": asym},
    )


def default_fa_steps(theta):
    return np.sqrt(np.finfo(float).eps) * np.maximum(np.abs(theta), 1.0)


def hessian_fa(model, obs, metric, P, theta, h=None,
               cfg: SolverConfig = SolverConfig()) -> DerivativeReport:
    """Forward differences of ``p + 1`` adjoint gradients, symmetrised.

    ``h`` is a scalar or per-parameter step; the default is
    ``sqrt(eps) * max(|θ_i|, 1)``.
    """
    start = time.perf_counter()
    theta = np.asarray(theta, dtype=float)
    p = theta.size
    steps = default_fa_steps(theta) if h is None else np.broadcast_to(np.asarray(h, dtype=float), (p,))
    if np.any(steps <= 0):
        raise ValueError("finite-difference step must be positive")
    base = gradient_asm(model, obs, metric, P, theta, cfg)
    cost = base.rhs_evals
    H = np.empty((p, p))
    for i in range(p):
        tp = theta.copy()
        tp[i] += steps[i]
        g = gradient_asm(model, obs, metric, P, tp, cfg)
        cost += g.rhs_evals
        H[:, i] = (g.value - base.value) / steps[i]
    H, asym = symmetrize(H)
    return DerivativeReport(
        H, "fa", "hessian", time.perf_counter() - start, cost,
        {"gradient_evals": p + 1, "asymmetry": asym},
    )
