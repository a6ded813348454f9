"""Forward sensitivities (first and second order) and the sensitivity-equation
route to the misfit gradient and Hessian."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .integrator import DenseTrajectory, IntegrationStats, SolverConfig, evaluate, integrate
from .likelihood import _check_problem, distance_hess_state, distance_grad_state
from .reports import DerivativeReport, symmetrize

__all__ = [
    "SensitivitySolution",
    "SecondSensitivitySolution",
    "solve_sensitivities",
    "solve_second_sensitivities",
    "gradient_se",
    "hessian_se",
]


@dataclass
class SensitivitySolution:
    """State ``u`` and the sensitivities ``s_k = du/dtheta_k``.

    The augmented trajectory stores ``[u, s_1, ..., s_p]`` contiguously, so
    ``u`` and each ``s_k`` are cheap component views of ``trajectory``.
    """

    trajectory: Optional[DenseTrajectory]
    stops: np.ndarray
    stop_u: np.ndarray  # (n_stops, m)
    stop_s: np.ndarray  # (n_stops, p, m)
    state_dim: int
    param_dim: int
    stats: IntegrationStats

    @property
    def u(self) -> DenseTrajectory:
        return self.trajectory.restrict(slice(0, self.state_dim))

    def s(self, k: int) -> DenseTrajectory:
        m = self.state_dim
        return self.trajectory.restrict(slice(m * (k + 1), m * (k + 2)))

    def evaluate(self, t):
        """Return ``(u, S)`` at ``t``; ``S[..., k, :]`` is ``s_k``."""
        z = evaluate(self.trajectory, t)
        m, p = self.state_dim, self.param_dim
        return z[..., :m], z[..., m:].reshape(z.shape[:-1] + (p, m))


@dataclass
class SecondSensitivitySolution:
    """Second sensitivities ``ς_kl`` for ``k <= l`` at the stop times."""

    stops: np.ndarray
    values: dict  # (k, l) -> (n_stops, m)
    trajectories: dict
    stats: list

    def __getitem__(self, kl):
        k, l = kl
        return self.values[(k, l) if k <= l else (l, k)]


def _augmented_rhs(model, theta):
    m, p = model.state_dim, model.param_dim

    def rhs(t, z):
        u = z[:m]
        St = z[m:].reshape(p, m)  # rows are s_k
        du = model.rhs(t, u, theta)
        dSt = St @ model.jac_u(t, u, theta).T + model.jac_theta(t, u, theta).T
        return np.concatenate([du, dSt.ravel()])

    return rhs


def solve_sensitivities(model, theta, stops=(), cfg: SolverConfig = SolverConfig(),
                        dense: bool = True) -> SensitivitySolution:
    """Integrate the state together with all ``p`` sensitivity directions as
    one system of dimension ``m (1 + p)``."""
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite")
    m, p = model.state_dim, model.param_dim
    z0 = np.concatenate([model.u0(theta), model.jac_u0(theta).T.ravel()])
    res = integrate(_augmented_rhs(model, theta), z0, (0.0, model.horizon), stops=stops,
                    cfg=cfg, dense=dense, eval_cost=1 + p)
    ss = res.stop_states
    return SensitivitySolution(
        trajectory=res.trajectory,
        stops=np.asarray(stops, dtype=float),
        stop_u=ss[:, :m],
        stop_s=ss[:, m:].reshape(-1, p, m),
        state_dim=m,
        param_dim=p,
        stats=res.stats,
    )


def gradient_se(model, obs, metric, P, theta, cfg: SolverConfig = SolverConfig()) -> DerivativeReport:
    """``dJ/dθ_k = Σ_i d_u(y_i, P u(t_i)) · s_k(t_i)``."""
    start = time.perf_counter()
    _check_problem(model, obs, metric, P)
    sens = solve_sensitivities(model, theta, obs.times, cfg, dense=False)
    grad = np.zeros(model.param_dim)
    for y, u, S in zip(obs.values, sens.stop_u, sens.stop_s):
        grad += S @ distance_grad_state(metric, P, y, u)
    return DerivativeReport(
        grad, "se", "gradient", time.perf_counter() - start, sens.stats.cost,
        {"forward_steps": sens.stats.naccept + sens.stats.nreject, "forward": sens.stats.as_dict()},
    )


def solve_second_sensitivities(model, theta, sens: SensitivitySolution, stops=(),
                               cfg: SolverConfig = SolverConfig(), dense: bool = False,
                               pairs=None) -> SecondSensitivitySolution:
    """Integrate the second sensitivity equation once per pair ``k <= l``,
    sourcing ``u``, ``s_k`` and ``s_l`` from the dense output in ``sens``."""
    if sens.trajectory is None:
        raise ValueError("second sensitivities need dense first sensitivities")
    theta = np.asarray(theta, dtype=float)
    m, p = model.state_dim, model.param_dim
    eye = np.eye(p)
    if pairs is None:
        pairs = [(k, l) for k in range(p) for l in range(k, p)]
    values, trajs, stats = {}, {}, []
    for k, l in pairs:
        ek, el = eye[k], eye[l]

        def rhs(t, sig, k=k, l=l, ek=ek, el=el):
            u, S = sens.evaluate(t)
            src = model.second_directional(t, u, theta, S[k], ek, S[l], el)
            return model.jac_u(t, u, theta) @ sig + src

        res = integrate(rhs, model.hess_u0(theta, ek, el), (0.0, model.horizon), stops=stops,
                        cfg=cfg, dense=dense)
        values[(k, l)] = res.stop_states
        if dense:
            trajs[(k, l)] = res.trajectory
        stats.append(res.stats)
    return SecondSensitivitySolution(np.asarray(stops, dtype=float), values, trajs, stats)


def hessian_se(model, obs, metric, P, theta, cfg: SolverConfig = SolverConfig()) -> DerivativeReport:
    """``H_kl = Σ_i [s_kᵀ d_uu s_l + d_u · ς_kl](t_i)`` without the adjoint."""
    start = time.perf_counter()
    _check_problem(model, obs, metric, P)
    p = model.param_dim
    sens = solve_sensitivities(model, theta, obs.times, cfg, dense=True)
    second = solve_second_sensitivities(model, theta, sens, obs.times, cfg)
    duu = distance_hess_state(metric, P)
    H = np.zeros((p, p))
    for i, (y, u, S) in enumerate(zip(obs.values, sens.stop_u, sens.stop_s)):
        H += S @ duu @ S.T
        du = distance_grad_state(metric, P, y, u)
        for k in range(p):
            for l in range(k, p):
                val = du @ second[k, l][i]
                H[k, l] += val
                if l != k:
                    H[l, k] += val
    H, asym = symmetrize(H)
    cost = sens.stats.cost + sum(s.cost for s in second.stats)
    return DerivativeReport(
        H, "se", "hessian", time.perf_counter() - start, cost,
        {"forward_steps": sens.stats.naccept + sens.stats.nreject, "second_solves": len(second.stats),
         "asymmetry": asym},
    )
