"""Discrete observations coupled to the continuous model.

The library differentiates the misfit ``J(theta) = sum_i d(y_i, P u(t_i))``.
The Gaussian log-likelihood (up to its additive constant) is ``l = -J``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .integrator import SolverConfig, integrate

__all__ = [
    "ObservationSet",
    "PostProcessor",
    "HIV_POST",
    "Metric",
    "GaussianMetric",
    "distance",
    "distance_grad_state",
    "distance_hess_state",
    "misfit",
    "MisfitResult",
    "evaluate_misfit",
    "read_observations_csv",
    "write_observations_csv",
]


@dataclass(frozen=True)
class ObservationSet:
    """Measurement times (strictly increasing) and vector measurements."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.array(self.times, dtype=float).ravel()
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values.reshape(times.size, -1) if times.size else values.reshape(0, 0)
        if values.ndim != 2 or values.shape[0] != times.size:
            raise ValueError("values must have one row per measurement time")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(values))):
            raise ValueError("observations must be finite")
        if np.any(np.diff(times) <= 0):
            raise ValueError("measurement times must be strictly increasing")
        if times.size and times[0] <= 0:
            raise ValueError("measurement times must be > 0")
        times.flags.writeable = False
        values.flags.writeable = False
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def n_obs(self) -> int:
        return self.times.size

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def check_horizon(self, horizon: float) -> None:
        if self.n_obs and not self.times[-1] < horizon:
            raise ValueError(f"measurement time {self.times[-1]} not strictly inside (0, {horizon})")


@dataclass(frozen=True)
class PostProcessor:
    """Linear map ``P`` from model state to observation space."""

    matrix: np.ndarray

    def __post_init__(self):
        mat = np.array(self.matrix, dtype=float)
        if mat.ndim != 2:
            raise ValueError("post-processing matrix must be 2-D")
        mat.flags.writeable = False
        object.__setattr__(self, "matrix", mat)

    @classmethod
    def identity(cls, m: int) -> "PostProcessor":
        return cls(np.eye(m))

    @property
    def obs_dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def state_dim(self) -> int:
        return self.matrix.shape[1]

    def __call__(self, u):
        return np.asarray(u, dtype=float) @ self.matrix.T


# CD4 total and virion total
HIV_POST = PostProcessor(np.array([[1.0, 1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0, 1.0]]))


class Metric(Protocol):
    """Distance on observation space with derivatives in its second argument."""

    dim: int

    def distance(self, y, yhat) -> float: ...

    def grad(self, y, yhat) -> np.ndarray: ...

    def hess(self, y, yhat) -> np.ndarray: ...


class GaussianMetric:
    """``d(y, yhat) = ½ (y - yhat)ᵀ Σ⁻¹ (y - yhat)`` for SPD residual covariance Σ."""

    def __init__(self, cov):
        cov = np.array(cov, dtype=float)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ValueError("covariance must be a square matrix")
        if not np.allclose(cov, cov.T, rtol=1e-12, atol=0.0):
            raise ValueError("covariance must be symmetric")
        try:
            self._chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance must be positive definite") from exc
        self.cov = cov
        self.dim = cov.shape[0]
        eye = np.eye(self.dim)
        self.precision = self._solve(eye)

    @classmethod
    def identity(cls, n: int) -> "GaussianMetric":
        return cls(np.eye(n))

    def _solve(self, b):
        L = self._chol
        return np.linalg.solve(L.T, np.linalg.solve(L, b))

    def _residual(self, y, yhat):
        y = np.asarray(y, dtype=float)
        yhat = np.asarray(yhat, dtype=float)
        if y.shape != (self.dim,) or yhat.shape != (self.dim,):
            raise ValueError(f"expected vectors of length {self.dim}")
        return y - yhat

    def distance(self, y, yhat) -> float:
        z = np.linalg.solve(self._chol, self._residual(y, yhat))
        return 0.5 * float(z @ z)

    def grad(self, y, yhat):
        return -self._solve(self._residual(y, yhat))

    def hess(self, y=None, yhat=None):
        return self.precision.copy()


def _check_post(metric, P, m=None):
    if P.obs_dim != metric.dim:
        raise ValueError("post-processor output dimension does not match the metric")
    if m is not None and P.state_dim != m:
        raise ValueError("post-processor input dimension does not match the state")


def distance(metric: Metric, y, yhat) -> float:
    return metric.distance(y, yhat)


def distance_grad_state(metric: Metric, P: PostProcessor, y, u):
    """State gradient ``-Pᵀ Σ⁻¹ (y - P u)`` (the adjoint jump at a measurement)."""
    u = np.asarray(u, dtype=float)
    _check_post(metric, P, u.size)
    return P.matrix.T @ metric.grad(y, P(u))


def distance_hess_state(metric: Metric, P: PostProcessor, y=None, u=None):
    """State Hessian ``Pᵀ Σ⁻¹ P`` (constant for the Gaussian metric)."""
    _check_post(metric, P)
    return P.matrix.T @ metric.hess(y, None if u is None else P(u)) @ P.matrix


@dataclass
class MisfitResult:
    value: float
    stop_states: np.ndarray
    cost: int

    @property
    def loglik(self) -> float:
        return -self.value


def _check_problem(model, obs, metric, P):
    obs.check_horizon(model.horizon)
    _check_post(metric, P, model.state_dim)
    if obs.n_obs and obs.dim != metric.dim:
        raise ValueError("observation dimension does not match the metric")


def evaluate_misfit(model, obs, metric, P, theta, cfg: SolverConfig = SolverConfig()) -> MisfitResult:
    """One forward solve stopping at every measurement time."""
    _check_problem(model, obs, metric, P)
    theta = np.asarray(theta, dtype=float)
    res = integrate(
        lambda t, u: model.rhs(t, u, theta), model.u0(theta), (0.0, model.horizon),
        stops=obs.times, cfg=cfg, dense=False,
    )
    J = sum(metric.distance(y, P(u)) for y, u in zip(obs.values, res.stop_states))
    return MisfitResult(float(J), res.stop_states, res.stats.cost)


def misfit(model, obs, metric, P, theta, cfg: SolverConfig = SolverConfig()) -> float:
    return evaluate_misfit(model, obs, metric, P, theta, cfg).value


def read_observations_csv(path) -> ObservationSet:
    """Read ``t, y1, ..., yn`` rows (header required)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        if not header or header[0] != "t" or len(header) < 2:
            raise ValueError("observation CSV header must be 't, y1, ..., yn'")
        rows = [[float(x) for x in row] for row in reader if row]
    data = np.array(rows, dtype=float).reshape(-1, len(header))
    return ObservationSet(data[:, 0], data[:, 1:])


def write_observations_csv(path, obs: ObservationSet) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"y{k + 1}" for k in range(obs.dim)])
        for t, y in zip(obs.times, obs.values):
            writer.writerow([repr(float(t))] + [repr(float(v)) for v in y])
