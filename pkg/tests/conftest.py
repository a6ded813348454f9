import time

import numpy as np
import pytest

from odeadj.integrator import integrate
from odeadj.likelihood import HIV_POST, GaussianMetric, ObservationSet, PostProcessor
from odeadj.models import (
    HIV_THETA0,
    ModelSpec,
    exact_solution_linear,
    hiv_pretreatment_equilibrium,
    make_hiv,
    make_linear_diagonal,
)

HIV_U0 = hiv_pretreatment_equilibrium(HIV_THETA0)
HIV_TIMES = np.arange(1, 7) * 100.0 / 7


class Problem:
    def __init__(self, model, obs, metric, post, theta):
        self.model, self.obs, self.metric, self.post = model, obs, metric, post
        self.theta = np.asarray(theta, dtype=float)

    @property
    def args(self):
        return (self.model, self.obs, self.metric, self.post, self.theta)


def regular_times(n_obs, horizon=100.0):
    return np.arange(1, n_obs + 1) * horizon / (n_obs + 1)


def linear_problem(p=10, n_obs=11, seed=0, horizon=100.0, noise=0.1, theta=None):
    rng = np.random.default_rng(seed)
    th = rng.uniform(-1.1, -0.1, p) if theta is None else np.asarray(theta, dtype=float)
    times = regular_times(n_obs, horizon)
    y = exact_solution_linear(th, times)
    if noise:
        y = y + rng.uniform(0, noise * y.max(), y.shape)
    return Problem(make_linear_diagonal(th, horizon), ObservationSet(times, y),
                   GaussianMetric.identity(th.size), PostProcessor.identity(th.size), th)


def hiv_problem(theta=HIV_THETA0, seed=1, noise=0.1, times=HIV_TIMES):
    rng = np.random.default_rng(seed)
    th = np.asarray(theta, dtype=float)
    model = make_hiv(th, HIV_U0, 100.0)
    res = integrate(lambda t, u: model.rhs(t, u, th), model.u0(th), (0.0, 100.0), stops=times,
                    dense=False)
    y = HIV_POST(res.stop_states)
    if noise:
        y = y + rng.uniform(0, noise * y.max(), y.shape)
    return Problem(model, ObservationSet(times, y), GaussianMetric.identity(2), HIV_POST, th)


def theta_free_model(p=3, horizon=10.0):
    """du/dt = -u with u(0) = (1, 2): neither rhs nor u0 depends on theta."""
    def zeros(*arrays):
        shape = np.broadcast_shapes(*(np.shape(a)[1:] for a in arrays))
        return np.zeros((2,) + shape)

    return ModelSpec(
        name="free", state_dim=2, param_dim=p, horizon=horizon,
        rhs=lambda t, u, th: -u,
        jac_u=lambda t, u, th: -np.eye(2),
        jac_theta=lambda t, u, th: np.zeros((2, p)),
        hess_tt=lambda t, u, th, h1, h2: zeros(u, h1, h2),
        hess_tu=lambda t, u, th, h, s: zeros(u, h, s),
        hess_uu=lambda t, u, th, s1, s2: zeros(u, s1, s2),
        u0=lambda th: np.array([1.0, 2.0]),
        jac_u0=lambda th: np.zeros((2, p)),
        hess_u0=lambda th, h1, h2: zeros(h1, h2),
    )


def theta_free_problem(p=3, noise=True):
    model = theta_free_model(p)
    th = np.linspace(0.1, 0.3, p)
    times = np.array([2.0, 5.0, 7.5])
    y = np.array([1.0, 2.0]) * np.exp(-times)[:, None]
    if noise:
        y = y + np.array([[0.1, -0.2], [0.05, 0.0], [-0.1, 0.3]])
    return Problem(model, ObservationSet(times, y), GaussianMetric.identity(2),
                   PostProcessor.identity(2), th)


@pytest.fixture
def lin10():
    return linear_problem()


@pytest.fixture(scope="session")
def hiv():
    return hiv_problem()


@pytest.fixture(scope="session")
def hiv_reports(hiv):
    """All derivative routes on the HIV problem at theta0, computed once."""
    from odeadj.adjoint import gradient_asm, hessian_fa, hessian_sa
    from odeadj.forward_sens import gradient_se, hessian_se

    start = time.perf_counter()
    out = {
        "asm": gradient_asm(*hiv.args),
        "se_grad": gradient_se(*hiv.args),
        "sa": hessian_sa(*hiv.args),
        "se_hess": hessian_se(*hiv.args),
        "fa": hessian_fa(*hiv.args),
    }
    out["seconds"] = time.perf_counter() - start
    return out
