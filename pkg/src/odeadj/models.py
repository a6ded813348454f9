"""ODE models with the derivative callbacks needed by the sensitivity and
adjoint machinery.

All callbacks take ``(t, u, theta, ...)``. Second-derivative tensors are only
exposed contracted with direction vectors. Direction arguments (and ``u``)
may carry trailing batch axes, e.g. ``u`` of shape ``(m, N, 1)`` with
directions of shape ``(m, N, K)``; results then have shape
``(m,) + broadcast batch shape``. ``theta`` is never batched.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

__all__ = [
    "ModelSpec",
    "HIV_THETA0",
    "HIV_PARAM_NAMES",
    "HIV_STATE_NAMES",
    "make_linear_diagonal",
    "make_hiv",
    "hiv_pretreatment_equilibrium",
    "exact_solution_linear",
    "exact_gradient_linear",
    "exact_hessian_linear",
    "linear_hessian_terms",
]

Array = np.ndarray


@dataclass(frozen=True)
class ModelSpec:
    """ODE system ``du/dt = rhs(t, u, theta)``, ``u(0) = u0(theta)`` on ``[0, horizon]``.

    ``hess_ut`` defaults to ``hess_tu`` with its arguments swapped.
    ``second_`` optionally fuses the four contractions of
    :meth:`second_directional` into one call.
    """

    name: str
    state_dim: int
    param_dim: int
    horizon: float
    rhs: Callable[[float, Array, Array], Array]
    jac_u: Callable[[float, Array, Array], Array]
    jac_theta: Callable[[float, Array, Array], Array]
    hess_tt: Callable[..., Array]
    hess_tu: Callable[..., Array]
    hess_uu: Callable[..., Array]
    u0: Callable[[Array], Array]
    jac_u0: Callable[[Array], Array]
    hess_u0: Callable[..., Array]
    hess_ut_: Optional[Callable[..., Array]] = None
    second_: Optional[Callable[..., Array]] = None

    def __post_init__(self):
        if self.state_dim < 1 or self.param_dim < 1:
            raise ValueError("state_dim and param_dim must be positive")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")

    def hess_ut(self, t, u, theta, s, h):
        if self.hess_ut_ is not None:
            return self.hess_ut_(t, u, theta, s, h)
        return self.hess_tu(t, u, theta, h, s)

    def second_directional(self, t, u, theta, s1, h1, s2, h2):
        """Full second directional derivative ``D²f[(s1, h1), (s2, h2)]``."""
        if self.second_ is not None:
            return self.second_(t, u, theta, s1, h1, s2, h2)
        return (self.hess_tt(t, u, theta, h1, h2) + self.hess_tu(t, u, theta, h1, s2)
                + self.hess_ut(t, u, theta, s1, h2) + self.hess_uu(t, u, theta, s1, s2))

    def with_horizon(self, horizon: float) -> "ModelSpec":
        from dataclasses import replace
        return replace(self, horizon=float(horizon))


def _zeros_like_batch(m, *arrays):
    shape = np.broadcast_shapes(*(np.shape(a)[1:] for a in arrays))
    return np.zeros((m,) + shape)


# ---------------------------------------------------------------------------
# diagonal linear model du/dt = diag(theta) u, u(0) = 1


def make_linear_diagonal(theta, horizon: float = 100.0) -> ModelSpec:
    """Diagonal linear model; ``theta`` fixes only the dimension.

    The parameter vector passed to every callback is the diagonal of ``A``.
    """
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.size == 0:
        raise ValueError("theta must be non-empty")
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite")
    p = theta.size

    def rhs(t, u, th):
        return th * u

    def jac_u(t, u, th):
        return np.diag(th)

    def jac_theta(t, u, th):
        return np.diag(u)

    def hess_tt(t, u, th, h1, h2):
        return _zeros_like_batch(p, u, h1, h2)

    def hess_tu(t, u, th, h, s):
        # (d²f/dθ_k du_j)_i = δ_ik δ_ij
        return h * s + _zeros_like_batch(p, u)

    def hess_uu(t, u, th, s1, s2):
        return _zeros_like_batch(p, u, s1, s2)

    def u0(th):
        return np.ones(p)

    def jac_u0(th):
        return np.zeros((p, p))

    def hess_u0(th, h1, h2):
        return _zeros_like_batch(p, h1, h2)

    return ModelSpec(
        name="linear", state_dim=p, param_dim=p, horizon=horizon, rhs=rhs, jac_u=jac_u,
        jac_theta=jac_theta, hess_tt=hess_tt, hess_tu=hess_tu, hess_uu=hess_uu,
        u0=u0, jac_u0=jac_u0, hess_u0=hess_u0,
    )


def exact_solution_linear(theta, t):
    """``u_k(t) = exp(theta_k t)``; returns shape ``(len(t), p)`` for array ``t``."""
    theta = np.asarray(theta, dtype=float)
    t = np.asarray(t, dtype=float)
    return np.exp(np.multiply.outer(t, theta))


def _obs_arrays(obs):
    return np.asarray(obs.times, dtype=float), np.asarray(obs.values, dtype=float)


def _check_sign(target):
    if target not in ("misfit", "loglik"):
        raise ValueError("target must be 'misfit' or 'loglik'")
    return 1.0 if target == "misfit" else -1.0


def exact_gradient_linear(theta, obs, target: str = "misfit"):
    """Closed-form gradient for the diagonal linear model (u0 = 1, identity
    covariance and post-processing).

    ``target='misfit'`` differentiates J = sum_i ½|y_i - u(t_i)|²;
    ``target='loglik'`` differentiates l = -J.
    """
    sign = _check_sign(target)
    theta = np.asarray(theta, dtype=float)
    times, y = _obs_arrays(obs)
    if y.ndim != 2 or y.shape[1] != theta.size:
        raise ValueError("observation dimension must equal the parameter dimension")
    e = exact_solution_linear(theta, times)
    grad_l = np.sum((y - e) * e * times[:, None], axis=0)
    return -sign * grad_l


def linear_hessian_terms(theta, obs):
    """Diagonals of the Gauss-Newton term F and second-order term S of the
    log-likelihood Hessian for the diagonal linear model."""
    theta = np.asarray(theta, dtype=float)
    times, y = _obs_arrays(obs)
    if y.ndim != 2 or y.shape[1] != theta.size:
        raise ValueError("observation dimension must equal the parameter dimension")
    e = exact_solution_linear(theta, times)
    t2 = (times ** 2)[:, None]
    F = -np.sum(e * e * t2, axis=0)
    S = -np.sum((e - y) * e * t2, axis=0)
    return F, S


def exact_hessian_linear(theta, obs, target: str = "misfit"):
    """Closed-form Hessian (diagonal); ``F + S`` for ``target='loglik'``."""
    sign = _check_sign(target)
    F, S = linear_hessian_terms(theta, obs)
    return np.diag(-sign * (F + S))


# ---------------------------------------------------------------------------
# latent dynamic HIV model

HIV_PARAM_NAMES = ("lambda", "gamma", "mu_NI", "mu_L", "mu_A", "mu_V", "p",
                   "alpha_L", "pi", "eta_NRTI", "eta_PI")
HIV_STATE_NAMES = ("T_NI", "T_L", "T_A", "V_I", "V_NI")
HIV_THETA0 = np.array([2.61, 0.0021, 0.0085, 0.0092, 0.289, 30.0, 641.0, 1.6e-5, 0.443, 0.90, 0.99])

(_LAM, _GAM, _MUNI, _MUL, _MUA, _MUV, _P, _ALPHA, _PI, _ETAN, _ETAP) = range(11)


def _rows(v, n):
    return [0.0] * n if v is None else [v[i] for i in range(n)]


def _stack(rows):
    shapes = {np.shape(r) for r in rows}
    if len(shapes) == 1:
        return np.array(rows, dtype=float)
    rows = np.broadcast_arrays(*[np.asarray(r, dtype=float) for r in rows])
    return np.stack(rows)


def _hiv_d2(u, th, du1, dt1, du2, dt2):
    """Second directional derivative of the HIV right-hand side.

    ``du*``/``dt*`` are state/parameter direction arrays or ``None`` (zero).
    """
    x0, x1, x2, x3, x4 = (u[i] for i in range(5))
    a1, a2 = _rows(du1, 5), _rows(du2, 5)
    b1, b2 = _rows(dt1, 11), _rows(dt2, 11)
    g, eN, eP = th[_GAM], 1.0 - th[_ETAN], th[_ETAP]
    pp, pi = th[_P], th[_PI]

    def bil(k, i):
        # theta_k * u_i cross term
        return b1[k] * a2[i] + b2[k] * a1[i]

    # infection flux a = (1 - eta_NRTI) gamma T_NI V_I and its derivatives
    d2a = (eN * g * (a1[0] * a2[3] + a1[3] * a2[0])
           + eN * x3 * bil(_GAM, 0) - g * x3 * bil(_ETAN, 0)
           + eN * x0 * bil(_GAM, 3) - g * x0 * bil(_ETAN, 3)
           - x0 * x3 * (b1[_GAM] * b2[_ETAN] + b2[_GAM] * b1[_ETAN]))
    da1 = eN * g * (x3 * a1[0] + x0 * a1[3]) + eN * x0 * x3 * b1[_GAM] - g * x0 * x3 * b1[_ETAN]
    da2 = eN * g * (x3 * a2[0] + x0 * a2[3]) + eN * x0 * x3 * b2[_GAM] - g * x0 * x3 * b2[_ETAN]
    cross_pi = b1[_PI] * da2 + b2[_PI] * da1
    # Q = eta_PI p T_A ; R = p T_A
    d2q = (b1[_ETAP] * (b2[_P] * x2 + pp * a2[2]) + b2[_ETAP] * (b1[_P] * x2 + pp * a1[2])
           + eP * bil(_P, 2))
    d2r = bil(_P, 2)
    return _stack([
        -d2a - bil(_MUNI, 0),
        (1.0 - pi) * d2a - cross_pi - bil(_ALPHA, 1) - bil(_MUL, 1),
        pi * d2a + cross_pi + bil(_ALPHA, 1) - bil(_MUA, 2),
        d2r - d2q - bil(_MUV, 3),
        d2q - bil(_MUV, 4),
    ])


def _validate_hiv_theta(th):
    if th.shape != (11,):
        raise ValueError("HIV model has 11 parameters")
    if not np.all(np.isfinite(th)):
        raise ValueError("theta must be finite")
    if np.any(th < 0):
        raise ValueError("HIV rate parameters must be nonnegative")
    for k in (_ETAN, _ETAP):
        if not 0.0 <= th[k] < 1.0:
            raise ValueError(f"efficacy {HIV_PARAM_NAMES[k]}={th[k]} outside [0, 1)")


def make_hiv(theta=HIV_THETA0, u0=None, horizon: float = 100.0) -> ModelSpec:
    """Latent dynamic HIV model (5 states, 11 parameters).

    ``theta`` is validated as the nominal parameter point; ``u0`` is required
    (no initial condition is implied by the model itself). Measurements are
    the CD4 total ``T_NI + T_L + T_A`` and the virion total ``V_I + V_NI``
    (see :data:`odeadj.likelihood.HIV_POST`).
    """
    th0 = np.asarray(theta, dtype=float).ravel()
    _validate_hiv_theta(th0)
    if u0 is None:
        raise ValueError("HIV initial condition u0 must be supplied")
    init = np.asarray(u0, dtype=float).ravel()
    if init.shape != (5,) or np.any(init < 0) or not np.all(np.isfinite(init)):
        raise ValueError("u0 must be 5 finite nonnegative values")

    def rhs(t, u, th):
        x0, x1, x2, x3, x4 = u
        a = (1.0 - th[_ETAN]) * th[_GAM] * x0 * x3
        return np.array([
            th[_LAM] - a - th[_MUNI] * x0,
            (1.0 - th[_PI]) * a - (th[_ALPHA] + th[_MUL]) * x1,
            th[_PI] * a + th[_ALPHA] * x1 - th[_MUA] * x2,
            (1.0 - th[_ETAP]) * th[_P] * x2 - th[_MUV] * x3,
            th[_ETAP] * th[_P] * x2 - th[_MUV] * x4,
        ])

    def jac_u(t, u, th):
        x0, x1, x2, x3, x4 = u
        eg = (1.0 - th[_ETAN]) * th[_GAM]
        pi = th[_PI]
        return np.array([
            [-eg * x3 - th[_MUNI], 0.0, 0.0, -eg * x0, 0.0],
            [(1 - pi) * eg * x3, -(th[_ALPHA] + th[_MUL]), 0.0, (1 - pi) * eg * x0, 0.0],
            [pi * eg * x3, th[_ALPHA], -th[_MUA], pi * eg * x0, 0.0],
            [0.0, 0.0, (1.0 - th[_ETAP]) * th[_P], -th[_MUV], 0.0],
            [0.0, 0.0, th[_ETAP] * th[_P], 0.0, -th[_MUV]],
        ])

    def jac_theta(t, u, th):
        x0, x1, x2, x3, x4 = u
        c = x0 * x3
        eN, g, pi = 1.0 - th[_ETAN], th[_GAM], th[_PI]
        a = eN * g * c
        eP, pp = th[_ETAP], th[_P]
        return np.array([
            [1.0, -eN * c, -x0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, g * c, 0.0],
            [0.0, (1 - pi) * eN * c, 0.0, -x1, 0.0, 0.0, 0.0, -x1, -a, -(1 - pi) * g * c, 0.0],
            [0.0, pi * eN * c, 0.0, 0.0, -x2, 0.0, 0.0, x1, a, -pi * g * c, 0.0],
            [0.0, 0.0, 0.0, 0.0, 0.0, -x3, (1.0 - eP) * x2, 0.0, 0.0, 0.0, -pp * x2],
            [0.0, 0.0, 0.0, 0.0, 0.0, -x4, eP * x2, 0.0, 0.0, 0.0, pp * x2],
        ])

    def hess_tt(t, u, th, h1, h2):
        return _hiv_d2(u, th, None, h1, None, h2)

    def hess_tu(t, u, th, h, s):
        return _hiv_d2(u, th, None, h, s, None)

    def hess_ut(t, u, th, s, h):
        return _hiv_d2(u, th, s, None, None, h)

    def hess_uu(t, u, th, s1, s2):
        return _hiv_d2(u, th, s1, None, s2, None)

    def second(t, u, th, s1, h1, s2, h2):
        return _hiv_d2(u, th, s1, h1, s2, h2)

    def u0_fn(th):
        return init.copy()

    def jac_u0(th):
        return np.zeros((5, 11))

    def hess_u0(th, h1, h2):
        return _zeros_like_batch(5, h1, h2)

    return ModelSpec(
        name="hiv", state_dim=5, param_dim=11, horizon=horizon, rhs=rhs, jac_u=jac_u,
        jac_theta=jac_theta, hess_tt=hess_tt, hess_tu=hess_tu, hess_uu=hess_uu,
        u0=u0_fn, jac_u0=jac_u0, hess_u0=hess_u0, hess_ut_=hess_ut, second_=second,
    )


def hiv_pretreatment_equilibrium(theta=HIV_THETA0):
    """Infected steady state of the HIV model with both efficacies set to zero.

    Starting from it models treatment initiation at ``t = 0``.
    """
    th = np.asarray(theta, dtype=float)
    lam, g, mu_ni, mu_l, mu_a, mu_v, p, alpha, pi = th[:9]
    # T_A = k_A * a, V_I = p T_A / mu_V, a = g T_NI V_I  =>  T_NI = mu_V / (g p k_A)
    k_l = (1 - pi) / (alpha + mu_l)
    k_a = (pi + alpha * k_l) / mu_a
    t_ni = mu_v / (g * p * k_a)
    a = lam - mu_ni * t_ni
    if a <= 0:
        raise ValueError("no infected equilibrium for these parameters")
    t_l = k_l * a
    t_a = k_a * a
    return np.array([t_ni, t_l, t_a, p * t_a / mu_v, 0.0])
