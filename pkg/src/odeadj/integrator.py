"""Adaptive Dormand-Prince 5(4) integration with dense output.

The integrator lands exactly on prescribed stop times, runs forward or
backward in the original time variable, and can carry auxiliary quadrature
channels that accumulate integrals of a user integrand along the same
adaptive grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "SolverConfig",
    "QuadratureSpec",
    "IntegrationStats",
    "IntegrationResult",
    "DenseTrajectory",
    "IntegrationError",
    "StepSizeUnderflowError",
    "MaxStepsExceededError",
    "NonFiniteStateError",
    "integrate",
    "evaluate",
]

# Dormand-Prince tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])
# Hairer's continuous extension coefficients (dense output of order 4)
_D = np.array([
    -12715105075 / 11282082432,
    0.0,
    87487479700 / 32700410799,
    -10690763975 / 1880347072,
    701980252875 / 199316789632,
    -1453857185 / 822651844,
    69997945 / 29380423,
])

_ORDER = 5
_FAC_MIN = 0.2
_FAC_MAX = 10.0


class IntegrationError(RuntimeError):
    """Base class for integration failures; ``t`` is the failing time."""

    def __init__(self, message: str, t: float):
        super().__init__(f"{message} (t = {t!r})")
        self.t = t


class StepSizeUnderflowError(IntegrationError):
    pass


class MaxStepsExceededError(IntegrationError):
    pass


class NonFiniteStateError(IntegrationError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    rtol: float = 1e-10
    atol: float = 1e-14
    max_steps: int = 500_000
    initial_step: Optional[float] = None
    safety_factor: float = 0.9
    max_step: float = np.inf
    quad_in_error_norm: bool = False

    def __post_init__(self):
        if not self.rtol > 0 or not self.atol > 0:
            raise ValueError("rtol and atol must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.initial_step is not None and not self.initial_step > 0:
            raise ValueError("initial_step must be positive")
        if not 0 < self.safety_factor < 1:
            raise ValueError("safety_factor must lie in (0, 1)")
        if not self.max_step > 0:
            raise ValueError("max_step must be positive")

    def halved(self) -> "SolverConfig":
        return SolverConfig(
            rtol=self.rtol / 2, atol=self.atol / 2, max_steps=self.max_steps,
            initial_step=self.initial_step, safety_factor=self.safety_factor,
            max_step=self.max_step, quad_in_error_norm=self.quad_in_error_norm,
        )


@dataclass(frozen=True)
class QuadratureSpec:
    """Auxiliary integrals ``∫ integrand(t, state) dt`` over the span."""

    dim: int
    integrand: Callable[[float, np.ndarray], np.ndarray]


@dataclass
class IntegrationStats:
    """Solver counters.

    ``nfev`` counts calls of the state right-hand side, ``nqev`` calls of the
    quadrature integrand. ``cost`` is the weighted count used for benchmark
    accounting: ``nfev * eval_cost + nqev``, where ``eval_cost`` is the number
    of model vector fields one right-hand-side call represents.
    """

    naccept: int = 0
    nreject: int = 0
    nfev: int = 0
    nqev: int = 0
    eval_cost: int = 1

    @property
    def nsteps(self) -> int:
        return self.naccept + self.nreject

    @property
    def cost(self) -> int:
        return self.nfev * self.eval_cost + self.nqev

    def as_dict(self) -> dict:
        return {
            "naccept": self.naccept,
            "nreject": self.nreject,
            "nfev": self.nfev,
            "nqev": self.nqev,
            "cost": self.cost,
        }


class DenseTrajectory:
    """Piecewise-quartic continuous extension of an accepted-step solution.

    Nodes are stored in integration order (decreasing times for a backward
    solve). Evaluation at a node returns the stored accepted state exactly.
    """

    def __init__(self, t_nodes, y_nodes, rc3, rc4, rc5):
        self.t_nodes = np.asarray(t_nodes, dtype=float)
        self.y_nodes = np.asarray(y_nodes, dtype=float)
        self._rc3 = rc3
        self._rc4 = rc4
        self._rc5 = rc5
        self._reverse = self.t_nodes.size > 1 and self.t_nodes[-1] < self.t_nodes[0]
        self._t_sorted = self.t_nodes[::-1] if self._reverse else self.t_nodes

    @property
    def span(self) -> tuple[float, float]:
        return float(self.t_nodes[0]), float(self.t_nodes[-1])

    @property
    def state_dim(self) -> int:
        return self.y_nodes.shape[1]

    @property
    def n_segments(self) -> int:
        return self.t_nodes.size - 1

    @property
    def segments(self):
        """List of ``((t_start, t_end), (r1, r2, r3, r4, r5))`` per accepted step."""
        out = []
        for j in range(self.n_segments):
            y0, y1 = self.y_nodes[j], self.y_nodes[j + 1]
            out.append((
                (float(self.t_nodes[j]), float(self.t_nodes[j + 1])),
                (y0, y1 - y0, self._rc3[j], self._rc4[j], self._rc5[j]),
            ))
        return out

    def restrict(self, idx) -> "DenseTrajectory":
        """Trajectory of a subset of components (views, no copy for slices)."""
        return DenseTrajectory(self.t_nodes, self.y_nodes[:, idx], self._rc3[:, idx],
                               self._rc4[:, idx], self._rc5[:, idx])

    def _locate(self, t: np.ndarray) -> np.ndarray:
        # segment index in integration order
        n = self.n_segments
        k = np.searchsorted(self._t_sorted, t, side="right") - 1
        k = np.clip(k, 0, n - 1)
        return n - 1 - k if self._reverse else k

    def __call__(self, t):
        return evaluate(self, t)


def evaluate(traj: DenseTrajectory, t):
    """Evaluate the dense output at scalar ``t`` or at an array of times.

    Returns shape ``(state_dim,)`` for scalar input, ``(len(t), state_dim)``
    otherwise.
    """
    if np.ndim(t) == 0 and traj.n_segments > 0:
        return _evaluate_scalar(traj, float(t))
    ts = np.asarray(t, dtype=float)
    scalar = ts.ndim == 0
    ts = np.atleast_1d(ts)
    lo, hi = traj._t_sorted[0], traj._t_sorted[-1]
    if np.any(ts < lo) or np.any(ts > hi) or np.any(np.isnan(ts)):
        raise ValueError(f"time outside trajectory span [{lo}, {hi}]")
    if traj.n_segments == 0:
        out = np.repeat(traj.y_nodes[:1], ts.size, axis=0)
        return out[0] if scalar else out
    j = traj._locate(ts)
    t0 = traj.t_nodes[j]
    t1 = traj.t_nodes[j + 1]
    s = ((ts - t0) / (t1 - t0))[:, None]
    s1 = 1.0 - s
    y0 = traj.y_nodes[j]
    y1 = traj.y_nodes[j + 1]
    out = y0 + s * ((y1 - y0) + s1 * (traj._rc3[j] + s * (traj._rc4[j] + s1 * traj._rc5[j])))
    # exact node reproduction
    at0 = ts == t0
    at1 = ts == t1
    if at0.any():
        out[at0] = y0[at0]
    if at1.any():
        out[at1] = y1[at1]
    return out[0] if scalar else out


def _evaluate_scalar(traj: DenseTrajectory, t: float):
    ts = traj._t_sorted
    if not ts[0] <= t <= ts[-1]:
        raise ValueError(f"time {t} outside trajectory span [{ts[0]}, {ts[-1]}]")
    n = traj.n_segments
    k = min(max(int(np.searchsorted(ts, t, side="right")) - 1, 0), n - 1)
    j = n - 1 - k if traj._reverse else k
    t0 = traj.t_nodes[j]
    t1 = traj.t_nodes[j + 1]
    if t == t0:
        return traj.y_nodes[j].copy()
    if t == t1:
        return traj.y_nodes[j + 1].copy()
    s = (t - t0) / (t1 - t0)
    s1 = 1.0 - s
    y0 = traj.y_nodes[j]
    return y0 + s * ((traj.y_nodes[j + 1] - y0)
                     + s1 * (traj._rc3[j] + s * (traj._rc4[j] + s1 * traj._rc5[j])))


@dataclass
class IntegrationResult:
    trajectory: Optional[DenseTrajectory]
    quadratures: np.ndarray
    stats: IntegrationStats
    final_state: np.ndarray
    stop_states: np.ndarray
    t_nodes: np.ndarray = field(repr=False, default=None)


def _rms(x: np.ndarray) -> float:
    return math.sqrt(float(np.dot(x, x)) / x.size) if x.size else 0.0


def integrate(
    rhs: Callable[[float, np.ndarray], np.ndarray],
    u0,
    span: Sequence[float],
    stops: Sequence[float] = (),
    quad: Optional[QuadratureSpec] = None,
    cfg: SolverConfig = SolverConfig(),
    dense: bool = True,
    eval_cost: int = 1,
) -> IntegrationResult:
    """Integrate ``du/dt = rhs(t, u)`` from ``span[0]`` to ``span[1]``.

    ``stops`` must be strictly monotone in the direction of integration and
    lie strictly inside the span; each one becomes an accepted step endpoint
    and its state is returned in ``stop_states``. Quadrature channels start at
    zero and accumulate the signed integral from ``span[0]`` to ``span[1]``.
    With ``dense=False`` no trajectory is stored.
    """
    t_a, t_b = float(span[0]), float(span[1])
    if not (np.isfinite(t_a) and np.isfinite(t_b)) or t_a == t_b:
        raise ValueError("span must be two distinct finite times")
    direction = 1.0 if t_b > t_a else -1.0
    stops = np.asarray(stops, dtype=float).ravel()
    if stops.size:
        if np.any(direction * np.diff(stops) <= 0):
            raise ValueError("stops must be strictly monotone in the integration direction")
        if direction * (stops[0] - t_a) <= 0 or direction * (t_b - stops[-1]) <= 0:
            raise ValueError("stops must lie strictly inside the span")
    y = np.array(u0, dtype=float).ravel()
    if not np.all(np.isfinite(y)):
        raise NonFiniteStateError("non-finite initial state", t_a)
    m = y.size
    nq = quad.dim if quad is not None else 0
    stats = IntegrationStats(eval_cost=eval_cost)

    def full_rhs(t, z):
        stats.nfev += 1
        du = np.asarray(rhs(t, z[:m]), dtype=float)
        if nq:
            stats.nqev += 1
            return np.concatenate([du, np.asarray(quad.integrand(t, z[:m]), dtype=float).ravel()])
        return du

    z = np.concatenate([y, np.zeros(nq)]) if nq else y
    nerr = m + nq if (nq and cfg.quad_in_error_norm) else m
    rtol, atol = cfg.rtol, cfg.atol

    t = t_a
    k1 = full_rhs(t, z)
    if not np.all(np.isfinite(k1)):
        raise NonFiniteStateError("non-finite right-hand side", t)

    h_max = min(cfg.max_step, abs(t_b - t_a))
    if cfg.initial_step is not None:
        h_abs = min(cfg.initial_step, h_max)
    else:
        h_abs = min(_initial_step(full_rhs, t, z, k1, direction, nerr, rtol, atol), h_max)

    targets = list(stops) + [t_b]
    target_idx = 0
    stop_states = np.empty((stops.size, m))

    t_list = [t]
    y_list = [z[:m].copy()] if dense else None
    rc3, rc4, rc5 = ([], [], []) if dense else (None, None, None)

    K = np.empty((7, z.size))
    rejected_last = False
    nonfinite_streak = 0
    while True:
        target = targets[target_idx]
        if stats.naccept + stats.nreject >= cfg.max_steps:
            raise MaxStepsExceededError(f"max_steps={cfg.max_steps} exceeded", t)
        min_step = 16 * np.spacing(max(abs(t), abs(target)))
        if h_abs < min_step:
            if nonfinite_streak:
                raise NonFiniteStateError("state became non-finite", t)
            raise StepSizeUnderflowError("step size underflow", t)
        remaining = abs(target - t)
        hits_target = h_abs >= remaining * (1 - 1e-12)
        h = direction * (remaining if hits_target else h_abs)
        t_new = target if hits_target else t + h

        K[0] = k1
        for i in range(1, 6):
            K[i] = full_rhs(t + _C[i] * h, z + h * (_A[i] @ K[:i]))
        z_new = z + h * (_A[6] @ K[:6])
        K[6] = full_rhs(t_new, z_new)

        if not (np.isfinite(z_new).all() and np.isfinite(K[6]).all()):
            nonfinite_streak += 1
            stats.nreject += 1
            h_abs = abs(h) * _FAC_MIN
            rejected_last = True
            continue
        nonfinite_streak = 0

        err_vec = h * (_E @ K)[:nerr]
        scale = atol + rtol * np.maximum(np.abs(z[:nerr]), np.abs(z_new[:nerr]))
        err = _rms(err_vec / scale)

        if err <= 1.0:
            fac = _FAC_MAX if err == 0 else min(_FAC_MAX, cfg.safety_factor * err ** (-1 / _ORDER))
            if rejected_last:
                fac = min(fac, 1.0)
            if dense:
                ydiff = z_new[:m] - z[:m]
                bspl = h * K[0, :m] - ydiff
                rc3.append(bspl)
                rc4.append(ydiff - h * K[6, :m] - bspl)
                rc5.append(h * (_D @ K[:, :m]))
                y_list.append(z_new[:m].copy())
            stats.naccept += 1
            t_list.append(t_new)
            # a step clamped onto a target does not shrink the next proposal
            h_abs = min(h_max, max(abs(h) * fac, h_abs if hits_target else 0.0))
            t, z, k1 = t_new, z_new, K[6].copy()
            rejected_last = False
            if hits_target:
                if target_idx == stops.size:
                    break
                stop_states[target_idx] = z[:m]
                target_idx += 1
        else:
            stats.nreject += 1
            h_abs = abs(h) * max(_FAC_MIN, cfg.safety_factor * err ** (-1 / _ORDER))
            rejected_last = True

    traj = None
    t_nodes = np.array(t_list)
    if dense:
        traj = DenseTrajectory(
            t_nodes, np.array(y_list),
            np.array(rc3).reshape(-1, m), np.array(rc4).reshape(-1, m), np.array(rc5).reshape(-1, m),
        )
    return IntegrationResult(
        trajectory=traj,
        quadratures=z[m:].copy(),
        stats=stats,
        final_state=z[:m].copy(),
        stop_states=stop_states,
        t_nodes=t_nodes,
    )


def _initial_step(fun, t0, y0, f0, direction, nerr, rtol, atol):
    """Hairer-Norsett-Wanner starting step heuristic (costs one rhs call)."""
    scale = atol + np.abs(y0[:nerr]) * rtol
    d0 = _rms(y0[:nerr] / scale)
    d1 = _rms(f0[:nerr] / scale)
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    y1 = y0 + h0 * direction * f0
    f1 = fun(t0 + h0 * direction, y1)
    d2 = _rms((f1[:nerr] - f0[:nerr]) / scale) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / _ORDER)
    return min(100 * h0, h1)
