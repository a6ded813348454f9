from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class DerivativeReport:
    """Gradient or Hessian of the misfit plus accounting.

    ``rhs_evals`` counts model vector-field evaluations: a right-hand-side
    call of a system carrying ``k`` model-sized fields (state plus ``k - 1``
    sensitivity directions) counts ``k``; every adjoint-quadrature or
    inner-product integrand evaluation counts one.
    """

    value: np.ndarray
    method: str
    target: str
    seconds: float
    rhs_evals: int
    stats: dict = field(default_factory=dict)

    @property
    def loglik_value(self) -> np.ndarray:
        return -self.value


def max_rel_error(x, ref) -> float:
    """``max|x - ref| / max|ref|`` (absolute error when ``ref`` vanishes)."""
    x = np.asarray(x, dtype=float)
    ref = np.asarray(ref, dtype=float)
    scale = float(np.max(np.abs(ref))) if ref.size else 0.0
    err = float(np.max(np.abs(x - ref))) if ref.size else 0.0
    return err / scale if scale > 0 else err


def symmetrize(H):
    """Return ``((H + Hᵀ)/2, max|H - Hᵀ| / max|H|)``."""
    H = np.asarray(H, dtype=float)
    asym = max_rel_error(H, H.T)
    return 0.5 * (H + H.T), asym
