"""Gradients and Hessians of ODE misfits: forward sensitivities, first and
second order adjoints, and finite-difference baselines."""

from .adjoint import (
    AdjointSolution,
    gradient_asm,
    gradient_smoothed,
    hessian_fa,
    hessian_sa,
    solve_adjoint,
    solve_adjoint_smoothed,
)
from .fd_baselines import FdConfig, gradient_fd, hessian_fd
from .forward_sens import (
    SecondSensitivitySolution,
    SensitivitySolution,
    gradient_se,
    hessian_se,
    solve_second_sensitivities,
    solve_sensitivities,
)
from .integrator import (
    DenseTrajectory,
    IntegrationError,
    IntegrationStats,
    MaxStepsExceededError,
    NonFiniteStateError,
    SolverConfig,
    StepSizeUnderflowError,
    evaluate,
    integrate,
)
from .likelihood import (
    HIV_POST,
    GaussianMetric,
    ObservationSet,
    PostProcessor,
    distance,
    distance_grad_state,
    distance_hess_state,
    misfit,
)
from .models import (
    HIV_THETA0,
    ModelSpec,
    exact_gradient_linear,
    exact_hessian_linear,
    exact_solution_linear,
    hiv_pretreatment_equilibrium,
    make_hiv,
    make_linear_diagonal,
)
from .reports import DerivativeReport, max_rel_error, symmetrize

__version__ = "0.1.0"
