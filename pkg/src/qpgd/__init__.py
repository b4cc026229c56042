"""QPGD: constrained network training via a QP-based gradient descent law.

Subpackage map:

* ``autodiff``    -- dense-MLP evaluation, Taylor-mode spatial derivatives,
                     recorded-operation parameter gradients
* ``optimizer``   -- the safety-filtered update law (alpha coefficient,
                     mixed gradient, SGD/Adam steps, learning-rate schedule)
* ``capacitor``   -- the capacitor inverse-problem: geometry, sampling,
                     losses, constraint, metrics
* ``diagnostics`` -- empirical checks of the convergence theory (penalty
                     descent, invariance, attraction, toy problems)
* ``harness``     -- end-to-end runs, checkpoints and reports
* ``cli``         -- command-line entry point
"""

# The arrays here are small enough that BLAS thread fan-out costs more than
# it buys (and single-threaded kernels keep reductions bit-stable), so the
# whole package runs with one BLAS thread.
try:
    from threadpoolctl import threadpool_limits as _threadpool_limits

    _BLAS_SINGLE_THREAD = _threadpool_limits(limits=1)
except Exception:  # pragma: no cover - threadpoolctl is a hard dependency
    _BLAS_SINGLE_THREAD = None

from .autodiff import (
    ACTIVATIONS,
    AnalyticField,
    ConfigurationError,
    MlpSpec,
    NetworkField,
    Taylor2,
    Var,
    apply_unary,
    gelu,
    gelu_d1,
    gelu_d2,
    init_params,
    laplacian,
    mlp_eval,
    mlp_taylor2,
    network_output,
    network_output_and_laplacian,
    param_count,
    param_gradient,
    param_slices,
    value_and_grad,
)

__all__ = [
    "ACTIVATIONS",
    "AnalyticField",
    "ConfigurationError",
    "MlpSpec",
    "NetworkField",
    "Taylor2",
    "Var",
    "apply_unary",
    "gelu",
    "gelu_d1",
    "gelu_d2",
    "init_params",
    "laplacian",
    "mlp_eval",
    "mlp_taylor2",
    "network_output",
    "network_output_and_laplacian",
    "param_count",
    "param_gradient",
    "param_slices",
    "value_and_grad",
]
