"""Gaussian-smoothed networks for PDEs, trained without stacked back-propagation.

The solution ansatz is u(x) = E[f(x + delta)] for a base network f and
Gaussian noise delta. Stein-identity Monte Carlo estimators turn the PDE
residual into a pure forward-pass computation; a single reverse pass then
yields parameter gradients. Subpackages:

* ``network``     -- the base MLP, its parameter gradients, and exact
                     input-derivative propagation (oracle / baseline)
* ``estimators``  -- smoothed-model value/gradient/Laplacian/Hessian
                     estimators with variance reduction
* ``problems``    -- PDE benchmarks (2-D Poisson, N-d heat, N-d HJB)
* ``training``    -- loss assembly, Adam, adversarial collocation
                     refinement, the training loop, checkpoints
* ``evaluation``  -- error metrics and the estimator accuracy study
* ``benchmarks``  -- sigma/sample-size ablations and timing benchmarks
* ``cli``         -- the ``steinpinn`` command-line entry point
"""

from .errors import CapabilityError, ConfigError, NumericError
from .estimators import (
    DerivativeEstimate,
    NoiseBatch,
    SmoothedModel,
    SmoothingConfig,
    estimate,
    estimator_stats,
    grad_anti,
    grad_cv,
    grad_vanilla,
    hessian_vanilla,
    laplacian_anti,
    laplacian_cv,
    laplacian_vanilla,
    lipschitz_bound,
    partial_laplacian,
    sample_noise,
    smoothed_value,
)
from .network import (
    InputJet,
    NetworkSpec,
    ParamSet,
    backward_params,
    forward,
    init_params,
    input_gradient,
    input_jet,
    mlp_spec,
)

__version__ = "0.1.0"

__all__ = [
    "CapabilityError",
    "ConfigError",
    "DerivativeEstimate",
    "InputJet",
    "NetworkSpec",
    "NoiseBatch",
    "NumericError",
    "ParamSet",
    "SmoothedModel",
    "SmoothingConfig",
    "backward_params",
    "estimate",
    "estimator_stats",
    "forward",
    "grad_anti",
    "grad_cv",
    "grad_vanilla",
    "hessian_vanilla",
    "init_params",
    "input_gradient",
    "input_jet",
    "laplacian_anti",
    "laplacian_cv",
    "laplacian_vanilla",
    "lipschitz_bound",
    "mlp_spec",
    "partial_laplacian",
    "sample_noise",
    "smoothed_value",
    "__version__",
]
