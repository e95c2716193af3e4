"""Plate-structured probabilistic models with stochastic variational inference."""

from .distributions import RNG, NormalDiag, kl_normal_normal
from .errors import (
    DetachedError,
    ModelError,
    NumericFault,
    ShapeError,
    UncoveredLatentError,
    UnmatchedVariableError,
)
from .inference import (
    SVI,
    AdamState,
    SVIConfig,
    VariationalState,
    adam_step,
    elbo_estimate,
    evaluate_elbo,
    fit,
    posterior,
    posterior_predictive,
)
from .model import (
    Bernoulli,
    ModelDefinition,
    ModelTrace,
    Normal,
    RandomVariable,
    datamodel,
    detect_plate_size,
    log_joint,
    match_q_to_p,
    network,
    parameter,
    probmodel,
    trace,
)
from .nn import BayesianDense, Dense, Sequential
from .tensor import Parameter, Tape, Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "RNG", "NormalDiag", "kl_normal_normal",
    "DetachedError", "ModelError", "NumericFault", "ShapeError", "UncoveredLatentError", "UnmatchedVariableError",
    "SVI", "AdamState", "SVIConfig", "VariationalState", "adam_step", "elbo_estimate", "evaluate_elbo", "fit",
    "posterior", "posterior_predictive",
    "Bernoulli", "ModelDefinition", "ModelTrace", "Normal", "RandomVariable", "datamodel", "detect_plate_size",
    "log_joint", "match_q_to_p", "network", "parameter", "probmodel", "trace",
    "BayesianDense", "Dense", "Sequential",
    "Parameter", "Tape", "Tensor", "backward", "no_grad",
]
