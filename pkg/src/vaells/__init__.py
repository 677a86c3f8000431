"""Variational autoencoder with a learned transport-operator latent manifold."""

from .errors import (ConfigurationError, DimensionError, DomainError, NumericFailure,
                     NumericInputError, VaellsError)
from .linalg import expm_adjoint_frechet, logsumexp, mat_exp, mat_exp_frechet
from .model import (AnchorSet, Hyperparameters, ModelState, PhaseWeights, full_objective,
                    laplace_inverse_transform, log_likelihood_term, log_prior,
                    log_variational_posterior, sample_posterior)
from .train import TrainingLog, train, transport_step
from .transport import (InferenceSettings, TransportDictionary, infer_coefficients,
                        infer_coefficients_batch, interpolate_path, orbit)

__all__ = [
    "AnchorSet", "ConfigurationError", "DimensionError", "DomainError", "Hyperparameters",
    "InferenceSettings", "ModelState", "NumericFailure", "NumericInputError", "PhaseWeights",
    "TrainingLog", "TransportDictionary", "VaellsError", "expm_adjoint_frechet", "full_objective",
    "infer_coefficients", "infer_coefficients_batch", "interpolate_path",
    "laplace_inverse_transform", "log_likelihood_term", "log_prior", "log_variational_posterior",
    "logsumexp", "mat_exp", "mat_exp_frechet", "orbit", "sample_posterior", "train",
    "transport_step",
]
