"""Normalizing-flow priors learned from corrupted measurements, the pullback
geometry they induce, and Riemannian autoencoders used as inverse-problem priors."""

from .corruption import CorruptionModel, Dataset, GaussianBlur, MatrixOperator, make_sinusoid_dataset
from .flow import CheckpointError, FlowModel
from .geometry import PullbackGeometry
from .inversion import certificate, check_rip, check_rric, invert, smoothness_constants, tv_reconstruct
from .metrics import mse, recoverability_bound, verify_recoverability, w1
from .posterior import PosteriorModel, build_sinusoid_posterior
from .rae import RAE, build_rae_analytic, build_rae_from_samples, expected_projection_error, select_dim
from .training import TrainConfig, TrainState, train, vlb_loss

__version__ = "0.1.0"
