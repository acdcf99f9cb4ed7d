"""Trimmed constrained mixed-effects models."""
from .bootstrap import BootstrapResult, parametric_bootstrap
from .capped_simplex import project_capped_simplex
from .data_model import (Bounds, ErrorKind, ErrorSpec, GaussianPrior, Group,
                         LinearConstraintSet, MEDataset, ModelSpec, NonlinearConstraint,
                         Schema, SolverOptions, Theta, TrimWeights, load_dataset,
                         save_dataset, validate_spec)
from .inner_solver import minimize_constrained, value_function
from .likelihood import check_wellposedness, neg_marginal_loglik, trimmed_neg_loglik
from .obs_models import LinearModel, LogRatioModel, LogSplineModel
from .trimming import FitResult, fit_trimmed

__version__ = "0.1.0"
