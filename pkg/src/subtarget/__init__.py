"""Targeted estimation of treatment effects in many, possibly overlapping, subgroups."""

__version__ = "0.1.0"

from .data import EstimationConfig, ObservedSample, SubgroupFamily, build_subgroups, load_sample  # noqa: E402
from .errors import (ConvergenceError, NumericalError, SeparationError,  # noqa: E402
                     SingularHessianError, SubtargetError, ValidationError)
from .nuisance import LearnerSpec, NuisanceFit, fit_nuisance  # noqa: E402
from .targeting import (TargetedFit, classical_single_tmle, effect_measures, itmle,  # noqa: E402
                        itmle_continuous, joint_target_effects, onestep_multi)
from .inference import build_intervals, covariance, eif_effect, eif_risk, simultaneous_kappa  # noqa: E402
from .crossfit import cv_effects, cv_itmle, plan_folds  # noqa: E402

__all__ = [
    "EstimationConfig", "ObservedSample", "SubgroupFamily", "build_subgroups", "load_sample",
    "ConvergenceError", "NumericalError", "SeparationError", "SingularHessianError",
    "SubtargetError", "ValidationError", "LearnerSpec", "NuisanceFit", "fit_nuisance",
    "TargetedFit", "classical_single_tmle", "effect_measures", "itmle", "itmle_continuous",
    "joint_target_effects", "onestep_multi", "build_intervals", "covariance", "eif_effect",
    "eif_risk", "simultaneous_kappa", "cv_effects", "cv_itmle", "plan_folds",
]
