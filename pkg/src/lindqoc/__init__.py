"""Open-system quantum optimal control: Kraus-series Lindblad simulation and noisy PAGD."""

__version__ = "0.1.0"

from .errors import (ConfigError, DomainError, LindqocError, ParameterError, PlanTooLargeError,
                     SingularRescalingError, ValidationError)
from .model import (ControlField, DensityState, LindbladModel, Observable, TimeRescaling,
                    be_norm_l1, load_model, trace_distance)
from .propagator import (SimulationPlan, dyson_propagator, kraus_series_step, oracle_evolve,
                         plan_from_epsilon, simulate)
from .interaction import SplitModel, simulate_interaction
from .objective import (GradientOracleConfig, NoiseModel, ObjectiveConfig, evaluate_f,
                        fd_gradient, lipschitz_constants)
from .pagd import PagdParams, derive_params, run

__all__ = [
    "ConfigError", "DomainError", "LindqocError", "ParameterError", "PlanTooLargeError",
    "SingularRescalingError", "ValidationError",
    "ControlField", "DensityState", "LindbladModel", "Observable", "TimeRescaling",
    "be_norm_l1", "load_model", "trace_distance",
    "SimulationPlan", "dyson_propagator", "kraus_series_step", "oracle_evolve",
    "plan_from_epsilon", "simulate",
    "SplitModel", "simulate_interaction",
    "GradientOracleConfig", "NoiseModel", "ObjectiveConfig", "evaluate_f", "fd_gradient",
    "lipschitz_constants",
    "PagdParams", "derive_params", "run",
]
