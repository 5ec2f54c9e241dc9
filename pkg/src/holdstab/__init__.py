"""Sample-and-hold stabilization with bounded noise: certificates and Monte Carlo checks."""

from .certificates import CertificateInputs, certify
from .errors import ConfigError, DivergenceError, DomainError, HoldStabError, InputError, NumericError
from .harness import ExperimentConfig, load_config, sweep, verify_stability
from .noise import NoiseModel, sample_noise_path
from .proximal_policy import ProxConfig, moreau_prox, select_control
from .simulator import SimConfig, run_closed_loop, run_monte_carlo
from .system_model import BoundsSet, CLFSpec, ControlSystem, builtin_nonholonomic

__version__ = "0.1.0"

__all__ = [
    "BoundsSet", "CLFSpec", "CertificateInputs", "ConfigError", "ControlSystem", "DivergenceError",
    "DomainError", "ExperimentConfig", "HoldStabError", "InputError", "NoiseModel", "NumericError",
    "ProxConfig", "SimConfig", "builtin_nonholonomic", "certify", "load_config", "moreau_prox",
    "run_closed_loop", "run_monte_carlo", "sample_noise_path", "select_control", "sweep", "verify_stability",
]
