"""Disease-progression modelling on the Cholesky manifold with a time-aware
neural ODE and an attention-gated recurrent update."""
from .config import ExperimentConfig, LossConfig, ModelConfig, SolverConfig
from .model import RTNAG

__all__ = ["ExperimentConfig", "LossConfig", "ModelConfig", "SolverConfig", "RTNAG"]
__version__ = "0.1.0"
