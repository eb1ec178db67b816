"""Distributionally robust, risk-constrained MPC for collision avoidance
with Gaussian-process obstacle prediction."""
from .errors import InvalidArgument, NumericFailure
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["InvalidArgument", "NumericFailure", "BACKEND", "__version__"]
