"""Continual learning for binarized keyword spotting.

Subpackages: audio_frontend (log-mel features), bnn_engine (XNOR-popcount
inference), cl_algorithms (the seven last-layer update rules), flops_model
(backprop cost table), dataset_streams (splits and streams), harness
(experiment orchestration), cli (command line).
"""

__version__ = "0.1.0"

from .cl_algorithms import Algorithm, ClConfig, ClHead  # noqa: F401
from .errors import ConfigError, DataError, NumericError  # noqa: F401
