from .common import Embedding, Weights, normalize, normalize_rows, normalize_rows_backward
from .model import DEFAULT_TAU_INIT, Model, NormStats
from .openc import (
    CHANNELS,
    UNKNOWN_CHEMISTRY,
    OpEncoderConfig,
    OperationalWindow,
    init_op_tensors,
    op_backward,
    op_forward,
)
from .simenc import SimEncoderConfig, init_sim_tensors, sim_backward, sim_forward

__all__ = [
    "CHANNELS",
    "DEFAULT_TAU_INIT",
    "Embedding",
    "Model",
    "NormStats",
    "OpEncoderConfig",
    "OperationalWindow",
    "SimEncoderConfig",
    "UNKNOWN_CHEMISTRY",
    "Weights",
    "init_op_tensors",
    "init_sim_tensors",
    "normalize",
    "normalize_rows",
    "normalize_rows_backward",
    "op_backward",
    "op_forward",
    "sim_backward",
    "sim_forward",
]
