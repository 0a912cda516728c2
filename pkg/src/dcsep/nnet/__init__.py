from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .kernels import numba_enabled
from .layers import (
    DropoutPlan,
    NetworkConfig,
    ParameterSet,
    StaleCacheError,
    blstm_backward,
    blstm_forward,
    embedding_head,
    embedding_head_backward,
    init_params,
    linear_backward,
    linear_forward,
    make_dropout_plan,
)
from .optim import RMSprop, clip_gradient, global_norm, learning_rate

__all__ = [
    "CheckpointError", "DropoutPlan", "NetworkConfig", "ParameterSet", "RMSprop",
    "StaleCacheError", "blstm_backward", "blstm_forward", "clip_gradient",
    "embedding_head", "embedding_head_backward", "global_norm", "init_params",
    "learning_rate", "linear_backward", "linear_forward", "load_checkpoint",
    "make_dropout_plan", "numba_enabled", "save_checkpoint",
]
