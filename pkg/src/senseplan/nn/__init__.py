from .tensor import Parameter, ShapeError, Tensor, concat
from .layers import (Conv2d, Dense, FiLM, GlobalAvgPool, LayerSpec, Module,
                     ModuleList, NetworkSpec, build_network)
from .losses import gaussian_nll, kl_diag_gaussian
from .optim import AdamW, adamw_step, clip_grad_norm, ema_update
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint

__all__ = [
    "Tensor", "Parameter", "ShapeError", "concat",
    "Dense", "Conv2d", "GlobalAvgPool", "FiLM", "Module", "ModuleList",
    "LayerSpec", "NetworkSpec", "build_network",
    "gaussian_nll", "kl_diag_gaussian",
    "AdamW", "adamw_step", "clip_grad_norm", "ema_update",
    "save_checkpoint", "load_checkpoint", "CheckpointError",
]
