from .bags import CellInstance, PatchInstance, SlideBag, assign_cells_to_patches
from .network import (
    ClsPosition,
    Mode,
    ModelConfig,
    attmil_aggregate,
    backward,
    bce_loss,
    export_attention,
    forward,
    fuse,
    spatial_attention_pool,
)
from .optim import OptState, adamw_step
from .params import ModelParams, init_params, load_checkpoint, save_checkpoint
from .training import TrainConfig, cross_validate, train

__all__ = [
    "CellInstance", "PatchInstance", "SlideBag", "assign_cells_to_patches",
    "ClsPosition", "Mode", "ModelConfig", "attmil_aggregate", "backward", "bce_loss",
    "export_attention", "forward", "fuse", "spatial_attention_pool",
    "OptState", "adamw_step", "ModelParams", "init_params", "load_checkpoint",
    "save_checkpoint", "TrainConfig", "cross_validate", "train",
]
