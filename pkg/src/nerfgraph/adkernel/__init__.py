from . import ops
from .layers import ParamSet, init_linear, init_mlp, linear, mlp
from .ops import forward_op
from .optim import AdamState, AdamW, adamw_step, onecycle_lr
from .tensor import ShapeError, Tape, Tensor, backward, no_grad

__all__ = [
    "AdamState",
    "AdamW",
    "ParamSet",
    "ShapeError",
    "Tape",
    "Tensor",
    "adamw_step",
    "backward",
    "forward_op",
    "init_linear",
    "init_mlp",
    "linear",
    "mlp",
    "no_grad",
    "onecycle_lr",
    "ops",
]
