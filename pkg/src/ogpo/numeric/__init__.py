from . import tape as ad
from .fd import finite_diff_grad, rel_err
from .mlp import Mlp, init_mlp, mlp_forward
from .optim import Adam, OptimState, adam_update, grad_norm, lr_at
from .tape import NonFiniteError, Tape, TapeError, Var

__all__ = [
    "ad", "Adam", "Mlp", "NonFiniteError", "OptimState", "Tape", "TapeError", "Var",
    "adam_update", "finite_diff_grad", "grad_norm", "init_mlp", "lr_at", "mlp_forward", "rel_err",
]
