from mbe.numerics.tensor import NonFiniteError, ShapeError, Tape, Tensor
from mbe.numerics.nn import Adam, ParamSet, lstm_step, optimizer_step, xavier_init

__all__ = [
    "Adam",
    "NonFiniteError",
    "ParamSet",
    "ShapeError",
    "Tape",
    "Tensor",
    "lstm_step",
    "optimizer_step",
    "xavier_init",
]
