from pegrl.autograd.tensor import (
    Tensor, Parameter, tensor, collect_parameters,
    set_strict_finite, strict_finite_enabled, check_finite,
)
from pegrl.autograd.functional import (
    conv2d, conv2d_transposed, linear, relu, sigmoid, mse,
    add, mul, reshape, concat, gather_rows, clamp, add_scalar_weighted,
    avg_pool2d, conv_output_hw, convt_output_hw,
)
from pegrl.autograd.gradcheck import grad_check
from pegrl.autograd.optim import Adam
from pegrl.autograd.serialize import save_checkpoint, load_checkpoint, assign_parameters

__all__ = [
    "Tensor", "Parameter", "tensor", "collect_parameters",
    "set_strict_finite", "strict_finite_enabled", "check_finite",
    "conv2d", "conv2d_transposed", "linear", "relu", "sigmoid", "mse",
    "add", "mul", "reshape", "concat", "gather_rows", "clamp", "add_scalar_weighted",
    "avg_pool2d", "conv_output_hw", "convt_output_hw",
    "grad_check", "Adam",
    "save_checkpoint", "load_checkpoint", "assign_parameters",
]
