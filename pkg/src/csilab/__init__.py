"""CSI feedback codec laboratory.

Dense 4-D tensors, a tape-based autodiff engine, the ConvCsiNet and
ShuffleCsiNet autoencoders, synthetic angular-delay channel data, ADAM
training, and an analytic parameter/FLOP complexity analyzer.
"""

from csilab.tensor import Shape4, Tensor4, Matrix, mat_mul, tensor_read, tensor_write

__all__ = [
    "Shape4",
    "Tensor4",
    "Matrix",
    "mat_mul",
    "tensor_read",
    "tensor_write",
]

__version__ = "0.1.0"
