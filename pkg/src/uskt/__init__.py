"""Event-to-RGB knowledge transfer with a U-shaped state-space adapter.

The package is organized as:

- ``tensor`` / ``ops``: numpy-backed tensors with reverse-mode autodiff
  and the conv/pool/upsample kernels the network needs
- ``gradcheck``: finite-difference gradient verification
- ``events``: event-stream parsing, voxel grids, synthetic datasets
- ``ssm``: diagonal state-space scans and the BiR-SSM / Bi-SSM blocks
- ``model``: the U-shaped adapter, encoder stand-in, decoder, and heads
- ``training``: losses, AdamW, cosine schedule, train/eval loops
- ``bundle``: the on-disk weight checkpoint format
- ``cli``: the ``uskt`` command-line entry point
"""

from .errors import (ConfigError, FormatError, NumericsError, ShapeError,
                     TrainAbort, UsktError)
from .gradcheck import GradCheckReport, grad_check
from .ops import (avg_pool2d, bilinear_upsample2x, concat_channels, conv1d_depthwise,
                  conv2d, conv_transpose2d, reverse_seq)
from .tensor import (Tape, Tensor, backward, expand, linear, log_softmax,
                     mean_all, mean_axes, reshape, set_finite_checks, silu,
                     stack_rows, sum_all, take_per_row, transpose)

__all__ = [
    "ConfigError", "FormatError", "NumericsError", "ShapeError", "TrainAbort",
    "UsktError", "GradCheckReport", "grad_check", "Tape", "Tensor", "backward",
    "expand", "linear", "log_softmax", "mean_all", "mean_axes", "reshape",
    "set_finite_checks", "silu", "stack_rows", "sum_all", "take_per_row",
    "transpose", "avg_pool2d", "bilinear_upsample2x", "concat_channels",
    "conv1d_depthwise", "conv2d", "conv_transpose2d", "reverse_seq",
]

__version__ = "0.1.0"
