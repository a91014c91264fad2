"""Vision-LSTM on a small numpy autodiff engine."""

from .backbone import Pooling, ConvKind, ViLConfig, VisionLSTM, count_params, preset
from .errors import ConfigError, DimensionError, DomainError, GraphError, NumericError, ViLError
from .flops import FlopsReport, estimate_model_flops, expected_flops_with_droppath, flops_mlstm
from .mlstm import MLSTMState, forward_chunkwise, forward_parallel, forward_recurrent
from .tensor import Tensor, count_macs, no_grad
from .traversal import BlockDesign, Direction, assign_directions, grid_permutation

__all__ = [
    "BlockDesign", "ConfigError", "ConvKind", "DimensionError", "Direction", "DomainError", "FlopsReport",
    "GraphError", "MLSTMState", "NumericError", "Pooling", "Tensor", "ViLConfig", "ViLError", "VisionLSTM",
    "assign_directions", "count_macs", "count_params", "estimate_model_flops", "expected_flops_with_droppath",
    "flops_mlstm", "forward_chunkwise", "forward_parallel", "forward_recurrent", "grid_permutation",
    "no_grad", "preset",
]
