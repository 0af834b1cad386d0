"""splitfire: split-learning flame classification at desk scale.

A small CNN binary classifier trained across N resource-limited clients and
one server by cutting the network after the first hidden layer and shipping
only feature maps over a bit-exact wire protocol.
"""

from .data import Dataset, PartitionPlan, batch_iter, partition, synth_dataset
from .errors import (
    BuildError,
    ConfigError,
    DecodeError,
    DimensionError,
    NumericError,
    ProtocolError,
    SplitFireError,
    TransportError,
    ValidationError,
)
from .experiment import (
    ExperimentConfig,
    MetricsRecord,
    distortion_metrics,
    emit_metrics,
    run_arm,
)
from .nn import (
    Model,
    TrainConfig,
    accuracy,
    bce_loss,
    build_model,
    grad_check,
    sgd_step,
    small_vgg_specs,
)
from .protocol import decode_message, decode_tensor, encode_message, encode_tensor
from .split import SplitModel, client_backward, client_forward, cut_model, server_round, sync_front_weights
from .tensor import ConvGeometry, Tensor, concat, split_axis

__version__ = "0.1.0"

__all__ = [
    "BuildError",
    "ConfigError",
    "ConvGeometry",
    "Dataset",
    "DecodeError",
    "DimensionError",
    "ExperimentConfig",
    "MetricsRecord",
    "Model",
    "NumericError",
    "PartitionPlan",
    "ProtocolError",
    "SplitFireError",
    "SplitModel",
    "Tensor",
    "TrainConfig",
    "TransportError",
    "ValidationError",
    "accuracy",
    "batch_iter",
    "bce_loss",
    "build_model",
    "client_backward",
    "client_forward",
    "concat",
    "cut_model",
    "decode_message",
    "decode_tensor",
    "distortion_metrics",
    "emit_metrics",
    "encode_message",
    "encode_tensor",
    "grad_check",
    "partition",
    "run_arm",
    "server_round",
    "sgd_step",
    "small_vgg_specs",
    "split_axis",
    "sync_front_weights",
    "synth_dataset",
]
