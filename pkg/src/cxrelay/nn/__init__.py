"""Miniature CNN engine: tensors are numpy arrays, layers implement
forward/backward by hand, training runs with SGD or Adam under a
validation-loss checkpoint with patience."""

from .layers import ShapeError, softmax
from .losses import categorical_crossentropy, crossentropy_grad
from .model import (
    LayerSpec,
    ModelArtifact,
    Network,
    build_artifact,
    conv2d,
    dense,
    deserialize_artifact,
    flatten,
    forward,
    maxpool2d,
    reference_architecture,
    relu,
    serialize_artifact,
    softmax_spec,
)
from .optim import AdamState, SgdState, TrainingDivergedError, step_adam, step_sgd
from .train import TrainConfig, TrainHistory, backward, train, transfer_retrain

__all__ = [
    "AdamState", "LayerSpec", "ModelArtifact", "Network", "SgdState",
    "ShapeError", "TrainConfig", "TrainHistory", "TrainingDivergedError",
    "backward", "build_artifact", "categorical_crossentropy", "conv2d",
    "crossentropy_grad", "dense", "deserialize_artifact", "flatten",
    "forward", "maxpool2d", "reference_architecture", "relu",
    "serialize_artifact", "softmax", "softmax_spec", "step_adam", "step_sgd",
    "train", "transfer_retrain",
]
