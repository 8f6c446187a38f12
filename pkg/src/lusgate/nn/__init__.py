from .engine import (
    ModelParams,
    NumericError,
    apply_head,
    backward,
    build_network,
    forward,
    loss_and_grad,
    run,
)
from .serialize import ModelFormatError, dumps_model, load_model, loads_model, save_model
from .spec import (
    Activation,
    Conv,
    Dense,
    Flatten,
    Head,
    MaxPool,
    NetworkSpec,
    Reshape,
    SpecError,
    discriminator_spec,
    parse_spec,
    reconstructor_spec,
    vgg_spec,
)
from .train import Hyperparams, gradient_check, train_supervised

__all__ = [
    "Activation",
    "Conv",
    "Dense",
    "Flatten",
    "Head",
    "Hyperparams",
    "MaxPool",
    "ModelFormatError",
    "ModelParams",
    "NetworkSpec",
    "NumericError",
    "Reshape",
    "SpecError",
    "apply_head",
    "backward",
    "build_network",
    "discriminator_spec",
    "dumps_model",
    "forward",
    "gradient_check",
    "load_model",
    "loads_model",
    "loss_and_grad",
    "parse_spec",
    "reconstructor_spec",
    "run",
    "save_model",
    "train_supervised",
    "vgg_spec",
]
