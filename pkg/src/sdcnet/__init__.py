"""Semi-dilated convolution networks for scalogram classification, in numpy."""

from .network import SdcnConfig, SdcnModel, init_model, load_checkpoint, model_backward, model_forward, save_checkpoint
from .sdconv import ConvParams, ConvSpec, DilationVector, receptive_field, sdconv_backward, sdconv_forward
from .train import TrainConfig, train_loop
from .wavelet import CwtConfig, build_scalogram

__all__ = [
    "ConvParams",
    "ConvSpec",
    "CwtConfig",
    "DilationVector",
    "SdcnConfig",
    "SdcnModel",
    "TrainConfig",
    "build_scalogram",
    "init_model",
    "load_checkpoint",
    "model_backward",
    "model_forward",
    "receptive_field",
    "save_checkpoint",
    "sdconv_backward",
    "sdconv_forward",
    "train_loop",
]
