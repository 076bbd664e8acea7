"""Walsh-Hadamard compressive sensing with a masked transformer reconstructor."""

from .classic import IstaConfig, ista_reconstruct, ista_solve
from .errors import CheckpointError, DivergenceError, NumericalError
from .imaging import GrayImage, pad_and_patch, psnr, ssim, stitch
from .model import ModelConfig, MosaicModel, parameter_count, reconstruct
from .sampler import CompressedMeasurements, MaskSpec, compress, draw_mask, scatter
from .train import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train
from .wht import HadamardBasis, build_hadamard, fwht, inverse_full, sample_full

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "CompressedMeasurements",
    "DivergenceError",
    "GrayImage",
    "HadamardBasis",
    "IstaConfig",
    "MaskSpec",
    "ModelConfig",
    "MosaicModel",
    "NumericalError",
    "TrainConfig",
    "build_hadamard",
    "compress",
    "draw_mask",
    "evaluate",
    "fwht",
    "inverse_full",
    "ista_reconstruct",
    "ista_solve",
    "load_checkpoint",
    "pad_and_patch",
    "parameter_count",
    "psnr",
    "reconstruct",
    "sample_full",
    "save_checkpoint",
    "scatter",
    "ssim",
    "stitch",
    "train",
]
