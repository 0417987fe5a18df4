"""Learned image codec trained to denoise while it compresses."""

__version__ = "0.1.0"

from .bench import Codec, ModelMismatch
from .codec import CodecConfig, CodecModel
from .dataset import DataSources, Manifest, SupervisionMode
from .imaging import ImageF32, load_image, save_image
from .metrics import RDPoint, count_macs, ms_ssim, psnr
from .rangecoder import DecodeError
from .trainer import TrainConfig, train

__all__ = [
    "Codec",
    "CodecConfig",
    "CodecModel",
    "DataSources",
    "DecodeError",
    "ImageF32",
    "Manifest",
    "ModelMismatch",
    "RDPoint",
    "SupervisionMode",
    "TrainConfig",
    "count_macs",
    "load_image",
    "ms_ssim",
    "psnr",
    "save_image",
    "train",
]
