"""Weakly supervised tooth-mark detection with ViT patches as MIL instances."""

__version__ = "0.1.0"

from .data import BoundingBox, DatasetManifest, ImageSample, ManifestEntry, PatchGrid, load_manifest, load_sample
from .encoder import TOY, VIT_BASE, EncoderConfig, ViTEncoder, load_pretrained
from .losses import LossConfig, weakly_supervised_loss
from .mil import bag_probability, masked_select, micm_select
from .model import PatchMILModel, load_model, save_model

__all__ = [
    "BoundingBox",
    "DatasetManifest",
    "EncoderConfig",
    "ImageSample",
    "LossConfig",
    "ManifestEntry",
    "PatchGrid",
    "PatchMILModel",
    "TOY",
    "VIT_BASE",
    "ViTEncoder",
    "bag_probability",
    "load_manifest",
    "load_model",
    "load_pretrained",
    "load_sample",
    "masked_select",
    "micm_select",
    "save_model",
    "weakly_supervised_loss",
]
