"""Recurrent multi-scale denoising of raw Bayer video."""

from rawdn.color_transform import ColorKernel, color_forward, color_inverse, orthonormality_loss, transform_variance
from rawdn.denoise_net import (
    DenoiserState,
    ModelWeights,
    StageOverrides,
    count_macs,
    count_params,
    denoise_sequence,
    load_weights,
    run_sequence,
    save_weights,
    step,
)
from rawdn.errors import DataError, NumericError, RawdnError
from rawdn.metrics import QualityReport, evaluate, psnr, ssim
from rawdn.noise_model import ISO_PRESETS, NoiseParams, add_noise, calibrate, variance_map
from rawdn.raw_data import (
    BayerPattern,
    PackedFrame,
    RawFrame,
    Sequence,
    augment,
    pack_cfa,
    pack_sequence,
    read_sequence,
    undo_unify,
    unify_pattern,
    unpack_cfa,
    write_sequence,
)
from rawdn.train_engine import PRESETS, TrainConfig, TrainExample, gradcheck, sample_crops, synth_scene, train

__version__ = "0.1.0"

__all__ = [
    "BayerPattern", "ColorKernel", "DataError", "DenoiserState", "ISO_PRESETS", "ModelWeights", "NoiseParams",
    "NumericError", "PRESETS", "PackedFrame", "QualityReport", "RawFrame", "RawdnError", "Sequence",
    "StageOverrides", "TrainConfig", "TrainExample", "add_noise", "augment", "calibrate", "color_forward",
    "color_inverse", "count_macs", "count_params", "denoise_sequence", "evaluate", "gradcheck", "load_weights",
    "orthonormality_loss", "pack_cfa", "pack_sequence", "psnr", "read_sequence", "run_sequence", "sample_crops",
    "save_weights", "ssim", "step", "synth_scene", "train", "transform_variance", "undo_unify", "unify_pattern",
    "unpack_cfa", "variance_map", "write_sequence",
]
