"""Watermark codecs, message pools and erasure/tampering risk metrics."""

from .hidden import HiddenWatermarker, NOISE_REGIMES, WatermarkCodec, train_hidden_like
from .metrics import (
    distortion_loss,
    erasure_bit_error_rate,
    erasure_detection_rate,
    gaussian_baseline,
    psnr,
    tamper_bit_metric,
    tamper_detection_rate,
)
from .pools import MessagePool, build_message_pools, load_pools, save_pools

__all__ = [
    "HiddenWatermarker",
    "MessagePool",
    "NOISE_REGIMES",
    "WatermarkCodec",
    "build_message_pools",
    "distortion_loss",
    "erasure_bit_error_rate",
    "erasure_detection_rate",
    "gaussian_baseline",
    "load_pools",
    "psnr",
    "save_pools",
    "tamper_bit_metric",
    "tamper_detection_rate",
    "train_hidden_like",
]
