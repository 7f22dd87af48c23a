"""Differentiable JPEG approximation used as a training-time noise layer.

Standard pipeline at a fixed quality: RGB -> YCbCr, 8x8 block DCT, division
by the quality-scaled quantization tables, a smooth surrogate for rounding
(``round(x) + (x - round(x))^3``, whose gradient never vanishes), then the
inverse transform chain. Chroma subsampling is skipped; at the small image
sizes used here it changes little and would only complicate the blocks.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

# baseline luminance / chrominance quantization tables
_Q_LUM = torch.tensor(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=torch.float32,
)
_Q_CHROM = torch.tensor(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=torch.float32,
)

_RGB_TO_YCBCR = torch.tensor(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ],
    dtype=torch.float32,
)
_YCBCR_TO_RGB = torch.tensor(
    [
        [1.0, 0.0, 1.402],
        [1.0, -0.344136, -0.714136],
        [1.0, 1.772, 0.0],
    ],
    dtype=torch.float32,
)


def _dct_matrix(n: int = 8) -> torch.Tensor:
    """Orthonormal DCT-II basis matrix."""
    k = torch.arange(n, dtype=torch.float64)
    basis = torch.cos(math.pi / n * (k[None, :] + 0.5) * k[:, None])
    basis[0] *= 1.0 / math.sqrt(2.0)
    return (basis * math.sqrt(2.0 / n)).float()


_DCT = _dct_matrix()


def scaled_tables(quality: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Quantization tables scaled to the given quality (libjpeg rule)."""
    if not 1 <= quality <= 100:
        raise ValueError("quality must be in [1, 100]")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    lum = torch.clamp(torch.floor((_Q_LUM * scale + 50.0) / 100.0), 1.0, 255.0)
    chrom = torch.clamp(torch.floor((_Q_CHROM * scale + 50.0) / 100.0), 1.0, 255.0)
    return lum, chrom


def _soft_round(x: torch.Tensor) -> torch.Tensor:
    # cubic surrogate: exact at integers, differentiable everywhere
    r = torch.round(x)
    return r + (x - r) ** 3


def _blockify(channel: torch.Tensor) -> torch.Tensor:
    """(n, H, W) -> (n*blocks, 8, 8)"""
    n, h, w = channel.shape
    blocks = channel.reshape(n, h // 8, 8, w // 8, 8).permute(0, 1, 3, 2, 4)
    return blocks.reshape(-1, 8, 8)


def _unblockify(blocks: torch.Tensor, n: int, h: int, w: int) -> torch.Tensor:
    out = blocks.reshape(n, h // 8, w // 8, 8, 8).permute(0, 1, 3, 2, 4)
    return out.reshape(n, h, w)


def jpeg_approx(images: torch.Tensor, quality: int = 75) -> torch.Tensor:
    """Differentiable JPEG round trip on a [0, 1] RGB batch (n, 3, H, W).

    Images are reflect-padded to a multiple of 8 and cropped back after.
    """
    if images.dim() != 4 or images.shape[1] != 3:
        raise ValueError("expected a (n, 3, H, W) batch")
    n, _, h, w = images.shape
    pad_h = (-h) % 8
    pad_w = (-w) % 8
    padded = F.pad(images, (0, pad_w, 0, pad_h), mode="reflect") if (pad_h or pad_w) else images
    ph, pw = padded.shape[2], padded.shape[3]

    pixels = padded * 255.0
    ycbcr = torch.einsum("ij,njhw->nihw", _RGB_TO_YCBCR.to(pixels.dtype), pixels)
    ycbcr = ycbcr - torch.tensor([128.0, 0.0, 0.0], dtype=pixels.dtype)[None, :, None, None]

    lum, chrom = scaled_tables(quality)
    dct = _DCT.to(pixels.dtype)
    out_channels = []
    for c in range(3):
        table = lum if c == 0 else chrom
        blocks = _blockify(ycbcr[:, c])
        coef = dct @ blocks @ dct.T
        quantized = _soft_round(coef / table) * table
        restored = dct.T @ quantized @ dct
        out_channels.append(_unblockify(restored, n, ph, pw))
    ycbcr_out = torch.stack(out_channels, dim=1)
    ycbcr_out = ycbcr_out + torch.tensor([128.0, 0.0, 0.0], dtype=pixels.dtype)[None, :, None, None]
    rgb = torch.einsum("ij,njhw->nihw", _YCBCR_TO_RGB.to(pixels.dtype), ycbcr_out)
    rgb = (rgb / 255.0).clamp(0.0, 1.0)
    return rgb[:, :, :h, :w]
