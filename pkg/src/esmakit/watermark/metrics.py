"""Erasure/tampering risk metrics, PSNR, distortion loss, noise baseline.

Erasure metrics compare what the decoder reads from an attacked image
against what it read from the same image before the attack (not against
the originally embedded message). Tampering metrics ask how close a foreign
attacked image decodes to the victim enterprise's message pool. All rates
live in [0, 1] and reduce over images in ascending index order.
"""

from __future__ import annotations

import math

import numpy as np

from ..rng import generator as make_rng
from .pools import MessagePool


def _decode_fn(decoder):
    """Accept either a codec object with .decode or a bare callable."""
    return decoder.decode if hasattr(decoder, "decode") else decoder


def _as_bits(array: np.ndarray) -> np.ndarray:
    bits = np.asarray(array)
    if not np.isin(bits, (0, 1)).all():
        raise ValueError("decoded messages must be binary")
    return bits.astype(np.uint8)


def erasure_bit_error_rate(decoder, encoded: np.ndarray, attacked: np.ndarray) -> float:
    """Mean fraction of bits the attack flipped in the decoder's reading.

    Per image: Hamming distance between decode(encoded) and decode(attacked)
    divided by L, averaged over images.
    """
    if len(encoded) != len(attacked):
        raise ValueError("encoded and attacked lists must align")
    decode = _decode_fn(decoder)
    before = _as_bits(decode(encoded))
    after = _as_bits(decode(attacked))
    length = before.shape[1]
    per_image = (before != after).sum(axis=1) / length
    return float(per_image.mean()) if len(per_image) else 0.0


def erasure_detection_rate(decoder, encoded: np.ndarray, attacked: np.ndarray) -> float:
    """Fraction of images whose decoded message changed in any bit."""
    if len(encoded) != len(attacked):
        raise ValueError("encoded and attacked lists must align")
    decode = _decode_fn(decoder)
    before = _as_bits(decode(encoded))
    after = _as_bits(decode(attacked))
    changed = (before != after).any(axis=1)
    return float(changed.mean()) if len(changed) else 0.0


def tamper_bit_metric(
    decoder, attacked: np.ndarray, pool: MessagePool, mode: str = "closest"
) -> float:
    """Bit error of attacked foreign images against the victim's pool.

    ``closest`` (default): per image, the Hamming distance to the *nearest*
    pool message over L, so ``1 - result`` is the bit correct rate a
    tamperer achieves. ``as_printed``: the farthest pool message instead.
    """
    if mode not in ("closest", "as_printed"):
        raise ValueError(f"mode must be 'closest' or 'as_printed', got {mode!r}")
    if pool.size == 0:
        raise ValueError("pool must be non-empty")
    decode = _decode_fn(decoder)
    decoded = _as_bits(decode(attacked))
    length = pool.length
    # (n, n_p) pairwise Hamming distances to every pool message
    distances = (decoded[:, None, :] != pool.messages[None, :, :]).sum(axis=2)
    per_image = distances.min(axis=1) if mode == "closest" else distances.max(axis=1)
    return float((per_image / length).mean()) if len(per_image) else 0.0


def tamper_detection_rate(decoder, attacked: np.ndarray, pool: MessagePool) -> float:
    """Fraction of attacked foreign images decoding exactly into the pool."""
    if pool.size == 0:
        raise ValueError("pool must be non-empty")
    decode = _decode_fn(decoder)
    decoded = _as_bits(decode(attacked))
    hits = (decoded[:, None, :] == pool.messages[None, :, :]).all(axis=2).any(axis=1)
    return float(hits.mean()) if len(hits) else 0.0


def psnr(image_a: np.ndarray, image_b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs report +inf."""
    a = np.asarray(image_a, dtype=np.float64)
    b = np.asarray(image_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("images must share a shape")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def mean_psnr(batch_a: np.ndarray, batch_b: np.ndarray, peak: float = 1.0) -> float:
    """Mean per-image PSNR over aligned batches (inf-safe: inf stays inf)."""
    values = [psnr(a, b, peak) for a, b in zip(batch_a, batch_b)]
    return float(np.mean(values)) if values else math.inf


def distortion_loss(image_a: np.ndarray, image_b: np.ndarray) -> float:
    """Squared Euclidean distance divided by C*H*W (per-pixel mean square)."""
    a = np.asarray(image_a, dtype=np.float64)
    b = np.asarray(image_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("images must share a shape")
    return float(np.sum((a - b) ** 2) / a.size)


def gaussian_baseline(
    images: np.ndarray,
    target_psnr: float,
    seed: int = 0,
    tolerance_db: float = 0.5,
    max_iterations: int = 60,
) -> tuple[np.ndarray, float, bool]:
    """Additive white Gaussian noise calibrated to a target mean PSNR.

    One unit-variance noise field is drawn, then its scale is binary
    searched so the clamped result's mean PSNR lands within the tolerance.
    Returns (noisy images, achieved PSNR, reached flag); the flag is False
    when clamping makes the target unreachable.
    """
    if not math.isfinite(target_psnr):
        raise ValueError("target_psnr must be finite")
    images = np.asarray(images, dtype=np.float64)
    unit = make_rng(seed, "gaussian-baseline").standard_normal(images.shape)

    def achieved(sigma: float) -> float:
        noisy = np.clip(images + sigma * unit, 0.0, 1.0)
        return mean_psnr(noisy, images)

    lo, hi = 1e-6, 2.0
    if achieved(hi) > target_psnr:  # even max noise too weak (degenerate)
        sigma = hi
    elif achieved(lo) < target_psnr:
        sigma = lo
    else:
        for _ in range(max_iterations):
            mid = 0.5 * (lo + hi)
            if achieved(mid) > target_psnr:
                lo = mid
            else:
                hi = mid
        sigma = 0.5 * (lo + hi)

    noisy = np.clip(images + sigma * unit, 0.0, 1.0)
    final = mean_psnr(noisy, images)
    reached = abs(final - target_psnr) <= tolerance_db
    return noisy.astype(images.dtype), final, reached


def gaussian_matching_norm(
    images: np.ndarray, reference_adversarials: np.ndarray, seed: int = 0
) -> tuple[np.ndarray, float]:
    """Noise whose per-pixel magnitude matches a reference perturbation.

    The alternative calibration: sigma is the RMS of the reference
    perturbation (adversarial minus original) instead of a PSNR target.
    """
    images = np.asarray(images, dtype=np.float64)
    reference = np.asarray(reference_adversarials, dtype=np.float64)
    if images.shape != reference.shape:
        raise ValueError("images and reference adversarials must align")
    sigma = float(np.sqrt(np.mean((reference - images) ** 2)))
    noise = make_rng(seed, "gaussian-norm-matched").standard_normal(images.shape)
    noisy = np.clip(images + sigma * noise, 0.0, 1.0)
    return noisy.astype(images.dtype), mean_psnr(noisy, images)
