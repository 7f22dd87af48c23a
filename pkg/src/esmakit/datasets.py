"""Built-in desk-scale datasets and image-directory ingestion.

The desk image set is a procedurally generated 10-class stand-in for the
usual photographic benchmarks: each class pairs a distinct stripe
orientation/frequency with a base color, and samples vary phase, tint and
pixel noise. Small CNNs reach high accuracy on it within seconds, which is
what the protocol-level experiments need. Cover images for watermarking are
smooth random fields with a natural-image-like falling spectrum.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LabeledDataset
from .rng import generator as make_rng

BUILTIN_TAGS = ("desk10", "covers", "toy2d")

# base colors per class, rows of (r, g, b)
_PALETTE = np.array(
    [
        [0.9, 0.2, 0.2], [0.2, 0.9, 0.2], [0.2, 0.3, 0.9], [0.9, 0.9, 0.2],
        [0.9, 0.2, 0.9], [0.2, 0.9, 0.9], [0.95, 0.6, 0.2], [0.6, 0.3, 0.8],
        [0.5, 0.8, 0.4], [0.8, 0.5, 0.5],
    ]
)


def _smooth_field(size: int, rng: np.random.Generator) -> np.ndarray:
    """One low-frequency random field in [-1, 1] (background nuisance)."""
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    envelope = 1.0 / (3e-2 + fy**2 + fx**2)
    spectrum = envelope * rng.standard_normal((size, size)) * np.exp(
        1j * rng.uniform(0, 2 * np.pi, size=(size, size))
    )
    band = np.real(np.fft.ifft2(spectrum))
    peak = np.abs(band).max()
    return band / peak if peak > 0 else band


def make_desk_dataset(
    n_per_class: int,
    n_classes: int = 10,
    size: int = 32,
    seed: int = 0,
    noise: float = 0.06,
    stripe_amplitude: float = 0.13,
    color_strength: float = 0.10,
    background: float = 0.12,
) -> LabeledDataset:
    """Striped-texture class images, (n, 3, size, size) float32 in [0, 1].

    Class evidence (stripe orientation plus a color cast) rides on a random
    low-frequency background and pixel noise, and is deliberately
    low-amplitude: small CNNs still separate the classes cleanly, but the
    per-pixel margin stays small enough that bounded adversarial
    perturbations can rewrite it, as with photographic benchmarks.
    """
    if n_classes > len(_PALETTE):
        raise ValueError(f"at most {len(_PALETTE)} classes supported")
    rng = make_rng(seed, "desk-images")
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) / size
    images = np.zeros((n_per_class * n_classes, 3, size, size), dtype=np.float32)
    labels = np.zeros(n_per_class * n_classes, dtype=np.int64)
    freq = 3.0
    row = 0
    for k in range(n_classes):
        angle = np.pi * k / n_classes
        direction = np.cos(angle) * xs + np.sin(angle) * ys
        color = _PALETTE[k]
        for _ in range(n_per_class):
            phase = rng.uniform(0, 2 * np.pi)
            stripes = np.sin(2 * np.pi * freq * direction + phase)
            base = 0.5 + 0.05 * (rng.random(3) - 0.5)
            img = base[:, None, None] + stripe_amplitude * stripes[None, :, :]
            img = img + color_strength * (color - _PALETTE[:n_classes].mean(axis=0))[:, None, None]
            img = img + background * _smooth_field(size, rng)[None, :, :]
            img = img + noise * rng.standard_normal((3, size, size))
            images[row] = np.clip(img, 0.0, 1.0)
            labels[row] = k
            row += 1
    perm = rng.permutation(len(labels))
    return LabeledDataset(images[perm], labels[perm], n_classes=n_classes)


def make_cover_images(n: int, size: int = 64, seed: int = 0) -> np.ndarray:
    """Smooth random covers, (n, 3, size, size) float32 in [0, 1].

    Random Fourier coefficients with a 1/f^2 envelope give the low-frequency
    structure of natural photos without shipping any data.
    """
    rng = make_rng(seed, "cover-images")
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    envelope = 1.0 / (1e-2 + fy**2 + fx**2)
    images = np.zeros((n, 3, size, size), dtype=np.float32)
    for i in range(n):
        base_phase = rng.uniform(0, 2 * np.pi, size=(size, size))
        base_amp = rng.standard_normal((size, size))
        for c in range(3):
            phase = base_phase + 0.35 * rng.uniform(0, 2 * np.pi, size=(size, size))
            amp = base_amp + 0.35 * rng.standard_normal((size, size))
            spectrum = envelope * amp * np.exp(1j * phase)
            band = np.real(np.fft.ifft2(spectrum))
            lo, hi = band.min(), band.max()
            images[i, c] = (band - lo) / (hi - lo) if hi > lo else 0.5
    return images


@dataclass
class IngestManifest:
    """Record of one ingestion: files used, files skipped, content hash."""

    source: str
    n_images: int
    skipped: list[str] = field(default_factory=list)
    artifact_hash: str = ""


def ingest_dataset(
    source_dir: str | Path, target_size: int = 32, max_skip_fraction: float = 0.05
) -> tuple[LabeledDataset, IngestManifest]:
    """Load a directory of images into a dataset artifact.

    Layout: one subdirectory per class (sorted name order defines labels),
    or a flat directory (every image gets label 0). Images are decoded,
    resized to ``target_size`` square, scaled to [0, 1], ordered by
    lexicographic path. Corrupt files are skipped with a manifest entry;
    more than ``max_skip_fraction`` skips aborts.
    """
    from PIL import Image

    source_dir = Path(source_dir)
    if not source_dir.is_dir():
        raise FileNotFoundError(f"not a directory: {source_dir}")
    class_dirs = sorted(d for d in source_dir.iterdir() if d.is_dir())
    if class_dirs:
        entries = [
            (label, path)
            for label, d in enumerate(class_dirs)
            for path in sorted(d.iterdir())
            if path.is_file()
        ]
        n_classes = len(class_dirs)
    else:
        entries = [(0, path) for path in sorted(source_dir.iterdir()) if path.is_file()]
        n_classes = 1
    if not entries:
        raise ValueError(f"no image files under {source_dir}")

    images, labels, skipped = [], [], []
    for label, path in entries:
        try:
            with Image.open(path) as img:
                img = img.convert("RGB").resize((target_size, target_size), Image.BILINEAR)
                array = np.asarray(img, dtype=np.float32) / 255.0
        except Exception:
            skipped.append(str(path))
            continue
        images.append(array.transpose(2, 0, 1))
        labels.append(label)
    if len(skipped) > max_skip_fraction * len(entries):
        raise ValueError(
            f"{len(skipped)}/{len(entries)} files unreadable, exceeding the "
            f"{max_skip_fraction:.0%} skip budget"
        )

    features = np.stack(images, axis=0)
    dataset = LabeledDataset(features, np.asarray(labels), n_classes=n_classes)
    digest = hashlib.sha256(features.tobytes() + dataset.labels.tobytes()).hexdigest()
    manifest = IngestManifest(
        source=str(source_dir), n_images=len(dataset), skipped=skipped, artifact_hash=digest
    )
    if skipped:
        warnings.warn(f"skipped {len(skipped)} unreadable file(s) during ingestion")
    return dataset, manifest
