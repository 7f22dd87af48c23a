"""Encoder/decoder watermarking model with selectable training-time noise.

The message rides on fixed random +-1 carrier patterns, one per bit: the
encoder fuses the signed carrier stack with cover features into a small
residual, and the decoder estimates the residual with a conv stack and
correlates it against the same carriers to read the bits. Carriers are
drawn once per model and frozen; everything else trains end to end with a
noise layer between encoder and decoder chosen by the regime: identity,
crop (a random window keeps the watermark, the rest reverts to the cover),
a differentiable JPEG approximation, or a per-batch random choice of the
two. The public interface is deliberately narrow (encode/decode plus tags)
so differently structured codecs can plug into the same evaluation harness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from ..rng import derive_seed, generator as make_rng
from .jpeg import jpeg_approx

NOISE_REGIMES = ("nonoise", "crop", "jpeg", "combined")


class WatermarkCodec:
    """Minimal watermark-model interface the harness evaluates against.

    Implementations provide ``encode(covers, messages) -> images in [0,1]``
    and ``decode(images) -> hard bits``, plus ``length`` and
    ``noise_regime`` tags. Decode must be a pure function of the image.
    """

    length: int
    noise_regime: str

    def encode(self, covers: np.ndarray, messages: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def decode(self, images: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class _ConvBNReLU(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )


def make_carriers(length: int, size: int, seed: int) -> torch.Tensor:
    """Fixed disjoint-support +-1 carrier per bit, shape (L, size, size).

    The pixels are split uniformly at random into L groups; bit j rides a
    random +-1 pattern on its own group and is zero elsewhere. Per-bit
    redundancy therefore shrinks as L grows, which is what makes longer
    messages progressively easier to erase.
    """
    rng = make_rng(seed, "carriers", str(length), str(size))
    assignment = rng.permutation(size * size) % length
    signs = rng.integers(0, 2, size=(size, size)).astype(np.float32) * 2.0 - 1.0
    patterns = np.zeros((length, size, size), dtype=np.float32)
    mask = assignment.reshape(size, size)
    for j in range(length):
        patterns[j][mask == j] = signs[mask == j]
    return torch.from_numpy(patterns)


class _Encoder(nn.Module):
    def __init__(self, length: int, carriers: torch.Tensor, width: int = 32):
        super().__init__()
        self.register_buffer("carriers", carriers)
        self.features = nn.Sequential(_ConvBNReLU(3, width), _ConvBNReLU(width, width))
        self.fuse = _ConvBNReLU(width + length + 3, width)
        self.out = nn.Conv2d(width, 3, 1)

    def forward(self, cover, message):
        signed = 2.0 * message - 1.0
        planes = torch.einsum("nl,lhw->nlhw", signed, self.carriers)
        feats = self.features(cover)
        residual = self.out(self.fuse(torch.cat([feats, planes, cover], dim=1)))
        return (cover + residual).clamp(0.0, 1.0)


class _Decoder(nn.Module):
    def __init__(self, length: int, carriers: torch.Tensor, width: int = 32):
        super().__init__()
        self.register_buffer("carriers", carriers)
        support = (carriers != 0).sum(dim=(1, 2)).clamp_min(1).float()
        self.register_buffer("support", support)
        self.features = nn.Sequential(
            _ConvBNReLU(3, width), _ConvBNReLU(width, width), nn.Conv2d(width, 1, 1)
        )
        self.scale = nn.Parameter(torch.full((length,), 25.0))
        self.bias = nn.Parameter(torch.zeros(length))

    def forward(self, image):
        plane = self.features(image).squeeze(1)
        corr = torch.einsum("nhw,lhw->nl", plane, self.carriers) / self.support
        return corr * self.scale + self.bias


def random_crop_keep(
    encoded: torch.Tensor, cover: torch.Tensor, area_fraction: float, rng: np.random.Generator
) -> torch.Tensor:
    """Crop noise: a random window keeps the watermark, the rest reverts
    to the cover (the decoder sees a full-size image where only the
    configured area fraction still carries signal)."""
    if not 0 < area_fraction <= 1:
        raise ValueError("area_fraction must be in (0, 1]")
    h, w = encoded.shape[2], encoded.shape[3]
    side_h = max(1, int(round(math.sqrt(area_fraction) * h)))
    side_w = max(1, int(round(math.sqrt(area_fraction) * w)))
    top = int(rng.integers(0, h - side_h + 1))
    left = int(rng.integers(0, w - side_w + 1))
    mask = torch.zeros(1, 1, h, w, dtype=encoded.dtype)
    mask[:, :, top : top + side_h, left : left + side_w] = 1.0
    return encoded * mask + cover * (1.0 - mask)


@dataclass
class HiddenWatermarker(WatermarkCodec):
    """Trained encoder/decoder pair with its training metadata.

    ``converged`` is False when validation bit accuracy never reached the
    target; the model stays usable but downstream reports carry the flag.
    """

    encoder: nn.Module
    decoder: nn.Module
    length: int
    noise_regime: str
    image_size: int
    val_bit_accuracy: float = float("nan")
    converged: bool = True
    crop_fraction: float = 0.7
    jpeg_quality: int = 75
    carrier_seed: int = 0
    width: int = 32
    history: list[float] = field(default_factory=list)

    def encode(self, covers: np.ndarray, messages: np.ndarray) -> np.ndarray:
        self.encoder.eval()
        covers_t = torch.from_numpy(np.ascontiguousarray(covers)).float()
        messages_t = torch.from_numpy(np.ascontiguousarray(messages)).float()
        with torch.no_grad():
            encoded = self.encoder(covers_t, messages_t)
        return encoded.numpy()

    def decode(self, images: np.ndarray) -> np.ndarray:
        """Hard bits via thresholding decoder outputs at 0.5 (ties -> 1)."""
        self.decoder.eval()
        images_t = torch.from_numpy(np.ascontiguousarray(images)).float()
        with torch.no_grad():
            logits = self.decoder(images_t)
        return (logits >= 0.0).numpy().astype(np.uint8)

    def decode_logits(self, images: np.ndarray) -> np.ndarray:
        self.decoder.eval()
        images_t = torch.from_numpy(np.ascontiguousarray(images)).float()
        with torch.no_grad():
            return self.decoder(images_t).numpy()

    def state_dict(self) -> dict:
        return {"encoder": self.encoder.state_dict(), "decoder": self.decoder.state_dict()}

    def load_state_dict(self, state: dict) -> None:
        self.encoder.load_state_dict(state["encoder"])
        self.decoder.load_state_dict(state["decoder"])

    def save_checkpoint(self, path) -> None:
        torch.save(
            {
                "state": self.state_dict(),
                "length": self.length,
                "noise_regime": self.noise_regime,
                "image_size": self.image_size,
                "val_bit_accuracy": self.val_bit_accuracy,
                "converged": self.converged,
                "crop_fraction": self.crop_fraction,
                "jpeg_quality": self.jpeg_quality,
                "carrier_seed": self.carrier_seed,
                "width": self.width,
            },
            path,
        )

    @classmethod
    def load_checkpoint(cls, path) -> "HiddenWatermarker":
        payload = torch.load(path, map_location="cpu", weights_only=False)
        carriers = make_carriers(payload["length"], payload["image_size"], payload["carrier_seed"])
        model = cls(
            encoder=_Encoder(payload["length"], carriers, payload["width"]),
            decoder=_Decoder(payload["length"], carriers, payload["width"]),
            length=payload["length"],
            noise_regime=payload["noise_regime"],
            image_size=payload["image_size"],
            val_bit_accuracy=payload["val_bit_accuracy"],
            converged=payload["converged"],
            crop_fraction=payload["crop_fraction"],
            jpeg_quality=payload["jpeg_quality"],
            carrier_seed=payload["carrier_seed"],
            width=payload["width"],
        )
        model.load_state_dict(payload["state"])
        model.encoder.eval()
        model.decoder.eval()
        return model


def _apply_noise(
    encoded: torch.Tensor,
    cover: torch.Tensor,
    regime: str,
    rng: np.random.Generator,
    crop_fraction: float,
    jpeg_quality: int,
) -> torch.Tensor:
    if regime == "nonoise":
        return encoded
    if regime == "crop":
        return random_crop_keep(encoded, cover, crop_fraction, rng)
    if regime == "jpeg":
        return jpeg_approx(encoded, jpeg_quality)
    if regime == "combined":
        pick = "crop" if rng.random() < 0.5 else "jpeg"
        return _apply_noise(encoded, cover, pick, rng, crop_fraction, jpeg_quality)
    raise ValueError(f"unknown noise regime {regime!r}; choose from {NOISE_REGIMES}")


def train_hidden_like(
    covers: np.ndarray,
    length: int,
    noise_regime: str,
    epochs: int = 80,
    batch_size: int = 32,
    lr: float = 1.5e-3,
    val_fraction: float = 0.15,
    target_bit_accuracy: float = 0.98,
    target_psnr: float = 29.0,
    crop_fraction: float = 0.7,
    jpeg_quality: int = 75,
    width: int = 32,
    seed: int = 0,
) -> HiddenWatermarker:
    """Train the encoder/decoder end to end under the regime's noise layer.

    Messages are drawn uniformly per batch so any code can be embedded
    later. The image-loss weight is adapted per epoch: it grows while
    training bit accuracy holds above the target (compressing the residual
    toward the PSNR target) and shrinks when accuracy dips. Validation uses
    clean decode of freshly encoded held-out covers; training stops early
    once accuracy and PSNR targets are both met, otherwise the model is
    flagged as not converged (still usable).
    """
    if noise_regime not in NOISE_REGIMES:
        raise ValueError(f"unknown noise regime {noise_regime!r}; choose from {NOISE_REGIMES}")
    covers = np.asarray(covers, dtype=np.float32)
    if covers.ndim != 4 or covers.shape[2] != covers.shape[3]:
        raise ValueError("covers must be square images (n, C, H, W)")
    size = covers.shape[2]

    carrier_seed = derive_seed(seed, "hidden", noise_regime, str(length))
    carriers = make_carriers(length, size, carrier_seed)
    torch.manual_seed(derive_seed(seed, "hidden-init", noise_regime, str(length)))
    encoder = _Encoder(length, carriers, width)
    decoder = _Decoder(length, carriers, width)
    rng = make_rng(seed, "hidden-train", noise_regime, str(length))

    n_val = max(1, int(round(val_fraction * len(covers))))
    perm = rng.permutation(len(covers))
    val_covers = covers[perm[:n_val]]
    train_covers = torch.from_numpy(covers[perm[n_val:]])

    opt = torch.optim.Adam(list(encoder.parameters()) + list(decoder.parameters()), lr=lr)
    bce = nn.BCEWithLogitsLoss()
    mse = nn.MSELoss()
    model = HiddenWatermarker(
        encoder=encoder, decoder=decoder, length=length, noise_regime=noise_regime,
        image_size=size, crop_fraction=crop_fraction, jpeg_quality=jpeg_quality,
        carrier_seed=carrier_seed, width=width,
    )

    image_weight = 1.0
    val_acc = 0.0
    for epoch in range(epochs):
        encoder.train()
        decoder.train()
        order = rng.permutation(len(train_covers))
        epoch_accs = []
        for start in range(0, len(order), batch_size):
            batch = train_covers[torch.from_numpy(order[start : start + batch_size])]
            messages = torch.from_numpy(
                rng.integers(0, 2, size=(len(batch), length)).astype(np.float32)
            )
            encoded = encoder(batch, messages)
            noised = _apply_noise(encoded, batch, noise_regime, rng, crop_fraction, jpeg_quality)
            logits = decoder(noised)
            loss = bce(logits, messages) + image_weight * mse(encoded, batch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            model.history.append(float(loss.detach()))
            with torch.no_grad():
                epoch_accs.append(float(((logits >= 0).float() == messages).float().mean()))

        # adapt the image weight: compress while the message still decodes
        epoch_acc = float(np.mean(epoch_accs))
        if epoch_acc >= 0.985:
            image_weight = min(image_weight * 1.25, 400.0)
        elif epoch_acc < 0.95:
            image_weight = max(image_weight * 0.7, 0.3)

        val_msgs = rng.integers(0, 2, size=(len(val_covers), length)).astype(np.uint8)
        encoded_val = model.encode(val_covers, val_msgs.astype(np.float32))
        decoded = model.decode(encoded_val)
        val_acc = float((decoded == val_msgs).mean())
        val_mse = float(np.mean((encoded_val - val_covers) ** 2))
        val_psnr = 10.0 * math.log10(1.0 / val_mse) if val_mse > 0 else math.inf
        if val_acc >= target_bit_accuracy and val_psnr >= target_psnr:
            break

    model.val_bit_accuracy = val_acc
    model.converged = val_acc >= target_bit_accuracy
    return model
