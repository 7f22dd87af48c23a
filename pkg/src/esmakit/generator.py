"""Conditional perturbation generator and its training strategies.

A Unet with residual blocks, conditioned on a frozen per-class embedding,
emits a candidate adversarial image for (input, target class). The output
pipeline smooths the candidate with a small Gaussian kernel and projects it
either onto the L-inf epsilon ball around the input intersected with [0,1]
(classifier attacks) or just onto [0,1] with an image-distortion penalty in
the loss (watermark attacks; exactly one of the two mechanisms is active).

Training matches the surrogate features of the generated images to the
easy-sample anchors of their target classes under smooth-L1 distance. The
mixup variant feeds the loss a Beta(nu, nu)-weighted combination of the
features of the attacked original and an attacked augmented copy, which
weakens the generator's dependence on source-data noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import LabeledDataset
from .rng import derive_seed, generator as make_rng
from .screening import AnchorSet


class TrainingDivergedError(RuntimeError):
    """Training loss went non-finite; the model was restored to the last good step."""


@dataclass
class GeneratorConfig:
    """Generator architecture and attack-pipeline knobs.

    ``epsilon`` is the per-pixel L-inf budget (pixel units in [0,1]);
    ``distortion_weight`` > 0 switches to watermark mode where the epsilon
    projection is replaced by a weighted mean-squared distortion penalty.
    Exactly one of the two imperceptibility mechanisms may be active.
    """

    n_classes: int
    epsilon: float = 16.0 / 255.0
    kernel_size: int = 3
    kernel_sigma: float = 1.0
    nu: float = 1.0
    distortion_weight: float = 0.0
    epsilon_clip: bool = True
    anchor_mode: str = "random"  # or "mean"
    base_width: int = 32
    depth: int = 3
    lr: float = 1e-4
    batch_size: int = 32
    in_channels: int = 3

    def __post_init__(self) -> None:
        if not 0 < self.epsilon <= 1:
            raise ValueError(f"epsilon must be in (0, 1], got {self.epsilon}")
        if self.kernel_size % 2 != 1:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.kernel_sigma <= 0:
            raise ValueError("kernel_sigma must be positive")
        if self.nu <= 0:
            raise ValueError(f"nu must be positive, got {self.nu}")
        if self.distortion_weight < 0:
            raise ValueError("distortion_weight must be non-negative")
        if self.anchor_mode not in ("random", "mean"):
            raise ValueError(f"anchor_mode must be 'random' or 'mean', got {self.anchor_mode!r}")
        active = int(self.epsilon_clip) + int(self.distortion_weight > 0)
        if active != 1:
            raise ValueError(
                "exactly one imperceptibility mechanism must be active: "
                "epsilon_clip or distortion_weight > 0"
            )


@dataclass
class AdversarialBatch:
    """Originals, assigned targets and the generated adversarials.

    ``skipped[i]`` marks samples whose source label equals the target (the
    attack is vacuous there); metrics must exclude them.
    """

    originals: np.ndarray
    targets: np.ndarray
    adversarials: np.ndarray
    skipped: np.ndarray = field(default=None)

    def __post_init__(self) -> None:
        if self.skipped is None:
            self.skipped = np.zeros(len(self.targets), dtype=bool)


def gaussian_kernel(size: int, sigma: float) -> torch.Tensor:
    """Normalized 2-D Gaussian kernel (sums to exactly 1)."""
    if size % 2 != 1:
        raise ValueError("kernel size must be odd")
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    kernel = g[:, None] * g[None, :]
    return kernel / kernel.sum()


def smooth_and_clip(
    raw: torch.Tensor, original: torch.Tensor, config: GeneratorConfig
) -> torch.Tensor:
    """Gaussian-smooth the generator output, then project.

    Per-channel convolution with the normalized kernel (reflect padding),
    then an element-wise projection onto [original - eps, original + eps]
    intersected with [0, 1] when epsilon clipping is active, or onto [0, 1]
    alone in distortion mode. Built from min/max compositions so the whole
    pipeline stays differentiable.
    """
    if raw.shape != original.shape:
        raise ValueError(f"shape mismatch: raw {tuple(raw.shape)} vs original {tuple(original.shape)}")
    channels = raw.shape[1]
    kernel = gaussian_kernel(config.kernel_size, config.kernel_sigma).to(raw.dtype)
    weight = kernel.expand(channels, 1, -1, -1)
    pad = config.kernel_size // 2
    padded = F.pad(raw, (pad, pad, pad, pad), mode="reflect")
    smoothed = F.conv2d(padded, weight, groups=channels)
    if config.epsilon_clip:
        smoothed = torch.maximum(smoothed, original - config.epsilon)
        smoothed = torch.minimum(smoothed, original + config.epsilon)
    return smoothed.clamp(0.0, 1.0)


class _CondResBlock(nn.Module):
    """Residual block with the class embedding injected after the first conv."""

    def __init__(self, cin: int, cout: int, embed_width: int):
        super().__init__()
        groups = math.gcd(8, cout)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.embed_proj = nn.Linear(embed_width, cout)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = F.silu(self.norm1(self.conv1(x)))
        h = h + self.embed_proj(emb)[:, :, None, None]
        h = F.silu(self.norm2(self.conv2(h)))
        return h + self.skip(x)


class ConditionalUnet(nn.Module):
    """Encoder-decoder generator with residual blocks and class conditioning.

    The class embedding table is loaded from a pretrained bank and frozen;
    each resolution level projects it linearly before adding it to the
    feature maps. The head emits a tanh-bounded residual added to the
    input, so an untrained generator already reproduces its input closely
    and training only has to shape the perturbation.
    """

    def __init__(
        self,
        n_classes: int,
        embed_width: int,
        in_channels: int = 3,
        base_width: int = 32,
        depth: int = 3,
    ):
        super().__init__()
        self.embedding = nn.Embedding(n_classes, embed_width)
        self.embedding.weight.requires_grad_(False)
        w = base_width
        widths = [w * (2**i) for i in range(depth)]

        self.stem = nn.Conv2d(in_channels, w, 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        cin = w
        for cw in widths:
            self.down_blocks.append(_CondResBlock(cin, cw, embed_width))
            self.downsamplers.append(nn.Conv2d(cw, cw, 3, stride=2, padding=1))
            cin = cw
        self.middle = _CondResBlock(cin, cin, embed_width)
        self.up_blocks = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for cw in reversed(widths):
            self.upsamplers.append(nn.ConvTranspose2d(cin, cw, 2, stride=2))
            self.up_blocks.append(_CondResBlock(cw + cw, cw, embed_width))
            cin = cw
        self.head = nn.Conv2d(cin, in_channels, 3, padding=1)

    def load_embeddings(self, embeddings: np.ndarray) -> None:
        """Install pretrained class embeddings; they stay frozen."""
        emb = torch.from_numpy(np.asarray(embeddings, dtype=np.float64)).float()
        if emb.shape != self.embedding.weight.shape:
            raise ValueError(
                f"embedding shape {tuple(emb.shape)} does not match "
                f"table {tuple(self.embedding.weight.shape)}"
            )
        with torch.no_grad():
            self.embedding.weight.copy_(emb)

    def forward(self, x, target):
        emb = self.embedding(target)
        h = self.stem(x)
        skips = []
        for block, down in zip(self.down_blocks, self.downsamplers):
            h = block(h, emb)
            skips.append(h)
            h = down(h)
        h = self.middle(h, emb)
        for up, block, skip in zip(self.upsamplers, self.up_blocks, reversed(skips)):
            h = up(h)
            h = block(torch.cat([h, skip], dim=1), emb)
        # perturbation generator: candidate = input + bounded residual
        return x + torch.tanh(self.head(h))


def build_generator(config: GeneratorConfig, embed_width: int, seed: int) -> ConditionalUnet:
    """Construct the Unet with seeded init (embeddings still to be loaded)."""
    torch.manual_seed(derive_seed(seed, "generator-init"))
    return ConditionalUnet(
        n_classes=config.n_classes,
        embed_width=embed_width,
        in_channels=config.in_channels,
        base_width=config.base_width,
        depth=config.depth,
    )


def smooth_l1_per_sample(features: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    """Smooth-L1 distance summed over coordinates, one value per row.

    Per coordinate: 0.5*u^2 for |u| < 1, |u| - 0.5 otherwise.
    """
    u = features - anchors
    a = u.abs()
    per_coord = torch.where(a < 1.0, 0.5 * u * u, a - 0.5)
    return per_coord.sum(dim=1)


def easy_match_loss_terms(
    adv_features: torch.Tensor, anchors: torch.Tensor, targets: torch.Tensor
) -> torch.Tensor:
    """Group the per-sample smooth-L1 terms by target class, mean, then sum.

    This is the double normalization of the matching loss: samples sharing
    a target are averaged, and class contributions add up.
    """
    loss = adv_features.new_zeros(())
    for cls in torch.unique(targets, sorted=True):
        mask = targets == cls
        loss = loss + smooth_l1_per_sample(adv_features[mask], anchors[mask]).mean()
    return loss


def easy_match_loss(
    anchor_set: AnchorSet,
    surrogate: nn.Module,
    batch: AdversarialBatch,
    source_labels: np.ndarray,
) -> float:
    """Feature-matching loss of an adversarial batch against mean anchors.

    Samples whose source class equals their target are excluded (the loss
    is only defined across classes); an entirely-excluded batch raises.
    """
    keep = np.asarray(source_labels) != batch.targets
    if not keep.any():
        raise ValueError("every sample has source == target; loss undefined")
    adv = torch.from_numpy(batch.adversarials[keep]).float()
    targets = torch.from_numpy(batch.targets[keep])
    anchor_mat = torch.from_numpy(anchor_set.anchor_matrix()).float()
    surrogate.eval()
    with torch.no_grad():
        feats = surrogate(adv)
    return float(easy_match_loss_terms(feats, anchor_mat[targets], targets))


def bem_mix(z_adv: torch.Tensor, z_adv_aug: torch.Tensor, zeta) -> torch.Tensor:
    """Convex combination ``zeta * z_adv + (1 - zeta) * z_adv_aug``.

    ``zeta`` may be a scalar or a per-sample vector, each entry in [0, 1].
    """
    if z_adv.shape != z_adv_aug.shape:
        raise ValueError("mixed features must share a shape")
    zeta_t = torch.as_tensor(zeta, dtype=z_adv.dtype)
    if torch.any(zeta_t < 0) or torch.any(zeta_t > 1):
        raise ValueError("zeta must lie in [0, 1]")
    while zeta_t.dim() < z_adv.dim():
        zeta_t = zeta_t.unsqueeze(-1)
    return zeta_t * z_adv + (1.0 - zeta_t) * z_adv_aug


def sample_zeta(nu: float, rng: np.random.Generator, size: int | None = None):
    """Draw mixing weights from Beta(nu, nu)."""
    if nu <= 0:
        raise ValueError(f"nu must be positive, got {nu}")
    return rng.beta(nu, nu, size=size)


def identity_augmentation(x: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """No-op policy; the mixup trainer degenerates to the plain one."""
    return x


def default_augmentation(x: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Random crop-resize, horizontal flip and mild color jitter.

    Batch-level parameters are drawn from the supplied numpy generator so
    augmentation randomness stays on its own stream.
    """
    n, c, h, w = x.shape
    # crop-resize: keep a random sub-window of 70-100% side length
    frac = 0.7 + 0.3 * rng.random()
    ch, cw = max(1, int(round(h * frac))), max(1, int(round(w * frac)))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    out = x[:, :, top : top + ch, left : left + cw]
    out = F.interpolate(out, size=(h, w), mode="bilinear", align_corners=False)
    if rng.random() < 0.5:
        out = torch.flip(out, dims=[3])
    brightness = 1.0 + 0.2 * (rng.random() - 0.5)
    shift = 0.1 * (rng.random() - 0.5)
    return (out * brightness + shift).clamp(0.0, 1.0)


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    epochs: int = 0


def _trainable_parameters(model: ConditionalUnet):
    return [p for p in model.parameters() if p.requires_grad]


def _pick_anchors(
    anchor_set: AnchorSet,
    targets: np.ndarray,
    mode: str,
    rng: np.random.Generator,
) -> np.ndarray:
    """Anchor feature per sample: a random easy member's feature, or the mean."""
    rows = np.zeros((len(targets), anchor_set.anchor_matrix().shape[1]))
    for i, t in enumerate(targets):
        if mode == "random":
            feats = anchor_set.member_features[int(t)]
            rows[i] = feats[int(rng.integers(0, len(feats)))]
        else:
            rows[i] = anchor_set.anchors[int(t)]
    return rows


def _run_training(
    generator_net: ConditionalUnet,
    surrogate: nn.Module,
    dataset: LabeledDataset,
    anchor_set: AnchorSet,
    config: GeneratorConfig,
    epochs: int,
    seed: int,
    augmentation=None,
    zeta_override: float | None = None,
    use_mixup: bool = False,
    max_steps: int | None = None,
) -> TrainLog:
    """Shared loop for both training strategies.

    Each step: assign every batch sample a uniform random target, drop the
    samples whose own class was drawn, generate + smooth/clip, compute the
    matching loss (over mixed features when ``use_mixup``), plus the
    weighted distortion term in watermark mode, then one AdamW step.
    """
    rng_targets = make_rng(seed, "targets")
    rng_shuffle = make_rng(seed, "shuffle")
    rng_anchor = make_rng(seed, "anchor-choice")
    rng_zeta = make_rng(seed, "zeta")
    rng_aug = make_rng(seed, "augmentation")

    surrogate.eval()
    surrogate_grad_flags = [p.requires_grad for p in surrogate.parameters()]
    for p in surrogate.parameters():
        p.requires_grad_(False)

    opt = torch.optim.AdamW(_trainable_parameters(generator_net), lr=config.lr)
    log = TrainLog()
    features = torch.from_numpy(np.ascontiguousarray(dataset.features)).float()
    labels = dataset.labels
    n = len(dataset)
    last_good = {k: v.detach().clone() for k, v in generator_net.state_dict().items()}
    steps_done = 0

    try:
        for epoch in range(epochs):
            generator_net.train()
            order = rng_shuffle.permutation(n)
            for start in range(0, n, config.batch_size):
                batch_idx = order[start : start + config.batch_size]
                targets = rng_targets.integers(0, config.n_classes, size=len(batch_idx))
                keep = targets != labels[batch_idx]
                if not keep.any():
                    continue
                idx = batch_idx[keep]
                tar = targets[keep]
                x = features[torch.from_numpy(idx)]
                tar_t = torch.from_numpy(tar)
                anchors = torch.from_numpy(
                    _pick_anchors(anchor_set, tar, config.anchor_mode, rng_anchor)
                ).float()

                adv = smooth_and_clip(generator_net(x, tar_t), x, config)
                z = surrogate(adv)
                if use_mixup:
                    x_aug = augmentation(x, rng_aug)
                    adv_aug = smooth_and_clip(generator_net(x_aug, tar_t), x_aug, config)
                    z_aug = surrogate(adv_aug)
                    if zeta_override is None:
                        zeta = torch.from_numpy(
                            sample_zeta(config.nu, rng_zeta, size=len(tar))
                        ).to(z.dtype)
                    else:
                        zeta = torch.full((len(tar),), float(zeta_override), dtype=z.dtype)
                    z = bem_mix(z, z_aug, zeta)

                loss = easy_match_loss_terms(z, anchors, tar_t)
                if config.distortion_weight > 0:
                    loss = loss + config.distortion_weight * F.mse_loss(adv, x)

                value = float(loss.detach())
                if not math.isfinite(value):
                    generator_net.load_state_dict(last_good)
                    raise TrainingDivergedError(
                        f"loss became non-finite at epoch {epoch}, restored last good weights"
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                last_good = {k: v.detach().clone() for k, v in generator_net.state_dict().items()}
                log.losses.append(value)
                steps_done += 1
                if max_steps is not None and steps_done >= max_steps:
                    log.epochs = epoch + 1
                    return log
            log.epochs = epoch + 1
        return log
    finally:
        generator_net.eval()
        for p, flag in zip(surrogate.parameters(), surrogate_grad_flags):
            p.requires_grad_(flag)


def train_esma(
    generator_net: ConditionalUnet,
    surrogate: nn.Module,
    dataset: LabeledDataset,
    anchor_set: AnchorSet,
    config: GeneratorConfig,
    epochs: int,
    seed: int = 0,
    max_steps: int | None = None,
) -> TrainLog:
    """Train the generator on the plain easy-sample matching objective."""
    return _run_training(
        generator_net, surrogate, dataset, anchor_set, config, epochs, seed,
        max_steps=max_steps,
    )


def train_bem_esma(
    generator_net: ConditionalUnet,
    surrogate: nn.Module,
    dataset: LabeledDataset,
    anchor_set: AnchorSet,
    config: GeneratorConfig,
    epochs: int,
    seed: int = 0,
    augmentation=default_augmentation,
    zeta_override: float | None = None,
    max_steps: int | None = None,
) -> TrainLog:
    """Train with bottleneck-enhanced mixup of original/augmented features.

    With the identity augmentation and ``zeta_override=1.0`` every step
    reduces exactly to the plain strategy (same losses under a shared seed).
    """
    return _run_training(
        generator_net, surrogate, dataset, anchor_set, config, epochs, seed,
        augmentation=augmentation, zeta_override=zeta_override, use_mixup=True,
        max_steps=max_steps,
    )


def generate_adversarial(
    generator_net: ConditionalUnet,
    images: np.ndarray,
    targets: np.ndarray,
    config: GeneratorConfig,
    labels: np.ndarray | None = None,
    batch_size: int = 64,
) -> AdversarialBatch:
    """Batched inference through the smoothing/projection pipeline.

    Deterministic: no randomness is consumed. When source labels are given,
    samples with label == target get a skip flag.
    """
    images = np.asarray(images, dtype=np.float32)
    targets = np.asarray(targets, dtype=np.int64)
    if len(images) != len(targets):
        raise ValueError("images and targets must align")
    generator_net.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = torch.from_numpy(images[start : start + batch_size])
            t = torch.from_numpy(targets[start : start + batch_size])
            adv = smooth_and_clip(generator_net(x, t), x, config)
            chunks.append(adv.numpy())
    adversarials = (
        np.concatenate(chunks, axis=0) if chunks else np.zeros_like(images)
    )
    skipped = (
        np.asarray(labels) == targets if labels is not None
        else np.zeros(len(targets), dtype=bool)
    )
    return AdversarialBatch(
        originals=images, targets=targets, adversarials=adversarials, skipped=skipped
    )
