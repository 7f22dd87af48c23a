"""Protocol orchestration: ablations, transfer matrices, watermark sweeps.

Each protocol trains its models (cached by content hash), runs the attack,
and persists an :class:`AttackReport` whose cells all carry their sample
counts so every rate can be recomputed from the per-sample rows. Reports
are pure functions of (config, seed, cached artifacts).
"""

from __future__ import annotations

import json
import os
import platform
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import __version__
from .cache import ArtifactCache, config_hash
from .data import LabeledDataset
from .datasets import make_cover_images, make_desk_dataset
from .density import DensityQuery, ball_count
from .embeddings import EmbeddingBank, class_mean_features, pretrain_embeddings
from .generator import (
    AdversarialBatch,
    ConditionalUnet,
    GeneratorConfig,
    build_generator,
    generate_adversarial,
    train_bem_esma,
    train_esma,
)
from .models import CNN_ARCHITECTURES, TrainConfig, build_cnn, predict_labels, predict_logits, train_classifier
from .rng import derive_seed, generator as make_rng
from .screening import AnchorSet, screen_anchors
from .watermark import (
    MessagePool,
    build_message_pools,
    erasure_bit_error_rate,
    erasure_detection_rate,
    gaussian_baseline,
    tamper_bit_metric,
    tamper_detection_rate,
    train_hidden_like,
)
from .watermark.metrics import mean_psnr

PROTOCOLS = (
    "table1_ablation",
    "transfer_matrix",
    "density_shift",
    "exp1",
    "exp2",
    "exp3-lite",
)
ATTACK_METHODS = (
    "esma",
    "bem_esma",
    "gaussian",
    "ce_iterative",
    "square_random_anchor",
    "square_screened_anchor",
)


class MissingArtifactError(FileNotFoundError):
    """A referenced artifact does not exist; carries the artifact id."""


@dataclass
class ExperimentConfig:
    """One experiment cell grid: protocol plus its model/dataset/attack knobs."""

    protocol: str
    source_models: list[str] = field(default_factory=lambda: ["convnet"])
    victim_models: list[str] = field(default_factory=list)
    attack: str = "esma"
    dataset: dict = field(default_factory=dict)
    lengths: list[int] = field(default_factory=lambda: [5, 10, 15, 20, 25, 30])
    seeds: list[int] = field(default_factory=lambda: [0])
    epsilon: float = 16.0 / 255.0
    q: int = 2
    nu: float = 1.0
    kernel_sigma: float = 1.0
    distortion_weight: float = 150.0
    regimes: list[str] = field(default_factory=lambda: ["nonoise", "crop", "jpeg", "combined"])
    radius: float | None = None
    radius_factors: list[float] = field(default_factory=lambda: [0.5])
    n_bins: int = 10
    target_mode: str = "assigned"
    image_size: int = 32
    n_per_class: int = 60
    n_covers: int = 240
    n_test: int = 60
    generator_epochs: int = 40
    generator_lr: float = 1e-4
    generator_width: int = 32
    generator_depth: int = 3
    embed_width: int | None = None
    classifier_epochs: int = 25
    watermark_epochs: int = 40
    watermark_target_psnr: float = 31.0
    iterations: int = 20

    def __post_init__(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}; choose from {PROTOCOLS}")
        if self.attack not in ATTACK_METHODS:
            raise ValueError(f"unknown attack {self.attack!r}; choose from {ATTACK_METHODS}")
        overlap = set(self.source_models) & set(self.victim_models)
        if overlap:
            raise ValueError(f"victim models must be disjoint from sources, got {overlap}")
        if self.target_mode not in ("assigned", "all"):
            raise ValueError("target_mode must be 'assigned' or 'all'")

    def to_dict(self) -> dict:
        return asdict(self)


def environment_fingerprint() -> dict:
    return {
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "platform": platform.platform(),
        "toolkit": __version__,
    }


@dataclass
class AttackReport:
    """Persisted record of one experiment run."""

    config: dict
    config_hash: str
    cells: list[dict] = field(default_factory=list)
    per_sample: list[dict] = field(default_factory=list)
    wall_clock_s: float = 0.0
    environment: dict = field(default_factory=environment_fingerprint)
    created: str = ""
    incomplete: bool = False
    notes: list[str] = field(default_factory=list)

    def add_cell(self, metric: str, value: float, n: int, **keys) -> None:
        self.cells.append({"metric": metric, "value": float(value), "n": int(n), **keys})

    def cell_value(self, metric: str, **keys) -> float:
        matches = [
            c["value"]
            for c in self.cells
            if c["metric"] == metric and all(c.get(k) == v for k, v in keys.items())
        ]
        if len(matches) != 1:
            raise KeyError(f"{len(matches)} cells match metric={metric} keys={keys}")
        return matches[0]

    def _crosscheck(self) -> None:
        """Rates must be recomputable from the per-sample rows."""
        for cell in self.cells:
            if not cell.get("recheck"):
                continue
            rows = [
                r
                for r in self.per_sample
                if r.get("metric") == cell["metric"]
                and all(r.get(k) == cell[k] for k in cell.get("recheck"))
            ]
            if rows:
                recomputed = float(np.mean([r["value"] for r in rows]))
                if abs(recomputed - cell["value"]) > 1e-9:
                    raise AssertionError(
                        f"cell {cell['metric']} not reproducible from rows: "
                        f"{cell['value']} vs {recomputed}"
                    )

    def save(self, out_dir: str | Path) -> Path:
        """Write config/report/samples into one directory, atomically."""
        self._crosscheck()
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        payload = {
            "config": self.config,
            "config_hash": self.config_hash,
            "cells": self.cells,
            "wall_clock_s": self.wall_clock_s,
            "environment": self.environment,
            "created": self.created,
            "incomplete": self.incomplete,
            "notes": self.notes,
        }
        for name, blob in [
            ("config.json", json.dumps(self.config, indent=1)),
            ("report.json", json.dumps(payload, indent=1)),
        ]:
            fd, tmp = tempfile.mkstemp(dir=out_dir)
            os.close(fd)
            Path(tmp).write_text(blob)
            os.replace(tmp, out_dir / name)
        if self.per_sample:
            keys = sorted({k for row in self.per_sample for k in row})
            lines = [",".join(keys)]
            for row in self.per_sample:
                lines.append(",".join(str(row.get(k, "")) for k in keys))
            fd, tmp = tempfile.mkstemp(dir=out_dir)
            os.close(fd)
            Path(tmp).write_text("\n".join(lines) + "\n")
            os.replace(tmp, out_dir / "samples.csv")
        return out_dir

    @classmethod
    def load(cls, out_dir: str | Path) -> "AttackReport":
        payload = json.loads((Path(out_dir) / "report.json").read_text())
        return cls(
            config=payload["config"],
            config_hash=payload["config_hash"],
            cells=payload["cells"],
            wall_clock_s=payload["wall_clock_s"],
            environment=payload["environment"],
            created=payload["created"],
            incomplete=payload["incomplete"],
            notes=payload["notes"],
        )

    def summary_table(self) -> str:
        lines = [f"protocol={self.config.get('protocol')} hash={self.config_hash[:12]}"]
        for cell in self.cells:
            keys = {
                k: v for k, v in cell.items() if k not in ("metric", "value", "n", "recheck")
            }
            key_str = " ".join(f"{k}={v}" for k, v in sorted(keys.items()))
            lines.append(f"  {cell['metric']:<28} {cell['value']:>10.4f}  n={cell['n']:<5} {key_str}")
        return "\n".join(lines)


class EnsembleModel(nn.Module):
    """Source ensemble: the mean of the member logits (one member = identity)."""

    def __init__(self, members: list[nn.Module]):
        super().__init__()
        if not members:
            raise ValueError("ensemble needs at least one member")
        self.members = nn.ModuleList(members)

    def forward(self, x):
        logits = [m(x) for m in self.members]
        return torch.stack(logits, dim=0).mean(dim=0)


# --------------------------------------------------------------------------
# shared building blocks
# --------------------------------------------------------------------------


def targeted_transfer_success(victims: list[nn.Module], batch: AdversarialBatch) -> list[float]:
    """Per-victim fraction of (non-skipped) adversarials classified as target."""
    keep = ~batch.skipped
    if not keep.any():
        return [0.0 for _ in victims]
    adv = batch.adversarials[keep]
    targets = batch.targets[keep]
    rates = []
    for victim in victims:
        preds = predict_labels(victim, adv)
        rates.append(float((preds == targets).mean()))
    return rates


def iterative_targeted_attack(
    model: nn.Module,
    images: np.ndarray,
    targets: np.ndarray,
    loss_variant: str,
    epsilon: float,
    steps: int = 20,
    momentum: float = 1.0,
    anchors: np.ndarray | None = None,
) -> np.ndarray:
    """Momentum-iterative targeted attack with a pluggable per-variant loss.

    Step size is epsilon/steps; the accumulated gradient is L1-normalized
    per sample before the momentum update, and every iterate is projected
    onto the epsilon ball intersected with [0, 1]. Variants: ``ce``
    descends cross-entropy toward the target; the square variants descend
    ``|f(x) - a|^2`` against a per-sample anchor logit vector in
    ``anchors`` (random in-class sample vs screened easy-sample mean).
    """
    if loss_variant not in ("ce", "square_random_anchor", "square_screened_anchor"):
        raise ValueError(f"unknown loss variant {loss_variant!r}")
    if loss_variant != "ce" and anchors is None:
        raise ValueError("square variants need per-sample anchors")
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    x0 = torch.from_numpy(np.asarray(images, dtype=np.float32))
    tar = torch.from_numpy(np.asarray(targets, dtype=np.int64))
    anchor_t = None if anchors is None else torch.from_numpy(np.asarray(anchors, dtype=np.float32))
    alpha = epsilon / steps
    x = x0.clone()
    g = torch.zeros_like(x0)
    for _ in range(steps):
        x = x.detach().requires_grad_(True)
        logits = model(x)
        if loss_variant == "ce":
            loss = F.cross_entropy(logits, tar, reduction="sum")
        else:
            loss = ((logits - anchor_t) ** 2).sum()
        (grad,) = torch.autograd.grad(loss, x)
        flat_l1 = grad.abs().flatten(1).sum(dim=1).clamp_min(1e-12)
        g = momentum * g + grad / flat_l1[:, None, None, None]
        x = x.detach() - alpha * g.sign()
        x = torch.minimum(torch.maximum(x, x0 - epsilon), x0 + epsilon).clamp(0.0, 1.0)
    return x.detach().numpy()


def draw_targets(labels: np.ndarray, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform target per sample, excluding the sample's own class."""
    targets = np.zeros_like(labels)
    for i, lab in enumerate(labels):
        t = int(rng.integers(0, n_classes - 1))
        targets[i] = t if t < lab else t + 1
    return targets


def density_shift_report(
    clean_images: np.ndarray,
    adversarial_images: np.ndarray,
    reference: LabeledDataset,
    targets: np.ndarray,
    r: float,
    n_bins: int = 10,
    target_mode: str = "assigned",
) -> dict:
    """Target-class neighborhood mass around clean vs attacked images.

    Per sample, the number of reference samples of the target class within
    radius r (count-only density: at image dimensionality the shared ball
    volume cancels once values are max-normalized). ``assigned`` scores the
    sample's own target; ``all`` averages over every class. Values from
    both populations are normalized by their joint maximum and binned into
    ``n_bins`` equal-width bins.
    """
    if r <= 0:
        raise ValueError("r must be positive")
    if target_mode not in ("assigned", "all"):
        raise ValueError("target_mode must be 'assigned' or 'all'")
    clean = np.asarray(clean_images, dtype=np.float64)
    adv = np.asarray(adversarial_images, dtype=np.float64)
    if clean.shape != adv.shape:
        raise ValueError("clean and adversarial batches must align")

    def score(images: np.ndarray) -> np.ndarray:
        values = np.zeros(len(images))
        for i, img in enumerate(images):
            if target_mode == "assigned":
                classes = [int(targets[i])]
            else:
                classes = list(range(reference.n_classes))
            counts = [
                ball_count(reference, DensityQuery(c, img.ravel(), r)) for c in classes
            ]
            values[i] = float(np.mean(counts))
        return values

    clean_scores = score(clean)
    adv_scores = score(adv)
    peak = max(clean_scores.max(), adv_scores.max())
    if peak <= 0:
        clean_norm, adv_norm = clean_scores, adv_scores
    else:
        clean_norm, adv_norm = clean_scores / peak, adv_scores / peak

    edges = np.linspace(0.0, 1.0, n_bins + 1)
    bin_of = lambda v: np.minimum((v * n_bins).astype(int), n_bins - 1)  # noqa: E731
    clean_counts = np.bincount(bin_of(clean_norm), minlength=n_bins)
    adv_counts = np.bincount(bin_of(adv_norm), minlength=n_bins)
    return {
        "r": r,
        "bin_edges": edges.tolist(),
        "clean_counts": clean_counts.tolist(),
        "adversarial_counts": adv_counts.tolist(),
        "clean_normalized": clean_norm.tolist(),
        "adversarial_normalized": adv_norm.tolist(),
    }


# --------------------------------------------------------------------------
# cached trainers
# --------------------------------------------------------------------------


def _dataset_params(config: ExperimentConfig) -> dict:
    base = {
        "builtin": "desk10",
        "n_per_class": config.n_per_class,
        "size": config.image_size,
        "seed": 0,
    }
    base.update(config.dataset)
    return base


def _make_dataset(params: dict, test: bool = False) -> LabeledDataset:
    params = dict(params)
    if params.pop("builtin", "desk10") != "desk10":
        raise MissingArtifactError(f"unknown dataset artifact {params}")
    seed = params["seed"] + (1000 if test else 0)
    return make_desk_dataset(
        n_per_class=params["n_per_class"] if not test else max(10, params["n_per_class"] // 3),
        size=params["size"],
        seed=seed,
    )


def cached_classifier(
    cache: ArtifactCache,
    arch: str,
    dataset: LabeledDataset,
    dataset_key: dict,
    epochs: int,
    seed: int,
) -> nn.Module:
    """Train or load one small CNN keyed by (arch, dataset, training knobs)."""
    key = config_hash(
        {"kind": "classifier", "arch": arch, "dataset": dataset_key, "epochs": epochs, "seed": seed}
    )
    model = build_cnn(arch, dataset.features.shape[1], dataset.n_classes, seed=seed)
    state = cache.load_torch("classifiers", key)
    if state is not None:
        model.load_state_dict(state)
        model.eval()
        return model
    train_classifier(
        model,
        dataset,
        TrainConfig(
            max_epochs=epochs, lr=1e-3, optimizer="adam", batch_size=32,
            patience=8, seed=seed, target_val_accuracy=0.99,
        ),
    )
    cache.save_torch("classifiers", key, model.state_dict())
    return model


def train_esma_pipeline(
    cache: ArtifactCache,
    surrogate: nn.Module,
    surrogate_key: dict,
    dataset: LabeledDataset,
    gen_config: GeneratorConfig,
    epochs: int,
    seed: int,
    q: int,
    use_bem: bool = False,
    embed_width: int | None = None,
) -> tuple[ConditionalUnet, AnchorSet]:
    """Anchors -> embedding pretrain -> generator training, all cached."""
    pipeline_key = config_hash(
        {
            "kind": "esma-generator",
            "surrogate": surrogate_key,
            "gen": vars(gen_config),
            "epochs": epochs,
            "seed": seed,
            "q": q,
            "bem": use_bem,
            "embed_width": embed_width,
        }
    )
    anchors = screen_anchors(surrogate, dataset, q=q)
    means = class_mean_features(surrogate, dataset)
    width = embed_width or means.shape[1]
    bank = EmbeddingBank(
        embeddings=make_rng(seed, "embed-init").standard_normal((means.shape[0], width)),
        class_means=means,
    )
    bank, _ = pretrain_embeddings(bank, step_size=0.05, steps=300)

    generator_net = build_generator(gen_config, embed_width=bank.width, seed=seed)
    generator_net.load_embeddings(bank.embeddings)
    state = cache.load_torch("generators", pipeline_key)
    if state is not None:
        generator_net.load_state_dict(state)
        generator_net.eval()
        return generator_net, anchors
    trainer = train_bem_esma if use_bem else train_esma
    trainer(generator_net, surrogate, dataset, anchors, gen_config, epochs=epochs, seed=seed)
    cache.save_torch("generators", pipeline_key, generator_net.state_dict())
    return generator_net, anchors


# --------------------------------------------------------------------------
# protocol implementations
# --------------------------------------------------------------------------


def _run_table1_ablation(config: ExperimentConfig, cache: ArtifactCache, report: AttackReport):
    params = _dataset_params(config)
    train_set = _make_dataset(params)
    test_set = _make_dataset(params, test=True)
    seed = config.seeds[0]
    archs = config.source_models + [
        a for a in config.victim_models if a not in config.source_models
    ]
    if not config.victim_models:
        archs = list(CNN_ARCHITECTURES)
    models = {
        arch: cached_classifier(cache, arch, train_set, params, config.classifier_epochs, seed)
        for arch in archs
    }

    rng = make_rng(seed, "ablation-targets")
    targets = draw_targets(test_set.labels, test_set.n_classes, rng)
    logits_cache = {arch: predict_logits(models[arch], train_set.features) for arch in archs}

    for source in archs:
        source_model = models[source]
        anchor_set = screen_anchors(source_model, train_set, q=config.q)
        rng_anchor = make_rng(seed, "ablation-random-anchor", source)
        random_anchor_rows = np.zeros((len(test_set), train_set.n_classes))
        screened_rows = np.zeros((len(test_set), train_set.n_classes))
        for i, t in enumerate(targets):
            pool = train_set.class_indices(int(t))
            random_anchor_rows[i] = logits_cache[source][
                pool[int(rng_anchor.integers(0, len(pool)))]
            ]
            screened_rows[i] = anchor_set.anchors[int(t)]

        variant_anchors = {
            "ce": None,
            "square_random_anchor": random_anchor_rows,
            "square_screened_anchor": screened_rows,
        }
        victims = [a for a in archs if a != source]
        for variant, anchor_rows in variant_anchors.items():
            adv = iterative_targeted_attack(
                source_model,
                test_set.features,
                targets,
                variant,
                epsilon=config.epsilon,
                steps=config.iterations,
                anchors=anchor_rows,
            )
            batch = AdversarialBatch(
                originals=test_set.features, targets=targets, adversarials=adv
            )
            rates = targeted_transfer_success([models[v] for v in victims], batch)
            for victim, rate in zip(victims, rates):
                preds = predict_labels(models[victim], adv)
                for i in range(len(test_set)):
                    report.per_sample.append(
                        {
                            "metric": "transfer_success",
                            "source": source,
                            "victim": victim,
                            "variant": variant,
                            "index": i,
                            "value": int(preds[i] == targets[i]),
                        }
                    )
                report.add_cell(
                    "transfer_success",
                    rate,
                    len(test_set),
                    source=source,
                    victim=victim,
                    variant=variant,
                    recheck=["source", "victim", "variant"],
                )


def _run_transfer_matrix(config: ExperimentConfig, cache: ArtifactCache, report: AttackReport):
    params = _dataset_params(config)
    train_set = _make_dataset(params)
    test_set = _make_dataset(params, test=True)
    seed = config.seeds[0]

    members = [
        cached_classifier(cache, arch, train_set, params, config.classifier_epochs, seed)
        for arch in config.source_models
    ]
    surrogate = members[0] if len(members) == 1 else EnsembleModel(members)
    surrogate_key = {"archs": config.source_models, "dataset": params, "seed": seed}
    victims = {
        arch: cached_classifier(cache, arch, train_set, params, config.classifier_epochs, seed)
        for arch in config.victim_models
    }

    gen_config = GeneratorConfig(
        n_classes=train_set.n_classes,
        epsilon=config.epsilon,
        nu=config.nu,
        kernel_sigma=config.kernel_sigma,
        lr=config.generator_lr,
        base_width=config.generator_width,
        depth=config.generator_depth,
        in_channels=train_set.features.shape[1],
    )
    generator_net, _ = train_esma_pipeline(
        cache, surrogate, surrogate_key, train_set, gen_config,
        epochs=config.generator_epochs, seed=seed, q=config.q,
        use_bem=config.attack == "bem_esma", embed_width=config.embed_width,
    )
    rng = make_rng(seed, "transfer-targets")
    targets = draw_targets(test_set.labels, test_set.n_classes, rng)
    batch = generate_adversarial(
        generator_net, test_set.features, targets, gen_config, labels=test_set.labels
    )
    whitebox = targeted_transfer_success([surrogate], batch)[0]
    report.add_cell("whitebox_success", whitebox, int((~batch.skipped).sum()), source="+".join(config.source_models))
    for arch, victim in victims.items():
        rate = targeted_transfer_success([victim], batch)[0]
        report.add_cell(
            "transfer_success", rate, int((~batch.skipped).sum()),
            source="+".join(config.source_models), victim=arch, variant=config.attack,
        )


def _run_density_shift(config: ExperimentConfig, cache: ArtifactCache, report: AttackReport):
    params = _dataset_params(config)
    train_set = _make_dataset(params)
    test_set = _make_dataset(params, test=True)
    base_seed = config.seeds[0]

    surrogate = cached_classifier(
        cache, config.source_models[0], train_set, params, config.classifier_epochs, base_seed
    )
    surrogate_key = {"archs": config.source_models[:1], "dataset": params, "seed": base_seed}
    gen_config = GeneratorConfig(
        n_classes=train_set.n_classes,
        epsilon=config.epsilon,
        nu=config.nu,
        kernel_sigma=config.kernel_sigma,
        lr=config.generator_lr,
        base_width=config.generator_width,
        depth=config.generator_depth,
        in_channels=train_set.features.shape[1],
    )
    generator_net, _ = train_esma_pipeline(
        cache, surrogate, surrogate_key, train_set, gen_config,
        epochs=config.generator_epochs, seed=base_seed, q=config.q,
        use_bem=config.attack == "bem_esma", embed_width=config.embed_width,
    )

    if config.radius is not None:
        radii = [config.radius]
    else:
        matrix = train_set.as_matrix()
        sample = matrix[make_rng(base_seed, "radius-sample").permutation(len(matrix))[:200]]
        diffs = sample[:, None, :] - sample[None, :, :]
        median_dist = float(np.median(np.sqrt((diffs**2).sum(-1))))
        radii = [f * median_dist for f in config.radius_factors]

    for seed in config.seeds:
        rng = make_rng(seed, "density-targets")
        targets = draw_targets(test_set.labels, test_set.n_classes, rng)
        batch = generate_adversarial(
            generator_net, test_set.features, targets, gen_config, labels=test_set.labels
        )
        for r in radii:
            shift = density_shift_report(
                batch.originals, batch.adversarials, train_set, targets, r,
                n_bins=config.n_bins, target_mode=config.target_mode,
            )
            clean_mean = float(np.mean(shift["clean_normalized"]))
            adv_mean = float(np.mean(shift["adversarial_normalized"]))
            report.add_cell("clean_density_mean", clean_mean, len(test_set), seed=seed, r=round(r, 6))
            report.add_cell("adversarial_density_mean", adv_mean, len(test_set), seed=seed, r=round(r, 6))
            report.notes.append(json.dumps({"seed": seed, **shift}))


def _encode_enterprise_datasets(
    models: dict, pools: list[MessagePool], covers: np.ndarray, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Encode the covers once per enterprise with its active messages."""
    images, labels = [], []
    rng = make_rng(seed, "pool-encoding")
    for ent, (tag, model) in enumerate(models.items()):
        active = pools[ent].active_messages()
        picks = rng.integers(0, len(active), size=len(covers))
        messages = active[picks].astype(np.float32)
        images.append(model.encode(covers, messages))
        labels.append(np.full(len(covers), ent, dtype=np.int64))
    return np.concatenate(images), np.concatenate(labels)


def _run_watermark_experiment(config: ExperimentConfig, cache: ArtifactCache, report: AttackReport):
    """Shared body of exp1/exp2/exp3-lite: train, attack, measure, per L."""
    n_p = 1 if config.protocol == "exp1" else 8
    seed = config.seeds[0]
    size = config.image_size

    if config.protocol == "exp3-lite":
        enterprises = [("hidden", "combined"), ("stable_signature", None), ("fed", None)]
    else:
        enterprises = [(f"hidden", regime) for regime in config.regimes]

    covers_train = make_cover_images(config.n_covers, size=size, seed=derive_seed(seed, "covers-train"))
    covers_test = make_cover_images(config.n_test, size=size, seed=derive_seed(seed, "covers-test"))

    for length in config.lengths:
        pools = build_message_pools(len(enterprises), n_p, length, seed=derive_seed(seed, "pools", str(length)))
        models = {}
        skipped_tags = []
        for ent, (family, regime) in enumerate(enterprises):
            if family != "hidden":
                skipped_tags.append((ent, family))
                continue
            wm_key = config_hash(
                {
                    "kind": "watermark",
                    "family": family,
                    "regime": regime,
                    "L": length,
                    "size": size,
                    "n_covers": config.n_covers,
                    "epochs": config.watermark_epochs,
                    "target_psnr": config.watermark_target_psnr,
                    "seed": seed,
                }
            )
            cached = cache.load_torch("watermarks", wm_key)
            model = train_hidden_like(
                covers_train, length, regime, epochs=0 if cached else config.watermark_epochs,
                target_psnr=config.watermark_target_psnr,
                seed=derive_seed(seed, "wm", regime or family, str(length)),
            )
            if cached:
                model.load_state_dict(cached["state"])
                model.val_bit_accuracy = cached["val_bit_accuracy"]
                model.converged = cached["converged"]
            else:
                cache.save_torch(
                    "watermarks", wm_key,
                    {"state": model.state_dict(), "val_bit_accuracy": model.val_bit_accuracy,
                     "converged": model.converged},
                )
            models[f"{family}:{regime}"] = model
            report.add_cell(
                "watermark_val_bit_accuracy", model.val_bit_accuracy, 1,
                L=length, enterprise=ent, regime=regime,
            )

        for ent, family in skipped_tags:
            report.add_cell("skipped", 1.0, 0, L=length, enterprise=ent, family=family)
            report.incomplete = True

        n_ent = len(models)
        if n_ent < 2:
            report.notes.append(f"L={length}: fewer than 2 trained enterprises, skipping attacks")
            continue

        encoded_train, ent_labels = _encode_enterprise_datasets(models, pools, covers_train, seed)
        encoded_test, test_labels = _encode_enterprise_datasets(models, pools, covers_test, seed)
        wm_train_set = LabeledDataset(encoded_train, ent_labels, n_classes=n_ent)

        surrogate_key = {
            "kind": "wm-surrogate", "L": length, "size": size, "regimes": config.regimes,
            "protocol": config.protocol, "seed": seed, "n_covers": config.n_covers,
        }
        surrogate = cached_classifier(
            cache, config.source_models[0], wm_train_set, surrogate_key,
            config.classifier_epochs, seed,
        )

        gen_config = GeneratorConfig(
            n_classes=n_ent,
            nu=config.nu,
            kernel_sigma=config.kernel_sigma,
            lr=config.generator_lr,
            base_width=config.generator_width,
            depth=config.generator_depth,
            distortion_weight=config.distortion_weight,
            epsilon_clip=False,
            in_channels=3,
        )
        generator_net, _ = train_esma_pipeline(
            cache, surrogate, surrogate_key, wm_train_set, gen_config,
            epochs=config.generator_epochs, seed=seed, q=config.q,
            use_bem=config.attack == "bem_esma", embed_width=config.embed_width,
        )

        rng = make_rng(seed, "wm-attack-targets", str(length))
        attack_targets = draw_targets(test_labels, n_ent, rng)
        batch = generate_adversarial(
            generator_net, encoded_test, attack_targets, gen_config, labels=test_labels
        )
        attacked = batch.adversarials
        attack_psnr = mean_psnr(attacked, encoded_test)
        report.add_cell("attack_psnr", attack_psnr, len(attacked), L=length, attack=config.attack)
        wm_psnr = mean_psnr(
            encoded_test, np.tile(covers_test, (n_ent, 1, 1, 1))
        )
        report.add_cell("watermark_psnr", wm_psnr, len(encoded_test), L=length)

        noisy, gauss_psnr, reached = gaussian_baseline(
            encoded_test, target_psnr=attack_psnr, seed=derive_seed(seed, "gauss", str(length))
        )
        report.add_cell("gaussian_psnr", gauss_psnr, len(noisy), L=length, reached=reached)

        for ent, (tag, model) in enumerate(models.items()):
            own = test_labels == ent
            foreign = ~own
            for attack_name, attacked_images in [(config.attack, attacked), ("gaussian", noisy)]:
                e_bit = erasure_bit_error_rate(model, encoded_test[own], attacked_images[own])
                e_det = erasure_detection_rate(model, encoded_test[own], attacked_images[own])
                t_bit = tamper_bit_metric(model, attacked_images[foreign], pools[ent], mode="closest")
                t_bit_printed = tamper_bit_metric(
                    model, attacked_images[foreign], pools[ent], mode="as_printed"
                )
                t_det = tamper_detection_rate(model, attacked_images[foreign], pools[ent])
                n_own, n_foreign = int(own.sum()), int(foreign.sum())
                report.add_cell("erasure_bit_error", e_bit, n_own, L=length, enterprise=ent, regime=tag, attack=attack_name)
                report.add_cell("erasure_detection", e_det, n_own, L=length, enterprise=ent, regime=tag, attack=attack_name)
                report.add_cell("tamper_bit_error_closest", t_bit, n_foreign, L=length, enterprise=ent, regime=tag, attack=attack_name)
                report.add_cell("tamper_bit_error_printed", t_bit_printed, n_foreign, L=length, enterprise=ent, regime=tag, attack=attack_name)
                report.add_cell("tamper_detection", t_det, n_foreign, L=length, enterprise=ent, regime=tag, attack=attack_name)


def run_experiment(
    config: ExperimentConfig,
    cache_dir: str | Path | None = None,
    out_dir: str | Path | None = None,
    verbose: bool = True,
) -> AttackReport:
    """Execute one protocol end to end and persist the report."""
    cache = ArtifactCache(cache_dir)
    started = time.time()
    report = AttackReport(
        config=config.to_dict(),
        config_hash=config_hash(config.to_dict()),
        created=time.strftime("%Y-%m-%dT%H:%M:%S"),
    )
    runners = {
        "table1_ablation": _run_table1_ablation,
        "transfer_matrix": _run_transfer_matrix,
        "density_shift": _run_density_shift,
        "exp1": _run_watermark_experiment,
        "exp2": _run_watermark_experiment,
        "exp3-lite": _run_watermark_experiment,
    }
    runners[config.protocol](config, cache, report)
    report.wall_clock_s = time.time() - started
    if out_dir is not None:
        report.save(Path(out_dir))
    if verbose:
        print(report.summary_table())
    return report
