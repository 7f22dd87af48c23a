"""Command-line entry point wiring every subcommand.

Subcommands: toy-density, screen-anchors, pretrain-embeddings, train-esma,
train-bem-esma, attack, train-watermark, make-pools, eval-watermark, run,
plots. Shared flags: --config, --seed, --cache-dir, --plots, --out.

Exit codes: 0 success, 2 config error, 3 missing artifact,
4 numeric failure (divergence / non-finite results).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ARTIFACT = 3
EXIT_NUMERIC = 4


def _write_manifest(out_dir: Path, subcommand: str, config: dict, seed: int,
                    consumed: list[str], produced: list[str], started: float) -> None:
    from .cache import config_hash

    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "artifacts_consumed": consumed,
        "artifacts_produced": produced,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))


def _surrogate_on_desk(args):
    """Shared setup: desk dataset + trained surrogate CNN."""
    from .datasets import make_desk_dataset
    from .models import TrainConfig, build_cnn, train_classifier

    dataset = make_desk_dataset(args.n_per_class, size=args.image_size, seed=args.seed)
    model = build_cnn(args.arch, 3, dataset.n_classes, seed=args.seed)
    train_classifier(
        model,
        dataset,
        TrainConfig(max_epochs=args.classifier_epochs, lr=0.05, seed=args.seed,
                    target_val_accuracy=0.99),
    )
    return dataset, model


def _cmd_toy_density(args) -> int:
    from .plots import plot_consistency_curves
    from .toylab import ToyTask, consistency_report, make_toy_dataset, train_toy_models

    started = time.time()
    task = ToyTask(n_samples=args.n_samples, seed=args.seed)
    dataset = make_toy_dataset(task)
    models, results = train_toy_models(dataset)
    report = consistency_report(models, dataset, r=args.radius)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "radius": report.radius,
        "spearman": report.spearman,
        "curves": {
            name: {
                "means": getattr(report, name).means.tolist(),
                "counts": getattr(report, name).counts.tolist(),
            }
            for name in (
                "difference_vs_density", "risk_vs_lossgrad",
                "risk_vs_density", "density_vs_lossgrad",
            )
        },
        "train_accuracy": [r.train_accuracy for r in results],
    }
    (out_dir / "toy_density.json").write_text(json.dumps(payload, indent=1))
    produced = [str(out_dir / "toy_density.json")]
    if args.plots:
        produced += [str(p) for p in plot_consistency_curves(report, out_dir, "toy")]
    _write_manifest(out_dir, "toy-density", vars(args) | {"func": None}, args.seed, [], produced, started)
    print(json.dumps(report.spearman, indent=1))
    return EXIT_OK


def _cmd_screen_anchors(args) -> int:
    from .screening import screen_anchors

    started = time.time()
    dataset, model = _surrogate_on_desk(args)
    anchors = screen_anchors(model, dataset, q=args.q)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    anchors.save(out)
    _write_manifest(out.parent, "screen-anchors", vars(args) | {"func": None}, args.seed, [], [str(out)], started)
    print(f"anchors for {anchors.n_classes} classes -> {out}")
    return EXIT_OK


def _cmd_pretrain_embeddings(args) -> int:
    from .embeddings import EmbeddingBank, class_mean_features, pretrain_embeddings
    from .rng import generator as make_rng

    started = time.time()
    dataset, model = _surrogate_on_desk(args)
    means = class_mean_features(model, dataset)
    bank = EmbeddingBank(
        embeddings=make_rng(args.seed, "embed-init").standard_normal(means.shape),
        class_means=means,
    )
    bank, trajectory = pretrain_embeddings(bank, step_size=args.step_size, steps=args.steps)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    bank.save(out)
    _write_manifest(out.parent, "pretrain-embeddings", vars(args) | {"func": None}, args.seed, [], [str(out)], started)
    print(f"embedding bank K={bank.n_classes} width={bank.width} "
          f"loss {trajectory[0]:.4f} -> {trajectory[-1]:.4f} -> {out}")
    return EXIT_OK


def _train_generator(args, use_bem: bool) -> int:
    from .cache import config_hash
    from .embeddings import EmbeddingBank, class_mean_features, pretrain_embeddings
    from .generator import GeneratorConfig, build_generator, train_bem_esma, train_esma
    from .rng import generator as make_rng
    from .screening import screen_anchors

    started = time.time()
    dataset, surrogate = _surrogate_on_desk(args)
    anchors = screen_anchors(surrogate, dataset, q=args.q)
    means = class_mean_features(surrogate, dataset)
    bank = EmbeddingBank(
        embeddings=make_rng(args.seed, "embed-init").standard_normal(means.shape),
        class_means=means,
    )
    bank, _ = pretrain_embeddings(bank, steps=300)
    config = GeneratorConfig(
        n_classes=dataset.n_classes,
        epsilon=args.epsilon,
        nu=args.nu,
        distortion_weight=args.distortion_weight,
        epsilon_clip=args.distortion_weight == 0,
    )
    net = build_generator(config, embed_width=bank.width, seed=args.seed)
    net.load_embeddings(bank.embeddings)
    trainer = train_bem_esma if use_bem else train_esma
    log = trainer(net, surrogate, dataset, anchors, config, epochs=args.epochs, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "config": asdict(config) if hasattr(config, "__dataclass_fields__") else vars(config),
        "embed_width": bank.width,
        "embeddings": bank.embeddings,
        "state": net.state_dict(),
        "arch": args.arch,
        "use_bem": use_bem,
    }
    payload["config_hash"] = config_hash({k: v for k, v in payload.items() if k in ("config", "arch", "use_bem")})
    torch.save(payload, out)
    _write_manifest(out.parent, "train-bem-esma" if use_bem else "train-esma",
                    vars(args) | {"func": None}, args.seed, [], [str(out)], started)
    print(f"generator trained ({len(log.losses)} steps, last loss {log.losses[-1]:.4f}) -> {out}")
    return EXIT_OK


def _cmd_attack(args) -> int:
    from .datasets import ingest_dataset, make_desk_dataset
    from .generator import GeneratorConfig, build_generator, generate_adversarial
    from .rng import generator as make_rng

    started = time.time()
    ckpt_path = Path(args.generator)
    if not ckpt_path.exists():
        print(f"generator checkpoint not found: {ckpt_path}", file=sys.stderr)
        return EXIT_ARTIFACT
    payload = torch.load(ckpt_path, map_location="cpu", weights_only=False)
    config = GeneratorConfig(**payload["config"])
    net = build_generator(config, embed_width=payload["embed_width"], seed=args.seed)
    net.load_state_dict(payload["state"])
    net.eval()

    if args.images == "desk10":
        dataset = make_desk_dataset(args.n_per_class, size=args.image_size, seed=args.seed + 1000)
    else:
        dataset, _ = ingest_dataset(args.images, target_size=args.image_size)
    from .evaluation import draw_targets

    targets = draw_targets(dataset.labels, config.n_classes, make_rng(args.seed, "attack-targets"))
    batch = generate_adversarial(net, dataset.features, targets, config, labels=dataset.labels)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.save(out_dir / "adversarials.npy", batch.adversarials)
    np.save(out_dir / "originals.npy", batch.originals)
    np.save(out_dir / "targets.npy", batch.targets)
    np.save(out_dir / "skipped.npy", batch.skipped)
    _write_manifest(out_dir, "attack", vars(args) | {"func": None}, args.seed,
                    [str(ckpt_path)], [str(out_dir / "adversarials.npy")], started)
    print(f"{len(batch.targets)} adversarials ({int(batch.skipped.sum())} skipped) -> {out_dir}")
    return EXIT_OK


def _cmd_train_watermark(args) -> int:
    from .datasets import make_cover_images
    from .watermark import train_hidden_like

    started = time.time()
    covers = make_cover_images(args.n_covers, size=args.image_size, seed=args.seed)
    model = train_hidden_like(
        covers, args.length, args.regime, epochs=args.epochs, seed=args.seed
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save_checkpoint(out)
    _write_manifest(out.parent, "train-watermark", vars(args) | {"func": None}, args.seed, [], [str(out)], started)
    print(f"watermark model regime={args.regime} L={args.length} "
          f"val bit acc {model.val_bit_accuracy:.3f} converged={model.converged} -> {out}")
    return EXIT_OK if model.converged else EXIT_OK


def _cmd_make_pools(args) -> int:
    from .watermark import build_message_pools, save_pools

    started = time.time()
    pools = build_message_pools(args.enterprises, args.pool_size, args.length, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_pools(pools, out)
    _write_manifest(out.parent, "make-pools", vars(args) | {"func": None}, args.seed, [], [str(out)], started)
    print(f"{args.enterprises} pools of {args.pool_size} L={args.length} messages -> {out}")
    return EXIT_OK


def _cmd_eval_watermark(args) -> int:
    from .watermark import (
        HiddenWatermarker, erasure_bit_error_rate, erasure_detection_rate,
        gaussian_baseline, load_pools, tamper_bit_metric, tamper_detection_rate,
    )
    from .watermark.metrics import mean_psnr

    started = time.time()
    ckpt = Path(args.watermark)
    if not ckpt.exists():
        print(f"watermark checkpoint not found: {ckpt}", file=sys.stderr)
        return EXIT_ARTIFACT
    model = HiddenWatermarker.load_checkpoint(ckpt)
    encoded = np.load(args.encoded)
    if args.attacked:
        attacked = np.load(args.attacked)
    else:
        attacked, achieved, _ = gaussian_baseline(encoded, target_psnr=args.target_psnr, seed=args.seed)
        print(f"gaussian attack at {achieved:.2f} dB")
    rows = [
        {"metric": "erasure_bit_error", "value": erasure_bit_error_rate(model, encoded, attacked)},
        {"metric": "erasure_detection", "value": erasure_detection_rate(model, encoded, attacked)},
        {"metric": "attack_psnr", "value": mean_psnr(attacked, encoded)},
    ]
    if args.pools:
        pools = load_pools(args.pools)
        pool = pools[args.enterprise]
        rows.append({"metric": "tamper_bit_error_closest",
                     "value": tamper_bit_metric(model, attacked, pool, mode="closest")})
        rows.append({"metric": "tamper_bit_error_printed",
                     "value": tamper_bit_metric(model, attacked, pool, mode="as_printed")})
        rows.append({"metric": "tamper_detection",
                     "value": tamper_detection_rate(model, attacked, pool)})
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "watermark_eval.json").write_text(json.dumps(rows, indent=1))
    _write_manifest(out_dir, "eval-watermark", vars(args) | {"func": None}, args.seed,
                    [str(ckpt), args.encoded], [str(out_dir / "watermark_eval.json")], started)
    for row in rows:
        print(f"{row['metric']:<28} {row['value']:.4f}")
    return EXIT_OK


def _cmd_run(args) -> int:
    from .config import ConfigError, load_config
    from .evaluation import MissingArtifactError, run_experiment
    from .generator import TrainingDivergedError
    from .plots import PLOT_KINDS, emit_plots

    started = time.time()
    try:
        config = load_config(args.config)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None:
        config.seeds = [args.seed]
    out_dir = Path(args.out)
    try:
        report = run_experiment(config, cache_dir=args.cache_dir, out_dir=out_dir)
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except TrainingDivergedError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    produced = [str(out_dir / "report.json")]
    if args.plots:
        for kind in PLOT_KINDS:
            try:
                produced += [str(p) for p in emit_plots(report, [kind], out_dir)]
            except ValueError:
                continue
    _write_manifest(out_dir, "run", config.to_dict(), config.seeds[0], [], produced, started)
    return EXIT_OK


def _cmd_plots(args) -> int:
    from .evaluation import AttackReport
    from .plots import UnknownPlotKindError, emit_plots

    report_dir = Path(args.report)
    if not (report_dir / "report.json").exists():
        print(f"no report at {report_dir}", file=sys.stderr)
        return EXIT_ARTIFACT
    report = AttackReport.load(report_dir)
    try:
        written = emit_plots(report, args.kinds, args.out)
    except UnknownPlotKindError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    for path in written:
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="esmakit", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, out_default: str):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=out_default)
        p.add_argument("--cache-dir", default=None)

    def desk(p):
        p.add_argument("--arch", default="convnet")
        p.add_argument("--image-size", type=int, default=32)
        p.add_argument("--n-per-class", type=int, default=60)
        p.add_argument("--classifier-epochs", type=int, default=25)

    p = sub.add_parser("toy-density", help="toy-task density/consistency curves")
    common(p, "runs/toy-density")
    p.add_argument("--n-samples", type=int, default=200)
    p.add_argument("--radius", type=float, default=0.4)
    p.add_argument("--plots", action="store_true")
    p.set_defaults(func=_cmd_toy_density)

    p = sub.add_parser("screen-anchors", help="easy-sample screening on the desk dataset")
    common(p, "runs/anchors.json")
    desk(p)
    p.add_argument("--q", type=int, default=2)
    p.set_defaults(func=_cmd_screen_anchors)

    p = sub.add_parser("pretrain-embeddings", help="fit the generator class embeddings")
    common(p, "runs/embeddings.json")
    desk(p)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--step-size", type=float, default=0.05)
    p.set_defaults(func=_cmd_pretrain_embeddings)

    for name, bem in (("train-esma", False), ("train-bem-esma", True)):
        p = sub.add_parser(name, help=f"train the {'mixup ' if bem else ''}attack generator")
        common(p, f"runs/{name.replace('-', '_')}.pt")
        desk(p)
        p.add_argument("--q", type=int, default=2)
        p.add_argument("--nu", type=float, default=1.0)
        p.add_argument("--epsilon", type=float, default=16.0 / 255.0)
        p.add_argument("--distortion-weight", type=float, default=0.0)
        p.add_argument("--epochs", type=int, default=40)
        p.set_defaults(func=lambda a, _b=bem: _train_generator(a, _b))

    p = sub.add_parser("attack", help="craft adversarials with a trained generator")
    common(p, "runs/attack")
    p.add_argument("--generator", required=True)
    p.add_argument("--images", default="desk10", help="directory of images or 'desk10'")
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--n-per-class", type=int, default=20)
    p.set_defaults(func=_cmd_attack)

    p = sub.add_parser("train-watermark", help="train the encoder/decoder watermarker")
    common(p, "runs/watermark.pt")
    p.add_argument("--length", type=int, default=5)
    p.add_argument("--regime", default="nonoise")
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--n-covers", type=int, default=240)
    p.add_argument("--epochs", type=int, default=40)
    p.set_defaults(func=_cmd_train_watermark)

    p = sub.add_parser("make-pools", help="sample disjoint per-enterprise message pools")
    common(p, "runs/pools.txt")
    p.add_argument("--enterprises", type=int, default=4)
    p.add_argument("--pool-size", type=int, default=8)
    p.add_argument("--length", type=int, default=5)
    p.set_defaults(func=_cmd_make_pools)

    p = sub.add_parser("eval-watermark", help="risk metrics for encoded vs attacked images")
    common(p, "runs/eval-watermark")
    p.add_argument("--watermark", required=True)
    p.add_argument("--encoded", required=True, help=".npy of encoded images")
    p.add_argument("--attacked", default=None, help=".npy of attacked images (default: gaussian)")
    p.add_argument("--target-psnr", type=float, default=27.5)
    p.add_argument("--pools", default=None)
    p.add_argument("--enterprise", type=int, default=0)
    p.set_defaults(func=_cmd_eval_watermark)

    p = sub.add_parser("run", help="run a full experiment protocol from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="runs/experiment")
    p.add_argument("--cache-dir", default=None)
    p.add_argument("--plots", action="store_true")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("plots", help="render plots from a saved report")
    p.add_argument("--report", required=True)
    p.add_argument("--kinds", nargs="+", default=["risk-scatter"])
    p.add_argument("--out", default="runs/plots")
    p.set_defaults(func=_cmd_plots)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT


if __name__ == "__main__":
    sys.exit(main())
