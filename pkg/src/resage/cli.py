"""Batch command-line entry points: dataset synthesis, training, inference,
continuous sweeps, and the evaluation suites."""

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from resage import data as data_mod
from resage import evaluation as eval_mod
from resage.networks import load_checkpoint, save_checkpoint
from resage.profiles import ConfigurationError, SizeProfile
from resage.training import TrainConfig, train

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2

SAMPLE_TARGETS = (25, 35, 45, 55)


def _build_parser():
    parser = argparse.ArgumentParser(prog="resage",
                                     description="Continuous face aging toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="render a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--identities", type=int, default=200)
    p.add_argument("--per-identity", type=int, default=8)
    p.add_argument("--profile", choices=["paper", "desk"], default="desk")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--decay-start-epoch", type=int)
    p.add_argument("--profile", choices=["paper", "desk"])
    p.add_argument("--residual", choices=["on", "off"])
    p.add_argument("--beta", choices=["on", "off"])
    p.add_argument("--resume", help="checkpoint to resume from at an epoch boundary")

    p = sub.add_parser("infer", help="age one image to a target age")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--target-age", type=float, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="render an age-sweep strip")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--lo", type=int, required=True)
    p.add_argument("--hi", type=int, required=True)
    p.add_argument("--step", type=int, default=4)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="run an evaluation suite")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--suite", required=True,
                   choices=["confusion", "fid", "age-table", "interp"])
    p.add_argument("--out", required=True)
    return parser


def _write_keyvalues(path, mapping):
    with open(path, "w") as fh:
        for key, value in mapping.items():
            fh.write(f"{key}={value}\n")


def _save_heatmap(matrix, targets, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    ax.imshow(matrix, origin="lower", cmap="viridis")
    ax.set_xlabel("estimated age bin")
    ax.set_ylabel("target age")
    ax.set_yticks(range(len(targets)), [str(t) for t in targets])
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _sample_grid(bundle, images, path):
    frames = [images]
    for t in SAMPLE_TARGETS:
        frames.append(eval_mod.generate(bundle, images, t))
    grid = torch.cat([torch.cat(list(f), dim=-1) for f in frames], dim=-2)
    data_mod.save_image(grid, path)


def cmd_synth_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    profile = SizeProfile.by_name(args.profile)
    manifest = data_mod.build_synthetic_dataset(
        args.identities, args.per_identity, profile, args.seed, out)
    print(manifest)
    return EXIT_OK


def _train_config_from_args(args) -> TrainConfig:
    mapping = {}
    if args.config:
        config = TrainConfig.from_file(args.config)
    else:
        config = TrainConfig()
    overrides = {
        "seed": args.seed, "epochs": args.epochs, "batch_size": args.batch_size,
        "lr": args.lr, "decay_start_epoch": args.decay_start_epoch,
    }
    mapping = {k: v for k, v in overrides.items() if v is not None}
    if args.profile:
        mapping["profile"] = args.profile
    if args.residual:
        mapping["residual_enabled"] = args.residual
    if args.beta:
        mapping["beta_enabled"] = args.beta
    if mapping:
        base = {f.name: getattr(config, f.name)
                for f in config.__dataclass_fields__.values()}
        base.update({k: v for k, v in mapping.items()})
        config = TrainConfig.from_mapping(base)
    return config


def cmd_train(args) -> int:
    config = _train_config_from_args(args)
    manifest = Path(args.manifest)
    if not manifest.exists():
        raise ConfigurationError(f"manifest not found: {manifest}")
    train_set = data_mod.FaceDataset.from_manifest(manifest, config.profile,
                                                   split="train")
    try:
        test_set = data_mod.FaceDataset.from_manifest(manifest, config.profile,
                                                      split="test")
        grid_images = test_set.images[:6]
    except ValueError:
        grid_images = train_set.images[:6]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def on_epoch(epoch, bundle, log):
        _sample_grid(bundle, grid_images, out / f"samples_epoch_{epoch:04d}.png")

    bundle, log = train(config, train_set, checkpoint_dir=out / "checkpoints",
                        log_path=out / "train_log.jsonl",
                        epoch_callback=on_epoch, resume_from=args.resume)
    if config.epochs == 0:
        save_checkpoint(out / "checkpoints_init.pt", bundle)
        print(out / "checkpoints_init.pt")
    else:
        print(out / "checkpoints" / f"epoch_{config.epochs - 1:04d}.pt")
    return EXIT_OK


def _load_for_inference(args):
    bundle, _ = load_checkpoint(args.checkpoint)
    entry = data_mod.ManifestEntry(path=str(args.image), age=0, gender="", split="test")
    image = data_mod.load_image(entry, bundle.profile)
    return bundle, image


def cmd_infer(args) -> int:
    bundle, image = _load_for_inference(args)
    k = bundle.profile.num_classes
    if not 0 <= args.target_age <= k - 1:
        raise ConfigurationError(f"target age must be in [0, {k - 1}]")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    self_age = float(eval_mod.estimate_ages(bundle, image.unsqueeze(0))[0])
    fake = eval_mod.generate(bundle, image.unsqueeze(0), args.target_age)[0]
    data_mod.save_image(fake, out)
    print(f"self_estimated_age={self_age:.2f}")
    print(out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    bundle, image = _load_for_inference(args)
    if args.lo > args.hi or args.step < 1:
        raise ConfigurationError("sweep grid requires lo <= hi and step >= 1")
    k = bundle.profile.num_classes
    if not (0 <= args.lo and args.hi <= k - 1):
        raise ConfigurationError(f"sweep ages must lie in [0, {k - 1}]")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    frames = [eval_mod.generate(bundle, image.unsqueeze(0), t)[0]
              for t in range(args.lo, args.hi + 1, args.step)]
    data_mod.save_image(torch.cat(frames, dim=-1), out)
    print(out)
    return EXIT_OK


def cmd_eval(args) -> int:
    bundle, _ = load_checkpoint(args.checkpoint)
    test_set = data_mod.FaceDataset.from_manifest(args.manifest, bundle.profile,
                                                  split="test")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.suite == "confusion":
        for mode in ("self_estimated", "interpolated"):
            matrix = eval_mod.continuous_confusion_matrix(
                bundle, test_set.images, mode=mode)
            hist = matrix.histogram()
            np.savetxt(out / f"confusion_{mode}.txt", hist, fmt="%d")
            _write_keyvalues(out / f"confusion_{mode}_summary.txt", {
                "mean_absolute_error": matrix.mean_absolute_error(),
                **{f"mean_at_{t}": m for t, m in
                   zip(matrix.targets, matrix.mean_per_target())},
            })
            _save_heatmap(hist, matrix.targets, out / f"confusion_{mode}.png")
    elif args.suite == "fid":
        extractor = eval_mod.encoder_extractor(bundle)
        real = eval_mod.feature_stats(test_set.images, extractor)
        fakes = torch.cat([
            eval_mod.generate(bundle, test_set.images, t)
            for t in SAMPLE_TARGETS])
        fake_stats = eval_mod.feature_stats(fakes, extractor)
        _write_keyvalues(out / "fid.txt",
                         {"fid": eval_mod.fid(real, fake_stats)})
    elif args.suite == "age-table":
        groups = [(15, 30), (30, 40), (40, 50), (50, 70)]
        for estimator in ("embedded", "oracle"):
            table = eval_mod.mean_age_per_group(bundle, test_set, groups,
                                                estimator=estimator)
            _write_keyvalues(out / f"age_table_{estimator}.txt",
                             {f"group_{lo}_{hi}": v
                              for (lo, hi), v in table.items()})
    elif args.suite == "interp":
        frames = eval_mod.identity_interpolation(
            bundle, test_set.images[0], test_set.images[min(1, len(test_set) - 1)],
            target=45, n_steps=6)
        data_mod.save_image(torch.cat(list(frames), dim=-1), out / "interp.png")
    print(out)
    return EXIT_OK


_COMMANDS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigurationError, data_mod.ManifestError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
