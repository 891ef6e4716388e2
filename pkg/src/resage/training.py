"""Joint optimization loop: alternating discriminator/generator updates,
target-age sampling, near-target real sampling for the discriminator,
linear learning-rate decay, and epoch checkpointing."""

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from resage import data as data_mod
from resage import embedding as emb
from resage import losses as loss_mod
from resage.losses import LossReport, LossWeights
from resage.networks import ModelBundle, frozen_copy, save_checkpoint
from resage.profiles import ConfigurationError, SizeProfile


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    profile: SizeProfile = field(default_factory=SizeProfile.desk)
    batch_size: int = 20
    epochs: int = 200
    lr: float = 2e-4
    decay_start_epoch: int = 100
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    target_age_range: tuple = (15, 70)
    d_sample_window: int = 5
    beta_enabled: bool = True
    residual_enabled: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if not 0 <= self.decay_start_epoch <= max(self.epochs, 1):
            raise ConfigurationError("decay_start_epoch must be within [0, epochs]")
        lo, hi = self.target_age_range
        k = self.profile.num_classes
        if not (0 <= lo <= hi <= k - 1):
            raise ConfigurationError(f"target_age_range must satisfy 0 <= lo <= hi <= {k - 1}")

    # Config files are flat key=value text; every field maps to a key of the
    # same name; profile is referenced by name.
    _SCALAR_KEYS = {
        "batch_size": int, "epochs": int, "lr": float,
        "decay_start_epoch": int, "seed": int, "d_sample_window": int,
    }
    _BOOL_KEYS = ("beta_enabled", "residual_enabled")
    _WEIGHT_KEYS = tuple(f.name for f in dataclasses.fields(LossWeights))

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        kwargs, weight_kwargs = {}, {}
        for key, raw in mapping.items():
            if key == "profile":
                kwargs["profile"] = (raw if isinstance(raw, SizeProfile)
                                     else SizeProfile.by_name(str(raw)))
            elif key in cls._SCALAR_KEYS:
                kwargs[key] = cls._SCALAR_KEYS[key](raw)
            elif key in cls._BOOL_KEYS:
                kwargs[key] = _parse_bool(raw)
            elif key == "target_age_range":
                lo, hi = (raw if isinstance(raw, (tuple, list))
                          else str(raw).replace(",", " ").split())
                kwargs[key] = (int(lo), int(hi))
            elif key in cls._WEIGHT_KEYS:
                weight_kwargs[key] = float(raw)
            elif key == "weights" and isinstance(raw, LossWeights):
                kwargs["weights"] = raw
            else:
                raise ConfigurationError(f"unknown config key: {key!r}")
        if weight_kwargs:
            kwargs["weights"] = LossWeights(**weight_kwargs)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        mapping = {}
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigurationError(f"{path}:{lineno}: expected key=value")
                key, value = (part.strip() for part in line.split("=", 1))
                mapping[key] = value
        return cls.from_mapping(mapping)


def _parse_bool(raw) -> bool:
    if isinstance(raw, bool):
        return raw
    text = str(raw).strip().lower()
    if text in ("true", "on", "1", "yes"):
        return True
    if text in ("false", "off", "0", "no"):
        return False
    raise ConfigurationError(f"not a boolean: {raw!r}")


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    if not 0 <= epoch < max(config.epochs, 1):
        raise ValueError(f"epoch {epoch} out of range [0, {config.epochs})")
    if epoch < config.decay_start_epoch:
        return config.lr
    span = config.epochs - config.decay_start_epoch
    return config.lr * (config.epochs - epoch) / span


def sample_target_ages(labels, age_range, rng: np.random.Generator) -> torch.Tensor:
    lo, hi = age_range
    if lo > hi:
        raise ConfigurationError("empty target age range")
    n = len(labels)
    return torch.from_numpy(rng.integers(lo, hi + 1, size=n)).long()


def sample_real_for_discriminator(dataset: data_mod.FaceDataset, targets,
                                  window: int, rng: np.random.Generator) -> torch.Tensor:
    """One real image per target with age within the window, or the
    nearest-age image when the window is empty."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    picks = []
    for t in targets.tolist():
        candidates = [i for age in dataset.ages if abs(age - t) <= window
                      for i in dataset.by_age[age]]
        if not candidates:
            nearest = min(dataset.ages, key=lambda a: abs(a - t))
            candidates = dataset.by_age[nearest]
        picks.append(candidates[int(rng.integers(0, len(candidates)))])
    return dataset.images[picks]


def _fake_pipeline(bundle: ModelBundle, x, targets, residual_enabled):
    """Encoding, distribution, transformed encoding, and generated fakes."""
    e = bundle.encoder(x)
    p = emb.estimate_distribution(e, bundle.estimator)
    a_tilde = emb.personalized_target_embedding(
        p, bundle.estimator.weight, targets.to(torch.float32),
        residual_enabled=residual_enabled)
    e_t = emb.apply_pat(e, a_tilde, bundle.pat)
    fake = bundle.generator(e_t)
    return e, p, e_t, fake


def generator_step(batch, bundle: ModelBundle, config: TrainConfig,
                   optimizer) -> LossReport:
    x, y, targets = batch["x"], batch["y"], batch["t"]
    w = config.weights

    e, p, e_t, fake = _fake_pipeline(bundle, x, targets, config.residual_enabled)
    loss_real, (ls, lm, lv) = loss_mod.mean_variance_loss(p, y, w, return_terms=True)

    # Reconstruction at the rounded self-estimated age, never the label.
    rounded = emb.distribution_stats(p, validate=False).rounded
    a_self = emb.personalized_target_embedding(
        p, bundle.estimator.weight, rounded.to(torch.float32),
        residual_enabled=config.residual_enabled)
    recon = bundle.generator(emb.apply_pat(e, a_self, bundle.pat))
    loss_idt = loss_mod.identity_l1_loss(x, recon)

    frozen_e = frozen_copy(bundle.encoder)
    frozen_c = frozen_copy(bundle.estimator)
    loss_fake, (fake_enc, fake_img) = loss_mod.fake_age_loss(
        e_t, fake, targets.to(torch.float32), frozen_e, frozen_c, w,
        return_terms=True)

    loss_adv = loss_mod.hinge_g_loss(bundle.discriminator(fake))
    total = (w.lambda_age * (loss_real + loss_fake)
             + w.lambda_idt * loss_idt + w.lambda_adv * loss_adv)
    if not torch.isfinite(total):
        raise TrainingDiverged(f"non-finite generator loss at step {bundle.step}")

    optimizer.zero_grad(set_to_none=True)
    bundle.discriminator.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    bundle.discriminator.zero_grad(set_to_none=True)

    report = LossReport(
        softmax_term=ls.item(), mean_term=lm.item(), variance_term=lv.item(),
        real_age=loss_real.item(), fake_age_encoding=fake_enc.item(),
        fake_age_image=fake_img.item(), identity_l1=loss_idt.item(),
        adv_g=loss_adv.item(), total_g=total.item())
    report.assert_finite(f"(generator step {bundle.step})")
    return report


def discriminator_step(batch, bundle: ModelBundle, config: TrainConfig,
                       optimizer) -> LossReport:
    x, targets, z = batch["x"], batch["t"], batch["z"]
    with torch.no_grad():
        _, _, _, fake = _fake_pipeline(bundle, x, targets, config.residual_enabled)
    loss = loss_mod.hinge_d_loss(bundle.discriminator(z),
                                 bundle.discriminator(fake.detach()))
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite discriminator loss at step {bundle.step}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return LossReport(adv_d=loss.item(), total_d=loss.item())


def make_optimizers(bundle: ModelBundle, config: TrainConfig):
    opt_g = torch.optim.Adam(bundle.generator_side_parameters(),
                             lr=config.lr, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(bundle.discriminator.parameters(),
                             lr=config.lr, betas=(0.5, 0.999))
    return opt_g, opt_d


def train(config: TrainConfig, dataset: data_mod.FaceDataset,
          checkpoint_dir=None, log_path=None, epoch_callback=None,
          resume_from=None):
    """Run the full loop; returns (bundle, log) where log is a list of flat
    per-step records. Deterministic given (config, seed, dataset)."""
    if dataset.profile != config.profile:
        raise ConfigurationError("dataset profile does not match config profile")
    if resume_from is not None:
        from resage.networks import load_checkpoint
        bundle, payload = load_checkpoint(resume_from, profile=config.profile)
        extra = payload.get("extra", {})
        start_epoch = extra["epoch"] + 1
        rng = np.random.default_rng()
        rng.bit_generator.state = json.loads(extra["rng_state"])
        opt_g, opt_d = make_optimizers(bundle, config)
        opt_g.load_state_dict(payload["optimizers"]["g"])
        opt_d.load_state_dict(payload["optimizers"]["d"])
    else:
        bundle = ModelBundle(config.profile, config.seed,
                             beta_enabled=config.beta_enabled)
        rng = np.random.default_rng(config.seed)
        opt_g, opt_d = make_optimizers(bundle, config)
        start_epoch = 0

    log = []
    log_fh = open(log_path, "a") if log_path else None
    n = len(dataset)
    try:
        for epoch in range(start_epoch, config.epochs):
            lr = lr_schedule(epoch, config)
            for group in list(opt_g.param_groups) + list(opt_d.param_groups):
                group["lr"] = lr
            order = rng.permutation(n)
            for lo in range(0, n, config.batch_size):
                idx = order[lo:lo + config.batch_size]
                x, y = dataset.images[idx], dataset.labels[idx]
                t = sample_target_ages(y, config.target_age_range, rng)
                z = sample_real_for_discriminator(dataset, t,
                                                  config.d_sample_window, rng)
                batch = {"x": x, "y": y, "t": t, "z": z}
                d_report = discriminator_step(batch, bundle, config, opt_d)
                g_report = generator_step(batch, bundle, config, opt_g)
                record = g_report.as_dict()
                record["adv_d"] = d_report.adv_d
                record["total_d"] = d_report.total_d
                record.update(step=bundle.step, epoch=epoch, lr=lr)
                log.append(record)
                if log_fh:
                    log_fh.write(json.dumps(record) + "\n")
                bundle.step += 1
            if checkpoint_dir is not None:
                ckpt_dir = Path(checkpoint_dir)
                ckpt_dir.mkdir(parents=True, exist_ok=True)
                extra = {"epoch": epoch,
                         "rng_state": json.dumps(rng.bit_generator.state)}
                save_checkpoint(ckpt_dir / f"epoch_{epoch:04d}.pt", bundle,
                                optimizers={"g": opt_g, "d": opt_d}, extra=extra)
            if epoch_callback is not None:
                epoch_callback(epoch, bundle, log)
    finally:
        if log_fh:
            log_fh.close()
    return bundle, log
