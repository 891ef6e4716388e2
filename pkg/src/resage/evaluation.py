"""Quantitative protocols: continuous-aging confusion matrix, FID,
per-group mean generated age, identity interpolation, and the residual
ablation comparison."""

import contextlib
import dataclasses
from dataclasses import dataclass

import numpy as np
import torch

from resage import data as data_mod
from resage import embedding as emb
from resage.networks import ModelBundle


@contextlib.contextmanager
def inference(bundle: ModelBundle):
    """Eval mode + no_grad for every network in the bundle, restored on exit.
    Eval mode matters: spectral-norm power iteration mutates its internal
    vectors on forward passes in train mode, breaking bit-determinism."""
    modules = list(bundle.networks().values())
    modes = [m.training for m in modules]
    for m in modules:
        m.eval()
    try:
        with torch.no_grad():
            yield
    finally:
        for m, mode in zip(modules, modes):
            m.train(mode)


@dataclass
class ConfusionMatrix:
    targets: list                # requested target ages, row order
    estimates: list              # list of per-target estimate lists
    step: int

    def mean_per_target(self):
        return [float(np.mean(row)) for row in self.estimates]

    def mean_absolute_error(self) -> float:
        errs = [abs(e - t) for t, row in zip(self.targets, self.estimates)
                for e in row]
        return float(np.mean(errs))

    def histogram(self) -> np.ndarray:
        """Square count matrix: rows = targets, columns = the same age grid,
        estimates binned to the nearest grid point."""
        grid = np.asarray(self.targets, dtype=float)
        mat = np.zeros((len(grid), len(grid)), dtype=int)
        for i, row in enumerate(self.estimates):
            for e in row:
                mat[i, int(np.argmin(np.abs(grid - e)))] += 1
        return mat


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if not np.allclose(self.cov, self.cov.T, atol=1e-8):
            raise ValueError("covariance must be symmetric")


def generate(bundle: ModelBundle, images: torch.Tensor, target,
             mode: str = "self_estimated", groups=None,
             residual_enabled: bool = True) -> torch.Tensor:
    """Generate aged versions of an image batch at one target age."""
    with inference(bundle):
        e = bundle.encoder(images)
        weight = bundle.estimator.weight
        if mode == "self_estimated":
            p = emb.estimate_distribution(e, bundle.estimator)
            t = torch.full((images.shape[0],), float(target))
            a_tilde = emb.personalized_target_embedding(
                p, weight, t, residual_enabled=residual_enabled)
        elif mode == "interpolated":
            a_one = emb.anchor_interpolation_embedding(
                weight, groups or DEFAULT_ANCHOR_GROUPS, target)
            a_tilde = a_one.unsqueeze(0).expand(images.shape[0], -1)
        else:
            raise ValueError(f"unknown mode: {mode!r}")
        return bundle.generator(emb.apply_pat(e, a_tilde, bundle.pat))


def estimate_ages(bundle: ModelBundle, images: torch.Tensor) -> torch.Tensor:
    """Self-estimated distribution means for an image batch."""
    with inference(bundle):
        p = emb.estimate_distribution(bundle.encoder(images), bundle.estimator)
        return emb.distribution_stats(p, validate=False).mean


DEFAULT_ANCHOR_GROUPS = [(15, 29), (30, 39), (40, 49), (50, 70)]


def continuous_confusion_matrix(bundle: ModelBundle, images: torch.Tensor,
                                age_lo: int = 25, age_hi: int = 65,
                                step: int = 3, mode: str = "self_estimated",
                                groups=None) -> ConfusionMatrix:
    if images.shape[0] == 0:
        raise ValueError("empty test set")
    if bundle.step == 0:
        raise ValueError("refusing to evaluate an untrained model "
                         "(training step counter is 0)")
    groups = groups or DEFAULT_ANCHOR_GROUPS
    targets = list(range(age_lo, age_hi + 1, step))
    estimates = []
    for t in targets:
        fakes = generate(bundle, images, t, mode=mode, groups=groups)
        estimates.append(estimate_ages(bundle, fakes).tolist())
    return ConfusionMatrix(targets=targets, estimates=estimates, step=step)


def feature_stats(images: torch.Tensor, extractor) -> GaussianStats:
    if images.shape[0] < 2:
        raise ValueError("need at least 2 images for feature statistics")
    with torch.no_grad():
        feats = torch.stack([extractor(img.unsqueeze(0)).reshape(-1)
                             for img in images]).double().numpy()
    mean = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False)
    cov = np.atleast_2d(cov)
    return GaussianStats(mean=mean, cov=cov)


def encoder_extractor(bundle: ModelBundle):
    """Default FID feature extractor: trained encoder + global pooling.
    Not comparable to standard FID implementations; pluggable by design."""
    def extract(batch):
        return bundle.encoder(batch).mean(dim=(-2, -1))
    return extract


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(stats_a: GaussianStats, stats_b: GaussianStats) -> float:
    """Frechet distance between two Gaussian fits."""
    if stats_a.mean.shape != stats_b.mean.shape:
        raise ValueError("feature dimensions differ")
    diff = stats_a.mean - stats_b.mean
    sqrt_a = _psd_sqrt(stats_a.cov)
    inner = _psd_sqrt(sqrt_a @ stats_b.cov @ sqrt_a)
    value = float(diff @ diff + np.trace(stats_a.cov + stats_b.cov)
                  - 2.0 * np.trace(inner))
    return max(value, 0.0)


def group_target_age(real_age: int, group) -> int:
    """Shift the real age by multiples of 10 until it lands in [lo, hi)."""
    lo, hi = group
    if lo >= hi:
        raise ValueError("group must satisfy lo < hi")
    t = real_age
    while t >= hi:
        t -= 10
    while t < lo:
        t += 10
    if not lo <= t < hi:
        raise ValueError(f"age {real_age} cannot reach group [{lo}, {hi}) "
                         "by steps of 10")
    return t


def mean_age_per_group(bundle: ModelBundle, dataset: data_mod.FaceDataset,
                       groups, estimator: str = "embedded") -> dict:
    """Mean estimated age of generations targeted into each group."""
    if estimator not in ("embedded", "oracle"):
        raise ValueError(f"unknown estimator: {estimator!r}")
    table = {}
    for group in groups:
        estimates = []
        for idx in range(len(dataset)):
            t = group_target_age(int(dataset.labels[idx]), group)
            fake = generate(bundle, dataset.images[idx:idx + 1], t)[0]
            if estimator == "embedded":
                estimates.append(float(estimate_ages(bundle, fake.unsqueeze(0))[0]))
            else:
                readout = data_mod.oracle_age_readout(fake)
                if readout is not None:
                    estimates.append(readout)
        # an undertrained model can emit images the oracle cannot read;
        # report that honestly rather than abort the whole table
        table[group] = float(np.mean(estimates)) if estimates else float("nan")
    return table


def identity_interpolation(bundle: ModelBundle, img_a: torch.Tensor,
                           img_b: torch.Tensor, target, n_steps: int) -> torch.Tensor:
    """Decode a uniform blend grid between two transformed encodings at a
    shared target age; endpoints reproduce the unmixed generations."""
    if img_a.shape != img_b.shape:
        raise ValueError("images must share a shape")
    if n_steps < 2:
        raise ValueError("n_steps must be >= 2")
    with inference(bundle):
        pair = torch.stack([img_a, img_b])
        e = bundle.encoder(pair)
        p = emb.estimate_distribution(e, bundle.estimator)
        t = torch.full((2,), float(target))
        a_tilde = emb.personalized_target_embedding(p, bundle.estimator.weight, t)
        e_t = emb.apply_pat(e, a_tilde, bundle.pat)
        frames = []
        for alpha in torch.linspace(0.0, 1.0, n_steps):
            mixed = (1 - alpha) * e_t[0] + alpha * e_t[1]
            frames.append(bundle.generator(mixed.unsqueeze(0))[0])
    return torch.stack(frames)


def sweep_identity_distances(bundle: ModelBundle, dataset: data_mod.FaceDataset,
                             targets) -> list:
    """Per-image mean oracle identity distance between input and its
    age-transformed outputs across a target sweep."""
    distances = []
    for idx in range(len(dataset)):
        img = dataset.images[idx]
        vals = []
        for t in targets:
            fake = generate(bundle, img.unsqueeze(0), t)[0]
            vals.append(data_mod.oracle_identity_distance(img, fake))
        distances.append(float(np.mean(vals)))
    return distances


def ablation_compare(config, dataset: data_mod.FaceDataset,
                     test_dataset: data_mod.FaceDataset,
                     targets=None) -> dict:
    """Train residual-on and residual-off twins from the same seed and
    report confusion MAE plus identity distances for both arms."""
    from resage.training import train

    targets = targets or list(range(25, 66, 10))
    report = {}
    for arm, enabled in (("residual", True), ("no_residual", False)):
        arm_config = dataclasses.replace(config, residual_enabled=enabled)
        bundle, _ = train(arm_config, dataset)
        matrix = continuous_confusion_matrix(bundle, test_dataset.images,
                                             age_lo=targets[0], age_hi=targets[-1],
                                             step=targets[1] - targets[0])
        distances = sweep_identity_distances(bundle, test_dataset, targets)
        report[arm] = {
            "confusion_mae": matrix.mean_absolute_error(),
            "mean_identity_distance": float(np.mean(distances)),
        }
    return report
