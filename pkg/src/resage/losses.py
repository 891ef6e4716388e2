"""Training objectives: mean-variance age loss, fake/real age losses,
L1 reconstruction, hinge adversarial losses, and their weighted totals."""

from dataclasses import dataclass, field, fields

import torch

from resage.embedding import (
    apply_pat,
    distribution_stats,
    estimate_distribution,
    validate_distribution,
)
from resage.networks import is_frozen

_EPS = 1e-12


@dataclass
class LossWeights:
    lambda_mv1: float = 0.05
    lambda_mv2: float = 0.005
    lambda_fake1: float = 0.4
    lambda_fake2: float = 1.0
    lambda_age: float = 0.05
    lambda_idt: float = 1.0
    lambda_adv: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be nonnegative")


@dataclass
class LossReport:
    softmax_term: float = 0.0
    mean_term: float = 0.0
    variance_term: float = 0.0
    real_age: float = 0.0
    fake_age_encoding: float = 0.0
    fake_age_image: float = 0.0
    identity_l1: float = 0.0
    adv_g: float = 0.0
    adv_d: float = 0.0
    total_g: float = 0.0
    total_d: float = 0.0

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def assert_finite(self, context: str = ""):
        bad = {k: v for k, v in self.as_dict().items() if not torch.isfinite(torch.tensor(v))}
        if bad:
            raise FloatingPointError(f"non-finite loss components {bad} {context}")


def _fractional_nll(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Cross-entropy term; fractional targets spread mass over the two
    neighboring classes with weights (1-f, f)."""
    k = p.shape[-1]
    lo = torch.clamp(y.floor().long(), max=k - 1)
    hi = torch.clamp(lo + 1, max=k - 1)
    f = y - lo.to(y.dtype)
    logp = torch.log(p.clamp_min(_EPS))
    lo_term = logp.gather(-1, lo.unsqueeze(-1)).squeeze(-1)
    hi_term = logp.gather(-1, hi.unsqueeze(-1)).squeeze(-1)
    return -((1 - f) * lo_term + f * hi_term)


def mean_variance_loss(p: torch.Tensor, y, weights: LossWeights,
                       return_terms: bool = False):
    """Cross-entropy plus penalties on the distribution mean error and
    variance; batch mean when p is (N, K)."""
    validate_distribution(p)
    if p.dim() == 1:
        p = p.unsqueeze(0)
    y = torch.as_tensor(y, dtype=p.dtype, device=p.device).reshape(-1)
    if (y < 0).any() or (y > p.shape[-1] - 1).any():
        raise ValueError("target age out of class range")
    stats = distribution_stats(p, validate=False)
    ls = _fractional_nll(p, y).mean()
    lm = ((stats.mean - y) ** 2).mean()
    lv = stats.variance.mean()
    total = ls + (weights.lambda_mv1 / 2.0) * lm + weights.lambda_mv2 * lv
    if return_terms:
        return total, (ls, lm, lv)
    return total


def real_age_loss(encodings: torch.Tensor, labels, head,
                  weights: LossWeights, return_terms: bool = False):
    """Supervised age loss on real images: mean-variance loss of C(E(x))."""
    if encodings.shape[0] == 0:
        raise ValueError("empty batch")
    p = estimate_distribution(encodings, head)
    return mean_variance_loss(p, labels, weights, return_terms=return_terms)


def fake_age_loss(transformed_encoding: torch.Tensor,
                  generated_image: torch.Tensor, t,
                  frozen_encoder, frozen_estimator,
                  weights: LossWeights, return_terms: bool = False):
    """Age loss on fakes at the transformed-encoding and generated-image
    levels, evaluated with parameter-frozen estimator/encoder copies."""
    for name, m in (("encoder", frozen_encoder), ("estimator", frozen_estimator)):
        if not is_frozen(m):
            raise ValueError(f"fake_age_loss requires a frozen {name} copy")
    p_enc = estimate_distribution(transformed_encoding, frozen_estimator)
    loss_enc = mean_variance_loss(p_enc, t, weights)
    p_img = estimate_distribution(frozen_encoder(generated_image), frozen_estimator)
    loss_img = mean_variance_loss(p_img, t, weights)
    total = weights.lambda_fake1 * loss_enc + weights.lambda_fake2 * loss_img
    if return_terms:
        return total, (loss_enc, loss_img)
    return total


def identity_l1_loss(x: torch.Tensor, reconstructed: torch.Tensor) -> torch.Tensor:
    if x.shape != reconstructed.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(reconstructed.shape)}")
    return (x - reconstructed).abs().mean()


def hinge_d_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    return (torch.clamp(1.0 - real_logits, min=0).mean()
            + torch.clamp(1.0 + fake_logits, min=0).mean())


def hinge_g_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    return -fake_logits.mean()


def total_generator_loss(components: LossReport, weights: LossWeights):
    """Weighted joint generator objective from a component report."""
    for name in ("real_age", "fake_age_encoding", "fake_age_image",
                 "identity_l1", "adv_g"):
        if getattr(components, name) is None:
            raise ValueError(f"missing loss component: {name}")
    fake = (weights.lambda_fake1 * components.fake_age_encoding
            + weights.lambda_fake2 * components.fake_age_image)
    return (weights.lambda_age * (components.real_age + fake)
            + weights.lambda_idt * components.identity_l1
            + weights.lambda_adv * components.adv_g)
