"""Age distributions, aging bases, and the personalized age transformation.

The estimator's weight matrix W (K x D) provides one aging basis per age
class; the personalized target embedding combines the residual embedding
(expected basis minus the basis at the rounded self-estimated age) with the
target age's basis. All functions accept a single sample or a batch along a
leading dimension and stay differentiable.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

__all__ = [
    "AgeDistributionStats", "PatParameters", "estimate_distribution",
    "validate_distribution", "distribution_stats", "round_half_up",
    "aging_basis", "fractional_basis", "personalized_target_embedding",
    "apply_pat", "anchor_interpolation_embedding",
]


def round_half_up(x):
    if torch.is_tensor(x):
        return torch.floor(x + 0.5).long()
    return int(math.floor(x + 0.5))


@dataclass
class AgeDistributionStats:
    mean: torch.Tensor       # m, expectation of the distribution
    variance: torch.Tensor   # v
    rounded: torch.Tensor    # round-half-up(m), integer tensor


def estimate_distribution(encoding: torch.Tensor, head) -> torch.Tensor:
    """Softmax age distribution predicted from an identity encoding."""
    logits = head(encoding)
    return torch.softmax(logits, dim=-1)


def validate_distribution(p: torch.Tensor, atol: float = 1e-6):
    if (p < -atol).any():
        raise ValueError("age distribution has negative entries")
    sums = p.sum(dim=-1)
    if not torch.allclose(sums, torch.ones_like(sums), atol=1e-4):
        raise ValueError("age distribution entries must sum to 1")


def distribution_stats(p: torch.Tensor, validate: bool = True) -> AgeDistributionStats:
    if validate:
        validate_distribution(p)
    k = p.shape[-1]
    ages = torch.arange(k, dtype=p.dtype, device=p.device)
    m = (p * ages).sum(dim=-1)
    v = (p * (ages - m.unsqueeze(-1)) ** 2).sum(dim=-1)
    return AgeDistributionStats(mean=m, variance=v, rounded=round_half_up(m))


def aging_basis(weight: torch.Tensor, j: int) -> torch.Tensor:
    """Row j of the basis matrix, as an independent copy."""
    k = weight.shape[0]
    if not 0 <= j < k:
        raise IndexError(f"age class {j} out of range [0, {k - 1}]")
    return weight[j].clone()


def _check_target(t: torch.Tensor, k: int):
    if (t < 0).any() or (t > k - 1).any():
        raise ValueError(f"target age out of range [0, {k - 1}]")


def fractional_basis(weight: torch.Tensor, t) -> torch.Tensor:
    """Weighted sum of the two neighboring integer-age bases.

    For batched t of shape (N,), returns (N, D).
    """
    k = weight.shape[0]
    t = torch.as_tensor(t, dtype=weight.dtype, device=weight.device)
    _check_target(t, k)
    lo = torch.clamp(t.floor().long(), max=k - 1)
    hi = torch.clamp(lo + 1, max=k - 1)
    frac = (t - lo.to(weight.dtype)).unsqueeze(-1) if t.dim() else t - lo.to(weight.dtype)
    return (1 - frac) * weight[lo] + frac * weight[hi]


def personalized_target_embedding(
    p: torch.Tensor, weight: torch.Tensor, t, residual_enabled: bool = True
) -> torch.Tensor:
    """Residual embedding plus the target age's basis.

    With ``residual_enabled`` false (ablation) the target basis is used
    directly.
    """
    validate_distribution(p)
    target = fractional_basis(weight, t)
    if not residual_enabled:
        return target
    personalized = p @ weight                      # expected basis, (..., D)
    rounded = distribution_stats(p, validate=False).rounded
    residual = personalized - weight[rounded]
    return residual + target


class PatParameters(nn.Module):
    """Affine projections producing per-channel scale and shift from an
    age embedding. Zero-initialized so the modulation starts as identity."""

    def __init__(self, dim: int, beta_enabled: bool = True):
        super().__init__()
        self.dim = dim
        self.beta_enabled = beta_enabled
        self.gamma_projection = nn.Linear(dim, dim)
        self.beta_projection = nn.Linear(dim, dim)
        nn.init.zeros_(self.gamma_projection.weight)
        nn.init.zeros_(self.gamma_projection.bias)
        nn.init.zeros_(self.beta_projection.weight)
        nn.init.zeros_(self.beta_projection.bias)

    def gamma(self, a_tilde):
        return 1.0 + self.gamma_projection(a_tilde)

    def beta(self, a_tilde):
        return self.beta_projection(a_tilde)

    def forward(self, encoding, a_tilde):
        return apply_pat(encoding, a_tilde, self)


def apply_pat(encoding: torch.Tensor, a_tilde: torch.Tensor,
              params: PatParameters) -> torch.Tensor:
    """Channelwise scale/shift of the identity encoding (AdaIN-style)."""
    if a_tilde.shape[-1] != encoding.shape[-3]:
        raise ValueError(
            f"embedding dim {a_tilde.shape[-1]} does not match encoding "
            f"channels {encoding.shape[-3]}"
        )
    gamma = params.gamma(a_tilde).unsqueeze(-1).unsqueeze(-1)
    out = gamma * encoding
    if params.beta_enabled:
        out = out + params.beta(a_tilde).unsqueeze(-1).unsqueeze(-1)
    return out


def anchor_interpolation_embedding(weight: torch.Tensor, groups, t) -> torch.Tensor:
    """Baseline embedding: per-group mean bases anchored at group centers,
    linearly interpolated between the two anchors bracketing t.

    ``groups`` is a list of inclusive (lo, hi) age ranges, ordered and
    non-overlapping. Targets outside the anchor span clamp to the nearest
    anchor.
    """
    k = weight.shape[0]
    if not groups:
        raise ValueError("groups must be nonempty")
    prev_hi = None
    for lo, hi in groups:
        if not (0 <= lo <= hi <= k - 1):
            raise ValueError(f"group ({lo}, {hi}) out of range [0, {k - 1}]")
        if prev_hi is not None and lo != prev_hi + 1:
            raise ValueError("groups must be contiguous and non-overlapping")
        prev_hi = hi
    t = float(t)
    if not groups[0][0] <= t <= groups[-1][1]:
        raise ValueError(f"target {t} outside covered range")

    centers = [(lo + hi) / 2.0 for lo, hi in groups]
    anchors = [weight[lo:hi + 1].mean(dim=0) for lo, hi in groups]
    if t <= centers[0]:
        return anchors[0].clone()
    if t >= centers[-1]:
        return anchors[-1].clone()
    for i in range(len(centers) - 1):
        if centers[i] <= t <= centers[i + 1]:
            alpha = (t - centers[i]) / (centers[i + 1] - centers[i])
            return (1 - alpha) * anchors[i] + alpha * anchors[i + 1]
    raise AssertionError("unreachable")
