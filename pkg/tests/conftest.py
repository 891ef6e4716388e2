import numpy as np
import pytest
import torch

from resage.profiles import SizeProfile


@pytest.fixture(scope="session")
def desk_profile():
    return SizeProfile.desk()


@pytest.fixture(scope="session")
def tiny_profile():
    # Smallest legal geometry, for fast gradient and contract checks.
    return SizeProfile(image_side=16, base_channels=4, encoding_side=4,
                       encoding_channels=16, num_classes=10)


def central_difference(fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Finite-difference gradient of a scalar fn wrt a flat tensor copy."""
    x = x.detach().double()
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = fn(x.clone())
        flat[i] = orig - eps
        lo = fn(x.clone())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def assert_grad_close(analytic: torch.Tensor, numeric: torch.Tensor,
                      rtol: float = 1e-4):
    denom = numeric.abs().clamp_min(1e-8)
    rel = ((analytic - numeric).abs() / denom).max().item()
    scale = numeric.abs().max().item()
    abs_err = (analytic - numeric).abs().max().item()
    # relative where the gradient is meaningful, absolute where it vanishes
    assert rel < rtol or abs_err < rtol * max(scale, 1.0), (
        f"gradient mismatch: rel={rel:.3e}, abs={abs_err:.3e}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
