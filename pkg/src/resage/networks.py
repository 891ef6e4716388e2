"""Network constructors: encoder E, generator G, estimator head C, PatchGAN D.

All constructors are deterministic given (profile, seed). Conv weights are
initialized from normal(0, 0.02); the encoder uses spectral normalization on
every convolution, the generator instance normalization, and the estimator a
weight-normalized linear layer with zero bias whose weight matrix doubles as
the aging basis matrix.
"""

import copy
import io

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm

from resage.profiles import ConfigurationError, SizeProfile

CHECKPOINT_VERSION = 1


def _init_conv(m):
    if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.normal_(m.weight, 0.0, 0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)


class SpectralResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = spectral_norm(nn.Conv2d(channels, channels, 3, 1, 1))
        self.conv2 = spectral_norm(nn.Conv2d(channels, channels, 3, 1, 1))

    def forward(self, x):
        h = F.relu(self.conv1(x))
        h = self.conv2(h)
        return x + h


class InstanceResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.norm1 = nn.InstanceNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.norm2 = nn.InstanceNorm2d(channels)

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return x + h


class Encoder(nn.Module):
    """Maps an image batch (N,3,S,S) to identity encodings (N,D,S/4,S/4)."""

    def __init__(self, profile: SizeProfile):
        super().__init__()
        self.profile = profile
        c = profile.base_channels
        self.stem = nn.Sequential(
            spectral_norm(nn.Conv2d(3, c, 7, 1, 3)), nn.ReLU(inplace=True),
            spectral_norm(nn.Conv2d(c, 2 * c, 3, 2, 1)), nn.ReLU(inplace=True),
            spectral_norm(nn.Conv2d(2 * c, 4 * c, 3, 2, 1)), nn.ReLU(inplace=True),
        )
        self.blocks = nn.Sequential(*[SpectralResBlock(4 * c) for _ in range(6)])

    def forward(self, x):
        if x.shape[-1] != self.profile.image_side or x.shape[-3] != 3:
            raise ValueError(
                f"encoder expects (N,3,{self.profile.image_side},"
                f"{self.profile.image_side}), got {tuple(x.shape)}"
            )
        return self.blocks(self.stem(x))


class Generator(nn.Module):
    """Decodes a (transformed) identity encoding back to an image in [-1, 1]."""

    def __init__(self, profile: SizeProfile):
        super().__init__()
        self.profile = profile
        c = profile.base_channels
        d = profile.encoding_channels
        self.blocks = nn.Sequential(*[InstanceResBlock(d) for _ in range(3)])
        self.up = nn.Sequential(
            nn.ConvTranspose2d(d, 2 * c, 3, 2, 1, output_padding=1),
            nn.InstanceNorm2d(2 * c), nn.ReLU(inplace=True),
            nn.ConvTranspose2d(2 * c, c, 3, 2, 1, output_padding=1),
            nn.InstanceNorm2d(c), nn.ReLU(inplace=True),
        )
        self.head = nn.Conv2d(c, 3, 7, 1, 3)

    def forward(self, e):
        if e.shape[-1] != self.profile.encoding_side or \
                e.shape[-3] != self.profile.encoding_channels:
            raise ValueError(
                f"generator expects (N,{self.profile.encoding_channels},"
                f"{self.profile.encoding_side},{self.profile.encoding_side}), "
                f"got {tuple(e.shape)}"
            )
        return torch.tanh(self.head(self.up(self.blocks(e))))


class EstimatorHead(nn.Module):
    """Age estimator C: global average pooling then a weight-normalized linear.

    The effective weight matrix W (K x D) is ``scale[j] * direction[j] /
    ||direction[j]||`` per row, with zero bias; W doubles as the aging basis
    matrix, one row per age class.
    """

    def __init__(self, profile: SizeProfile):
        super().__init__()
        self.profile = profile
        k, d = profile.num_classes, profile.encoding_channels
        self.direction = nn.Parameter(torch.empty(k, d).normal_(0, 0.02))
        self.scale = nn.Parameter(torch.ones(k))

    @property
    def weight(self) -> torch.Tensor:
        unit = self.direction / self.direction.norm(dim=1, keepdim=True)
        return self.scale.unsqueeze(1) * unit

    @property
    def bias(self) -> torch.Tensor:
        return torch.zeros(self.profile.num_classes)

    def forward(self, encoding):
        if encoding.shape[-3] != self.profile.encoding_channels:
            raise ValueError(
                f"estimator expects channel dim {self.profile.encoding_channels}, "
                f"got {tuple(encoding.shape)}"
            )
        pooled = encoding.mean(dim=(-2, -1))
        return F.linear(pooled, self.weight)


class PatchDiscriminator(nn.Module):
    """PatchGAN discriminator emitting a grid of raw per-patch logits."""

    def __init__(self, profile: SizeProfile):
        super().__init__()
        self.profile = profile
        layers = []
        c_in, c_out = 3, profile.base_channels * (4 if profile.image_side >= 256 else 1)
        for _ in range(profile.discriminator_downsamples):
            layers += [spectral_norm(nn.Conv2d(c_in, c_out, 4, 2, 1)),
                       nn.LeakyReLU(0.2, inplace=True)]
            c_in, c_out = c_out, c_out * 2
        layers.append(spectral_norm(nn.Conv2d(c_in, 1, 4, 1, 1)))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        if x.shape[-1] != self.profile.image_side or x.shape[-3] != 3:
            raise ValueError(
                f"discriminator expects (N,3,{self.profile.image_side},"
                f"{self.profile.image_side}), got {tuple(x.shape)}"
            )
        return self.body(x)


def _warm_spectral_norm(net, iters=200):
    """Run the spectral-norm power iteration to convergence at init, so the
    normalized weights respect the unit bound from the first forward pass."""
    with torch.no_grad():
        for module in net.modules():
            if hasattr(module, "parametrizations") and "weight" in module.parametrizations:
                for _ in range(iters):
                    module.weight  # noqa: B018 - access triggers one iteration


def _seeded(builder, profile, seed):
    if not isinstance(profile, SizeProfile):
        raise ConfigurationError("profile must be a SizeProfile")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = builder(profile)
        net.apply(_init_conv)
        _warm_spectral_norm(net)
    return net


def build_encoder(profile: SizeProfile, seed: int) -> Encoder:
    return _seeded(Encoder, profile, seed)


def build_generator(profile: SizeProfile, seed: int) -> Generator:
    return _seeded(Generator, profile, seed)


def build_estimator_head(profile: SizeProfile, seed: int) -> EstimatorHead:
    if not isinstance(profile, SizeProfile):
        raise ConfigurationError("profile must be a SizeProfile")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return EstimatorHead(profile)


def build_discriminator(profile: SizeProfile, seed: int) -> PatchDiscriminator:
    return _seeded(PatchDiscriminator, profile, seed)


class ModelBundle:
    """The five networks plus profile and training step counter."""

    def __init__(self, profile: SizeProfile, seed: int, beta_enabled: bool = True):
        # Local import: embedding depends on networks for the estimator type.
        from resage.embedding import PatParameters

        self.profile = profile
        self.encoder = build_encoder(profile, seed)
        self.estimator = build_estimator_head(profile, seed + 1)
        self.pat = PatParameters(profile.encoding_channels, beta_enabled=beta_enabled)
        self.generator = build_generator(profile, seed + 2)
        self.discriminator = build_discriminator(profile, seed + 3)
        self.step = 0
        self.version = CHECKPOINT_VERSION

    def generator_side_parameters(self):
        for net in (self.encoder, self.estimator, self.pat, self.generator):
            yield from net.parameters()

    def networks(self):
        return {
            "encoder": self.encoder,
            "estimator": self.estimator,
            "pat": self.pat,
            "generator": self.generator,
            "discriminator": self.discriminator,
        }


def frozen_copy(module: nn.Module) -> nn.Module:
    """Detached deep copy used for the fake-age loss; gradients still flow
    through activations but never into the copy's parameters."""
    frozen = copy.deepcopy(module)
    for p in frozen.parameters():
        p.requires_grad_(False)
    return frozen


def is_frozen(module: nn.Module) -> bool:
    return all(not p.requires_grad for p in module.parameters())


def save_checkpoint(path, bundle: ModelBundle, optimizers=None, extra=None):
    payload = {
        "version": bundle.version,
        "profile": bundle.profile.to_dict(),
        "step": bundle.step,
        "state": {name: net.state_dict() for name, net in bundle.networks().items()},
        "beta_enabled": bundle.pat.beta_enabled,
    }
    if optimizers is not None:
        payload["optimizers"] = {k: opt.state_dict() for k, opt in optimizers.items()}
    if extra is not None:
        payload["extra"] = extra
    buf = io.BytesIO()
    torch.save(payload, buf)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, profile: SizeProfile = None) -> tuple:
    """Returns (bundle, payload). Raises on profile mismatch."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(
            f"unsupported checkpoint version: {payload.get('version')}"
        )
    ckpt_profile = SizeProfile.from_dict(payload["profile"])
    if profile is not None and ckpt_profile != profile:
        raise ConfigurationError(
            f"checkpoint profile {ckpt_profile} does not match requested {profile}"
        )
    bundle = ModelBundle(ckpt_profile, seed=0,
                         beta_enabled=payload.get("beta_enabled", True))
    for name, net in bundle.networks().items():
        net.load_state_dict(payload["state"][name])
    bundle.step = payload["step"]
    return bundle, payload
