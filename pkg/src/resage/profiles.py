"""Model size profiles shared by every network constructor."""

from dataclasses import dataclass


class ConfigurationError(ValueError):
    """Raised when a profile or config fails validation."""


@dataclass(frozen=True)
class SizeProfile:
    """Geometry of the encoder/generator/estimator stack.

    ``encoding_channels`` is the embedding dimension D (channel count of the
    identity encoding); ``num_classes`` is the number of age classes K.
    """

    image_side: int
    base_channels: int
    encoding_side: int
    encoding_channels: int
    num_classes: int = 100

    def __post_init__(self):
        if self.image_side <= 0 or self.base_channels <= 0:
            raise ConfigurationError("image_side and base_channels must be positive")
        if self.encoding_side * 4 != self.image_side:
            raise ConfigurationError(
                f"encoding_side must be image_side/4, got {self.encoding_side} "
                f"for image_side {self.image_side}"
            )
        if self.encoding_channels != self.base_channels * 4:
            raise ConfigurationError(
                "encoding_channels must be 4*base_channels (two stride-2 doublings)"
            )
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be at least 2")

    @property
    def embedding_dim(self) -> int:
        return self.encoding_channels

    @property
    def discriminator_downsamples(self) -> int:
        # 4 stride-2 convs at full scale, 3 at desk scale.
        return 4 if self.image_side >= 256 else 3

    @classmethod
    def paper(cls) -> "SizeProfile":
        return cls(image_side=256, base_channels=64, encoding_side=64,
                   encoding_channels=256, num_classes=100)

    @classmethod
    def desk(cls) -> "SizeProfile":
        return cls(image_side=64, base_channels=16, encoding_side=16,
                   encoding_channels=64, num_classes=100)

    @classmethod
    def by_name(cls, name: str) -> "SizeProfile":
        try:
            return {"paper": cls.paper, "desk": cls.desk}[name]()
        except KeyError:
            raise ConfigurationError(f"unknown profile name: {name!r}") from None

    def to_dict(self) -> dict:
        return {
            "image_side": self.image_side,
            "base_channels": self.base_channels,
            "encoding_side": self.encoding_side,
            "encoding_channels": self.encoding_channels,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SizeProfile":
        return cls(**d)
