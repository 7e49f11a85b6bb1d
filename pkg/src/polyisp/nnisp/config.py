"""Architecture hyperparameters for the conditioned ISP network."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace


@dataclass(frozen=True)
class XcitConfig:
    """Cross-covariance transformer branch (global scene semantics)."""

    patch: int = 16
    blocks: int = 4
    dim: int = 128
    heads: int = 4
    input_size: int = 256
    cls_blocks: int = 2
    ffn_ratio: int = 4


@dataclass(frozen=True)
class FeatureToggles:
    """Ablation switches, cumulative rows A..E of the feature ladder.

    Row A = all off, B adds adapt_illuminants, C adds global_semantics,
    D adds attention, E adds iso_exp.
    """

    adapt_illuminants: bool = True
    global_semantics: bool = True
    attention: bool = True
    iso_exp: bool = True

    @staticmethod
    def row(letter: str) -> "FeatureToggles":
        order = ["adapt_illuminants", "global_semantics", "attention", "iso_exp"]
        idx = "ABCDE".index(letter.upper())
        return FeatureToggles(**{name: i < idx for i, name in enumerate(order)})


@dataclass(frozen=True)
class ModelConfig:
    levels: int = 3
    widths: tuple[int, ...] = (64, 128, 256)
    bottleneck_width: int = 512
    embed_dim: int = 128
    res_attn_blocks_per_level: int = 1
    bottleneck_res_blocks: int = 2
    attn_heads: int = 4
    xcit: XcitConfig = field(default_factory=XcitConfig)
    num_devices: int = 3
    features: FeatureToggles = field(default_factory=FeatureToggles)
    # Illumination estimator (learned-wb pipeline); independent of the
    # A..E feature ladder.
    learned_wb: bool = True
    # Device conditioning (embedding table + bottleneck product + style
    # queries).  Off gives the unconditional single-head reference used
    # as a training baseline.
    conditioning: bool = True

    def __post_init__(self) -> None:
        if len(self.widths) != self.levels:
            raise ValueError("widths must have one entry per level")
        if any(a >= b for a, b in zip(self.widths, self.widths[1:])):
            raise ValueError("widths must be strictly increasing")
        if self.bottleneck_width % self.attn_heads != 0:
            raise ValueError("bottleneck_width must be divisible by attn_heads")
        if self.xcit.input_size % self.xcit.patch != 0:
            raise ValueError("xcit input_size must be divisible by xcit patch")

    @staticmethod
    def full(num_devices: int = 3, **kw) -> "ModelConfig":
        return ModelConfig(num_devices=num_devices, **kw)

    @staticmethod
    def toy(num_devices: int = 3, **kw) -> "ModelConfig":
        return ModelConfig(
            widths=(16, 32, 64),
            bottleneck_width=128,
            xcit=XcitConfig(dim=32, blocks=2, input_size=64, cls_blocks=1),
            num_devices=num_devices,
            **kw,
        )

    def with_features(self, features: FeatureToggles) -> "ModelConfig":
        return replace(self, features=features)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        d["xcit"] = XcitConfig(**d["xcit"])
        d["features"] = FeatureToggles(**d["features"])
        return ModelConfig(**d)
