"""The segmentation network family: U-shaped baselines and the
generator-guided variant.

All variants share one trunk layout: encoder stages of double 3x3 conv blocks
(conv -> ReLU -> batch norm) with 2x2 max pooling, a bottleneck block with
dropout, and decoder stages of 2x2 up-convolution, skip concatenation and the
same double-conv block. SE variants recalibrate channels after each block;
residual variants add a 1x1-projected skip across each block. The
generator-guided variant additionally pools the bottleneck into a small FC
head that predicts the whole-volume landmark vector, feeds it through the
frozen shape decoder, and adds the decoded shape map onto the decoder's final
features before one more conv block and the sigmoid output head.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from . import landmarks as lm
from .shape_generator import GeneratorSpec, ShapeDecoder, build_generator, freeze


class Variant(str, enum.Enum):
    UNET = "unet"
    RESUNET = "resunet"
    SE_RESUNET = "se_resunet"
    SE_UNET = "se_unet"
    DGMNET = "dgmnet"

    @property
    def uses_se(self) -> bool:
        return self in (Variant.SE_UNET, Variant.SE_RESUNET, Variant.DGMNET)

    @property
    def uses_residual(self) -> bool:
        return self in (Variant.RESUNET, Variant.SE_RESUNET)


PoolMode = ("avg", "max")


@dataclass(frozen=True)
class ModelSpec:
    variant: Variant = Variant.UNET
    levels: int = 3
    base_filters: int = 8
    se_reduction: int = 4
    dropout_rate: float = 0.5
    input_size: tuple[int, int] = (64, 64)  # (H, W)
    max_slices: int = 16
    fc_hidden: int = 256
    model_path_pool: str = "avg"
    generator: GeneratorSpec | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.levels < 3:
            raise ValueError(f"levels must be >= 3, got {self.levels}")
        if self.base_filters < 4:
            raise ValueError(f"base_filters must be >= 4, got {self.base_filters}")
        if self.se_reduction < 2:
            raise ValueError(f"se_reduction must be >= 2, got {self.se_reduction}")
        if not (0 <= self.dropout_rate < 1):
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        h, w = self.input_size
        if h % 2**self.levels or w % 2**self.levels:
            raise ValueError(
                f"input_size {self.input_size} must be divisible by 2^levels = {2**self.levels}"
            )
        if self.model_path_pool not in PoolMode:
            raise ValueError(f"model_path_pool must be one of {PoolMode}")
        if self.variant is Variant.DGMNET:
            if self.generator is None:
                raise ValueError("DGMNET requires a generator spec")
            if self.generator.landmark_dim != self.landmark_dim:
                raise ValueError(
                    f"generator landmark_dim {self.generator.landmark_dim} does not match "
                    f"max_slices * 9 = {self.landmark_dim}"
                )
        elif self.generator is not None:
            raise ValueError(f"variant {self.variant.value} does not take a generator")

    @property
    def landmark_dim(self) -> int:
        return lm.landmark_dim(self.max_slices)


class SqueezeExcite(nn.Module):
    """Channel recalibration: global average squeeze, bottleneck FC pair,
    sigmoid gate multiplied back onto the feature map."""

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x):
        s = x.mean(dim=(2, 3))
        g = torch.sigmoid(self.fc2(torch.relu(self.fc1(s))))
        return x * g[:, :, None, None]


class ConvBlock(nn.Module):
    """[3x3 conv -> ReLU -> BN] x2, optional SE stage, optional projected
    residual skip from block input to block output."""

    def __init__(self, in_ch: int, out_ch: int, variant: Variant, se_reduction: int = 4):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.se = SqueezeExcite(out_ch, se_reduction) if variant.uses_se else None
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if variant.uses_residual else None

    def forward(self, x):
        y = self.bn1(torch.relu(self.conv1(x)))
        y = self.bn2(torch.relu(self.conv2(y)))
        if self.se is not None:
            y = self.se(y)
        if self.skip is not None:
            y = y + self.skip(x)
        return y


class EncoderStage(nn.Module):
    """Variant conv block followed by 2x2 max pooling; forward returns
    (pre-pool features for the skip connection, pooled features)."""

    def __init__(self, in_ch: int, out_ch: int, variant: Variant, se_reduction: int = 4):
        super().__init__()
        self.block = ConvBlock(in_ch, out_ch, variant, se_reduction)
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        f = self.block(x)
        return f, self.pool(f)


class DecoderStage(nn.Module):
    """2x2 up-convolution (halving channels), concatenation with the matching
    encoder skip, then the variant conv block."""

    def __init__(self, in_ch: int, skip_ch: int, out_ch: int, variant: Variant, se_reduction: int = 4):
        super().__init__()
        self.up = nn.ConvTranspose2d(in_ch, in_ch // 2, kernel_size=2, stride=2)
        self.block = ConvBlock(in_ch // 2 + skip_ch, out_ch, variant, se_reduction)

    def forward(self, x, skip):
        u = self.up(x)
        if u.shape[-2:] != skip.shape[-2:]:
            raise ValueError(
                f"upsampled map {tuple(u.shape[-2:])} does not match skip {tuple(skip.shape[-2:])}"
            )
        return self.block(torch.cat([u, skip], dim=1))


def build_encoder_block(in_ch: int, out_ch: int, variant: Variant, se_reduction: int = 4) -> EncoderStage:
    if in_ch < 1 or out_ch < 1:
        raise ValueError("channel counts must be positive")
    return EncoderStage(in_ch, out_ch, Variant(variant), se_reduction)


def build_decoder_block(
    in_ch: int, skip_ch: int, out_ch: int, variant: Variant, se_reduction: int = 4
) -> DecoderStage:
    if in_ch < 2 or skip_ch < 1 or out_ch < 1:
        raise ValueError("channel counts must be positive (in_ch at least 2)")
    return DecoderStage(in_ch, skip_ch, out_ch, Variant(variant), se_reduction)


class UNetTrunk(nn.Module):
    """Encoder-decoder without a head; forward returns (final feature map at
    input resolution with base_filters channels, bottleneck feature map)."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        bf = spec.base_filters
        enc_out = [bf * 2**i for i in range(spec.levels)]
        self.encoder = nn.ModuleList()
        in_ch = 1
        for out_ch in enc_out:
            self.encoder.append(EncoderStage(in_ch, out_ch, spec.variant, spec.se_reduction))
            in_ch = out_ch
        self.bottleneck_channels = bf * 2**spec.levels
        self.bottleneck = ConvBlock(in_ch, self.bottleneck_channels, spec.variant, spec.se_reduction)
        self.dropout = nn.Dropout2d(spec.dropout_rate)
        self.decoder = nn.ModuleList()
        in_ch = self.bottleneck_channels
        for skip_ch in reversed(enc_out):
            self.decoder.append(DecoderStage(in_ch, skip_ch, skip_ch, spec.variant, spec.se_reduction))
            in_ch = skip_ch

    def forward(self, x):
        skips = []
        for stage in self.encoder:
            f, x = stage(x)
            skips.append(f)
        bottleneck = self.bottleneck(x)
        y = self.dropout(bottleneck)
        for stage, skip in zip(self.decoder, reversed(skips)):
            y = stage(y, skip)
        return y, bottleneck


def _check_input(x: torch.Tensor, spec: ModelSpec) -> None:
    h, w = spec.input_size
    if x.dim() != 4 or x.shape[1] != 1:
        raise ValueError(f"expected input of shape (N, 1, H, W), got {tuple(x.shape)}")
    if x.shape[-2:] != (h, w):
        raise ValueError(f"expected spatial size {spec.input_size}, got {tuple(x.shape[-2:])}")


class SegmentationNet(nn.Module):
    """Baseline variants: trunk plus a 1x1 conv + sigmoid mask head.

    Forward returns ``(mask_probs, None)``; the second slot is the landmark
    prediction emitted only by the generator-guided variant.
    """

    def __init__(self, spec: ModelSpec):
        super().__init__()
        if spec.variant is Variant.DGMNET:
            raise ValueError("use GeneratorGuidedNet for the DGMNET variant")
        self.spec = spec
        self.trunk = UNetTrunk(spec)
        self.head = nn.Conv2d(spec.base_filters, 1, 1)
        self.frozen_names: set[str] = set()

    def forward(self, x, slice_index=None):
        _check_input(x, self.spec)
        feats, _ = self.trunk(x)
        return torch.sigmoid(self.head(feats)), None


class GeneratorGuidedNet(nn.Module):
    """SE trunk plus a landmark FC head feeding a frozen shape decoder whose
    output is broadcast-added onto the decoder features."""

    def __init__(self, spec: ModelSpec, generator: ShapeDecoder):
        super().__init__()
        if spec.variant is not Variant.DGMNET:
            raise ValueError(f"GeneratorGuidedNet requires the DGMNET variant, got {spec.variant}")
        if generator.spec != spec.generator:
            raise ValueError("generator module spec does not match the model spec")
        self.spec = spec
        self.trunk = UNetTrunk(spec)
        self.fc1 = nn.Linear(self.trunk.bottleneck_channels, spec.fc_hidden)
        self.fc2 = nn.Linear(spec.fc_hidden, spec.landmark_dim)
        self.generator = freeze(generator)
        self.merge_block = ConvBlock(spec.base_filters, spec.base_filters, spec.variant, spec.se_reduction)
        self.head = nn.Conv2d(spec.base_filters, 1, 1)
        self.frozen_names = {f"generator.{name}" for name in self.generator.frozen_names}

    def predict_landmarks(self, bottleneck: torch.Tensor) -> torch.Tensor:
        """Whole-volume landmark vector: sigmoid on presence entries,
        identity on coordinate entries."""
        if self.spec.model_path_pool == "avg":
            pooled = bottleneck.mean(dim=(2, 3))
        else:
            pooled = bottleneck.amax(dim=(2, 3))
        vec = self.fc2(torch.relu(self.fc1(pooled)))
        blocks = vec.view(vec.shape[0], self.spec.max_slices, lm.ENTRIES_PER_SLICE)
        presence = torch.sigmoid(blocks[..., :1])
        return torch.cat([presence, blocks[..., 1:]], dim=-1).reshape(vec.shape[0], -1)

    def forward(self, x, slice_index=None):
        _check_input(x, self.spec)
        feats, bottleneck = self.trunk(x)
        landmark_pred = self.predict_landmarks(bottleneck)
        if slice_index is None:
            slice_index = x.new_full((x.shape[0],), 0.5)
        else:
            slice_index = torch.as_tensor(slice_index, dtype=x.dtype).reshape(-1)
            if slice_index.shape[0] != x.shape[0]:
                raise ValueError(
                    f"slice_index has {slice_index.shape[0]} entries for batch of {x.shape[0]}"
                )
        shape_map = self.generator(landmark_pred, slice_index)
        if shape_map.shape[-2:] != x.shape[-2:]:
            shape_map = F.interpolate(shape_map, size=x.shape[-2:], mode="bilinear", align_corners=False)
        merged = feats + shape_map  # single-channel map broadcast over channels
        y = self.merge_block(merged)
        return torch.sigmoid(self.head(y)), landmark_pred


def build_model(spec: ModelSpec, generator: ShapeDecoder | None = None, seed: int | None = None):
    """Realize a spec into a network. For DGMNET, pass a trained frozen
    generator; if omitted, a fresh (untrained) one is built from the spec."""
    if seed is not None:
        torch.manual_seed(seed)
    if spec.variant is Variant.DGMNET:
        if spec.generator is None:
            raise ValueError("DGMNET requires a generator spec")
        if generator is None:
            generator = build_generator(spec.generator)
        return GeneratorGuidedNet(spec, generator)
    if generator is not None:
        raise ValueError(f"variant {spec.variant.value} does not take a generator")
    return SegmentationNet(spec)


def count_parameters(model: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)


def paper_scale_spec(variant, max_slices: int = 64) -> ModelSpec:
    """Full-resolution configuration: 256x256 inputs, four levels, widths
    chosen so the generator-guided net stays near 1.5M trainable parameters
    while the plain U-Net sits near 31M."""
    variant = Variant(variant)
    if variant is Variant.DGMNET:
        return ModelSpec(
            variant=variant,
            levels=4,
            base_filters=13,
            se_reduction=16,
            input_size=(256, 256),
            max_slices=max_slices,
            generator=GeneratorSpec(
                landmark_dim=lm.landmark_dim(max_slices),
                projection=(64, 8, 8),
                upconv_stages=5,
                output_size=(256, 256),
            ),
        )
    return ModelSpec(
        variant=variant,
        levels=4,
        base_filters=64,
        se_reduction=16,
        input_size=(256, 256),
        max_slices=max_slices,
    )
