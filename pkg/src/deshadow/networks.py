"""Dense-block U-Net generators and the spectrally normalized joint discriminator.

Four generator heads share one architecture family and differ only in the
output activation and input channel count:

  residual      tanh      -> [-1, 1]
  removal       sigmoid   -> [0, 1]
  refinement    sigmoid   -> [0, 1]   (consumes channel-concatenated inputs)
  illumination  softplus clamped at S_MAX -> [0, S_MAX]

The discriminator is five 4x4 convolutions (stride 2 then 4,4,4,4;
channels 64 -> 128 -> 256 -> 512 -> 1), each followed by a norm layer and
LeakyReLU, then one fully connected layer to a sigmoid probability.
Every conv and FC weight is divided by a power-iteration estimate of its
top singular value; the iteration vectors live in buffers so they persist
through checkpoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .decomposition import S_MAX
from .errors import NumericError, ShapeError

HEADS = ("residual", "removal", "illumination", "refinement")

_SIGMA_FLOOR = 1e-12


@dataclass
class GeneratorConfig:
    levels: int = 4
    base_channels: int = 32
    dense_layers_per_block: int = 4
    growth_rate: int = 12

    def __post_init__(self):
        if self.levels < 1:
            raise ShapeError(f"levels must be >= 1, got {self.levels}")

    @classmethod
    def toy(cls) -> "GeneratorConfig":
        return cls(levels=4, base_channels=8, dense_layers_per_block=2, growth_rate=4)


def trunc_normal_init(module: nn.Module) -> None:
    """Truncated normal (std 0.02) conv/linear weights, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.trunc_normal_(m.weight, std=0.02, a=-0.04, b=0.04)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.InstanceNorm2d)):
            if m.weight is not None:
                nn.init.ones_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class DenseBlock(nn.Module):
    """Stack of conv layers where layer k consumes the block input
    concatenated with every previous layer output. Output channels are
    in_channels + num_layers * growth_rate."""

    def __init__(self, in_channels: int, num_layers: int, growth_rate: int):
        super().__init__()
        self.layers = nn.ModuleList()
        for k in range(num_layers):
            ch = in_channels + k * growth_rate
            self.layers.append(
                nn.Sequential(
                    nn.Conv2d(ch, growth_rate, kernel_size=3, padding=1),
                    nn.BatchNorm2d(growth_rate),
                    nn.ReLU(inplace=True),
                )
            )
        self.out_channels = in_channels + num_layers * growth_rate

    def forward(self, x):
        feats = x
        for layer in self.layers:
            feats = torch.cat([feats, layer(feats)], dim=1)
        return feats


class DenseUNet(nn.Module):
    """Contracting/expanding dense-block network with concatenating skips.

    Downsampling is a stride-2 conv, upsampling nearest-neighbor plus conv.
    Spatial size is preserved; inputs must be divisible by 2**levels.
    """

    def __init__(self, config: GeneratorConfig, head: str, in_channels: int = 3):
        super().__init__()
        if head not in HEADS:
            raise ShapeError(f"unknown head {head!r}, expected one of {HEADS}")
        self.config = config
        self.head = head
        self.in_channels = in_channels

        ch = config.base_channels
        self.stem = nn.Conv2d(in_channels, ch, kernel_size=3, padding=1)

        self.enc_blocks = nn.ModuleList()
        self.down = nn.ModuleList()
        skip_channels = []
        for _ in range(config.levels):
            block = DenseBlock(ch, config.dense_layers_per_block, config.growth_rate)
            self.enc_blocks.append(block)
            ch = block.out_channels
            skip_channels.append(ch)
            self.down.append(nn.Conv2d(ch, ch, kernel_size=3, stride=2, padding=1))

        self.bottleneck = DenseBlock(ch, config.dense_layers_per_block, config.growth_rate)
        ch = self.bottleneck.out_channels

        self.up = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        for skip_ch in reversed(skip_channels):
            self.up.append(nn.Conv2d(ch, skip_ch, kernel_size=3, padding=1))
            block = DenseBlock(2 * skip_ch, config.dense_layers_per_block, config.growth_rate)
            self.dec_blocks.append(block)
            ch = block.out_channels

        self.head_conv = nn.Conv2d(ch, 3, kernel_size=1)
        trunc_normal_init(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"expected (B, {self.in_channels}, H, W), got {tuple(x.shape)}"
            )
        div = 2**self.config.levels
        if x.shape[-2] % div or x.shape[-1] % div:
            raise ShapeError(
                f"spatial size {tuple(x.shape[-2:])} not divisible by 2^levels={div}"
            )
        feats = self.stem(x)
        skips = []
        for block, down in zip(self.enc_blocks, self.down):
            feats = block(feats)
            skips.append(feats)
            feats = down(feats)
        feats = self.bottleneck(feats)
        for up, block, skip in zip(self.up, self.dec_blocks, reversed(skips)):
            feats = up(F.interpolate(feats, scale_factor=2, mode="nearest"))
            feats = block(torch.cat([feats, skip], dim=1))
        out = self.head_conv(feats)
        if self.head == "residual":
            out = torch.tanh(out)
        elif self.head == "illumination":
            out = torch.clamp(F.softplus(out), max=S_MAX)
        else:
            out = torch.sigmoid(out)
        if not torch.isfinite(out).all():
            raise NumericError(f"{self.head} generator produced non-finite output")
        return out


def refinement_forward(
    net: DenseUNet, coarse: torch.Tensor, rem1: torch.Tensor, rem2: torch.Tensor
) -> torch.Tensor:
    """Refine a coarse removal image from its three complementary sources."""
    if not (coarse.shape == rem1.shape == rem2.shape):
        raise ShapeError(
            f"refinement inputs differ: {tuple(coarse.shape)}, "
            f"{tuple(rem1.shape)}, {tuple(rem2.shape)}"
        )
    return net(torch.cat([coarse, rem1, rem2], dim=1))


def spectral_normalize(
    weight: torch.Tensor, u: torch.Tensor, iters: int = 1
) -> tuple[torch.Tensor, torch.Tensor]:
    """Divide a (conv or FC) weight by its estimated top singular value.

    The weight is viewed as (out_channels, rest); u is the persisted unit
    vector of the power iteration and is advanced `iters` times. A zero
    weight (sigma below 1e-12) is returned unchanged together with the
    original u.
    """
    w2d = weight.detach().reshape(weight.shape[0], -1)
    if u.shape != (w2d.shape[0],):
        raise ShapeError(f"u must have shape ({w2d.shape[0]},), got {tuple(u.shape)}")
    u_new = u
    v = None
    with torch.no_grad():
        for _ in range(max(1, iters)):
            v = F.normalize(torch.mv(w2d.t(), u_new), dim=0, eps=_SIGMA_FLOOR)
            u_new = F.normalize(torch.mv(w2d, v), dim=0, eps=_SIGMA_FLOOR)
        sigma = torch.dot(u_new, torch.mv(w2d, v))
    if float(sigma) < _SIGMA_FLOOR:
        return weight, u
    return weight / sigma, u_new


class _SpectralWeight(nn.Module):
    """Mixin state for a spectrally normalized weight: the raw parameter
    plus the power-iteration vector. sigma is estimated as ||W^T u||, which
    matches the one-step power-iteration value and is differentiable in W."""

    weight: nn.Parameter
    u: torch.Tensor

    def _init_u(self, out_channels: int) -> None:
        u = torch.randn(out_channels)
        self.register_buffer("u", F.normalize(u, dim=0, eps=_SIGMA_FLOOR))

    def advance_power_iteration(self, iters: int = 1) -> None:
        with torch.no_grad():
            w2d = self.weight.reshape(self.weight.shape[0], -1)
            u = self.u
            for _ in range(iters):
                v = F.normalize(torch.mv(w2d.t(), u), dim=0, eps=_SIGMA_FLOOR)
                u = F.normalize(torch.mv(w2d, v), dim=0, eps=_SIGMA_FLOOR)
            if float(torch.mv(w2d.t(), u).norm()) >= _SIGMA_FLOOR:
                self.u.copy_(u)

    def normalized_weight(self) -> torch.Tensor:
        w2d = self.weight.reshape(self.weight.shape[0], -1)
        sigma = torch.mv(w2d.t(), self.u.detach()).norm()
        if float(sigma.detach()) < _SIGMA_FLOOR:
            return self.weight
        return self.weight / sigma


class SpectralConv2d(_SpectralWeight):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int):
        super().__init__()
        self.stride = stride
        self.kernel_size = kernel_size
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        nn.init.trunc_normal_(self.weight, std=0.02, a=-0.04, b=0.04)
        self._init_u(out_channels)

    def forward(self, x):
        x = same_pad(x, self.kernel_size, self.stride)
        return F.conv2d(x, self.normalized_weight(), self.bias, stride=self.stride)


class SpectralLinear(_SpectralWeight):
    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_features, in_features))
        self.bias = nn.Parameter(torch.zeros(out_features))
        nn.init.trunc_normal_(self.weight, std=0.02, a=-0.04, b=0.04)
        self._init_u(out_features)

    def forward(self, x):
        return F.linear(x, self.normalized_weight(), self.bias)


def same_pad(x: torch.Tensor, kernel_size: int, stride: int) -> torch.Tensor:
    """TF-style SAME padding: output size is ceil(input / stride)."""
    h, w = x.shape[-2:]
    out_h, out_w = -(-h // stride), -(-w // stride)
    pad_h = max((out_h - 1) * stride + kernel_size - h, 0)
    pad_w = max((out_w - 1) * stride + kernel_size - w, 0)
    return F.pad(x, (pad_w // 2, pad_w - pad_w // 2, pad_h // 2, pad_h - pad_h // 2))


_DISC_CHANNELS = (64, 128, 256, 512, 1)
_DISC_STRIDES = (2, 4, 4, 4, 4)


class Discriminator(nn.Module):
    """Scores an image-like 3-channel input as a probability of being real.

    One parameter set serves all three streams (removal result, residual
    map, illumination map). Built for a fixed spatial size; the FC input
    dimension is derived from it.
    """

    def __init__(self, image_size: int, norm: str = "batch"):
        super().__init__()
        if norm not in ("batch", "instance"):
            raise ShapeError(f"unknown norm {norm!r}")
        self.image_size = image_size
        self.norm = norm
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        in_ch = 3
        size = image_size
        for out_ch, stride in zip(_DISC_CHANNELS, _DISC_STRIDES):
            self.convs.append(SpectralConv2d(in_ch, out_ch, kernel_size=4, stride=stride))
            if norm == "batch":
                self.norms.append(nn.BatchNorm2d(out_ch))
            else:
                # per-sample instance statistics; GroupNorm with one group
                # per channel also handles the 1x1 late feature maps
                self.norms.append(nn.GroupNorm(out_ch, out_ch, affine=True))
            in_ch = out_ch
            size = -(-size // stride)
        self.fc = SpectralLinear(in_ch * size * size, 1)
        self.final_size = size

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B,) probabilities; H and W must equal image_size."""
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W), got {tuple(x.shape)}")
        if x.shape[-2] != self.image_size or x.shape[-1] != self.image_size:
            raise ShapeError(
                f"discriminator built for {self.image_size}x{self.image_size}, "
                f"got {tuple(x.shape[-2:])}"
            )
        for conv, norm in zip(self.convs, self.norms):
            x = F.leaky_relu(norm(conv(x)), negative_slope=0.2)
        logit = self.fc(x.flatten(1)).squeeze(1)
        return torch.sigmoid(logit)

    def advance_power_iterations(self, iters: int = 1) -> None:
        """One (or more) power-iteration steps on every spectral weight."""
        for m in self.modules():
            if isinstance(m, _SpectralWeight):
                m.advance_power_iteration(iters)

    def spectral_weights(self) -> list[tuple[str, torch.Tensor]]:
        """Named normalized weights, reshaped 2-D, as used by forward."""
        out = []
        for name, m in self.named_modules():
            if isinstance(m, _SpectralWeight):
                w = m.normalized_weight()
                out.append((name or "fc", w.reshape(w.shape[0], -1)))
        return out


class FeatureExtractor(nn.Module):
    """Frozen convolutional feature pyramid for the perceptual loss.

    mode "pretrained" taps a VGG19 backbone at the third stage's last
    activation (requires torchvision weights on disk or downloadable);
    mode "fixed_random" builds a small seeded pyramid usable offline.
    Parameters never receive gradients and the output is deterministic.
    """

    def __init__(self, mode: str = "pretrained", seed: int = 0):
        super().__init__()
        self.mode = mode
        self.seed = seed
        if mode == "pretrained":
            try:
                from torchvision.models import VGG19_Weights, vgg19
            except ImportError as exc:  # pragma: no cover
                raise RuntimeError(
                    "pretrained feature extractor requires torchvision"
                ) from exc
            backbone = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features[:18]
            self.body = backbone
            self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
            self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        elif mode == "fixed_random":
            gen = torch.Generator().manual_seed(seed)
            layers = []
            in_ch = 3
            for out_ch, stride in ((16, 1), (32, 2), (32, 2)):
                conv = nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1)
                with torch.no_grad():
                    conv.weight.copy_(
                        torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (9 * in_ch))
                    )
                    conv.bias.zero_()
                layers += [conv, nn.ReLU(inplace=True)]
                in_ch = out_ch
            self.body = nn.Sequential(*layers)
            self.mean = None
            self.std = None
        else:
            raise ShapeError(f"unknown extractor mode {mode!r}")
        for p in self.body.parameters():
            p.requires_grad_(False)
        self.body.eval()

    def train(self, mode: bool = True):
        # stays frozen in eval mode regardless of the surrounding module
        super().train(mode)
        self.body.eval()
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.mode == "pretrained":
            x = (x - self.mean) / self.std
        return self.body(x)
