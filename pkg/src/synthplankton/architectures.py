"""Generator / discriminator definitions for the GAN variants.

Generators (``GeneratorSpec.variant``):

* ``baseline``  - dense stem then nearest-upsample + 3x3 conv stages.
* ``fastgan``   - baseline plus skip-layer excitation from resolution r to 8r.
* ``stylegan2`` - learned constant input, mapping network, AdaIN at every stage.

Discriminators (``DiscriminatorSpec.variant``):

* ``baseline``  - 3x3 conv + average-pool stack mirroring the generator.
* ``projected`` - a frozen random conv feature stack whose activations at
  ``n_projections`` depths are mixed by fixed 1x1 maps and each judged by an
  independent small head.

Modules work in NCHW with pixels in [-1, 1]; :func:`generate` converts to NHWC.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

RESOLUTIONS = (32, 64, 128, 256, 512, 1024)
GENERATOR_VARIANTS = ("baseline", "fastgan", "stylegan2")
DISCRIMINATOR_VARIANTS = ("baseline", "projected")
ADAIN_EPS = 1e-8
MIN_CHANNELS = 8


@dataclass(frozen=True)
class GeneratorSpec:
    variant: str = "baseline"
    latent_dim: int = 64
    base_channels: int = 64
    output_resolution: int = 32
    style_dim: int = 64
    mapping_depth: int = 2

    def __post_init__(self):
        if self.variant not in GENERATOR_VARIANTS:
            raise ValueError(f"unknown generator variant {self.variant!r}")
        if self.output_resolution not in RESOLUTIONS:
            raise ValueError(f"resolution not in ladder: {self.output_resolution} not in {RESOLUTIONS}")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.variant == "stylegan2":
            if self.style_dim < 1:
                raise ValueError("stylegan2 requires style_dim >= 1")
            if self.mapping_depth < 1:
                raise ValueError("stylegan2 requires mapping_depth >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        return cls(**d)


@dataclass(frozen=True)
class DiscriminatorSpec:
    variant: str = "baseline"
    base_channels: int = 64
    n_projections: int = 4
    feature_seed: int = 0
    feature_source: str | None = None

    def __post_init__(self):
        if self.variant not in DISCRIMINATOR_VARIANTS:
            raise ValueError(f"unknown discriminator variant {self.variant!r}")
        if self.variant == "projected" and self.n_projections < 1:
            raise ValueError("projected discriminator requires n_projections >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiscriminatorSpec":
        return cls(**d)


def stage_channels(base_channels: int, resolution: int) -> list[int]:
    """Channel width at each stage 4x4, 8x8, ..., resolution (halving, floor MIN_CHANNELS)."""
    n = int(math.log2(resolution // 4)) + 1
    return [max(MIN_CHANNELS, base_channels >> k) for k in range(n)]


# building blocks -------------------------------------------------------------

class UpBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)

    def forward(self, x):
        return F.silu(self.conv(F.interpolate(x, scale_factor=2, mode="nearest")))


class DownBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)

    def forward(self, x):
        return F.avg_pool2d(F.silu(self.conv(x)), 2)


class SLEBlock(nn.Module):
    """Skip-layer excitation: y = gate(x_low) * x_high, gated per channel.

    gate = logistic(conv1x1(silu(conv1x1(avgpool(x_low))))).
    """

    def __init__(self, low_shape: Sequence[int], high_shape: Sequence[int]):
        super().__init__()
        self.low_shape = tuple(int(v) for v in low_shape)
        self.high_shape = tuple(int(v) for v in high_shape)
        c_low, c_high = self.low_shape[0], self.high_shape[0]
        self.mix1 = nn.Conv2d(c_low, c_high, 1)
        self.mix2 = nn.Conv2d(c_high, c_high, 1)

    def gate(self, x_low):
        pooled = F.adaptive_avg_pool2d(x_low, 1)
        return torch.sigmoid(self.mix2(F.silu(self.mix1(pooled))))

    def forward(self, x_low, x_high):
        if (
            x_low.dim() != 4
            or x_high.dim() != 4
            or tuple(x_low.shape[1:]) != self.low_shape
            or tuple(x_high.shape[1:]) != self.high_shape
            or x_low.shape[0] != x_high.shape[0]
        ):
            raise ValueError(
                f"sle shapes: got low {tuple(x_low.shape)}, high {tuple(x_high.shape)}; "
                f"expected (B, {self.low_shape}), (B, {self.high_shape})"
            )
        return self.gate(x_low) * x_high


def sle_forward(block: SLEBlock, x_low, x_high):
    return block(x_low, x_high)


@dataclass
class AdaINParams:
    y_s: torch.Tensor
    y_b: torch.Tensor


def adain(x: torch.Tensor, params: AdaINParams | None = None, *, y_s=None, y_b=None, eps: float = ADAIN_EPS):
    """Per-channel instance renormalisation of ``x`` (N, C, H, W) to scale y_s and bias y_b.

    sigma uses the population variance and is stabilised as sqrt(var + eps).
    y_s / y_b may be (C,) or (N, C).
    """
    if params is not None:
        y_s, y_b = params.y_s, params.y_b
    y_s = torch.as_tensor(y_s, dtype=x.dtype)
    y_b = torch.as_tensor(y_b, dtype=x.dtype)
    c = x.shape[1]
    if y_s.shape[-1] != c or y_b.shape[-1] != c:
        raise ValueError(f"adain channels: feature map has {c}, style gives {y_s.shape[-1]}/{y_b.shape[-1]}")
    mu = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
    normed = (x - mu) / torch.sqrt(var + eps)
    if y_s.dim() == 1:
        y_s, y_b = y_s[None], y_b[None]
    return y_s[:, :, None, None] * normed + y_b[:, :, None, None]


# generators --------------------------------------------------------------------

class BaselineGenerator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        ch = stage_channels(spec.base_channels, spec.output_resolution)
        self.channels = ch
        self.stem = nn.Linear(spec.latent_dim, ch[0] * 16)
        self.blocks = nn.ModuleList(UpBlock(ch[k - 1], ch[k]) for k in range(1, len(ch)))
        self.to_rgb = nn.Conv2d(ch[-1], 3, 1)

    def stages(self, z):
        x = F.silu(self.stem(z)).view(len(z), self.channels[0], 4, 4)
        feats = [x]
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats

    def forward(self, z):
        return torch.tanh(self.to_rgb(self.stages(z)[-1]))


class FastGANGenerator(BaselineGenerator):
    """Baseline generator with an SLE skip from every stage k into stage k + 3."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__(spec)
        ch = self.channels
        self.sle = nn.ModuleDict()
        for k in range(len(ch) - 3):
            lo, hi = 4 << k, 4 << (k + 3)
            self.sle[str(k + 3)] = SLEBlock((ch[k], lo, lo), (ch[k + 3], hi, hi))

    def stages(self, z):
        x = F.silu(self.stem(z)).view(len(z), self.channels[0], 4, 4)
        feats = [x]
        for k, block in enumerate(self.blocks, start=1):
            x = block(x)
            if str(k) in self.sle:
                x = self.sle[str(k)](feats[k - 3], x)
            feats.append(x)
        return feats


class MappingNetwork(nn.Module):
    def __init__(self, latent_dim: int, style_dim: int, depth: int):
        super().__init__()
        self.latent_dim = latent_dim
        dims = [latent_dim] + [style_dim] * depth
        self.layers = nn.ModuleList(nn.Linear(dims[i], dims[i + 1]) for i in range(depth))

    def forward(self, z):
        w = z * torch.rsqrt(z.pow(2).mean(dim=1, keepdim=True) + 1e-8)
        for layer in self.layers:
            w = F.silu(layer(w))
        return w


def map_latent(z, mapping: MappingNetwork):
    z = torch.as_tensor(z, dtype=next(mapping.parameters()).dtype)
    if z.dim() != 2 or z.shape[1] != mapping.latent_dim:
        raise ValueError(f"latent dim mismatch: expected (B, {mapping.latent_dim}), got {tuple(z.shape)}")
    return mapping(z)


class StyleAffine(nn.Module):
    """Style code -> (y_s, y_b) for one AdaIN site; y_s starts near 1."""

    def __init__(self, style_dim: int, channels: int):
        super().__init__()
        self.fc = nn.Linear(style_dim, 2 * channels)
        with torch.no_grad():
            self.fc.bias[:channels].fill_(1.0)
            self.fc.bias[channels:].zero_()
        self.channels = channels

    def forward(self, w) -> AdaINParams:
        out = self.fc(w)
        return AdaINParams(out[:, :self.channels], out[:, self.channels:])


class StyleGAN2Generator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        ch = stage_channels(spec.base_channels, spec.output_resolution)
        self.channels = ch
        self.mapping = MappingNetwork(spec.latent_dim, spec.style_dim, spec.mapping_depth)
        self.const = nn.Parameter(torch.randn(1, ch[0], 4, 4))
        self.convs = nn.ModuleList(
            [nn.Conv2d(ch[0], ch[0], 3, padding=1)] + [nn.Conv2d(ch[k - 1], ch[k], 3, padding=1) for k in range(1, len(ch))]
        )
        self.styles = nn.ModuleList(StyleAffine(spec.style_dim, c) for c in ch)
        self.to_rgb = nn.Conv2d(ch[-1], 3, 1)

    def stages(self, z):
        w = self.mapping(z)
        x = self.const.expand(len(z), -1, -1, -1)
        feats = []
        for k, (conv, style) in enumerate(zip(self.convs, self.styles)):
            if k > 0:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = F.silu(adain(conv(x), style(w)))
            feats.append(x)
        return feats

    def forward(self, z):
        return torch.tanh(self.to_rgb(self.stages(z)[-1]))


_GENERATORS = {"baseline": BaselineGenerator, "fastgan": FastGANGenerator, "stylegan2": StyleGAN2Generator}


def build_generator(spec: GeneratorSpec, seed: int = 0) -> nn.Module:
    """Construct a generator with deterministic seeded initialisation."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return _GENERATORS[spec.variant](spec)


def generate(gen: nn.Module, z) -> np.ndarray:
    """Run the generator on a latent batch; returns (B, H, W, 3) in [-1, 1]."""
    dtype = next(gen.parameters()).dtype
    z = torch.as_tensor(np.asarray(z), dtype=dtype)
    if z.dim() != 2 or z.shape[1] != gen.spec.latent_dim:
        raise ValueError(f"latent dim mismatch: expected (B, {gen.spec.latent_dim}), got {tuple(z.shape)}")
    if not torch.isfinite(z).all():
        raise ValueError("latent batch contains non-finite entries")
    with torch.no_grad():
        out = gen(z)
    return out.permute(0, 2, 3, 1).cpu().numpy()


# discriminators ----------------------------------------------------------------

class BaselineDiscriminator(nn.Module):
    variant = "baseline"

    def __init__(self, spec: DiscriminatorSpec, resolution: int):
        super().__init__()
        self.spec = spec
        self.resolution = resolution
        ch = stage_channels(spec.base_channels, resolution)[::-1]
        self.from_rgb = nn.Conv2d(3, ch[0], 1)
        self.blocks = nn.ModuleList(DownBlock(ch[k], ch[k + 1]) for k in range(len(ch) - 1))
        self.head = nn.Linear(ch[-1] * 16, 1)

    def logits(self, x):
        h = F.silu(self.from_rgb(x))
        for block in self.blocks:
            h = block(h)
        return self.head(h.flatten(1)).squeeze(1)

    def forward(self, x):
        return [torch.sigmoid(self.logits(x))]


class ProjectionStack(nn.Module):
    """Frozen random conv feature network with a fixed 1x1 mixing map per depth."""

    def __init__(self, n_projections: int, seed: int = 0, width: int = 16):
        super().__init__()
        gen = torch.Generator().manual_seed(int(seed))
        self.channels = [min(64, width << k) for k in range(n_projections)]
        self.convs = nn.ModuleList()
        self.mixers = nn.ModuleList()
        c_in = 3
        for c in self.channels:
            conv = nn.Conv2d(c_in, c, 3, stride=2, padding=1)
            mix = nn.Conv2d(c, c, 1, bias=False)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (9 * c_in)))
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.1)
                mix.weight.copy_(torch.randn(mix.weight.shape, generator=gen) / math.sqrt(c))
            self.convs.append(conv)
            self.mixers.append(mix)
            c_in = c
        self.requires_grad_(False)

    def forward(self, x) -> list[torch.Tensor]:
        out = []
        h = x
        for conv, mix in zip(self.convs, self.mixers):
            h = F.silu(conv(h))
            out.append(mix(h))
        return out


class ProjectedHead(nn.Module):
    def __init__(self, channels: int, spatial: int, width: int):
        super().__init__()
        layers = [nn.Conv2d(channels, width, 3, padding=1), nn.SiLU()]
        while spatial > 4:
            layers += [nn.Conv2d(width, width, 4, stride=2, padding=1), nn.SiLU()]
            spatial //= 2
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(width * spatial * spatial, 1)

    def forward(self, f):
        return self.head(self.body(f).flatten(1)).squeeze(1)


class ProjectedDiscriminator(nn.Module):
    variant = "projected"

    def __init__(self, spec: DiscriminatorSpec, resolution: int):
        super().__init__()
        if (1 << spec.n_projections) > resolution:
            raise ValueError(f"n_projections={spec.n_projections} too deep for resolution {resolution}")
        self.spec = spec
        self.resolution = resolution
        self.projection = ProjectionStack(spec.n_projections, spec.feature_seed)
        if spec.feature_source:
            state = torch.load(spec.feature_source, map_location="cpu", weights_only=True)
            self.projection.load_state_dict(state)
            self.projection.requires_grad_(False)
        width = max(MIN_CHANNELS, spec.base_channels // 2)
        self.heads = nn.ModuleList(
            ProjectedHead(c, resolution >> (k + 1), width) for k, c in enumerate(self.projection.channels)
        )

    def project(self, x):
        return self.projection(x)

    def logits(self, feats):
        return [head(f) for head, f in zip(self.heads, feats)]

    def forward(self, x):
        return [torch.sigmoid(l) for l in self.logits(self.project(x))]


def build_discriminator(spec: DiscriminatorSpec, resolution: int, seed: int = 0) -> nn.Module:
    if resolution not in RESOLUTIONS:
        raise ValueError(f"resolution not in ladder: {resolution} not in {RESOLUTIONS}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        cls = ProjectedDiscriminator if spec.variant == "projected" else BaselineDiscriminator
        return cls(spec, resolution)


def project_features(p: ProjectionStack | ProjectedDiscriminator, x) -> list[torch.Tensor]:
    """Projected feature maps, one per discriminator index, for pixels in [-1, 1]."""
    stack = p.projection if isinstance(p, ProjectedDiscriminator) else p
    if x.dim() != 4 or x.shape[1] != 3:
        raise ValueError(f"expected (B, 3, H, W) pixels, got {tuple(x.shape)}")
    return stack(x)


def discriminate(d: nn.Module, inputs):
    """Realness scores in (0, 1).

    Baseline takes a (B, 3, H, W) pixel tensor and returns one (B,) vector;
    projected takes the list from :func:`project_features` and returns one
    (B,) vector per discriminator.
    """
    if isinstance(d, ProjectedDiscriminator):
        if not isinstance(inputs, (list, tuple)) or len(inputs) != len(d.heads):
            raise ValueError("discriminator domain: projected variant expects a list of projected feature maps")
        for f, c in zip(inputs, d.projection.channels):
            if f.dim() != 4 or f.shape[1] != c:
                raise ValueError("discriminator domain: projected feature map has the wrong shape")
        return [torch.sigmoid(l) for l in d.logits(inputs)]
    if not torch.is_tensor(inputs) or inputs.dim() != 4 or inputs.shape[1] != 3:
        raise ValueError("discriminator domain: baseline variant expects a (B, 3, H, W) pixel tensor")
    return torch.sigmoid(d.logits(inputs))


def parameter_count(module: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


def checksum(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in registration order."""
    h = hashlib.sha256()
    for name, t in list(module.named_parameters()) + list(module.named_buffers()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
