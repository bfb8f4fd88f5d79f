"""Teacher/student segmentation networks, the semantic mask autoencoder and
the model-specific alignment headers (TAN for the teacher, SAN for the student).

All networks are small enough to train on a laptop CPU.  Their internals are
stand-ins; what matters is the capacity ordering teacher > student and the
mismatched bottleneck shapes that the alignment headers bridge.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn
import torch.nn.functional as F

from .errors import ParameterError


@dataclass
class NetConfig:
    latent_dim: int = 64
    teacher_widths: tuple = (16, 32, 64, 128)
    student_widths: tuple = (8, 16, 32)
    psae_widths: tuple = (16, 32, 64)
    msan_width: int = 64
    input_size: int = 128

    def __post_init__(self):
        self.teacher_widths = tuple(self.teacher_widths)
        self.student_widths = tuple(self.student_widths)
        self.psae_widths = tuple(self.psae_widths)
        if self.latent_dim < 1 or self.msan_width < 1:
            raise ParameterError("latent_dim and msan_width must be positive")
        stride = 2 ** max(len(self.teacher_widths), len(self.student_widths), len(self.psae_widths))
        if self.input_size % (2 * stride):
            raise ParameterError(f"input_size must be a multiple of {2 * stride}, got {self.input_size}")


@dataclass
class BottleneckFeature:
    data: torch.Tensor  # (B, C', H', W')
    source: str  # "teacher" or "student"
    skips: list = field(default_factory=list, repr=False)


def he_init(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _conv_block(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.ReLU(inplace=True),
    )


class SegNet(nn.Module):
    """Strided-convolution encoder-decoder with skip connections.

    A full-resolution stem is followed by one stride-2 stage per entry of
    ``widths``; the last stage output is the bottleneck feature.
    """

    def __init__(self, widths, source, in_channels=1):
        super().__init__()
        self.source = source
        self.widths = tuple(widths)
        stem = max(self.widths[0] // 2, 4)
        self.stem = _conv_block(in_channels, stem)
        chans = [stem, *self.widths]
        self.down = nn.ModuleList(_conv_block(chans[i], chans[i + 1], stride=2) for i in range(len(self.widths)))
        self.up = nn.ModuleList()
        self.fuse = nn.ModuleList()
        for i in reversed(range(len(self.widths))):
            self.up.append(nn.ConvTranspose2d(chans[i + 1], chans[i], 2, stride=2))
            self.fuse.append(_conv_block(2 * chans[i], chans[i]))
        self.head = nn.Conv2d(stem, 1, 1)

    @property
    def reduction(self):
        return 2 ** len(self.widths)

    @property
    def bottleneck_channels(self):
        return self.widths[-1]

    def bottleneck_shape(self, input_size):
        s = input_size // self.reduction
        return (self.bottleneck_channels, s, s)

    def encode(self, x) -> BottleneckFeature:
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != x.shape[3] or x.shape[2] % self.reduction:
            raise ParameterError(f"{self.source} expects (B, 1, S, S) with S divisible by {self.reduction}, got {tuple(x.shape)}")
        h = self.stem(x)
        skips = [h]
        for stage in self.down:
            h = stage(h)
            skips.append(h)
        return BottleneckFeature(h, self.source, skips[:-1])

    def decode(self, bottleneck: torch.Tensor, skips) -> torch.Tensor:
        h = bottleneck
        for up, fuse, skip in zip(self.up, self.fuse, reversed(skips)):
            h = fuse(torch.cat([up(h), skip], dim=1))
        return torch.sigmoid(self.head(h))

    def forward(self, x):
        feat = self.encode(x)
        return feat, self.decode(feat.data, feat.skips)


def forward_segnet(model: SegNet, images):
    """Return ``(bottleneck, prediction)`` for a ``(B, 1, S, S)`` batch."""
    return model(images)


def coord_planes(batch, h, w, dtype=torch.float32):
    ys = torch.linspace(-1.0, 1.0, h, dtype=dtype)
    xs = torch.linspace(-1.0, 1.0, w, dtype=dtype)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return gy.expand(batch, 1, h, w), gx.expand(batch, 1, h, w)


class SemanticAutoEncoder(nn.Module):
    """Autoencoder over binary masks with a bounded width-C latent.

    Encoder: the mask plus coordinate-weighted copies of it (first and second
    moments) go through 3 stride-2 conv stages, a 1x1 conv to C channels,
    global average pooling and tanh.  Pooling the moment channels is what
    lets a pooled latent still say where the foreground sits.

    Decoder: spatial broadcast.  The latent is tiled over a coarse grid
    together with coordinate planes and upsampled back to mask resolution.
    """

    N_IN = 8

    def __init__(self, latent_dim, widths=(16, 32, 64), input_size=128, decoder_width=32, grid_factor=4):
        super().__init__()
        self.latent_dim = latent_dim
        self.input_size = input_size
        chans = [self.N_IN, *widths]
        self.enc = nn.Sequential(*[
            nn.Sequential(nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1), nn.ReLU(inplace=True))
            for i in range(len(widths))
        ])
        self.to_latent = nn.Conv2d(widths[-1], latent_dim, 1)
        self.grid = input_size // grid_factor
        n_up = grid_factor.bit_length() - 1
        dw = decoder_width
        layers = [nn.Conv2d(latent_dim + 2, dw, 3, padding=1), nn.ReLU(inplace=True),
                  nn.Conv2d(dw, dw, 3, padding=1), nn.ReLU(inplace=True)]
        for _ in range(n_up):
            layers += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(dw, dw, 3, padding=1), nn.ReLU(inplace=True)]
        self.dec = nn.Sequential(*layers)
        self.head = nn.Conv2d(dw, 1, 1)

    def _inputs(self, m):
        gy, gx = coord_planes(m.shape[0], m.shape[2], m.shape[3], m.dtype)
        return torch.cat([m, gy, gx, m * gy, m * gx, m * gy * gy, m * gx * gx, m * gx * gy], dim=1)

    def encode(self, masks):
        if masks.ndim != 4 or masks.shape[1] != 1:
            raise ParameterError(f"masks must be (B, 1, H, W), got {tuple(masks.shape)}")
        if masks.shape[-1] != self.input_size or masks.shape[-2] != self.input_size:
            raise ParameterError(f"masks must be {self.input_size}x{self.input_size}")
        if not torch.all((masks == 0) | (masks == 1)):
            raise ParameterError("masks must be binary")
        h = self.enc(self._inputs(masks))
        return torch.tanh(self.to_latent(h).mean(dim=(2, 3)))

    def decode(self, latent):
        if latent.ndim != 2 or latent.shape[1] != self.latent_dim:
            raise ParameterError(f"latent must be (B, {self.latent_dim}), got {tuple(latent.shape)}")
        b, c = latent.shape
        g = self.grid
        gy, gx = coord_planes(b, g, g, latent.dtype)
        h = torch.cat([latent[:, :, None, None].expand(b, c, g, g), gy, gx], dim=1)
        return torch.sigmoid(self.head(self.dec(h)))

    def forward(self, masks):
        return self.decode(self.encode(masks))


def psae_encode(psae: SemanticAutoEncoder, masks):
    return psae.encode(masks)


def psae_decode(psae: SemanticAutoEncoder, latent):
    return psae.decode(latent)


class AlignmentHeader(nn.Module):
    """Encoding/decoding header pair for one network (TAN or SAN).

    encode: 2 convs -> global average pool -> affine to width C.
    decode: affine -> reshape to half the bottleneck size -> 2 transposed
    convs back to the bottleneck shape.  Weights are not tied.
    """

    def __init__(self, source, feature_shape, latent_dim, width=64):
        super().__init__()
        self.source = source
        self.feature_shape = tuple(feature_shape)
        self.latent_dim = latent_dim
        c, h, w = self.feature_shape
        if h % 2 or w % 2:
            raise ParameterError(f"bottleneck spatial size must be even, got {h}x{w}")
        self.width = width
        self.enc = nn.Sequential(
            nn.Conv2d(c, width, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, padding=1), nn.ReLU(inplace=True),
        )
        self.enc_fc = nn.Linear(width, latent_dim)
        self.dec_fc = nn.Linear(latent_dim, width * (h // 2) * (w // 2))
        self.dec = nn.Sequential(
            nn.ConvTranspose2d(width, width, 2, stride=2), nn.ReLU(inplace=True),
            nn.ConvTranspose2d(width, c, 3, padding=1),
        )

    def encode(self, feature: BottleneckFeature):
        if feature.source != self.source:
            raise ParameterError(f"{self.name} consumes {self.source} features, got {feature.source} features")
        if tuple(feature.data.shape[1:]) != self.feature_shape:
            raise ParameterError(f"{self.name} expects features {self.feature_shape}, got {tuple(feature.data.shape[1:])}")
        return self.enc_fc(self.enc(feature.data).mean(dim=(2, 3)))

    def decode(self, latent) -> BottleneckFeature:
        if latent.ndim != 2 or latent.shape[1] != self.latent_dim:
            raise ParameterError(f"{self.name} expects latents of width {self.latent_dim}, got {tuple(latent.shape)}")
        _, h, w = self.feature_shape
        x = F.relu(self.dec_fc(latent)).view(-1, self.width, h // 2, w // 2)
        return BottleneckFeature(self.dec(x), self.source)

    @property
    def name(self):
        return "TAN" if self.source == "teacher" else "SAN"


def msan_encode(header: AlignmentHeader, feature: BottleneckFeature):
    return header.encode(feature)


def msan_decode(header: AlignmentHeader, latent) -> BottleneckFeature:
    return header.decode(latent)


COMPONENTS = ("teacher", "student", "psae", "tan", "san")


class GKDNets(nn.Module):
    """Every network of the pipeline under one seeded constructor."""

    def __init__(self, config: NetConfig, seed: int = 0):
        super().__init__()
        self.config = config
        torch.manual_seed(seed)
        s = config.input_size
        self.teacher = SegNet(config.teacher_widths, "teacher")
        self.student = SegNet(config.student_widths, "student")
        self.psae = SemanticAutoEncoder(config.latent_dim, config.psae_widths, s)
        self.tan = AlignmentHeader("teacher", self.teacher.bottleneck_shape(s), config.latent_dim, config.msan_width)
        self.san = AlignmentHeader("student", self.student.bottleneck_shape(s), config.latent_dim, config.msan_width)
        he_init(self)
        n_t, n_s = count_parameters(self.teacher), count_parameters(self.student)
        assert n_t > n_s, f"teacher ({n_t} params) must be larger than student ({n_s} params)"

    def component(self, name) -> nn.Module:
        if name not in COMPONENTS:
            raise ParameterError(f"unknown component {name!r}")
        return getattr(self, name)

    def fresh_student(self, seed):
        torch.manual_seed(seed)
        student = SegNet(self.config.student_widths, "student")
        he_init(student)
        return student


def freeze(module: nn.Module) -> None:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()


def unfreeze(module: nn.Module) -> None:
    for p in module.parameters():
        p.requires_grad_(True)
    module.train()


def snapshot(module: nn.Module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def changed_tensors(module: nn.Module, snap) -> list:
    """Names of tensors whose bytes differ from ``snap``."""
    return [k for k, v in module.state_dict().items() if not torch.equal(v, snap[k])]
