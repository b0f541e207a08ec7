"""The four networks: anatomy encoder, characteristic encoder, anatomy
decoder and joint decoder.

Encoders are four blocks of (residual block -> strided downsampling block);
each downsample halves the spatial side (ceil) and moves to the next
channel width.  Decoders mirror the chain with transposed convolutions and
end in a sigmoid so reconstructions live in (0, 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn


@dataclass
class ArchConfig:
    input_channels: int = 1
    input_side: int = 28
    block_count: int = 4
    base_channels: int = 32
    latent_dim: int = 256
    leaky_slope: float = 0.01

    def __post_init__(self):
        if self.latent_dim < 1 or self.block_count < 1:
            raise ValueError("latent_dim and block_count must be >= 1")
        if self.input_channels not in (1, 3):
            raise ValueError(f"input_channels must be 1 or 3, got {self.input_channels}")
        if self.spatial_chain()[-1] < 1:
            raise ValueError(
                f"input side {self.input_side} collapses below 1 px "
                f"after {self.block_count} halvings"
            )

    def spatial_chain(self) -> list[int]:
        """Spatial sides through the encoder, e.g. [28, 14, 7, 4, 2]."""
        sides = [self.input_side]
        for _ in range(self.block_count):
            sides.append(math.ceil(sides[-1] / 2))
        return sides

    def channel_chain(self) -> list[int]:
        """Channel widths through the encoder, e.g. [1, 32, 64, 128, 256]."""
        return [self.input_channels] + [
            self.base_channels * 2**i for i in range(self.block_count)
        ]

    def flat_dim(self) -> int:
        s = self.spatial_chain()[-1]
        return self.channel_chain()[-1] * s * s

    def to_dict(self) -> dict:
        return {
            "input_channels": self.input_channels,
            "input_side": self.input_side,
            "block_count": self.block_count,
            "base_channels": self.base_channels,
            "latent_dim": self.latent_dim,
            "leaky_slope": self.leaky_slope,
        }


class ResidualBlock(nn.Module):
    """Two conv->bn->leaky-relu stages with an identity skip."""

    def __init__(self, channels: int, slope: float):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(channels)
        self.act = nn.LeakyReLU(slope)

    def forward(self, x):
        out = self.act(self.bn1(self.conv1(x)))
        out = self.act(self.bn2(self.conv2(out)))
        return out + x


class DownBlock(nn.Module):
    """Strided conv halving the spatial side (ceil) and changing width."""

    def __init__(self, c_in: int, c_out: int, slope: float):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
        self.bn = nn.BatchNorm2d(c_out)
        self.act = nn.LeakyReLU(slope)

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class UpBlock(nn.Module):
    """Transposed conv reproducing the exact mirror of a DownBlock."""

    def __init__(self, c_in: int, c_out: int, out_side: int, slope: float):
        super().__init__()
        in_side = math.ceil(out_side / 2)
        # out = (in-1)*2 - 2 + 3 + op  =>  op makes the size land exactly
        output_padding = out_side - ((in_side - 1) * 2 + 1)
        self.conv = nn.ConvTranspose2d(
            c_in, c_out, 3, stride=2, padding=1, output_padding=output_padding
        )
        self.bn = nn.BatchNorm2d(c_out)
        self.act = nn.LeakyReLU(slope)

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class Encoder(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        chans = arch.channel_chain()
        blocks = []
        for i in range(arch.block_count):
            blocks.append(ResidualBlock(chans[i], arch.leaky_slope))
            blocks.append(DownBlock(chans[i], chans[i + 1], arch.leaky_slope))
        self.blocks = nn.Sequential(*blocks)
        self.fc = nn.Linear(arch.flat_dim(), arch.latent_dim)

    def forward(self, x):
        h = self.blocks(x)
        return self.fc(h.flatten(1))


class Decoder(nn.Module):
    """Mirror of the encoder; `latent_in` is latent_dim for the anatomy
    decoder and 2*latent_dim for the joint decoder."""

    def __init__(self, arch: ArchConfig, latent_in: int):
        super().__init__()
        chans = arch.channel_chain()
        sides = arch.spatial_chain()
        self.bottom_channels = chans[-1]
        self.bottom_side = sides[-1]
        self.fc = nn.Linear(latent_in, arch.flat_dim())
        blocks = []
        for i in reversed(range(arch.block_count)):
            blocks.append(UpBlock(chans[i + 1], chans[i], sides[i], arch.leaky_slope))
            blocks.append(ResidualBlock(chans[i], arch.leaky_slope))
        self.blocks = nn.Sequential(*blocks)
        self.out_conv = nn.Conv2d(chans[0], chans[0], 3, padding=1)

    def forward(self, z):
        h = self.fc(z)
        h = h.view(-1, self.bottom_channels, self.bottom_side, self.bottom_side)
        h = self.blocks(h)
        return torch.sigmoid(self.out_conv(h))


@dataclass
class ModelBundle:
    arch: ArchConfig
    encoder_anatomy: Encoder
    encoder_characteristic: Encoder
    decoder_anatomy: Decoder
    decoder_joint: Decoder

    def modules(self) -> dict[str, nn.Module]:
        return {
            "encoder_anatomy": self.encoder_anatomy,
            "encoder_characteristic": self.encoder_characteristic,
            "decoder_anatomy": self.decoder_anatomy,
            "decoder_joint": self.decoder_joint,
        }

    def train_mode(self) -> "ModelBundle":
        for m in self.modules().values():
            m.train()
        return self

    def eval_mode(self) -> "ModelBundle":
        for m in self.modules().values():
            m.eval()
        return self

    def parameters(self):
        for m in self.modules().values():
            yield from m.parameters()

    def anatomy_parameters(self):
        yield from self.encoder_anatomy.parameters()
        yield from self.decoder_anatomy.parameters()

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def to_double(self) -> "ModelBundle":
        for m in self.modules().values():
            m.double()
        return self


def _init_weights(module: nn.Module, slope: float):
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
        nn.init.kaiming_normal_(
            module.weight, a=slope, mode="fan_in", nonlinearity="leaky_relu"
        )
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.BatchNorm2d):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def init_model(arch: ArchConfig, seed: int) -> ModelBundle:
    """Build all four networks with seed-deterministic initialization."""
    torch.manual_seed(seed)
    bundle = ModelBundle(
        arch,
        Encoder(arch),
        Encoder(arch),
        Decoder(arch, arch.latent_dim),
        Decoder(arch, 2 * arch.latent_dim),
    )
    for m in bundle.modules().values():
        m.apply(lambda mod: _init_weights(mod, arch.leaky_slope))
    return bundle


def _as_image_tensor(bundle: ModelBundle, images) -> torch.Tensor:
    ref = next(bundle.encoder_anatomy.parameters())
    x = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images)
    x = x.to(ref.dtype)
    if x.ndim != 4:
        raise ValueError(f"expected [batch, C, H, W], got shape {tuple(x.shape)}")
    arch = bundle.arch
    if x.shape[1] != arch.input_channels or x.shape[2:] != (arch.input_side, arch.input_side):
        raise ValueError(
            f"image shape {tuple(x.shape[1:])} does not match architecture "
            f"({arch.input_channels}, {arch.input_side}, {arch.input_side})"
        )
    if not torch.isfinite(x).all():
        raise ValueError("non-finite pixel values")
    return x


def encode_anatomy(bundle: ModelBundle, images) -> torch.Tensor:
    return bundle.encoder_anatomy(_as_image_tensor(bundle, images))


def encode_characteristic(bundle: ModelBundle, images) -> torch.Tensor:
    return bundle.encoder_characteristic(_as_image_tensor(bundle, images))


def _check_embedding(bundle: ModelBundle, emb: torch.Tensor):
    if emb.ndim != 2 or emb.shape[1] != bundle.arch.latent_dim:
        raise ValueError(
            f"expected [batch, {bundle.arch.latent_dim}] embedding, "
            f"got shape {tuple(emb.shape)}"
        )


def decode_anatomy(bundle: ModelBundle, emb: torch.Tensor) -> torch.Tensor:
    _check_embedding(bundle, emb)
    return bundle.decoder_anatomy(emb)


def decode_joint(
    bundle: ModelBundle, anatomy_emb: torch.Tensor, characteristic_emb: torch.Tensor
) -> torch.Tensor:
    _check_embedding(bundle, anatomy_emb)
    _check_embedding(bundle, characteristic_emb)
    if anatomy_emb.shape[0] != characteristic_emb.shape[0]:
        raise ValueError(
            f"batch mismatch: {anatomy_emb.shape[0]} vs {characteristic_emb.shape[0]}"
        )
    return bundle.decoder_joint(torch.cat([anatomy_emb, characteristic_emb], dim=1))
