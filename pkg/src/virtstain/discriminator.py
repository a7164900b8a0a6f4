"""Multi-scale PatchGAN discriminator and its adversarial losses.

The discriminator is unconditional by interface: `forward` takes exactly
one image and there is no second input to smuggle the source image
through. Pixel-misaligned pairs would otherwise teach a conditional critic
that spatial inconsistency is "real".
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class DiscriminatorOutput:
    logits: list[torch.Tensor]
    features: list[list[torch.Tensor]]  # per scale, ordered pre-logit layers


class _PatchDiscriminator(nn.Module):
    def __init__(self, in_channels: int, channels: tuple[int, ...]):
        super().__init__()
        blocks = []
        prev = in_channels
        for i, ch in enumerate(channels):
            layers: list[nn.Module] = [nn.Conv2d(prev, ch, 4, stride=2, padding=1)]
            if i > 0:
                layers.append(nn.InstanceNorm2d(ch, affine=True))
            layers.append(nn.LeakyReLU(0.2))
            blocks.append(nn.Sequential(*layers))
            prev = ch
        self.blocks = nn.ModuleList(blocks)
        self.logit = nn.Conv2d(prev, 1, 3, padding=1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return self.logit(x), feats


class MultiScaleDiscriminator(nn.Module):
    """Identical patch critics at the full and 2x-downsampled resolutions."""

    def __init__(
        self,
        in_channels: int = 3,
        channels: tuple[int, ...] = (64, 128, 256, 512),
        scales: int = 2,
    ):
        super().__init__()
        self.heads = nn.ModuleList(
            [_PatchDiscriminator(in_channels, channels) for _ in range(scales)]
        )

    def forward(self, img: torch.Tensor) -> DiscriminatorOutput:
        logits, features = [], []
        x = img
        for head in self.heads:
            lg, ft = head(x)
            logits.append(lg)
            features.append(ft)
            x = F.avg_pool2d(x, 3, stride=2, padding=1, count_include_pad=False)
        return DiscriminatorOutput(logits=logits, features=features)


def hinge_d_loss(real_logits: list[torch.Tensor], fake_logits: list[torch.Tensor]) -> torch.Tensor:
    """mean(relu(1 - real)) + mean(relu(1 + fake)), averaged over scales."""
    terms = [
        F.relu(1.0 - r).mean() + F.relu(1.0 + f).mean()
        for r, f in zip(real_logits, fake_logits)
    ]
    return torch.stack(terms).mean()


def hinge_g_loss(fake_logits: list[torch.Tensor]) -> torch.Tensor:
    return torch.stack([-f.mean() for f in fake_logits]).mean()


def r1_penalty(disc, real: torch.Tensor, gamma: float = 1.0) -> torch.Tensor:
    """(gamma/2) * E[ ||d(sum logits)/d(input)||^2 ] on real samples only."""
    real = real.detach().requires_grad_(True)
    out = disc(real)
    total = torch.stack([lg.sum() for lg in out.logits]).sum()
    (grad,) = torch.autograd.grad(total, real, create_graph=True)
    sq = grad.reshape(grad.shape[0], -1).pow(2).sum(dim=1)
    return 0.5 * gamma * sq.mean()


def feature_matching_loss(
    fake_feats: list[list[torch.Tensor]], real_feats: list[list[torch.Tensor]]
) -> torch.Tensor:
    """Mean |diff| within each layer, summed over layers, averaged over scales."""
    if len(fake_feats) != len(real_feats):
        raise ValueError("feature matching: scale count mismatch")
    per_scale = []
    for fake_layers, real_layers in zip(fake_feats, real_feats):
        if len(fake_layers) != len(real_layers):
            raise ValueError("feature matching: layer count mismatch")
        layer_sum = torch.stack(
            [(f - r.detach()).abs().mean() for f, r in zip(fake_layers, real_layers)]
        ).sum()
        per_scale.append(layer_sum)
    return torch.stack(per_scale).mean()
