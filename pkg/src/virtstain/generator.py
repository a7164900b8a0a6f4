"""Conditional UNet generator with dual spatial/channel modulation.

Strided-convolution encoder, self-attention bottleneck, a multi-scale edge
encoder, and a decoder whose conditioned stages apply

    h' = (gamma_spatial + gamma_class) * IN(h) + (beta_spatial + beta_class)

where the spatial terms come from two-layer convolutions over a
conditioning map and the class terms from an affine map of a learned
embedding. The modulation-emitting convolutions start at exactly zero and
the class affine starts at identity, so at step 0 the output is invariant
to both conditioning signals.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.t().contiguous()


def sobel_gradients(img: torch.Tensor) -> torch.Tensor:
    """Horizontal and vertical Sobel responses of the luminance channel.

    Accepts (B, 3, H, W), (3, H, W), or a bare (H, W) luminance map and
    returns (..., 2, H, W) with replicate-padded borders. Channel 0 is the
    horizontal derivative (responds to vertical edges), channel 1 vertical.
    """
    squeeze = False
    if img.dim() == 2:
        img = img.unsqueeze(0).unsqueeze(0)
        luma = img
        squeeze = True
    else:
        if img.dim() == 3:
            img = img.unsqueeze(0)
            squeeze = True
        if img.shape[1] == 3:
            w = torch.tensor(LUMA_WEIGHTS, dtype=img.dtype, device=img.device)
            luma = (img * w.view(1, 3, 1, 1)).sum(dim=1, keepdim=True)
        elif img.shape[1] == 1:
            luma = img
        else:
            raise ValueError(f"sobel_gradients expects 1 or 3 channels, got {img.shape[1]}")
    kern = torch.stack([_SOBEL_X, _SOBEL_Y]).unsqueeze(1).to(dtype=luma.dtype, device=luma.device)
    padded = F.pad(luma, (1, 1, 1, 1), mode="replicate")
    grad = F.conv2d(padded, kern)
    return grad[0] if squeeze else grad


@dataclass(frozen=True)
class GeneratorConfig:
    """Architecture description; canonical values target 512-px generation."""

    resolution: int = 512
    in_channels: int = 3
    encoder_channels: tuple[int, ...] = (64, 128, 256, 512, 512)
    bottleneck_blocks: int = 4
    attention: bool = True
    cond_scales: tuple[int, ...] = (32, 64, 128, 256)
    cond_channels: int = 512
    embedding_dim: int = 64
    num_classes: int = 4
    edge_channels: int = 16
    spade_hidden: int = 128
    use_edge_encoder: bool = True

    @property
    def depth(self) -> int:
        return len(self.encoder_channels)

    @property
    def bottleneck_side(self) -> int:
        return self.resolution // (2**self.depth)

    @property
    def decoder_scales(self) -> tuple[int, ...]:
        return tuple(self.resolution // 2**i for i in range(self.depth - 1, -1, -1))

    @property
    def edge_scales(self) -> tuple[int, ...]:
        return self.decoder_scales

    @property
    def null_index(self) -> int:
        return self.num_classes

    def validate(self) -> "GeneratorConfig":
        if self.resolution % (2**self.depth) != 0:
            raise ConfigError(
                f"resolution {self.resolution} not divisible by 2^depth ({2**self.depth})"
            )
        if self.bottleneck_side < 4:
            raise ConfigError(f"bottleneck side {self.bottleneck_side} too small (< 4)")
        allowed = set(self.decoder_scales[:-1])
        if not self.cond_scales:
            raise ConfigError("cond_scales must not be empty")
        if not set(self.cond_scales) <= allowed:
            raise ConfigError(
                f"cond_scales {self.cond_scales} must be decoder scales below the "
                f"output resolution {sorted(allowed)}"
            )
        if self.num_classes < 1:
            raise ConfigError("need at least one conditioning class")
        return self


def build_1024_variant(cfg: GeneratorConfig) -> GeneratorConfig:
    """Double the output resolution by prepending one cheap encoder level.

    The new stem carries half the first stage's width, and the decoder
    gains the mirrored output stage plus one edge-pyramid scale; the
    bottleneck side is unchanged, so the added parameter cost is tiny.
    """
    stem = max(cfg.encoder_channels[0] // 2, 4)
    return replace(
        cfg,
        resolution=cfg.resolution * 2,
        encoder_channels=(stem,) + tuple(cfg.encoder_channels),
    ).validate()


class SpadeFilmBlock(nn.Module):
    """Instance norm followed by additive spatial + channel modulation.

    The spatial branch is bias-free throughout so an all-zero conditioning
    map contributes exactly nothing at any point in training; its emitting
    convolutions are zero-initialized. The class affine is initialized to
    gamma=1, beta=0.
    """

    def __init__(self, channels: int, cond_channels: int, embedding_dim: int, hidden: int):
        super().__init__()
        self.norm = nn.InstanceNorm2d(channels, affine=False)
        self.shared = nn.Conv2d(cond_channels, hidden, 3, padding=1, bias=False)
        self.gamma_conv = nn.Conv2d(hidden, channels, 3, padding=1, bias=False)
        self.beta_conv = nn.Conv2d(hidden, channels, 3, padding=1, bias=False)
        nn.init.zeros_(self.gamma_conv.weight)
        nn.init.zeros_(self.beta_conv.weight)
        self.film = nn.Linear(embedding_dim, 2 * channels)
        nn.init.zeros_(self.film.weight)
        with torch.no_grad():
            self.film.bias[:channels] = 1.0
            self.film.bias[channels:] = 0.0
        self.channels = channels

    def forward(self, h: torch.Tensor, cond_map: torch.Tensor, embedding: torch.Tensor) -> torch.Tensor:
        if cond_map.shape[-2:] != h.shape[-2:]:
            raise ValueError(
                f"conditioning map {tuple(cond_map.shape[-2:])} does not match "
                f"features {tuple(h.shape[-2:])}"
            )
        normed = self.norm(h)
        act = F.leaky_relu(self.shared(cond_map), 0.2)
        gamma_sp = self.gamma_conv(act)
        beta_sp = self.beta_conv(act)
        film = self.film(embedding)
        gamma_cls = film[:, : self.channels].unsqueeze(-1).unsqueeze(-1)
        beta_cls = film[:, self.channels :].unsqueeze(-1).unsqueeze(-1)
        return (gamma_sp + gamma_cls) * normed + (beta_sp + beta_cls)


class EdgeEncoder(nn.Module):
    """Structural features from RGB + Sobel at every decoder scale."""

    def __init__(self, scales: tuple[int, ...], channels: int):
        super().__init__()
        self.scales = tuple(sorted(scales, reverse=True))
        self.channels = channels
        self.heads = nn.ModuleDict(
            {
                str(s): nn.Sequential(
                    nn.Conv2d(5, channels, 3, padding=1),
                    nn.LeakyReLU(0.2),
                    nn.Conv2d(channels, channels, 3, padding=1),
                )
                for s in self.scales
            }
        )

    def forward(self, img: torch.Tensor) -> dict[int, torch.Tensor]:
        feats = torch.cat([img, sobel_gradients(img)], dim=1)
        out = {}
        for s in self.scales:
            x = feats if feats.shape[-1] == s else F.adaptive_avg_pool2d(feats, s)
            out[s] = self.heads[str(s)](x)
        return out


class _SelfAttention(nn.Module):
    """Single-head scaled dot-product attention over spatial positions."""

    def __init__(self, channels: int):
        super().__init__()
        self.q = nn.Conv2d(channels, channels, 1)
        self.k = nn.Conv2d(channels, channels, 1)
        self.v = nn.Conv2d(channels, channels, 1)
        self.out = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q = self.q(x).reshape(b, c, h * w).transpose(1, 2)
        k = self.k(x).reshape(b, c, h * w)
        v = self.v(x).reshape(b, c, h * w).transpose(1, 2)
        attn = torch.softmax(q @ k / c**0.5, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, c, h, w)
        return x + self.out(y)


class _BottleneckBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm1 = nn.InstanceNorm2d(channels, affine=True)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.InstanceNorm2d(channels, affine=True)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.leaky_relu(self.norm1(x), 0.2))
        h = self.conv2(F.leaky_relu(self.norm2(h), 0.2))
        return x + h


class _DecoderStage(nn.Module):
    def __init__(
        self,
        in_ch: int,
        skip_ch: int,
        edge_ch: int,
        out_ch: int,
        cfg: GeneratorConfig,
        conditioned: bool,
    ):
        super().__init__()
        self.skip_ch = skip_ch
        self.conditioned = conditioned
        self.reduce = nn.Conv2d(in_ch + skip_ch + edge_ch, out_ch, 1)
        if conditioned:
            self.mod = SpadeFilmBlock(out_ch, cfg.cond_channels, cfg.embedding_dim, cfg.spade_hidden)
        else:
            self.norm = nn.InstanceNorm2d(out_ch, affine=True)
        self.refine = nn.Conv2d(out_ch, out_ch, 3, padding=1)

    def forward(self, x, skip, edge, cond_map, embedding):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        parts = [x]
        if skip is not None:
            parts.append(skip)
        parts.append(edge)
        x = self.reduce(torch.cat(parts, dim=1))
        if self.conditioned:
            x = self.mod(x, cond_map, embedding)
        else:
            x = self.norm(x)
        x = F.leaky_relu(x, 0.2)
        return F.leaky_relu(self.refine(x), 0.2)


class Generator(nn.Module):
    """Image-to-image translator from H&E to IHC in one forward pass.

    Inputs and outputs are signed-range (B, 3, R, R) tensors. Conditioning
    maps are a {scale: (B, C, s, s)} dict from the feature processor, and
    the class token indexes a learnable embedding table whose last row is
    reserved for the conditioning-dropout null class.
    """

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg

        blocks = []
        prev = cfg.in_channels
        for i, ch in enumerate(cfg.encoder_channels):
            layers = [nn.Conv2d(prev, ch, 3, stride=2, padding=1)]
            if i > 0:
                layers.append(nn.InstanceNorm2d(ch, affine=True))
            layers.append(nn.LeakyReLU(0.2))
            blocks.append(nn.Sequential(*layers))
            prev = ch
        self.encoder = nn.ModuleList(blocks)

        mid = cfg.encoder_channels[-1]
        bn: list[nn.Module] = [_BottleneckBlock(mid) for _ in range(cfg.bottleneck_blocks)]
        if cfg.attention:
            bn.insert(max(1, cfg.bottleneck_blocks // 2), _SelfAttention(mid))
        self.bottleneck = nn.Sequential(*bn)

        self.embedding = nn.Embedding(cfg.num_classes + 1, cfg.embedding_dim)
        self.edge_encoder = EdgeEncoder(cfg.edge_scales, cfg.edge_channels)

        # decoder stage at scale s: nominal width = encoder width at that
        # scale, or the stem width again for the final full-resolution stage
        enc_scale_ch = {
            cfg.resolution // 2 ** (i + 1): ch for i, ch in enumerate(cfg.encoder_channels)
        }
        stages = []
        in_ch = mid
        for s in cfg.decoder_scales:
            skip_ch = enc_scale_ch.get(s, 0) if s != cfg.resolution else 0
            out_ch = enc_scale_ch.get(s, cfg.encoder_channels[0])
            stages.append(
                _DecoderStage(
                    in_ch,
                    skip_ch,
                    cfg.edge_channels,
                    out_ch,
                    cfg,
                    conditioned=s in cfg.cond_scales,
                )
            )
            in_ch = out_ch
        self.decoder = nn.ModuleList(stages)
        self.out_conv = nn.Conv2d(in_ch + cfg.in_channels, cfg.in_channels, 3, padding=1)

    def forward(
        self,
        hne: torch.Tensor,
        cond: dict[int, torch.Tensor] | None,
        token: torch.Tensor,
        drop_spatial: bool = False,
        drop_class: bool = False,
    ) -> torch.Tensor:
        cfg = self.cfg
        if hne.dim() != 4 or hne.shape[-1] != cfg.resolution or hne.shape[-2] != cfg.resolution:
            raise ValueError(
                f"expected (B, {cfg.in_channels}, {cfg.resolution}, {cfg.resolution}) input, "
                f"got {tuple(hne.shape)}"
            )
        batch = hne.shape[0]

        if drop_spatial or cond is None:
            cond = {
                s: torch.zeros(batch, cfg.cond_channels, s, s, dtype=hne.dtype, device=hne.device)
                for s in cfg.cond_scales
            }
        if set(cond.keys()) != set(cfg.cond_scales):
            raise ValueError(
                f"conditioning scales {sorted(cond)} do not match required {sorted(cfg.cond_scales)}"
            )

        token = torch.as_tensor(token, dtype=torch.long, device=hne.device).reshape(-1)
        if token.numel() == 1 and batch > 1:
            token = token.expand(batch)
        if drop_class:
            token = torch.full_like(token, cfg.null_index)
        if token.min() < 0 or token.max() > cfg.null_index:
            raise ValueError(f"token index out of range 0..{cfg.null_index}")
        embedding = self.embedding(token)

        if cfg.use_edge_encoder:
            edge = self.edge_encoder(hne)
        else:
            edge = {
                s: torch.zeros(batch, cfg.edge_channels, s, s, dtype=hne.dtype, device=hne.device)
                for s in cfg.edge_scales
            }

        skips = {}
        x = hne
        for block in self.encoder:
            x = block(x)
            skips[x.shape[-1]] = x
        x = self.bottleneck(x)

        for stage, s in zip(self.decoder, cfg.decoder_scales):
            skip = skips.get(s) if stage.skip_ch else None
            x = stage(x, skip, edge[s], cond.get(s), embedding)

        return torch.tanh(self.out_conv(torch.cat([x, hne], dim=1)))


def build_generator(cfg: GeneratorConfig, seed: int = 0) -> Generator:
    """Construct a generator with seeded default initialization."""
    torch.manual_seed(seed)
    return Generator(cfg)


def count_trainable(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
