"""Frozen feature backbone: dense token extraction and the trainable processor.

The backbone itself is a frozen function behind ``BackboneHandle``; training
never touches its weights. Images handed to a backbone are channel-first
(3, H, W) in [0, 1]. Token grids are channel-last (G, G, D) to match how
they are cached on disk.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError

TOKEN_GRID_SIDE = 32
SUBCROP_GRID = 4

_CACHE_MAGIC = b"VSFC"
_CACHE_VERSION = 1


@dataclass
class BackboneHandle:
    """A frozen feature extractor with a fixed interface.

    patch_grid_fn maps one (3, S, S) image to a (g, g, token_dim) grid;
    cls_fn maps the same image to a global (token_dim,) summary vector.
    """

    name: str
    token_dim: int
    native_side: int
    patch_grid_fn: Callable[[torch.Tensor], torch.Tensor]
    cls_fn: Callable[[torch.Tensor], torch.Tensor]
    frozen: bool = field(default=True)


def toy_backbone(seed: int, token_dim: int = 1024, native_side: int = 64, patch: int = 8) -> BackboneHandle:
    """Desk-scale stand-in for a pretrained ViT backbone.

    A seeded fixed random patch projection followed by a bounded
    nonlinearity and local average pooling. Deterministic for a fixed seed
    and input, and carries no gradient.
    """
    gen = torch.Generator().manual_seed(seed)
    fan_in = 3 * patch * patch
    weight = torch.randn(token_dim, 3, patch, patch, generator=gen) / fan_in**0.5
    bias = torch.randn(token_dim, generator=gen) * 0.1

    def _prep(img: torch.Tensor) -> torch.Tensor:
        if img.dim() != 3 or img.shape[0] != 3:
            raise ValueError(f"backbone expects a (3, S, S) image, got {tuple(img.shape)}")
        x = img.float().unsqueeze(0)
        if x.shape[-1] != native_side or x.shape[-2] != native_side:
            x = F.interpolate(x, size=(native_side, native_side), mode="bicubic", align_corners=False)
        return x

    @torch.no_grad()
    def patch_grid_fn(img: torch.Tensor) -> torch.Tensor:
        x = _prep(img)
        tok = torch.tanh(F.conv2d(x, weight, bias, stride=patch))
        tok = F.avg_pool2d(tok, kernel_size=3, stride=1, padding=1)
        return tok[0].permute(1, 2, 0).contiguous()

    @torch.no_grad()
    def cls_fn(img: torch.Tensor) -> torch.Tensor:
        return patch_grid_fn(img).mean(dim=(0, 1))

    return BackboneHandle(
        name=f"toy-{seed}",
        token_dim=token_dim,
        native_side=native_side,
        patch_grid_fn=patch_grid_fn,
        cls_fn=cls_fn,
    )


def _subcrops(img: torch.Tensor) -> list[torch.Tensor]:
    side = img.shape[-1]
    if img.dim() != 3 or img.shape[0] != 3 or img.shape[1] != side:
        raise ValueError(f"expected a square (3, S, S) image, got {tuple(img.shape)}")
    if side % SUBCROP_GRID != 0:
        raise ValueError(f"image side {side} not divisible by {SUBCROP_GRID}")
    sub = side // SUBCROP_GRID
    crops = []
    for r in range(SUBCROP_GRID):
        for c in range(SUBCROP_GRID):
            crops.append(img[:, r * sub : (r + 1) * sub, c * sub : (c + 1) * sub])
    return crops


def extract_subcrop_tokens(
    img: torch.Tensor,
    backbone: BackboneHandle,
    out_grid: int = TOKEN_GRID_SIDE,
) -> torch.Tensor:
    """Dense tokens for one image via the 4x4 sub-crop protocol.

    The image is split into 16 sub-crops in row-major order, each passed
    through the backbone independently, the per-crop grids reassembled in
    spatial order, and the mosaic average-pooled to (out_grid, out_grid).
    """
    per_crop = [backbone.patch_grid_fn(c) for c in _subcrops(img)]
    g = per_crop[0].shape[0]
    for tok in per_crop:
        if tok.shape != (g, g, backbone.token_dim):
            raise ValueError("backbone returned inconsistent per-crop grids")
    rows = []
    for r in range(SUBCROP_GRID):
        rows.append(torch.cat(per_crop[r * SUBCROP_GRID : (r + 1) * SUBCROP_GRID], dim=1))
    mosaic = torch.cat(rows, dim=0)  # (4g, 4g, D)
    if mosaic.shape[0] == out_grid:
        return mosaic.contiguous()
    pooled = F.adaptive_avg_pool2d(mosaic.permute(2, 0, 1).unsqueeze(0), out_grid)
    return pooled[0].permute(1, 2, 0).contiguous()


def extract_cls_grid(img: torch.Tensor, backbone: BackboneHandle) -> torch.Tensor:
    """Ablation variant: a 4x4 grid built from per-sub-crop global vectors."""
    cls = [backbone.cls_fn(c) for c in _subcrops(img)]
    return torch.stack(cls).reshape(SUBCROP_GRID, SUBCROP_GRID, backbone.token_dim)


def extract_cls_vector(img: torch.Tensor, backbone: BackboneHandle) -> torch.Tensor:
    """Whole-image global summary vector (used by the failure predictor)."""
    return backbone.cls_fn(img)


class _ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        groups = 8 if channels % 8 == 0 else 1
        self.norm1 = nn.GroupNorm(groups, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.leaky_relu(self.norm1(x), 0.2))
        h = self.conv2(F.leaky_relu(self.norm2(h), 0.2))
        return x + h


class FeatureProcessor(nn.Module):
    """Adapt a token grid into one conditioning map per decoder scale.

    1x1 projection to the conditioning width, residual refinement at the
    grid resolution, then a progressive chain of learned transposed
    convolutions for the larger scales (average pooling for any smaller
    ones, which only occur in desk-scale configs).
    """

    def __init__(
        self,
        token_dim: int = 1024,
        channels: int = 512,
        scales: tuple[int, ...] = (32, 64, 128, 256),
        resblocks: int = 2,
        grid_side: int = TOKEN_GRID_SIDE,
    ):
        super().__init__()
        self.token_dim = token_dim
        self.channels = channels
        self.scales = tuple(sorted(scales))
        self.grid_side = grid_side
        self.proj = nn.Conv2d(token_dim, channels, 1)
        self.refine = nn.Sequential(*[_ResidualBlock(channels) for _ in range(resblocks)])
        ups = {}
        side = grid_side
        for s in self.scales:
            while side < s:
                ups[str(side * 2)] = nn.ConvTranspose2d(channels, channels, 2, stride=2)
                side *= 2
        self.ups = nn.ModuleDict(ups)

    def forward(self, grid: torch.Tensor) -> dict[int, torch.Tensor]:
        if grid.dim() == 3:
            grid = grid.unsqueeze(0)
        if grid.shape[1] != self.grid_side or grid.shape[2] != self.grid_side or grid.shape[3] != self.token_dim:
            raise ValueError(
                f"expected token grid (B, {self.grid_side}, {self.grid_side}, {self.token_dim}), "
                f"got {tuple(grid.shape)}"
            )
        x = self.proj(grid.permute(0, 3, 1, 2))
        x = self.refine(x)
        maps: dict[int, torch.Tensor] = {}
        side = self.grid_side
        cur = x
        for s in self.scales:
            if s < side:
                maps[s] = F.adaptive_avg_pool2d(x, s)
                continue
            while side < s:
                cur = self.ups[str(side * 2)](cur)
                side *= 2
            maps[s] = cur
        return maps


def zero_conditioning(
    scales: tuple[int, ...], channels: int, batch: int, like: torch.Tensor
) -> dict[int, torch.Tensor]:
    """All-zero conditioning maps (the spatial-dropout substitute)."""
    return {
        s: torch.zeros(batch, channels, s, s, dtype=like.dtype, device=like.device)
        for s in scales
    }


def write_feature_cache(path: str | Path, image_id: str, grid: torch.Tensor) -> None:
    """One cached token record: magic, version, id, G, D, then raw floats.

    Floats are little-endian float32 in row-major (G, G, D) order.
    """
    grid = torch.as_tensor(grid)
    if grid.dim() != 3 or grid.shape[0] != grid.shape[1]:
        raise ValueError("feature cache expects a square (G, G, D) grid")
    g, d = grid.shape[0], grid.shape[2]
    id_bytes = image_id.encode("utf-8")
    payload = grid.to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<III", _CACHE_VERSION, len(id_bytes), 0))
        fh.write(id_bytes)
        fh.write(struct.pack("<II", g, d))
        fh.write(payload)


def read_feature_cache(path: str | Path) -> tuple[str, torch.Tensor]:
    try:
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != _CACHE_MAGIC:
                raise DataError(f"{path}: not a feature cache file")
            version, id_len, _ = struct.unpack("<III", fh.read(12))
            if version != _CACHE_VERSION:
                raise DataError(f"{path}: unsupported cache version {version}")
            image_id = fh.read(id_len).decode("utf-8")
            g, d = struct.unpack("<II", fh.read(8))
            raw = fh.read(g * g * d * 4)
            if len(raw) != g * g * d * 4:
                raise DataError(f"{path}: truncated feature cache")
            grid = torch.frombuffer(bytearray(raw), dtype=torch.float32).reshape(g, g, d)
            return image_id, grid
    except struct.error as exc:
        raise DataError(f"{path}: truncated feature cache") from exc
