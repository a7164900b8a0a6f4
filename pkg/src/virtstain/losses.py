"""Misalignment-tolerant generator objective.

Paired supervision happens only at resolutions where a 10-50 px section
misalignment shrinks to sub-pixel scale (perceptual at 128/256, L1 at 64);
structural supervision compares Sobel gradients against the pixel-aligned
*input*, never the misaligned target. Adversarial and feature-matching
terms are gated until the configured step.

Model-space images everywhere here: (B, 3, H, W) in [-1, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import NumericError
from .generator import sobel_gradients
from .stain import StainMatrix, dab_loss


@dataclass(frozen=True)
class LossWeights:
    percept: float = 1.0
    l1: float = 1.0
    edge: float = 0.5
    adv: float = 1.0
    fm: float = 10.0
    dab: float = 0.2
    adv_start: int = 2000

    def __post_init__(self):
        for name in ("percept", "l1", "edge", "adv", "fm", "dab"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")

    def effective(self, step: int) -> dict[str, float]:
        gate = 1.0 if step >= self.adv_start else 0.0
        return {
            "percept": self.percept,
            "l1": self.l1,
            "edge": self.edge,
            "adv": self.adv * gate,
            "fm": self.fm * gate,
            "dab": self.dab,
        }


@dataclass
class LossBundle:
    step: int
    components: dict[str, torch.Tensor]
    weights: dict[str, float]
    total: torch.Tensor
    extras: dict[str, float] = field(default_factory=dict)

    def scalar(self, name: str) -> float:
        return float(self.components[name].detach())

    def to_record(self) -> dict:
        rec = {"step": self.step}
        rec.update({k: float(v.detach()) for k, v in self.components.items()})
        rec["total"] = float(self.total.detach())
        rec.update(self.extras)
        return rec


class ToyPerceptualExtractor:
    """Seeded fixed random feature stack with an LPIPS-style distance.

    Satisfies the perceptual-extractor contract (frozen multi-layer
    features, per-layer channel-normalized squared distance) without any
    pretrained weights, so the suite stays hermetic.
    """

    def __init__(self, seed: int = 0, widths: tuple[int, ...] = (8, 16, 32)):
        gen = torch.Generator().manual_seed(seed)
        self.layers = []
        prev = 3
        for w in widths:
            weight = torch.randn(w, prev, 3, 3, generator=gen) / math.sqrt(prev * 9)
            bias = torch.randn(w, generator=gen) * 0.05
            self.layers.append((weight, bias))
            prev = w

    def features(self, img: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        x = img
        for weight, bias in self.layers:
            w = weight.to(dtype=x.dtype, device=x.device)
            b = bias.to(dtype=x.dtype, device=x.device)
            x = F.leaky_relu(F.conv2d(x, w, b, stride=2, padding=1), 0.2)
            feats.append(x)
        return feats

    def distance(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        total = None
        for fa, fb in zip(self.features(a), self.features(b)):
            na = fa / (fa.norm(dim=1, keepdim=True) + 1e-8)
            nb = fb / (fb.norm(dim=1, keepdim=True) + 1e-8)
            term = (na - nb).pow(2).mean()
            total = term if total is None else total + term
        return total


def _resize_bilinear(img: torch.Tensor, size: int) -> torch.Tensor:
    if img.shape[-1] == size and img.shape[-2] == size:
        return img
    return F.interpolate(img, size=(size, size), mode="bilinear", align_corners=False, antialias=True)


def _resize_area(img: torch.Tensor, size: int) -> torch.Tensor:
    if img.shape[-1] == size and img.shape[-2] == size:
        return img
    return F.adaptive_avg_pool2d(img, size)


def perceptual_loss(
    gen: torch.Tensor,
    target: torch.Tensor,
    extractor,
    sizes: tuple[int, ...] = (128, 256),
    size_weights: tuple[float, ...] = (1.0, 0.5),
) -> torch.Tensor:
    """Extractor distance at the reduced resolutions, combined 1.0 : 0.5."""
    if gen.shape != target.shape:
        raise ValueError("perceptual_loss: shape mismatch")
    total = None
    for size, w in zip(sizes, size_weights):
        d = extractor.distance(_resize_bilinear(gen, size), _resize_bilinear(target, size))
        total = w * d if total is None else total + w * d
    return total


def l1_64(gen: torch.Tensor, target: torch.Tensor, size: int = 64) -> torch.Tensor:
    """Mean absolute difference after area-downsampling both sides."""
    if gen.shape != target.shape:
        raise ValueError("l1_64: shape mismatch")
    return (_resize_area(gen, size) - _resize_area(target, size)).abs().mean()


def edge_loss(
    gen: torch.Tensor, hne: torch.Tensor, scales: tuple[int, ...] = (512, 256)
) -> torch.Tensor:
    """Sobel-gradient agreement with the pixel-aligned H&E input.

    The second argument is the network *input*; comparing edges against the
    misaligned stained target would reintroduce the artifact this term is
    designed to avoid.
    """
    if gen.shape != hne.shape:
        raise ValueError("edge_loss: shape mismatch")
    total = None
    for s in scales:
        d = (
            sobel_gradients(_resize_area(gen, s)) - sobel_gradients(_resize_area(hne, s))
        ).abs().mean()
        total = d if total is None else total + d
    return total


def dab_loss_signed(
    gen: torch.Tensor,
    target: torch.Tensor,
    matrix: StainMatrix | None = None,
    eps: float = 1.0 / 255.0,
    top_fraction: float = 0.10,
) -> torch.Tensor:
    """DAB intensity loss adapter for model-space tensors.

    Decodes signed (B, 3, H, W) to unit channel-last before the stain math.
    """
    gen_unit = ((gen + 1.0) * 0.5).clamp(0.0, 1.0).permute(0, 2, 3, 1)
    tgt_unit = ((target + 1.0) * 0.5).clamp(0.0, 1.0).permute(0, 2, 3, 1)
    return dab_loss(gen_unit, tgt_unit, matrix, eps, top_fraction)


COMPONENT_NAMES = ("percept", "l1", "edge", "adv", "fm", "dab")


def total_generator_loss(
    components: dict[str, torch.Tensor | None],
    weights: LossWeights,
    step: int,
) -> LossBundle:
    """Weighted sum with the adversarial/feature-matching gate applied.

    Missing (None) components are recorded as zero; a non-finite component
    aborts with its name.
    """
    eff = weights.effective(step)
    filled: dict[str, torch.Tensor] = {}
    total = None
    for name in COMPONENT_NAMES:
        value = components.get(name)
        if value is None:
            value = torch.zeros(())
        value = value if torch.is_tensor(value) else torch.as_tensor(float(value))
        if not bool(torch.isfinite(value.detach())):
            raise NumericError(f"loss component {name!r} is non-finite")
        filled[name] = value
        term = eff[name] * value
        total = term if total is None else total + term
    return LossBundle(step=step, components=filled, weights=eff, total=total)
