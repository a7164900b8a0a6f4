"""Beer-Lambert color deconvolution and DAB quantification.

All image tensors here are channel-last (..., 3) with RGB in [0, 1].
Everything is pure and differentiable where it needs to be (the training
loss path), so these functions serve both the metric suite and the
optimizer.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from .errors import ConstantInputError, NumericError

# H-DAB optical-density basis (Ruifrok-Johnston style unmixing). Rows are
# normalized at construction; the residual row is the normalized cross
# product of the other two.
DEFAULT_HEMATOXYLIN = (0.650, 0.704, 0.286)
DEFAULT_DAB = (0.269, 0.568, 0.872)

DEFAULT_OD_EPS = 1.0 / 255.0
DEFAULT_HIST_RANGE = (0.0, 3.0)
DEFAULT_HIST_BINS = 256
DEFAULT_HIST_SMOOTHING = 1e-8
DEFAULT_TOP_FRACTION = 0.10

DAB_CHANNEL = 2


class StainMatrix:
    """Unit-row stain basis in optical-density space with its inverse.

    Row order is (hematoxylin, residual, DAB); the DAB concentration is
    channel ``DAB_CHANNEL`` of every deconvolution result.
    """

    def __init__(self, rows) -> None:
        m = torch.as_tensor(rows, dtype=torch.float64)
        if m.shape != (3, 3):
            raise ValueError(f"stain matrix must be 3x3, got {tuple(m.shape)}")
        if not torch.isfinite(m).all():
            raise NumericError("stain matrix contains non-finite entries")
        norms = torch.linalg.norm(m, dim=1)
        if (norms < 1e-12).any():
            raise ValueError("stain matrix has a zero row")
        m = m / norms[:, None]
        if abs(torch.linalg.det(m).item()) < 1e-8:
            raise ValueError("stain matrix is singular or near-singular")
        self.matrix = m
        self.inverse = torch.linalg.inv(m)

    @classmethod
    def h_dab(cls, hematoxylin=DEFAULT_HEMATOXYLIN, dab=DEFAULT_DAB) -> "StainMatrix":
        """Build the default basis from two stain vectors.

        The residual row is the normalized cross product, so the basis is
        always invertible for non-parallel inputs.
        """
        h = np.asarray(hematoxylin, dtype=np.float64)
        d = np.asarray(dab, dtype=np.float64)
        residual = np.cross(h, d)
        norm = np.linalg.norm(residual)
        if norm < 1e-12:
            raise ValueError("stain vectors are parallel; no residual direction")
        return cls(np.stack([h, residual / norm, d]))

    @classmethod
    def from_config(cls, rows) -> "StainMatrix":
        """Accept either two rows (hematoxylin, DAB) or a full 3x3 basis."""
        arr = np.asarray(rows, dtype=np.float64)
        if arr.shape == (2, 3):
            return cls.h_dab(arr[0], arr[1])
        return cls(arr)

    def cast(self, like: torch.Tensor) -> torch.Tensor:
        return self.inverse.to(dtype=like.dtype, device=like.device)


_DEFAULT_MATRIX: StainMatrix | None = None


def default_stain_matrix() -> StainMatrix:
    global _DEFAULT_MATRIX
    if _DEFAULT_MATRIX is None:
        _DEFAULT_MATRIX = StainMatrix.h_dab()
    return _DEFAULT_MATRIX


def rgb_to_od(img, eps: float = DEFAULT_OD_EPS) -> torch.Tensor:
    """Convert unit-range RGB to optical density, OD = -log10(max(v, eps))."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    t = torch.as_tensor(img)
    if not t.is_floating_point():
        t = t.to(torch.float64)
    if not torch.isfinite(t).all():
        raise NumericError("rgb_to_od: non-finite input")
    return -torch.log10(t.clamp(min=eps))


def deconvolve(od, matrix: StainMatrix | None = None) -> torch.Tensor:
    """Unmix an optical-density map into per-stain concentrations.

    Solves od = c @ M per pixel via the precomputed inverse; negative
    concentrations are clamped to zero. Channel-last shape is preserved.
    """
    m = matrix or default_stain_matrix()
    t = torch.as_tensor(od)
    if t.shape[-1] != 3:
        raise ValueError("optical-density map must be channel-last with 3 channels")
    return (t @ m.cast(t)).clamp(min=0.0)


def render_concentrations(conc, matrix: StainMatrix | None = None) -> torch.Tensor:
    """Inverse transform: concentrations -> unit-range RGB, v = 10^-(c @ M).

    Only valid where the implied OD is nonnegative (transmittance <= 1).
    """
    m = matrix or default_stain_matrix()
    t = torch.as_tensor(conc)
    od = t @ m.matrix.to(dtype=t.dtype, device=t.device)
    return torch.pow(10.0, -od)


def dab_channel(img, matrix: StainMatrix | None = None, eps: float = DEFAULT_OD_EPS) -> torch.Tensor:
    """Deconvolved DAB concentration per pixel of a unit-range RGB image."""
    return deconvolve(rgb_to_od(img, eps), matrix)[..., DAB_CHANNEL]


def dab_intensity_score(dab, top_fraction: float = DEFAULT_TOP_FRACTION) -> torch.Tensor:
    """Mean of the ceil(top_fraction * N) largest values of a channel.

    Value-based selection, so ties at the cutoff cannot change the score.
    Returns a 0-dim tensor; gradients flow through the selected entries.
    """
    if not 0.0 < top_fraction <= 1.0:
        raise ValueError("top_fraction must be in (0, 1]")
    t = torch.as_tensor(dab).reshape(-1)
    n = t.numel()
    if n == 0:
        raise ValueError("dab_intensity_score: empty channel")
    k = math.ceil(top_fraction * n)
    return torch.topk(t, k).values.mean()


def dab_histogram(
    dab,
    bins: int = DEFAULT_HIST_BINS,
    value_range: tuple[float, float] = DEFAULT_HIST_RANGE,
    smoothing: float = DEFAULT_HIST_SMOOTHING,
) -> np.ndarray:
    """Smoothed, normalized histogram of DAB values over a fixed global range.

    Values are clipped into the range so no mass is dropped; `smoothing` is
    added to every bin before normalization, which keeps KL finite even for
    disjoint supports.
    """
    if smoothing <= 0:
        raise ValueError("smoothing must be positive")
    lo, hi = value_range
    vals = np.asarray(torch.as_tensor(dab).detach().cpu(), dtype=np.float64).ravel()
    counts, _ = np.histogram(np.clip(vals, lo, hi), bins=bins, range=(lo, hi))
    p = counts.astype(np.float64) + smoothing
    return p / p.sum()


def dab_kl(
    gen,
    real,
    bins: int = DEFAULT_HIST_BINS,
    smoothing: float = DEFAULT_HIST_SMOOTHING,
    value_range: tuple[float, float] = DEFAULT_HIST_RANGE,
    direction: str = "real_gen",
) -> float:
    """KL divergence between histograms of two DAB channels.

    Default direction is KL(P_real || P_gen); "gen_real" flips it.
    """
    p_gen = dab_histogram(gen, bins, value_range, smoothing)
    p_real = dab_histogram(real, bins, value_range, smoothing)
    if direction == "real_gen":
        p, q = p_real, p_gen
    elif direction == "gen_real":
        p, q = p_gen, p_real
    else:
        raise ValueError(f"unknown KL direction {direction!r}")
    return float(np.sum(p * np.log(p / q)))


def pearson_r(xs, ys) -> float:
    """Pearson correlation of two equal-length score lists."""
    x = np.asarray(xs, dtype=np.float64).ravel()
    y = np.asarray(ys, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError("pearson_r: length mismatch")
    if x.size < 2:
        raise ValueError("pearson_r: need at least 2 points")
    xd = x - x.mean()
    yd = y - y.mean()
    denom = math.sqrt(float(np.dot(xd, xd)) * float(np.dot(yd, yd)))
    if denom == 0.0:
        raise ConstantInputError("pearson_r: constant input has undefined correlation")
    return float(np.clip(np.dot(xd, yd) / denom, -1.0, 1.0))


def dab_loss(
    generated: torch.Tensor,
    target: torch.Tensor,
    matrix: StainMatrix | None = None,
    eps: float = DEFAULT_OD_EPS,
    top_fraction: float = DEFAULT_TOP_FRACTION,
) -> torch.Tensor:
    """Match per-image top-fraction DAB intensity between generated and target.

    Both inputs are batched channel-last unit-range images (B, H, W, 3).
    The target score is treated as a constant; gradients reach only the
    selected top-fraction pixels of the generated image.
    """
    if generated.shape != target.shape:
        raise ValueError("dab_loss: shape mismatch")
    gen_dab = dab_channel(generated, matrix, eps)
    tgt_dab = dab_channel(target.detach(), matrix, eps)
    losses = []
    for g, t in zip(gen_dab, tgt_dab):
        sg = dab_intensity_score(g, top_fraction)
        st = dab_intensity_score(t, top_fraction).detach()
        losses.append((sg - st).abs())
    return torch.stack(losses).mean()
