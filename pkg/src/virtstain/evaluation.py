"""Deterministic-crop test protocol and the metric suite.

FID/KID operate on vectors from an injected feature extractor, never on a
bundled pretrained network, so the math is testable against brute-force
oracles at desk scale. Stain-accuracy metrics come from the stain module.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import linalg as scipy_linalg

from .backbone import extract_cls_grid, extract_subcrop_tokens
from .data import TokenVocabulary, load_manifest
from .errors import ConstantInputError, DataError, NumericError
from .generator import count_trainable
from .images import load_rgb, save_rgb, unit_to_model
from .stain import StainMatrix, dab_channel, dab_intensity_score, dab_kl, pearson_r


def deterministic_test_crops(img: np.ndarray, crop: int) -> list[np.ndarray]:
    """The four non-overlapping quadrants of a 2*crop square, row-major."""
    h, w = img.shape[:2]
    if h != 2 * crop or w != 2 * crop:
        raise DataError(f"expected a {2*crop}x{2*crop} test image, got {h}x{w}")
    return [
        np.ascontiguousarray(img[y : y + crop, x : x + crop])
        for y in (0, crop)
        for x in (0, crop)
    ]


# ---- SSIM ------------------------------------------------------------------


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = size // 2
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(a, b, data_range: float = 1.0, window_size: int = 11, sigma: float = 1.5) -> float:
    """Windowed SSIM with the standard stability constants, channel-averaged.

    Statistics use a Gaussian window applied only where it fits entirely
    inside the image (no padding).
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("ssim: shape mismatch")
    if x.ndim == 2:
        x = x[..., None]
        y = y[..., None]
    win = _gaussian_window(window_size, sigma)
    wt = torch.from_numpy(win).reshape(1, 1, window_size, window_size)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    def _filter(img: np.ndarray) -> np.ndarray:
        t = torch.from_numpy(np.ascontiguousarray(img)).unsqueeze(0).unsqueeze(0)
        return F.conv2d(t, wt)[0, 0].numpy()

    values = []
    for c in range(x.shape[-1]):
        xc, yc = x[..., c], y[..., c]
        mu_x = _filter(xc)
        mu_y = _filter(yc)
        sxx = _filter(xc * xc) - mu_x**2
        syy = _filter(yc * yc) - mu_y**2
        sxy = _filter(xc * yc) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
        values.append(np.mean(num / den))
    return float(np.mean(values))


# ---- FID / KID ---------------------------------------------------------------


def fid(real_feats, fake_feats, shrinkage: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of two feature sets."""
    r = np.asarray(real_feats, dtype=np.float64)
    f = np.asarray(fake_feats, dtype=np.float64)
    if r.ndim == 1:
        r = r[:, None]
    if f.ndim == 1:
        f = f[:, None]
    dim = r.shape[1]
    mu_r, mu_f = r.mean(axis=0), f.mean(axis=0)
    cov_r = np.atleast_2d(np.cov(r, rowvar=False))
    cov_f = np.atleast_2d(np.cov(f, rowvar=False))
    if min(r.shape[0], f.shape[0]) < dim + 1:
        if shrinkage <= 0:
            raise NumericError(
                "degenerate covariance (fewer samples than feature dim) and no shrinkage"
            )
        cov_r = cov_r + shrinkage * np.eye(dim)
        cov_f = cov_f + shrinkage * np.eye(dim)
    covmean = scipy_linalg.sqrtm(cov_r @ cov_f)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    value = float(np.sum((mu_r - mu_f) ** 2) + np.trace(cov_r + cov_f - 2.0 * covmean))
    if not np.isfinite(value):
        raise NumericError("FID is non-finite; covariance too ill-conditioned")
    return value


def kid(real_feats, fake_feats, degree: int = 3, coef: float = 1.0) -> float:
    """Unbiased squared MMD with the polynomial kernel (x.y/d + coef)^degree."""
    x = np.asarray(real_feats, dtype=np.float64)
    y = np.asarray(fake_feats, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    m, n = x.shape[0], y.shape[0]
    if m < 2 or n < 2:
        raise ValueError("kid needs at least 2 samples per side")
    d = x.shape[1]
    kxx = (x @ x.T / d + coef) ** degree
    kyy = (y @ y.T / d + coef) ** degree
    kxy = (x @ y.T / d + coef) ** degree
    sum_xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    sum_yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sum_xx + sum_yy - 2.0 * kxy.mean())


class RandomProjectionFeatures:
    """Seeded linear projection features for desk-scale FID/KID.

    A stand-in for the pretrained inception-style extractor used in full
    runs; the injected-extractor contract is identical.
    """

    def __init__(self, seed: int = 123, dim: int = 64, side: int = 32):
        rng = np.random.default_rng(seed)
        self.side = side
        self.dim = dim
        self.weight = rng.normal(size=(side * side * 3, dim)) / np.sqrt(side * side * 3)

    def __call__(self, imgs: list[np.ndarray]) -> np.ndarray:
        rows = []
        for img in imgs:
            t = torch.from_numpy(np.asarray(img, dtype=np.float32)).permute(2, 0, 1).unsqueeze(0)
            small = F.adaptive_avg_pool2d(t, self.side)[0].numpy()
            rows.append(small.reshape(-1) @ self.weight)
        return np.stack(rows)


# ---- reports -----------------------------------------------------------------


@dataclass
class StainMetrics:
    fid: float | None
    kid_x1k: float | None
    ssim: float | None
    lpips: float | None
    pearson_r: float | None
    dab_kl: float | None
    n_images: int


@dataclass
class MetricReport:
    per_stain: dict[str, StainMetrics]
    macro: StainMetrics
    n_models: int
    params: dict[str, int]
    resolution: int
    unified: bool
    step: int
    skipped: int = 0
    protocol: str = "deterministic non-overlapping quadrant crops"
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_stain": {k: asdict(v) for k, v in self.per_stain.items()},
            "macro": asdict(self.macro),
            "n_models": self.n_models,
            "params": self.params,
            "resolution": self.resolution,
            "unified": self.unified,
            "step": self.step,
            "skipped": self.skipped,
            "protocol": self.protocol,
            "notes": self.notes,
        }

    def to_text(self) -> str:
        cols = ["stain", "n", "FID", "KIDx1k", "SSIM", "LPIPS", "P-r", "DAB KL"]
        lines = ["  ".join(f"{c:>10}" for c in cols)]

        def fmt(v):
            return f"{v:10.4f}" if v is not None else f"{'-':>10}"

        for stain in sorted(self.per_stain):
            m = self.per_stain[stain]
            lines.append(
                "  ".join(
                    [f"{stain:>10}", f"{m.n_images:10d}"]
                    + [fmt(v) for v in (m.fid, m.kid_x1k, m.ssim, m.lpips, m.pearson_r, m.dab_kl)]
                )
            )
        m = self.macro
        lines.append(
            "  ".join(
                [f"{'macro':>10}", f"{m.n_images:10d}"]
                + [fmt(v) for v in (m.fid, m.kid_x1k, m.ssim, m.lpips, m.pearson_r, m.dab_kl)]
            )
        )
        meta = (
            f"models={self.n_models} params={self.params.get('generator_side', 0):,} "
            f"res={self.resolution} unified={self.unified} step={self.step} "
            f"skipped={self.skipped}"
        )
        return "\n".join(lines + [meta, f"protocol: {self.protocol}"])


def _mean_or_none(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def compute_stain_metrics(
    real_by_stain: dict[str, list[np.ndarray]],
    fake_by_stain: dict[str, list[np.ndarray]],
    feature_extractor,
    perceptual,
    stain_matrix: StainMatrix | None = None,
    od_eps: float = 1.0 / 255.0,
    top_fraction: float = 0.10,
    hist_bins: int = 256,
    hist_range: tuple[float, float] = (0.0, 3.0),
    hist_smoothing: float = 1e-8,
    kl_direction: str = "real_gen",
    shrinkage: float = 1e-6,
) -> dict[str, StainMetrics]:
    """Per-stain metric block from aligned lists of unit-range images."""
    out: dict[str, StainMetrics] = {}
    for stain in sorted(real_by_stain):
        reals, fakes = real_by_stain[stain], fake_by_stain[stain]
        if len(reals) != len(fakes):
            raise DataError(f"stain {stain}: real/fake counts differ")
        ssims, lpips_vals, kls, gen_scores, real_scores = [], [], [], [], []
        for r, f in zip(reals, fakes):
            ssims.append(ssim(f, r))
            lpips_vals.append(
                float(
                    perceptual.distance(
                        unit_to_model(f).unsqueeze(0), unit_to_model(r).unsqueeze(0)
                    )
                )
            )
            dab_r = dab_channel(torch.from_numpy(np.asarray(r, dtype=np.float64)), stain_matrix, od_eps)
            dab_f = dab_channel(torch.from_numpy(np.asarray(f, dtype=np.float64)), stain_matrix, od_eps)
            kls.append(
                dab_kl(
                    dab_f,
                    dab_r,
                    bins=hist_bins,
                    smoothing=hist_smoothing,
                    value_range=hist_range,
                    direction=kl_direction,
                )
            )
            gen_scores.append(float(dab_intensity_score(dab_f, top_fraction)))
            real_scores.append(float(dab_intensity_score(dab_r, top_fraction)))
        try:
            pr = pearson_r(gen_scores, real_scores) if len(gen_scores) >= 2 else None
        except ConstantInputError:
            pr = None
        real_feats = feature_extractor(reals)
        fake_feats = feature_extractor(fakes)
        out[stain] = StainMetrics(
            fid=fid(real_feats, fake_feats, shrinkage=shrinkage),
            kid_x1k=1000.0 * kid(real_feats, fake_feats),
            ssim=_mean_or_none(ssims),
            lpips=_mean_or_none(lpips_vals),
            pearson_r=pr,
            dab_kl=_mean_or_none(kls),
            n_images=len(reals),
        )
    return out


def macro_average(per_stain: dict[str, StainMetrics]) -> StainMetrics:
    return StainMetrics(
        fid=_mean_or_none([m.fid for m in per_stain.values()]),
        kid_x1k=_mean_or_none([m.kid_x1k for m in per_stain.values()]),
        ssim=_mean_or_none([m.ssim for m in per_stain.values()]),
        lpips=_mean_or_none([m.lpips for m in per_stain.values()]),
        pearson_r=_mean_or_none([m.pearson_r for m in per_stain.values()]),
        dab_kl=_mean_or_none([m.dab_kl for m in per_stain.values()]),
        n_images=sum(m.n_images for m in per_stain.values()),
    )


def generate_for_sample(
    generator,
    processor,
    backbone,
    vocab: TokenVocabulary,
    hne_unit: np.ndarray,
    token_name: str,
    spatial_mode: str = "tokens",
) -> np.ndarray:
    """One EMA-generator forward pass on a unit-range crop; returns unit image."""
    hne_t = unit_to_model(hne_unit).unsqueeze(0)
    unit_chw = torch.from_numpy(np.asarray(hne_unit, dtype=np.float32)).permute(2, 0, 1)
    if spatial_mode == "cls_grid":
        grid = extract_cls_grid(unit_chw, backbone)
    else:
        grid = extract_subcrop_tokens(unit_chw, backbone)
    with torch.no_grad():
        cond = processor(grid.unsqueeze(0))
        fake = generator(hne_t, cond, torch.tensor([vocab.index(token_name)]))
    return ((fake[0].permute(1, 2, 0) + 1.0) * 0.5).clamp(0.0, 1.0).numpy()


def evaluate_run(
    checkpoint_path,
    manifest_path,
    out_dir,
    feature_extractor=None,
    perceptual=None,
    backbone=None,
    split: str = "test",
) -> MetricReport:
    """Generate every test crop, score every metric per stain, emit reports."""
    from .training import build_backbone, build_perceptual, load_inference_modules, read_checkpoint

    payload = read_checkpoint(checkpoint_path)
    generator, processor, vocab, config = load_inference_modules(payload)
    backbone = backbone if backbone is not None else build_backbone(config)
    perceptual = perceptual if perceptual is not None else build_perceptual(config)
    if feature_extractor is None:
        ev = config.evaluation
        feature_extractor = RandomProjectionFeatures(ev.feature_seed, ev.feature_dim, ev.feature_side)

    samples = [s for s in load_manifest(manifest_path) if s.split == split]
    if not samples:
        raise DataError(f"manifest has no {split!r} samples")

    out_dir = Path(out_dir)
    img_dir = out_dir / "generated"
    img_dir.mkdir(parents=True, exist_ok=True)

    crop = config.generator.resolution
    real_by_stain: dict[str, list[np.ndarray]] = {}
    fake_by_stain: dict[str, list[np.ndarray]] = {}
    skipped = 0
    for sample in samples:
        try:
            hne_img = load_rgb(sample.hne)
            ihc_img = load_rgb(sample.ihc)
        except DataError:
            skipped += 1
            continue
        hne_crops = deterministic_test_crops(hne_img, crop)
        ihc_crops = deterministic_test_crops(ihc_img, crop)
        for idx, (hc, ic) in enumerate(zip(hne_crops, ihc_crops)):
            fake = generate_for_sample(
                generator,
                processor,
                backbone,
                vocab,
                hc,
                sample.token_value,
                config.backbone.spatial_mode,
            )
            save_rgb(img_dir / f"{sample.source_id}_q{idx}.png", fake)
            real_by_stain.setdefault(sample.stain, []).append(ic)
            fake_by_stain.setdefault(sample.stain, []).append(fake)

    st = config.stain
    per_stain = compute_stain_metrics(
        real_by_stain,
        fake_by_stain,
        feature_extractor,
        perceptual,
        stain_matrix=config.stain_matrix(),
        od_eps=st.od_eps,
        top_fraction=st.top_fraction,
        hist_bins=st.hist_bins,
        hist_range=tuple(st.hist_range),
        hist_smoothing=st.hist_smoothing,
        kl_direction=st.kl_direction,
        shrinkage=config.evaluation.shrinkage,
    )
    report = MetricReport(
        per_stain=per_stain,
        macro=macro_average(per_stain),
        n_models=1,
        params={
            "generator": count_trainable(generator),
            "processor": count_trainable(processor),
            "generator_side": count_trainable(generator) + count_trainable(processor),
        },
        resolution=config.generator.resolution,
        unified=len(per_stain) > 1,
        step=int(payload["step"]),
        skipped=skipped,
    )
    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    (out_dir / "report.txt").write_text(report.to_text() + "\n")
    return report
