"""Tissue-stratified failure characterization.

Each generated test crop gets a per-image DAB KL, a tissue label from an
injected classifier, and a failure flag (strictly above the threshold).
Stratified tables, worst-case grids, and a logistic failure predictor on
frozen backbone summary vectors are derived from those records.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw

from .errors import DataError

DEFAULT_FAILURE_THRESHOLD = 0.5


@dataclass
class TissueClassifier:
    """Injected zero-shot classifier interface.

    `classify` receives a (side, side, 3) unit-range array and returns one
    score per label; ties resolve to the lowest label index.
    """

    side: int
    labels: list[str]
    classify: Callable[[np.ndarray], np.ndarray]


def stub_classifier(labels: list[str], side: int = 224) -> TissueClassifier:
    """Deterministic stand-in: buckets mean intensity into the label list."""
    n = len(labels)

    def classify(img: np.ndarray) -> np.ndarray:
        mean = float(np.asarray(img).mean())
        bucket = min(int(mean * n), n - 1)
        scores = np.zeros(n)
        scores[bucket] = 1.0
        return scores

    return TissueClassifier(side=side, labels=list(labels), classify=classify)


def classify_tissue(img: np.ndarray, classifier: TissueClassifier) -> str:
    """Downsize to the classifier's declared side and take the argmax label."""
    t = torch.from_numpy(np.asarray(img, dtype=np.float32)).permute(2, 0, 1).unsqueeze(0)
    small = F.adaptive_avg_pool2d(t, classifier.side)[0].permute(1, 2, 0).numpy()
    scores = np.asarray(classifier.classify(small), dtype=np.float64)
    if scores.shape != (len(classifier.labels),):
        raise DataError(
            f"classifier returned {scores.shape} scores for {len(classifier.labels)} labels"
        )
    return classifier.labels[int(np.argmax(scores))]  # argmax takes the lowest index on ties


@dataclass
class FailureRecord:
    image_id: str
    stain: str
    tissue: str
    dab_kl: float
    failed: bool

    @classmethod
    def from_kl(
        cls, image_id: str, stain: str, tissue: str, dab_kl: float,
        threshold: float = DEFAULT_FAILURE_THRESHOLD,
    ) -> "FailureRecord":
        return cls(image_id, stain, tissue, float(dab_kl), bool(dab_kl > threshold))


def stratify(records: list[FailureRecord]) -> dict[str, dict]:
    """Per-tissue {n, failure_rate, mean_dab_kl}, macro-averaged over stains."""
    if not records:
        raise DataError("no failure records to stratify")
    by_tissue: dict[str, dict[str, list[FailureRecord]]] = {}
    for rec in records:
        by_tissue.setdefault(rec.tissue, {}).setdefault(rec.stain, []).append(rec)
    table = {}
    for tissue, stains in sorted(by_tissue.items()):
        rates, kls, n = [], [], 0
        for members in stains.values():
            rates.append(float(np.mean([r.failed for r in members])))
            kls.append(float(np.mean([r.dab_kl for r in members])))
            n += len(members)
        table[tissue] = {
            "n": n,
            "failure_rate": float(np.mean(rates)),
            "mean_dab_kl": float(np.mean(kls)),
        }
    return table


def failure_rate_at(records: list[FailureRecord], threshold: float) -> float:
    return float(np.mean([r.dab_kl > threshold for r in records]))


def export_worst_cases(
    records: list[FailureRecord],
    images: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]],
    out_dir: str | Path,
    k: int = 4,
) -> dict[str, Path]:
    """Per stain, the k highest-KL (hne, real, generated) rows in one image.

    Rows are KL-descending; each row's KL value is drawn onto the first
    tile. Grid pixels are exactly (k_eff * tile) x (3 * tile).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_stain: dict[str, list[FailureRecord]] = {}
    for rec in records:
        by_stain.setdefault(rec.stain, []).append(rec)

    paths = {}
    for stain, members in sorted(by_stain.items()):
        ranked = sorted(members, key=lambda r: r.dab_kl, reverse=True)
        if len(ranked) < k:
            warnings.warn(f"stain {stain}: only {len(ranked)} records for top-{k} grid")
        chosen = ranked[:k]
        tiles = [images[r.image_id] for r in chosen]
        tile_h, tile_w = np.asarray(tiles[0][0]).shape[:2]
        grid = np.ones((len(chosen) * tile_h, 3 * tile_w, 3), dtype=np.float32)
        for row, (hne, real, gen) in enumerate(tiles):
            for col, img in enumerate((hne, real, gen)):
                grid[row * tile_h : (row + 1) * tile_h, col * tile_w : (col + 1) * tile_w] = img
        canvas = Image.fromarray((np.clip(grid, 0, 1) * 255 + 0.5).astype(np.uint8))
        draw = ImageDraw.Draw(canvas)
        for row, rec in enumerate(chosen):
            draw.text((2, row * tile_h + 2), f"KL={rec.dab_kl:.3f}", fill=(255, 0, 0))
        path = out_dir / f"worst_{stain}.png"
        canvas.save(path, format="PNG")
        paths[stain] = path
    return paths


# ---- failure predictor --------------------------------------------------------


@dataclass
class LogisticModel:
    weights: np.ndarray
    bias: float
    mean: np.ndarray
    scale: np.ndarray

    def scores(self, embeddings) -> np.ndarray:
        x = (np.asarray(embeddings, dtype=np.float64) - self.mean) / self.scale
        return x @ self.weights + self.bias


def auc_rank(scores, labels) -> float:
    """AUC via the Mann-Whitney rank statistic with average ranks for ties."""
    from scipy.stats import rankdata

    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC undefined with a single class")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def train_failure_predictor(
    embeddings,
    failed,
    l2: float = 1e-3,
    lr: float = 0.1,
    steps: int = 500,
    split: float = 0.8,
    seed: int = 17,
) -> tuple[LogisticModel, float]:
    """L2-regularized logistic regression by full-batch gradient descent.

    Features are standardized from the training split; AUC is computed on
    the held-out split with the rank statistic.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(failed, dtype=bool)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("embeddings must be (n, d) aligned with labels")
    if y.all() or not y.any():
        raise DataError("failure predictor needs both classes present")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(y))
    n_train = max(int(split * len(y)), 1)
    train_idx, test_idx = order[:n_train], order[n_train:]
    if len(test_idx) == 0 or y[test_idx].all() or not y[test_idx].any():
        raise DataError("held-out split is degenerate; provide more records")

    mean = x[train_idx].mean(axis=0)
    scale = x[train_idx].std(axis=0)
    scale[scale < 1e-12] = 1.0
    xt = (x[train_idx] - mean) / scale
    sign = np.where(y[train_idx], 1.0, -1.0)

    w = np.zeros(x.shape[1])
    b = 0.0
    for _ in range(steps):
        z = sign * (xt @ w + b)
        sig = 1.0 / (1.0 + np.exp(np.clip(z, -500, 500)))  # d/dz log(1+e^-z)
        grad_w = -(xt * (sign * sig)[:, None]).mean(axis=0) + l2 * w
        grad_b = -(sign * sig).mean()
        w -= lr * grad_w
        b -= lr * grad_b

    model = LogisticModel(weights=w, bias=b, mean=mean, scale=scale)
    auc = auc_rank(model.scores(x[test_idx]), y[test_idx])
    return model, auc


# ---- end-to-end driver ---------------------------------------------------------


def run_failure_analysis(
    checkpoint_path,
    manifest_path,
    out_dir,
    classifier: TissueClassifier | None = None,
    threshold: float | None = None,
    split: str = "test",
    worst_k: int = 4,
    backbone=None,
) -> dict:
    """Generate test crops, score and classify each, emit all artifacts."""
    from .data import load_manifest
    from .evaluation import deterministic_test_crops, generate_for_sample
    from .images import load_rgb
    from .stain import dab_channel, dab_kl
    from .training import build_backbone, load_inference_modules, read_checkpoint

    payload = read_checkpoint(checkpoint_path)
    generator, processor, vocab, config = load_inference_modules(payload)
    backbone = backbone if backbone is not None else build_backbone(config)
    if classifier is None:
        classifier = stub_classifier(
            list(config.failure.tissue_labels), config.failure.classifier_side
        )
    if threshold is None:
        threshold = config.failure.threshold

    samples = [s for s in load_manifest(manifest_path) if s.split == split]
    if not samples:
        raise DataError(f"manifest has no {split!r} samples")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    crop = config.generator.resolution
    st = config.stain

    records: list[FailureRecord] = []
    images: dict[str, tuple] = {}
    embeddings, labels = [], []
    for sample in samples:
        hne_crops = deterministic_test_crops(load_rgb(sample.hne), crop)
        ihc_crops = deterministic_test_crops(load_rgb(sample.ihc), crop)
        for idx, (hc, ic) in enumerate(zip(hne_crops, ihc_crops)):
            fake = generate_for_sample(
                generator, processor, backbone, vocab, hc, sample.token_value,
                config.backbone.spatial_mode,
            )
            dab_f = dab_channel(torch.from_numpy(fake.astype(np.float64)), config.stain_matrix(), st.od_eps)
            dab_r = dab_channel(torch.from_numpy(ic.astype(np.float64)), config.stain_matrix(), st.od_eps)
            kl = dab_kl(
                dab_f, dab_r,
                bins=st.hist_bins,
                smoothing=st.hist_smoothing,
                value_range=tuple(st.hist_range),
                direction=st.kl_direction,
            )
            image_id = f"{sample.source_id}_q{idx}"
            tissue = classify_tissue(hc, classifier)
            rec = FailureRecord.from_kl(image_id, sample.stain, tissue, kl, threshold)
            records.append(rec)
            images[image_id] = (hc, ic, fake)
            hne_t = torch.from_numpy(hc.astype(np.float32)).permute(2, 0, 1)
            embeddings.append(backbone.cls_fn(hne_t).numpy())
            labels.append(rec.failed)

    table = stratify(records)
    grids = export_worst_cases(records, images, out_dir / "worst_cases", k=worst_k)

    predictor_auc = None
    labels_arr = np.asarray(labels, dtype=bool)
    try:
        fcfg = config.failure
        _, predictor_auc = train_failure_predictor(
            np.stack(embeddings), labels_arr,
            l2=fcfg.predictor_l2, lr=fcfg.predictor_lr, steps=fcfg.predictor_steps,
            split=fcfg.predictor_split, seed=fcfg.predictor_seed,
        )
    except DataError:
        pass  # all-pass or all-fail runs have no trainable signal

    with open(out_dir / "records.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(asdict(rec)) + "\n")
    summary = {
        "threshold": threshold,
        "n_records": len(records),
        "overall_failure_rate": failure_rate_at(records, threshold),
        "per_tissue": table,
        "predictor_auc": predictor_auc,
        "worst_case_grids": {k: str(v) for k, v in grids.items()},
    }
    (out_dir / "stratified.json").write_text(json.dumps(summary, indent=2))
    lines = [f"{'tissue':>24}  {'n':>5}  {'failure_rate':>12}  {'mean_dab_kl':>12}"]
    for tissue, row in table.items():
        lines.append(
            f"{tissue:>24}  {row['n']:5d}  {row['failure_rate']:12.4f}  {row['mean_dab_kl']:12.4f}"
        )
    (out_dir / "stratified.txt").write_text("\n".join(lines) + "\n")
    return summary
