"""Manifests, paired crop sampling, and multi-stain batch composition.

A manifest is line-delimited JSON with fields
{hne, ihc, stain, class?, split, source_id}; relative paths resolve
against the manifest's own directory. The conditioning token of a sample
is its `class` when present (grading datasets), otherwise its `stain`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from .errors import DataError
from .images import load_rgb, unit_to_model

REQUIRED_FIELDS = ("hne", "ihc", "stain", "split", "source_id")


@dataclass(frozen=True)
class PairedSample:
    hne: Path
    ihc: Path
    stain: str
    her2_class: str | None
    split: str
    source_id: str

    @property
    def token_value(self) -> str:
        return self.her2_class if self.her2_class is not None else self.stain


def load_manifest(path: str | Path) -> list[PairedSample]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    base = path.parent
    samples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            missing = [f for f in REQUIRED_FIELDS if f not in rec]
            if missing:
                raise DataError(f"{path}:{lineno}: missing fields {missing}")
            samples.append(
                PairedSample(
                    hne=(base / rec["hne"]).resolve(),
                    ihc=(base / rec["ihc"]).resolve(),
                    stain=str(rec["stain"]),
                    her2_class=str(rec["class"]) if "class" in rec and rec["class"] is not None else None,
                    split=str(rec["split"]),
                    source_id=str(rec["source_id"]),
                )
            )
    if not samples:
        raise DataError(f"manifest {path} is empty")
    return samples


class TokenVocabulary:
    """Maps stain/class names to embedding indices; the last row is null."""

    def __init__(self, names: list[str]):
        if not names:
            raise DataError("token vocabulary is empty")
        if len(set(names)) != len(names):
            raise DataError(f"duplicate token names in {names}")
        self.names = list(names)
        self._index = {n: i for i, n in enumerate(self.names)}

    def __len__(self) -> int:
        return len(self.names)

    @property
    def null_index(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise DataError(
                f"unknown conditioning token {name!r}; valid tokens: {self.names}"
            ) from None

    def index_of_sample(self, sample: PairedSample) -> int:
        return self.index(sample.token_value)


def paired_crop(
    hne: np.ndarray,
    ihc: np.ndarray,
    crop: int,
    rng: np.random.Generator,
    flips: bool = True,
):
    """Identical random crop and synchronized flips for both images.

    Returns unit-range (crop, crop, 3) arrays plus the geometry actually
    applied, so callers can verify or reproduce the pairing.
    """
    if hne.shape != ihc.shape:
        raise DataError(f"pair shape mismatch: {hne.shape} vs {ihc.shape}")
    h, w = hne.shape[:2]
    if h < crop or w < crop:
        raise DataError(f"source image {h}x{w} smaller than crop {crop}")
    y0 = int(rng.integers(0, h - crop + 1))
    x0 = int(rng.integers(0, w - crop + 1))
    flip_h = bool(rng.integers(0, 2)) if flips else False
    flip_v = bool(rng.integers(0, 2)) if flips else False
    out = []
    for img in (hne, ihc):
        tile = img[y0 : y0 + crop, x0 : x0 + crop]
        if flip_h:
            tile = tile[:, ::-1]
        if flip_v:
            tile = tile[::-1, :]
        out.append(np.ascontiguousarray(tile))
    meta = {"y0": y0, "x0": x0, "flip_h": flip_h, "flip_v": flip_v}
    return out[0], out[1], meta


def sample_training_pair(
    sample: PairedSample,
    crop: int,
    rng: np.random.Generator,
    vocab: TokenVocabulary,
    cache: dict | None = None,
):
    """Load, crop, flip, and normalize one pair to model space.

    Returns (hne, ihc, token_index, meta) with signed (3, crop, crop)
    tensors.
    """
    if cache is not None and sample.source_id in cache:
        hne_img, ihc_img = cache[sample.source_id]
    else:
        hne_img, ihc_img = load_rgb(sample.hne), load_rgb(sample.ihc)
        if cache is not None:
            cache[sample.source_id] = (hne_img, ihc_img)
    hne_c, ihc_c, meta = paired_crop(hne_img, ihc_img, crop, rng)
    return unit_to_model(hne_c), unit_to_model(ihc_c), vocab.index_of_sample(sample), meta


def sample_conditioning_drops(
    rng: np.random.Generator,
    class_rate: float = 0.10,
    spatial_rate: float = 0.10,
    both_rate: float = 0.05,
) -> tuple[bool, bool]:
    """One mutually exclusive draw over {class only, spatial only, both, none}.

    Returns (drop_class, drop_spatial) with
    P(class only)=class_rate, P(spatial only)=spatial_rate, P(both)=both_rate.
    """
    if min(class_rate, spatial_rate, both_rate) < 0 or class_rate + spatial_rate + both_rate > 1:
        raise ValueError("conditioning drop rates must be nonnegative and sum to <= 1")
    u = rng.random()
    if u < class_rate:
        return True, False
    if u < class_rate + spatial_rate:
        return False, True
    if u < class_rate + spatial_rate + both_rate:
        return True, True
    return False, False


class UnifiedBatchSampler:
    """Mixes stains within each batch.

    "proportional" draws uniformly over the pooled samples, so each stain
    appears in proportion to its training-set size; "uniform" first picks a
    stain, then a sample within it.
    """

    def __init__(self, groups: dict[str, list[PairedSample]], balance: str = "proportional"):
        if balance not in ("proportional", "uniform"):
            raise ValueError(f"unknown balance mode {balance!r}")
        if not groups:
            raise DataError("no stain groups to sample from")
        for stain, members in groups.items():
            if not members:
                raise DataError(f"stain {stain!r} has an empty manifest")
        self.groups = {k: list(v) for k, v in groups.items()}
        self.stains = sorted(self.groups)
        self.pooled = [s for stain in self.stains for s in self.groups[stain]]
        self.balance = balance

    @classmethod
    def from_samples(cls, samples: list[PairedSample], balance: str = "proportional"):
        groups: dict[str, list[PairedSample]] = {}
        for s in samples:
            groups.setdefault(s.token_value, []).append(s)
        return cls(groups, balance)

    def draw(self, rng: np.random.Generator) -> PairedSample:
        if self.balance == "proportional":
            return self.pooled[int(rng.integers(0, len(self.pooled)))]
        stain = self.stains[int(rng.integers(0, len(self.stains)))]
        members = self.groups[stain]
        return members[int(rng.integers(0, len(members)))]

    def draw_batch(self, rng: np.random.Generator, size: int) -> list[PairedSample]:
        return [self.draw(rng) for _ in range(size)]
