"""Synthetic stain-image builders shared by the test suite.

Images are rendered through the inverse Beer-Lambert transform from known
concentration fields, so every pair has a deterministic H&E -> IHC mapping
and known DAB statistics.
"""

import json
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from virtstain.stain import StainMatrix, render_concentrations

STAINS = ("HER2", "Ki67", "ER", "PR")
STAIN_DAB_LEVEL = {"HER2": 1.1, "Ki67": 0.85, "ER": 0.6, "PR": 0.35}


def central_difference(fn, x: torch.Tensor, indices, h: float = 1e-4) -> torch.Tensor:
    """Central-difference gradient of scalar fn at the given flat indices."""
    flat = x.detach().clone().reshape(-1)
    out = torch.zeros(len(indices), dtype=flat.dtype)
    for n, i in enumerate(indices):
        hi, lo = flat.clone(), flat.clone()
        hi[i] += h
        lo[i] -= h
        out[n] = (fn(hi.reshape(x.shape)) - fn(lo.reshape(x.shape))) / (2 * h)
    return out


def shifted_texture_pair(k: int, side: int = 512, seed: int = 0, noise_seed: int = 5):
    """Texture pair offset by k px: smooth color field plus pixel-scale noise.

    The fine noise survives at full resolution but is averaged away by the
    downsampling inside the robust losses, mimicking how consecutive-section
    misalignment behaves across scales.
    """
    big_side = side + 32
    g = torch.Generator().manual_seed(seed)
    coarse = torch.rand(1, 3, 16, 16, generator=g)
    smooth = F.interpolate(coarse, size=(big_side, big_side), mode="bilinear", align_corners=False)
    noise = torch.rand(1, 3, big_side, big_side, generator=torch.Generator().manual_seed(noise_seed))
    big = (0.7 * smooth + 0.3 * noise) * 2 - 1
    a = big[:, :, 0:side, 0:side]
    b = big[:, :, k : side + k, 0:side]
    return a, b


def smooth_field(rng: np.random.Generator, side: int, cells: int = 8) -> np.ndarray:
    """Smooth random field in [0, 1] from bilinear upsampling of coarse noise."""
    coarse = torch.from_numpy(rng.uniform(0.0, 1.0, size=(1, 1, cells, cells)))
    fine = F.interpolate(coarse, size=(side, side), mode="bilinear", align_corners=False)
    return fine[0, 0].numpy()


def make_pair(rng: np.random.Generator, side: int, stain: str, matrix: StainMatrix | None = None):
    """One (hne, ihc) pair of unit-range (H, W, 3) float32 arrays."""
    matrix = matrix or StainMatrix.h_dab()
    field = smooth_field(rng, side)
    hema = 0.15 + 0.9 * field

    conc_hne = np.zeros((side, side, 3))
    conc_hne[..., 0] = hema
    conc_hne[..., 1] = 0.08 * (1.0 - field)

    conc_ihc = np.zeros((side, side, 3))
    conc_ihc[..., 0] = 0.25 * hema
    conc_ihc[..., 2] = STAIN_DAB_LEVEL[stain] * field

    hne = render_concentrations(torch.from_numpy(conc_hne), matrix).numpy()
    ihc = render_concentrations(torch.from_numpy(conc_ihc), matrix).numpy()
    return hne.astype(np.float32), ihc.astype(np.float32)


def save_png(path, arr: np.ndarray) -> None:
    img = np.clip(np.asarray(arr), 0.0, 1.0)
    Image.fromarray((img * 255.0 + 0.5).astype(np.uint8)).save(path)


def write_dataset(
    root: Path,
    rng: np.random.Generator,
    side: int = 64,
    pairs_per_stain: int = 2,
    stains=STAINS,
    split: str = "train",
) -> Path:
    """Write PNG pairs plus a line-delimited manifest; returns manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for stain in stains:
        for i in range(pairs_per_stain):
            sid = f"{stain.lower()}_{split}_{i:03d}"
            hne, ihc = make_pair(rng, side, stain)
            save_png(root / f"{sid}_hne.png", hne)
            save_png(root / f"{sid}_ihc.png", ihc)
            records.append(
                {
                    "hne": f"{sid}_hne.png",
                    "ihc": f"{sid}_ihc.png",
                    "stain": stain,
                    "split": split,
                    "source_id": sid,
                }
            )
    manifest = root / f"manifest_{split}.jsonl"
    with open(manifest, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return manifest
