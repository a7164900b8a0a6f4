"""Image I/O and range conversions.

File space is (H, W, 3) float32 in [0, 1]; model space is (3, H, W) in
[-1, 1]. These helpers are the only place the two conventions meet.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DataError


def load_rgb(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise DataError(f"image not found: {path}") from None
    except OSError as exc:
        raise DataError(f"unreadable image {path}: {exc}") from exc
    return arr


def save_rgb(path: str | Path, img) -> None:
    """Write a unit-range image as lossless PNG."""
    if torch.is_tensor(img):
        img = img.detach().cpu().numpy()
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    if arr.ndim == 3 and arr.shape[0] == 3:
        arr = np.transpose(arr, (1, 2, 0))
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path, format="PNG")


def unit_to_model(img: np.ndarray | torch.Tensor) -> torch.Tensor:
    """(H, W, 3) unit range -> (3, H, W) signed range."""
    t = torch.as_tensor(img, dtype=torch.float32)
    if t.dim() != 3 or t.shape[-1] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {tuple(t.shape)}")
    return t.permute(2, 0, 1) * 2.0 - 1.0


def model_to_unit(t: torch.Tensor) -> np.ndarray:
    """(3, H, W) or (B, 3, H, W) signed range -> channel-last unit range."""
    t = t.detach().cpu()
    if t.dim() == 4:
        t = t.permute(0, 2, 3, 1)
    elif t.dim() == 3:
        t = t.permute(1, 2, 0)
    else:
        raise ValueError(f"expected 3- or 4-d tensor, got {t.dim()}-d")
    return ((t + 1.0) * 0.5).clamp(0.0, 1.0).numpy()


def model_unit_tensor(t: torch.Tensor) -> torch.Tensor:
    """Signed (..., 3, H, W) -> unit range, same layout, gradient-safe."""
    return ((t + 1.0) * 0.5).clamp(0.0, 1.0)
