"""8-bit RGB PNG reading and writing for [3,H,W] float arrays in [0,1]."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .errors import ShapeError


def save_png(path: str, image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected [3,H,W] image, got {image.shape}")
    quantized = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(quantized.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def load_png(path: str) -> np.ndarray:
    with Image.open(path) as img:
        rgb = np.asarray(img.convert("RGB"), dtype=np.float32)
    return (rgb / 255.0).transpose(2, 0, 1)
