"""Image input for the CLI and grayscale heatmap output."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ArgumentError
from .tensor import Tensor
from .tensor import serialize


def load_image(path) -> Tensor:
    """Read an RGB image as a channels-last float32 tensor in [0, 1].

    ``.bin`` files are tensor containers holding a channel-first ``[3, H, W]``
    array; anything else goes through Pillow (PPM, PNG, ...).
    """
    path = Path(path)
    if path.suffix == ".bin":
        t = serialize.load(path)
        if t.ndim != 3 or t.shape[0] != 3:
            raise ArgumentError(f"{path}: expected a [3, H, W] tensor, got {t.shape}")
        return Tensor(np.transpose(t.data, (1, 2, 0)), dtype=np.float32)
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return Tensor(arr)


def save_gray(path, pixels: np.ndarray) -> None:
    """Write an 8-bit grayscale map; format follows the suffix (.pgm, .png)."""
    if pixels.dtype != np.uint8 or pixels.ndim != 2:
        raise ArgumentError(f"expected a 2-D uint8 map, got {pixels.dtype} {pixels.shape}")
    Image.fromarray(pixels, mode="L").save(path)
