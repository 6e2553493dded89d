"""Raster I/O and resampling helpers (8-bit RGB images, binary masks)."""
from pathlib import Path

import numpy as np
from PIL import Image


def read_image(path) -> np.ndarray:
    """Load an image file as an H x W x 3 uint8 array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_image(path, image: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(path, format="PNG")


def read_mask(path) -> np.ndarray:
    """Load a mask file as an H x W uint8 array with values in {0, 1}."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > 127).astype(np.uint8)


def write_mask(path, mask: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path, format="PNG")


def read_gray(path) -> np.ndarray:
    """Load a single-channel map as float64 in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def write_gray(path, prob: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.rint(np.asarray(prob, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def resize_bilinear(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a uint8 image or a float map; returns the input dtype."""
    if arr.shape[:2] == (height, width):
        return arr.copy()
    if arr.dtype == np.uint8:
        return np.asarray(Image.fromarray(arr).resize((width, height), Image.BILINEAR))
    if arr.ndim == 2:
        im = Image.fromarray(arr.astype(np.float32), mode="F")
        return np.asarray(im.resize((width, height), Image.BILINEAR)).astype(arr.dtype)
    chans = [resize_bilinear(arr[..., c], height, width) for c in range(arr.shape[-1])]
    return np.stack(chans, axis=-1)


def resize_nearest(mask: np.ndarray, height: int, width: int) -> np.ndarray:
    if mask.shape[:2] == (height, width):
        return mask.copy()
    return np.asarray(Image.fromarray(mask).resize((width, height), Image.NEAREST))
