"""Small procedurally generated sources for tests, demos and desk-scale runs."""
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import datagen, triplets
from .datagen import SourceSample
from .imaging import write_image, write_mask


def textured_image(height, width, rng, smooth=1.0):
    """Non-repeating colour texture (smoothed noise), uint8."""
    noise = rng.uniform(0, 255, size=(height, width, 3))
    if smooth > 0:
        noise = ndimage.gaussian_filter(noise, sigma=(smooth, smooth, 0))
        lo, hi = noise.min(), noise.max()
        noise = (noise - lo) / max(hi - lo, 1e-9) * 255
    return np.clip(np.rint(noise), 0, 255).astype(np.uint8)


def ellipse_mask(height, width, rng, min_frac=0.2, max_frac=0.4):
    cy = rng.uniform(0.35, 0.65) * height
    cx = rng.uniform(0.35, 0.65) * width
    ry = rng.uniform(min_frac, max_frac) * height / 2 + 1
    rx = rng.uniform(min_frac, max_frac) * width / 2 + 1
    ys, xs = np.mgrid[0:height, 0:width]
    return ((((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2) <= 1.0).astype(np.uint8)


def make_source(source_id, height=64, width=64, seed=0, origin="toy"):
    """Textured background with a differently-tinted textured elliptical object."""
    rng = np.random.default_rng(seed)
    bg = textured_image(height, width, rng).astype(np.float64)
    fg = textured_image(height, width, rng).astype(np.float64)
    tint = rng.uniform(0.5, 1.0, size=3)
    mask = ellipse_mask(height, width, rng)
    image = np.where(mask[..., None] > 0, 0.5 * fg + 127 * tint, 0.6 * bg)
    return SourceSample(source_id, np.clip(np.rint(image), 0, 255).astype(np.uint8), mask, origin)


def make_sources(n, height=64, width=64, seed=0, prefix="src"):
    return [make_source(f"{prefix}{i:03d}", height, width, seed * 1000 + i) for i in range(n)]


def rigid_dataset(root, name, n_sources, frames=1, size=64, seed=0, max_step=2, prefix="src"):
    """Write a synthetic dataset of rigid-object clips with exact flows; returns its manifest."""
    config = datagen.GeneratorConfig(frames=frames, height=size, width=size, seed=seed)
    backend = datagen.RigidOracleBackend(max_step=max_step)
    groups = []
    for src in make_sources(n_sources, size, size, seed, prefix):
        clip = datagen.generate_clip(src, config, backend)
        groups.append(triplets.build_triplets(src, clip, clip.gt_flows))
    return triplets.write_dataset(root, name, groups, {"backend": backend.kind, "seed": seed})


def pan_videos(root, n_videos, frames=3, size=64, seed=0, step=2):
    """Camera-pan clips of a dark rectangle on a bright background; flow is uniform.

    Writes ``root/frames/<video>/<t>.png`` and ``root/masks/<video>/<t>.png`` in the layout
    ``triplets.ingest_video`` reads.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    pad = step * frames
    for v in range(n_videos):
        big = size + 2 * pad
        canvas = textured_image(big, big, rng).astype(np.float64) * 0.5 + 110
        mask = np.zeros((big, big), np.uint8)
        h, w = rng.integers(size // 4, size // 2, size=2)
        y, x = rng.integers(pad + 4, pad + size - 4 - np.array([h, w]))
        mask[y:y + h, x:x + w] = 1
        canvas[mask > 0] = (canvas[mask > 0] - 110) * 0.8
        canvas = np.rint(canvas).astype(np.uint8)
        dy, dx = rng.choice([-step, step], size=2)
        for t in range(frames):
            oy, ox = pad - dy * t, pad - dx * t
            name = f"{t:05d}.png"
            write_image(root / "frames" / f"vid{v:03d}" / name, canvas[oy:oy + size, ox:ox + size])
            write_mask(root / "masks" / f"vid{v:03d}" / name, mask[oy:oy + size, ox:ox + size])
    return root / "frames", root / "masks"
