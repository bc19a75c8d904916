"""Small synthetic image/mask sets for smoke runs and sanity checks."""
from pathlib import Path

import cv2
import numpy as np

from .data import IMAGE_DIR, MASK_DIR


def synthetic_pair(rng: np.random.Generator, size=64):
    """An ellipse whose texture differs mildly from a smooth noisy background."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size
    base = rng.uniform(60, 190, size=3)
    tilt = rng.uniform(-40, 40, size=(2, 3))
    img = base + xx[..., None] * tilt[0] + yy[..., None] * tilt[1]
    cy, cx = rng.uniform(0.3, 0.7, size=2) * size
    ay, ax = rng.uniform(0.12, 0.28, size=2) * size
    mask = (((np.arange(size)[:, None] - cy) / ay) ** 2 + ((np.arange(size)[None, :] - cx) / ax) ** 2) <= 1.0
    shift = rng.uniform(35, 60, size=3) * rng.choice([-1.0, 1.0], size=3)
    img[mask] += shift
    img += rng.normal(0, 8, size=img.shape)
    img = np.clip(img, 0, 255).astype(np.uint8)
    return img, (mask * 255).astype(np.uint8)


def write_synthetic_dataset(root, n=8, size=64, seed=0):
    root = Path(root)
    (root / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    (root / MASK_DIR).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(n):
        img, mask = synthetic_pair(rng, size)
        cv2.imwrite(str(root / IMAGE_DIR / f"syn_{i:03d}.png"), cv2.cvtColor(img, cv2.COLOR_RGB2BGR))
        cv2.imwrite(str(root / MASK_DIR / f"syn_{i:03d}.png"), mask)
    return root
