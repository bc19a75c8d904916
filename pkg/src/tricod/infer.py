"""Inference over an image folder: 8-bit maps at the original size, optional debug dumps."""
from __future__ import annotations

import logging
from pathlib import Path

import cv2
import numpy as np
import torch

from .data import IMAGE_DIR, IMAGE_EXTS, normalize_image, read_image
from .model import TripletNet

log = logging.getLogger(__name__)


def image_folder(root) -> Path:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"input directory not found: {root}")
    return root / IMAGE_DIR if (root / IMAGE_DIR).is_dir() else root


def list_inputs(root) -> list[Path]:
    folder = image_folder(root)
    files = [p for p in sorted(folder.iterdir()) if p.is_file() and p.suffix.lower() in IMAGE_EXTS]
    if not files:
        raise FileNotFoundError(f"no images found in {folder}")
    return files


def to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(x * 255.0), 0, 255).astype(np.uint8)


def min_max(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    return (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)


def prepare_image(img: np.ndarray, main_scale: int, normalize: str) -> torch.Tensor:
    x = cv2.resize(img, (main_scale, main_scale), interpolation=cv2.INTER_LINEAR)
    return torch.from_numpy(normalize_image(x, normalize)).permute(2, 0, 1).unsqueeze(0).contiguous()


def dump_debug(aux: dict, out_dir: Path, scales) -> None:
    """Per-level attention weights per scale and per-level decoder output channel means."""
    out_dir.mkdir(parents=True, exist_ok=True)
    for level, attn in enumerate(aux["attention"], 1):
        if attn is None:
            continue
        for k, s in enumerate(scales):
            cv2.imwrite(str(out_dir / f"attention_l{level}_s{s}.png"), to_u8(attn[0, k].numpy()))
    for level, feat in enumerate(aux["decoder"], 1):
        cv2.imwrite(str(out_dir / f"decoder_l{level}_mean.png"), to_u8(min_max(feat[0].mean(0).numpy())))


@torch.no_grad()
def infer_folder(model: TripletNet, in_root, out_dir, main_scale: int, normalize: str,
                 debug: bool = False, device="cpu") -> list[Path]:
    model.eval()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for path in list_inputs(in_root):
        img = read_image(path)
        h, w = img.shape[:2]
        x = prepare_image(img, main_scale, normalize).to(device)
        prob, aux = model(x, return_aux=True)
        p = prob[0, 0].cpu().numpy().astype(np.float32)
        p = cv2.resize(p, (w, h), interpolation=cv2.INTER_LINEAR)
        target = out_dir / f"{path.stem}.png"
        cv2.imwrite(str(target), to_u8(np.clip(p, 0.0, 1.0)))
        written.append(target)
        if debug:
            aux = {k: [None if t is None else t.cpu() for t in v] for k, v in aux.items()}
            dump_debug(aux, out_dir.parent / "debug" / path.stem, model.scales)
    log.info("wrote %d prediction maps to %s", len(written), out_dir)
    return written
