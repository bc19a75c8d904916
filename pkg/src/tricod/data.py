"""Image/mask indexing, loading, augmentation and the three-scale input pyramid."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import Dataset, default_collate

log = logging.getLogger(__name__)

IMAGE_DIR = "Image"
MASK_DIR = "GT"
IMAGE_EXTS = (".jpg", ".jpeg", ".png", ".bmp")
MASK_EXTS = (".png",)
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)
MASK_THRESHOLD = 127


class DatasetError(OSError):
    pass


class DecodeError(DatasetError):
    pass


@dataclass(frozen=True)
class SamplePair:
    image_path: Path
    mask_path: Path
    stem: str


def _files_by_stem(folder: Path, exts) -> dict[str, Path]:
    found: dict[str, Path] = {}
    for p in sorted(folder.iterdir()):
        if not p.is_file() or p.suffix.lower() not in exts:
            continue
        if p.stem in found:
            raise DatasetError(f"duplicate stem {p.stem!r} in {folder}: {found[p.stem].name}, {p.name}")
        found[p.stem] = p
    return found


def list_images(root) -> dict[str, Path]:
    folder = Path(root) / IMAGE_DIR
    if not folder.is_dir():
        raise DatasetError(f"missing image directory: {folder}")
    return _files_by_stem(folder, IMAGE_EXTS)


def index_dataset(root) -> list[SamplePair]:
    root = Path(root)
    images = list_images(root)
    mask_dir = root / MASK_DIR
    if not mask_dir.is_dir():
        raise DatasetError(f"missing mask directory: {mask_dir}")
    masks = _files_by_stem(mask_dir, MASK_EXTS)
    common = sorted(images.keys() & masks.keys())
    for stem in sorted(images.keys() - masks.keys()):
        log.warning("image without mask: %s", images[stem])
    for stem in sorted(masks.keys() - images.keys()):
        log.warning("mask without image: %s", masks[stem])
    if not common:
        raise DatasetError(f"no matching image/mask stems under {root / IMAGE_DIR} and {mask_dir}")
    return [SamplePair(images[s], masks[s], s) for s in common]


def read_image(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise DecodeError(f"cannot decode image: {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def read_mask(path) -> np.ndarray:
    mask = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if mask is None:
        raise DecodeError(f"cannot decode mask: {path}")
    return mask


def binarize(mask: np.ndarray) -> np.ndarray:
    return (mask > MASK_THRESHOLD).astype(np.float32)


def normalize_image(img: np.ndarray, mode: str) -> np.ndarray:
    x = img.astype(np.float32) / 255.0
    if mode == "imagenet":
        x = (x - IMAGENET_MEAN) / IMAGENET_STD
    elif mode != "unit":
        raise ValueError(f"unknown normalization {mode!r}")
    return x


def normalization_for(backbone: str) -> str:
    return "imagenet" if backbone == "resnet50" else "unit"


@dataclass(frozen=True)
class Augmentation:
    hflip: bool = True
    rotate: bool = True
    flip_prob: float = 0.5
    rotate_prob: float = 0.5
    max_degrees: float = 15.0

    @classmethod
    def from_train(cls, train) -> "Augmentation":
        return cls(train.hflip, train.rotate, train.flip_prob, train.rotate_prob, train.rotate_degrees)

    @classmethod
    def disabled(cls) -> "Augmentation":
        return cls(hflip=False, rotate=False)


@dataclass(frozen=True)
class Transform:
    hflip: bool = False
    angle: float = 0.0  # degrees, counter-clockwise

    def apply(self, arr: np.ndarray, nearest: bool = False) -> np.ndarray:
        out = arr[:, ::-1] if self.hflip else arr
        if self.angle:
            h, w = out.shape[:2]
            m = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), self.angle, 1.0)
            interp = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
            out = cv2.warpAffine(np.ascontiguousarray(out), m, (w, h), flags=interp,
                                 borderMode=cv2.BORDER_REFLECT_101)
        return np.ascontiguousarray(out)

    def inverse(self) -> "Transform":
        # mirroring reverses the rotation sense, so after a flip the same angle undoes it
        return Transform(self.hflip, self.angle if self.hflip else -self.angle)


def sample_transform(aug: Augmentation, rng: np.random.Generator) -> Transform:
    # draw a fixed number of variates so the stream does not depend on the flags
    u_flip, u_rot, u_angle = rng.random(3)
    flip = aug.hflip and u_flip < aug.flip_prob
    angle = 0.0
    if aug.rotate and u_rot < aug.rotate_prob:
        angle = float((2.0 * u_angle - 1.0) * aug.max_degrees)
    return Transform(bool(flip), angle)


def load_and_augment(pair: SamplePair, main_scale: int, aug: Augmentation, rng: np.random.Generator,
                     normalize: str = "unit"):
    """Return ``(image HxWx3 float32, mask HxW float32 in {0, 1})`` at ``main_scale``."""
    if main_scale % 32:
        raise ValueError(f"main scale {main_scale} is not divisible by 32")
    img = read_image(pair.image_path)
    mask = read_mask(pair.mask_path)
    size = (main_scale, main_scale)
    img = cv2.resize(img, size, interpolation=cv2.INTER_LINEAR)
    mask = cv2.resize(mask, size, interpolation=cv2.INTER_NEAREST)
    t = sample_transform(aug, rng)
    img = t.apply(img)
    mask = t.apply(mask, nearest=True)
    return normalize_image(img, normalize), binarize(mask)


def pyramid_size(size: int, scale: float) -> int:
    return int(round(size * scale))


def build_pyramid(image: torch.Tensor, scales=(0.5, 1.0, 1.5)) -> dict[float, torch.Tensor]:
    """Bilinear re-scalings of a ``(..., C, H, W)`` main-scale image; the 1.0 entry is the input itself."""
    squeeze = image.dim() == 3
    x = image.unsqueeze(0) if squeeze else image
    h, w = x.shape[-2:]
    out = {}
    for s in sorted(scales):
        if s == 1.0:
            y = x
        else:
            y = F.interpolate(x, size=(pyramid_size(h, s), pyramid_size(w, s)), mode="bilinear",
                              align_corners=False)
        out[s] = y.squeeze(0) if squeeze else y
    return out


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))


class PairDataset(Dataset):
    """Training/evaluation dataset over one or more roots.

    Each item draws its augmentation from a generator seeded by
    ``(seed, epoch, index)``, so results do not depend on worker count or order.
    """

    def __init__(self, pairs, main_scale, scales=(0.5, 1.0, 1.5), aug: Augmentation | None = None,
                 normalize="unit", seed=0, train=True):
        self.pairs = list(pairs)
        self.main_scale = main_scale
        self.scales = tuple(sorted(scales))
        self.aug = aug or Augmentation.disabled()
        self.normalize = normalize
        self.seed = seed
        self.epoch = 0
        self.train = train

    @classmethod
    def from_roots(cls, roots, **kwargs):
        pairs = []
        for root in roots:
            pairs.extend(index_dataset(root))
        return cls(pairs, **kwargs)

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, index):
        pair = self.pairs[index]
        try:
            img, mask = load_and_augment(pair, self.main_scale, self.aug,
                                         sample_rng(self.seed, self.epoch, index), self.normalize)
        except DecodeError:
            if not self.train:
                raise
            log.exception("skipping undecodable sample %s", pair.stem)
            return None
        image = torch.from_numpy(img).permute(2, 0, 1).contiguous()
        return {
            "image": build_pyramid(image, self.scales),
            "mask": torch.from_numpy(mask).unsqueeze(0),
            "stem": pair.stem,
        }


def collate_skip_none(batch):
    batch = [b for b in batch if b is not None]
    if not batch:
        return None
    return default_collate(batch)
