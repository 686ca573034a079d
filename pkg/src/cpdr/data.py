"""Image/mask pairs on disk, horizontal-flip augmentation, and a synthetic generator."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import Tensor, resize_array

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".pgm", ".jpg", ".jpeg", ".bmp")


@dataclass
class SamplePair:
    image: Tensor  # (1,3,H,W) in [0,1]
    mask: Tensor  # (1,1,H,W) in {0,1}
    name: str

    def __post_init__(self):
        if self.image.shape[2:] != self.mask.shape[2:]:
            raise ValueError(f"{self.name}: image {self.image.shape} and mask {self.mask.shape} differ")


@dataclass
class SynthSpec:
    count: int = 16
    size: int = 96
    shapes: tuple[str, ...] = ("rect", "ellipse")
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.size < 32 or self.count < 1:
            raise ValueError("synthetic spec needs size >= 32 and count >= 1")


def read_image(path: str | Path) -> np.ndarray:
    """RGB image as float (3,H,W) in [0,1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def read_gray(path: str | Path) -> np.ndarray:
    """8-bit single-channel file as float (H,W) in [0,1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def write_gray(path: str | Path, values: np.ndarray) -> None:
    Image.fromarray(np.asarray(values, dtype=np.uint8), mode="L").save(path)


def write_rgb(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(np.round(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def list_images(directory: str | Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(Path(directory).iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def binarize_mask(mask: np.ndarray) -> np.ndarray:
    return (mask > 0.5).astype(np.float64)


def load_dataset(image_dir: str | Path, mask_dir: str | Path, target: tuple[int, int]) -> list[SamplePair]:
    """Pairs sorted by basename; images resized bilinearly, masks resized then re-binarized at 0.5."""
    images, masks = list_images(image_dir), list_images(mask_dir)
    h, w = target
    pairs = []
    for name in sorted(images):
        if name not in masks:
            log.warning("no mask for %s, skipping", name)
            continue
        try:
            img = read_image(images[name])
            msk = read_gray(masks[name])
        except OSError as exc:
            log.warning("unreadable pair %s: %s", name, exc)
            continue
        img = resize_array(img, h, w)
        msk = binarize_mask(resize_array(msk, h, w))
        pairs.append(SamplePair(Tensor(img[None]), Tensor(msk[None, None]), name))
    if not pairs:
        raise ValueError(f"no usable image/mask pairs in {image_dir} and {mask_dir}")
    return pairs


def augment_hflip(s: SamplePair, coin: int) -> SamplePair:
    if not coin:
        return s
    return SamplePair(Tensor(s.image.data[..., ::-1].copy()), Tensor(s.mask.data[..., ::-1].copy()), s.name)


def _shape_mask(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    lo, hi = size // 8, size // 3
    bh, bw = rng.integers(lo, hi + 1, size=2)
    top = rng.integers(0, size - bh + 1)
    left = rng.integers(0, size - bw + 1)
    m = np.zeros((size, size), dtype=bool)
    if kind == "rect":
        m[top:top + bh, left:left + bw] = True
    else:
        yy, xx = np.mgrid[0:bh, 0:bw]
        cy, cx = (bh - 1) / 2, (bw - 1) / 2
        m[top:top + bh, left:left + bw] = ((yy - cy) / (bh / 2)) ** 2 + ((xx - cx) / (bw / 2)) ** 2 <= 1.0
    return m


def generate_synthetic(spec: SynthSpec) -> list[SamplePair]:
    """Dark noisy backgrounds with 1-3 bright rectangles/ellipses; the mask is the exact shape support."""
    rng = np.random.default_rng(spec.seed)
    s = spec.size
    out = []
    for k in range(spec.count):
        base = rng.uniform(0.0, 0.35, size=3)
        image = base[:, None, None] + spec.noise * rng.uniform(-1, 1, size=(3, s, s))
        mask = np.zeros((s, s), dtype=bool)
        for _ in range(int(rng.integers(1, 4))):
            m = _shape_mask(spec.shapes[int(rng.integers(len(spec.shapes)))], s, rng)
            color = rng.uniform(0.65, 1.0, size=3)
            image[:, m] = color[:, None]
            mask |= m
        image += spec.noise * 0.5 * rng.uniform(-1, 1, size=image.shape) * mask
        image = np.clip(image, 0.0, 1.0)
        out.append(SamplePair(Tensor(image[None]), Tensor(mask[None, None].astype(np.float64)), f"synth_{k:04d}"))
    return out


def write_dataset(pairs: list[SamplePair], root: str | Path) -> tuple[Path, Path]:
    """Write ``images/<name>.png`` and ``masks/<name>.png`` under ``root``."""
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    img_dir.mkdir(parents=True, exist_ok=True)
    mask_dir.mkdir(parents=True, exist_ok=True)
    for s in pairs:
        write_rgb(img_dir / f"{s.name}.png", s.image.data[0])
        write_gray(mask_dir / f"{s.name}.png", s.mask.data[0, 0] * 255)
    return img_dir, mask_dir
