"""Pretext sample generation for the three task variants.

Label semantics, fixed across the codebase:
  - 0..3: whole image rotated by k counter-clockwise quarter turns
  - 4..7: patched image whose patch content is rotated by (label - 4)

A patched image is always the upright original with a bilinearly
downscaled copy of rotate90(x, k) pasted at a uniformly random position.
Patch sides are round-half-up(ratio * dim) per axis.
"""

from dataclasses import dataclass, field

import numpy as np

from . import imaging, seeding
from .errors import EmptyDatasetError, PatchTooLargeError, ShapeMismatchError

ROTNET = "rotnet"
PATCH_ROTNET = "patch-rotnet"
PATCH_RELNET = "patch-relnet"
VARIANTS = (ROTNET, PATCH_ROTNET, PATCH_RELNET)

NUM_CLASSES = {ROTNET: 4, PATCH_ROTNET: 8, PATCH_RELNET: 4}


@dataclass
class PretextConfig:
    ratio: float = 0.4
    rng_seed: int = 0
    resample_position_each_epoch: bool = True

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise ValueError(f"ratio must be in (0, 1), got {self.ratio}")


@dataclass
class PretextSample:
    image: np.ndarray
    label: int
    variant: str
    placement: tuple | None = None  # (top, left, ph, pw) for patched samples


@dataclass
class PretextPair:
    image_a: np.ndarray  # rotated whole image
    image_b: np.ndarray  # patched image, same rotation index
    label: int
    placement: tuple | None = None


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def patch_side(ratio: float, dim: int) -> int:
    side = _round_half_up(ratio * dim)
    if side < 1 or side > dim:
        raise PatchTooLargeError(f"ratio {ratio} on dim {dim} gives patch side {side}")
    return side


def _make_patched(x: np.ndarray, k: int, ratio: float, rng: np.random.Generator):
    h, w, _ = x.shape
    ph = patch_side(ratio, h)
    pw = patch_side(ratio, w)
    patch = imaging.bilinear_resize(imaging.rotate90(x, k), ph, pw)
    top = int(rng.integers(0, h - ph + 1))
    left = int(rng.integers(0, w - pw + 1))
    return imaging.paste(x, patch, top, left), (top, left, ph, pw)


def generate_rotnet_set(x: np.ndarray) -> list:
    """The 4 whole-image rotations, labels 0..3; no randomness."""
    return [PretextSample(imaging.rotate90(x, k), k, ROTNET) for k in range(4)]


def generate_patched_set(x: np.ndarray, cfg: PretextConfig, rng: np.random.Generator) -> list:
    """8 samples: 4 whole rotations (labels 0..3), then 4 patched images
    (labels 4..7) with independently sampled placements."""
    samples = [PretextSample(imaging.rotate90(x, k), k, PATCH_ROTNET) for k in range(4)]
    for k in range(4):
        img, placement = _make_patched(x, k, cfg.ratio, rng)
        samples.append(PretextSample(img, 4 + k, PATCH_ROTNET, placement))
    return samples


def generate_pairs(x: np.ndarray, cfg: PretextConfig, rng: np.random.Generator) -> list:
    """4 (rotated image, patched image) pairs, label k = quarter turns."""
    pairs = []
    for k in range(4):
        img, placement = _make_patched(x, k, cfg.ratio, rng)
        pairs.append(PretextPair(imaging.rotate90(x, k), img, k, placement))
    return pairs


@dataclass
class Batch:
    """One minibatch, images already stacked as NCHW float32."""
    images: np.ndarray            # (B, C, H, W); image_a for pairs
    labels: np.ndarray            # (B,) int64
    images_b: np.ndarray | None = None
    placements: list = field(default_factory=list)


def _to_nchw(images) -> np.ndarray:
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ShapeMismatchError(
            f"cannot batch mixed image shapes {sorted(shapes)}; "
            "pretext batching needs square, equally sized images"
        )
    return np.ascontiguousarray(np.stack(images).transpose(0, 3, 1, 2))


def build_epoch(dataset, variant: str, cfg: PretextConfig, batch_size: int, epoch: int = 0):
    """Yield the epoch's batches: seeded shuffle of the source images, each
    expanded to its pretext samples/pairs in label order, then grouped.

    Placements come from per-image substreams keyed by (seed, epoch, index),
    so generation order never matters.  With resample_position_each_epoch
    off, every epoch reuses the epoch-0 placements.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    dataset = list(dataset)
    if not dataset:
        raise EmptyDatasetError("no source images")
    order = seeding.substream(cfg.rng_seed, seeding.SHUFFLE, epoch).permutation(len(dataset))
    place_epoch = epoch if cfg.resample_position_each_epoch else 0

    items = []
    for idx in order:
        x = dataset[idx]
        rng = seeding.substream(cfg.rng_seed, seeding.PLACEMENT, place_epoch, int(idx))
        if variant == ROTNET:
            items.extend(generate_rotnet_set(x))
        elif variant == PATCH_ROTNET:
            items.extend(generate_patched_set(x, cfg, rng))
        else:
            items.extend(generate_pairs(x, cfg, rng))

    for lo in range(0, len(items), batch_size):
        chunk = items[lo : lo + batch_size]
        labels = np.array([it.label for it in chunk], dtype=np.int64)
        placements = [it.placement for it in chunk]
        if variant == PATCH_RELNET:
            yield Batch(_to_nchw([p.image_a for p in chunk]), labels,
                        images_b=_to_nchw([p.image_b for p in chunk]),
                        placements=placements)
        else:
            yield Batch(_to_nchw([s.image for s in chunk]), labels, placements=placements)


def samples_per_image(variant: str) -> int:
    return 4 if variant in (ROTNET, PATCH_RELNET) else 8
