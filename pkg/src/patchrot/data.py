"""Dataset ingestion: CIFAR-10 binary, PPM directories, synthetic glyphs.

The synthetic set exists so pretext learnability can be asserted in
minutes: each image carries one of four upright glyphs at a random
position over background noise.  The glyphs have identical pixel counts
(mass statistics alone cannot separate the classes) and none equals any
rotation of itself or of another glyph, so rotation prediction is
well-posed by construction.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imaging, seeding
from .errors import DataError, EmptyDatasetError, LabelOutOfRangeError, TruncatedRecordError

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 1024 planar pixels
CIFAR_CLASSES = 10

_GLYPH_ART = {
    "arrow": """
....######....
....######....
...########...
..##########..
.############.
#####....#####
......####....
......####....
......####....
......####....
......####....
......####....
......####....
......####....
""",
    "ell": """
.####.........
.####.........
.####.........
.####.........
.####.........
.####.........
.####.........
.####.........
.####.........
.####.........
.###########..
.###########..
.###########..
.###########..
""",
    "tee": """
##############
##############
##############
.....####.....
.....####.....
.....####.....
.....####.....
.....####.....
.....####.....
.....####.....
.....####.....
.....####.....
.....####.....
......##......
""",
    "hook": """
....#########.
....#########.
....#########.
....#####.....
....#####.....
....#####.....
....#####.....
....#####.....
....#####.....
.#########....
.#########....
.#########....
..............
..............
""",
}


def _parse_glyph(art: str) -> np.ndarray:
    rows = art.strip().splitlines()
    return np.array([[ch == "#" for ch in row] for row in rows], dtype=bool)


GLYPHS = {name: _parse_glyph(art) for name, art in _GLYPH_ART.items()}
GLYPH_NAMES = tuple(GLYPHS)


@dataclass
class Dataset:
    images: list
    labels: np.ndarray | None = None
    class_names: tuple = ()

    def __len__(self):
        return len(self.images)

    @property
    def num_classes(self) -> int:
        if self.labels is None:
            raise DataError("dataset has no labels")
        return int(self.labels.max()) + 1


@dataclass
class DatasetSource:
    kind: str  # "cifar" | "ppmdir" | "synthetic"
    path: str = ""
    params: dict = field(default_factory=dict)

    @property
    def spec_string(self) -> str:
        if self.kind == "synthetic":
            inner = ",".join(f"{k}={v}" for k, v in sorted(self.params.items()))
            return f"synthetic:{inner}"
        return f"{self.kind}:{self.path}"


def parse_source(spec: str) -> DatasetSource:
    """Parse "cifar:<file>", "ppmdir:<dir>" or "synthetic:n=..,size=..[,classes=..]"."""
    kind, sep, rest = spec.partition(":")
    if not sep:
        raise DataError(f"dataset source needs a kind prefix, got {spec!r}")
    if kind in ("cifar", "ppmdir"):
        if not rest:
            raise DataError(f"{kind} source needs a path")
        return DatasetSource(kind, rest)
    if kind == "synthetic":
        params = {}
        for item in filter(None, rest.split(",")):
            key, _, val = item.partition("=")
            if key not in ("n", "size", "classes"):
                raise DataError(f"unknown synthetic parameter {key!r}")
            params[key] = int(val)
        params.setdefault("n", 256)
        params.setdefault("size", 32)
        params.setdefault("classes", 4)
        return DatasetSource("synthetic", params=params)
    raise DataError(f"unknown dataset kind {kind!r} (use cifar:/ppmdir:/synthetic:)")


def load_source(source: DatasetSource, seed: int = 0) -> Dataset:
    if source.kind == "cifar":
        return load_cifar_binary(source.path)
    if source.kind == "ppmdir":
        return load_ppm_directory(source.path)
    p = source.params
    return make_synthetic_shapes(p["n"], p["size"], seed, classes=p["classes"])


def load_cifar_binary(path) -> Dataset:
    """CIFAR-10 binary batch: 3073-byte records, label + planar R,G,B."""
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES != 0:
        raise TruncatedRecordError(
            f"{path}: {len(raw)} bytes is not a multiple of {CIFAR_RECORD_BYTES}"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= CIFAR_CLASSES:
        bad = int(np.argmax(labels >= CIFAR_CLASSES))
        raise LabelOutOfRangeError(f"{path}: record {bad} has label {labels[bad]} (valid: 0..9)")
    pixels = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    images = [np.ascontiguousarray(im, dtype=np.float32) / 255.0 for im in pixels]
    return Dataset(images, labels)


def load_ppm_directory(path) -> Dataset:
    """Directory of PPMs; class subdirectories give labels, flat dirs don't."""
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"{path}: not a directory")
    subdirs = sorted(d for d in root.iterdir() if d.is_dir())
    if subdirs:
        images, labels = [], []
        for cls, sub in enumerate(subdirs):
            for f in sorted(sub.glob("*.ppm")):
                images.append(imaging.read_ppm(f))
                labels.append(cls)
        if not images:
            raise EmptyDatasetError(f"{path}: no .ppm files in class subdirectories")
        return Dataset(images, np.array(labels, dtype=np.int64),
                       tuple(d.name for d in subdirs))
    files = sorted(root.glob("*.ppm"))
    if not files:
        raise EmptyDatasetError(f"{path}: no .ppm files")
    return Dataset([imaging.read_ppm(f) for f in files])


def make_synthetic_shapes(n: int, size: int, seed: int, classes: int = 4) -> Dataset:
    """n images of one upright glyph each over background noise.

    Labels cycle through the glyph types, so any contiguous slice of the
    dataset is nearly class-balanced.  Deterministic per (seed, index).
    """
    if size < 16:
        raise ValueError("size must be >= 16")
    if not 2 <= classes <= len(GLYPHS):
        raise ValueError(f"classes must be in 2..{len(GLYPHS)}")
    glyphs = [GLYPHS[name] for name in GLYPH_NAMES[:classes]]
    images, labels = [], []
    for i in range(n):
        rng = seeding.substream(seed, seeding.GLYPH, 0, i)
        label = i % classes
        g = glyphs[label]
        img = (rng.random((size, size, 3)) * 0.25).astype(np.float32)
        gh, gw = g.shape
        top = int(rng.integers(0, size - gh + 1))
        left = int(rng.integers(0, size - gw + 1))
        intensity = np.float32(0.75 + 0.25 * rng.random())
        region = img[top : top + gh, left : left + gw]
        region[g] = intensity
        images.append(img)
        labels.append(label)
    return Dataset(images, np.array(labels, dtype=np.int64), GLYPH_NAMES[:classes])
