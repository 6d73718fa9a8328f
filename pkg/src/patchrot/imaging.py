"""Image primitives: quarter-turn rotation, bilinear resize, patch pasting,
and binary PPM I/O.

An image is a numpy array of shape (H, W, C) with C in {1, 3}, dtype
float32, values in [0, 1], channel-interleaved per pixel.  All operations
are pure: inputs are never modified.

Conventions fixed here and relied on everywhere else:
  - rotate90 turns counter-clockwise; source pixel (r, c) lands at
    (W-1-c, r) for a single quarter turn.
  - bilinear_resize uses half-pixel centers, s = (d + 0.5) * in/out - 0.5,
    clamped to [0, in-1].
"""

import re

import numpy as np

from .errors import (
    ChannelMismatchError,
    MalformedHeaderError,
    OutOfBoundsError,
    TruncatedPayloadError,
    UnsupportedMaxvalError,
)


def check_image(img: np.ndarray) -> np.ndarray:
    """Validate the image contract; returns the array unchanged."""
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W, C) with C in {{1, 3}}, got {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("empty image")
    if img.dtype != np.float32:
        raise ValueError(f"expected float32 pixels, got {img.dtype}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("pixel values outside [0, 1]")
    return img


def rotate90(img: np.ndarray, k: int) -> np.ndarray:
    """Rotate by k counter-clockwise quarter turns (k in 0..3).

    Lossless pixel permutation; k=0 returns a copy.  H and W swap when k
    is odd.
    """
    k = int(k)
    if not 0 <= k <= 3:
        raise ValueError(f"quarter-turn count must be in 0..3, got {k}")
    if k == 0:
        return img.copy()
    return np.ascontiguousarray(np.rot90(img, k))


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize with bilinear interpolation (half-pixel centers, edge clamp).

    Each output pixel is a convex blend of its 4 source neighbours, per
    channel, so values stay inside the input range.  Resizing to the input
    size reproduces it exactly.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("output dims must be >= 1")
    h, w, _ = img.shape
    sy = np.clip((np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    sx = np.clip((np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (sy - y0)[:, None, None]
    wx = (sx - x0)[None, :, None]
    src = img.astype(np.float64)
    out = (
        (1.0 - wy) * (1.0 - wx) * src[y0[:, None], x0[None, :]]
        + (1.0 - wy) * wx * src[y0[:, None], x1[None, :]]
        + wy * (1.0 - wx) * src[y1[:, None], x0[None, :]]
        + wy * wx * src[y1[:, None], x1[None, :]]
    )
    return out.astype(np.float32)


def paste(background: np.ndarray, patch: np.ndarray, top: int, left: int) -> np.ndarray:
    """Return background with the patch rectangle replaced by patch.

    The patch must fit entirely inside the background.  Pixels outside the
    rectangle are bit-identical to the background.
    """
    bh, bw, bc = background.shape
    ph, pw, pc = patch.shape
    if pc != bc:
        raise ChannelMismatchError(f"background has {bc} channels, patch has {pc}")
    if top < 0 or left < 0 or top + ph > bh or left + pw > bw:
        raise OutOfBoundsError(
            f"{ph}x{pw} patch at ({top},{left}) does not fit in {bh}x{bw} background"
        )
    out = background.copy()
    out[top : top + ph, left : left + pw] = patch
    return out


_PPM_HEADER = re.compile(rb"^P(\S+)\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 PPM (maxval 255) into a float32 image, v -> v/255."""
    with open(path, "rb") as fh:
        raw = fh.read()
    m = _PPM_HEADER.match(raw)
    if m is None or m.group(1) != b"6":
        raise MalformedHeaderError(f"{path}: not a binary P6 PPM")
    w, h, maxval = int(m.group(2)), int(m.group(3)), int(m.group(4))
    if w < 1 or h < 1:
        raise MalformedHeaderError(f"{path}: degenerate dimensions {w}x{h}")
    if maxval != 255:
        raise UnsupportedMaxvalError(f"{path}: maxval {maxval} unsupported (need 255)")
    payload = raw[m.end() : m.end() + 3 * w * h]
    if len(payload) < 3 * w * h:
        raise TruncatedPayloadError(
            f"{path}: payload has {len(payload)} bytes, header promises {3 * w * h}"
        )
    data = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return (data.astype(np.float32) / 255.0).copy()


def write_ppm(img: np.ndarray, path) -> None:
    """Write a 3-channel image as binary P6, header exactly "P6\\n<w> <h>\\n255\\n"."""
    h, w, c = img.shape
    if c != 3:
        raise ChannelMismatchError(f"PPM output needs 3 channels, got {c}")
    payload = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(payload.tobytes())
