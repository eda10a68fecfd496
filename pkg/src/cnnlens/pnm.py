"""Portable pixmap I/O (binary P6 for images, P5 for masks) and dataset folders.

Images are exchanged with the rest of the package as float64 arrays of shape
(H, W, 3) with values in [0, 1].  Masks are boolean (H, W) arrays.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import FormatError

__all__ = [
    "read_ppm",
    "write_ppm",
    "read_pgm",
    "write_pgm",
    "load_image_dir",
    "save_image_dir",
]


def _read_header(f, magic: bytes):
    got = f.read(2)
    if got != magic:
        raise FormatError(f"expected {magic!r} header, got {got!r}")
    fields = []
    while len(fields) < 3:
        line = f.readline()
        if not line:
            raise FormatError("truncated pnm header")
        line = line.split(b"#", 1)[0]
        fields.extend(line.split())
    width, height, maxval = (int(v) for v in fields[:3])
    if maxval != 255:
        raise FormatError(f"only maxval 255 supported, got {maxval}")
    return width, height


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 image into an (H, W, 3) float64 array in [0, 1]."""
    with open(path, "rb") as f:
        width, height = _read_header(f, b"P6")
        raw = f.read(width * height * 3)
        if len(raw) != width * height * 3:
            raise FormatError(f"truncated pixel data in {path}")
        data = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3)
    return data.astype(np.float64) / 255.0


def write_ppm(path, image: np.ndarray, comment: str | None = None) -> None:
    """Write an (H, W, 3) float array as binary P6, clipping to [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise FormatError(f"P6 needs an (H, W, 3) array, got {image.shape}")
    data = np.clip(np.rint(np.clip(image, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n")
        if comment:
            f.write(b"# " + comment.encode("ascii", "replace") + b"\n")
        f.write(f"{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 map into a boolean (H, W) array (nonzero -> True)."""
    with open(path, "rb") as f:
        width, height = _read_header(f, b"P5")
        raw = f.read(width * height)
        if len(raw) != width * height:
            raise FormatError(f"truncated pixel data in {path}")
        data = np.frombuffer(raw, dtype=np.uint8).reshape(height, width)
    return data > 0


def write_pgm(path, mask: np.ndarray, comment: str | None = None) -> None:
    """Write a boolean or {0,1} (H, W) array as binary P5 (True -> 255)."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise FormatError(f"P5 needs an (H, W) array, got {mask.shape}")
    data = np.where(mask.astype(bool), 255, 0).astype(np.uint8)
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(b"P5\n")
        if comment:
            f.write(b"# " + comment.encode("ascii", "replace") + b"\n")
        f.write(f"{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def load_image_dir(directory):
    """Load a labeled dataset: P6 files plus a ``labels.txt`` index.

    Each non-comment line of labels.txt is ``<filename> <integer-label>``.
    Returns (images, labels) with images stacked into (N, H, W, 3).
    """
    index = os.path.join(directory, "labels.txt")
    if not os.path.exists(index):
        raise FormatError(f"missing label index {index}")
    names, labels = [], []
    with open(index, "r", encoding="ascii") as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise FormatError(f"bad label line: {line!r}")
            names.append(parts[0])
            labels.append(int(parts[1]))
    if not names:
        raise FormatError(f"empty label index {index}")
    images = [read_ppm(os.path.join(directory, n)) for n in names]
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise FormatError(f"images disagree on shape: {sorted(shapes)}")
    return np.stack(images), np.asarray(labels, dtype=np.int64)


def save_image_dir(directory, images, labels) -> None:
    """Write images as numbered P6 files with a labels.txt index."""
    os.makedirs(directory, exist_ok=True)
    lines = []
    for i, (image, label) in enumerate(zip(images, labels)):
        name = f"img{i:05d}.ppm"
        write_ppm(os.path.join(directory, name), image)
        lines.append(f"{name} {int(label)}")
    with open(os.path.join(directory, "labels.txt"), "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")
