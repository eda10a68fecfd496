"""Natural-patch databases, normalized-patch matching, and patch warps.

Patches are compared after per-channel standardization against the *whole
image* they came from, which factors out global color shifts and rescalings:
``normalize(a * I + b) == normalize(I)`` for any per-channel a > 0.  Stored
patches are kept in this normalized space; matching is exact squared-L2
nearest neighbor with ties broken by lowest entry index.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ValidationError
from .net import NetworkSpec, forward, receptive_field_unclipped

__all__ = [
    "image_stats",
    "normalize_patch",
    "normalize_image",
    "patch_grid",
    "PatchDatabase",
    "NearestNeighborField",
    "build_database",
    "build_class_database",
    "subset_database",
    "default_patch_size",
    "match",
    "feature_neighbors",
    "warp_visualization",
    "retrieval_init",
    "save_database",
    "load_database",
]

STD_FLOOR = 1e-6

# stored patches keep roughly the middle third of a unit's receptive field
DEFAULT_CENTER_FRACTION = 67.0 / 195.0


def image_stats(image):
    """Per-channel (mean, std) of a whole image; std floored at 1e-6."""
    image = np.asarray(image, dtype=np.float64)
    mean = image.mean(axis=(0, 1))
    std = image.std(axis=(0, 1))
    clamped = bool(np.any(std < STD_FLOOR))
    return mean, np.maximum(std, STD_FLOOR), clamped


def normalize_patch(patch, image_mean, image_std):
    """Standardize a patch by whole-image per-channel statistics."""
    std = np.maximum(np.asarray(image_std, dtype=np.float64), STD_FLOOR)
    return (np.asarray(patch, dtype=np.float64) - image_mean) / std


def normalize_image(image):
    """Whole image in normalized-patch space, plus the stats used."""
    mean, std, _ = image_stats(image)
    return (np.asarray(image, dtype=np.float64) - mean) / std, mean, std


def patch_grid(height, width, patch_size, stride):
    """Top-left positions of a dense patch grid covering the image.

    Regular stride grid, with the far edge appended when the stride does
    not land on it exactly, so the last row/column of pixels is covered.
    """
    if patch_size > height or patch_size > width:
        raise ValidationError(f"patch size {patch_size} exceeds image {height}x{width}")
    if stride <= 0:
        raise ValidationError("stride must be positive")
    rows = list(range(0, height - patch_size + 1, stride))
    cols = list(range(0, width - patch_size + 1, stride))
    if rows[-1] != height - patch_size:
        rows.append(height - patch_size)
    if cols[-1] != width - patch_size:
        cols.append(width - patch_size)
    return np.array([(r, c) for r in rows for c in cols], dtype=np.int64)


@dataclass(frozen=True)
class PatchDatabase:
    """Bank of normalized patches, optionally paired with pool features."""

    patches: np.ndarray            # (N, ps, ps, C), already normalized
    features: np.ndarray | None    # (N, F) unit-normalized, or None
    provenance: np.ndarray         # (N, 3): image id, patch row, patch col
    patch_size: int

    def __post_init__(self):
        if len(self.patches) == 0:
            raise ValidationError("patch database cannot be empty")
        if self.features is not None and len(self.features) != len(self.patches):
            raise ValidationError("features and patches disagree on length")

    def __len__(self):
        return len(self.patches)

    @property
    def feature_dim(self):
        return None if self.features is None else self.features.shape[1]

    @property
    def flat_patches(self):
        return self.patches.reshape(len(self.patches), -1)


@dataclass(frozen=True)
class NearestNeighborField:
    """Matched database entries for each patch position of an image."""

    positions: np.ndarray   # (L, 2) top-left corners
    indices: np.ndarray     # (L,) or (L, k) entries into the database
    distances: np.ndarray   # same shape as indices, squared L2
    patch_size: int


def default_patch_size(spec: NetworkSpec) -> int:
    """Center-crop size derived from the last-pool receptive field."""
    pool = spec.last_pool_index
    if pool is None:
        raise ValidationError("network has no pool layer")
    gh, gw, _ = spec.output_shape(pool)
    rect = receptive_field_unclipped(spec, pool, (gh // 2, gw // 2))
    return max(int(round(rect[2] * DEFAULT_CENTER_FRACTION)), 2)


def _center_crop_start(center, patch_size, limit):
    start = int(round(center - patch_size / 2.0))
    return min(max(start, 0), limit - patch_size)


def build_database(images, weights, spec, patch_size=None, capacity=None, seed=0):
    """Pair every last-pool feature with the normalized center crop of its
    receptive field, optionally subsampling to ``capacity`` entries.

    Feature vectors are L2-normalized so matching is cosine-like and robust
    to per-image magnitude differences.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or len(images) == 0:
        raise ValidationError("need a non-empty (N, H, W, C) image stack")
    pool = spec.last_pool_index
    if pool is None:
        raise ValidationError("network has no pool layer")
    if patch_size is None:
        patch_size = default_patch_size(spec)
    h, w = spec.input_shape[:2]
    if patch_size > min(h, w):
        raise ValidationError("patch size exceeds the image")
    gh, gw, _ = spec.output_shape(pool)

    feats, patches, prov = [], [], []
    for img_id, image in enumerate(images):
        pooled = forward(weights, spec, image).pool_out
        mean, std, _ = image_stats(image)
        for r in range(gh):
            for c in range(gw):
                rect = receptive_field_unclipped(spec, pool, (r, c))
                cr = rect[0] + rect[2] / 2.0
                cc = rect[1] + rect[3] / 2.0
                r0 = _center_crop_start(cr, patch_size, h)
                c0 = _center_crop_start(cc, patch_size, w)
                crop = image[r0 : r0 + patch_size, c0 : c0 + patch_size]
                patches.append(normalize_patch(crop, mean, std))
                feats.append(pooled[r, c, :].ravel())
                prov.append((img_id, r0, c0))
    feats = np.asarray(feats)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    feats = feats / np.maximum(norms, 1e-12)
    patches = np.asarray(patches)
    prov = np.asarray(prov, dtype=np.int64)

    if capacity is not None and capacity < len(patches):
        if capacity <= 0:
            raise ValidationError("capacity must be positive")
        keep = np.sort(np.random.default_rng(seed).choice(len(patches), capacity, replace=False))
        feats, patches, prov = feats[keep], patches[keep], prov[keep]
    return PatchDatabase(patches, feats, prov, patch_size)


def build_class_database(images, patch_size, stride, capacity=None, seed=0):
    """Densely sampled normalized patches from a set of same-class images."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or len(images) == 0:
        raise ValidationError("need a non-empty (N, H, W, C) image stack")
    h, w = images.shape[1:3]
    grid = patch_grid(h, w, patch_size, stride)
    patches, prov = [], []
    for img_id, image in enumerate(images):
        mean, std, _ = image_stats(image)
        for r, c in grid:
            crop = image[r : r + patch_size, c : c + patch_size]
            patches.append(normalize_patch(crop, mean, std))
            prov.append((img_id, r, c))
    patches = np.asarray(patches)
    prov = np.asarray(prov, dtype=np.int64)
    if capacity is not None and capacity < len(patches):
        keep = np.sort(np.random.default_rng(seed).choice(len(patches), capacity, replace=False))
        patches, prov = patches[keep], prov[keep]
    return PatchDatabase(patches, None, prov, patch_size)


def subset_database(db: PatchDatabase, indices) -> PatchDatabase:
    indices = np.asarray(indices, dtype=np.int64).ravel()
    feats = None if db.features is None else db.features[indices]
    return PatchDatabase(db.patches[indices], feats, db.provenance[indices], db.patch_size)


def match(db: PatchDatabase, estimate, stride=None) -> NearestNeighborField:
    """Exact nearest normalized-patch for every grid position of ``estimate``.

    Distances are squared L2 in normalized-patch space; when several entries
    tie, the lowest index wins.  Computation is blocked over database entries
    but returns exactly what an entry-by-entry scan would.
    """
    estimate = np.asarray(estimate, dtype=np.float64)
    ps = db.patch_size
    if stride is None:
        stride = max(ps // 2, 1)
    h, w = estimate.shape[:2]
    positions = patch_grid(h, w, ps, stride)
    mean, std, _ = image_stats(estimate)
    normalized = (estimate - mean) / std
    queries = np.stack(
        [normalized[r : r + ps, c : c + ps].ravel() for r, c in positions]
    )
    flat = db.flat_patches
    best_d = np.full(len(queries), np.inf)
    best_i = np.zeros(len(queries), dtype=np.int64)
    # keep the (queries x block x dim) difference buffer around 32 MB
    block = max(1, 2**22 // max(1, queries.shape[1] * len(queries)))
    for start in range(0, len(flat), block):
        chunk = flat[start : start + block]
        d = ((queries[:, None, :] - chunk[None, :, :]) ** 2).sum(axis=2)
        i = d.argmin(axis=1)
        dmin = np.take_along_axis(d, i[:, None], axis=1)[:, 0]
        upd = dmin < best_d  # strict: earlier blocks keep ties
        best_d[upd] = dmin[upd]
        best_i[upd] = i[upd] + start
    return NearestNeighborField(positions, best_i, best_d, ps)


def feature_neighbors(db: PatchDatabase, feature_map, k) -> tuple:
    """k nearest database entries per pool-grid location, by feature.

    ``feature_map`` is the (gh, gw, C) pooled tensor of the query; vectors
    are unit-normalized before squared-L2 comparison, matching how the
    database stores them.  Returns (indices, distances) of shape (gh, gw, k).
    """
    if db.features is None:
        raise ValidationError("database has no feature vectors")
    fm = np.asarray(feature_map, dtype=np.float64)
    gh, gw = fm.shape[:2]
    q = fm.reshape(gh * gw, -1)
    q = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
    d = ((q[:, None, :] - db.features[None, :, :]) ** 2).sum(axis=2)
    k = min(k, d.shape[1])
    idx = np.argsort(d, axis=1, kind="stable")[:, :k]
    dist = np.take_along_axis(d, idx, axis=1)
    return idx.reshape(gh, gw, k), dist.reshape(gh, gw, k)


def _accumulate(accum, count, patch, r, c):
    ps = patch.shape[0]
    accum[r : r + ps, c : c + ps] += patch
    count[r : r + ps, c : c + ps] += 1.0


def warp_visualization(field: NearestNeighborField, db: PatchDatabase,
                       output_shape, image_mean=None, image_std=None):
    """Overlap-average the matched patches into an image.

    Each matched (normalized) patch is stamped at its query position and
    overlaps are averaged; the result is mapped back to pixel space with the
    target image's statistics when given, otherwise left normalized.
    """
    h, w = output_shape[:2]
    c = db.patches.shape[3]
    accum = np.zeros((h, w, c))
    count = np.zeros((h, w, 1))
    idx = np.atleast_2d(field.indices.T).T  # (L,) -> (L, 1)
    for (r, cpos), row in zip(field.positions, idx):
        for entry in row:
            _accumulate(accum, count, db.patches[int(entry)], int(r), int(cpos))
    out = np.divide(accum, count, out=np.zeros_like(accum), where=count > 0)
    if image_mean is not None:
        out = out * np.maximum(np.asarray(image_std, dtype=np.float64), STD_FLOOR) + image_mean
    return out


def retrieval_init(db: PatchDatabase, feature_map, spec: NetworkSpec, k=10):
    """Initial image built from feature-matched patches.

    Stamps the mean of each pool location's k nearest patches over the
    location's receptive-field center crop, overlap-averaged.  The result
    lives in normalized(-patch) space; uncovered pixels stay at zero.
    """
    pool = spec.last_pool_index
    h, w = spec.input_shape[:2]
    ps = db.patch_size
    idx, _ = feature_neighbors(db, feature_map, k)
    gh, gw = idx.shape[:2]
    accum = np.zeros((h, w, spec.input_shape[2]))
    count = np.zeros((h, w, 1))
    for r in range(gh):
        for c in range(gw):
            rect = receptive_field_unclipped(spec, pool, (r, c))
            r0 = _center_crop_start(rect[0] + rect[2] / 2.0, ps, h)
            c0 = _center_crop_start(rect[1] + rect[3] / 2.0, ps, w)
            patch = db.patches[idx[r, c]].mean(axis=0)
            _accumulate(accum, count, patch, r0, c0)
    return np.divide(accum, count, out=np.zeros_like(accum), where=count > 0)


# ---------------------------------------------------------------------------
# serialization (magic "NPPD", version 1, little-endian)

DB_MAGIC = b"NPPD"
DB_VERSION = 1


def save_database(path, db: PatchDatabase) -> None:
    header = {
        "count": len(db),
        "patch_size": db.patch_size,
        "channels": int(db.patches.shape[3]),
        "feature_dim": db.feature_dim,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(DB_MAGIC)
        f.write(DB_VERSION.to_bytes(2, "little"))
        f.write(len(blob).to_bytes(4, "little"))
        f.write(blob)
        if db.features is not None:
            f.write(np.ascontiguousarray(db.features, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(db.patches, dtype="<f8").tobytes())
        prov = db.provenance
        packed = np.zeros((len(db), 2), dtype="<u4")
        packed[:, 0] = prov[:, 0]
        packed[:, 1] = (prov[:, 1].astype(np.uint32) << 16) | prov[:, 2].astype(np.uint32)
        f.write(packed.tobytes())


def load_database(path) -> PatchDatabase:
    with open(path, "rb") as f:
        data = f.read()
    buf = io.BytesIO(data)
    magic = buf.read(4)
    if magic != DB_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DB_MAGIC!r}")
    version = int.from_bytes(buf.read(2), "little")
    if version != DB_VERSION:
        raise FormatError(f"unsupported patch database version {version}")
    hlen = int.from_bytes(buf.read(4), "little")
    blob = buf.read(hlen)
    if len(blob) != hlen:
        raise FormatError("truncated header")
    try:
        header = json.loads(blob.decode("utf-8"))
        n, ps, ch = header["count"], header["patch_size"], header["channels"]
        fd = header["feature_dim"]
    except Exception as exc:
        raise FormatError(f"corrupt header: {exc}") from exc

    def read_array(shape):
        nbytes = int(np.prod(shape)) * 8
        raw = buf.read(nbytes)
        if len(raw) != nbytes:
            raise FormatError("truncated patch database")
        return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

    features = read_array((n, fd)) if fd else None
    patches = read_array((n, ps, ps, ch))
    raw = buf.read(n * 8)
    if len(raw) != n * 8:
        raise FormatError("truncated provenance block")
    packed = np.frombuffer(raw, dtype="<u4").reshape(n, 2)
    prov = np.stack(
        [packed[:, 0], packed[:, 1] >> 16, packed[:, 1] & 0xFFFF], axis=1
    ).astype(np.int64)
    if buf.read(1):
        raise FormatError("trailing bytes in patch database")
    return PatchDatabase(patches, features, prov, ps)
