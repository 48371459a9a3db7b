"""MNIST IDX ingestion, affine warping, and the translation/affine dataset generators.

Dataset cache layout (little-endian)::

    offset  size  field
    0       4     magic b"DPND"
    4       2     version (u16, currently 1)
    6       4     sample count N (u32)
    10      ...   N records: label (u8) + 784 float32 pixels, row-major 28x28

Each cache may have a sidecar CSV (``<cache>.params.csv``) with header
``index,rotation,shear,sx,sy,tx,ty`` holding the affine parameters that
produced every sample.
"""
from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .tensor import DTYPE, Rng

IDX_UBYTE_1D = 0x00000801
IDX_UBYTE_3D = 0x00000803
_IDX_RANK = {IDX_UBYTE_1D: 1, IDX_UBYTE_3D: 3}

CACHE_MAGIC = b"DPND"
CACHE_VERSION = 1
PARAM_FIELDS = ("rotation", "shear", "sx", "sy", "tx", "ty")

# default affNIST-style ranges; these are configuration, not measured values
DEFAULT_AFFINE_RANGES = {
    "rotation": (-20.0, 20.0),
    "shear": (-0.2, 0.2),
    "scale": (0.8, 1.2),
    "translate": (-6.0, 6.0),
}


class IdxFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class IdxFile:
    magic: int
    dims: tuple
    payload: np.ndarray  # uint8, shaped by dims


def parse_idx(data: bytes) -> IdxFile:
    """Decode an unsigned-byte IDX file (magic 0x801 or 0x803)."""
    if len(data) < 4:
        raise IdxFormatError("truncated header: missing magic", len(data))
    magic = struct.unpack(">I", data[:4])[0]
    if magic not in _IDX_RANK:
        raise IdxFormatError(f"bad magic 0x{magic:08x}", 0)
    rank = _IDX_RANK[magic]
    header = 4 + 4 * rank
    if len(data) < header:
        raise IdxFormatError(f"truncated header: expected {rank} dimensions", len(data))
    dims = struct.unpack(f">{rank}I", data[4:header])
    size = math.prod(dims)
    have = len(data) - header
    if have != size:
        raise IdxFormatError(f"payload has {have} bytes, dimensions {dims} need {size}",
                             header + min(have, size))
    payload = np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)
    return IdxFile(magic, tuple(dims), payload)


def serialize_idx(idx: IdxFile) -> bytes:
    rank = _IDX_RANK[idx.magic]
    if len(idx.dims) != rank:
        raise ValueError(f"magic 0x{idx.magic:08x} needs {rank} dims, got {idx.dims}")
    head = struct.pack(f">I{rank}I", idx.magic, *idx.dims)
    return head + np.ascontiguousarray(idx.payload, dtype=np.uint8).tobytes()


def read_idx(path) -> IdxFile:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return parse_idx(raw)


_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        p = directory / name
        if p.exists():
            return p
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_mnist(directory, split: str = "train", limit: Optional[int] = None):
    """Images as float64 ``[N, 1, 28, 28]`` in [0, 1] and uint8 labels ``[N]``."""
    directory = Path(directory)
    img_name, lab_name = _MNIST_FILES[split]
    images = read_idx(_find(directory, img_name))
    labels = read_idx(_find(directory, lab_name))
    if images.magic != IDX_UBYTE_3D or labels.magic != IDX_UBYTE_1D:
        raise IdxFormatError("image/label files have the wrong IDX kinds", 0)
    if images.dims[0] != labels.dims[0]:
        raise IdxFormatError(f"{images.dims[0]} images but {labels.dims[0]} labels", 4)
    x = images.payload[:limit].astype(DTYPE)[:, None] / 255.0
    return x, labels.payload[:limit].copy()


# ---------------------------------------------------------------------------
# affine warping

@dataclass
class AffineParams:
    rotation: float = 0.0  # degrees, counter-clockwise on screen
    shear: float = 0.0
    sx: float = 1.0
    sy: float = 1.0
    tx: float = 0.0  # pixels, +x is right
    ty: float = 0.0  # pixels, +y is down

    def linear(self) -> np.ndarray:
        """2x2 linear part: rotation @ shear @ scale, acting on (x, y)."""
        th = math.radians(self.rotation)
        c, s = math.cos(th), math.sin(th)
        rot = np.array([[c, s], [-s, c]])
        shear = np.array([[1.0, self.shear], [0.0, 1.0]])
        scale = np.array([[self.sx, 0.0], [0.0, self.sy]])
        return rot @ shear @ scale

    def matrix(self, shape) -> np.ndarray:
        """2x3 forward map about the image center, in (x, y) pixel coordinates."""
        h, w = shape
        a = self.linear()
        center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
        t = center + np.array([self.tx, self.ty]) - a @ center
        return np.hstack([a, t[:, None]])

    def as_row(self) -> list:
        return [getattr(self, f) for f in PARAM_FIELDS]


def affine_warp(image, params: AffineParams) -> np.ndarray:
    """Inverse-map every output pixel and sample the input bilinearly (zero fill)."""
    img = np.asarray(image, dtype=DTYPE)
    squeeze = img.ndim == 3
    if squeeze:
        img = img[0]
    if img.ndim != 2:
        raise ValueError(f"expected [H, W] or [1, H, W], got {np.shape(image)}")
    h, w = img.shape
    a = params.linear()
    det = a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
    if abs(det) <= 1e-6:
        raise ValueError(f"affine parameters are not invertible (det={det:.3g})")
    inv = np.array([[a[1, 1], -a[0, 1]], [-a[1, 0], a[0, 0]]]) / det
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    ys, xs = np.mgrid[0:h, 0:w].astype(DTYPE)
    dx = xs - cx - params.tx
    dy = ys - cy - params.ty
    src_x = inv[0, 0] * dx + inv[0, 1] * dy + cx
    src_y = inv[1, 0] * dx + inv[1, 1] * dy + cy
    x0 = np.floor(src_x).astype(np.int64)
    y0 = np.floor(src_y).astype(np.int64)
    fx = src_x - x0
    fy = src_y - y0
    padded = np.pad(img, 1)

    def tap(yy, xx):
        inside = (yy >= -1) & (yy <= h) & (xx >= -1) & (xx <= w)
        vals = padded[np.clip(yy + 1, 0, h + 1), np.clip(xx + 1, 0, w + 1)]
        return np.where(inside, vals, 0.0)

    out = ((1 - fy) * ((1 - fx) * tap(y0, x0) + fx * tap(y0, x0 + 1))
           + fy * ((1 - fx) * tap(y0 + 1, x0) + fx * tap(y0 + 1, x0 + 1)))
    # convex combination of inputs and zeros: clip only rounding overshoot
    out = np.clip(out, min(0.0, img.min()), max(0.0, img.max()))
    return out[None] if squeeze else out


def ink_bbox(image, threshold: float = 0.0):
    """(top, bottom, left, right) of pixels above ``threshold``, or None if blank."""
    img = np.asarray(image)
    img = img[0] if img.ndim == 3 else img
    rows = np.flatnonzero((img > threshold).any(axis=1))
    cols = np.flatnonzero((img > threshold).any(axis=0))
    if rows.size == 0:
        return None
    return int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])


def shift_image(image, dx: int, dy: int) -> np.ndarray:
    """Exact integer translation with zero fill (+dx right, +dy down)."""
    img = np.asarray(image, dtype=DTYPE)
    out = np.zeros_like(img)
    h, w = img.shape[-2:]
    src_y = slice(max(0, -dy), min(h, h - dy))
    dst_y = slice(max(0, dy), min(h, h + dy))
    src_x = slice(max(0, -dx), min(w, w - dx))
    dst_x = slice(max(0, dx), min(w, w + dx))
    out[..., dst_y, dst_x] = img[..., src_y, src_x]
    return out


# ---------------------------------------------------------------------------
# datasets

@dataclass
class Dataset:
    images: np.ndarray  # [N, 1, 28, 28] float64 in [0, 1]
    labels: np.ndarray  # [N] ints
    params: Optional[list] = None  # per-sample AffineParams
    seed: Optional[int] = None
    ranges: dict = field(default_factory=dict)
    num_classes: int = 10

    def __post_init__(self):
        self.labels = np.asarray(self.labels).astype(np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n],
                       None if self.params is None else self.params[:n],
                       self.seed, dict(self.ranges), self.num_classes)


def sample_rng(seed: int, epoch: int, index: int) -> Rng:
    return Rng(seed, epoch, index)


def make_translation_trainset(images, labels, max_shift: Optional[int] = None,
                              seed: int = 0, epoch: int = 0) -> Dataset:
    """Shift each image by a random integer offset that keeps its ink in frame.

    Offsets are uniform over ``[-max_shift, max_shift]^2`` intersected with the
    range allowed by the digit's ink bounding box; ``None`` means the bounding
    box alone limits the shift.
    """
    images = np.asarray(images, dtype=DTYPE)
    out = np.empty_like(images)
    params = []
    h, w = images.shape[-2:]
    limit = max(h, w) if max_shift is None else int(max_shift)
    for i, img in enumerate(images):
        box = ink_bbox(img)
        if box is None or limit == 0:
            dx = dy = 0
        else:
            top, bottom, left, right = box
            rng = sample_rng(seed, epoch, i)
            dx = int(rng.integers(max(-limit, -left), min(limit, w - 1 - right)))
            dy = int(rng.integers(max(-limit, -top), min(limit, h - 1 - bottom)))
        out[i] = shift_image(img, dx, dy)
        params.append(AffineParams(tx=float(dx), ty=float(dy)))
    return Dataset(out, labels, params, seed, {"translate": (-float(limit), float(limit))})


def make_affine_testset(images, labels, ranges: Optional[dict] = None, seed: int = 0,
                        epoch: int = 0) -> Dataset:
    """Random rotation, shear, per-axis scale and in-frame translation per image.

    ``ranges`` maps ``rotation`` (degrees), ``shear``, ``scale`` (shared by both
    axes, drawn independently) and ``translate`` (pixels) to ``(low, high)``.
    The translation is further narrowed so the warped ink bounding box stays
    inside the frame.
    """
    rg = dict(DEFAULT_AFFINE_RANGES)
    if ranges:
        rg.update(ranges)
    images = np.asarray(images, dtype=DTYPE)
    h, w = images.shape[-2:]
    out = np.empty_like(images)
    params = []
    for i, img in enumerate(images):
        rng = sample_rng(seed, epoch, i)
        draws = rng.uniform(0.0, 1.0, 6)

        def pick(key, u):
            lo, hi = rg[key]
            return lo + (hi - lo) * u if hi > lo else float(lo)

        p = AffineParams(rotation=pick("rotation", draws[0]), shear=pick("shear", draws[1]),
                         sx=pick("scale", draws[2]), sy=pick("scale", draws[3]))
        box = ink_bbox(img)
        t_lo, t_hi = rg["translate"]
        if box is not None and t_hi > t_lo:
            top, bottom, left, right = box
            m = p.matrix((h, w))
            corners = np.array([[left, top], [right, top], [left, bottom], [right, bottom]], DTYPE)
            moved = corners @ m[:, :2].T + m[:, 2]
            lo_x, hi_x = max(t_lo, -moved[:, 0].min()), min(t_hi, w - 1 - moved[:, 0].max())
            lo_y, hi_y = max(t_lo, -moved[:, 1].min()), min(t_hi, h - 1 - moved[:, 1].max())
            p.tx = lo_x + (hi_x - lo_x) * draws[4] if hi_x > lo_x else 0.0
            p.ty = lo_y + (hi_y - lo_y) * draws[5] if hi_y > lo_y else 0.0
        elif t_hi == t_lo:
            p.tx = p.ty = float(t_lo)
        out[i] = affine_warp(img, p)
        params.append(p)
    ranges_out = {"rotation": rg["rotation"], "shear": rg["shear"], "sx": rg["scale"],
                  "sy": rg["scale"], "tx": rg["translate"], "ty": rg["translate"]}
    return Dataset(out, labels, params, seed, ranges_out)


# ---------------------------------------------------------------------------
# cache files

def save_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    n = len(ds)
    if ds.images.shape[1:] != (1, 28, 28):
        raise ValueError(f"cache format stores 28x28 images, got {ds.images.shape[1:]}")
    rec = np.zeros(n, dtype=[("label", "u1"), ("pixels", "<f4", (784,))])
    rec["label"] = ds.labels
    rec["pixels"] = ds.images.reshape(n, 784)
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC + struct.pack("<HI", CACHE_VERSION, n))
        f.write(rec.tobytes())
    if ds.params is not None:
        with open(params_path(path), "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(("index",) + PARAM_FIELDS)
            for i, p in enumerate(ds.params):
                wr.writerow([i] + [repr(float(v)) for v in p.as_row()])
    return path


def params_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".params.csv")


def load_dataset(path) -> Dataset:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise IdxFormatError("not a dataset cache (bad magic)", 0)
    if len(raw) < 10:
        raise IdxFormatError("truncated cache header", len(raw))
    version, n = struct.unpack("<HI", raw[4:10])
    if version != CACHE_VERSION:
        raise IdxFormatError(f"unsupported cache version {version}", 4)
    rec_dtype = np.dtype([("label", "u1"), ("pixels", "<f4", (784,))])
    need = 10 + n * rec_dtype.itemsize
    if len(raw) != need:
        raise IdxFormatError(f"cache holds {len(raw)} bytes, header promises {need}", min(len(raw), need))
    rec = np.frombuffer(raw, dtype=rec_dtype, offset=10, count=n)
    images = rec["pixels"].astype(DTYPE).reshape(n, 1, 28, 28)
    params = None
    side = params_path(path)
    if side.exists():
        with open(side, newline="") as f:
            rows = list(csv.DictReader(f))
        params = [AffineParams(**{k: float(r[k]) for k in PARAM_FIELDS}) for r in rows]
    return Dataset(images, rec["label"].astype(np.int64), params)


def params_table(params) -> dict:
    """Per-field arrays from a list of AffineParams."""
    return {f: np.array([getattr(p, f) for p in params], dtype=DTYPE) for f in PARAM_FIELDS}

