"""CT windowing, splits, synthetic HE-like slices, augmentation, and on-disk layout.

Array container (``.egl``), little-endian::

    offset  size  field
    0       4     magic  b"EGLA"
    4       1     format version (1)
    5       1     dtype tag: b"f" float32, b"h" int16 (raw HU), b"B" uint8
    6       2     reserved, zero
    8       4     uint32 height
    12      4     uint32 width
    16      ...   row-major payload

A dataset directory holds ``manifest.csv`` (id, kind, split, patient,
height, width) and one sub-directory per split with
``<id>_image.egl``, ``<id>_mask.egl`` and 8-bit PNG previews.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

SPLITS = ("train", "val", "test")
KINDS = ("ce", "ae")
GENERATOR_VERSION = 1

MAGIC = b"EGLA"
_VERSION = 1
_TAGS = {b"f": np.dtype("<f4"), b"h": np.dtype("<i2"), b"B": np.dtype("u1")}
_HEADER = struct.Struct("<4sBcxxII")


@dataclass(frozen=True)
class WindowSpec:
    level: float = 35.0
    width: float = 150.0

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError(f"window width must be > 0, got {self.width}")

    @property
    def bounds(self) -> tuple[float, float]:
        return self.level - self.width / 2, self.level + self.width / 2


def window_hu(raw, w: WindowSpec = WindowSpec()):
    """Clamp HU to ``[level - width/2, level + width/2]`` and map linearly onto [0, 1]."""
    lo, hi = w.bounds
    if isinstance(raw, torch.Tensor):
        return (raw.clamp(lo, hi) - lo) / w.width
    return ((np.clip(np.asarray(raw, dtype=np.float64), lo, hi) - lo) / w.width).astype(np.float32)


@dataclass
class Sample:
    image: np.ndarray  # [1, H, W] float32 in [0, 1]
    mask: np.ndarray  # [1, H, W] float32 in {0, 1}
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} differ")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise ValueError("mask must be binary")


# --------------------------------------------------------------------------
# splitting


def split(items, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0, groups=None):
    """Deterministic partition of ``range(items)`` (or ``range(len(items))``) into train/val/test.

    With ``groups`` (e.g. patient ids, one per item) whole groups are assigned,
    so no group spans two splits; ratios then apply to the number of groups.
    """
    n = items if isinstance(items, int) else len(items)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {tuple(ratios)}")
    if groups is None:
        groups = list(range(n))
    if len(groups) != n:
        raise ValueError(f"got {len(groups)} group labels for {n} items")
    units = sorted(set(groups), key=lambda g: (str(type(g)), g))
    order = np.random.default_rng(seed).permutation(len(units))
    n_train = round(ratios[0] * len(units))
    n_val = min(round(ratios[1] * len(units)), len(units) - n_train)
    bucket = {}
    for rank, k in enumerate(order):
        bucket[units[k]] = 0 if rank < n_train else 1 if rank < n_train + n_val else 2
    parts = ([], [], [])
    for i, g in enumerate(groups):
        parts[bucket[g]].append(i)
    return parts


# --------------------------------------------------------------------------
# synthetic slices
#
# Intensities are drawn in HU and windowed, so the generator exercises the
# same preprocessing as real data. Constants are versioned by
# GENERATOR_VERSION; changing any of them invalidates frozen fixtures.

_HU_TISSUE = 30.0
_HU_LIVER = 62.0
_HU_FAT = -90.0
_HU_BONE = 420.0
_HU_NOISE = 6.0
_HU_CE_FLUID = -30.0
_HU_CE_RIM = 95.0
_HU_AE = -25.0
_HU_CALC = 300.0
_AREA_RANGE = (0.01, 0.30)


def _grid(size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy, xx


def _ellipse(yy, xx, cy, cx, ry, rx, theta=0.0):
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v


def _anatomy(rng, size):
    yy, xx = _grid(size)
    hu = np.full((size, size), _HU_TISSUE)
    liver = _ellipse(yy, xx, size * rng.uniform(0.38, 0.48), size * rng.uniform(0.3, 0.4),
                     size * rng.uniform(0.36, 0.44), size * rng.uniform(0.3, 0.38), rng.uniform(-0.4, 0.4)) <= 1
    hu[liver] = _HU_LIVER
    fat = np.abs(xx - size * rng.uniform(0.78, 0.88)) < size * 0.03
    hu[fat & ~liver] = _HU_FAT
    # vertebra: bright ring with a slightly darker core, bottom centre
    cy, cx = size * rng.uniform(0.84, 0.9), size * rng.uniform(0.55, 0.65)
    r = _ellipse(yy, xx, cy, cx, size * 0.08, size * 0.1)
    hu[r <= 1] = _HU_BONE
    hu[r <= 0.35] = _HU_BONE * 0.6
    return hu, liver


def _ce_lesion(rng, size, liver):
    yy, xx = _grid(size)
    ly, lx = np.nonzero(liver)
    k = rng.integers(len(ly))
    ry, rx = size * rng.uniform(0.07, 0.16), size * rng.uniform(0.07, 0.16)
    q = _ellipse(yy, xx, ly[k], lx[k], ry, rx, rng.uniform(0, np.pi))
    mask = q <= 1
    rim = mask & (q >= (1 - 0.9 / min(ry, rx)) ** 2)
    fluid = np.full((size, size), _HU_CE_FLUID) + rng.normal(0, 3, (size, size))
    fluid[rim] = _HU_CE_RIM
    return mask, fluid, 0.0


def _ae_lesion(rng, size, liver):
    yy, xx = _grid(size)
    ly, lx = np.nonzero(liver)
    k = rng.integers(len(ly))
    cy, cx = ly[k], lx[k]
    mask = np.zeros((size, size), bool)
    for _ in range(rng.integers(2, 6)):
        oy, ox = rng.normal(0, size * 0.06, 2)
        mask |= _ellipse(yy, xx, cy + oy, cx + ox, size * rng.uniform(0.04, 0.1),
                         size * rng.uniform(0.04, 0.1), rng.uniform(0, np.pi)) <= 1
    body = np.full((size, size), _HU_AE) + ndimage.gaussian_filter(rng.normal(0, 25, (size, size)), 1.0)
    specks = (rng.random((size, size)) < 0.03) & mask
    body[specks] = _HU_CALC
    return mask, body, rng.uniform(1.0, 2.0)


def _one_sample(rng, size, kind):
    make = _ce_lesion if kind == "ce" else _ae_lesion
    while True:
        hu, liver = _anatomy(rng, size)
        mask, lesion_hu, blur = make(rng, size, liver)
        if _AREA_RANGE[0] <= mask.mean() <= _AREA_RANGE[1]:
            break
    alpha = mask.astype(np.float64)
    if blur > 0:
        alpha = ndimage.gaussian_filter(alpha, blur)
    hu = hu * (1 - alpha) + lesion_hu * alpha
    hu = hu + rng.normal(0, _HU_NOISE, hu.shape)
    return window_hu(hu)[None], mask.astype(np.float32)[None]


def synth_generate(n: int, seed: int = 0, kind: str = "mixed", size: int = 64) -> list[Sample]:
    """``n`` synthetic slices; CE = bounded cysts with bright rims, AE = blurred blob unions.

    Each slice also contains a bright vertebra-like distractor. Fully
    determined by ``(n, seed, kind, size)``.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if kind not in (*KINDS, "mixed"):
        raise ValueError(f"kind must be 'ce', 'ae' or 'mixed', got {kind!r}")
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i, GENERATOR_VERSION])
        k = kind if kind != "mixed" else KINDS[i % 2]
        image, mask = _one_sample(rng, size, k)
        out.append(Sample(image, mask, {"id": f"s{seed}_{i:05d}", "kind": k, "patient": f"p{seed}_{i:05d}"}))
    return out


# --------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    angle: float = 0.0  # degrees
    scale: float = 1.0
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0
    noise_seed: int = 0

    @property
    def is_identity(self) -> bool:
        return self.angle == 0 and self.scale == 1 and self.blur_sigma == 0 and self.noise_sigma == 0


def draw_augment(seed, p: float = 0.5) -> AugmentParams:
    """Each transform fires independently with probability ``p``; otherwise it is neutral."""
    rng = np.random.default_rng(seed)
    fire = rng.random(4) < p
    vals = rng.uniform([-15.0, 0.9, 0.0, 0.0], [15.0, 1.1, 1.0, 0.03])
    return AugmentParams(
        angle=float(vals[0]) if fire[0] else 0.0,
        scale=float(vals[1]) if fire[1] else 1.0,
        blur_sigma=float(vals[2]) if fire[2] else 0.0,
        noise_sigma=float(vals[3]) if fire[3] else 0.0,
        noise_seed=int(rng.integers(2**31)),
    )


def apply_augment(s: Sample, a: AugmentParams) -> Sample:
    image = s.image[0].astype(np.float64)
    mask = s.mask[0]
    if a.angle != 0 or a.scale != 1:
        h, w = image.shape
        t = np.deg2rad(a.angle)
        # output -> input coordinate map about the centre
        m = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]]) / a.scale
        c = np.array([(h - 1) / 2, (w - 1) / 2])
        off = c - m @ c
        image = ndimage.affine_transform(image, m, off, order=1, mode="nearest")
        mask = ndimage.affine_transform(mask, m, off, order=0, mode="constant", cval=0.0)
    if a.blur_sigma > 0:
        image = ndimage.gaussian_filter(image, a.blur_sigma)
    if a.noise_sigma > 0:
        image = image + np.random.default_rng(a.noise_seed).normal(0, a.noise_sigma, image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(image[None], (mask > 0.5).astype(np.float32)[None], dict(s.meta))


def augment(s: Sample, seed) -> Sample:
    """Random rotation (+-15 deg), scale (0.9-1.1), Gaussian blur (sigma <= 1) and noise (sigma <= 0.03)."""
    return apply_augment(s, draw_augment(seed))


# --------------------------------------------------------------------------
# resizing and batching


def fit_to_multiple(arr: np.ndarray, multiple: int = 64, pad_value: float = 0.0) -> np.ndarray:
    """Centre crop/pad the last two axes to the nearest multiple (at least one multiple)."""
    out = arr
    for axis in (-2, -1):
        n = out.shape[axis]
        target = max(multiple, int(round(n / multiple)) * multiple)
        if target < n:
            start = (n - target) // 2
            out = np.take(out, range(start, start + target), axis=axis)
        elif target > n:
            before = (target - n) // 2
            pad = [(0, 0)] * out.ndim
            pad[axis] = (before, target - n - before)
            out = np.pad(out, pad, constant_values=pad_value)
    return out


def pad_to_multiple(arr: np.ndarray, multiple: int = 64) -> tuple[np.ndarray, tuple[slice, slice]]:
    """Pad up (never crop); returns the padded array and the slices recovering the original."""
    h, w = arr.shape[-2:]
    th, tw = -(-h // multiple) * multiple, -(-w // multiple) * multiple
    top, left = (th - h) // 2, (tw - w) // 2
    pad = [(0, 0)] * (arr.ndim - 2) + [(top, th - h - top), (left, tw - w - left)]
    return np.pad(arr, pad, mode="edge"), (slice(top, top + h), slice(left, left + w))


def to_batch(samples: Sequence[Sample]) -> tuple[torch.Tensor, torch.Tensor]:
    dtype = torch.get_default_dtype()
    x = torch.from_numpy(np.stack([s.image for s in samples])).to(dtype)
    y = torch.from_numpy(np.stack([s.mask for s in samples])).to(dtype)
    return x, y


# --------------------------------------------------------------------------
# on-disk format


class FormatError(ValueError):
    pass


def write_array(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"container holds 2D arrays, got shape {arr.shape}")
    for tag, dt in _TAGS.items():
        if arr.dtype == dt or arr.dtype == dt.newbyteorder("="):
            break
    else:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, _VERSION, tag, *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_array(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, tag, h, w = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if tag not in _TAGS:
        raise FormatError(f"{path}: unknown dtype tag {tag!r}")
    dt = _TAGS[tag]
    payload = raw[_HEADER.size:]
    if len(payload) != h * w * dt.itemsize:
        raise FormatError(f"{path}: payload {len(payload)} bytes, expected {h * w * dt.itemsize}")
    return np.frombuffer(payload, dtype=dt).reshape(h, w).copy()


def save_png(path, arr: np.ndarray) -> None:
    """Lossless 8-bit grayscale preview; input in [0, 1]."""
    a = np.asarray(arr, dtype=np.float64).squeeze()
    Image.fromarray(np.round(np.clip(a, 0, 1) * 255).astype(np.uint8), mode="L").save(path, optimize=False)


def load_image(path) -> np.ndarray:
    """Read an ``.egl`` container or an 8-bit image as ``[H, W]`` float32 in [0, 1]."""
    p = Path(path)
    if p.suffix == ".egl":
        a = read_array(p)
        if a.dtype == np.int16:
            return window_hu(a)
        if a.dtype == np.uint8:
            return (a / 255.0).astype(np.float32)
        return a.astype(np.float32)
    with Image.open(p) as im:
        return (np.asarray(im.convert("L"), dtype=np.float64) / 255.0).astype(np.float32)


_MANIFEST_FIELDS = ("id", "kind", "split", "patient", "height", "width")


def save_dataset(root, samples: Sequence[Sample]) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in samples:
        sp = s.meta.get("split", "train")
        d = root / sp
        d.mkdir(exist_ok=True)
        sid = s.meta["id"]
        write_array(d / f"{sid}_image.egl", s.image.astype(np.float32))
        write_array(d / f"{sid}_mask.egl", s.mask.astype(np.uint8))
        save_png(d / f"{sid}_image.png", s.image)
        save_png(d / f"{sid}_mask.png", s.mask)
        rows.append({"id": sid, "kind": s.meta.get("kind", "synthetic"), "split": sp,
                     "patient": s.meta.get("patient", sid), "height": s.image.shape[-2], "width": s.image.shape[-1]})
    with open(root / "manifest.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=_MANIFEST_FIELDS, lineterminator="\n")
        wr.writeheader()
        wr.writerows(rows)
    return root


def read_manifest(root) -> list[dict]:
    path = Path(root) / "manifest.csv"
    if not path.is_file():
        raise FileNotFoundError(f"no manifest.csv under {root}")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def load_dataset(root, split_name: str | None = None, multiple: int = 64) -> list[Sample]:
    root = Path(root)
    out = []
    for row in read_manifest(root):
        if split_name is not None and row["split"] != split_name:
            continue
        d = root / row["split"]
        image = load_image(d / f"{row['id']}_image.egl")
        mask = (read_array(d / f"{row['id']}_mask.egl") > 0).astype(np.float32)
        image = fit_to_multiple(image[None], multiple)
        mask = fit_to_multiple(mask[None], multiple)
        out.append(Sample(image, mask, dict(row)))
    return out


def assign_splits(samples: list[Sample], ratios=(0.8, 0.1, 0.1), seed: int = 0) -> list[Sample]:
    groups = [s.meta.get("patient", s.meta.get("id", i)) for i, s in enumerate(samples)]
    parts = split(len(samples), ratios, seed, groups)
    out = list(samples)
    for name, idx in zip(SPLITS, parts):
        for i in idx:
            out[i] = replace(out[i], meta={**out[i].meta, "split": name})
    return out
