"""Synthetic multi-domain image benchmark: five glyph categories (disk,
square, triangle, cross, ring) shared across four domains that differ only
in rendering style. The glyph geometry is the domain-invariant signal; the
styles supply the shift for leave-one-domain-out evaluation.

Everything is deterministic given the seed (per-sample child generators).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

CLASS_NAMES = ("disk", "square", "triangle", "cross", "ring")


@dataclass(frozen=True)
class DomainSpec:
    name: str
    fg_mode: str  # solid | outline | textured | gradient
    fg_palette: tuple  # candidate foreground RGB triples
    bg_palette: tuple  # candidate background RGB triples
    bg_mode: str  # flat | gradient | stripes
    noise: float
    # Probability that the foreground color is the class-aligned palette entry
    # (class_id mod palette size) instead of a uniform draw. Color is then a
    # strong within-domain shortcut that does not survive the palette change
    # across domains, so transferable models must rely on glyph shape.
    color_by_class: float = 0.9


def default_domain_specs() -> tuple[DomainSpec, ...]:
    return (
        DomainSpec("poster", "solid",
                   fg_palette=((0.85, 0.2, 0.15), (0.9, 0.55, 0.1), (0.75, 0.15, 0.5),
                               (0.5, 0.2, 0.7), (0.55, 0.35, 0.15)),
                   bg_palette=((0.92, 0.9, 0.82), (0.85, 0.9, 0.95)),
                   bg_mode="flat", noise=0.02),
        DomainSpec("sketch", "outline",
                   fg_palette=((0.1, 0.1, 0.12), (0.3, 0.25, 0.2), (0.12, 0.2, 0.35),
                               (0.3, 0.12, 0.12), (0.12, 0.28, 0.15)),
                   bg_palette=((0.96, 0.95, 0.92), (0.9, 0.9, 0.9)),
                   bg_mode="flat", noise=0.06),
        DomainSpec("fabric", "textured",
                   fg_palette=((0.2, 0.55, 0.25), (0.15, 0.35, 0.65), (0.6, 0.45, 0.15),
                               (0.2, 0.5, 0.5), (0.5, 0.2, 0.25)),
                   bg_palette=((0.55, 0.5, 0.45), (0.45, 0.5, 0.55)),
                   bg_mode="stripes", noise=0.04),
        DomainSpec("neon", "gradient",
                   fg_palette=((0.2, 0.95, 0.9), (0.95, 0.3, 0.95), (0.95, 0.9, 0.2),
                               (0.3, 0.95, 0.35), (0.95, 0.55, 0.2)),
                   bg_palette=((0.28, 0.28, 0.38), (0.35, 0.25, 0.35)),
                   bg_mode="gradient", noise=0.05),
    )


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _glyph_mask(class_id: int, side: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of the glyph with randomized position/scale/rotation."""
    ax = np.linspace(-1.0, 1.0, side)
    yy, xx = np.meshgrid(ax, ax, indexing="ij")
    cx, cy = rng.uniform(-0.22, 0.22, size=2)
    r = rng.uniform(0.32, 0.5)
    theta = rng.uniform(0.0, 2 * np.pi)
    xr = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    yr = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    if class_id == 0:  # disk
        return xr ** 2 + yr ** 2 <= r ** 2
    if class_id == 1:  # square
        return np.maximum(np.abs(xr), np.abs(yr)) <= r * 0.85
    if class_id == 2:  # triangle
        return (yr > -0.75 * r) & (np.abs(xr) < (r - yr) * 0.55)
    if class_id == 3:  # cross
        arm = r * 0.3
        return ((np.abs(xr) <= arm) & (np.abs(yr) <= r)) | \
               ((np.abs(yr) <= arm) & (np.abs(xr) <= r))
    if class_id == 4:  # ring
        d2 = xr ** 2 + yr ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(f"unknown class id {class_id}")


def _erode(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    out[1:, :] &= mask[:-1, :]
    out[:-1, :] &= mask[1:, :]
    out[:, 1:] &= mask[:, :-1]
    out[:, :-1] &= mask[:, 1:]
    return out


def _background(spec: DomainSpec, side: int, rng: np.random.Generator) -> np.ndarray:
    base = np.array(spec.bg_palette[rng.integers(len(spec.bg_palette))])
    img = np.broadcast_to(base[:, None, None], (3, side, side)).copy()
    if spec.bg_mode == "gradient":
        ramp = np.linspace(0.0, rng.uniform(0.1, 0.25), side)
        img += ramp[None, :, None]
    elif spec.bg_mode == "stripes":
        period = int(rng.integers(3, 6))
        phase = int(rng.integers(period))
        stripe = ((np.arange(side) + phase) // period % 2).astype(float)
        img += 0.12 * stripe[None, None, :]
    return img


def render_sample(class_id: int, spec: DomainSpec, side: int,
                  rng: np.random.Generator) -> np.ndarray:
    """One styled glyph image, (3, side, side) float32 in [0, 1]."""
    img = _background(spec, side, rng)
    mask = _glyph_mask(class_id, side, rng)
    if rng.random() < spec.color_by_class:
        color_idx = class_id % len(spec.fg_palette)
    else:
        color_idx = int(rng.integers(len(spec.fg_palette)))
    color = np.array(spec.fg_palette[color_idx])
    if spec.fg_mode == "solid":
        fill = np.broadcast_to(color[:, None, None], img.shape)
    elif spec.fg_mode == "outline":
        mask = mask & ~_erode(_erode(mask))
        fill = np.broadcast_to(color[:, None, None], img.shape)
    elif spec.fg_mode == "textured":
        period = int(rng.integers(2, 4))
        tex = ((np.arange(side)[:, None] + np.arange(side)[None, :]) // period % 2)
        fill = color[:, None, None] * (0.7 + 0.3 * tex[None, :, :])
    elif spec.fg_mode == "gradient":
        ramp = np.linspace(0.4, 1.0, side)
        fill = color[:, None, None] * ramp[None, None, :]
    else:
        raise ValueError(f"unknown fg_mode {spec.fg_mode!r}")
    img = np.where(mask[None, :, :], fill, img)
    img += rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------


@dataclass
class Split:
    images: np.ndarray  # (N, 3, S, S) float32
    labels: np.ndarray  # (N,) int64

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Dataset:
    image_side: int
    num_classes: int
    domain_names: tuple[str, ...]
    train: list[Split]  # one per domain
    test: list[Split]

    @property
    def num_domains(self) -> int:
        return len(self.domain_names)


def _make_split(spec: DomainSpec, n: int, num_classes: int, side: int,
                rng: np.random.Generator) -> Split:
    labels = np.arange(n, dtype=np.int64) % num_classes
    children = rng.spawn(n)
    images = np.stack([render_sample(int(labels[i]), spec, side, children[i])
                       for i in range(n)])
    return Split(images=images, labels=labels)


def synth_dataset(per_domain_train: int, per_domain_test: int, seed: int,
                  image_side: int = 30, num_classes: int = 5,
                  specs: tuple[DomainSpec, ...] | None = None) -> Dataset:
    if per_domain_train <= 0 or per_domain_test <= 0:
        raise ValueError("per-domain counts must be positive")
    if specs is None:
        specs = default_domain_specs()
    root = np.random.default_rng(seed)
    train, test = [], []
    for spec in specs:
        d_rng = root.spawn(1)[0]
        train.append(_make_split(spec, per_domain_train, num_classes, image_side, d_rng))
        test.append(_make_split(spec, per_domain_test, num_classes, image_side, d_rng))
    return Dataset(image_side=image_side, num_classes=num_classes,
                   domain_names=tuple(s.name for s in specs), train=train, test=test)


# ---------------------------------------------------------------------------
# Augmentation: flip, random crop (scale 0.8-1.0, nearest-neighbor resize),
# additive brightness jitter; output stays in [0, 1].
# ---------------------------------------------------------------------------


def augment(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    _, s, _ = img.shape
    out = img
    if rng.random() < 0.5:
        out = out[:, :, ::-1]
    scale = rng.uniform(0.8, 1.0)
    crop = max(1, int(round(s * scale)))
    if crop < s:
        oy = int(rng.integers(s - crop + 1))
        ox = int(rng.integers(s - crop + 1))
        patch = out[:, oy:oy + crop, ox:ox + crop]
        idx = np.floor(np.arange(s) * crop / s).astype(np.int64)
        out = patch[:, idx][:, :, idx]
    out = out + rng.uniform(-0.1, 0.1)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def augment_batch(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    children = rng.spawn(len(images))
    return np.stack([augment(img, r) for img, r in zip(images, children)])


# ---------------------------------------------------------------------------
# Dump/load. Header: magic "EISD", u32 version, u32 side, u32 classes,
# u32 domain count; per domain: u16 name length + utf-8 name; then per domain
# two splits (train, test): u32 count, raw <f4 images, u8 labels.
# ---------------------------------------------------------------------------

DATASET_MAGIC = b"EISD"
DATASET_VERSION = 1


def save_dataset(path, ds: Dataset) -> None:
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<IIII", DATASET_VERSION, ds.image_side,
                            ds.num_classes, ds.num_domains))
        for name in ds.domain_names:
            enc = name.encode("utf-8")
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
        for d in range(ds.num_domains):
            for split in (ds.train[d], ds.test[d]):
                f.write(struct.pack("<I", len(split)))
                f.write(np.ascontiguousarray(split.images, dtype="<f4").tobytes())
                f.write(split.labels.astype(np.uint8).tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        if f.read(4) != DATASET_MAGIC:
            raise ValueError(f"{path}: not a dataset file")
        version, side, classes, n_dom = struct.unpack("<IIII", f.read(16))
        if version != DATASET_VERSION:
            raise ValueError(f"{path}: unsupported dataset version {version}")
        names = []
        for _ in range(n_dom):
            (nlen,) = struct.unpack("<H", f.read(2))
            names.append(f.read(nlen).decode("utf-8"))
        train, test = [], []
        for _ in range(n_dom):
            for splits in (train, test):
                (n,) = struct.unpack("<I", f.read(4))
                images = np.frombuffer(f.read(4 * n * 3 * side * side), dtype="<f4") \
                    .reshape(n, 3, side, side).copy()
                labels = np.frombuffer(f.read(n), dtype=np.uint8).astype(np.int64)
                splits.append(Split(images=images, labels=labels))
        return Dataset(image_side=side, num_classes=classes,
                       domain_names=tuple(names), train=train, test=test)
