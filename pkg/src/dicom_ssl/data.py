"""Image loading, the synthetic radiograph generator, and two-view augmentation."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DataError

SPLITS = ("train", "val", "test")
MANIFEST_FIELDS = ("id", "path", "label", "split")


@dataclass
class ImageBatch:
    """N grayscale images in [0, 1] with labels (-1 = unlabeled) and ids."""

    images: np.ndarray
    labels: np.ndarray
    ids: list
    masks: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 3 or len(self.images) < 1:
            raise ValueError(f"expected N x H x W with N >= 1, got {self.images.shape}")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = list(self.ids)
        if len(self.labels) != len(self.images) or len(self.ids) != len(self.images):
            raise ValueError("images, labels and ids must have equal length")

    def __len__(self):
        return len(self.images)

    @property
    def shape(self):
        return self.images.shape


@dataclass
class ViewPair:
    view1: ImageBatch
    view2: ImageBatch
    params1: list = field(default_factory=list)
    params2: list = field(default_factory=list)


@dataclass
class ManifestEntry:
    id: str
    path: Path
    label: int
    split: str
    mask: Path | None = None


@dataclass
class DatasetManifest:
    entries: list
    class_names: dict

    def ids(self, split=None):
        return [e.id for e in self.entries if split is None or e.split == split]

    @property
    def n_classes(self):
        return len(self.class_names)


def read_manifest(path) -> DatasetManifest:
    """Parse ``id,path,label,split[,mask]`` CSV; paths resolve against its folder.

    An optional ``classes.json`` beside the manifest maps label -> name.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    root = path.parent
    entries = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [f for f in MANIFEST_FIELDS if f not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: manifest header lacks {missing}")
        for row in reader:
            split = row["split"].strip()
            if split not in SPLITS:
                raise DataError(f"{path}: unknown split {split!r} for id {row['id']}")
            mask = row.get("mask") or None
            entries.append(ManifestEntry(
                id=row["id"], path=root / row["path"], label=int(row["label"]),
                split=split, mask=root / mask if mask else None))
    seen = {}
    for e in entries:
        if e.id in seen:
            raise DataError(f"{path}: id {e.id} listed twice ({seen[e.id]}, {e.split})")
        seen[e.id] = e.split

    classes_file = root / "classes.json"
    if classes_file.is_file():
        class_names = {int(k): v for k, v in json.loads(classes_file.read_text()).items()}
    else:
        class_names = {lab: f"class_{lab}" for lab in sorted({e.label for e in entries if e.label >= 0})}
    unknown = sorted({e.label for e in entries if e.label >= 0} - set(class_names))
    if unknown:
        raise DataError(f"{path}: labels {unknown} missing from the class-name table")
    return DatasetManifest(entries, class_names)


def write_manifest(path, manifest: DatasetManifest):
    path = Path(path)
    root = path.parent
    with_mask = any(e.mask is not None for e in manifest.entries)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(MANIFEST_FIELDS) + (["mask"] if with_mask else []))
        for e in manifest.entries:
            row = [e.id, Path(e.path).relative_to(root).as_posix(), e.label, e.split]
            if with_mask:
                row.append(Path(e.mask).relative_to(root).as_posix() if e.mask else "")
            writer.writerow(row)
    (root / "classes.json").write_text(
        json.dumps({str(k): v for k, v in manifest.class_names.items()}, indent=2))


def _read_gray(path, size, resample):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            im = im.convert("L")
            if im.size != (size[1], size[0]):
                im = im.resize((size[1], size[0]), resample)
            return np.asarray(im, dtype=np.uint8)
    except OSError as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc


class Dataset:
    """In-memory image set backed by a manifest (desk-scale data fits in RAM)."""

    def __init__(self, manifest: DatasetManifest, images, labels, ids, splits, masks=None):
        self.manifest = manifest
        self.images = images
        self.labels = labels
        self.ids = ids
        self.splits = splits
        self.masks = masks

    def __len__(self):
        return len(self.ids)

    @property
    def image_size(self):
        return self.images.shape[1:]

    def split(self, name) -> "Dataset":
        idx = np.array([i for i, s in enumerate(self.splits) if s == name], dtype=np.int64)
        return self.subset(idx)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.manifest, self.images[idx], self.labels[idx],
                       [self.ids[i] for i in idx], [self.splits[i] for i in idx],
                       None if self.masks is None else self.masks[idx])

    def as_batch(self) -> ImageBatch:
        return ImageBatch(self.images, self.labels, self.ids, self.masks)

    def batches(self, batch_size, seed=None, epoch=0, shuffle=True, drop_last=False):
        """Yield ImageBatch objects; order is a pure function of (seed, epoch)."""
        n = len(self)
        if shuffle:
            order = np.random.default_rng([int(seed or 0), int(epoch)]).permutation(n)
        else:
            order = np.arange(n)
        stop = n - n % batch_size if drop_last else n
        for start in range(0, stop, batch_size):
            idx = order[start:start + batch_size]
            if len(idx) == 0:
                break
            yield ImageBatch(self.images[idx], self.labels[idx], [self.ids[i] for i in idx],
                             None if self.masks is None else self.masks[idx])

    def __iter__(self):
        return self.batches(len(self) or 1, shuffle=False)


def load_dataset(manifest_path, target_size, patch_size=None, load_masks=True) -> Dataset:
    """Load every manifest image, resized bilinearly to ``target_size`` and scaled to [0, 1]."""
    h, w = int(target_size[0]), int(target_size[1])
    if patch_size is not None and (h % patch_size or w % patch_size):
        raise ConfigError(f"target size {h}x{w} not divisible by patch size {patch_size}")
    manifest = read_manifest(manifest_path)
    if not manifest.entries:
        raise DataError(f"{manifest_path}: manifest has no entries")
    images = np.stack([_read_gray(e.path, (h, w), Image.BILINEAR)
                       for e in manifest.entries]).astype(np.float32) / 255.0
    masks = None
    if load_masks and all(e.mask is not None for e in manifest.entries):
        masks = np.stack([_read_gray(e.mask, (h, w), Image.NEAREST)
                          for e in manifest.entries]).astype(np.int64)
    return Dataset(manifest, images,
                   np.array([e.label for e in manifest.entries], dtype=np.int64),
                   [e.id for e in manifest.entries],
                   [e.split for e in manifest.entries], masks)


# ---------------------------------------------------------------- synthetic data

SYNTH_CLASS_NAMES = {0: "clear", 1: "blob"}


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def render_synthetic(label, size, rng):
    """One radiograph-like image and its lung mask.

    Two filled ellipses on a noisy background; class 1 adds a diffuse,
    smoothly varying opacity over one whole ellipse, classes >= 2 add the
    opacity plus a class-specific stripe texture inside the lungs.
    """
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = 0.12 + 0.04 * rng.standard_normal((h, w))
    img += 0.08 * (yy / h)
    ry = h * rng.uniform(0.28, 0.34)
    rx = w * rng.uniform(0.13, 0.17)
    cy = h * 0.5 + rng.uniform(-0.04, 0.04) * h
    lungs = []
    for side in (-1, 1):
        cx = w * 0.5 + side * w * rng.uniform(0.19, 0.23)
        lungs.append((cy + rng.uniform(-0.02, 0.02) * h, cx))
    sides = [_ellipse(yy, xx, ly, lx, ry, rx) for ly, lx in lungs]
    mask = sides[0] | sides[1]
    img[mask] += 0.38 + 0.03 * rng.standard_normal()
    if label >= 1:
        # opacity peaks at +0.3 and covers most tokens of the chosen lung
        side = sides[rng.integers(2)]
        field = ndimage.gaussian_filter(rng.standard_normal((h, w)), 0.03 * min(h, w))
        field = (field - field.min()) / max(float(np.ptp(field)), 1e-12)
        img[side] += 0.15 + 0.15 * field[side]
    if label >= 2:
        angle = math.pi * (label - 2) / 4.0 + math.pi / 8.0
        freq = 2.0 * math.pi / (3.0 + (label - 2) % 3)
        phase = rng.uniform(0, 2 * math.pi)
        stripes = 0.12 * np.sin(freq * (yy * math.cos(angle) + xx * math.sin(angle)) + phase)
        img[mask] += stripes[mask]
    return np.clip(img, 0.0, 1.0), mask.astype(np.uint8)


def split_counts(total):
    n_train = math.floor(0.7 * total + 0.5)
    n_val = math.floor(0.15 * total + 0.5)
    return n_train, n_val, total - n_train - n_val


def generate_synthetic(out_dir, n_per_class, classes, size, seed, patch_size=None):
    """Write a balanced synthetic dataset (PNG images, lung masks, manifest).

    Images are interleaved round-robin across classes before the 70/15/15
    split, so every split stays close to balanced.
    """
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    if n_per_class < 7:
        raise ConfigError(f"n_per_class={n_per_class} < 7 would leave an empty split")
    h, w = int(size[0]), int(size[1])
    if patch_size is not None and (h % patch_size or w % patch_size):
        raise ConfigError(f"size {h}x{w} not divisible by patch size {patch_size}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    order = [(c, i) for i in range(n_per_class) for c in range(classes)]
    n_train, n_val, _ = split_counts(len(order))
    entries = []
    for pos, (c, i) in enumerate(order):
        rng = np.random.default_rng([int(seed), c, i])
        img, mask = render_synthetic(c, (h, w), rng)
        sid = f"c{c}_{i:05d}"
        img_path = out / "images" / f"{sid}.png"
        mask_path = out / "masks" / f"{sid}.png"
        Image.fromarray(np.round(img * 255.0).astype(np.uint8), mode="L").save(img_path)
        Image.fromarray(mask, mode="L").save(mask_path)
        split = "train" if pos < n_train else "val" if pos < n_train + n_val else "test"
        entries.append(ManifestEntry(sid, img_path, c, split, mask_path))
    names = {c: SYNTH_CLASS_NAMES.get(c, f"texture_{c}") for c in range(classes)}
    manifest = DatasetManifest(entries, names)
    write_manifest(out / "manifest.csv", manifest)
    return manifest


# ---------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugPolicy:
    crop: bool = True
    crop_scale: tuple = (0.6, 1.0)
    crop_ratio: tuple = (0.75, 4.0 / 3.0)
    rotate: bool = True
    max_rotation: float = 10.0
    jitter: bool = True
    brightness: float = 0.2
    contrast: float = 0.2

    @classmethod
    def identity(cls):
        return cls(crop=False, rotate=False, jitter=False)

    @classmethod
    def crop_only(cls):
        return cls(rotate=False, jitter=False)


@dataclass(frozen=True)
class AugParams:
    """Realized augmentation for one image; crop box in pixels."""

    crop_box: tuple | None = None
    angle: float = 0.0
    brightness: float = 0.0
    contrast: float = 1.0


def sample_aug_params(policy: AugPolicy, size, rng) -> AugParams:
    h, w = size
    box = None
    if policy.crop:
        scale = rng.uniform(*policy.crop_scale)
        ratio = math.exp(rng.uniform(math.log(policy.crop_ratio[0]), math.log(policy.crop_ratio[1])))
        ch = min(float(h), h * math.sqrt(scale / ratio))
        cw = min(float(w), w * math.sqrt(scale * ratio))
        top = rng.uniform(0.0, h - ch)
        left = rng.uniform(0.0, w - cw)
        box = (top, left, ch, cw)
    angle = rng.uniform(-policy.max_rotation, policy.max_rotation) if policy.rotate else 0.0
    brightness, contrast = 0.0, 1.0
    if policy.jitter:
        brightness = rng.uniform(-policy.brightness, policy.brightness)
        contrast = rng.uniform(1.0 - policy.contrast, 1.0 + policy.contrast)
    return AugParams(box, angle, brightness, contrast)


def apply_augmentation(image, params: AugParams):
    """Deterministically apply recorded parameters to one H x W image."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    if params.crop_box is not None or params.angle != 0.0:
        top, left, ch, cw = params.crop_box or (0.0, 0.0, float(h), float(w))
        theta = math.radians(params.angle)
        rot = np.array([[math.cos(theta), -math.sin(theta)],
                        [math.sin(theta), math.cos(theta)]])
        # output index -> input index: rotate about centre, then scale into the crop
        scale = np.diag([ch / h, cw / w])
        matrix = scale @ rot
        out_c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        in_c = np.array([top + (ch - 1) / 2.0, left + (cw - 1) / 2.0])
        offset = in_c - matrix @ out_c
        img = ndimage.affine_transform(img, matrix, offset=offset, order=1, mode="nearest")
    if params.contrast != 1.0 or params.brightness != 0.0:
        mean = img.mean()
        img = (img - mean) * params.contrast + mean + params.brightness
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def augment(batch: ImageBatch, policy: AugPolicy, rng):
    size = batch.images.shape[1:]
    params = [sample_aug_params(policy, size, rng) for _ in range(len(batch))]
    out = np.stack([apply_augmentation(img, p) for img, p in zip(batch.images, params)])
    return ImageBatch(out, batch.labels.copy(), list(batch.ids)), params


def two_views(batch: ImageBatch, policy: AugPolicy, rng) -> ViewPair:
    """Two independently augmented copies of ``batch`` with ids preserved."""
    v1, p1 = augment(batch, policy, rng)
    v2, p2 = augment(batch, policy, rng)
    return ViewPair(v1, v2, p1, p2)
