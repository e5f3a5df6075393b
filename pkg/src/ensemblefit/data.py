"""Image datasets: ingestion, label grouping, splits, synthetic generation, augmentation."""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".pgm"}


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (H, W, C)
    raw_label: str
    label: int = 0
    path: str | None = None
    confusable: bool = False
    pair: int | None = None  # index of the near-identical partner, if any

    def __post_init__(self):
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[:, :, None]
        if self.pixels.ndim != 3 or min(self.pixels.shape) < 1:
            raise ValueError(f"image must be a nonempty H x W x C array, got shape {self.pixels.shape}")


@dataclass
class Dataset:
    items: list[LabeledImage]
    skipped: int = 0
    unmatched: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.items)

    @property
    def class_counts(self) -> dict[int, int]:
        return dict(Counter(item.label for item in self.items))

    @property
    def labels(self) -> np.ndarray:
        return np.array([item.label for item in self.items], dtype=np.int64)

    def subset(self, indices: Iterable[int]) -> Dataset:
        return Dataset([self.items[i] for i in indices])


# -- ingestion ----------------------------------------------------------------------


def read_image(path) -> np.ndarray:
    """Read a PNG or binary PGM as an (H, W, C) uint8 array (C is 1 or 3)."""
    with Image.open(path) as img:
        img.load()
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB")
        arr = np.asarray(img, dtype=np.uint8)
    return arr[:, :, None] if arr.ndim == 2 else arr


def write_pgm(path, pixels: np.ndarray) -> None:
    """Write a 2-D uint8 array as binary PGM (P5)."""
    arr = np.asarray(pixels)
    if arr.ndim == 3:
        arr = arr[:, :, 0]
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def ingest(root, defect_labels: Iterable[str] = ("defect",)) -> Dataset:
    """Load ``root/<raw_label>/*.{png,pgm}``; unreadable files are skipped and counted."""
    root = Path(root)
    subdirs = sorted(p for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    if not subdirs:
        raise ValueError(f"no label subdirectories under {root}")
    defect_labels = set(defect_labels)
    items, skipped = [], 0
    for sub in subdirs:
        for path in sorted(sub.iterdir()):
            if path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                pixels = read_image(path)
            except (UnidentifiedImageError, OSError, ValueError) as exc:
                log.warning("skipping unreadable image %s: %s", path, exc)
                skipped += 1
                continue
            items.append(LabeledImage(pixels, sub.name, int(sub.name in defect_labels), str(path)))
    ds = Dataset(items, skipped=skipped)
    log.info("ingested %d images from %s (%d skipped), counts %s", len(items), root, skipped, ds.class_counts)
    return ds


def group_labels(dataset: Dataset, prefix_rules: Mapping[str, str] | Sequence[tuple[str, str]]) -> Dataset:
    """Replace raw labels by the parent class of their longest matching prefix.

    Unmatched labels are kept as-is and listed in ``result.unmatched``.
    """
    pairs = list(prefix_rules.items()) if isinstance(prefix_rules, Mapping) else list(prefix_rules)
    rules: dict[str, str] = {}
    for prefix, parent in pairs:
        if prefix in rules and rules[prefix] != parent:
            raise ValueError(f"ambiguous rule: prefix {prefix!r} maps to both {rules[prefix]!r} and {parent!r}")
        rules[prefix] = parent
    by_length = sorted(rules, key=len, reverse=True)

    items, unmatched = [], set()
    for item in dataset.items:
        match = next((p for p in by_length if item.raw_label.startswith(p)), None)
        if match is None:
            unmatched.add(item.raw_label)
            items.append(item)
        else:
            items.append(replace(item, raw_label=rules[match]))
    if unmatched:
        log.info("%d raw labels matched no rule", len(unmatched))
    return Dataset(items, dataset.skipped, sorted(unmatched))


def to_binary(dataset: Dataset, defect_classes: Iterable[str], normal_classes: Iterable[str] | None = None) -> Dataset:
    """Label 1 for items whose class is in ``defect_classes``, else 0.

    When ``normal_classes`` is given every class must be declared in one of the two sets.
    """
    defect = set(defect_classes)
    if normal_classes is not None:
        declared = defect | set(normal_classes)
        undeclared = sorted({it.raw_label for it in dataset.items} - declared)
        if undeclared:
            raise ValueError(f"classes declared neither defect nor normal: {undeclared}")
    items = [replace(it, label=int(it.raw_label in defect)) for it in dataset.items]
    return Dataset(items, dataset.skipped, list(dataset.unmatched))


# -- splitting -----------------------------------------------------------------------


def split_indices(labels: Sequence[int], ratios=(0.6, 0.2, 0.2), seed: int = 0) -> tuple[np.ndarray, ...]:
    """Stratified train/val/test index split.

    Per label, val and test get ``floor(n * ratio)`` items and train the remainder.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three nonnegative numbers summing to 1, got {ratios}")
    labels = np.asarray(labels)
    nonzero = sum(r > 0 for r in ratios)
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[], [], []]
    for label in np.unique(labels):
        idx = np.flatnonzero(labels == label)
        n = idx.size
        if n < nonzero:
            raise ValueError(f"label {label} has {n} items, fewer than the {nonzero} nonempty parts")
        idx = idx[rng.permutation(n)]
        n_val = math.floor(n * ratios[1] + 1e-9)
        n_test = math.floor(n * ratios[2] + 1e-9)
        n_train = n - n_val - n_test
        parts[0].extend(idx[:n_train])
        parts[1].extend(idx[n_train : n_train + n_val])
        parts[2].extend(idx[n_train + n_val :])
    return tuple(np.array(sorted(p), dtype=np.int64) for p in parts)


def split(dataset: Dataset, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    train, val, test = split_indices(dataset.labels, ratios, seed)
    return dataset.subset(train), dataset.subset(val), dataset.subset(test)


# -- preprocessing -------------------------------------------------------------------


def resize_bilinear(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an (H, W, C) array with corner pixels aligned."""
    out_h, out_w = size
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must have positive area, got {size}")
    h, w = img.shape[:2]
    img = img.astype(np.float64)
    if (h, w) == (out_h, out_w):
        return img.copy()

    def coords(n_in, n_out):
        if n_out == 1:
            src = np.array([(n_in - 1) / 2.0])
        else:
            src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.clip(np.floor(src).astype(int), 0, n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = coords(h, out_h)
    x0, x1, fx = coords(w, out_w)
    fy, fx = fy[:, None, None], fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def preprocess(image, target_size: tuple[int, int] = (224, 224), rescale: float | None = None) -> np.ndarray:
    """Resize to ``target_size``, rescale into [0, 1] and return a (C, H, W) array.

    ``rescale`` defaults to 1/255 for integer images and 1 for float images.
    """
    img = np.asarray(image.pixels if isinstance(image, LabeledImage) else image)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.size == 0:
        raise ValueError("empty image")
    if rescale is None:
        rescale = 1.0 / 255.0 if np.issubdtype(img.dtype, np.integer) else 1.0
    out = resize_bilinear(img, tuple(target_size)) * rescale
    return np.clip(out, 0.0, 1.0).transpose(2, 0, 1).copy()


def to_arrays(dataset: Dataset, target_size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Stack a dataset into ``X`` of shape (N, C, H, W) and float labels ``y`` of shape (N, 1)."""
    if not dataset.items:
        raise ValueError("empty dataset")
    X = np.stack([preprocess(item, target_size) for item in dataset.items])
    y = dataset.labels.astype(np.float64)[:, None]
    return X, y


# -- augmentation --------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentPipeline:
    target_size: tuple[int, int] = (32, 32)
    rescale: float = 1.0 / 255.0
    flip_h: bool = True
    flip_v: bool = True
    rotation_factor: float = 0.2  # fraction of a full turn
    zoom_factor: float = 0.2
    fill_mode: str = "constant"  # or "reflect"/"nearest" (scipy.ndimage modes)
    interpolation: str = "bilinear"  # or "nearest"
    seed: int = 0

    def __post_init__(self):
        if self.interpolation not in ("bilinear", "nearest"):
            raise ValueError(f"unsupported interpolation {self.interpolation!r}")
        if self.fill_mode not in ("constant", "reflect", "nearest", "mirror"):
            raise ValueError(f"unsupported fill_mode {self.fill_mode!r}")
        if self.rotation_factor < 0 or self.zoom_factor < 0:
            raise ValueError("rotation_factor and zoom_factor must be >= 0")
        if self.zoom_factor >= 1:
            raise ValueError("zoom_factor must be < 1")

    def item_rng(self, epoch: int, index: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, epoch, index])


def draw_transform(pipeline: AugmentPipeline, draw: np.random.Generator) -> tuple[bool, bool, float, float]:
    """(flip_h, flip_v, angle in radians, zoom scale) for one image."""
    flip_h = bool(pipeline.flip_h and draw.random() < 0.5)
    flip_v = bool(pipeline.flip_v and draw.random() < 0.5)
    angle = draw.uniform(-1.0, 1.0) * pipeline.rotation_factor * 2 * math.pi if pipeline.rotation_factor else 0.0
    scale = draw.uniform(1 - pipeline.zoom_factor, 1 + pipeline.zoom_factor) if pipeline.zoom_factor else 1.0
    return flip_h, flip_v, angle, scale


def augment(image: np.ndarray, pipeline: AugmentPipeline, draw: np.random.Generator) -> np.ndarray:
    """Random flips, rotation and zoom of a (C, H, W) image in [0, 1].

    Pixels that rotation or zoom pull in from outside the frame follow ``pipeline.fill_mode``
    (0 under the default "constant").
    """
    img = np.asarray(image, dtype=np.float64)
    if img.shape[1:] != tuple(pipeline.target_size):
        img = preprocess(img.transpose(1, 2, 0), pipeline.target_size, rescale=1.0)
    flip_h, flip_v, angle, scale = draw_transform(pipeline, draw)
    if flip_h:
        img = img[:, :, ::-1]
    if flip_v:
        img = img[:, ::-1, :]
    if angle == 0.0 and scale == 1.0:
        return np.ascontiguousarray(img)
    order = 1 if pipeline.interpolation == "bilinear" else 0
    return np.clip(rotate_zoom(img, angle, scale, pipeline.fill_mode, order), 0.0, 1.0)


def rotate_zoom(img: np.ndarray, angle: float, scale: float, fill_mode: str = "constant",
                order: int = 1) -> np.ndarray:
    """Rotate by ``angle`` radians and magnify by ``scale`` about the image centre."""
    _, h, w = img.shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    c, s = math.cos(angle), math.sin(angle)
    # maps output (row, col) to input (row, col)
    matrix = np.array([[c, s], [-s, c]]) / scale
    offset = center - matrix @ center
    return np.stack([
        ndimage.affine_transform(ch, matrix, offset=offset, order=order, mode=fill_mode, cval=0.0)
        for ch in img
    ])


def augment_batch(X: np.ndarray, pipeline: AugmentPipeline, epoch: int, indices: Sequence[int]) -> np.ndarray:
    """Augment each row of ``X`` with a substream keyed by (seed, epoch, dataset index)."""
    return np.stack([augment(x, pipeline, pipeline.item_rng(epoch, int(i))) for x, i in zip(X, indices)])


# -- synthetic data ------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    image_size: tuple[int, int] = (32, 32)
    n_normal: int = 200
    n_defect: int = 200
    confusable_fraction: float = 0.0
    background: tuple[float, float] = (0.45, 0.7)
    noise_std: float = 0.05
    rivets: tuple[int, int] = (1, 3)
    stroke_length: tuple[float, float] = (10.0, 18.0)  # pixels at 32x32, scaled with image size
    stroke_thickness: float = 1.5
    crack_depth: tuple[float, float] = (0.25, 0.4)
    confusable_depth: tuple[float, float] = (0.005, 0.02)
    seed: int = 0

    def __post_init__(self):
        if self.n_normal <= 0 or self.n_defect <= 0:
            raise ValueError("n_normal and n_defect must be positive")
        if min(self.image_size) < 16:
            raise ValueError("image_size must be at least 16 x 16")
        if not 0 <= self.confusable_fraction <= 1:
            raise ValueError("confusable_fraction must lie in [0, 1]")


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed, *key])


def _texture(cfg: SyntheticConfig, rng: np.random.Generator, rivets=True) -> np.ndarray:
    h, w = cfg.image_size
    noise = ndimage.gaussian_filter(rng.normal(size=(h, w)), sigma=1.0, mode="wrap")
    noise *= cfg.noise_std / max(noise.std(), 1e-12)
    img = rng.uniform(*cfg.background) + noise
    if rivets:
        yy, xx = np.mgrid[0:h, 0:w]
        scale = min(h, w) / 32.0
        for _ in range(rng.integers(cfg.rivets[0], cfg.rivets[1] + 1)):
            cy, cx = rng.uniform(3, h - 3), rng.uniform(3, w - 3)
            r = rng.uniform(1.5, 3.0) * scale
            img = img + rng.uniform(0.15, 0.3) * (((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r)
    return np.clip(img, 0.0, 1.0)


def stroke_mask(shape, points: np.ndarray, thickness: float) -> np.ndarray:
    """Pixels within ``thickness / 2`` of the polyline through ``points`` (row, col)."""
    h, w = shape
    pix = np.stack(np.mgrid[0:h, 0:w], axis=-1).reshape(-1, 2).astype(np.float64)
    dist = np.full(pix.shape[0], np.inf)
    for a, b in zip(points[:-1], points[1:]):
        ab = b - a
        t = np.clip(((pix - a) @ ab) / max(ab @ ab, 1e-12), 0.0, 1.0)
        dist = np.minimum(dist, np.linalg.norm(pix - (a + t[:, None] * ab), axis=1))
    return (dist <= thickness / 2.0).reshape(h, w)


def _crack_points(cfg: SyntheticConfig, rng: np.random.Generator, segments=(2, 4), jitter=math.pi / 6) -> np.ndarray:
    h, w = cfg.image_size
    scale = min(h, w) / 32.0
    length = rng.uniform(*cfg.stroke_length) * scale
    n_seg = int(rng.integers(segments[0], segments[1] + 1))
    pts = [np.array([rng.uniform(0.25 * h, 0.75 * h), rng.uniform(0.25 * w, 0.75 * w)])]
    heading = rng.uniform(0, 2 * math.pi)
    for _ in range(n_seg):
        heading += rng.uniform(-jitter, jitter)
        step = length / n_seg * np.array([math.sin(heading), math.cos(heading)])
        pts.append(np.clip(pts[-1] + step, 1, [h - 2, w - 2]))
    return np.array(pts)


def synthetic_item(cfg: SyntheticConfig, base_index: int, crack_index: int | None = None,
                   confusable: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Render one image; returns (image, base texture, crack mask)."""
    base = _texture(cfg, _stream(cfg.seed, 0, base_index))
    mask = np.zeros(cfg.image_size, dtype=bool)
    if crack_index is None:
        return base, base, mask
    rng = _stream(cfg.seed, 1, crack_index)
    mask = stroke_mask(cfg.image_size, _crack_points(cfg, rng), cfg.stroke_thickness)
    depth = rng.uniform(*(cfg.confusable_depth if confusable else cfg.crack_depth))
    return np.clip(base - depth * mask, 0.0, 1.0), base, mask


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Normal textures followed by defect textures carrying a dark crack.

    A ``confusable_fraction`` of defects reuse the texture of a normal item and carry
    a crack only slightly darker than the background, forming near-identical pairs.
    """
    n_conf = round(cfg.confusable_fraction * cfg.n_defect)
    pick = _stream(cfg.seed, 2)
    conf_defects = sorted(pick.choice(cfg.n_defect, size=n_conf, replace=False).tolist())
    normals = pick.permutation(cfg.n_normal)
    partner_of = {d: int(normals[k % cfg.n_normal]) for k, d in enumerate(conf_defects)}

    items: list[LabeledImage] = []
    for j in range(cfg.n_normal):
        img, _, _ = synthetic_item(cfg, j)
        items.append(LabeledImage(img[:, :, None], "normal", 0))
    for d in range(cfg.n_defect):
        partner = partner_of.get(d)
        if partner is None:
            img, _, _ = synthetic_item(cfg, cfg.n_normal + d, d)
        else:
            img, _, _ = synthetic_item(cfg, partner, d, confusable=True)
            items[partner].confusable = True
            items[partner].pair = cfg.n_normal + d
        items.append(LabeledImage(img[:, :, None], "defect", 1, confusable=partner is not None, pair=partner))
    return Dataset(items)


def generate_source_task(n_per_class: int, image_size=(32, 32), seed: int = 0) -> Dataset:
    """Pretraining task: textures with straight dark scratches (label 1) or without (label 0).

    Both classes carry dark spots as distractors. Textures are rivet-free and noisier
    than the defect task, so the two domains differ while sharing line-like structure.
    """
    cfg = SyntheticConfig(image_size=tuple(image_size), noise_std=0.07, background=(0.35, 0.75),
                          stroke_length=(8.0, 22.0), seed=seed)
    h, w = cfg.image_size
    yy, xx = np.mgrid[0:h, 0:w]
    items = []
    for i in range(2 * n_per_class):
        rng = _stream(seed, 3, i)
        img = _texture(cfg, rng, rivets=False)
        for _ in range(rng.integers(0, 4)):
            cy, cx = rng.uniform(3, h - 3), rng.uniform(3, w - 3)
            r = rng.uniform(1.0, 2.5) * min(h, w) / 32.0
            img = img - rng.uniform(0.2, 0.4) * (((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r)
        label = i % 2
        if label:
            for _ in range(rng.integers(1, 3)):
                pts = _crack_points(cfg, rng, segments=(1, 1), jitter=0.0)
                img = img - rng.uniform(0.2, 0.4) * stroke_mask(cfg.image_size, pts, rng.uniform(1.0, 2.0))
        items.append(LabeledImage(np.clip(img, 0.0, 1.0)[:, :, None], "scratch" if label else "plain", label))
    return Dataset(items)


# -- manifests -----------------------------------------------------------------------

MANIFEST_COLUMNS = ("path", "raw_label", "label", "confusable")


def write_dataset(dataset: Dataset, out_dir) -> Path:
    """Save images as PGM under ``out_dir/images`` plus ``out_dir/manifest.csv``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    with manifest.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for i, item in enumerate(dataset.items):
            rel = f"images/{i:05d}_{item.raw_label}.pgm"
            px = item.pixels[:, :, 0]
            if not np.issubdtype(px.dtype, np.integer):
                px = np.rint(np.clip(px, 0, 1) * 255)
            write_pgm(out_dir / rel, px)
            writer.writerow([rel, item.raw_label, item.label, int(item.confusable)])
    return manifest


def read_manifest(path) -> Dataset:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.csv"
    items = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"manifest {path} lacks columns {sorted(missing)}")
        for row in reader:
            img_path = path.parent / row["path"]
            items.append(LabeledImage(read_image(img_path), row["raw_label"], int(row["label"]),
                                      str(img_path), bool(int(row["confusable"]))))
    return Dataset(items)
