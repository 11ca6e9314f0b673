"""
Dataset manifests, splits, image I/O, augmentation and toy data.

A dataset on disk is a directory with ``real/`` and ``fake/`` subdirectories
of PNG or JPEG files (label 0 and 1 respectively). Images are held in memory
as ``float64`` arrays of shape ``H x W x 3`` with values in ``[0, 1]``.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from skimage import color, filters, transform

from siaa.errors import DatasetError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
CLASS_DIRS = {"real": 0, "fake": 1}
MANIFEST_VERSION = 1


def require_both_classes(labels):
    present = set(np.unique(np.asarray(labels)).tolist())
    if present != {0, 1}:
        raise DatasetError(f"dataset must contain both labels 0 and 1, found {sorted(present)}")


# ---------------------------------------------------------------- image I/O


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def to_uint8(image) -> np.ndarray:
    """Round-to-nearest 8-bit quantization of a ``[0, 1]`` image."""
    return np.rint(np.clip(np.asarray(image, dtype=np.float64), 0, 1) * 255).astype(np.uint8)


def write_png(path, image):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def resize(image, size) -> np.ndarray:
    if tuple(image.shape[:2]) == tuple(size):
        return image
    out = transform.resize(image, tuple(size) + (3,), order=1, mode="reflect", anti_aliasing=True)
    return np.clip(out, 0, 1)


@dataclass
class ImageSet:
    images: np.ndarray
    labels: np.ndarray
    ids: list

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = list(self.ids)
        if not (len(self.images) == len(self.labels) == len(self.ids)):
            raise ValueError("images, labels and ids must have equal length")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return ImageSet(self.images[idx], self.labels[idx], [self.ids[i] for i in idx])


# ---------------------------------------------------------------- manifests


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int
    source: str = ""


@dataclass(frozen=True)
class DatasetManifest:
    root: str
    entries: tuple
    splits: dict = field(default_factory=dict)
    seed: int | None = None
    skipped: int = 0

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.label not in (0, 1):
                raise DatasetError(f"{e.path}: label must be 0 or 1")
            if e.path in seen:
                raise DatasetError(f"duplicate entry {e.path}")
            seen.add(e.path)

    def __len__(self):
        return len(self.entries)

    def split(self, name) -> list:
        return [e for e in self.entries if self.splits.get(e.path) == name]

    def by_label(self, label, split=None) -> list:
        pool = self.entries if split is None else self.split(split)
        return [e for e in pool if e.label == label]


def load_dataset(root) -> DatasetManifest:
    """Enumerate ``root/real`` and ``root/fake`` in lexicographic order.

    Files that cannot be decoded are skipped and counted in ``skipped``.
    """
    root = Path(root)
    entries, skipped = [], 0
    for sub, label in CLASS_DIRS.items():
        d = root / sub
        if not d.is_dir():
            raise DatasetError(f"missing subdirectory {d}")
        for p in sorted(d.iterdir()):
            if p.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                with Image.open(p) as im:
                    im.verify()
            except (UnidentifiedImageError, OSError):
                skipped += 1
                continue
            entries.append(ManifestEntry(p.relative_to(root).as_posix(), label, sub))
    if skipped:
        log.warning("skipped %d unreadable files under %s", skipped, root)
    if not entries:
        raise DatasetError(f"no images found under {root}")
    return DatasetManifest(str(root), tuple(entries), skipped=skipped)


def make_splits(manifest: DatasetManifest, train_per_class: int, val_per_class: int,
                seed: int = 0) -> DatasetManifest:
    """Seeded per-class shuffle, then ``train`` / ``val`` / remaining ``test``."""
    rng = np.random.default_rng(seed)
    splits = {}
    for label in (0, 1):
        pool = manifest.by_label(label)
        if len(pool) < train_per_class + val_per_class:
            raise DatasetError(f"class {label} has {len(pool)} entries, "
                               f"need {train_per_class + val_per_class}")
        order = rng.permutation(len(pool))
        for rank, i in enumerate(order):
            if rank < train_per_class:
                splits[pool[i].path] = "train"
            elif rank < train_per_class + val_per_class:
                splits[pool[i].path] = "val"
            else:
                splits[pool[i].path] = "test"
    return replace(manifest, splits=splits, seed=seed)


def few_shot_subset(manifest: DatasetManifest, n_per_class: int, seed: int = 0) -> DatasetManifest:
    """Keep ``n_per_class`` training entries per class; the rest become ``unused``."""
    rng = np.random.default_rng(seed)
    splits = dict(manifest.splits)
    for label in (0, 1):
        pool = manifest.by_label(label, split="train")
        if n_per_class > len(pool):
            raise DatasetError(f"class {label} has {len(pool)} training entries, need {n_per_class}")
        keep = set(rng.choice(len(pool), size=n_per_class, replace=False).tolist())
        for i, e in enumerate(pool):
            if i not in keep:
                splits[e.path] = "unused"
    return replace(manifest, splits=splits)


def save_manifest(path, manifest: DatasetManifest):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(f"# siaa-manifest version={MANIFEST_VERSION} seed={manifest.seed} root={manifest.root}\n")
        w = csv.writer(f)
        w.writerow(["path", "label", "source", "split"])
        for e in manifest.entries:
            w.writerow([e.path, e.label, e.source, manifest.splits.get(e.path, "")])


def load_manifest(path) -> DatasetManifest:
    with open(path, newline="") as f:
        header = f.readline().rstrip("\n").split(" ", 4)
        if header[:2] != ["#", "siaa-manifest"]:
            raise DatasetError(f"{path} is not a manifest file")
        fields = dict(item.split("=", 1) for item in header[2:])
        if int(fields["version"]) != MANIFEST_VERSION:
            raise DatasetError(f"unsupported manifest version {fields['version']}")
        rows = list(csv.DictReader(f))
    entries = tuple(ManifestEntry(r["path"], int(r["label"]), r["source"]) for r in rows)
    splits = {r["path"]: r["split"] for r in rows if r["split"]}
    seed = None if fields.get("seed") in (None, "None") else int(fields["seed"])
    return DatasetManifest(fields.get("root", ""), entries, splits, seed)


def load_images(manifest: DatasetManifest, split: str | None = None, size=None) -> ImageSet:
    entries = manifest.entries if split is None else manifest.split(split)
    images = []
    for e in entries:
        img = read_image(Path(manifest.root) / e.path)
        images.append(resize(img, size) if size is not None else img)
    if not images:
        raise DatasetError(f"no images in split {split!r}")
    return ImageSet(np.stack(images), [e.label for e in entries], [e.path for e in entries])


def write_imageset(root, dataset: ImageSet):
    """Write images as lossless PNGs under ``root`` using their ids as relative paths."""
    root = Path(root)
    for img, id_ in zip(dataset.images, dataset.ids):
        p = root / id_
        write_png(p if p.suffix else p.with_suffix(".png"), img)


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentationConfig:
    enabled: bool = True
    output_size: tuple = (224, 224)
    p_rotate: float = 1.0
    p_flip: float = 0.5
    p_crop: float = 1.0
    crop_scale: tuple = (0.08, 1.0)
    crop_ratio: tuple = (3 / 4, 4 / 3)
    p_jitter: float = 0.8
    jitter: tuple = (0.4, 0.4, 0.4, 0.1)  # brightness, contrast, saturation, hue
    p_blur: float = 0.5
    blur_sigma: tuple = (0.1, 2.0)
    p_compress: float = 0.5
    quality: tuple = (50, 95)
    p_grayscale: float = 0.2
    p_cutout: float = 0.2
    cutout_size: tuple = (16, 64)
    p_noise: float = 0.2
    noise_sigma: float = 0.02

    PROBABILITIES = ("p_rotate", "p_flip", "p_crop", "p_jitter", "p_blur",
                     "p_compress", "p_grayscale", "p_cutout", "p_noise")

    def __post_init__(self):
        object.__setattr__(self, "output_size", tuple(int(s) for s in self.output_size))
        for name in self.PROBABILITIES:
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")

    @classmethod
    def off(cls, output_size=(224, 224)):
        return cls(enabled=False, output_size=output_size)

    @classmethod
    def none(cls, output_size=(224, 224)):
        """Enabled pipeline with every transform switched off."""
        return cls(output_size=output_size, **{name: 0.0 for name in cls.PROBABILITIES})


@dataclass(frozen=True)
class AugmentPlan:
    """Which transforms fire and with what parameters; drawn before touching pixels."""
    rotate_k: int | None = None
    flip: bool = False
    crop: tuple | None = None  # (scale, log_ratio, fy, fx), sizes relative to the image
    jitter: tuple | None = None
    blur_sigma: float | None = None
    quality: int | None = None
    grayscale: bool = False
    cutout: tuple | None = None  # (size, fy, fx)
    noise_seed: int | None = None


def sample_plan(config: AugmentationConfig, rng: np.random.Generator) -> AugmentPlan:
    """Draw one augmentation plan; each transform fires independently with its probability.

    The number of values drawn from ``rng`` does not depend on which
    transforms fire.
    """
    c = config
    u = rng.random(9)
    k = int(rng.integers(4))
    crop = (rng.uniform(*c.crop_scale), rng.uniform(np.log(c.crop_ratio[0]), np.log(c.crop_ratio[1])),
            rng.random(), rng.random())
    b, ct, s, h = c.jitter
    jitter = (rng.uniform(1 - b, 1 + b), rng.uniform(1 - ct, 1 + ct), rng.uniform(1 - s, 1 + s),
              rng.uniform(-h, h), tuple(rng.permutation(4).tolist()))
    sigma = rng.uniform(*c.blur_sigma)
    quality = int(rng.integers(c.quality[0], c.quality[1] + 1))
    cut = (int(rng.integers(c.cutout_size[0], c.cutout_size[1] + 1)), rng.random(), rng.random())
    noise_seed = int(rng.integers(2**63))
    return AugmentPlan(
        rotate_k=k if u[0] < c.p_rotate else None,
        flip=bool(u[1] < c.p_flip),
        crop=crop if u[2] < c.p_crop else None,
        jitter=jitter if u[3] < c.p_jitter else None,
        blur_sigma=sigma if u[4] < c.p_blur else None,
        quality=quality if u[5] < c.p_compress else None,
        grayscale=bool(u[6] < c.p_grayscale),
        cutout=cut if u[7] < c.p_cutout else None,
        noise_seed=noise_seed if u[8] < c.p_noise else None,
    )


def _gray(img):
    return (img @ np.array([0.299, 0.587, 0.114]))[..., None]


def _crop_box(shape, crop):
    h, w = shape[:2]
    scale, log_ratio, fy, fx = crop
    ratio = np.exp(log_ratio)
    area = scale * h * w
    ch = int(round(np.sqrt(area / ratio)))
    cw = int(round(np.sqrt(area * ratio)))
    ch, cw = min(max(ch, 1), h), min(max(cw, 1), w)
    y0 = int(fy * (h - ch + 1)) if h > ch else 0
    x0 = int(fx * (w - cw + 1)) if w > cw else 0
    return min(y0, h - ch), min(x0, w - cw), ch, cw


def _jitter(img, params):
    bright, contrast, sat, hue, order = params
    for op in order:
        if op == 0:
            img = img * bright
        elif op == 1:
            img = (img - _gray(img).mean()) * contrast + _gray(img).mean()
        elif op == 2:
            g = _gray(img)
            img = g + (img - g) * sat
        else:
            hsv = color.rgb2hsv(np.clip(img, 0, 1))
            hsv[..., 0] = (hsv[..., 0] + hue) % 1.0
            img = color.hsv2rgb(hsv)
        img = np.clip(img, 0, 1)
    return img


def _jpeg(img, quality):
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img)).save(buf, format="JPEG", quality=quality)
    buf.seek(0)
    return read_image(buf)


def apply_plan(image, plan: AugmentPlan, config: AugmentationConfig) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if plan.rotate_k:
        img = np.rot90(img, plan.rotate_k)
    if plan.flip:
        img = img[:, ::-1]
    if plan.crop is not None:
        y0, x0, ch, cw = _crop_box(img.shape, plan.crop)
        img = img[y0:y0 + ch, x0:x0 + cw]
    img = resize(np.ascontiguousarray(img), config.output_size)
    if plan.jitter is not None:
        img = _jitter(img, plan.jitter)
    if plan.blur_sigma is not None:
        img = filters.gaussian(img, sigma=plan.blur_sigma, channel_axis=-1, preserve_range=True)
    if plan.quality is not None:
        img = _jpeg(img, plan.quality)
    if plan.grayscale:
        img = np.repeat(_gray(img), 3, axis=-1)
    if plan.cutout is not None:
        size, fy, fx = plan.cutout
        h, w = img.shape[:2]
        size = min(size, h, w)
        y0, x0 = int(fy * (h - size + 1)), int(fx * (w - size + 1))
        img = img.copy()
        img[y0:y0 + size, x0:x0 + size] = 0.0
    if plan.noise_seed is not None:
        img = img + np.random.default_rng(plan.noise_seed).normal(0, config.noise_sigma, img.shape)
    return np.clip(img, 0, 1)


def augment(image, config: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Augment one image; with ``config.enabled`` false only resizes to ``output_size``."""
    if not config.enabled:
        return resize(np.asarray(image, dtype=np.float64), config.output_size)
    return apply_plan(image, sample_plan(config, rng), config)


def sample_stream(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent random stream for one sample of one epoch."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, int(index)]))


def augment_batch(images, config: AugmentationConfig, seed: int, epoch: int, indices) -> np.ndarray:
    return np.stack([augment(img, config, sample_stream(seed, epoch, i)) for img, i in zip(images, indices)])


# ---------------------------------------------------------------- toy data


def make_toy_imageset(n_per_class: int, size: int = 32, seed: int = 0, amplitude: float = 0.05,
                      pattern_seed: int = 1234, cell: int = 4, texture: float = 0.15,
                      prefix: str = "") -> ImageSet:
    """Smooth random backgrounds; fakes additionally carry a fixed blocky pattern.

    The pattern is a ``+-amplitude`` checkerboard of random signs on ``cell x
    cell`` blocks, drawn from ``pattern_seed`` so that separate draws (train,
    test, attacker-side data) share the same class signal.
    """
    rng = np.random.default_rng(seed)
    prng = np.random.default_rng(pattern_seed)
    signs = prng.choice([-1.0, 1.0], size=(size // cell, size // cell, 3))
    pattern = np.kron(signs, np.ones((cell, cell, 1)))
    images, labels, ids = [], [], []
    for label, name in ((0, "real"), (1, "fake")):
        for i in range(n_per_class):
            low = rng.uniform(-texture, texture, size=(size // 8, size // 8, 3))
            base = 0.5 + transform.resize(low, (size, size, 3), order=3, mode="reflect")
            base = base + rng.normal(0, 0.01, size=base.shape)
            img = base + label * amplitude * pattern
            images.append(np.clip(img, 0.02, 0.98))
            labels.append(label)
            ids.append(f"{name}/{prefix}{i:04d}.png")
    return ImageSet(np.stack(images), labels, ids)
