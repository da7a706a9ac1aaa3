"""Folder-organised image datasets, stratified splitting, preprocessing and a
synthetic lesion generator for desk-scale experiments."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import queue
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from asffnet.errors import ConfigurationError, ValidationError

log = logging.getLogger(__name__)

CLASS_LABELS = {"benign": 0, "malignant": 1}
LABEL_NAMES = {v: k for k, v in CLASS_LABELS.items()}
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
CUE_MODES = ("global_shape", "local_texture", "multi_scale")
# generator ranges; radius is a fraction of the image edge, strokes is [lo, hi)
ELONGATED_ASPECT = (2.2, 2.8)
ROUND_ASPECT = (1.0, 1.1)
LESION_RADIUS = (0.17, 0.23)
HAIR_STROKES = (2, 6)
SPECKLE_AMPLITUDE = 38.0


@dataclass(frozen=True)
class Sample:
    path: Path
    label: int


@dataclass
class DatasetManifest:
    entries: list[Sample]
    warnings: list[str] = field(default_factory=list)

    @property
    def class_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for s in self.entries:
            counts[s.label] = counts.get(s.label, 0) + 1
        return dict(sorted(counts.items()))

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.entries], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.entries)


def _decodes(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.load()
        return True
    except Exception:
        return False


def _label_map(names: list[str]) -> dict[str, int]:
    if set(names) <= set(CLASS_LABELS):
        return {n: CLASS_LABELS[n] for n in names}
    return {n: i for i, n in enumerate(sorted(names))}


def load_manifest(root, workers: int = 4) -> DatasetManifest:
    """Index a class-per-subdirectory image folder.

    Undecodable files are skipped with a warning; a class directory without
    any decodable image is an error.
    """
    root = Path(root)
    if not root.is_dir():
        raise ConfigurationError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if not class_dirs:
        raise ConfigurationError(f"dataset root {root} has no class subdirectories")
    labels = _label_map([d.name for d in class_dirs])

    candidates = []
    for d in class_dirs:
        files = sorted(
            p for p in d.rglob("*")
            if p.is_file() and not p.name.startswith(".") and p.suffix.lower() in IMAGE_SUFFIXES
        )
        candidates += [(p, labels[d.name]) for p in files]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        ok = list(pool.map(_decodes, [p for p, _ in candidates]))

    entries, warnings = [], []
    for (p, label), good in zip(candidates, ok):
        if good:
            entries.append(Sample(p, label))
        else:
            msg = f"skipping undecodable image {p}"
            log.warning(msg)
            warnings.append(msg)
    entries.sort(key=lambda s: s.path.as_posix())

    manifest = DatasetManifest(entries, warnings)
    counts = manifest.class_counts
    for d in class_dirs:
        if counts.get(labels[d.name], 0) == 0:
            raise ValidationError(f"class {d.name!r} has no decodable images under {d}")
    return manifest


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitConfig:
    train_fraction: float = 0.8
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ConfigurationError(f"train_fraction must be in (0, 1), got {self.train_fraction}")


def _split_key(seed: int, rel: str) -> str:
    return hashlib.sha256(f"{seed}:{rel}".encode()).hexdigest()


def _relative_keys(entries: list[Sample]) -> dict[Path, str]:
    """Paths relative to the deepest common directory, so moving a dataset
    folder does not change its split."""
    paths = [Path(s.path) for s in entries]
    base = os.path.commonpath([p.parent.as_posix() for p in paths])
    return {p: Path(os.path.relpath(p, base)).as_posix() for p in paths}


def _train_count(n: int, fraction: float) -> int:
    return min(max(int(math.floor(n * fraction + 0.5)), 1), n - 1)


def split(manifest: DatasetManifest, cfg: SplitConfig = SplitConfig()):
    """Deterministic train/test split.

    Samples are ranked by a hash of ``seed`` and the path relative to the
    dataset's common directory, and the first
    ``round(n * train_fraction)`` go to training, per class when stratified.
    Adding a file therefore only moves assignments around its rank.
    """
    if not manifest.entries:
        raise ValidationError("cannot split an empty manifest")
    keys = _relative_keys(manifest.entries)
    groups = {}
    for s in manifest.entries:
        groups.setdefault(s.label if cfg.stratified else 0, []).append(s)
    train, test = set(), set()
    for label, members in sorted(groups.items()):
        if len(members) < 2:
            raise ValidationError(
                f"class {label} has {len(members)} sample(s); need at least 2 to split"
            )
        ranked = sorted(members, key=lambda s: _split_key(cfg.seed, keys[Path(s.path)]))
        k = _train_count(len(ranked), cfg.train_fraction)
        train.update(ranked[:k])
        test.update(ranked[k:])
    keep = lambda chosen: DatasetManifest([s for s in manifest.entries if s in chosen])
    return keep(train), keep(test)


def write_manifest_csv(path, train: DatasetManifest, test: DatasetManifest) -> None:
    """``path,label,split`` rows; paths relative to the csv file's directory."""
    path = Path(path)
    base = path.parent.resolve()
    rows = [(s, "train") for s in train.entries] + [(s, "test") for s in test.entries]
    rows.sort(key=lambda r: r[0].path.as_posix())
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label", "split"])
        for s, part in rows:
            rel = Path(os.path.relpath(Path(s.path).resolve(), base))
            w.writerow([rel.as_posix(), s.label, part])


def read_manifest_csv(path) -> tuple[DatasetManifest, DatasetManifest]:
    path = Path(path)
    train, test = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            p = Path(row["path"])
            if not p.is_absolute():
                p = path.parent / p
            (train if row["split"] == "train" else test).append(Sample(p, int(row["label"])))
    return DatasetManifest(train), DatasetManifest(test)


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


@dataclass
class PreprocessConfig:
    resize_to: int
    mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    std: tuple[float, float, float] = (1.0, 1.0, 1.0)
    horizontal_flip: bool = True
    rotate90: bool = True


def decode_image(path, size: int) -> np.ndarray:
    """RGB float32 array ``(3, size, size)`` in [0, 1]."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def load_arrays(manifest: DatasetManifest, size: int, workers: int = 4):
    """Decode every entry; returns ``(images (N,3,S,S) float32 in [0,1], labels (N,))``."""
    with ThreadPoolExecutor(max_workers=workers) as pool:
        arrays = list(pool.map(lambda s: decode_image(s.path, size), manifest.entries))
    x = torch.from_numpy(np.stack(arrays)) if arrays else torch.empty(0, 3, size, size)
    return x, torch.from_numpy(manifest.labels)


def channel_stats(images: torch.Tensor) -> tuple[tuple[float, ...], tuple[float, ...]]:
    x = images.double()
    mean = x.mean(dim=(0, 2, 3))
    std = x.std(dim=(0, 2, 3)).clamp_min(1e-6)
    return tuple(float(v) for v in mean), tuple(float(v) for v in std)


def normalize(images: torch.Tensor, mean, std) -> torch.Tensor:
    m = torch.as_tensor(mean, dtype=images.dtype).view(1, -1, 1, 1)
    s = torch.as_tensor(std, dtype=images.dtype).view(1, -1, 1, 1)
    return (images - m) / s


def denormalize(images: torch.Tensor, mean, std) -> torch.Tensor:
    m = torch.as_tensor(mean, dtype=images.dtype).view(1, -1, 1, 1)
    s = torch.as_tensor(std, dtype=images.dtype).view(1, -1, 1, 1)
    return images * s + m


def augment(batch: torch.Tensor, generator: torch.Generator, cfg: PreprocessConfig) -> torch.Tensor:
    out = batch.clone()
    n = batch.shape[0]
    if cfg.horizontal_flip:
        flip = torch.rand(n, generator=generator) < 0.5
        out[flip] = out[flip].flip(-1)
    if cfg.rotate90:
        ks = torch.randint(0, 4, (n,), generator=generator)
        for k in range(1, 4):
            sel = ks == k
            if sel.any():
                out[sel] = torch.rot90(out[sel], k, dims=(-2, -1))
    return out


@dataclass
class ArrayDataset:
    """Normalised images plus labels held in memory."""

    images: torch.Tensor
    labels: torch.Tensor
    preprocess: PreprocessConfig

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, preprocess: PreprocessConfig):
        raw, labels = load_arrays(manifest, preprocess.resize_to)
        return cls(normalize(raw, preprocess.mean, preprocess.std), labels, preprocess)


def stream_seed(seed: int, epoch: int, salt: int = 0) -> int:
    digest = hashlib.sha256(f"{seed}/{epoch}/{salt}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def iter_batches(
    data: ArrayDataset,
    batch_size: int,
    *,
    shuffle: bool = False,
    augment_batches: bool = False,
    seed: int = 0,
    epoch: int = 0,
    prefetch: int = 0,
):
    """Yield ``(images, labels)`` batches in an order fixed by ``(seed, epoch)``.

    With ``prefetch > 0`` batches are assembled on a worker thread and handed
    over through a bounded FIFO queue of that depth; order is unchanged.
    """
    g = torch.Generator().manual_seed(stream_seed(seed, epoch))
    n = len(data)
    order = torch.randperm(n, generator=g) if shuffle else torch.arange(n)

    def produce():
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            x = data.images[idx]
            if augment_batches:
                x = augment(x, g, data.preprocess)
            yield x, data.labels[idx]

    if prefetch <= 0:
        yield from produce()
        return

    q: queue.Queue = queue.Queue(maxsize=prefetch)
    done = object()

    def worker():
        for item in produce():
            q.put(item)
        q.put(done)

    t = threading.Thread(target=worker, daemon=True)
    t.start()
    while (item := q.get()) is not done:
        yield item
    t.join()


# ---------------------------------------------------------------------------
# Synthetic lesions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    n_per_class: int = 100
    image_size: int = 64
    seed: int = 0
    cue_mode: str = "multi_scale"

    def __post_init__(self):
        if self.image_size < 32:
            raise ConfigurationError(f"image_size must be >= 32, got {self.image_size}")
        if self.n_per_class < 1:
            raise ConfigurationError(f"n_per_class must be >= 1, got {self.n_per_class}")
        if self.cue_mode not in CUE_MODES:
            raise ConfigurationError(f"cue_mode must be one of {CUE_MODES}, got {self.cue_mode!r}")


def cue_flags(mode: str, label: int, index: int) -> tuple[bool, bool]:
    """(elongated, speckled) for a sample of the given class.

    multi_scale malignant lesions carry both cues; benign ones cycle through
    neither / shape only / texture only, so no single cue decides the class.
    """
    if mode == "global_shape":
        return bool(label), False
    if mode == "local_texture":
        return False, bool(label)
    if label:
        return True, True
    return ((False, False), (True, False), (False, True))[index % 3]


def _hair(draw: ImageDraw.ImageDraw, rng: np.random.Generator, size: int) -> None:
    for _ in range(int(rng.integers(*HAIR_STROKES))):
        p0, p1, p2 = rng.uniform(-0.1 * size, 1.1 * size, size=(3, 2))
        t = np.linspace(0.0, 1.0, 24)[:, None]
        pts = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2
        shade = int(rng.integers(25, 60))
        draw.line([tuple(p) for p in pts], fill=(shade, int(shade * 0.8), int(shade * 0.7)), width=1)


def render_lesion(rng: np.random.Generator, size: int, elongated: bool, speckled: bool):
    """Draw one synthetic dermoscopy-like image; returns ``(uint8 HxWx3, cue dict)``."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5

    skin = np.array([222.0, 176.0, 148.0]) + rng.uniform(-12, 12, size=3)
    phi = rng.uniform(0, 2 * np.pi)
    light = 10.0 * ((xx - size / 2) * np.cos(phi) + (yy - size / 2) * np.sin(phi)) / size
    img = skin[None, None, :] + light[..., None]

    r = size * rng.uniform(*LESION_RADIUS)
    aspect = rng.uniform(*ELONGATED_ASPECT) if elongated else rng.uniform(*ROUND_ASPECT)
    a, b = r * np.sqrt(aspect), r / np.sqrt(aspect)
    theta = rng.uniform(0, np.pi)
    ext_x = np.sqrt((a * np.cos(theta)) ** 2 + (b * np.sin(theta)) ** 2)
    ext_y = np.sqrt((a * np.sin(theta)) ** 2 + (b * np.cos(theta)) ** 2)
    cx = rng.uniform(ext_x + 2, size - ext_x - 2)
    cy = rng.uniform(ext_y + 2, size - ext_y - 2)

    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    d = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    mask = 1.0 / (1.0 + np.exp((d - 1.0) * b / 0.8))

    lesion = np.array([132.0, 86.0, 62.0]) + rng.uniform(-14, 14, size=3)
    img = img * (1 - mask[..., None]) + lesion[None, None, :] * mask[..., None]
    if speckled:
        sign = rng.choice([-1.0, 1.0], size=(size, size))
        img += (SPECKLE_AMPLITUDE * sign * mask)[..., None]
    img += rng.normal(0.0, 3.0, size=img.shape)

    pil = Image.fromarray(np.clip(np.rint(img), 0, 255).astype(np.uint8), "RGB")
    _hair(ImageDraw.Draw(pil), rng, size)
    cue = {
        "cx": float(cx), "cy": float(cy), "a": float(a), "b": float(b), "theta": float(theta),
        "elongated": elongated, "speckled": speckled,
    }
    return np.asarray(pil), cue


def in_cue_region(cue: dict, x: float, y: float) -> bool:
    """Whether pixel-centre coordinates ``(x, y)`` fall inside the lesion ellipse."""
    dx, dy = x - cue["cx"], y - cue["cy"]
    c, s = math.cos(cue["theta"]), math.sin(cue["theta"])
    u, v = dx * c + dy * s, -dx * s + dy * c
    return (u / cue["a"]) ** 2 + (v / cue["b"]) ** 2 <= 1.0


def synthesize_dataset(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    """Write ``n_per_class`` PNGs per class under ``out_dir/{benign,malignant}``.

    Generative cue parameters go to ``out_dir/cues.json`` keyed by relative path.
    """
    out_dir = Path(out_dir)
    entries, cues = [], {}
    for label, name in sorted(LABEL_NAMES.items()):
        (out_dir / name).mkdir(parents=True, exist_ok=True)
        for i in range(spec.n_per_class):
            rng = np.random.default_rng([spec.seed, label, i])
            elongated, speckled = cue_flags(spec.cue_mode, label, i)
            arr, cue = render_lesion(rng, spec.image_size, elongated, speckled)
            rel = f"{name}/img_{i:05d}.png"
            Image.fromarray(arr).save(out_dir / rel)
            entries.append(Sample(out_dir / rel, label))
            cues[rel] = cue
    with open(out_dir / "cues.json", "w") as fh:
        json.dump({"spec": spec.__dict__, "cues": cues}, fh, indent=1, sort_keys=True)
    entries.sort(key=lambda s: s.path.as_posix())
    return DatasetManifest(entries)


def load_cues(out_dir) -> dict[str, dict]:
    with open(Path(out_dir) / "cues.json") as fh:
        return json.load(fh)["cues"]
