"""Image ingestion, crop/flip augmentation, batching and prepared-dataset IO.

Every randomized choice is drawn from a seed fixed before any work starts, so
the same inputs and seeds always give byte-identical pixel arrays.
"""
from __future__ import annotations

import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .imageops import read_image, resize_area, save_png

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".tif", ".tiff", ".jpg", ".jpeg")
MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class ImageRecord:
    source_path: str
    pixels: np.ndarray = field(repr=False, compare=False)
    crop_origin: tuple[int, int] = (0, 0)
    flipped: bool = False

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"{self.source_path}: expected H x W x 3 pixels, got {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError(f"{self.source_path}: pixel values outside [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "crop_origin", (int(self.crop_origin[0]), int(self.crop_origin[1])))

    @property
    def key(self) -> tuple[str, tuple[int, int], bool]:
        return (self.source_path, self.crop_origin, self.flipped)


@dataclass(frozen=True)
class ImageSet:
    """Ordered, immutable collection of equally sized images."""

    records: tuple[ImageRecord, ...]
    resolution: tuple[int, int]
    manifest_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "resolution", (int(self.resolution[0]), int(self.resolution[1])))
        for rec in self.records:
            if rec.pixels.shape[:2] != self.resolution:
                raise ValueError(
                    f"{rec.source_path}: resolution {rec.pixels.shape[:2]} != set resolution {self.resolution}"
                )

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ImageRecord]:
        return iter(self.records)

    def __getitem__(self, idx):
        return self.records[idx]

    def pixels(self, indices: Sequence[int] | None = None) -> np.ndarray:
        """Stack pixels into an (N, H, W, 3) float32 array."""
        recs = self.records if indices is None else [self.records[i] for i in indices]
        if not recs:
            return np.zeros((0, *self.resolution, 3), dtype=np.float32)
        return np.stack([r.pixels for r in recs])

    def subset(self, indices: Sequence[int]) -> "ImageSet":
        return ImageSet(tuple(self.records[i] for i in indices), self.resolution, self.manifest_seed)

    def manifest(self) -> list[dict]:
        return [
            {
                "index": i,
                "source_path": r.source_path,
                "crop_origin": list(r.crop_origin),
                "flipped": r.flipped,
                "seed": self.manifest_seed,
            }
            for i, r in enumerate(self.records)
        ]

    @classmethod
    def from_array(cls, pixels: np.ndarray, prefix: str = "img", seed: int = 0) -> "ImageSet":
        """Wrap an (N, H, W, 3) array in [0, 1], e.g. generator output."""
        pixels = np.asarray(pixels, dtype=np.float32)
        if pixels.ndim != 4 or len(pixels) == 0:
            raise ValueError("expected a non-empty (N, H, W, 3) array")
        recs = tuple(ImageRecord(f"{prefix}_{i:05d}", p) for i, p in enumerate(pixels))
        return cls(recs, pixels.shape[1:3], seed)


def _parse_policy(resolution_policy) -> tuple[int, int] | None:
    if resolution_policy in (None, "native"):
        return None
    if isinstance(resolution_policy, str) and resolution_policy.startswith("resize"):
        inner = resolution_policy[resolution_policy.index("(") + 1:resolution_policy.rindex(")")]
        return parse_size(inner)
    if isinstance(resolution_policy, tuple) and resolution_policy and resolution_policy[0] == "resize":
        return tuple(int(v) for v in resolution_policy[1])
    return tuple(int(v) for v in resolution_policy)


def parse_size(text: str) -> tuple[int, int]:
    """Parse ``"HxW"`` (or ``"H,W"``) into a (H, W) tuple."""
    parts = text.lower().replace(",", "x").split("x")
    if len(parts) != 2:
        raise ValueError(f"size must look like HxW, got {text!r}")
    return int(parts[0]), int(parts[1])


def list_image_files(path: str | Path) -> list[Path]:
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"no such directory: {root}")
    files = [p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES]
    return sorted(files, key=lambda p: p.relative_to(root).as_posix())


def peek_resolutions(path: str | Path) -> set[tuple[int, int]]:
    """Read only image headers and return the distinct (H, W) sizes."""
    sizes = set()
    for f in list_image_files(path):
        try:
            with Image.open(f) as im:
                sizes.add((im.height, im.width))
        except (UnidentifiedImageError, OSError) as exc:
            raise ValueError(f"cannot decode image file {f}: {exc}") from exc
    return sizes


def load_image_dir(path: str | Path, resolution_policy="native", workers: int = 1) -> ImageSet:
    """Load every PNG/TIFF/JPEG under ``path`` (recursively) as one record each.

    ``resolution_policy`` is ``"native"`` or ``("resize", (H, W))``; resizing uses
    area averaging. Records are ordered by relative path, which also serves as
    their ``source_path``.
    """
    root = Path(path)
    files = list_image_files(root)
    if not files:
        raise ValueError(f"no images found in {root}")
    target = _parse_policy(resolution_policy)

    def _load(f: Path) -> ImageRecord:
        try:
            px = read_image(f)
        except (UnidentifiedImageError, OSError) as exc:
            raise ValueError(f"cannot decode image file {f}: {exc}") from exc
        if target is not None:
            px = resize_area(px, target)
        return ImageRecord(f.relative_to(root).as_posix(), px)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_load, files))
    else:
        records = [_load(f) for f in files]

    sizes = {r.pixels.shape[:2] for r in records}
    if len(sizes) > 1:
        raise ValueError(f"inconsistent resolutions in {root}: {sorted(sizes)}")
    return ImageSet(tuple(records), sizes.pop(), 0)


def _check_crop(set_: ImageSet, size: tuple[int, int]) -> tuple[int, int]:
    h, w = int(size[0]), int(size[1])
    if h < 1 or w < 1:
        raise ValueError(f"invalid crop size {size}")
    if h > set_.resolution[0] or w > set_.resolution[1]:
        raise ValueError(f"crop exceeds image: {h}x{w} > {set_.resolution[0]}x{set_.resolution[1]}")
    return h, w


def _crop(rec: ImageRecord, r: int, c: int, h: int, w: int) -> ImageRecord:
    px = np.array(rec.pixels[r:r + h, c:c + w])
    origin = (rec.crop_origin[0] + r, rec.crop_origin[1] + c)
    return ImageRecord(rec.source_path, px, origin, rec.flipped)


def center_crop(set_: ImageSet, size: tuple[int, int]) -> ImageSet:
    """Take the centred window; an odd remainder leaves the extra pixel at bottom/right."""
    h, w = _check_crop(set_, size)
    r = (set_.resolution[0] - h) // 2
    c = (set_.resolution[1] - w) // 2
    return ImageSet(tuple(_crop(rec, r, c, h, w) for rec in set_), (h, w), set_.manifest_seed)


def random_crop_expand(set_: ImageSet, size: tuple[int, int], count: int, seed: int) -> ImageSet:
    """Replace each image by ``count`` random crops of ``size``.

    Offsets are sampled uniformly without replacement from the valid offset
    grid using a per-source stream derived from ``(seed, source index)``.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    h, w = _check_crop(set_, size)
    n_rows = set_.resolution[0] - h + 1
    n_cols = set_.resolution[1] - w + 1
    if count > n_rows * n_cols:
        raise ValueError(f"count {count} exceeds the {n_rows * n_cols} distinct crop offsets")
    out = []
    for i, rec in enumerate(set_):
        rng = np.random.default_rng([seed, i])
        flat = rng.choice(n_rows * n_cols, size=count, replace=False)
        for f in flat:
            r, c = divmod(int(f), n_cols)
            out.append(_crop(rec, r, c, h, w))
    return ImageSet(tuple(out), (h, w), seed)


def hflip_augment(set_: ImageSet) -> ImageSet:
    """Interleave each record with its left-right mirror."""
    out = []
    for rec in set_:
        out.append(rec)
        out.append(ImageRecord(rec.source_path, rec.pixels[:, ::-1, :].copy(), rec.crop_origin, not rec.flipped))
    return ImageSet(tuple(out), set_.resolution, set_.manifest_seed)


def downscale(set_: ImageSet, size: tuple[int, int]) -> ImageSet:
    size = (int(size[0]), int(size[1]))
    recs = tuple(replace(r, pixels=resize_area(r.pixels, size)) for r in set_)
    return ImageSet(recs, size, set_.manifest_seed)


def epoch_order(n: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).permutation(n)


def batch_indices(n: int, batch_size: int, seed: int) -> list[np.ndarray]:
    """Index batches for one epoch: seeded permutation, partial final batch kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if n == 0:
        return []
    if batch_size > n:
        warnings.warn(f"batch_size {batch_size} > dataset size {n}; using one batch of the full set")
        batch_size = n
    order = epoch_order(n, seed)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def iterate_batches(set_: ImageSet, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """Yield one epoch of shuffled (B, H, W, 3) pixel batches."""
    for idx in batch_indices(len(set_), batch_size, seed):
        yield set_.pixels(idx)


def holdout_split(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded (train, holdout) index split; holdout gets round(fraction*n), at least 2 when possible."""
    n_hold = int(round(fraction * n))
    if fraction > 0 and n >= 4:
        n_hold = max(n_hold, 2)
    n_hold = min(n_hold, n - 1) if n > 1 else 0
    perm = np.random.default_rng([seed, 0x5EED]).permutation(n)
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


def save_image_set(set_: ImageSet, out_dir: str | Path) -> Path:
    """Write records as ``%06d.png`` plus a ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = set_.manifest()
    for entry, rec in zip(entries, set_):
        name = f"{entry['index']:06d}.png"
        save_png(rec.pixels, out / name)
        entry["file"] = name
    doc = {"version": 1, "resolution": list(set_.resolution), "seed": set_.manifest_seed, "records": entries}
    (out / MANIFEST_NAME).write_text(json.dumps(doc, indent=1))
    return out


def load_prepared(path: str | Path) -> ImageSet:
    """Load a directory written by :func:`save_image_set`, restoring provenance.

    Falls back to :func:`load_image_dir` when no manifest is present.
    """
    root = Path(path)
    mpath = root / MANIFEST_NAME
    if not mpath.exists():
        return load_image_dir(root)
    doc = json.loads(mpath.read_text())
    recs = []
    for e in doc["records"]:
        px = read_image(root / e["file"])
        recs.append(ImageRecord(e["source_path"], px, tuple(e["crop_origin"]), bool(e["flipped"])))
    if not recs:
        raise ValueError(f"no images found in {root}")
    return ImageSet(tuple(recs), tuple(doc["resolution"]), int(doc.get("seed", 0)))


def prepare_dataset(
    input_dir: str | Path,
    mode: str,
    size: tuple[int, int],
    count: int = 1,
    flip: bool = False,
    seed: int = 0,
    resize: tuple[int, int] | None = None,
) -> ImageSet:
    """load -> crop (center | random) -> optional downscale -> optional flip."""
    src = load_image_dir(input_dir)
    if mode == "center":
        out = center_crop(src, size)
        out = ImageSet(out.records, out.resolution, seed)
    elif mode == "random":
        out = random_crop_expand(src, size, count, seed)
    elif mode == "none":
        out = ImageSet(src.records, src.resolution, seed)
    else:
        raise ValueError(f"unknown crop mode {mode!r}")
    if resize is not None and tuple(resize) != out.resolution:
        out = downscale(out, resize)
    if flip:
        out = hflip_augment(out)
    logger.info("prepared %d images at %dx%d", len(out), *out.resolution)
    return out


def make_toy_images(n: int, resolution: int | tuple[int, int] = 32, seed: int = 0) -> ImageSet:
    """Seeded synthetic "specimens": soft blobs and rings on a dark background."""
    if isinstance(resolution, int):
        resolution = (resolution, resolution)
    h, w = resolution
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    images = np.empty((n, h, w, 3), dtype=np.float32)
    for i in range(n):
        rng = np.random.default_rng([seed, i, 0xB10B])
        img = np.tile(rng.uniform(0.02, 0.12, size=3), (h, w, 1))
        for _ in range(rng.integers(1, 4)):
            cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
            radius = rng.uniform(0.08, 0.22) * min(h, w)
            color = rng.uniform(0.3, 1.0, size=3)
            d2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / radius**2
            if rng.random() < 0.35:
                shape = np.exp(-((np.sqrt(d2) - 1.0) ** 2) / 0.08)
            else:
                shape = np.exp(-d2)
            img = img + shape[:, :, None] * color * (1.0 - img)
        images[i] = np.clip(img, 0.0, 1.0)
    recs = tuple(ImageRecord(f"toy_{i:05d}.png", images[i]) for i in range(n))
    return ImageSet(recs, (h, w), seed)
