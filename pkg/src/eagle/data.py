"""Synthetic segmented-shape corpus, its on-disk format, and mask sampling.

Layout under a dataset root::

    images/<id>.ppm          binary PPM (P6, maxval 255)
    masks/<id>_<k>.pgm       binary PGM (P5, maxval 255), nonzero = inside
    index.txt                <image-relpath> <mask-relpath> <class-id>
    classes.txt              <class-id> <name>
    split.txt                <image-id> train|val
"""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .grounding import DEFAULT_THETA, rasterize
from .numeric import RngStream

log = logging.getLogger(__name__)

SHAPES = ["disk", "square", "triangle", "ring", "cross", "bar", "diamond", "ell"]


class DatasetError(ValueError):
    """A dataset file is missing, corrupt, or inconsistent."""


@dataclass
class Instance:
    mask: np.ndarray  # (H, W) bool
    class_id: int


@dataclass
class SegmentedImage:
    id: str
    pixels: np.ndarray  # (H, W, 3) float64 in [0, 1]
    instances: list[Instance]

    @property
    def dominant_class(self) -> int:
        areas = [int(inst.mask.sum()) for inst in self.instances]
        return self.instances[int(np.argmax(areas))].class_id

    @property
    def classes(self) -> set[int]:
        return {inst.class_id for inst in self.instances}


@dataclass
class ManifestEntry:
    image: str
    masks: list[tuple[str, int]]


@dataclass
class DatasetManifest:
    root: Path | None
    entries: dict[str, ManifestEntry]
    class_names: list[str]
    split: dict[str, str]
    samples: dict[str, SegmentedImage] = field(default_factory=dict, repr=False)

    @property
    def K(self) -> int:
        return len(self.class_names)

    def ids(self, split: str | None = None) -> list[str]:
        return [i for i in self.entries if split is None or self.split.get(i) == split]


@dataclass
class DataConfig:
    n_images: int = 2000
    n_classes: int = 8
    image_size: int = 32
    min_objects: int = 2
    max_objects: int = 5
    zipf: float = 1.0
    dominant_size: tuple[int, int] = (20, 24)
    object_size: tuple[int, int] = (5, 8)
    val_fraction: float = 0.2
    color_jitter: float = 0.15

    def __post_init__(self):
        for lo, hi in (self.dominant_size, self.object_size):
            if not 1 <= lo <= hi <= self.image_size:
                raise DatasetError(f"object size range ({lo}, {hi}) does not fit a {self.image_size}px image")


def sizes_for(image_size: int) -> dict:
    """Dominant and secondary object size ranges scaled from the 32px defaults."""
    f = image_size / 32
    dom = tuple(max(2, round(v * f)) for v in (20, 24))
    obj = tuple(max(2, round(v * f)) for v in (5, 8))
    return {"dominant_size": dom, "object_size": obj}


# -- shape rasterization ----------------------------------------------------------------


def shape_mask(kind: str, size: int, variant: int) -> np.ndarray:
    """Boolean ``size x size`` stencil of a shape; ``variant`` picks a rotation/flip."""
    c = (np.arange(size) + 0.5) / size * 2 - 1
    v, u = np.meshgrid(c, c, indexing="ij")
    if kind == "disk":
        m = u * u + v * v <= 0.95
    elif kind == "square":
        m = (np.abs(u) <= 0.8) & (np.abs(v) <= 0.8)
    elif kind == "triangle":
        m = (v <= 0.85) & (np.abs(u) <= (v + 0.95) * 0.5)
    elif kind == "ring":
        r2 = u * u + v * v
        m = (r2 <= 0.95) & (r2 >= 0.3)
    elif kind == "cross":
        m = (np.abs(u) <= 0.3) | (np.abs(v) <= 0.3)
    elif kind == "bar":
        m = np.abs(v) <= 0.35
    elif kind == "diamond":
        m = np.abs(u) + np.abs(v) <= 1.0
    elif kind == "ell":
        m = (u <= -0.35) | (v >= 0.35)
    else:
        raise ValueError(f"unknown shape {kind!r}")
    m = np.rot90(m, variant % 4)
    if variant >= 4:
        m = m[:, ::-1]
    return np.ascontiguousarray(m)


# one base color per class; instance colors jitter around it
PALETTE = np.array([
    [0.90, 0.15, 0.15],
    [0.15, 0.75, 0.20],
    [0.15, 0.30, 0.90],
    [0.95, 0.85, 0.10],
    [0.80, 0.20, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.45, 0.25, 0.10],
])


def class_probabilities(K: int, z: float) -> np.ndarray:
    w = 1.0 / np.arange(1, K + 1) ** z
    return w / w.sum()


def _dilate(m: np.ndarray) -> np.ndarray:
    out = m.copy()
    out[1:] |= m[:-1]
    out[:-1] |= m[1:]
    out[:, 1:] |= m[:, :-1]
    out[:, :-1] |= m[:, 1:]
    return out


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(x * 255.0), 0, 255).astype(np.uint8)


def generate_sample(index: int, config: DataConfig, rng: RngStream) -> SegmentedImage:
    """One image: textured gray background plus 2-5 non-touching colored shapes.

    The first object is drawn larger so the dominant class is well defined.
    Pixels are quantized to 8 bits so files round-trip exactly.
    """
    s = config.image_size
    K = config.n_classes
    cdf = np.cumsum(class_probabilities(K, config.zipf))
    n_obj = config.min_objects + rng.integers(config.max_objects - config.min_objects + 1)
    classes = rng.choice(cdf, n_obj)

    base = np.full(3, rng.uniform() * 0.4 + 0.3) + (rng.uniform(3) - 0.5) * 0.1
    yy, xx = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    gdir = rng.uniform(2) - 0.5
    grad = (gdir[0] * yy + gdir[1] * xx) / s * 0.2
    noise = (rng.uniform(s * s * 3).reshape(s, s, 3) - 0.5) * 0.12
    pixels = np.clip(base[None, None, :] + grad[..., None] + noise, 0, 1)

    occupied = np.zeros((s, s), dtype=bool)
    instances = []
    for k, cls in enumerate(classes):
        lo, hi = config.dominant_size if k == 0 else config.object_size
        placed = False
        for _ in range(100):
            size = lo + rng.integers(hi - lo + 1)
            stencil = shape_mask(SHAPES[int(cls)], size, rng.integers(8))
            y0 = rng.integers(s - size + 1)
            x0 = rng.integers(s - size + 1)
            m = np.zeros((s, s), dtype=bool)
            m[y0 : y0 + size, x0 : x0 + size] = stencil
            if not (m & occupied).any():
                placed = True
                break
        if not placed:
            log.info("image %d: could not place object %d (%s), skipped", index, k, SHAPES[int(cls)])
            continue
        occupied |= _dilate(m)
        color = np.clip(PALETTE[int(cls)] + (rng.uniform(3) - 0.5) * 2 * config.color_jitter, 0, 1)
        pixels[m] = color
        instances.append(Instance(m, int(cls)))
    if not instances:
        raise DatasetError(f"image {index}: no object could be placed")
    pixels = _quantize(pixels).astype(np.float64) / 255.0
    return SegmentedImage(f"{index:06d}", pixels, instances)


def split_of(image_id: str, val_fraction: float = 0.2) -> str:
    h = int.from_bytes(hashlib.blake2b(image_id.encode(), digest_size=8).digest(), "little")
    return "val" if (h % 10000) < val_fraction * 10000 else "train"


def generate_samples(config: DataConfig, rng: RngStream) -> list[SegmentedImage]:
    if config.n_classes > len(SHAPES):
        raise ValueError(f"at most {len(SHAPES)} classes are available, asked for {config.n_classes}")
    if config.zipf < 0:
        raise ValueError("zipf exponent must be >= 0")
    stream = rng.split("data")
    return [generate_sample(i, config, stream.split(f"image/{i}")) for i in range(config.n_images)]


def manifest_from_samples(samples, class_names, val_fraction=0.2, root=None) -> DatasetManifest:
    entries, split, by_id = {}, {}, {}
    for smp in samples:
        entries[smp.id] = ManifestEntry(
            f"images/{smp.id}.ppm",
            [(f"masks/{smp.id}_{k}.pgm", inst.class_id) for k, inst in enumerate(smp.instances)],
        )
        split[smp.id] = split_of(smp.id, val_fraction)
        by_id[smp.id] = smp
    return DatasetManifest(root, entries, list(class_names), split, by_id)


def generate(config: DataConfig, rng: RngStream, root=None) -> DatasetManifest:
    """Generate the corpus; write it under ``root`` when given."""
    samples = generate_samples(config, rng)
    manifest = manifest_from_samples(samples, SHAPES[: config.n_classes], config.val_fraction)
    if root is not None:
        write(manifest, root)
    return manifest


# -- netpbm I/O -----------------------------------------------------------------------


def write_ppm(path, pixels_u8: np.ndarray) -> None:
    h, w, _ = pixels_u8.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(pixels_u8, dtype=np.uint8).tobytes())


def write_pgm(path, values_u8: np.ndarray) -> None:
    h, w = values_u8.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(values_u8, dtype=np.uint8).tobytes())


def read_netpbm(path, magic: bytes) -> np.ndarray:
    """Read a binary P6/P5 file with maxval 255."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as err:
        raise DatasetError(f"{path}: cannot read ({err.strerror})") from err
    if data[:2] != magic:
        raise DatasetError(f"{path}: bad magic {data[:2]!r}, expected {magic!r}")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated header")
        try:
            fields.append(int(data[start:pos]))
        except ValueError as err:
            raise DatasetError(f"{path}: malformed header") from err
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise DatasetError(f"{path}: maxval {maxval} unsupported (need 255)")
    depth = 3 if magic == b"P6" else 1
    n = w * h * depth
    if len(data) - pos != n:
        raise DatasetError(f"{path}: expected {n} data bytes, found {len(data) - pos}")
    arr = np.frombuffer(data, dtype=np.uint8, offset=pos, count=n)
    return arr.reshape(h, w, 3) if depth == 3 else arr.reshape(h, w)


def write(manifest: DatasetManifest, root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    index_lines = []
    for image_id, entry in manifest.entries.items():
        smp = manifest.samples[image_id]
        write_ppm(root / entry.image, _quantize(smp.pixels))
        for (mask_rel, cls), inst in zip(entry.masks, smp.instances):
            write_pgm(root / mask_rel, inst.mask.astype(np.uint8) * 255)
            index_lines.append(f"{entry.image} {mask_rel} {cls}\n")
    (root / "index.txt").write_text("".join(index_lines))
    (root / "classes.txt").write_text("".join(f"{i} {n}\n" for i, n in enumerate(manifest.class_names)))
    (root / "split.txt").write_text("".join(f"{i} {manifest.split[i]}\n" for i in manifest.entries))
    manifest.root = root


def _read_lines(path: Path) -> list[list[str]]:
    try:
        text = path.read_text()
    except OSError as err:
        raise DatasetError(f"{path}: cannot read ({err.strerror})") from err
    return [ln.split() for ln in text.splitlines() if ln.strip()]


def load(root) -> DatasetManifest:
    """Read and validate a dataset directory; every file is decoded eagerly."""
    root = Path(root)
    class_names = []
    for k, parts in enumerate(_read_lines(root / "classes.txt")):
        if len(parts) < 2 or int(parts[0]) != k:
            raise DatasetError(f"{root / 'classes.txt'}: line {k + 1} malformed")
        class_names.append(" ".join(parts[1:]))
    K = len(class_names)
    entries: dict[str, ManifestEntry] = {}
    for n, parts in enumerate(_read_lines(root / "index.txt")):
        if len(parts) != 3:
            raise DatasetError(f"{root / 'index.txt'}: line {n + 1} malformed")
        img, mask, cls = parts[0], parts[1], int(parts[2])
        if not 0 <= cls < K:
            raise DatasetError(f"{root / 'index.txt'}: line {n + 1} class id {cls} >= {K}")
        image_id = Path(img).stem
        entries.setdefault(image_id, ManifestEntry(img, [])).masks.append((mask, cls))
    split = {}
    for parts in _read_lines(root / "split.txt"):
        if len(parts) != 2 or parts[1] not in ("train", "val"):
            raise DatasetError(f"{root / 'split.txt'}: malformed line {' '.join(parts)!r}")
        split[parts[0]] = parts[1]
    samples = {}
    for image_id, entry in entries.items():
        if image_id not in split:
            raise DatasetError(f"{root / 'split.txt'}: no split for image {image_id}")
        pix = read_netpbm(root / entry.image, b"P6")
        instances = []
        for mask_rel, cls in entry.masks:
            m = read_netpbm(root / mask_rel, b"P5")
            if m.shape != pix.shape[:2]:
                raise DatasetError(f"{root / mask_rel}: shape {m.shape} does not match image {pix.shape[:2]}")
            if not m.any():
                raise DatasetError(f"{root / mask_rel}: empty mask")
            instances.append(Instance(m != 0, cls))
        samples[image_id] = SegmentedImage(image_id, pix.astype(np.float64) / 255.0, instances)
    return DatasetManifest(root, entries, class_names, split, samples)


# -- class-balanced sampling ---------------------------------------------------------


def mask_weights(manifest: DatasetManifest, split: str = "train"):
    """Per-mask draw weights proportional to 1 / (instance count of its class)."""
    pairs, classes = [], []
    for image_id in manifest.ids(split):
        for k, (_, cls) in enumerate(manifest.entries[image_id].masks):
            pairs.append((image_id, k))
            classes.append(cls)
    classes = np.asarray(classes, dtype=np.int64)
    counts = np.bincount(classes, minlength=manifest.K)
    for c in np.flatnonzero(counts == 0):
        log.warning("class %d (%s) has no instances in split %r; excluded", c, manifest.class_names[c], split)
    w = 1.0 / counts[classes]
    return pairs, w / w.sum()


class BalancedSampler:
    """Infinite, resumable stream of ``(image id, mask index)`` pairs.

    Each epoch draws as many masks as the split holds, with replacement, under
    the per-epoch stream ``rng.split("epoch/<e>")``.
    """

    def __init__(self, manifest: DatasetManifest, rng: RngStream, split: str = "train"):
        self.pairs, self.weights = mask_weights(manifest, split)
        if not self.pairs:
            raise DatasetError(f"split {split!r} has no masks")
        self.cdf = np.cumsum(self.weights)
        self.rng = rng
        self.epoch = 0
        self.pos = 0
        self._draws = None

    def _epoch_draws(self):
        if self._draws is None:
            self._draws = self.rng.split(f"epoch/{self.epoch}").choice(self.cdf, len(self.pairs))
        return self._draws

    def __iter__(self):
        return self

    def __next__(self) -> tuple[str, int]:
        draws = self._epoch_draws()
        item = self.pairs[int(draws[self.pos])]
        self.pos += 1
        if self.pos == len(draws):
            self.epoch += 1
            self.pos = 0
            self._draws = None
        return item

    def take(self, n: int) -> list[tuple[str, int]]:
        return [next(self) for _ in range(n)]

    def state(self) -> tuple[int, int]:
        return self.epoch, self.pos

    def set_state(self, epoch: int, pos: int) -> None:
        self.epoch, self.pos, self._draws = int(epoch), int(pos), None


def balanced_sampler(manifest: DatasetManifest, rng: RngStream, split: str = "train") -> BalancedSampler:
    return BalancedSampler(manifest, rng, split)


# -- batches --------------------------------------------------------------------------


@dataclass
class Batch:
    images: torch.Tensor  # (B, 3, H, W)
    selected: torch.Tensor  # (B, L) bool
    class_ids: torch.Tensor  # (B,) long
    image_ids: list[str]


def image_tensor(samples, dtype=torch.float64) -> torch.Tensor:
    arr = np.stack([s.pixels for s in samples]).transpose(0, 3, 1, 2)
    return torch.tensor(np.ascontiguousarray(arr), dtype=dtype)


def make_batch(entries, manifest: DatasetManifest, patch_size: int, theta: float = DEFAULT_THETA,
               dtype=torch.float64) -> Batch:
    samples, selected, classes = [], [], []
    size = None
    for image_id, k in entries:
        smp = manifest.samples[image_id]
        if size is None:
            size = smp.pixels.shape
        elif smp.pixels.shape != size:
            raise DatasetError(f"image {image_id}: shape {smp.pixels.shape} differs from batch {size}")
        inst = smp.instances[k]
        selected.append(rasterize(inst.mask, patch_size, theta, smp.pixels.shape).selected)
        classes.append(inst.class_id)
        samples.append(smp)
    return Batch(
        image_tensor(samples, dtype),
        torch.from_numpy(np.stack(selected)),
        torch.tensor(classes, dtype=torch.long),
        [e[0] for e in entries],
    )


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("EAGLE_THREADS", "1")))
    except ValueError:
        return 1
