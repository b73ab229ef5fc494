"""Dataset ingestion, base/novel splitting, episodic sampling, and a
procedurally rendered multiview toy dataset."""

from __future__ import annotations

import colorsys
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .core import DataError
from .geom3d import PoseRanges, ViewPose, pose_to_rotation, sample_pose

log = logging.getLogger("fbnet")

TRAIN_FRACTION = 0.75

MANIFEST_FILE = "manifest.tsv"
CATEGORIES_FILE = "categories.txt"
POSES_FILE = "poses.tsv"  # ground-truth render poses; test oracle only


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

BBox = tuple[int, int, int, int]  # x, y, w, h


@dataclass
class ManifestEntry:
    path: str
    category: int
    bbox: BBox | None = None


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]
    category_names: dict[int, str] = field(default_factory=dict)
    native_resolution: int | None = None

    def categories(self) -> list[int]:
        return sorted({e.category for e in self.entries})

    def validate(self):
        counts: dict[int, int] = {}
        for e in self.entries:
            counts[e.category] = counts.get(e.category, 0) + 1
        thin = sorted(c for c, n in counts.items() if n < 2)
        if thin:
            raise DataError(f"categories with fewer than 2 images: {thin}")
        for e in self.entries:
            if e.bbox is not None:
                x, y, w, h = e.bbox
                if w <= 0 or h <= 0 or x < 0 or y < 0:
                    raise DataError(f"{e.path}: malformed bounding box {e.bbox}")


def parse_manifest(path) -> DatasetManifest:
    """Read `relative/path<TAB>category_id[<TAB>x,y,w,h]` records."""
    path = Path(path)
    manifest_file = path / MANIFEST_FILE if path.is_dir() else path
    root = manifest_file.parent
    if not manifest_file.exists():
        raise DataError(f"manifest not found: {manifest_file}")
    entries = []
    for lineno, line in enumerate(manifest_file.read_text().splitlines(), 1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3):
            raise DataError(f"{manifest_file}:{lineno}: expected 2 or 3 fields")
        bbox = None
        if len(parts) == 3:
            try:
                x, y, w, h = (int(v) for v in parts[2].split(","))
            except ValueError:
                raise DataError(f"{manifest_file}:{lineno}: bad bbox {parts[2]!r}")
            bbox = (x, y, w, h)
        try:
            category = int(parts[1])
        except ValueError:
            raise DataError(f"{manifest_file}:{lineno}: bad category {parts[1]!r}")
        entries.append(ManifestEntry(parts[0], category, bbox))
    names = {}
    cat_file = root / CATEGORIES_FILE
    if cat_file.exists():
        for line in cat_file.read_text().splitlines():
            if line.strip():
                cid, _, name = line.partition("\t")
                names[int(cid)] = name
    manifest = DatasetManifest(root=root, entries=entries, category_names=names)
    manifest.validate()
    return manifest


def write_manifest(manifest: DatasetManifest, root=None):
    root = Path(root or manifest.root)
    lines = []
    for e in manifest.entries:
        rec = f"{e.path}\t{e.category}"
        if e.bbox is not None:
            rec += "\t" + ",".join(str(v) for v in e.bbox)
        lines.append(rec)
    (root / MANIFEST_FILE).write_text("\n".join(lines) + "\n")
    if manifest.category_names:
        cat_lines = [f"{cid}\t{name}"
                     for cid, name in sorted(manifest.category_names.items())]
        (root / CATEGORIES_FILE).write_text("\n".join(cat_lines) + "\n")


# ---------------------------------------------------------------------------
# Ingest
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    """Images as (N, 3, R, R) float32 in [-1, 1]; immutable after ingest."""

    images: np.ndarray
    labels: np.ndarray
    ids: list[str]
    resolution: int
    category_names: dict[int, str] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.ids)

    def categories(self) -> list[int]:
        return sorted(set(int(v) for v in self.labels))

    def indices_by_category(self) -> dict[int, np.ndarray]:
        return {c: np.flatnonzero(self.labels == c) for c in self.categories()}


def _to_chw_float(arr: np.ndarray) -> np.ndarray:
    """Accept uint8 (H, W, 3) in [0, 255] or float in [-1, 1]; return
    float32 (3, H, W) in [-1, 1]."""
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    if arr.ndim != 3:
        raise DataError(f"expected an H x W x 3 or 3 x H x W image, got {arr.shape}")
    if arr.shape[0] == 3 and arr.shape[-1] != 3:
        arr = np.moveaxis(arr, 0, -1)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 127.5 - 1.0
    else:
        arr = arr.astype(np.float32)
    return np.moveaxis(arr, -1, 0)


def _square_window(h: int, w: int, bbox: BBox | None, src: str) -> tuple[int, int, int]:
    """Return (y0, x0, side) of the square crop window."""
    if bbox is None:
        side = min(h, w)
        return (h - side) // 2, (w - side) // 2, side
    x, y, bw, bh = bbox
    if x < 0 or y < 0 or x + bw > w or y + bh > h or bw <= 0 or bh <= 0:
        raise DataError(f"{src}: bounding box {bbox} outside {w}x{h} image")
    side = min(max(bw, bh), h, w)
    cx, cy = x + bw / 2.0, y + bh / 2.0
    x0 = int(round(cx - side / 2.0))
    y0 = int(round(cy - side / 2.0))
    x0 = min(max(x0, 0), w - side)
    y0 = min(max(y0, 0), h - side)
    return y0, x0, side


def conform_image(arr: np.ndarray, resolution: int, bbox: BBox | None = None,
                  src: str = "<array>") -> np.ndarray:
    """Square-crop (bbox when given, else center), resize bilinear, map to
    [-1, 1]. Identity (to < 1e-6) on an already conforming image."""
    chw = _to_chw_float(arr)
    _, h, w = chw.shape
    y0, x0, side = _square_window(h, w, bbox, src)
    chw = chw[:, y0:y0 + side, x0:x0 + side]
    t = torch.from_numpy(np.ascontiguousarray(chw)).unsqueeze(0)
    t = F.interpolate(t, size=(resolution, resolution), mode="bilinear",
                      align_corners=False)
    return t[0].numpy()


def ingest(manifest: DatasetManifest, resolution: int) -> Dataset:
    """Load every manifest entry at the requested working resolution."""
    manifest.validate()
    images, labels, ids, skipped = [], [], [], []
    for e in manifest.entries:
        fpath = manifest.root / e.path
        try:
            with Image.open(fpath) as im:
                arr = np.asarray(im.convert("RGB"))
        except (OSError, ValueError) as exc:
            log.warning("skipping unreadable image %s: %s", fpath, exc)
            skipped.append(e.path)
            continue
        images.append(conform_image(arr, resolution, e.bbox, src=e.path))
        labels.append(e.category)
        ids.append(e.path)
    labels = np.asarray(labels, dtype=np.int64)
    counts = {c: int((labels == c).sum()) for c in set(labels.tolist())}
    thin = sorted(c for c, n in counts.items() if n < 2)
    if thin:
        raise DataError(
            f"categories with fewer than 2 readable images after skips: {thin}")
    return Dataset(images=np.stack(images), labels=labels, ids=ids,
                   resolution=resolution, category_names=dict(manifest.category_names),
                   skipped=skipped)


# ---------------------------------------------------------------------------
# Splits and episodes
# ---------------------------------------------------------------------------

@dataclass
class SplitSpec:
    base_categories: list[int]
    novel_categories: list[int]
    train: dict[int, np.ndarray]  # category -> dataset indices
    test: dict[int, np.ndarray]
    k_shot: int

    def categories(self, phase: str) -> list[int]:
        if phase == "base":
            return self.base_categories
        if phase == "novel":
            return self.novel_categories
        raise DataError(f"unknown phase {phase!r}")


def make_splits(dataset: Dataset, base_count: int, k_shot: int,
                rng: np.random.Generator) -> SplitSpec:
    cats = dataset.categories()
    if not 0 < base_count < len(cats):
        raise DataError(
            f"base_count must lie in (0, {len(cats)}), got {base_count}")
    order = rng.permutation(len(cats))
    base = sorted(cats[i] for i in order[:base_count])
    novel = sorted(cats[i] for i in order[base_count:])

    by_cat = dataset.indices_by_category()
    train, test = {}, {}
    for c in cats:
        idx = by_cat[c][rng.permutation(len(by_cat[c]))]
        n_train = int(round(len(idx) * TRAIN_FRACTION))
        n_train = min(max(n_train, 1), len(idx) - 1)
        train[c], test[c] = idx[:n_train], idx[n_train:]
    for c in novel:
        if k_shot > len(train[c]):
            raise DataError(
                f"k_shot={k_shot} exceeds category {c} train pool ({len(train[c])})")
        train[c] = train[c][:k_shot]
    return SplitSpec(base, novel, train, test, k_shot)


@dataclass
class Episode:
    support_images: np.ndarray
    support_labels: np.ndarray
    support_ids: list[str]
    query_images: np.ndarray
    query_labels: np.ndarray
    query_ids: list[str]
    categories: list[int]
    query_reuses_support: bool = False


def sample_episode(dataset: Dataset, split: SplitSpec, phase: str, n: int,
                   n_query: int, rng: np.random.Generator) -> Episode:
    """All-way episode over the phase's categories: n support and n_query
    query images per category. Queries avoid support images whenever the
    pool allows; a 1-shot pool forces reuse, which is flagged."""
    cats = split.categories(phase)
    sup_idx, qry_idx, reused = [], [], False
    for c in cats:
        pool = split.train[c]
        if n > len(pool):
            raise DataError(
                f"support size n={n} exceeds category {c} pool ({len(pool)})")
        sup = rng.choice(pool, size=n, replace=False)
        remaining = np.setdiff1d(pool, sup, assume_unique=False)
        if len(remaining) >= n_query:
            qry = rng.choice(remaining, size=n_query, replace=False)
        else:
            reused = True
            qry = rng.choice(pool, size=n_query, replace=len(pool) < n_query)
        sup_idx.extend(int(i) for i in sup)
        qry_idx.extend(int(i) for i in qry)
    return Episode(
        support_images=dataset.images[sup_idx],
        support_labels=dataset.labels[sup_idx],
        support_ids=[dataset.ids[i] for i in sup_idx],
        query_images=dataset.images[qry_idx],
        query_labels=dataset.labels[qry_idx],
        query_ids=[dataset.ids[i] for i in qry_idx],
        categories=list(cats),
        query_reuses_support=reused,
    )


# ---------------------------------------------------------------------------
# Toy multiview dataset
# ---------------------------------------------------------------------------

SHAPE_FAMILIES = ("cube", "pyramid", "cylinder")


@dataclass
class ToySpec:
    n_base: int = 8
    n_novel: int = 4
    images_per_category: int = 20
    resolution: int = 128
    jitter: float = 0.1
    azimuth_range: tuple[float, float] = (-math.pi, math.pi)
    elevation_range: tuple[float, float] = (-math.pi / 4, math.pi / 4)
    background: float = -0.85

    @property
    def n_categories(self) -> int:
        return self.n_base + self.n_novel

    def shape_of(self, category: int) -> str:
        return SHAPE_FAMILIES[category % len(SHAPE_FAMILIES)]

    def color_of(self, category: int) -> np.ndarray:
        """Saturated category color in [-1, 1] RGB, spread around the hue wheel."""
        hue = category / max(self.n_categories, 1)
        rgb = colorsys.hsv_to_rgb(hue, 0.9, 0.9)
        return np.asarray(rgb, dtype=np.float32) * 2.0 - 1.0


def _inside(shape: str, q: np.ndarray) -> np.ndarray:
    x, y, z = q[..., 0], q[..., 1], q[..., 2]
    if shape == "cube":
        return np.maximum(np.maximum(np.abs(x), np.abs(y)), np.abs(z)) <= 0.55
    if shape == "pyramid":
        half = 0.55 * (0.55 - z) / 1.1
        return (np.abs(z) <= 0.55) & (np.abs(x) <= half) & (np.abs(y) <= half)
    if shape == "cylinder":
        return (x * x + y * y <= 0.45 ** 2) & (np.abs(z) <= 0.55)
    raise DataError(f"unknown shape family {shape!r}")


def render_silhouette(shape: str, color: np.ndarray, pose: ViewPose,
                      resolution: int, jitter_factor: float = 1.0,
                      background: float = -0.85) -> np.ndarray:
    """Orthographic silhouette of the rotated solid, 2x supersampled.

    Deterministic in (shape, color, pose, jitter_factor); returns
    (3, R, R) float32 in [-1, 1].
    """
    ss = resolution * 2
    px = np.linspace(-1, 1, ss, dtype=np.float32)
    gx, gy = np.meshgrid(px, -px)  # row 0 is +y (top)
    steps = np.linspace(-1, 1, 48, dtype=np.float32)
    rot = pose_to_rotation(pose).astype(np.float32)
    # object-frame coords of a world point p are R^T p, i.e. p_row @ R
    base = gx[..., None] * rot[0] + gy[..., None] * rot[1]
    hit = np.zeros((ss, ss), dtype=bool)
    for t in steps:
        hit |= _inside(shape, base + t * rot[2])
    alpha = hit.astype(np.float32).reshape(resolution, 2, resolution, 2)
    alpha = alpha.mean(axis=(1, 3))

    fill01 = np.clip((color + 1.0) / 2.0 * jitter_factor, 0.0, 1.0)
    fill = fill01 * 2.0 - 1.0
    img = background * (1.0 - alpha)[None] + alpha[None] * fill[:, None, None]
    return img.astype(np.float32)


def generate_toy_dataset(spec: ToySpec, rng: np.random.Generator,
                         out_dir=None) -> tuple[DatasetManifest, np.ndarray, list[ViewPose]]:
    """Render the toy corpus; optionally write PNGs + manifest to out_dir.

    Returns (manifest, images (N, 3, R, R) float32, true poses). The poses
    are a test-only oracle and are never consumed by training.
    """
    if spec.n_categories < 2 or spec.images_per_category < 2:
        raise DataError("toy spec needs >= 2 categories and >= 2 images each")
    ranges = PoseRanges(azimuth=spec.azimuth_range,
                        elevation=spec.elevation_range, roll=(0.0, 0.0))
    entries, images, poses = [], [], []
    names = {}
    for c in range(spec.n_categories):
        color = spec.color_of(c)
        shape = spec.shape_of(c)
        names[c] = f"{shape}_{c}"
        for i in range(spec.images_per_category):
            pose = sample_pose(ranges, rng)
            jit = 1.0 + rng.uniform(-spec.jitter, spec.jitter)
            img = render_silhouette(shape, color, pose, spec.resolution,
                                    jitter_factor=jit, background=spec.background)
            entries.append(ManifestEntry(f"cat{c:02d}_img{i:03d}.png", c))
            images.append(img)
            poses.append(pose)
    images = np.stack(images)
    manifest = DatasetManifest(root=Path(out_dir) if out_dir else Path("."),
                               entries=entries, category_names=names,
                               native_resolution=spec.resolution)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for e, img in zip(entries, images):
            u8 = np.round((np.moveaxis(img, 0, -1) + 1.0) * 127.5)
            Image.fromarray(u8.clip(0, 255).astype(np.uint8)).save(out / e.path)
        write_manifest(manifest, out)
        pose_lines = [f"{e.path}\t{p.theta_x!r}\t{p.theta_y!r}\t{p.theta_z!r}"
                      for e, p in zip(entries, poses)]
        (out / POSES_FILE).write_text("\n".join(pose_lines) + "\n")
    return manifest, images, poses
