"""Constrained synthetic color/shape datasets and texture corpus ingestion.

Color images are pure per-pixel channel noise inside a per-class RGB range
table; shape images are a single stroked outline on a black background.  Both
generators are pure functions of (label, seed, size) so datasets are
bit-reproducible.  Texture images come from an external corpus directory
(one subdirectory per class) or from the procedural stand-in generator.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .seeding import derive_seed

COLOR_CLASSES = (
    "red", "green", "blue", "yellow", "magenta",
    "cyan", "black", "white", "brown", "orange",
)
SHAPE_CLASSES = (
    "lines", "rectangle", "circle", "ellipse",
    "quadrilateral", "pentagon", "hexagon",
)
SUBTYPES = ("color", "shape", "texture")

_DOM = (200, 255)   # dominant channel
_SUP = (0, 120)     # suppressed channel

# Inclusive (R, G, B) sampling ranges per color class.  Dominant channels sit
# in [200, 255] and suppressed ones in [0, 120] so classes stay separable;
# black/white/brown/orange get dedicated ranges.
COLOR_RANGES = {
    "red": (_DOM, _SUP, _SUP),
    "green": (_SUP, _DOM, _SUP),
    "blue": (_SUP, _SUP, _DOM),
    "yellow": (_DOM, _DOM, _SUP),
    "magenta": (_DOM, _SUP, _DOM),
    "cyan": (_SUP, _DOM, _DOM),
    "black": ((0, 55), (0, 55), (0, 55)),
    "white": (_DOM, _DOM, _DOM),
    "brown": ((100, 160), (40, 90), (0, 50)),
    "orange": ((200, 255), (100, 160), (0, 60)),
}

# Literal red rule from the original recipe: only R is constrained.
_PAPER_RED = ((200, 255), (0, 255), (0, 255))

MIN_RADIUS = 10.0       # circle/ellipse/regular-polygon radius lower bound
MIN_LINE_LEN = 20.0
BORDER_MARGIN = 3.0     # vertices stay at least this far from the border
THICKNESS_RANGE = (1, 5)


class GenerationError(ValueError):
    """Raised when a shape cannot fit the requested canvas."""


def color_ranges(paper_red: bool = False) -> dict:
    """Per-class channel range table; ``paper_red`` relaxes red's G and B."""
    table = dict(COLOR_RANGES)
    if paper_red:
        table["red"] = _PAPER_RED
    return table


def validate_raster(img: np.ndarray) -> None:
    if not isinstance(img, np.ndarray) or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image array, got shape {getattr(img, 'shape', None)}")
    if img.dtype != np.uint8:
        raise ValueError(f"expected uint8 image, got dtype {img.dtype}")


# ---------------------------------------------------------------------------
# Color images


def gen_color_image(label: str, seed: int, size: int, paper_red: bool = False) -> np.ndarray:
    """Generate one color-class image: every pixel i.i.d. uniform per channel.

    Channels are sampled R, then G, then B (fixed order, fixed generator) so
    identical (label, seed, size) always return bit-identical images.
    """
    table = color_ranges(paper_red)
    if label not in table:
        raise ValueError(f"unknown color class {label!r}")
    if size < 1:
        raise ValueError("size must be >= 1")
    rng = np.random.default_rng(seed)
    img = np.empty((size, size, 3), dtype=np.uint8)
    for ch, (lo, hi) in enumerate(table[label]):
        img[:, :, ch] = rng.integers(lo, hi, size=(size, size), dtype=np.int64, endpoint=True)
    return img


# ---------------------------------------------------------------------------
# Shape images

def _sample_rgb(rng: np.random.Generator, ranges) -> np.ndarray:
    return np.array(
        [rng.integers(lo, hi, endpoint=True) for lo, hi in ranges], dtype=np.uint8
    )


def _fit_center(rng: np.random.Generator, size: int, extent_x: float, extent_y: float,
                margin: float) -> tuple[float, float]:
    """Uniform center position keeping a box of half-extents inside the margin."""
    lo_x, hi_x = margin + extent_x, size - 1 - margin - extent_x
    lo_y, hi_y = margin + extent_y, size - 1 - margin - extent_y
    if hi_x < lo_x or hi_y < lo_y:
        raise GenerationError(f"size {size} too small for shape extent ({extent_x:.1f}, {extent_y:.1f})")
    return float(rng.uniform(lo_x, hi_x)), float(rng.uniform(lo_y, hi_y))


def _regular_polygon(cx: float, cy: float, radius: float, n: int, rotation: float) -> np.ndarray:
    ang = rotation + 2.0 * math.pi * np.arange(n) / n
    return np.stack([cx + radius * np.cos(ang), cy + radius * np.sin(ang)], axis=1)


def _closed_segments(vertices: np.ndarray) -> list:
    pts = list(map(tuple, vertices))
    return [(pts[i], pts[(i + 1) % len(pts)]) for i in range(len(pts))]


def _segment_distance_mask(size: int, segments, half_width: float) -> np.ndarray:
    """Pixels whose center lies within half_width of any segment."""
    ys, xs = np.mgrid[0:size, 0:size]
    px = xs.astype(np.float64)
    py = ys.astype(np.float64)
    best = np.full((size, size), np.inf)
    for (x1, y1), (x2, y2) in segments:
        dx, dy = x2 - x1, y2 - y1
        seg_len_sq = dx * dx + dy * dy
        if seg_len_sq == 0.0:
            dist = np.hypot(px - x1, py - y1)
        else:
            t = np.clip(((px - x1) * dx + (py - y1) * dy) / seg_len_sq, 0.0, 1.0)
            dist = np.hypot(px - (x1 + t * dx), py - (y1 + t * dy))
        np.minimum(best, dist, out=best)
    return best <= half_width


def _ellipse_polyline(cx, cy, ax, bx, rotation, n=256) -> np.ndarray:
    t = 2.0 * math.pi * np.arange(n) / n
    x = ax * np.cos(t)
    y = bx * np.sin(t)
    c, s = math.cos(rotation), math.sin(rotation)
    return np.stack([cx + c * x - s * y, cy + s * x + c * y], axis=1)


def gen_shape_image(label: str, seed: int, size: int) -> np.ndarray:
    """Generate one shape-class image: a single stroked outline on black.

    The outline is rendered as a distance field: a pixel is lit when its
    center lies within thickness/2 of the ideal curve, which keeps lit pixels
    within the pixel-scan tolerance of the exact geometry.  Sampling order is
    fixed (thickness, boundary color, geometry) for reproducibility.
    """
    if label not in SHAPE_CLASSES:
        raise ValueError(f"unknown shape class {label!r}")
    if size < 1:
        raise ValueError("size must be >= 1")
    rng = np.random.default_rng(seed)
    thickness = int(rng.integers(THICKNESS_RANGE[0], THICKNESS_RANGE[1], endpoint=True))
    color_label = COLOR_CLASSES[int(rng.integers(0, len(COLOR_CLASSES)))]
    rgb = _sample_rgb(rng, COLOR_RANGES[color_label])
    half = thickness / 2.0
    margin = BORDER_MARGIN + half

    max_radius = size / 2.0 - 6.0
    if label == "circle":
        if max_radius < MIN_RADIUS:
            raise GenerationError(f"size {size} too small for a circle of radius >= {MIN_RADIUS}")
        radius = float(rng.uniform(MIN_RADIUS, max_radius))
        cx, cy = _fit_center(rng, size, radius, radius, margin)
        ys, xs = np.mgrid[0:size, 0:size]
        dist = np.abs(np.hypot(xs - cx, ys - cy) - radius)
        mask = dist <= half
    elif label == "ellipse":
        if max_radius < MIN_RADIUS:
            raise GenerationError(f"size {size} too small for ellipse axes >= {MIN_RADIUS}")
        a = float(rng.uniform(MIN_RADIUS, max_radius))
        b = float(rng.uniform(MIN_RADIUS, max_radius))
        rot = float(rng.uniform(0.0, math.pi))
        bound = max(a, b)
        cx, cy = _fit_center(rng, size, bound, bound, margin)
        verts = _ellipse_polyline(cx, cy, a, b, rot)
        mask = _segment_distance_mask(size, _closed_segments(verts), half)
    elif label == "lines":
        length = float(rng.uniform(MIN_LINE_LEN, 0.8 * size))
        ang = float(rng.uniform(0.0, math.pi))
        ex = abs(length / 2.0 * math.cos(ang))
        ey = abs(length / 2.0 * math.sin(ang))
        avail = (size - 1) / 2.0 - margin
        if avail <= 1.0:
            raise GenerationError(f"size {size} too small for a line segment")
        scale = min(1.0, avail / max(ex, ey, 1e-9))
        ex, ey, length = ex * scale, ey * scale, length * scale
        cx, cy = _fit_center(rng, size, ex, ey, margin)
        dx = length / 2.0 * math.cos(ang)
        dy = length / 2.0 * math.sin(ang)
        segments = [((cx - dx, cy - dy), (cx + dx, cy + dy))]
        mask = _segment_distance_mask(size, segments, half)
    elif label == "rectangle":
        hw = float(rng.uniform(MIN_RADIUS, max(MIN_RADIUS + 1.0, 0.35 * size)))
        hh = float(rng.uniform(MIN_RADIUS, max(MIN_RADIUS + 1.0, 0.35 * size)))
        rot = float(rng.uniform(0.0, math.pi))
        c, s = abs(math.cos(rot)), abs(math.sin(rot))
        ex = hw * c + hh * s
        ey = hw * s + hh * c
        avail = (size - 1) / 2.0 - margin
        if avail <= 2.0:
            raise GenerationError(f"size {size} too small for a rectangle")
        scale = min(1.0, avail / max(ex, ey))
        hw, hh, ex, ey = hw * scale, hh * scale, ex * scale, ey * scale
        cx, cy = _fit_center(rng, size, ex, ey, margin)
        cr, sr = math.cos(rot), math.sin(rot)
        corners = np.array([[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]])
        verts = np.stack(
            [cx + corners[:, 0] * cr - corners[:, 1] * sr,
             cy + corners[:, 0] * sr + corners[:, 1] * cr], axis=1)
        mask = _segment_distance_mask(size, _closed_segments(verts), half)
    elif label == "quadrilateral":
        if max_radius < MIN_RADIUS:
            raise GenerationError(f"size {size} too small for a quadrilateral")
        angles = np.sort(rng.uniform(0.0, 2.0 * math.pi, size=4))
        radii = rng.uniform(MIN_RADIUS, max_radius, size=4)
        bound = float(radii.max())
        avail = (size - 1) / 2.0 - margin
        scale = min(1.0, avail / bound)
        radii = radii * scale
        cx, cy = _fit_center(rng, size, radii.max(), radii.max(), margin)
        verts = np.stack(
            [cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)
        mask = _segment_distance_mask(size, _closed_segments(verts), half)
    else:  # pentagon, hexagon
        n = 5 if label == "pentagon" else 6
        if max_radius < MIN_RADIUS:
            raise GenerationError(f"size {size} too small for a {label}")
        radius = float(rng.uniform(MIN_RADIUS, max_radius))
        rot = float(rng.uniform(0.0, math.pi))
        cx, cy = _fit_center(rng, size, radius, radius, margin)
        verts = _regular_polygon(cx, cy, radius, n, rot)
        mask = _segment_distance_mask(size, _closed_segments(verts), half)

    img = np.zeros((size, size, 3), dtype=np.uint8)
    img[mask] = rgb
    return img


# ---------------------------------------------------------------------------
# Resizing and image I/O


def resize_image(img: np.ndarray, w: int, h: int) -> np.ndarray:
    """Bilinear resize to (h, w, 3); same-size resize is the identity."""
    validate_raster(img)
    if w < 1 or h < 1:
        raise ValueError("target dimensions must be >= 1")
    src_h, src_w = img.shape[:2]
    if (src_w, src_h) == (w, h):
        return img.copy()
    # Pixel centers: output center (i + 0.5) maps to source (i + 0.5) * scale - 0.5.
    xs = np.clip((np.arange(w, dtype=np.float64) + 0.5) * (src_w / w) - 0.5, 0.0, src_w - 1)
    ys = np.clip((np.arange(h, dtype=np.float64) + 0.5) * (src_h / h) - 0.5, 0.0, src_h - 1)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, src_w - 1)
    y1 = np.minimum(y0 + 1, src_h - 1)
    fx = (xs - x0)[None, :, None]
    fy = (ys - y0)[:, None, None]
    data = img.astype(np.float64)
    top = data[y0][:, x0] * (1.0 - fx) + data[y0][:, x1] * fx
    bot = data[y1][:, x0] * (1.0 - fx) + data[y1][:, x1] * fx
    out = top * (1.0 - fy) + bot * fy
    return np.floor(out + 0.5).clip(0, 255).astype(np.uint8)  # round half up


def save_png(img: np.ndarray, path) -> None:
    validate_raster(img)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img, mode="RGB").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


# ---------------------------------------------------------------------------
# Dataset manifests


@dataclass
class ManifestEntry:
    path: str
    subtype: str
    label: str


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    seed: int = 0
    image_size: int = 0

    def labels(self) -> list:
        return sorted({e.label for e in self.entries})

    def save(self, path) -> None:
        """Write CSV rows path,subtype,label.

        Image paths are stored relative to the manifest's directory when
        possible, so identical runs into different output directories produce
        byte-identical manifests.
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        base = path.parent.resolve()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["path", "subtype", "label"])
            for e in self.entries:
                p = Path(e.path)
                try:
                    rel = p.resolve().relative_to(base).as_posix()
                except ValueError:
                    rel = str(p)
                writer.writerow([rel, e.subtype, e.label])

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        """Read a manifest; relative image paths resolve against its directory."""
        path = Path(path)
        base = path.parent
        entries = []
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["path", "subtype", "label"]:
                raise ValueError(f"{path}: expected header path,subtype,label, got {header}")
            for row in reader:
                if len(row) != 3:
                    raise ValueError(f"{path}: malformed row {row}")
                p = Path(row[0])
                if not p.is_absolute():
                    p = base / p
                entries.append(ManifestEntry(str(p), row[1], row[2]))
        return cls(entries=entries)


def class_roster(subtype: str) -> tuple:
    if subtype == "color":
        return COLOR_CLASSES
    if subtype == "shape":
        return SHAPE_CLASSES
    raise ValueError(f"no fixed class roster for subtype {subtype!r}")


def gen_dataset(subtype: str, per_class: int, seed: int, size: int, out_dir,
                paper_red: bool = False) -> DatasetManifest:
    """Write per_class PNGs for every class of a generated subtype.

    Image i of class c uses seed derive_seed(seed, subtype, c, i), so the
    dataset is reproducible and any single image can be regenerated alone.
    """
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    classes = class_roster(subtype)
    out_dir = Path(out_dir)
    manifest = DatasetManifest(seed=seed, image_size=size)
    for label in classes:
        class_dir = out_dir / subtype / label
        class_dir.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            img_seed = derive_seed(seed, subtype, label, i)
            if subtype == "color":
                img = gen_color_image(label, img_seed, size, paper_red=paper_red)
            else:
                img = gen_shape_image(label, img_seed, size)
            path = class_dir / f"{label}_{i:05d}.png"
            save_png(img, path)
            manifest.entries.append(ManifestEntry(str(path), subtype, label))
    manifest.save(out_dir / f"{subtype}_manifest.csv")
    return manifest


_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}


def ingest_texture_dir(root_dir, size: int, out_dir) -> tuple:
    """Resize an external texture corpus into a labeled manifest.

    root_dir must hold one subdirectory per texture class; class order is the
    lexicographic directory order.  Unreadable images are skipped with a
    warning and returned in the skip list.
    """
    root = Path(root_dir)
    out_dir = Path(out_dir)
    class_dirs = sorted([d for d in root.iterdir() if d.is_dir()], key=lambda d: d.name)
    if not class_dirs:
        raise ValueError(f"{root}: no class subdirectories found")
    manifest = DatasetManifest(image_size=size)
    skipped = []
    for class_dir in class_dirs:
        label = class_dir.name
        files = sorted(p for p in class_dir.iterdir()
                       if p.is_file() and p.suffix.lower() in _IMAGE_SUFFIXES)
        for src in files:
            try:
                img = load_image(src)
            except Exception as exc:  # corrupt or non-image file
                warnings.warn(f"skipping unreadable image {src}: {exc}")
                skipped.append(str(src))
                continue
            resized = resize_image(img, size, size)
            dst = out_dir / "texture" / label / (src.stem + ".png")
            save_png(resized, dst)
            manifest.entries.append(ManifestEntry(str(dst), "texture", label))
    if not manifest.entries:
        raise ValueError(f"{root}: no readable images in any class directory")
    manifest.save(out_dir / "texture_manifest.csv")
    return manifest, skipped


def gen_texture_standin(n_classes: int, per_class: int, seed: int, size: int,
                        out_dir) -> DatasetManifest:
    """Procedural texture corpus used when no external texture set is available.

    Each class is an oriented sinusoidal grating with class-specific frequency
    and tint; per-image phase and speckle come from the derived seed.  Class
    directories are named tex00, tex01, ... so lexicographic order equals
    generation order.
    """
    if n_classes < 1 or per_class < 1:
        raise ValueError("n_classes and per_class must be >= 1")
    out_dir = Path(out_dir)
    manifest = DatasetManifest(seed=seed, image_size=size)
    ys, xs = np.mgrid[0:size, 0:size]
    for ci in range(n_classes):
        label = f"tex{ci:02d}"
        theta = math.pi * ci / n_classes
        freq = 2.0 + (ci * 7) % 11
        tint_rng = np.random.default_rng(derive_seed(seed, "texture-tint", ci))
        tint = 0.45 + 0.55 * tint_rng.random(3)
        class_dir = out_dir / "texture" / label
        class_dir.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            rng = np.random.default_rng(derive_seed(seed, "texture", label, i))
            phase = rng.uniform(0.0, 2.0 * math.pi)
            coord = (xs * math.cos(theta) + ys * math.sin(theta)) / size
            wave = 0.5 + 0.5 * np.sin(2.0 * math.pi * freq * coord + phase)
            speckle = rng.normal(0.0, 0.08, size=(size, size))
            gray = np.clip(0.15 + 0.7 * wave + speckle, 0.0, 1.0)
            img = np.floor(gray[:, :, None] * tint[None, None, :] * 255.0 + 0.5)
            img = img.clip(0, 255).astype(np.uint8)
            path = class_dir / f"{label}_{i:05d}.png"
            save_png(img, path)
            manifest.entries.append(ManifestEntry(str(path), "texture", label))
    manifest.save(out_dir / "texture_manifest.csv")
    return manifest
