"""Procedural generator for InShape-style images.

Each image holds repeated instances of a few object types (shape class plus
quantized color and scale) placed on a grid or by a Poisson point process,
over a base color perturbed by smooth value noise.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .imageio import read_image, write_image

logger = logging.getLogger(__name__)

SCALE_MIN = 0.05
SCALE_MAX = 0.20
SCALE_STEP = 0.0125
SCALE_GRID = tuple(round(SCALE_MIN + i * SCALE_STEP, 4) for i in range(13))
MAX_NOISE_AMPLITUDE = 15.0
TYPE_RETRIES = 100
LAYOUT_ATTEMPTS = 1000

LINE_ASPECT = 6.0
DIAMOND_RATIO = 0.6
ELLIPSE_RATIO_RANGE = (0.6, 1.0)


class ShapeClass(str, Enum):
    LINED = "lined"
    TRIANGLE = "triangle"
    RECTANGLE = "rectangle"
    DIAMOND = "diamond"
    PENTAGON = "pentagon"
    HEXAGON = "hexagon"
    ELLIPSE = "ellipse"


SHAPES = tuple(ShapeClass)


@dataclass(frozen=True)
class ObjectType:
    shape: ShapeClass
    color: tuple[int, int, int]
    scale: float
    rotation: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "shape", ShapeClass(self.shape))
        object.__setattr__(self, "color", tuple(int(c) for c in self.color))
        if not SCALE_MIN - 1e-12 <= self.scale <= SCALE_MAX + 1e-12:
            raise ValueError(f"scale {self.scale} outside [{SCALE_MIN}, {SCALE_MAX}]")
        if any(not 0 <= c <= 255 for c in self.color) or len(self.color) != 3:
            raise ValueError(f"color {self.color} is not an 8-bit RGB triple")
        if not 0.0 <= self.rotation < 2 * math.pi:
            raise ValueError(f"rotation {self.rotation} outside [0, 2pi)")

    def to_dict(self) -> dict:
        return {"shape": self.shape.value, "color": list(self.color),
                "scale": self.scale, "rotation": self.rotation}

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectType":
        return cls(ShapeClass(d["shape"]), tuple(d["color"]), float(d["scale"]), float(d["rotation"]))


@dataclass
class ShapeInstance:
    type: ObjectType
    center: tuple[float, float]
    bbox: tuple[int, int, int, int]  # x0, y0, x1, y1; x1/y1 exclusive


@dataclass(frozen=True)
class AlignedGrid:
    rows: int
    cols: int
    jitter: float = 0.0

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid needs at least one row and column")
        if not 0.0 <= self.jitter < 0.5:
            raise ValueError(f"jitter {self.jitter} outside [0, 0.5)")


@dataclass(frozen=True)
class PoissonProcess:
    expected_count: float
    min_center_separation: float = 0.0

    def __post_init__(self):
        if self.expected_count <= 0:
            raise ValueError("expected_count must be positive")
        if self.min_center_separation < 0:
            raise ValueError("min_center_separation must be >= 0")


LayoutSpec = Union[AlignedGrid, PoissonProcess]


@dataclass(frozen=True)
class BackgroundSpec:
    color: tuple[int, int, int]
    noise_amplitude: float = 12.0  # in 8-bit units, at most 15
    noise_cells: int = 8
    noise_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.noise_amplitude <= MAX_NOISE_AMPLITUDE:
            raise ValueError(f"noise amplitude {self.noise_amplitude} outside [0, 15]")


@dataclass
class ImageRecord:
    id: str
    width: int
    height: int
    background: Optional[BackgroundSpec]
    instances: list[ShapeInstance] = field(default_factory=list)
    types_present: list[ObjectType] = field(default_factory=list)

    def type_index(self, t: ObjectType) -> int:
        return self.types_present.index(t)

    def validate(self) -> None:
        counts = {t: 0 for t in self.types_present}
        for inst in self.instances:
            if inst.type not in counts:
                raise ValueError(f"{self.id}: instance type missing from types_present")
            counts[inst.type] += 1
            x0, y0, x1, y1 = inst.bbox
            if not (0 <= x0 < x1 <= self.width and 0 <= y0 < y1 <= self.height):
                raise ValueError(f"{self.id}: bbox {inst.bbox} outside image")
        for t, c in counts.items():
            if c < 2:
                raise ValueError(f"{self.id}: type {t} has {c} instances, need >= 2")


@dataclass
class GeneratorConfig:
    num_images: int = 2000
    width: int = 512
    height: int = 512
    types_per_image: tuple[int, int] = (1, 3)
    splits: tuple[float, float, float] = (0.8, 0.1, 0.1)
    grid_probability: float = 0.5
    max_grid_jitter: float = 0.15
    poisson_expected: tuple[float, float] = (3.0, 12.0)
    separation_factor: float = 1.2
    noise_amplitude: float = 12.0
    noise_cells: int = 8
    min_background_contrast: float = 60.0
    layout_retries: int = 10
    image_format: str = "ppm"

    def __post_init__(self):
        self.types_per_image = tuple(int(v) for v in self.types_per_image)
        self.splits = tuple(float(v) for v in self.splits)
        self.poisson_expected = tuple(float(v) for v in self.poisson_expected)
        lo, hi = self.types_per_image
        if not 1 <= lo <= hi:
            raise ValueError(f"bad types_per_image {self.types_per_image}")
        if len(self.splits) != 3 or abs(sum(self.splits) - 1.0) > 1e-9 or min(self.splits) < 0:
            raise ValueError(f"splits must be three non-negative fractions summing to 1, got {self.splits}")
        if self.num_images < 0:
            raise ValueError("num_images must be >= 0")
        if self.image_format not in ("ppm", "png"):
            raise ValueError(f"unknown image_format {self.image_format!r}")
        if not 0 <= self.noise_amplitude <= MAX_NOISE_AMPLITUDE:
            raise ValueError("noise_amplitude must lie in [0, 15]")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown generator config keys: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------
# geometry


def ellipse_axis_ratio(t: ObjectType) -> float:
    """Axis ratio of an ellipse type; a pure function of the type so every
    instance of the type renders identically."""
    key = (SHAPES.index(t.shape), *t.color, int(round(t.scale * 1e4)), int(round(t.rotation * 1e9)) & 0xFFFFFFFF)
    u = np.random.default_rng(list(key)).random()
    lo, hi = ELLIPSE_RATIO_RANGE
    return lo + (hi - lo) * u


def _regular_polygon(k: int, radius: float) -> np.ndarray:
    ang = -math.pi / 2 + 2 * math.pi * np.arange(k) / k
    return np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)


def shape_vertices(t: ObjectType, size: float) -> Optional[np.ndarray]:
    """Unrotated convex polygon (counter-clockwise in image coordinates) or
    None for the ellipse."""
    h = size / 2
    if t.shape is ShapeClass.LINED:
        w = size / LINE_ASPECT / 2
        return np.array([[-h, -w], [h, -w], [h, w], [-h, w]])
    if t.shape is ShapeClass.RECTANGLE:
        return np.array([[-h, -h], [h, -h], [h, h], [-h, h]])
    if t.shape is ShapeClass.DIAMOND:
        return np.array([[0, -h], [DIAMOND_RATIO * h, 0], [0, h], [-DIAMOND_RATIO * h, 0]])
    if t.shape is ShapeClass.TRIANGLE:
        return _regular_polygon(3, h)
    if t.shape is ShapeClass.PENTAGON:
        return _regular_polygon(5, h)
    if t.shape is ShapeClass.HEXAGON:
        return _regular_polygon(6, h)
    return None


def shape_size(t: ObjectType, width: int, height: int) -> float:
    return t.scale * min(width, height)


def circumradius(t: ObjectType, width: int, height: int) -> float:
    size = shape_size(t, width, height)
    verts = shape_vertices(t, size)
    if verts is None:
        return size / 2
    return float(np.max(np.hypot(verts[:, 0], verts[:, 1])))


def shape_mask(t: ObjectType, center, width: int, height: int):
    """Rasterize one instance. Returns (mask, x0, y0) where mask is the boolean
    window of the canvas starting at column x0, row y0. A pixel belongs to the
    shape when its center lies inside the geometry."""
    cx, cy = center
    size = shape_size(t, width, height)
    r = circumradius(t, width, height)
    x0 = max(int(math.floor(cx - r - 1)), 0)
    y0 = max(int(math.floor(cy - r - 1)), 0)
    x1 = min(int(math.ceil(cx + r + 1)) + 1, width)
    y1 = min(int(math.ceil(cy + r + 1)) + 1, height)
    if x1 <= x0 or y1 <= y0:
        return np.zeros((0, 0), dtype=bool), x0, y0
    xs = np.arange(x0, x1) + 0.5 - cx
    ys = np.arange(y0, y1) + 0.5 - cy
    px, py = np.meshgrid(xs, ys)
    # rotate sample points into the shape frame
    c, s = math.cos(t.rotation), math.sin(t.rotation)
    u = c * px + s * py
    v = -s * px + c * py
    verts = shape_vertices(t, size)
    if verts is None:
        a = size / 2
        b = a * ellipse_axis_ratio(t)
        mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    else:
        mask = np.ones(u.shape, dtype=bool)
        nxt = np.roll(verts, -1, axis=0)
        for (ax, ay), (bx, by) in zip(verts, nxt):
            cross = (bx - ax) * (v - ay) - (by - ay) * (u - ax)
            mask &= cross >= -1e-9
    return mask, x0, y0


def tight_bbox(mask: np.ndarray, x0: int, y0: int) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("empty shape mask")
    return (x0 + int(cols[0]), y0 + int(rows[0]), x0 + int(cols[-1]) + 1, y0 + int(rows[-1]) + 1)


# --------------------------------------------------------------------------
# sampling


def _color_distance(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)))


def sample_types(rng: np.random.Generator, config: GeneratorConfig, k: Optional[int] = None,
                 background=None) -> list[ObjectType]:
    """Draw pairwise-distinct object types with 8-bit colors and grid scales.

    When ``background`` is given, colors closer to it than
    ``config.min_background_contrast`` are redrawn.
    """
    if k is None:
        lo, hi = config.types_per_image
        k = int(rng.integers(lo, hi + 1))
    types: list[ObjectType] = []
    retries = 0
    while len(types) < k:
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        color = tuple(int(c) for c in rng.integers(0, 256, size=3))
        scale = SCALE_GRID[int(rng.integers(len(SCALE_GRID)))]
        rotation = float(rng.uniform(0.0, 2 * math.pi))
        if rotation >= 2 * math.pi:
            rotation = 0.0
        t = ObjectType(shape, color, scale, rotation)
        ok = t not in types
        if ok and background is not None:
            ok = _color_distance(color, background) >= config.min_background_contrast
        if ok:
            types.append(t)
            continue
        retries += 1
        if retries > TYPE_RETRIES:
            raise RuntimeError(f"could not draw {k} distinct object types after {TYPE_RETRIES} retries")
    return types


def _instance_at(t: ObjectType, center, width, height) -> ShapeInstance:
    mask, x0, y0 = shape_mask(t, center, width, height)
    return ShapeInstance(t, (float(center[0]), float(center[1])), tight_bbox(mask, x0, y0))


def layout_instances(rng: np.random.Generator, t: ObjectType, layout: LayoutSpec, width: int, height: int,
                     region=None, occupied=None) -> list[ShapeInstance]:
    """Place instances of one type on the canvas.

    ``region`` restricts grid lattices to a sub-rectangle (x0, y0, x1, y1).
    ``occupied`` is a list of (cx, cy, radius) discs already used by other
    types; candidates whose circumscribed disc intersects one are dropped.
    """
    r = circumradius(t, width, height)
    if 2 * r > min(width, height):
        raise ValueError(f"canvas {width}x{height} too small for a {t.shape.value} at scale {t.scale}")
    occupied = occupied or []

    def clear_of_others(cx, cy):
        return all(math.hypot(cx - ox, cy - oy) >= r + orad for ox, oy, orad in occupied)

    out: list[ShapeInstance] = []
    if isinstance(layout, AlignedGrid):
        rx0, ry0, rx1, ry1 = region if region is not None else (0, 0, width, height)
        cw = (rx1 - rx0) / layout.cols
        ch = (ry1 - ry0) / layout.rows
        jit = rng.uniform(-layout.jitter, layout.jitter, size=(layout.rows, layout.cols, 2))
        for i in range(layout.rows):
            for j in range(layout.cols):
                cx = rx0 + (j + 0.5) * cw + jit[i, j, 0] * cw
                cy = ry0 + (i + 0.5) * ch + jit[i, j, 1] * ch
                cx = min(max(cx, r), width - r)
                cy = min(max(cy, r), height - r)
                if clear_of_others(cx, cy):
                    out.append(_instance_at(t, (cx, cy), width, height))
        return out

    target = int(rng.poisson(layout.expected_count))
    centers: list[tuple[float, float]] = []
    attempts = 0
    while len(centers) < target and attempts < LAYOUT_ATTEMPTS:
        attempts += 1
        cx = float(rng.uniform(r, width - r))
        cy = float(rng.uniform(r, height - r))
        if layout.min_center_separation > 0 and any(
                math.hypot(cx - px, cy - py) < layout.min_center_separation for px, py in centers):
            continue
        if not clear_of_others(cx, cy):
            continue
        centers.append((cx, cy))
    return [_instance_at(t, c, width, height) for c in centers]


def _random_layout(rng, t: ObjectType, config: GeneratorConfig):
    """Pick a layout for one type: returns (layout, region)."""
    W, H = config.width, config.height
    r = circumradius(t, W, H)
    sep = config.separation_factor * 2 * r
    if rng.random() < config.grid_probability:
        max_cols = max(int(W // sep), 1)
        max_rows = max(int(H // sep), 1)
        cols = int(rng.integers(1, min(max_cols, 6) + 1))
        rows = int(rng.integers(1, min(max_rows, 6) + 1))
        if rows * cols < 2:
            cols = 2 if max_cols >= 2 else 1
            rows = 1 if cols == 2 else 2
        jitter = float(rng.uniform(0.0, config.max_grid_jitter))
        gw, gh = cols * sep, rows * sep
        rx0 = float(rng.uniform(0, max(W - gw, 0)))
        ry0 = float(rng.uniform(0, max(H - gh, 0)))
        region = (rx0, ry0, min(rx0 + gw, W), min(ry0 + gh, H))
        return AlignedGrid(rows, cols, jitter), region
    lo, hi = config.poisson_expected
    return PoissonProcess(float(rng.uniform(lo, hi)), sep), None


# --------------------------------------------------------------------------
# rendering


def value_noise(bg: BackgroundSpec, width: int, height: int) -> np.ndarray:
    """Smooth noise in [-amplitude, amplitude], bilinear over a coarse grid."""
    rng = np.random.default_rng(bg.noise_seed)
    n = max(int(bg.noise_cells), 1)
    lattice = rng.uniform(-1.0, 1.0, size=(n + 1, n + 1))
    gy = (np.arange(height) + 0.5) / height * n
    gx = (np.arange(width) + 0.5) / width * n
    iy = np.minimum(gy.astype(int), n - 1)
    ix = np.minimum(gx.astype(int), n - 1)
    fy = (gy - iy)[:, None]
    fx = (gx - ix)[None, :]
    # smoothstep fade
    fy = fy * fy * (3 - 2 * fy)
    fx = fx * fx * (3 - 2 * fx)
    v00 = lattice[iy][:, ix]
    v01 = lattice[iy][:, ix + 1]
    v10 = lattice[iy + 1][:, ix]
    v11 = lattice[iy + 1][:, ix + 1]
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    return bg.noise_amplitude * (top * (1 - fy) + bot * fy)


def render_background(bg: BackgroundSpec, width: int, height: int) -> np.ndarray:
    noise = value_noise(bg, width, height)
    img = np.asarray(bg.color, dtype=np.float64)[None, None, :] + noise[:, :, None]
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def rasterize(record: ImageRecord) -> np.ndarray:
    """Render the record to an HxWx3 uint8 raster.

    Instances are painted back to front in list order. Each instance's bbox is
    rewritten in place to the tight extent of its rasterized shape.
    """
    if record.background is None:
        raise ValueError(f"{record.id}: record carries no background spec")
    img = render_background(record.background, record.width, record.height)
    for inst in record.instances:
        mask, x0, y0 = shape_mask(inst.type, inst.center, record.width, record.height)
        h, w = mask.shape
        img[y0:y0 + h, x0:x0 + w][mask] = inst.type.color
        inst.bbox = tight_bbox(mask, x0, y0)
    return img


# --------------------------------------------------------------------------
# dataset


def image_id(index: int) -> str:
    return f"img_{index:06d}"


def generate_image(config: GeneratorConfig, seed: int, index: int):
    """Generate image ``index`` of the dataset keyed by ``seed``.

    Uses its own RNG substream, so the result does not depend on which other
    images are generated or in what order.
    """
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(index)])
    W, H = config.width, config.height
    bg_color = tuple(int(c) for c in rng.integers(0, 256, size=3))
    bg = BackgroundSpec(bg_color, config.noise_amplitude, config.noise_cells, int(rng.integers(0, 2**63)))
    types = sample_types(rng, config, background=bg_color)

    instances: list[ShapeInstance] = []
    kept: list[ObjectType] = []
    occupied: list[tuple[float, float, float]] = []
    for ti, t in enumerate(types):
        placed: list[ShapeInstance] = []
        for _ in range(config.layout_retries):
            layout, region = _random_layout(rng, t, config)
            placed = layout_instances(rng, t, layout, W, H, region=region, occupied=occupied)
            if len(placed) >= 2:
                break
        if len(placed) < 2 and not kept:
            r = circumradius(t, W, H)
            placed = layout_instances(rng, t, AlignedGrid(1, 2, 0.0), W, H, occupied=occupied)
            if len(placed) < 2:
                placed = [_instance_at(t, (r, r), W, H), _instance_at(t, (W - r, H - r), W, H)]
        if len(placed) < 2:
            continue
        r = circumradius(t, W, H)
        occupied.extend((p.center[0], p.center[1], r) for p in placed)
        instances.extend(placed)
        kept.append(t)

    record = ImageRecord(image_id(index), W, H, bg, instances, kept)
    raster = rasterize(record)
    record.validate()
    return record, raster


@dataclass
class DatasetManifest:
    seed: int
    config: GeneratorConfig
    records: list[ImageRecord]
    files: list[str]
    splits: list[str]

    def split(self, name: str) -> list[ImageRecord]:
        return [r for r, s in zip(self.records, self.splits) if s == name]

    def split_indices(self, name: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == name]

    def to_dict(self) -> dict:
        images = []
        for rec, fname, sp in zip(self.records, self.files, self.splits):
            images.append({
                "id": rec.id,
                "file": fname,
                "width": rec.width,
                "height": rec.height,
                "split": sp,
                "types": [t.to_dict() for t in rec.types_present],
                "instances": [
                    {"type_index": rec.type_index(inst.type),
                     "center": [inst.center[0], inst.center[1]],
                     "bbox": list(inst.bbox)}
                    for inst in rec.instances
                ],
            })
        return {"seed": self.seed, "config": self.config.to_dict(), "images": images}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        records, files, splits = [], [], []
        for img in d["images"]:
            types = [ObjectType.from_dict(t) for t in img["types"]]
            insts = [ShapeInstance(types[i["type_index"]], tuple(i["center"]), tuple(i["bbox"]))
                     for i in img["instances"]]
            records.append(ImageRecord(img["id"], img["width"], img["height"], None, insts, types))
            files.append(img["file"])
            splits.append(img["split"])
        return cls(int(d["seed"]), GeneratorConfig.from_dict(d["config"]), records, files, splits)


def split_assignment(n: int, fractions) -> list[str]:
    """Contiguous train/val/test blocks; images are i.i.d. so no shuffling is needed."""
    n_train = int(math.floor(n * fractions[0] + 1e-9))
    n_val = int(math.floor(n * fractions[1] + 1e-9))
    return ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)


def write_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(manifest.to_json())


def read_manifest(path) -> DatasetManifest:
    return DatasetManifest.from_dict(json.loads(Path(path).read_text()))


def max_workers() -> int:
    try:
        return max(int(os.environ.get("SIMCO_THREADS", "1")), 1)
    except ValueError:
        return 1


def _generate_and_write(args):
    config, seed, index, path = args
    record, raster = generate_image(config, seed, index)
    write_image(path, raster)
    return record


def generate_dataset(config: GeneratorConfig, seed: int, out_dir) -> DatasetManifest:
    """Write rasters under ``out_dir/images`` and ``out_dir/manifest.json``."""
    out = Path(out_dir)
    img_dir = out / "images"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {img_dir}: {exc}") from exc
    files = [f"images/{image_id(i)}.{config.image_format}" for i in range(config.num_images)]
    jobs = [(config, seed, i, out / f) for i, f in enumerate(files)]
    workers = max_workers()
    try:
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                records = list(pool.map(_generate_and_write, jobs, chunksize=16))
        else:
            records = [_generate_and_write(j) for j in jobs]
    except OSError as exc:
        raise OSError(f"failed writing dataset under {out}: {exc}") from exc
    manifest = DatasetManifest(int(seed), config, records, files,
                               split_assignment(config.num_images, config.splits))
    write_manifest(manifest, out / "manifest.json")
    logger.info("wrote %d images to %s", len(records), out)
    return manifest


def load_raster(dataset_dir, manifest: DatasetManifest, index: int) -> np.ndarray:
    return read_image(Path(dataset_dir) / manifest.files[index])
