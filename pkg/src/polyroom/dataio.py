"""Scene ingestion, the on-disk scene format, and a synthetic generator.

A scene directory holds one `scene.json` manifest plus binary 8-bit PGM
(P5) files for the density map and each room mask. Ground-truth room
polygons are stored as pixel-space float lists in the JSON, so they round
trip losslessly. Synthetic densities are quantized to the 8-bit lattice at
generation time so they round trip too.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import (
    DataError,
    DegenerateExtentError,
    DimensionMismatchError,
    GenerationError,
    SchemaError,
)
from .geometry import Floorplan, Polygon, points_in_polygon

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=int)


@dataclass
class PointCloud:
    """Raw 3D points in meters, (P, 3) float64."""

    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.points.shape[0] == 0:
            raise DataError("point cloud is empty")
        if not np.all(np.isfinite(self.points)):
            raise DataError("point cloud holds non-finite coordinates")


@dataclass
class DensityMap:
    """Top-view point density, (H, W) float32 normalized so max = 1."""

    grid: np.ndarray
    width: int = 0
    height: int = 0

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float32)
        if self.grid.ndim != 2:
            raise DimensionMismatchError("density grid must be 2D")
        self.height, self.width = self.grid.shape
        if self.grid.min() < 0:
            raise DataError("density cells must be non-negative")


@dataclass
class InstanceMasks:
    """One binary (H, W) grid per detected room."""

    masks: list

    def __post_init__(self):
        self.masks = [np.asarray(m, dtype=bool) for m in self.masks]
        for m in self.masks:
            if m.ndim != 2:
                raise DimensionMismatchError("mask must be 2D")
            if not m.any():
                raise DataError("instance mask has no foreground")
        if len({m.shape for m in self.masks}) > 1:
            raise DimensionMismatchError("masks must share one grid size")

    def __len__(self) -> int:
        return len(self.masks)


@dataclass
class SceneRecord:
    id: str
    density: DensityMap
    gt: Floorplan
    masks: InstanceMasks | None = None


# -- density projection --------------------------------------------------------

def project_density(pc: PointCloud, w: int, h: int) -> DensityMap:
    """Histogram the cloud's x-y footprint onto a (h, w) grid.

    The axis-aligned bounding box gets a 5% margin on each side; a
    degenerate (single-point) extent falls back to a unit box so the cloud
    still lands in exactly one cell. Counts are normalized by the maximum.
    """
    xy = pc.points[:, :2]
    lo = xy.min(axis=0)
    hi = xy.max(axis=0)
    extent = hi - lo
    extent = np.where(extent > 0, extent, 1.0)
    lo = lo - 0.05 * extent
    hi = hi + 0.05 * extent
    span = hi - lo
    cols = np.floor((xy[:, 0] - lo[0]) / span[0] * w).astype(np.int64)
    rows = np.floor((xy[:, 1] - lo[1]) / span[1] * h).astype(np.int64)
    keep = (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
    grid = np.zeros((h, w), dtype=np.float64)
    np.add.at(grid, (rows[keep], cols[keep]), 1.0)
    peak = grid.max()
    if peak <= 0:
        raise DegenerateExtentError("no point landed inside the grid")
    return DensityMap((grid / peak).astype(np.float32))


def rasterize_polygon(poly: Polygon, w: int, h: int) -> np.ndarray:
    """Binary (h, w) mask of pixels whose centers lie inside the polygon."""
    ys, xs = np.mgrid[0:h, 0:w]
    pts = np.column_stack([xs.ravel() + 0.5, ys.ravel() + 0.5])
    return points_in_polygon(pts, poly.vertices).reshape(h, w)


# -- PGM I/O --------------------------------------------------------------------

def write_pgm(path: str, grid: np.ndarray) -> None:
    arr = np.asarray(grid)
    if arr.dtype == bool:
        data = np.where(arr, 255, 0).astype(np.uint8)
    else:
        data = np.clip(np.round(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    if fields[0] != b"P5":
        raise SchemaError(f"{path}: not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise SchemaError(f"{path}: expected maxval 255, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    data = np.frombuffer(blob[pos : pos + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise SchemaError(f"{path}: truncated pixel data")
    return data.reshape(h, w)


# -- scene serialization ---------------------------------------------------------

def save_scene(rec: SceneRecord, scene_dir: str) -> None:
    os.makedirs(scene_dir, exist_ok=True)
    mask_names = []
    if rec.masks is not None:
        for i, m in enumerate(rec.masks.masks):
            name = f"mask_{i:03d}.pgm"
            write_pgm(os.path.join(scene_dir, name), m)
            mask_names.append(name)
    write_pgm(os.path.join(scene_dir, "density.pgm"), rec.density.grid)
    manifest = {
        "id": rec.id,
        "width": rec.gt.width,
        "height": rec.gt.height,
        "rooms": [room.vertices.tolist() for room in rec.gt.rooms],
        "density": "density.pgm",
        "masks": mask_names,
    }
    with open(os.path.join(scene_dir, "scene.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_scene(scene_dir: str) -> SceneRecord:
    manifest_path = os.path.join(scene_dir, "scene.json")
    if not os.path.exists(manifest_path):
        raise DataError(f"no scene.json under {scene_dir}")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{manifest_path}: {exc}") from exc
    for key in ("id", "width", "height", "rooms", "density"):
        if key not in manifest:
            raise SchemaError(f"{manifest_path}: missing key '{key}'")
    w, h = manifest["width"], manifest["height"]
    rooms = [Polygon(r) for r in manifest["rooms"]]
    gt = Floorplan(rooms, w, h)
    density_raw = read_pgm(os.path.join(scene_dir, manifest["density"]))
    if density_raw.shape != (h, w):
        raise DimensionMismatchError(
            f"density is {density_raw.shape}, manifest says {(h, w)}"
        )
    density = DensityMap(density_raw.astype(np.float32) / 255.0)
    masks = None
    names = manifest.get("masks", [])
    if names:
        grids = []
        for name in names:
            path = os.path.join(scene_dir, name)
            if not os.path.exists(path):
                raise DataError(f"missing mask file {path}")
            m = read_pgm(path)
            if m.shape != (h, w):
                raise DimensionMismatchError(
                    f"mask {name} is {m.shape}, expected {(h, w)}"
                )
            grids.append(m > 127)
        masks = InstanceMasks(grids)
    return SceneRecord(manifest["id"], density, gt, masks)


# -- synthetic generation ---------------------------------------------------------

@dataclass
class SynthConfig:
    size: int = 256
    rooms_min: int = 1
    rooms_max: int = 4
    min_side: int = 16
    margin: int = 8
    gap: int = 3
    l_shape_prob: float = 0.4
    wall_points_per_px: float = 2.0
    wall_jitter: float = 0.5
    interior_point_rate: float = 0.02
    degrade_masks: bool = False
    p_drop: float = 0.05
    morph_min: int = 1
    morph_max: int = 3
    max_tries: int = 200

    def __post_init__(self):
        if self.rooms_min < 1:
            raise GenerationError("rooms_min must be >= 1")
        if self.rooms_max < self.rooms_min:
            raise GenerationError("rooms_max must be >= rooms_min")


def _l_shape(x0, y0, x1, y1, corner, nw, nh):
    """Clockwise (y-down) 6-corner L: a rectangle with one corner notched."""
    if corner == 0:  # top-left
        return [(x0 + nw, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0 + nh), (x0 + nw, y0 + nh)]
    if corner == 1:  # top-right
        return [(x0, y0), (x1 - nw, y0), (x1 - nw, y0 + nh), (x1, y0 + nh), (x1, y1), (x0, y1)]
    if corner == 2:  # bottom-right
        return [(x0, y0), (x1, y0), (x1, y1 - nh), (x1 - nw, y1 - nh), (x1 - nw, y1), (x0, y1)]
    return [(x0, y0), (x1, y0), (x1, y1), (x0 + nw, y1), (x0 + nw, y1 - nh), (x0, y1 - nh)]


def _place_rooms(rng: np.random.Generator, cfg: SynthConfig):
    n_rooms = int(rng.integers(cfg.rooms_min, cfg.rooms_max + 1))
    size = cfg.size
    span = size - 2 * cfg.margin
    if cfg.min_side > span:
        raise GenerationError(
            f"min_side {cfg.min_side} cannot fit inside size {size} "
            f"with margin {cfg.margin}"
        )
    max_side = min(span, max(cfg.min_side + 4, span // 2))
    boxes = []
    rooms = []
    for _ in range(n_rooms):
        placed = False
        for _ in range(cfg.max_tries):
            w = int(rng.integers(cfg.min_side, max_side + 1))
            h = int(rng.integers(cfg.min_side, max_side + 1))
            x0 = int(rng.integers(cfg.margin, size - cfg.margin - w + 1))
            y0 = int(rng.integers(cfg.margin, size - cfg.margin - h + 1))
            x1, y1 = x0 + w, y0 + h
            clash = any(
                x0 - cfg.gap < bx1 and x1 + cfg.gap > bx0
                and y0 - cfg.gap < by1 and y1 + cfg.gap > by0
                for bx0, by0, bx1, by1 in boxes
            )
            if clash:
                continue
            boxes.append((x0, y0, x1, y1))
            # notch spans stay >= a quarter side so corner arc gaps remain
            # comfortably above 2 * perimeter / N for N = 40
            legs_ok = w >= 24 and h >= 24
            if legs_ok and rng.random() < cfg.l_shape_prob:
                nw = int(rng.integers(max(6, w // 4), w - max(8, w // 4) + 1))
                nh = int(rng.integers(max(6, h // 4), h - max(8, h // 4) + 1))
                corner = int(rng.integers(0, 4))
                rooms.append(Polygon(_l_shape(x0, y0, x1, y1, corner, nw, nh)))
            else:
                rooms.append(Polygon([(x0, y0), (x1, y0), (x1, y1), (x0, y1)]))
            placed = True
            break
        if not placed and not rooms:
            raise GenerationError("could not place any room")
        if not placed:
            break  # fewer rooms than asked; still a valid scene
    return rooms


def _synthesize_density(rng: np.random.Generator, rooms, size: int, cfg: SynthConfig):
    pts = []
    for room in rooms:
        v = room.vertices
        nv = len(room)
        for i in range(nv):
            a, b = v[i], v[(i + 1) % nv]
            length = float(np.linalg.norm(b - a))
            count = max(1, int(length * cfg.wall_points_per_px))
            t = rng.random(count)
            wall = a[None, :] + t[:, None] * (b - a)[None, :]
            wall = wall + rng.normal(0.0, cfg.wall_jitter, wall.shape)
            pts.append(wall)
        # sparse interior points, rejection sampled inside the polygon
        x0, y0 = v.min(axis=0)
        x1, y1 = v.max(axis=0)
        want = max(1, int((x1 - x0) * (y1 - y0) * cfg.interior_point_rate))
        got = []
        for _ in range(20):
            cand = rng.random((want * 2, 2)) * [x1 - x0, y1 - y0] + [x0, y0]
            inside = points_in_polygon(cand, v)
            got.append(cand[inside])
            if sum(len(g) for g in got) >= want:
                break
        interior = np.concatenate(got, axis=0)[:want]
        if interior.size:
            pts.append(interior)
    allpts = np.concatenate(pts, axis=0)
    cols = np.floor(allpts[:, 0]).astype(np.int64)
    rows = np.floor(allpts[:, 1]).astype(np.int64)
    keep = (cols >= 0) & (cols < size) & (rows >= 0) & (rows < size)
    grid = np.zeros((size, size), dtype=np.float64)
    np.add.at(grid, (rows[keep], cols[keep]), 1.0)
    grid /= grid.max()
    # snap to the 8-bit lattice so the PGM round trip is exact
    grid = np.round(grid * 255.0) / 255.0
    return DensityMap(grid.astype(np.float32))


def _degrade(rng: np.random.Generator, masks, cfg: SynthConfig):
    out = []
    for m in masks:
        if rng.random() < cfg.p_drop:
            continue
        amount = int(rng.integers(cfg.morph_min, cfg.morph_max + 1))
        structure = np.ones((3, 3), dtype=bool)
        if rng.random() < 0.5:
            d = ndimage.binary_erosion(m, structure=structure, iterations=amount)
        else:
            d = ndimage.binary_dilation(m, structure=structure, iterations=amount)
        if not d.any():
            continue
        labels, count = ndimage.label(d, structure=FOUR_CONNECTED)
        if count > 1:
            sizes = ndimage.sum_labels(np.ones_like(labels), labels, range(1, count + 1))
            d = labels == (1 + int(np.argmax(sizes)))
        out.append(d)
    return out


def generate_scene(seed: int, cfg: SynthConfig | None = None, scene_id: str | None = None) -> SceneRecord:
    """Deterministic synthetic scene: rooms, density, and instance masks."""
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(seed)
    rooms = _place_rooms(rng, cfg)
    density = _synthesize_density(rng, rooms, cfg.size, cfg)
    masks = [rasterize_polygon(room, cfg.size, cfg.size) for room in rooms]
    if cfg.degrade_masks:
        degrade_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDE9]))
        masks = _degrade(degrade_rng, masks, cfg)
    gt = Floorplan(rooms, cfg.size, cfg.size)
    rec_masks = InstanceMasks(masks) if masks else None
    return SceneRecord(scene_id or f"scene_{seed:06d}", density, gt, rec_masks)


def generate_dataset(out_dir: str, scenes: int, seed: int, cfg: SynthConfig | None = None, threads: int = 1):
    """Write `scenes` scene directories plus an index manifest."""
    cfg = cfg or SynthConfig()
    os.makedirs(out_dir, exist_ok=True)
    ids = []
    seeds = [seed + i for i in range(scenes)]

    def build(s):
        rec = generate_scene(s, cfg)
        save_scene(rec, os.path.join(out_dir, rec.id))
        return rec.id

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            ids = list(pool.map(build, seeds))
    else:
        ids = [build(s) for s in seeds]
    index = {"scenes": ids, "seed": seed, "config": vars(cfg)}
    with open(os.path.join(out_dir, "index.json"), "w") as fh:
        json.dump(index, fh, indent=1)
    return ids


def load_dataset(data_dir: str) -> list:
    """Load every scene listed in index.json (or every scene.json subdir)."""
    index_path = os.path.join(data_dir, "index.json")
    if os.path.exists(index_path):
        with open(index_path) as fh:
            ids = json.load(fh)["scenes"]
    else:
        ids = sorted(
            d for d in os.listdir(data_dir)
            if os.path.exists(os.path.join(data_dir, d, "scene.json"))
        )
    if not ids:
        raise DataError(f"no scenes found under {data_dir}")
    return [load_scene(os.path.join(data_dir, sid)) for sid in ids]
