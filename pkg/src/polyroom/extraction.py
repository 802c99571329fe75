"""Vectorized floorplan extraction from decoder output.

Corner vertices are the union of a probability threshold and an
angle-cosine threshold over the closed N-vertex sequence; the surviving
subsequence is then reduced to a minimal vertex set with Douglas-Peucker.
Padded query rows are dropped; rooms that collapse are reported, never
silently repaired.
"""

from __future__ import annotations

import base64
import json
import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, InvalidPolygonError
from .geometry import Polygon, dp_simplify, ensure_clockwise, vertex_angle_cosines
from .model import DecoderOutput
from .queryinit import RoomQueries
from .representation import normalize_start

REFERENCE_IMAGE_SIZE = 256.0  # dp_eps is expressed in pixels of this grid


@dataclass
class ExtractionConfig:
    t_pro: float = 0.01
    t_ang: float = math.sqrt(3.0) / 2.0
    dp_eps: float = 4.0

    def __post_init__(self):
        if not (0.0 <= self.t_pro <= 1.0 and 0.0 <= self.t_ang <= 1.0):
            raise DataError("thresholds must lie in [0, 1]")
        if self.dp_eps < 0:
            raise DataError("dp_eps must be >= 0")


@dataclass
class ExtractedRoom:
    polygon: Polygon
    source_index: int
    corner_probs: np.ndarray   # probability of each kept vertex
    simple: bool


@dataclass
class VectorFloorplan:
    rooms: list
    width: float
    height: float
    dropped: list = field(default_factory=list)   # (source_index, reason)

    @property
    def polygons(self) -> list:
        return [r.polygon for r in self.rooms]

    def non_simple_count(self) -> int:
        return sum(1 for r in self.rooms if not r.simple)


def select_vertices(probs: np.ndarray, coords: np.ndarray, cfg: ExtractionConfig) -> np.ndarray:
    """Indices kept by probability or by turning angle, in sequence order.

    A vertex stays if its corner probability clears t_pro or the absolute
    cosine of its vertex angle (cyclic neighbors) is below t_ang. Fewer
    than 3 survivors fall back to the full index range so the later DP
    pass still has a polygon to work with.
    """
    probs = np.asarray(probs, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    cos = vertex_angle_cosines(coords)
    selected = (probs > cfg.t_pro) | (np.abs(cos) < cfg.t_ang)
    idx = np.nonzero(selected)[0]
    if idx.size < 3:
        idx = np.arange(coords.shape[0])
    return idx


def extract_floorplan(out: DecoderOutput, q_meta: RoomQueries, cfg: ExtractionConfig,
                      width: float, height: float) -> VectorFloorplan:
    """Denormalize, select, and polygonize the first valid_count rows."""
    probs_all = out.corner_probabilities()
    coords_all = out.final_queries
    eps = cfg.dp_eps * max(width, height) / REFERENCE_IMAGE_SIZE
    rooms = []
    dropped = []
    for r in range(q_meta.valid_count):
        coords = coords_all[r] * np.array([width, height])
        probs = probs_all[r]
        idx = select_vertices(probs, coords, cfg)
        try:
            poly = Polygon(coords[idx])
            poly = dp_simplify(poly, eps)
            poly = ensure_clockwise(poly)
            # inverse of the encoding convention: start at the upper left
            poly = normalize_start(poly)
        except (InvalidPolygonError, DataError) as exc:
            dropped.append((r, str(exc)))
            continue
        kept = _match_kept_probs(poly, coords, probs)
        rooms.append(ExtractedRoom(poly, r, kept, poly.is_simple()))
    return VectorFloorplan(rooms, width, height, dropped)


def _match_kept_probs(poly: Polygon, coords: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Probability of the sequence vertex each kept polygon vertex came from."""
    out = np.empty(len(poly))
    for i, v in enumerate(poly.vertices):
        j = int(np.argmin(np.sum((coords - v) ** 2, axis=1)))
        out[i] = probs[j]
    return out


# -- serialization -------------------------------------------------------------

def export_json(fp: VectorFloorplan, path: str, scene_id: str = "") -> None:
    """Floorplan JSON whose `rooms` key matches the scene manifest schema."""
    payload = {
        "id": scene_id,
        "width": fp.width,
        "height": fp.height,
        "rooms": [r.polygon.vertices.tolist() for r in fp.rooms],
        "meta": {
            "sources": [r.source_index for r in fp.rooms],
            "corner_probs": [r.corner_probs.tolist() for r in fp.rooms],
            "non_simple": fp.non_simple_count(),
            "dropped": fp.dropped,
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)


def load_floorplan_json(path: str):
    with open(path) as fh:
        payload = json.load(fh)
    rooms = [Polygon(r) for r in payload["rooms"]]
    return payload["id"], rooms, payload["width"], payload["height"]


def _png_gray(grid: np.ndarray) -> bytes:
    """Minimal 8-bit grayscale PNG encoder (stdlib zlib only)."""
    data = np.clip(np.round(np.asarray(grid, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape

    def chunk(tag: bytes, body: bytes) -> bytes:
        return (
            struct.pack(">I", len(body)) + tag + body
            + struct.pack(">I", zlib.crc32(tag + body) & 0xFFFFFFFF)
        )

    header = struct.pack(">IIBBBBB", w, h, 8, 0, 0, 0, 0)
    raw = b"".join(b"\x00" + data[row].tobytes() for row in range(h))
    return (
        b"\x89PNG\r\n\x1a\n"
        + chunk(b"IHDR", header)
        + chunk(b"IDAT", zlib.compress(raw))
        + chunk(b"IEND", b"")
    )


_PALETTE = ["#e6553f", "#3f8fe6", "#47b26b", "#c98f2c", "#8f5fd6", "#2cb5ba"]


def export_svg(fp: VectorFloorplan, path: str, density: np.ndarray | None = None) -> None:
    """One closed path per room, with the density map as optional underlay."""
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" '
        f'width="{fp.width:g}" height="{fp.height:g}" '
        f'viewBox="0 0 {fp.width:g} {fp.height:g}">',
    ]
    if density is not None:
        png = base64.b64encode(_png_gray(density)).decode("ascii")
        lines.append(
            f'<image href="data:image/png;base64,{png}" x="0" y="0" '
            f'width="{fp.width:g}" height="{fp.height:g}" opacity="0.6"/>'
        )
    for i, room in enumerate(fp.rooms):
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in room.polygon.vertices)
        color = _PALETTE[i % len(_PALETTE)]
        lines.append(
            f'<polygon points="{pts}" fill="{color}" fill-opacity="0.35" '
            f'stroke="{color}" stroke-width="1.5"/>'
        )
    lines.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
