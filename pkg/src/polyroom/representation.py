"""Fixed-length labeled vertex sequences for room contours.

A room polygon becomes exactly N vertices sampled at equal arc-length
intervals along its boundary, starting at the upper-left corner and moving
clockwise. Each true corner then replaces its arc-length-nearest sample
and is labeled 1; everything else stays labeled 0. The mapping is exactly
invertible for polygons whose corners sit at least two sample spacings
apart along the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, DegenerateResultError, InvalidPolygonError
from .geometry import Point2, Polygon, edge_lengths, signed_area

DEFAULT_VERTICES_PER_ROOM = 40
DEFAULT_MAX_ROOMS = 20


@dataclass(frozen=True)
class LabeledVertex:
    p: Point2
    l: int  # 1 = corner, 0 = intermediate sample


@dataclass
class RoomSequence:
    """Exactly N samples of one room contour, clockwise from upper-left.

    coords is (N, 2) float64 in the source pixel frame; labels is (N,)
    uint8 with 1 marking true polygon corners (all zero before snapping).
    """

    coords: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise InvalidPolygonError("coords must be (N, 2)")
        if self.labels.shape != (self.coords.shape[0],):
            raise InvalidPolygonError("labels must be (N,)")

    def __len__(self) -> int:
        return self.coords.shape[0]

    def __getitem__(self, j: int) -> LabeledVertex:
        x, y = self.coords[j]
        return LabeledVertex(Point2(float(x), float(y)), int(self.labels[j]))

    @property
    def corner_count(self) -> int:
        return int(self.labels.sum())


@dataclass
class SampledFloorplan:
    rooms: list
    width: float
    height: float


def normalize_start(p: Polygon) -> Polygon:
    """Rotate the vertex cycle so it starts at the upper-left corner.

    Upper-left means minimal x + y, ties broken by smaller y then smaller x.
    The polygon must already be clockwise.
    """
    if signed_area(p) <= 0:
        raise InvalidPolygonError("normalize_start expects a clockwise polygon")
    v = p.vertices
    key = np.lexsort((v[:, 0], v[:, 1], v[:, 0] + v[:, 1]))
    start = int(key[0])
    if start == 0:
        return p
    return Polygon(np.roll(v, -start, axis=0))


def uniform_sample(p: Polygon, n: int) -> RoomSequence:
    """Sample n vertices at equal arc-length intervals from vertex 0.

    All labels are zero; vertex 0 of the output coincides exactly with
    vertex 0 of the polygon.
    """
    corners = len(p)
    if n < max(4, corners):
        raise CapacityError(f"n={n} below max(4, corner count {corners})")
    v = p.vertices
    lens = edge_lengths(p)
    cum = np.concatenate([[0.0], np.cumsum(lens)])
    total = cum[-1]
    out = np.empty((n, 2), dtype=np.float64)
    out[0] = v[0]
    for k in range(1, n):
        s = k * total / n
        e = int(np.searchsorted(cum, s, side="right")) - 1
        e = min(e, corners - 1)
        t = (s - cum[e]) / lens[e]
        out[k] = v[e] + t * (v[(e + 1) % corners] - v[e])
    return RoomSequence(out, np.zeros(n, dtype=np.uint8))


def snap_corners(seq: RoomSequence, p: Polygon) -> RoomSequence:
    """Replace each corner's arc-length-nearest sample with the exact corner.

    Collisions fall forward: when two corners elect the same sample index,
    the later corner (in traversal order) takes the next free index
    clockwise. Snapped vertices carry label 1.
    """
    n = len(seq)
    corners = len(p)
    if corners > n:
        raise CapacityError(f"{corners} corners exceed sequence capacity {n}")
    lens = edge_lengths(p)
    cum = np.concatenate([[0.0], np.cumsum(lens)])
    total = cum[-1]
    coords = seq.coords.copy()
    labels = np.zeros(n, dtype=np.uint8)
    occupied = set()
    for i in range(corners):
        j = int(np.floor(cum[i] * n / total + 0.5)) % n
        while j in occupied:
            j = (j + 1) % n
        occupied.add(j)
        coords[j] = p.vertices[i]
        labels[j] = 1
    return RoomSequence(coords, labels)


def sequence_to_polygon(seq: RoomSequence) -> Polygon:
    """Polygon made of the label-1 vertices in sequence order."""
    idx = np.nonzero(seq.labels)[0]
    if idx.size < 3:
        raise DegenerateResultError(
            f"sequence holds {idx.size} corners, need at least 3"
        )
    try:
        return Polygon(seq.coords[idx])
    except InvalidPolygonError as exc:
        raise DegenerateResultError(str(exc)) from exc


def encode_room(p: Polygon, n: int = DEFAULT_VERTICES_PER_ROOM) -> RoomSequence:
    """normalize_start -> uniform_sample -> snap_corners in one call."""
    q = normalize_start(p)
    return snap_corners(uniform_sample(q, n), q)


def sample_floorplan(fp, n: int = DEFAULT_VERTICES_PER_ROOM) -> SampledFloorplan:
    """Encode every room of a floorplan; rooms with > n corners raise."""
    rooms = [encode_room(room, n) for room in fp.rooms]
    return SampledFloorplan(rooms, fp.width, fp.height)
