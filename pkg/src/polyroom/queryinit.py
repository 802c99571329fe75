"""Room-aware query initialization from instance masks.

Masks become clockwise contour polygons (border following along pixel
boundaries), each polygon is uniformly sampled into an N-vertex row of the
query array, and missing rooms are padded with seeded uniform noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .dataio import FOUR_CONNECTED, InstanceMasks
from .errors import CapacityError, EmptyMaskError
from .geometry import Polygon, dp_simplify, ensure_clockwise
from .representation import normalize_start, uniform_sample

MASK_SIMPLIFY_EPS = 1.0  # px tolerance applied to traced contours


@dataclass
class RoomQueries:
    """Explicit decoder state: (M, N, 2) normalized vertex coordinates.

    Rows 0..valid_count-1 trace mask contours clockwise from the upper
    left; the rest are random padding.
    """

    coords: np.ndarray
    valid_count: int

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 3 or self.coords.shape[2] != 2:
            raise CapacityError("queries must be (M, N, 2)")
        if not (0 <= self.valid_count <= self.coords.shape[0]):
            raise CapacityError("valid_count out of range")

    @property
    def m(self) -> int:
        return self.coords.shape[0]

    @property
    def n(self) -> int:
        return self.coords.shape[1]


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels, count = ndimage.label(mask, structure=FOUR_CONNECTED)
    if count == 0:
        raise EmptyMaskError("mask has no foreground component")
    if count == 1:
        return labels == 1
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, range(1, count + 1))
    return labels == (1 + int(np.argmax(sizes)))


def _trace_outer_contour(mask: np.ndarray) -> np.ndarray:
    """Walk the outer boundary of a 4-connected mask, foreground kept right.

    The walk runs along pixel-boundary lattice lines, so a filled w x h
    rectangle of pixels yields exactly its four outline corners. Returns
    the turn points of the loop, clockwise under image axes.
    """
    h, w = mask.shape
    padded = np.zeros((h + 2, w + 2), dtype=bool)
    padded[1:-1, 1:-1] = mask

    ys, xs = np.nonzero(padded)
    order = np.lexsort((xs, ys))
    sy, sx = int(ys[order[0]]), int(xs[order[0]])

    # directions: 0=E, 1=S, 2=W, 3=N as (dx, dy) on the corner lattice
    steps = {0: (1, 0), 1: (0, 1), 2: (-1, 0), 3: (0, -1)}

    def cell(cx, cy):
        return padded[cy, cx] if 0 <= cx < w + 2 and 0 <= cy < h + 2 else False

    start = (sx, sy)
    pos = start
    d = 0  # start eastbound along the top edge of the topmost-leftmost cell
    path = [pos]
    while True:
        dx, dy = steps[d]
        pos = (pos[0] + dx, pos[1] + dy)
        if pos == start:
            break
        x, y = pos
        # the four cells meeting at this lattice corner
        nw, ne = cell(x - 1, y - 1), cell(x, y - 1)
        sw, se = cell(x - 1, y), cell(x, y)
        around = {0: (se, ne), 1: (sw, se), 2: (nw, sw), 3: (ne, nw)}
        right_ahead, left_ahead = around[d]
        if right_ahead and not left_ahead:
            pass  # straight on
        elif right_ahead and left_ahead:
            d = (d - 1) % 4  # concave corner: turn left
        else:
            d = (d + 1) % 4  # convex corner (or diagonal pinch): turn right
        path.append(pos)
        if len(path) > 4 * (w + 2) * (h + 2):
            raise EmptyMaskError("contour walk failed to close")

    pts = np.asarray(path, dtype=np.float64) - 1.0  # undo the pad offset
    # keep only direction changes
    keep = [0]
    for i in range(1, len(pts)):
        prev_dir = pts[i] - pts[i - 1]
        next_dir = pts[(i + 1) % len(pts)] - pts[i]
        if not np.array_equal(prev_dir, next_dir):
            keep.append(i)
    first_dir = pts[0] - pts[-1]
    if np.array_equal(first_dir, pts[1] - pts[0]):
        keep = keep[1:]
    return pts[keep]


def mask_to_polygon(mask: np.ndarray) -> Polygon:
    """Clockwise outer contour of the largest 4-connected component."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMaskError("mask is empty")
    component = _largest_component(mask)
    contour = _trace_outer_contour(component)
    poly = dp_simplify(Polygon(contour), MASK_SIMPLIFY_EPS)
    return normalize_start(ensure_clockwise(poly))


def init_queries(masks: InstanceMasks | None, m: int, n: int, seed: int) -> RoomQueries:
    """Seed query rows from mask contours, padding the rest with noise.

    Masks are ordered by descending area for a deterministic row layout.
    Mask-derived rows are uniform contour samples scaled to [0, 1]; padded
    rows are i.i.d. uniform draws from the seeded generator.
    """
    grids = list(masks.masks) if masks is not None else []
    if len(grids) > m:
        raise CapacityError(f"{len(grids)} masks exceed capacity M={m}")
    grids.sort(key=lambda g: -int(g.sum()))
    coords = np.empty((m, n, 2), dtype=np.float64)
    for i, grid in enumerate(grids):
        h, w = grid.shape
        seq = uniform_sample(mask_to_polygon(grid), n)
        coords[i, :, 0] = seq.coords[:, 0] / w
        coords[i, :, 1] = seq.coords[:, 1] / h
    rng = np.random.default_rng(seed)
    k = len(grids)
    if k < m:
        coords[k:] = rng.uniform(0.0, 1.0, size=(m - k, n, 2))
    return RoomQueries(coords, k)


def random_queries(m: int, n: int, seed: int) -> RoomQueries:
    """All-random initialization (the no-instance-masks ablation arm).

    Every row is live (valid_count = m) so extraction still emits rooms.
    """
    rng = np.random.default_rng(seed)
    return RoomQueries(rng.uniform(0.0, 1.0, size=(m, n, 2)), m)
