"""Shared helpers: seeded random polygon generators used as test inputs."""

import numpy as np
import pytest

from polyroom.geometry import Polygon, ensure_clockwise, perimeter


def random_convex_polygon(rng, n_min=3, n_max=10, scale=50.0, center=(100.0, 100.0)):
    """Simple-by-construction polygon: random points sorted by angle."""
    while True:
        n = int(rng.integers(n_min, n_max + 1))
        angles = np.sort(rng.uniform(0, 2 * np.pi, n))
        if np.min(np.diff(angles)) < 0.05:
            continue
        radii = rng.uniform(0.3, 1.0, n) * scale
        pts = np.column_stack(
            [center[0] + radii * np.cos(angles), center[1] + radii * np.sin(angles)]
        )
        return ensure_clockwise(Polygon(pts))


def random_rectilinear_polygon(rng, max_cols=6, min_gap_frac=None):
    """Axis-aligned histogram polygon: random column heights over a flat base.

    Corner count is 2k + 2 for k columns. With min_gap_frac set, candidates
    are rejected until every edge is at least min_gap_frac * perimeter long
    (the uniform-sampling round-trip precondition); small column counts
    keep the acceptance rate high.
    """
    while True:
        k = int(rng.integers(1, max_cols + 1))
        widths = rng.integers(20, 41, k).astype(np.float64)
        heights = np.empty(k)
        heights[0] = float(rng.integers(25, 61))
        for i in range(1, k):
            step = float(rng.integers(20, 41)) * (1 if rng.random() < 0.5 else -1)
            heights[i] = min(95.0, max(25.0, heights[i - 1] + step))
        if k > 1 and np.any(np.abs(np.diff(heights)) < 15):
            continue
        x0, y0 = 10.0, 150.0
        pts = [(x0, y0 - heights[0])]
        x = x0
        for i in range(k):
            pts.append((x + widths[i], y0 - heights[i]))
            if i + 1 < k:
                pts.append((x + widths[i], y0 - heights[i + 1]))
            x += widths[i]
        pts.append((x, y0))
        pts.append((x0, y0))
        poly = ensure_clockwise(Polygon(pts))
        if min_gap_frac is None:
            return poly
        v = poly.vertices
        edges = np.linalg.norm(np.roll(v, -1, axis=0) - v, axis=1)
        if edges.min() >= min_gap_frac * perimeter(poly):
            return poly


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
