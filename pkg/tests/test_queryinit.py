import numpy as np
import pytest

from polyroom.dataio import InstanceMasks, SynthConfig, generate_scene, rasterize_polygon
from polyroom.errors import CapacityError, EmptyMaskError
from polyroom.geometry import Polygon, perimeter, signed_area
from polyroom.queryinit import init_queries, mask_to_polygon, random_queries


def square_mask(size=32, lo=8, hi=24):
    m = np.zeros((size, size), dtype=bool)
    m[lo:hi, lo:hi] = True
    return m


class TestMaskToPolygon:
    def test_filled_square(self):
        m = np.zeros((16, 16), dtype=bool)
        m[3:13, 3:13] = True
        poly = mask_to_polygon(m)
        assert np.array_equal(
            poly.vertices, [[3, 3], [13, 3], [13, 13], [3, 13]]
        )

    def test_largest_component_wins(self):
        m = square_mask()
        m[28:31, 28:31] = True
        assert mask_to_polygon(m) == mask_to_polygon(square_mask())

    def test_empty_mask(self):
        with pytest.raises(EmptyMaskError):
            mask_to_polygon(np.zeros((8, 8), dtype=bool))

    def test_iou_against_raster_oracle(self):
        rng = np.random.default_rng(3)
        for seed in range(200):
            rec = generate_scene(seed, SynthConfig(size=64, rooms_min=1, rooms_max=2))
            for mask in rec.masks.masks:
                poly = mask_to_polygon(mask)
                recon = rasterize_polygon(poly, 64, 64)
                inter = np.count_nonzero(recon & mask)
                union = np.count_nonzero(recon | mask)
                assert inter / union > 0.95

    def test_clockwise_and_simple(self):
        rec = generate_scene(17, SynthConfig(size=96, rooms_min=3, rooms_max=4))
        for mask in rec.masks.masks:
            poly = mask_to_polygon(mask)
            assert signed_area(poly) > 0
            assert poly.is_simple()

    def test_holes_ignored(self):
        m = square_mask(32, 4, 28)
        m[12:20, 12:20] = False  # punch a hole
        poly = mask_to_polygon(m)
        assert np.array_equal(poly.vertices, [[4, 4], [28, 4], [28, 28], [4, 28]])


class TestInitQueries:
    def test_zero_masks_all_random(self):
        q = init_queries(None, 8, 10, seed=0)
        assert q.valid_count == 0
        assert q.coords.shape == (8, 10, 2)
        assert q.coords.min() >= 0 and q.coords.max() <= 1

    def test_single_square_mask(self):
        mask = square_mask(32, 8, 24)
        q = init_queries(InstanceMasks([mask]), 4, 8, seed=1)
        assert q.valid_count == 1
        # row 0: 8 evenly spaced points on the square contour, scaled by 1/32
        row = q.coords[0] * 32
        expected = np.array(
            [[8, 8], [16, 8], [24, 8], [24, 16], [24, 24], [16, 24], [8, 24], [8, 16]],
            dtype=float,
        )
        assert np.allclose(row, expected)

    def test_deterministic(self):
        rec = generate_scene(5, SynthConfig(size=64, rooms_min=2, rooms_max=3))
        a = init_queries(rec.masks, 10, 12, seed=7)
        b = init_queries(rec.masks, 10, 12, seed=7)
        assert np.array_equal(a.coords, b.coords)
        c = init_queries(rec.masks, 10, 12, seed=8)
        assert not np.array_equal(a.coords, c.coords)

    def test_capacity(self):
        masks = InstanceMasks([square_mask()] )
        with pytest.raises(CapacityError):
            init_queries(masks, 0, 8, seed=0)

    def test_rows_sorted_by_area(self):
        big = square_mask(64, 4, 40)
        small = square_mask(64, 48, 60)
        q = init_queries(InstanceMasks([small, big]), 4, 8, seed=0)
        # row 0 must trace the big mask
        span0 = np.ptp(q.coords[0], axis=0).max() * 64
        span1 = np.ptp(q.coords[1], axis=0).max() * 64
        assert span0 > span1

    def test_arc_spacing_inherited(self):
        from test_representation import _boundary_arc_gaps

        rec = generate_scene(9, SynthConfig(size=128, rooms_min=1, rooms_max=2))
        n = 40
        q = init_queries(rec.masks, 20, n, seed=0)
        # rows are sorted by descending mask pixel count; mirror that order
        masks = sorted(rec.masks.masks, key=lambda g: -int(g.sum()))
        polys = [mask_to_polygon(m) for m in masks]
        for r in range(q.valid_count):
            row = q.coords[r] * 128
            poly = polys[r]
            gaps = _boundary_arc_gaps(row, poly)
            assert np.allclose(gaps, perimeter(poly) / n, atol=1e-6)

    def test_padded_rows_in_unit_box(self):
        q = init_queries(InstanceMasks([square_mask()]), 6, 8, seed=3)
        assert q.valid_count == 1
        pad = q.coords[1:]
        assert pad.min() >= 0 and pad.max() <= 1

    def test_random_queries_all_valid(self):
        q = random_queries(5, 7, seed=2)
        assert q.valid_count == 5
        assert q.coords.shape == (5, 7, 2)
