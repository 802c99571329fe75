"""Matching oracle, loss identities, raster oracle, optimizer round trips."""

import itertools
import math

import numpy as np
import pytest

import polyroom.autograd as ag
from polyroom.dataio import SynthConfig, generate_scene
from polyroom.errors import CapacityError, ShapeError
from polyroom.model import DecoderOutput, FloorplanModel, ModelConfig
from polyroom.queryinit import init_queries
from polyroom.training import (
    Adam,
    LossWeights,
    MatchResult,
    PreparedScene,
    SceneTargets,
    TrainConfig,
    hard_occupancy,
    load_checkpoint,
    loss_angle,
    loss_cls,
    loss_coord,
    loss_raster,
    match_rooms,
    pair_cost,
    prepare_dataset,
    prepare_targets,
    raster_grid,
    save_checkpoint,
    soft_occupancy,
    total_loss,
    train,
    train_step,
)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


class TestPairCost:
    def test_identical_zero(self, rng):
        a = rng.uniform(0, 1, (10, 2))
        assert pair_cost(a, a) == 0.0

    def test_constant_shift(self, rng):
        a = rng.uniform(0, 0.8, (12, 2))
        b = a + [0.1, 0.0]
        assert pair_cost(a, b) == pytest.approx(0.1 * 12)

    def test_symmetric(self, rng):
        a = rng.uniform(0, 1, (8, 2))
        b = rng.uniform(0, 1, (8, 2))
        assert pair_cost(a, b) == pytest.approx(pair_cost(b, a))

    def test_length_mismatch(self, rng):
        with pytest.raises(ShapeError):
            pair_cost(rng.random((4, 2)), rng.random((5, 2)))


def brute_force_match(pred, gt_rows):
    """Oracle: exhaustive minimum over all injections of GT rooms into rows."""
    best_cost, best_map = math.inf, None
    m = pred.shape[0]
    for combo in itertools.permutations(range(m), len(gt_rows)):
        cost = sum(pair_cost(pred[c], g) for c, g in zip(combo, gt_rows))
        if cost < best_cost:
            best_cost, best_map = cost, dict(enumerate(combo))
    return best_cost, best_map


class TestMatchRooms:
    def test_recovers_shuffle(self, rng):
        gt = [rng.uniform(0, 1, (6, 2)) for _ in range(4)]
        order = [2, 0, 3, 1]
        pred = np.stack([gt[i] for i in order])
        match = match_rooms(pred, gt)
        assert match.total_cost == pytest.approx(0.0)
        for g, r in match.assignment.items():
            assert order[r] == g

    def test_equals_bruteforce_200_instances(self, rng):
        for _ in range(200):
            mgt = int(rng.integers(1, 7))
            m = int(rng.integers(mgt, 9))
            n = 5
            pred = rng.uniform(0, 1, (m, n, 2))
            gt = [rng.uniform(0, 1, (n, 2)) for _ in range(mgt)]
            match = match_rooms(pred, gt)
            oracle_cost, _ = brute_force_match(pred, gt)
            assert match.total_cost == pytest.approx(oracle_cost, abs=1e-12)

    def test_single_room_argmin(self, rng):
        pred = rng.uniform(0, 1, (5, 4, 2))
        gt = [rng.uniform(0, 1, (4, 2))]
        match = match_rooms(pred, gt)
        costs = [pair_cost(pred[i], gt[0]) for i in range(5)]
        assert match.assignment[0] == int(np.argmin(costs))

    def test_capacity(self, rng):
        with pytest.raises(CapacityError):
            match_rooms(rng.random((2, 4, 2)), [rng.random((4, 2))] * 3)

    def test_beats_random_injections(self, rng):
        pred = rng.uniform(0, 1, (8, 5, 2))
        gt = [rng.uniform(0, 1, (5, 2)) for _ in range(5)]
        best = match_rooms(pred, gt).total_cost
        for _ in range(10_000):
            rows = rng.permutation(8)[:5]
            cost = sum(pair_cost(pred[r], g) for r, g in zip(rows, gt))
            assert cost >= best - 1e-12


def _fake_targets(coords, labels=None):
    coords = np.asarray(coords, dtype=np.float64)
    if labels is None:
        labels = np.zeros(coords.shape[:2], dtype=np.uint8)
    return SceneTargets(coords, np.asarray(labels, dtype=np.uint8), 100.0, 100.0)


def _match_all(mgt):
    return MatchResult({g: g for g in range(mgt)}, 0.0)


class TestLossCls:
    def test_perfect_logits(self, rng):
        labels = rng.integers(0, 2, (2, 6)).astype(np.uint8)
        logits = np.zeros((3, 6, 2))
        for r in range(2):
            logits[r, labels[r] == 1, 1] = 30.0
            logits[r, labels[r] == 0, 0] = 30.0
        logits[2, :, 0] = 30.0  # unmatched row toward label 0
        t = _fake_targets(np.zeros((2, 6, 2)), labels)
        out = loss_cls(ag.tensor(logits), _match_all(2), t)
        assert out.data < 1e-3

    def test_uniform_logits_ln2(self):
        t = _fake_targets(np.zeros((1, 4, 2)), np.zeros((1, 4)))
        out = loss_cls(ag.tensor(np.zeros((2, 4, 2))), _match_all(1), t)
        assert out.data == pytest.approx(math.log(2.0))

    def test_hand_computed_two_vertices(self):
        # one matched room, two vertices, labels [1, 0]; logits chosen so
        # p(correct) = sigmoid of the logit gap
        logits = np.array([[[0.0, 1.0], [0.5, -0.5]]])
        labels = np.array([[1, 0]], dtype=np.uint8)
        t = _fake_targets(np.zeros((1, 2, 2)), labels)
        out = loss_cls(ag.tensor(logits), _match_all(1), t)
        p1 = math.exp(1.0) / (math.exp(0.0) + math.exp(1.0))
        p0 = math.exp(0.5) / (math.exp(0.5) + math.exp(-0.5))
        expected = -(math.log(p1) + math.log(p0)) / 2
        assert out.data == pytest.approx(expected, rel=1e-12)


class TestLossCoord:
    def test_identical_zero(self, rng):
        gt = rng.uniform(0, 1, (2, 5, 2))
        t = _fake_targets(gt)
        q = ag.tensor(np.concatenate([gt, rng.uniform(0, 1, (1, 5, 2))]))
        assert loss_coord(q, _match_all(2), t).data == pytest.approx(0.0)

    def test_constant_x_shift(self, rng):
        gt = rng.uniform(0.2, 0.8, (2, 5, 2))
        pred = gt + [0.1, 0.0]
        t = _fake_targets(gt)
        out = loss_coord(ag.tensor(pred), _match_all(2), t)
        assert out.data == pytest.approx(0.1)

    def test_cross_check_with_pair_cost(self, rng):
        gt = rng.uniform(0, 1, (3, 6, 2))
        pred = rng.uniform(0, 1, (3, 6, 2))
        t = _fake_targets(gt)
        out = loss_coord(ag.tensor(pred), _match_all(3), t)
        per_room = [pair_cost(pred[g], gt[g]) / 6 for g in range(3)]
        assert out.data == pytest.approx(np.mean(per_room), rel=1e-12)


def _square_seq(n, cx=0.5, cy=0.5, half=0.2):
    corners = np.array(
        [[cx - half, cy - half], [cx + half, cy - half],
         [cx + half, cy + half], [cx - half, cy + half]]
    )
    from polyroom.geometry import Polygon
    from polyroom.representation import uniform_sample

    seq = uniform_sample(Polygon(corners), n)
    return seq.coords


class TestLossAngle:
    def test_identical_zero(self):
        seq = _square_seq(16)
        t = _fake_targets(seq[None])
        out = loss_angle(ag.tensor(seq[None]), _match_all(1), t)
        assert out.data == pytest.approx(0.0, abs=1e-12)

    def test_rigid_rotation_invariant(self):
        seq = _square_seq(16)
        theta = 0.7
        rot = np.array([[math.cos(theta), -math.sin(theta)],
                        [math.sin(theta), math.cos(theta)]])
        moved = (seq - 0.5) @ rot.T + 0.5
        t = _fake_targets(seq[None])
        out = loss_angle(ag.tensor(moved[None]), _match_all(1), t)
        assert out.data == pytest.approx(0.0, abs=1e-9)

    def test_single_pulled_corner_contribution(self):
        # square vs square with vertex 1 pulled to (2, 0): its angle turns
        # from 90 to 45 degrees, contributing |cos 90 - cos 45| = 0.7071;
        # neighbors shift too, so the total is the analytic per-vertex sum
        gt = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
        pred = gt.copy()
        pred[1] = [2.0, 0.0]
        from polyroom.geometry import vertex_angle_cosines

        g_cos = vertex_angle_cosines(gt)
        p_cos = vertex_angle_cosines(pred)
        assert p_cos[1] == pytest.approx(math.cos(math.pi / 4), rel=1e-12)
        assert abs(g_cos[1] - p_cos[1]) == pytest.approx(0.7071, abs=1e-4)
        expected = np.abs(g_cos - p_cos).sum() / 4
        t = _fake_targets(gt[None])
        out = loss_angle(ag.tensor(pred[None]), _match_all(1), t)
        assert out.data == pytest.approx(expected, rel=1e-9)

    def test_cos45_contribution_value(self):
        # right angle (cos 0) flattened to 45 degrees (cos ~0.7071):
        # the per-vertex difference is 0.7071
        assert abs(math.cos(math.pi / 2) - math.cos(math.pi / 4)) == pytest.approx(
            0.7071, abs=1e-4
        )

    def test_degenerate_edge_masked(self):
        seq = _square_seq(8)
        pred = seq.copy()
        pred[3] = pred[2]  # zero-length edge
        t = _fake_targets(seq[None])
        out = loss_angle(ag.tensor(pred[None]), _match_all(1), t)
        assert np.isfinite(out.data)

    def test_gradient(self, rng):
        seq = _square_seq(8)
        pred = ag.parameter(seq + rng.normal(0, 0.01, seq.shape))
        t = _fake_targets(seq[None])

        def f():
            return loss_angle(ag.reshape(pred, (1, 8, 2)), _match_all(1), t)

        assert ag.grad_check(f, [pred]) < 1e-5


class TestLossRaster:
    def test_identical_zero(self):
        seq = _square_seq(12)
        t = _fake_targets(seq[None])
        out = loss_raster(ag.tensor(seq[None]), _match_all(1), t)
        assert out.data == pytest.approx(0.0, abs=1e-12)

    def test_disjoint_squares_match_hard_oracle(self):
        # loss at small temperature approximates the hard-raster value
        a = np.array([[10.0, 10.0], [30.0, 10.0], [30.0, 30.0], [10.0, 30.0]])
        b = a + [48.0, 0.0]
        xs, ys = raster_grid(a, b, 64)
        soft = ag.mean(
            ag.absolute(
                ag.sub(
                    soft_occupancy(ag.tensor(a), xs, ys, 0.2),
                    soft_occupancy(ag.tensor(b), xs, ys, 0.2),
                )
            )
        ).data
        hard = np.abs(hard_occupancy(a, xs, ys) - hard_occupancy(b, xs, ys)).mean()
        assert soft == pytest.approx(hard, rel=0.05)

    def test_gradient(self, rng):
        seq = _square_seq(8) * 100
        pred = ag.parameter(seq + rng.normal(0, 0.5, seq.shape))
        gt = seq.copy()
        xs, ys = raster_grid(pred.data, gt, 24)
        gt_occ = ag.tensor(hard_occupancy(gt, xs, ys))

        def f():
            occ = soft_occupancy(pred, xs, ys, 1.0)
            return ag.mean(ag.absolute(ag.sub(occ, gt_occ)))

        assert ag.grad_check(f, [pred], h=1e-5) < 1e-4


class TestTotalLoss:
    def _perfect_output(self, model, targets, layers):
        mgt, n, _ = targets.coords.shape
        m = model.cfg.m
        coords = np.random.default_rng(0).uniform(0, 1, (m, n, 2))
        coords[:mgt] = targets.coords
        logits = np.zeros((m, n, 2))
        logits[:, :, 0] = 20.0
        for g in range(mgt):
            logits[g, :, 0] = np.where(targets.labels[g] == 1, -20.0, 20.0)
            logits[g, :, 1] = np.where(targets.labels[g] == 1, 20.0, -20.0)
        snaps = [ag.tensor(coords) for _ in range(layers + 1)]
        return DecoderOutput(snaps, ag.tensor(logits), [])

    def test_perfect_prediction_near_zero(self):
        rec = generate_scene(2, SynthConfig(size=64, rooms_min=2, rooms_max=2))
        targets = prepare_targets(rec, 16)
        model = FloorplanModel(ModelConfig(m=4, n=16, d=16, layers=2, heads=2), seed=0)
        out = self._perfect_output(model, targets, 2)
        loss, comps = total_loss(out, targets, LossWeights())
        assert comps["total"] < 1e-3

    def test_lambda_scaling_exact(self):
        rec = generate_scene(4, SynthConfig(size=64, rooms_min=1, rooms_max=2))
        targets = prepare_targets(rec, 16)
        model = FloorplanModel(ModelConfig(m=4, n=16, d=16, layers=1, heads=2), seed=0)
        rng = np.random.default_rng(1)
        coords = rng.uniform(0, 1, (4, 16, 2))
        snaps = [ag.tensor(coords)] * 2
        out = DecoderOutput(snaps, ag.tensor(rng.normal(size=(4, 16, 2))), [])
        _, base = total_loss(out, targets, LossWeights())
        _, doubled = total_loss(out, targets, LossWeights(coord=10.0))
        delta = doubled["total"] - base["total"]
        assert delta == pytest.approx(5.0 * base["coord"], rel=1e-9)

    def test_component_sum_oracle(self):
        rec = generate_scene(6, SynthConfig(size=64, rooms_min=1, rooms_max=1))
        targets = prepare_targets(rec, 16)
        model = FloorplanModel(ModelConfig(m=2, n=16, d=16, layers=2, heads=2), seed=0)
        rng = np.random.default_rng(2)
        coords = rng.uniform(0, 1, (2, 16, 2))
        snaps = [ag.tensor(rng.uniform(0, 1, (2, 16, 2))) for _ in range(3)]
        out = DecoderOutput(snaps, ag.tensor(rng.normal(size=(2, 16, 2))), [])
        w = LossWeights()
        loss, comps = total_loss(out, targets, w)
        recon = (
            w.cls * comps["cls"] + w.coord * comps["coord"]
            + w.ras * comps["ras"] + w.ang * comps["ang"]
        )
        assert comps["total"] == pytest.approx(recon, rel=1e-12)
        assert loss.data == pytest.approx(comps["total"])

    def test_layer_corruption_increases_loss(self):
        rec = generate_scene(8, SynthConfig(size=64, rooms_min=2, rooms_max=2))
        targets = prepare_targets(rec, 16)
        model = FloorplanModel(ModelConfig(m=4, n=16, d=16, layers=3, heads=2), seed=0)
        base_out = self._perfect_output(model, targets, 3)
        _, base = total_loss(base_out, targets, LossWeights())
        for corrupt in range(1, 4):
            snaps = [ag.tensor(t.data.copy()) for t in base_out.query_tensors]
            bad = snaps[corrupt].data.copy()
            bad[0] = np.clip(bad[0] + 0.13, 0, 1)
            snaps[corrupt] = ag.tensor(bad)
            out = DecoderOutput(snaps, base_out.corner_logits, [])
            _, comps = total_loss(out, targets, LossWeights())
            assert comps["total"] > base["total"] + 1e-4


class TestTargetPreparation:
    def test_room_with_too_many_corners_rejected_with_warning(self, caplog):
        import logging

        from polyroom.geometry import Floorplan, Polygon
        from polyroom.dataio import DensityMap, SceneRecord

        # 22-corner staircase cannot fit in a 16-vertex sequence
        pts = [(10, 80), (10, 10)]
        x = 10
        for i in range(10):
            y = 20 + (i % 2) * 10
            pts.insert(1, (x + 6, y))
            pts.insert(1, (x, y))
            x += 6
        poly = Polygon(pts[::-1])
        from polyroom.geometry import ensure_clockwise

        rec = SceneRecord(
            "toomany",
            DensityMap(np.zeros((96, 96), dtype=np.float32)),
            Floorplan([ensure_clockwise(poly)], 96, 96),
            None,
        )
        with caplog.at_level(logging.WARNING):
            out = prepare_targets(rec, 16)
        assert out is None
        assert any("rejected" in r.message for r in caplog.records)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        cfg = ModelConfig(m=3, n=8, d=16, layers=2, heads=2)
        model = FloorplanModel(cfg, seed=5)
        opt = Adam(model.parameters(), lr=1e-3)
        rec = generate_scene(1, SynthConfig(size=64, rooms_min=1, rooms_max=2))
        q0 = init_queries(rec.masks, 3, 8, seed=0)
        before = model.forward(rec.density.grid, q0)
        save_checkpoint(model, str(tmp_path), opt, step=17)
        model2, opt2, step = load_checkpoint(str(tmp_path))
        assert step == 17
        after = model2.forward(rec.density.grid, q0)
        assert np.array_equal(before.queries[-1], after.queries[-1])
        assert np.array_equal(before.corner_logits.data, after.corner_logits.data)
        for k, t in model.parameters().items():
            assert np.array_equal(t.data, model2.parameters()[k].data)
            assert np.array_equal(opt.m[k], opt2.m[k])


class TestTrainLoop:
    def test_loss_decreases_on_synthetic(self):
        recs = [generate_scene(100 + i, SynthConfig(size=64, rooms_min=1, rooms_max=2))
                for i in range(8)]
        cfg = ModelConfig(m=6, n=16, d=16, layers=2, heads=2, ffn_dim=32)
        model = FloorplanModel(cfg, seed=0)
        tc = TrainConfig(epochs=4, batch_size=1, seed=0, raster_res=32)
        history, _, steps = train(recs, model, tc)
        assert steps == 32
        losses = [h["total"] for h in history]
        assert all(np.isfinite(losses))
        first, last = np.mean(losses[:8]), np.mean(losses[-8:])
        assert last < first

    def test_decreasing_majority_of_early_steps(self):
        rec = generate_scene(55, SynthConfig(size=64, rooms_min=2, rooms_max=2))
        cfg = ModelConfig(m=4, n=16, d=16, layers=2, heads=2, ffn_dim=32)
        model = FloorplanModel(cfg, seed=0)
        tc = TrainConfig(epochs=1, batch_size=1, seed=0, raster_res=32)
        prepared = prepare_dataset([rec], cfg, tc)
        opt = Adam(model.parameters(), lr=tc.lr)
        losses = []
        for _ in range(100):
            comps = train_step(model, prepared, opt, tc)
            losses.append(comps["total"])
        assert all(np.isfinite(losses))
        drops = sum(1 for a, b in zip(losses, losses[1:]) if b <= a + 1e-12)
        assert drops / (len(losses) - 1) >= 0.8

    def test_determinism(self, tmp_path):
        recs = [generate_scene(200 + i, SynthConfig(size=64, rooms_min=1, rooms_max=1))
                for i in range(3)]
        outs = []
        for _ in range(2):
            cfg = ModelConfig(m=2, n=8, d=16, layers=1, heads=2, ffn_dim=32)
            model = FloorplanModel(cfg, seed=3)
            tc = TrainConfig(epochs=2, batch_size=2, seed=3, raster_res=32)
            history, _, _ = train(recs, model, tc)
            outs.append([h["total"] for h in history])
        assert outs[0] == outs[1]

    def test_resume_continues_step_numbering(self, tmp_path):
        recs = [generate_scene(300, SynthConfig(size=64, rooms_min=1, rooms_max=1))]
        cfg = ModelConfig(m=2, n=8, d=16, layers=1, heads=2, ffn_dim=32)
        model = FloorplanModel(cfg, seed=0)
        tc = TrainConfig(epochs=2, batch_size=1, seed=0, raster_res=32)
        out = str(tmp_path / "run")
        _, _, step1 = train(recs, model, tc, out_dir=out)
        model2, opt2, start = load_checkpoint(out)
        assert start == step1
        _, _, step2 = train(recs, model2, tc, out_dir=out, start_step=start,
                            optimizer=opt2)
        assert step2 == step1 + 2
