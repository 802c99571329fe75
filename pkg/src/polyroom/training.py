"""Matching, losses, optimizer loop, and checkpointing.

Ground-truth rooms are assigned to predicted query rows by a Hungarian
solve over summed per-vertex L1 distances (pure geometry). The loss is a
weighted sum of a corner-label cross-entropy on the final layer plus
coordinate, rasterization, and angle terms applied to every decoder
layer's queries under the final-layer matching.
"""

from __future__ import annotations

import json
import logging
import math
import os
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autograd as ag
from .autograd import Tensor
from .errors import CapacityError, DataError, NumericError, ShapeError
from .geometry import points_in_polygon
from .model import DecoderOutput, FloorplanModel, ModelConfig
from .queryinit import RoomQueries, init_queries, random_queries
from .representation import sample_floorplan

log = logging.getLogger(__name__)


@dataclass
class MatchResult:
    """Injective map from ground-truth room index to predicted row index."""

    assignment: dict
    total_cost: float


@dataclass
class LossWeights:
    cls: float = 2.0
    coord: float = 5.0
    ras: float = 1.0
    ang: float = 1.0

    def __post_init__(self):
        if min(self.cls, self.coord, self.ras, self.ang) < 0:
            raise DataError("loss weights must be non-negative")


@dataclass
class TrainConfig:
    lr: float = 2e-4
    epochs: int = 10
    batch_size: int = 1
    seed: int = 0
    grad_clip: float = 0.1
    raster_res: int = 64
    tau_sd: float = 1.0          # softmin temperature, pixels
    weights: LossWeights = field(default_factory=LossWeights)
    init_mode: str = "masks"     # or "random"
    log_every: int = 10

    def __post_init__(self):
        if self.lr <= 0:
            raise DataError("learning rate must be positive")
        if self.init_mode not in ("masks", "random"):
            raise DataError(f"unknown init mode '{self.init_mode}'")


# -- matching -------------------------------------------------------------------

def pair_cost(pred_row: np.ndarray, gt_row: np.ndarray) -> float:
    """Summed per-vertex L1 distance between two aligned N x 2 sequences."""
    a = np.asarray(pred_row, dtype=np.float64)
    b = np.asarray(gt_row, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"pair_cost: {a.shape} vs {b.shape}")
    return float(np.abs(a - b).sum())


def match_rooms(pred: np.ndarray, gt_rows: list) -> MatchResult:
    """Hungarian assignment of GT rooms to predicted rows, minimum L1 cost."""
    m = pred.shape[0]
    mgt = len(gt_rows)
    if mgt > m:
        raise CapacityError(f"{mgt} GT rooms exceed {m} query rows")
    gt = np.stack(gt_rows)                       # (Mgt, N, 2)
    cost = np.abs(pred[None, :, :, :] - gt[:, None, :, :]).sum(axis=(2, 3))
    rows, cols = linear_sum_assignment(cost)
    assignment = {int(r): int(c) for r, c in zip(rows, cols)}
    return MatchResult(assignment, float(cost[rows, cols].sum()))


# -- targets ----------------------------------------------------------------------

@dataclass
class SceneTargets:
    """Normalized supervision for one scene."""

    coords: np.ndarray     # (Mgt, N, 2) in [0, 1]
    labels: np.ndarray     # (Mgt, N) uint8
    width: float
    height: float


def prepare_targets(record, n: int) -> SceneTargets | None:
    """Encode a scene's rooms; returns None (with a warning) when any room
    has more corners than the sequence can hold."""
    try:
        sampled = sample_floorplan(record.gt, n)
    except CapacityError as exc:
        log.warning("scene %s rejected: %s", record.id, exc)
        return None
    coords = np.stack([seq.coords for seq in sampled.rooms])
    coords = coords / np.array([record.gt.width, record.gt.height])
    labels = np.stack([seq.labels for seq in sampled.rooms])
    return SceneTargets(coords, labels, record.gt.width, record.gt.height)


# -- soft rasterization ------------------------------------------------------------

def raster_grid(pred_px: np.ndarray, gt_px: np.ndarray, res: int, pad_frac: float = 0.1,
                snap: float = 0.0):
    """Cell-center coordinates of an res x res grid over the padded union bbox.

    With snap > 0 the padded box is widened to the enclosing snap-pixel
    lattice box, which keeps the grid stable across decoder layers and
    adjacent steps so ground-truth occupancies can be cached.
    """
    allv = np.concatenate([pred_px, gt_px], axis=0)
    lo = allv.min(axis=0)
    hi = allv.max(axis=0)
    span = np.maximum(hi - lo, 1e-6)
    pad = np.maximum(span * pad_frac, 2.0)
    lo = lo - pad
    hi = hi + pad
    if snap > 0:
        lo = np.floor(lo / snap) * snap
        hi = np.ceil(hi / snap) * snap
    if (hi <= lo).any():
        raise DataError("raster bounding box has zero extent")
    xs = lo[0] + (np.arange(res) + 0.5) * (hi[0] - lo[0]) / res
    ys = lo[1] + (np.arange(res) + 0.5) * (hi[1] - lo[1]) / res
    return xs, ys


def soft_occupancy(verts: Tensor, xs: np.ndarray, ys: np.ndarray, tau: float) -> Tensor:
    """Differentiable occupancy of a closed polygon on a fixed grid.

    Occupancy is sigmoid(-sd/tau) where |sd| is a temperature-tau softmin
    over point-to-edge distances and the sign comes from a crossing-number
    test treated as constant. Gradients reach the vertex tensor through
    the distances only.
    """
    v = verts.data                                   # (N, 2)
    n = v.shape[0]
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel()])  # (P, 2)
    p_count = pts.shape[0]

    a = v                                            # (N, 2)
    b = np.roll(v, -1, axis=0)
    u = b - a                                        # (N, 2)
    l2 = np.maximum((u * u).sum(axis=1), 1e-12)      # (N,)
    rel = pts[:, None, :] - a[None, :, :]            # (P, N, 2)
    t_raw = (rel * u[None, :, :]).sum(axis=2) / l2[None, :]
    t = np.clip(t_raw, 0.0, 1.0)                     # (P, N)
    q = a[None, :, :] + t[:, :, None] * u[None, :, :]
    diff = pts[:, None, :] - q                       # (P, N, 2)
    d = np.sqrt(np.maximum((diff * diff).sum(axis=2), 1e-24))

    z = -d / tau
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    w = ez / sez                                     # softmax weights (P, N)
    m_soft = -tau * (np.log(sez[:, 0]) + zmax[:, 0])  # softmin distance (P,)

    inside = points_in_polygon(pts, v)
    sign = np.where(inside, -1.0, 1.0)
    occ = 1.0 / (1.0 + np.exp(sign * m_soft / tau))
    out_shape = (ys.shape[0], xs.shape[0])

    def backward(g):
        gflat = g.reshape(p_count)
        g_m = gflat * occ.ravel() * (1.0 - occ.ravel()) * (-sign / tau)
        g_d = g_m[:, None] * w                        # (P, N)
        scale_a = -(1.0 - t) * g_d / d                # (P, N)
        scale_b = -t * g_d / d
        grad_a = (scale_a[:, :, None] * diff).sum(axis=0)   # (N, 2)
        grad_b = (scale_b[:, :, None] * diff).sum(axis=0)
        gv = grad_a + np.roll(grad_b, 1, axis=0)
        verts.accumulate(gv)

    return ag._make(occ.reshape(out_shape), (verts,), backward)


def hard_occupancy(verts: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Binary inside test on the same grid; the oracle counterpart."""
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    return points_in_polygon(pts, verts).astype(np.float64).reshape(ys.shape[0], xs.shape[0])


# -- loss terms ----------------------------------------------------------------------

def _matched_rows(layer_q: Tensor, match: MatchResult):
    idx = [match.assignment[g] for g in sorted(match.assignment)]
    return ag.index_rows(layer_q, idx)   # (Mgt, N, 2)


def loss_cls(logits: Tensor, match: MatchResult, targets: SceneTargets) -> Tensor:
    """Mean two-way cross-entropy on every vertex of every query row.

    Matched rows take their room's corner labels; unmatched rows train
    toward all-zero labels.
    """
    m, n, _ = logits.shape
    target = np.zeros((m, n), dtype=np.int64)
    for g, r in match.assignment.items():
        target[r] = targets.labels[g]
    flat = ag.reshape(logits, (m * n, 2))
    return ag.cross_entropy(flat, target.reshape(-1))


def loss_coord(layer_q: Tensor, match: MatchResult, targets: SceneTargets) -> Tensor:
    """Mean per-vertex L1 distance over matched rooms (normalized coords)."""
    if not match.assignment:
        return ag.tensor(0.0)
    pred = _matched_rows(layer_q, match)
    gt = ag.tensor(targets.coords[sorted(match.assignment)])
    per_coord = ag.absolute(ag.sub(pred, gt))        # (Mgt, N, 2)
    return ag.scale(ag.mean(per_coord), 2.0)         # |dx|+|dy| per vertex


def _sequence_cosines(seq: Tensor) -> Tensor:
    """Differentiable angle cosines at every vertex of an (N, 2) loop."""
    n = seq.shape[0]
    prev_idx = [(j - 1) % n for j in range(n)]
    next_idx = [(j + 1) % n for j in range(n)]
    a = ag.sub(ag.index_rows(seq, prev_idx), seq)
    b = ag.sub(ag.index_rows(seq, next_idx), seq)
    dot = ag.sum_(ag.mul(a, b), axis=1)
    na2 = ag.sum_(ag.mul(a, a), axis=1)
    nb2 = ag.sum_(ag.mul(b, b), axis=1)
    denom = ag.sqrt(ag.shift(ag.mul(na2, nb2), 1e-24))
    return ag.div(dot, denom)


def loss_angle(layer_q: Tensor, match: MatchResult, targets: SceneTargets,
               eps: float = 1e-8) -> Tensor:
    """Mean |cos_gt - cos_pred| over the N cyclic vertex angles.

    Vertices adjoining an edge shorter than eps (on either polygon) are
    masked out rather than erroring mid-training; normalization stays 1/N.
    """
    if not match.assignment:
        return ag.tensor(0.0)
    total = None
    count = 0
    for g in sorted(match.assignment):
        r = match.assignment[g]
        pred = ag.reshape(ag.index_rows(layer_q, [r]), (layer_q.shape[1], 2))
        gt = targets.coords[g]
        n = gt.shape[0]
        gt_cos = _np_sequence_cosines(gt)
        pred_cos = _sequence_cosines(pred)
        pred_np = pred.data
        ok_pred = _edge_ok(pred_np, eps)
        ok_gt = _edge_ok(gt, eps)
        mask = (ok_pred & ok_gt).astype(np.float64)
        diff = ag.absolute(ag.sub(pred_cos, ag.tensor(gt_cos)))
        masked = ag.mul(diff, ag.tensor(mask))
        term = ag.scale(ag.sum_(masked), 1.0 / n)
        total = term if total is None else ag.add(total, term)
        count += 1
    return ag.scale(total, 1.0 / count)


def _edge_ok(coords: np.ndarray, eps: float) -> np.ndarray:
    e_prev = np.linalg.norm(coords - np.roll(coords, 1, axis=0), axis=1)
    e_next = np.linalg.norm(np.roll(coords, -1, axis=0) - coords, axis=1)
    return (e_prev > eps) & (e_next > eps)


def _np_sequence_cosines(coords: np.ndarray) -> np.ndarray:
    a = np.roll(coords, 1, axis=0) - coords
    b = np.roll(coords, -1, axis=0) - coords
    denom = np.sqrt(np.maximum((a * a).sum(1) * (b * b).sum(1), 1e-24))
    return (a * b).sum(1) / denom


def loss_raster(layer_q: Tensor, match: MatchResult, targets: SceneTargets,
                res: int = 64, tau: float = 1.0, cache: dict | None = None) -> Tensor:
    """Mean absolute soft-occupancy difference per matched pair.

    Both shapes render on an res x res grid over the padded union bbox in
    pixel space; grid placement is treated as constant for gradients. An
    optional per-scene cache keyed by (gt room, grid box) reuses the
    constant ground-truth occupancy; the grid snaps to an 8 px lattice
    when caching so the key stays stable between layers and steps.
    """
    if not match.assignment:
        return ag.tensor(0.0)
    scale_px = np.array([targets.width, targets.height])
    snap = 8.0 if cache is not None else 0.0
    total = None
    count = 0
    for g in sorted(match.assignment):
        r = match.assignment[g]
        n = layer_q.shape[1]
        pred = ag.reshape(ag.index_rows(layer_q, [r]), (n, 2))
        pred_px = ag.mul(pred, ag.tensor(np.tile(scale_px, (n, 1))))
        gt_px = targets.coords[g] * scale_px
        xs, ys = raster_grid(pred_px.data, gt_px, res, snap=snap)
        occ_pred = soft_occupancy(pred_px, xs, ys, tau)
        if cache is not None:
            key = (g, float(xs[0]), float(xs[-1]), float(ys[0]), float(ys[-1]))
            occ_gt_np = cache.get(key)
            if occ_gt_np is None:
                occ_gt_np = soft_occupancy(ag.tensor(gt_px), xs, ys, tau).data
                cache[key] = occ_gt_np
            occ_gt = ag.tensor(occ_gt_np)
        else:
            occ_gt = soft_occupancy(ag.tensor(gt_px), xs, ys, tau)
        term = ag.mean(ag.absolute(ag.sub(occ_pred, occ_gt)))
        total = term if total is None else ag.add(total, term)
        count += 1
    return ag.scale(total, 1.0 / count)


def total_loss(out: DecoderOutput, targets: SceneTargets, weights: LossWeights,
               match: MatchResult | None = None, raster_res: int = 64,
               tau: float = 1.0, raster_cache: dict | None = None):
    """Weighted sum over decoder layers plus the final classification term.

    Matching is computed once on the final layer and shared; coord, raster
    and angle terms sum over layers 1..L, the label term reads the final
    logits. Returns (scalar Tensor, float components dict).
    """
    if match is None:
        match = match_rooms(out.final_queries, list(targets.coords))
    cls_term = loss_cls(out.corner_logits, match, targets)
    coord_sum, ras_sum, ang_sum = None, None, None
    for layer_q in out.query_tensors[1:]:
        c = loss_coord(layer_q, match, targets)
        r = loss_raster(layer_q, match, targets, res=raster_res, tau=tau,
                        cache=raster_cache)
        a = loss_angle(layer_q, match, targets)
        coord_sum = c if coord_sum is None else ag.add(coord_sum, c)
        ras_sum = r if ras_sum is None else ag.add(ras_sum, r)
        ang_sum = a if ang_sum is None else ag.add(ang_sum, a)
    total = ag.scale(cls_term, weights.cls)
    total = ag.add(total, ag.scale(coord_sum, weights.coord))
    total = ag.add(total, ag.scale(ras_sum, weights.ras))
    total = ag.add(total, ag.scale(ang_sum, weights.ang))
    components = {
        "cls": float(cls_term.data),
        "coord": float(coord_sum.data),
        "ras": float(ras_sum.data),
        "ang": float(ang_sum.data),
        "total": float(total.data),
    }
    return total, components


# -- optimizer ----------------------------------------------------------------------

class Adam:
    def __init__(self, params: dict, lr: float = 2e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * p.grad
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * (p.grad ** 2)
            p.data -= self.lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def clip_gradients(params: dict, max_norm: float) -> float:
    total = ag.global_grad_norm(params.values())
    if total > max_norm and total > 0:
        factor = max_norm / total
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return total


# -- checkpointing --------------------------------------------------------------------

def save_checkpoint(model: FloorplanModel, path_dir: str, optimizer: Adam | None = None,
                    step: int = 0) -> None:
    """JSON manifest plus one little-endian f64 blob, bit-exact round trip."""
    os.makedirs(path_dir, exist_ok=True)
    entries = {}
    blobs = []
    offset = 0

    def put(name, arr):
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries[name] = {"shape": list(arr.shape), "dtype": "f64", "offset": offset}
        blobs.append(raw)
        offset += len(raw)

    for name, t in model.parameters().items():
        put(name, t.data)
    if optimizer is not None:
        for k in model.parameters():
            put(f"adam.m.{k}", optimizer.m[k])
            put(f"adam.v.{k}", optimizer.v[k])
    manifest = {
        "version": 1,
        "config": model.cfg.to_dict(),
        "tensors": entries,
        "train_state": {"step": step, "adam_t": optimizer.t if optimizer else 0},
    }
    with open(os.path.join(path_dir, "model.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    with open(os.path.join(path_dir, "model.bin"), "wb") as fh:
        fh.write(b"".join(blobs))


def load_checkpoint(path_dir: str, lr: float = 2e-4):
    """Rebuild (model, optimizer, step) from a checkpoint directory."""
    with open(os.path.join(path_dir, "model.json")) as fh:
        manifest = json.load(fh)
    with open(os.path.join(path_dir, "model.bin"), "rb") as fh:
        blob = fh.read()

    def get(name):
        e = manifest["tensors"][name]
        shape = tuple(e["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=e["offset"])
        return arr.reshape(shape).astype(np.float64)

    cfg = ModelConfig(**manifest["config"])
    model = FloorplanModel(cfg, seed=0)
    for name, t in model.parameters().items():
        t.data = get(name)
    optimizer = Adam(model.parameters(), lr=lr)
    has_moments = any(k.startswith("adam.m.") for k in manifest["tensors"])
    if has_moments:
        for k in model.parameters():
            optimizer.m[k] = get(f"adam.m.{k}")
            optimizer.v[k] = get(f"adam.v.{k}")
        optimizer.t = manifest["train_state"].get("adam_t", 0)
    step = manifest["train_state"].get("step", 0)
    return model, optimizer, step


# -- training loop ---------------------------------------------------------------------

@dataclass
class PreparedScene:
    record: object
    targets: SceneTargets
    q0: RoomQueries
    raster_cache: dict = field(default_factory=dict)


def scene_seed(base: int, scene_id: str) -> int:
    seq = np.random.SeedSequence([base, zlib.crc32(scene_id.encode())])
    return int(seq.generate_state(1)[0])


def prepare_dataset(records, model_cfg: ModelConfig, cfg: TrainConfig) -> list:
    """Cache targets and initial queries per scene; drop unencodable scenes."""
    prepared = []
    for rec in records:
        targets = prepare_targets(rec, model_cfg.n)
        if targets is None:
            continue
        seed = scene_seed(cfg.seed, rec.id)
        if cfg.init_mode == "random":
            q0 = random_queries(model_cfg.m, model_cfg.n, seed)
        else:
            if rec.masks is None:
                raise DataError(f"scene {rec.id} has no masks for mask init")
            q0 = init_queries(rec.masks, model_cfg.m, model_cfg.n, seed)
        prepared.append(PreparedScene(rec, targets, q0))
    if not prepared:
        raise DataError("no trainable scenes after preparation")
    return prepared


def train_step(model: FloorplanModel, batch: list, optimizer: Adam,
               cfg: TrainConfig) -> dict:
    """One optimizer step over a list of prepared scenes."""
    optimizer.zero_grad()
    agg = {"cls": 0.0, "coord": 0.0, "ras": 0.0, "ang": 0.0, "total": 0.0}
    for scene in batch:
        out = model.forward(scene.record.density.grid, scene.q0)
        loss, comps = total_loss(
            out, scene.targets, cfg.weights,
            raster_res=cfg.raster_res, tau=cfg.tau_sd,
            raster_cache=scene.raster_cache,
        )
        if not math.isfinite(comps["total"]):
            raise NumericError(
                f"non-finite loss on scene {scene.record.id}: {comps}"
            )
        ag.scale(loss, 1.0 / len(batch)).backward()
        for k in agg:
            agg[k] += comps[k] / len(batch)
    clip_gradients(model.parameters(), cfg.grad_clip)
    optimizer.step()
    return agg


def train(records, model: FloorplanModel, cfg: TrainConfig,
          out_dir: str | None = None, start_step: int = 0,
          optimizer: Adam | None = None, progress=None):
    """Adam loop with deterministic per-seed batching and JSONL logging."""
    prepared = prepare_dataset(records, model.cfg, cfg)
    optimizer = optimizer or Adam(model.parameters(), lr=cfg.lr)
    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "train_log.jsonl"), "a")
    step = start_step
    history = []
    try:
        for epoch in range(cfg.epochs):
            order = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, 0xB47C, epoch])
            ).permutation(len(prepared))
            for lo in range(0, len(prepared), cfg.batch_size):
                batch = [prepared[i] for i in order[lo : lo + cfg.batch_size]]
                comps = train_step(model, batch, optimizer, cfg)
                step += 1
                comps["step"] = step
                history.append(comps)
                if log_fh is not None:
                    log_fh.write(json.dumps(comps) + "\n")
                if progress and step % cfg.log_every == 0:
                    progress(comps)
        if out_dir is not None:
            save_checkpoint(model, out_dir, optimizer, step)
    finally:
        if log_fh is not None:
            log_fh.close()
    return history, optimizer, step
