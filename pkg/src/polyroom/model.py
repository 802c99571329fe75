"""The desk-scale reconstruction network.

A small conv stack plus plain self-attention encodes the density map; a
stack of decoder layers refines explicit room queries (M rooms x N
vertices x 2 coords) with factorized room-aware self-attention, a
deformable-lite cross-attention that bilinear-samples encoder features
around each vertex, and a zero-initialized offset head so refinement
starts exactly from the initialization. A two-way head scores each vertex
as corner / not-corner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ShapeError
from .queryinit import RoomQueries

# Cumulative count of query-key score pairs materialized by the decoder
# self-attention variants (heads share pair structure and are not counted).
_score_elements = 0


def reset_score_counter() -> None:
    global _score_elements
    _score_elements = 0


def score_counter() -> int:
    return _score_elements


def _count_scores(batch: int, tq: int, tk: int) -> None:
    global _score_elements
    _score_elements += batch * tq * tk


@dataclass
class ModelConfig:
    m: int = 20                 # max rooms
    n: int = 40                 # vertices per room
    d: int = 64                 # embedding width
    layers: int = 6             # decoder depth
    heads: int = 4
    k_points: int = 4           # cross-attention sample points per vertex
    encoder_layers: int = 1
    feature_stride: int = 8
    ffn_dim: int = 0            # 0 -> 4 * d
    attention: str = "room_aware"  # or "vanilla"

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ConfigError("d must be divisible by heads")
        if self.ffn_dim == 0:
            self.ffn_dim = 4 * self.d
        if self.attention not in ("room_aware", "vanilla"):
            raise ConfigError(f"unknown attention variant '{self.attention}'")
        if self.m * self.n * self.d > 8_000_000:
            raise ConfigError("config exceeds the desk-scale size cap")

    def to_dict(self) -> dict:
        return {
            "m": self.m, "n": self.n, "d": self.d, "layers": self.layers,
            "heads": self.heads, "k_points": self.k_points,
            "encoder_layers": self.encoder_layers,
            "feature_stride": self.feature_stride,
            "ffn_dim": self.ffn_dim, "attention": self.attention,
        }


@dataclass
class EncoderFeatures:
    grid: Tensor          # (Hf, Wf, d)


@dataclass
class DecoderOutput:
    """Everything the losses and the extractor need from one forward pass."""

    query_tensors: list          # Q_0..Q_L, each a (M, N, 2) Tensor
    corner_logits: Tensor        # (M, N, 2)
    content_states: list         # per-layer (M, N, d) Tensors

    @property
    def queries(self) -> list:
        return [t.data for t in self.query_tensors]

    @property
    def final_queries(self) -> np.ndarray:
        return self.query_tensors[-1].data

    def corner_probabilities(self) -> np.ndarray:
        """Softmax corner probability per vertex, (M, N)."""
        z = self.corner_logits.data
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return (e[..., 1] / e.sum(axis=-1))


def sinusoidal_encoding(coords: np.ndarray, d: int) -> np.ndarray:
    """Fixed 2D sinusoidal embedding of [0, 1] coordinates.

    Half the channels encode x, half y; each half interleaves sin/cos at
    temperatures 10000^(2i/half) on the 2*pi-scaled coordinate.
    """
    if d % 4 != 0:
        raise ShapeError("positional dimension must be divisible by 4")
    half = d // 2
    i = np.arange(half // 2, dtype=np.float64)
    freq = (2.0 * math.pi) / np.power(10000.0, 2.0 * i / half)
    flat = coords.reshape(-1, 2)
    args_x = flat[:, 0:1] * freq[None, :]
    args_y = flat[:, 1:2] * freq[None, :]
    parts = np.empty((flat.shape[0], d), dtype=np.float64)
    parts[:, 0:half:2] = np.sin(args_x)
    parts[:, 1:half:2] = np.cos(args_x)
    parts[:, half::2] = np.sin(args_y)
    parts[:, half + 1 :: 2] = np.cos(args_y)
    return parts.reshape(coords.shape[:-1] + (d,))


def _init_linear(rng, fan_in, fan_out, zero=False):
    if zero:
        w = np.zeros((fan_in, fan_out))
    else:
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    return w, np.zeros(fan_out)


class ParamStore:
    """Flat name -> Tensor registry shared by the whole model."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, Tensor] = {}

    def linear(self, name, fan_in, fan_out, zero=False):
        w, b = _init_linear(self.rng, fan_in, fan_out, zero=zero)
        wt = ag.parameter(w, name=f"{name}.w")
        bt = ag.parameter(b, name=f"{name}.b")
        self.params[f"{name}.w"] = wt
        self.params[f"{name}.b"] = bt
        return wt, bt

    def layer_norm(self, name, d):
        g = ag.parameter(np.ones(d), name=f"{name}.g")
        b = ag.parameter(np.zeros(d), name=f"{name}.b")
        self.params[f"{name}.g"] = g
        self.params[f"{name}.b"] = b
        return g, b

    def tensor(self, name, array):
        t = ag.parameter(array, name=name)
        self.params[name] = t
        return t


class MultiHeadAttention:
    """Standard multi-head attention over (B, T, d) token batches."""

    def __init__(self, store: ParamStore, name: str, d: int, heads: int):
        self.d = d
        self.heads = heads
        self.wq, self.bq = store.linear(f"{name}.q", d, d)
        self.wk, self.bk = store.linear(f"{name}.k", d, d)
        self.wv, self.bv = store.linear(f"{name}.v", d, d)
        self.wo, self.bo = store.linear(f"{name}.o", d, d)

    def _split(self, x: Tensor, b: int, t: int) -> Tensor:
        dh = self.d // self.heads
        x = ag.reshape(x, (b, t, self.heads, dh))
        x = ag.transpose(x, (0, 2, 1, 3))
        return ag.reshape(x, (b * self.heads, t, dh))

    def _merge(self, x: Tensor, b: int, t: int) -> Tensor:
        dh = self.d // self.heads
        x = ag.reshape(x, (b, self.heads, t, dh))
        x = ag.transpose(x, (0, 2, 1, 3))
        return ag.reshape(x, (b, t, self.d))

    def __call__(self, q_in: Tensor, k_in: Tensor, v_in: Tensor) -> Tensor:
        b, t, _ = q_in.shape
        q = self._split(ag.linear(q_in, self.wq, self.bq), b, t)
        k = self._split(ag.linear(k_in, self.wk, self.bk), b, k_in.shape[1])
        v = self._split(ag.linear(v_in, self.wv, self.bv), b, v_in.shape[1])
        out = ag.scaled_dot_attention(q, k, v)
        out = self._merge(out, b, t)
        return ag.linear(out, self.wo, self.bo)


class SelfAttentionBlock:
    """Pre-norm residual self-attention: x + MHA(LN(x) + pos, ..., LN(x))."""

    def __init__(self, store, name, d, heads, count_scores=False):
        self.mha = MultiHeadAttention(store, name, d, heads)
        self.ln_g, self.ln_b = store.layer_norm(f"{name}.ln", d)
        self.count_scores = count_scores

    def __call__(self, x: Tensor, pos: Tensor | None) -> Tensor:
        u = ag.layer_norm(x, self.ln_g, self.ln_b)
        qk = ag.add(u, pos) if pos is not None else u
        if self.count_scores:
            b, t, _ = x.shape
            _count_scores(b, t, t)
        return ag.add(x, self.mha(qk, qk, u))


class RoomAwareSelfAttention:
    """Factorized self-attention: within each room, then across rooms.

    Intra-room attention treats rooms as the batch and attends among a
    room's N vertex tokens; inter-room attention treats vertex slots as
    the batch and attends among the M room tokens that share a slot.
    Either half can be disabled, which yields the single-axis ablation
    arms and the identity configuration used in tests.
    """

    def __init__(self, store, name, d, heads, use_intra=True, use_inter=True):
        self.use_intra = use_intra
        self.use_inter = use_inter
        if use_intra:
            self.intra = SelfAttentionBlock(store, f"{name}.intra", d, heads, count_scores=True)
        if use_inter:
            self.inter = SelfAttentionBlock(store, f"{name}.inter", d, heads, count_scores=True)

    def intra_room(self, x: Tensor, pos: Tensor | None) -> Tensor:
        """Attention among each room's N vertex tokens; rooms act as batch."""
        return self.intra(x, pos)

    def inter_room(self, x: Tensor, pos: Tensor | None) -> Tensor:
        """Attention among the M rooms at each vertex slot; slots act as batch."""
        xt = ag.transpose(x, (1, 0, 2))
        pt = ag.transpose(pos, (1, 0, 2)) if pos is not None else None
        return ag.transpose(self.inter(xt, pt), (1, 0, 2))

    def __call__(self, x: Tensor, pos: Tensor | None) -> Tensor:
        if self.use_intra:
            x = self.intra_room(x, pos)
        if self.use_inter:
            x = self.inter_room(x, pos)
        return x


class VanillaSelfAttention:
    """Dense self-attention over all M*N flattened tokens (ablation arm)."""

    def __init__(self, store, name, d, heads):
        self.block = SelfAttentionBlock(store, name, d, heads, count_scores=True)

    def __call__(self, x: Tensor, pos: Tensor | None) -> Tensor:
        m, n, d = x.shape
        flat = ag.reshape(x, (1, m * n, d))
        pflat = ag.reshape(pos, (1, m * n, d)) if pos is not None else None
        out = self.block(flat, pflat)
        return ag.reshape(out, (m, n, d))


class DeformableCrossAttention:
    """Sample encoder features at learned offsets around each vertex.

    For every token the content state predicts k_points offsets and
    softmax mixture weights; features are bilinear-sampled at the vertex
    reference point plus each offset and combined, then projected back.
    """

    def __init__(self, store, name, d, heads, k_points):
        self.k = k_points
        self.d = d
        self.w_off, self.b_off = store.linear(f"{name}.off", d, 2 * k_points)
        self.w_wgt, self.b_wgt = store.linear(f"{name}.wgt", d, k_points)
        self.w_out, self.b_out = store.linear(f"{name}.out", d, d)
        self.ln_g, self.ln_b = store.layer_norm(f"{name}.ln", d)

    def __call__(self, x: Tensor, ref: Tensor, features: EncoderFeatures) -> Tensor:
        m, n, d = x.shape
        u = ag.layer_norm(x, self.ln_g, self.ln_b)
        offsets = ag.linear(u, self.w_off, self.b_off)          # (M, N, 2K)
        weights = ag.softmax(ag.linear(u, self.w_wgt, self.b_wgt), axis=-1)
        offsets = ag.reshape(offsets, (m * n * self.k, 2))
        ref_rep = ag.reshape(ref, (m * n, 1, 2))
        ref_rep = ag.concat([ref_rep] * self.k, axis=1)
        ref_rep = ag.reshape(ref_rep, (m * n * self.k, 2))
        pts = ag.add(ref_rep, offsets)
        sampled = ag.bilinear_sample(features.grid, pts)        # (MNK, d)
        sampled = ag.reshape(sampled, (m * n, self.k, d))
        w = ag.reshape(weights, (m * n, self.k, 1))
        w = ag.concat([w] * d, axis=2)
        mixed = ag.sum_(ag.mul(sampled, w), axis=1)             # (MN, d)
        mixed = ag.reshape(mixed, (m, n, d))
        return ag.add(x, ag.linear(mixed, self.w_out, self.b_out))


class FeedForward:
    def __init__(self, store, name, d, hidden):
        self.w1, self.b1 = store.linear(f"{name}.1", d, hidden)
        self.w2, self.b2 = store.linear(f"{name}.2", hidden, d)
        self.ln_g, self.ln_b = store.layer_norm(f"{name}.ln", d)

    def __call__(self, x: Tensor) -> Tensor:
        u = ag.layer_norm(x, self.ln_g, self.ln_b)
        return ag.add(x, ag.linear(ag.relu(ag.linear(u, self.w1, self.b1)), self.w2, self.b2))


class DecoderLayer:
    def __init__(self, store, name, cfg: ModelConfig):
        if cfg.attention == "room_aware":
            self.self_attn = RoomAwareSelfAttention(store, f"{name}.sa", cfg.d, cfg.heads)
        else:
            self.self_attn = VanillaSelfAttention(store, f"{name}.sa", cfg.d, cfg.heads)
        self.cross = DeformableCrossAttention(store, f"{name}.ca", cfg.d, cfg.heads, cfg.k_points)
        self.ffn = FeedForward(store, f"{name}.ffn", cfg.d, cfg.ffn_dim)
        # final offset layer starts at zero so layer 0 reproduces Q_0
        self.w_h1, self.b_h1 = store.linear(f"{name}.off.1", cfg.d, cfg.d)
        self.w_h2, self.b_h2 = store.linear(f"{name}.off.2", cfg.d, 2, zero=True)

    def __call__(self, x: Tensor, q: Tensor, pos: Tensor, features: EncoderFeatures):
        x = self.self_attn(x, pos)
        x = self.cross(x, ag.reshape(q, (-1, 2)), features)
        x = self.ffn(x)
        delta = ag.linear(ag.relu(ag.linear(x, self.w_h1, self.b_h1)), self.w_h2, self.b_h2)
        q_next = ag.clip(ag.add(q, delta), 0.0, 1.0)
        return x, q_next


class FloorplanModel:
    """Encoder, decoder stack, and heads behind one forward() call."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self._grid_pe = {}
        rng = np.random.default_rng(seed)
        store = ParamStore(rng)
        self.store = store

        # conv stem: 3x3 convs, stride-2 until feature_stride is reached
        n_down = int(round(math.log2(cfg.feature_stride)))
        chans = [1] + [max(8, cfg.d >> (n_down - 1 - i)) for i in range(n_down)]
        chans[-1] = cfg.d
        self.convs = []
        for i in range(n_down):
            cin, cout = chans[i], chans[i + 1]
            bound = math.sqrt(6.0 / (9 * cin + cout))
            w = rng.uniform(-bound, bound, size=(3, 3, cin, cout))
            wt = store.tensor(f"enc.conv{i}.w", w)
            bt = store.tensor(f"enc.conv{i}.b", np.zeros(cout))
            self.convs.append((wt, bt))
        self.enc_blocks = []
        for i in range(cfg.encoder_layers):
            attn = SelfAttentionBlock(store, f"enc.sa{i}", cfg.d, cfg.heads)
            ffn = FeedForward(store, f"enc.ffn{i}", cfg.d, cfg.ffn_dim)
            self.enc_blocks.append((attn, ffn))

        # positional query MLP: P = MLP(PE(Q))
        self.w_pe1, self.b_pe1 = store.linear("pe.1", cfg.d, cfg.d)
        self.w_pe2, self.b_pe2 = store.linear("pe.2", cfg.d, cfg.d)

        self.content = store.tensor(
            "content", rng.normal(0.0, 0.02, size=(cfg.m, cfg.n, cfg.d))
        )
        self.layers = [DecoderLayer(store, f"dec{i}", cfg) for i in range(cfg.layers)]
        self.w_cls, self.b_cls = store.linear("cls", cfg.d, 2)

    def parameters(self) -> dict:
        return self.store.params

    def zero_grad(self) -> None:
        for t in self.store.params.values():
            t.zero_grad()

    # -- encoder ----------------------------------------------------------

    def extract_features(self, density: np.ndarray) -> EncoderFeatures:
        h, w = density.shape
        if h != w:
            raise ShapeError("density map must be square")
        if h % self.cfg.feature_stride != 0:
            raise ShapeError(
                f"side {h} not divisible by stride {self.cfg.feature_stride}"
            )
        x = ag.tensor(np.asarray(density, dtype=np.float64)[..., None])
        for wt, bt in self.convs:
            x = ag.relu(ag.conv2d(x, wt, bt, stride=2, pad=1))
        hf, wf = x.shape[0], x.shape[1]
        tokens = ag.reshape(x, (1, hf * wf, self.cfg.d))
        key = (hf, wf)
        if key not in self._grid_pe:
            gy, gx = np.mgrid[0:hf, 0:wf]
            grid_pos = np.stack(
                [gx.ravel() / max(wf - 1, 1), gy.ravel() / max(hf - 1, 1)], axis=1
            )
            self._grid_pe[key] = sinusoidal_encoding(grid_pos, self.cfg.d)[None]
        pos = ag.tensor(self._grid_pe[key])
        for attn, ffn in self.enc_blocks:
            tokens = attn(tokens, pos)
            tokens = ffn(tokens)
        return EncoderFeatures(ag.reshape(tokens, (hf, wf, self.cfg.d)))

    # -- positional queries -------------------------------------------------

    def positional_embed(self, q: Tensor) -> Tensor:
        pe = ag.tensor(sinusoidal_encoding(q.data, self.cfg.d))
        h = ag.relu(ag.linear(pe, self.w_pe1, self.b_pe1))
        return ag.linear(h, self.w_pe2, self.b_pe2)

    # -- full forward ---------------------------------------------------------

    def forward(self, density: np.ndarray, q0: RoomQueries) -> DecoderOutput:
        cfg = self.cfg
        if q0.coords.shape != (cfg.m, cfg.n, 2):
            raise ShapeError(
                f"queries {q0.coords.shape} do not match config ({cfg.m}, {cfg.n}, 2)"
            )
        features = self.extract_features(density)
        q = ag.tensor(q0.coords)
        x = self.content
        snapshots = [q]
        states = []
        for layer in self.layers:
            pos = self.positional_embed(q)
            x, q = layer(x, q, pos, features)
            snapshots.append(q)
            states.append(x)
        logits = ag.linear(x, self.w_cls, self.b_cls)
        return DecoderOutput(snapshots, logits, states)
