"""Two-pass token transformer with a scene-flow offset head.

Pass 1 runs the base block (alternating ray-axis / source-axis attention)
on the time-conditioned token grid and decodes per-point, per-view 3D
offsets. Pass 2 resamples tokens at the offset-adjusted points, runs the
base block again (shared weights by default) and decodes color, opacity
and canonical-embedding heads from validity-masked source pooling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import tensor as T
from .autodiff.tensor import Tensor
from .encoder import EncoderConfig, SourceView, token_dim, token_grid
from .geometry import GAMMA_TIME, harmonic_encode_np
from .nn import ParamStore, linear
from .render import PointPredictions

_NEG = -1e9


@dataclass
class NerformerConfig:
    d_model: int = 64
    n_heads: int = 4
    n_rounds: int = 2
    d_ff: int = 128
    d_cse: int = 8
    shared_passes: bool = True
    positional: bool = True

    @property
    def d_head(self) -> int:
        assert self.d_model % self.n_heads == 0
        return self.d_model // self.n_heads


def init_base_params(store: ParamStore, cfg: NerformerConfig, d_token: int, prefix: str) -> None:
    d = cfg.d_model
    store.xavier(f"{prefix}/in/w", d_token, d)
    store.zeros(f"{prefix}/in/b", (d,))
    for l in range(cfg.n_rounds):
        for sub in ("ray", "src"):
            for m in ("q", "k", "v", "o"):
                store.xavier(f"{prefix}/{l}/{sub}/{m}", d, d)
            store.ones(f"{prefix}/{l}/{sub}/ln_g", (d,))
            store.zeros(f"{prefix}/{l}/{sub}/ln_b", (d,))
        store.xavier(f"{prefix}/{l}/ff/w1", d, cfg.d_ff)
        store.zeros(f"{prefix}/{l}/ff/b1", (cfg.d_ff,))
        store.xavier(f"{prefix}/{l}/ff/w2", cfg.d_ff, d)
        store.zeros(f"{prefix}/{l}/ff/b2", (d,))
        store.ones(f"{prefix}/{l}/ff/ln_g", (d,))
        store.zeros(f"{prefix}/{l}/ff/ln_b", (d,))


def init_offset_params(store: ParamStore, cfg: NerformerConfig, prefix: str = "off") -> None:
    d = cfg.d_model
    d_time = 2 * (GAMMA_TIME + 1)
    store.xavier(f"{prefix}/q", d + d_time, d)
    for m in ("k", "v", "o"):
        store.xavier(f"{prefix}/{m}", d, d)
    store.ones(f"{prefix}/ln1_g", (d,))
    store.zeros(f"{prefix}/ln1_b", (d,))
    store.xavier(f"{prefix}/ff/w1", d, cfg.d_ff)
    store.zeros(f"{prefix}/ff/b1", (cfg.d_ff,))
    store.xavier(f"{prefix}/ff/w2", cfg.d_ff, d)
    store.zeros(f"{prefix}/ff/b2", (d,))
    store.ones(f"{prefix}/ln2_g", (d,))
    store.zeros(f"{prefix}/ln2_b", (d,))
    # zero-init head: training starts as the rigid (zero-offset) model
    store.zeros(f"{prefix}/head/w", (d, 3))
    store.zeros(f"{prefix}/head/b", (3,))


def init_head_params(store: ParamStore, cfg: NerformerConfig, prefix: str = "head") -> None:
    d = cfg.d_model
    store.xavier(f"{prefix}/pool_q", d, 1)
    store.xavier(f"{prefix}/w1", d, d)
    store.zeros(f"{prefix}/b1", (d,))
    store.xavier(f"{prefix}/color/w", d, 3)
    store.zeros(f"{prefix}/color/b", (3,))
    store.xavier(f"{prefix}/sigma/w", d, 1)
    store.zeros(f"{prefix}/sigma/b", (1,))
    store.xavier(f"{prefix}/cse/w", d, cfg.d_cse)
    store.zeros(f"{prefix}/cse/b", (cfg.d_cse,))


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b1, b2, t, d = x.shape
    dh = d // n_heads
    return T.transpose(T.reshape(x, (b1, b2, t, n_heads, dh)), (0, 1, 3, 2, 4))


def _merge_heads(x: Tensor) -> Tensor:
    b1, b2, h, t, dh = x.shape
    return T.reshape(T.transpose(x, (0, 1, 3, 2, 4)), (b1, b2, t, h * dh))


def _masked_softmax(scores: Tensor, key_valid: np.ndarray) -> Tensor:
    """Softmax over the last axis with invalid keys excluded; rows whose keys
    are all invalid produce zeros (never NaN)."""
    b1, b2, h, tq, tk = scores.shape
    neg = np.where(key_valid, 0.0, _NEG).astype(scores.dtype)[:, :, None, None, :]
    scores = T.add(scores, T.broadcast_to(Tensor(np.ascontiguousarray(neg)), scores.shape))
    attn = T.softmax(scores, axis=-1)
    row_gate = key_valid.any(axis=-1).astype(scores.dtype)[:, :, None, None, None]
    gate = np.broadcast_to(row_gate, (b1, b2, 1, 1, 1))
    return T.mul(attn, T.broadcast_to(Tensor(np.ascontiguousarray(gate)), attn.shape))


def _attention(
    store: ParamStore,
    cfg: NerformerConfig,
    q_in: Tensor,
    kv_in: Tensor,
    key_valid: np.ndarray,
    wq: str,
    wk: str,
    wv: str,
    wo: str,
) -> Tensor:
    """Multi-head attention over the last-but-one axis of (B1, B2, T, D)."""
    q = _split_heads(T.matmul(q_in, store[wq]), cfg.n_heads)
    k = _split_heads(T.matmul(kv_in, store[wk]), cfg.n_heads)
    v = _split_heads(T.matmul(kv_in, store[wv]), cfg.n_heads)
    scale = 1.0 / np.sqrt(cfg.d_head)
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 2, 4, 3))), scale)
    attn = _masked_softmax(scores, key_valid)
    out = _merge_heads(T.matmul(attn, v))
    return T.matmul(out, store[wo])


def _ln(store: ParamStore, x: Tensor, gain: str, bias: str) -> Tensor:
    return T.layer_norm(x, store[gain], store[bias], axis=-1)


def _ffn(store: ParamStore, x: Tensor, prefix: str) -> Tensor:
    h = T.relu(linear(x, store[f"{prefix}/w1"], store[f"{prefix}/b1"]))
    return linear(h, store[f"{prefix}/w2"], store[f"{prefix}/b2"])


def base_block(
    store: ParamStore,
    cfg: NerformerConfig,
    tokens: Tensor,
    valid: np.ndarray,
    prefix: str = "tr",
) -> Tensor:
    """Alternating ray-axis / source-axis attention over the token grid.

    tokens: (R, N_S, N_src, D_token); valid: matching bool mask.
    Returns features (R, N_S, N_src, d_model).
    """
    h = linear(tokens, store[f"{prefix}/in/w"], store[f"{prefix}/in/b"])
    valid_ray = np.ascontiguousarray(valid.transpose(0, 2, 1))  # (R, V, N_S)
    for l in range(cfg.n_rounds):
        p = f"{prefix}/{l}"
        # attend along the ray (keys = samples), per (ray, view)
        ht = T.transpose(h, (0, 2, 1, 3))
        a = _attention(store, cfg, ht, ht, valid_ray, f"{p}/ray/q", f"{p}/ray/k", f"{p}/ray/v", f"{p}/ray/o")
        h = _ln(store, T.add(h, T.transpose(a, (0, 2, 1, 3))), f"{p}/ray/ln_g", f"{p}/ray/ln_b")
        # attend across source views (keys = views), per (ray, sample)
        a = _attention(store, cfg, h, h, valid, f"{p}/src/q", f"{p}/src/k", f"{p}/src/v", f"{p}/src/o")
        h = _ln(store, T.add(h, a), f"{p}/src/ln_g", f"{p}/src/ln_b")
        h = _ln(store, T.add(h, _ffn(store, h, f"{p}/ff")), f"{p}/ff/ln_g", f"{p}/ff/ln_b")
    return h


def offset_decoder(
    store: ParamStore,
    cfg: NerformerConfig,
    features: Tensor,
    src_times: np.ndarray,
    valid: np.ndarray,
    prefix: str = "off",
) -> Tensor:
    """Single-layer transformer decoder predicting per-(point, view) offsets.

    Queries are [feature, gamma(t_src)] per token; they cross-attend to the
    features along the ray axis of the same view. The final linear head is
    zero-initialized, so a fresh model predicts exactly zero offsets.
    """
    r, ns, nv, d = features.shape
    time_enc = harmonic_encode_np(np.asarray(src_times, dtype=np.float64)[:, None], GAMMA_TIME)
    time_grid = np.broadcast_to(
        time_enc.astype(np.float32)[None, None, :, :], (r, ns, nv, time_enc.shape[-1])
    )
    q_in = T.concat([features, Tensor(np.ascontiguousarray(time_grid))], axis=-1)
    q = T.transpose(T.matmul(q_in, store[f"{prefix}/q"]), (0, 2, 1, 3))  # (R, V, N_S, D)
    kv = T.transpose(features, (0, 2, 1, 3))
    valid_ray = np.ascontiguousarray(valid.transpose(0, 2, 1))
    qh = _split_heads(q, cfg.n_heads)
    kh = _split_heads(T.matmul(kv, store[f"{prefix}/k"]), cfg.n_heads)
    vh = _split_heads(T.matmul(kv, store[f"{prefix}/v"]), cfg.n_heads)
    scores = T.mul(T.matmul(qh, T.transpose(kh, (0, 1, 2, 4, 3))), 1.0 / np.sqrt(cfg.d_head))
    attn = _masked_softmax(scores, valid_ray)
    out = T.matmul(_merge_heads(T.matmul(attn, vh)), store[f"{prefix}/o"])
    h = _ln(store, T.add(q, out), f"{prefix}/ln1_g", f"{prefix}/ln1_b")
    h = _ln(store, T.add(h, _ffn(store, h, f"{prefix}/ff")), f"{prefix}/ln2_g", f"{prefix}/ln2_b")
    delta = linear(h, store[f"{prefix}/head/w"], store[f"{prefix}/head/b"])
    return T.transpose(delta, (0, 2, 1, 3))  # (R, N_S, V, 3)


def heads(
    store: ParamStore,
    cfg: NerformerConfig,
    features: Tensor,
    valid: np.ndarray,
    prefix: str = "head",
) -> PointPredictions:
    """Validity-masked learned-query pooling over views, then the three heads.

    Points with no valid view get opacity forced to zero.
    """
    r, ns, nv, d = features.shape
    scores = T.reshape(T.matmul(features, store[f"{prefix}/pool_q"]), (r, ns, nv))
    neg = np.where(valid, 0.0, _NEG).astype(scores.dtype)
    scores = T.add(scores, Tensor(np.ascontiguousarray(neg)))
    attn = T.softmax(scores, axis=-1)
    any_valid = valid.any(axis=-1).astype(scores.dtype)
    attn = T.mul(attn, Tensor(np.ascontiguousarray(np.broadcast_to(any_valid[:, :, None], (r, ns, nv)))))
    gate = Tensor(np.ascontiguousarray(any_valid))
    pooled = T.reshape(T.matmul(T.reshape(attn, (r, ns, 1, nv)), features), (r, ns, d))
    hidden = T.relu(linear(pooled, store[f"{prefix}/w1"], store[f"{prefix}/b1"]))
    color = T.sigmoid(linear(hidden, store[f"{prefix}/color/w"], store[f"{prefix}/color/b"]))
    sigma = T.softplus(linear(hidden, store[f"{prefix}/sigma/w"], store[f"{prefix}/sigma/b"]))
    sigma = T.mul(T.reshape(sigma, (r, ns)), gate)
    cse = linear(hidden, store[f"{prefix}/cse/w"], store[f"{prefix}/cse/b"])
    return PointPredictions(color=color, sigma=sigma, cse=cse)


def trackerf_forward(
    store: ParamStore,
    enc_cfg: EncoderConfig,
    net_cfg: NerformerConfig,
    points: np.ndarray,
    directions: np.ndarray,
    views: list[SourceView],
    t_tgt: float,
    use_offsets: bool = True,
) -> tuple[PointPredictions, Tensor | None]:
    """Full two-pass forward for a batch of rays.

    points: (R, N_S, 3) constant sample locations. Returns the per-point
    predictions and the offset field (None when use_offsets is off, which
    is exactly the rigid single-pass ablation).
    """
    grid1, valid1 = token_grid(
        points, views, t_tgt, directions=directions, positional=net_cfg.positional
    )
    f1 = base_block(store, net_cfg, grid1, valid1, prefix="tr")
    if not use_offsets:
        return heads(store, net_cfg, f1, valid1), None
    src_times = np.array([v.timestamp for v in views])
    delta = offset_decoder(store, net_cfg, f1, src_times, valid1)
    r, ns, _ = points.shape
    base_pts = Tensor(
        np.ascontiguousarray(
            np.broadcast_to(points[:, :, None, :], (r, ns, len(views), 3)).astype(np.float32)
        )
    )
    adjusted = T.add(base_pts, delta)
    grid2, valid2 = token_grid(
        adjusted,
        views,
        t_tgt,
        directions=directions,
        positional=net_cfg.positional,
        positional_points=points,
    )
    pass2_prefix = "tr" if net_cfg.shared_passes else "tr2"
    f2 = base_block(store, net_cfg, grid2, valid2, prefix=pass2_prefix)
    return heads(store, net_cfg, f2, valid2), delta


def init_all_params(
    store: ParamStore, enc_cfg: EncoderConfig, net_cfg: NerformerConfig
) -> None:
    from .encoder import init_encoder_params

    init_encoder_params(store, enc_cfg)
    d_token = token_dim(enc_cfg, net_cfg.positional)
    init_base_params(store, net_cfg, d_token, "tr")
    if not net_cfg.shared_passes:
        init_base_params(store, net_cfg, d_token, "tr2")
    init_offset_params(store, net_cfg)
    init_head_params(store, net_cfg)
