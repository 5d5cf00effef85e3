"""Two-pass attention network: base block, offset decoder, heads, full forward."""

import time

import numpy as np
import pytest

from deformnvs.autodiff import tensor as T
from deformnvs.autodiff.tensor import Tape, Tensor
from deformnvs.encoder import EncoderConfig, make_source_view, token_dim
from deformnvs.nerformer import (
    NerformerConfig,
    _masked_softmax,
    base_block,
    heads,
    init_all_params,
    init_base_params,
    init_head_params,
    init_offset_params,
    offset_decoder,
    trackerf_forward,
)
from deformnvs.nn import ParamStore

from conftest import make_frame, tiny_configs


def _base_store(cfg, d_token, seed=0):
    store = ParamStore(np.random.default_rng(seed))
    init_base_params(store, cfg, d_token, "tr")
    return store


def _random_grid(rng, r, ns, nv, d, p_valid=0.85):
    tokens = Tensor(rng.standard_normal((r, ns, nv, d)).astype(np.float32))
    valid = rng.uniform(size=(r, ns, nv)) < p_valid
    valid[..., 0] = True  # keep at least one valid view per point
    return tokens, valid


def test_base_block_shape():
    cfg = NerformerConfig(d_model=32, n_rounds=1, d_ff=64)
    rng = np.random.default_rng(0)
    tokens, valid = _random_grid(rng, 3, 5, 4, 20)
    store = _base_store(cfg, 20)
    out = base_block(store, cfg, tokens, valid)
    assert out.shape == (3, 5, 4, cfg.d_model)
    assert np.all(np.isfinite(out.data))


def test_base_block_view_permutation():
    # source attention carries no positional encoding over views, so
    # permuting the view axis permutes the features identically
    cfg = NerformerConfig(d_model=32, n_rounds=2, d_ff=64)
    rng = np.random.default_rng(1)
    tokens, valid = _random_grid(rng, 2, 4, 5, 24)
    store = _base_store(cfg, 24)
    out = base_block(store, cfg, tokens, valid)
    perm = [3, 1, 4, 0, 2]
    out_p = base_block(store, cfg, Tensor(tokens.data[:, :, perm]), valid[:, :, perm])
    assert np.allclose(out.data[:, :, perm], out_p.data, atol=1e-5)


def test_masked_softmax_fully_masked_rows():
    rng = np.random.default_rng(2)
    scores = Tensor(rng.standard_normal((2, 3, 1, 4, 4)).astype(np.float32))
    key_valid = np.ones((2, 3, 4), dtype=bool)
    key_valid[0, 1] = False  # a row with no valid keys at all
    attn = _masked_softmax(scores, key_valid)
    assert np.all(np.isfinite(attn.data))
    assert np.all(attn.data[0, 1] == 0.0)
    kept = attn.data[1].sum(axis=-1)
    assert np.allclose(kept, 1.0, atol=1e-6)


def test_offset_decoder_zero_at_init():
    cfg = NerformerConfig(d_model=32, n_rounds=1, d_ff=64)
    rng = np.random.default_rng(3)
    store = ParamStore(np.random.default_rng(3))
    init_offset_params(store, cfg)
    feats = Tensor(rng.standard_normal((2, 6, 3, cfg.d_model)).astype(np.float32))
    valid = np.ones((2, 6, 3), dtype=bool)
    delta = offset_decoder(store, cfg, feats, np.array([0.1, 0.5, 0.9]), valid)
    assert delta.shape == (2, 6, 3, 3)
    assert np.all(delta.data == 0.0)


def test_offset_head_gradient_matches_finite_differences():
    cfg = NerformerConfig(d_model=16, n_heads=2, n_rounds=1, d_ff=32)
    store = ParamStore(np.random.default_rng(4))
    init_offset_params(store, cfg)
    rng = np.random.default_rng(5)
    w0 = rng.standard_normal(store["off/head/w"].shape).astype(np.float64) * 0.1
    store["off/head/w"] = Tensor(w0.copy(), requires_grad=True)
    feats_np = rng.standard_normal((1, 4, 2, cfg.d_model))
    valid = np.ones((1, 4, 2), dtype=bool)
    times = np.array([0.2, 0.8])
    tgt = rng.standard_normal((1, 4, 2, 3))

    def loss_of(w_np):
        store["off/head/w"].data[...] = w_np
        d = offset_decoder(store, cfg, Tensor(feats_np), times, valid)
        return ((d.data - tgt) ** 2).sum()

    with Tape() as tape:
        d = offset_decoder(store, cfg, Tensor(feats_np), times, valid)
        diff = T.sub(d, Tensor(tgt))
        tape.backward(T.sum_(T.mul(diff, diff)))
    grad = store["off/head/w"].grad.copy()

    fd = np.zeros_like(w0)
    h = 1e-6
    it = np.nditer(w0, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        up, dn = w0.copy(), w0.copy()
        up[idx] += h
        dn[idx] -= h
        fd[idx] = (loss_of(up) - loss_of(dn)) / (2 * h)
        it.iternext()
    store["off/head/w"].data[...] = w0
    rel = np.abs(grad - fd).max() / max(np.abs(fd).max(), 1e-9)
    assert rel < 1e-4


def test_heads_ranges_and_all_invalid_gate():
    cfg = NerformerConfig(d_model=32, n_rounds=1, d_ff=64)
    store = ParamStore(np.random.default_rng(6))
    init_head_params(store, cfg)
    rng = np.random.default_rng(7)
    feats = Tensor(rng.standard_normal((3, 5, 4, cfg.d_model)).astype(np.float32) * 3)
    valid = rng.uniform(size=(3, 5, 4)) < 0.7
    valid[1, 2] = False  # a point with no valid views
    preds = heads(store, cfg, feats, valid)
    assert np.all(preds.sigma.data >= 0.0)
    assert np.all((preds.color.data > 0.0) & (preds.color.data < 1.0))
    assert preds.sigma.data[1, 2] == 0.0
    assert np.all(np.isfinite(preds.cse.data))


def test_heads_view_permutation_invariant():
    cfg = NerformerConfig(d_model=32, n_rounds=1, d_ff=64)
    store = ParamStore(np.random.default_rng(8))
    init_head_params(store, cfg)
    rng = np.random.default_rng(9)
    feats, valid = _random_grid(rng, 2, 4, 5, cfg.d_model)
    a = heads(store, cfg, feats, valid)
    perm = [4, 2, 0, 1, 3]
    b = heads(store, cfg, Tensor(feats.data[:, :, perm]), valid[:, :, perm])
    assert np.allclose(a.sigma.data, b.sigma.data, atol=1e-6)
    assert np.allclose(a.color.data, b.color.data, atol=1e-6)


@pytest.fixture(scope="module")
def forward_setup(small_scene):
    enc_cfg, net_cfg = tiny_configs()
    store = ParamStore(np.random.default_rng(10))
    init_all_params(store, enc_cfg, net_cfg)
    views = [make_source_view(store, enc_cfg, make_frame(small_scene, k)) for k in (0, 3, 7)]
    rng = np.random.default_rng(11)
    cam = small_scene.camera(5)
    near, far = small_scene.near_far(cam)
    pts = rng.uniform(-0.6, 0.6, size=(4, 6, 3))
    dirs = rng.standard_normal((4, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return store, enc_cfg, net_cfg, views, pts, dirs


def test_forward_reduction_to_rigid_at_init(forward_setup):
    # the zero-initialized offset head makes the two-pass forward collapse
    # onto the single-pass variant exactly (passes share weights)
    store, enc_cfg, net_cfg, views, pts, dirs = forward_setup
    full, delta = trackerf_forward(store, enc_cfg, net_cfg, pts, dirs, views, 0.4, use_offsets=True)
    rigid, none = trackerf_forward(store, enc_cfg, net_cfg, pts, dirs, views, 0.4, use_offsets=False)
    assert none is None
    assert np.all(delta.data == 0.0)
    assert np.max(np.abs(full.sigma.data - rigid.sigma.data)) < 1e-6
    assert np.max(np.abs(full.color.data - rigid.color.data)) < 1e-6
    assert np.max(np.abs(full.cse.data - rigid.cse.data)) < 1e-6


def test_forward_deterministic(forward_setup):
    store, enc_cfg, net_cfg, views, pts, dirs = forward_setup
    a, da = trackerf_forward(store, enc_cfg, net_cfg, pts, dirs, views, 0.4)
    b, db = trackerf_forward(store, enc_cfg, net_cfg, pts, dirs, views, 0.4)
    assert np.array_equal(a.sigma.data, b.sigma.data)
    assert np.array_equal(a.color.data, b.color.data)
    assert np.array_equal(da.data, db.data)


def test_forward_runtime_roughly_linear_in_views(small_scene):
    enc_cfg, net_cfg = tiny_configs()
    store = ParamStore(np.random.default_rng(12))
    init_all_params(store, enc_cfg, net_cfg)
    all_views = [make_source_view(store, enc_cfg, make_frame(small_scene, k)) for k in range(8)]
    rng = np.random.default_rng(13)
    pts = rng.uniform(-0.6, 0.6, size=(8, 8, 3))
    dirs = np.tile([0.0, 0.0, 1.0], (8, 1))

    def clock(nv, reps=3):
        views = all_views[:nv]
        trackerf_forward(store, enc_cfg, net_cfg, pts, dirs, views, 0.4)  # warm up
        t0 = time.perf_counter()
        for _ in range(reps):
            trackerf_forward(store, enc_cfg, net_cfg, pts, dirs, views, 0.4)
        return (time.perf_counter() - t0) / reps

    t2, t8 = clock(2), clock(8)
    # quadrupling the view count should scale runtime roughly linearly;
    # generous bounds keep the check robust to scheduler noise
    assert 1.3 < t8 / t2 < 12.0
