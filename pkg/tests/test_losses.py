"""Training objectives: Huber norm, photometric, mask BCE, flow, CSE, total."""

import numpy as np
import pytest

from deformnvs.autodiff import tensor as T
from deformnvs.autodiff.tensor import Tape, Tensor
from deformnvs.dataset import FlowPair
from deformnvs.geometry import project
from deformnvs.losses import (
    FLOW_TAU,
    HUBER_EPS,
    LossWeights,
    cse_loss,
    flow_consistency_mask,
    flow_loss,
    flow_loss_single,
    huber,
    mask_loss,
    photo_loss,
    total_loss,
)


def test_huber_zero_and_cutoff():
    assert huber(Tensor(np.zeros((1, 3)))).data[0] == 0.0
    # |a| equal to the cutoff gives eps*(sqrt(2)-1)
    a = Tensor(np.array([[HUBER_EPS, 0.0, 0.0]]))
    expect = HUBER_EPS * (np.sqrt(2.0) - 1.0)
    assert abs(huber(a).data[0] - expect) < 1e-12
    assert abs(expect - 4.1421e-4) < 1e-7


def test_huber_bounded_by_norm_and_monotone():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((1000, 3)) * rng.uniform(1e-5, 10, (1000, 1))
    vals = huber(Tensor(a)).data
    norms = np.linalg.norm(a, axis=-1)
    assert np.all(vals <= norms + 1e-15)
    assert np.all(vals >= 0.0)
    order = np.argsort(norms)
    assert np.all(np.diff(vals[order]) >= -1e-15)


def test_huber_smooth_at_zero():
    # second derivative stays finite approaching zero: the quadratic regime
    # means huber(t)/t^2 tends to 1/(2 eps)
    ts = np.array([1e-6, 1e-7, 1e-8])
    vals = huber(Tensor(np.stack([ts, np.zeros(3), np.zeros(3)], axis=-1))).data
    ratio = vals / ts**2
    assert np.allclose(ratio, 1.0 / (2 * HUBER_EPS), rtol=1e-4)


def test_photo_loss_cases():
    rng = np.random.default_rng(1)
    img = rng.uniform(0, 1, (20, 3))
    mask = np.ones(20)
    assert photo_loss(Tensor(img * mask[:, None]), img, mask).data == 0.0
    off = photo_loss(Tensor(img + 0.1), img, mask)
    assert abs(off.data - 0.01) < 1e-12
    pred = rng.uniform(0, 1, (20, 3))
    mask2 = (rng.uniform(size=20) > 0.5).astype(float)
    got = photo_loss(Tensor(pred), img, mask2).data
    ref = np.mean([(pred[i, c] - img[i, c] * mask2[i]) ** 2 for i in range(20) for c in range(3)])
    assert abs(got - ref) < 1e-12


def test_mask_loss_cases():
    near_perfect = np.array([0.0001, 0.9999])
    tgt = np.array([0.0, 1.0])
    assert mask_loss(Tensor(near_perfect), tgt).data < 1.1e-4
    half = mask_loss(Tensor(np.full(10, 0.5)), (np.arange(10) % 2).astype(float))
    assert abs(half.data - np.log(2.0)) < 1e-6
    rng = np.random.default_rng(2)
    p = rng.uniform(0, 1, 50)
    t = rng.integers(0, 2, 50).astype(float)
    pc = p * (1 - 2e-6) + 1e-6
    ref = -np.mean(t * np.log(pc) + (1 - t) * np.log(1 - pc))
    assert abs(mask_loss(Tensor(p), t).data - ref) < 1e-10


def _const_pair(h, w, fx, fy):
    fwd = np.zeros((h, w, 2))
    fwd[..., 0] = fx
    fwd[..., 1] = fy
    bwd = -fwd
    return FlowPair(tgt=0, src=1, fwd=fwd, bwd=bwd, occl=np.zeros((h, w), dtype=bool))


def test_flow_consistency_constant_flow_all_valid():
    pair = _const_pair(8, 8, 0.7, -0.4)
    fg = np.ones((8, 8), dtype=bool)
    m = flow_consistency_mask(pair, fg, tau=FLOW_TAU)
    assert m.all()


def test_flow_consistency_tau_zero_rejects_noise():
    rng = np.random.default_rng(3)
    pair = _const_pair(16, 16, 0.0, 0.0)
    pair.bwd += rng.uniform(0.05, 0.2, pair.bwd.shape)
    m = flow_consistency_mask(pair, np.ones((16, 16), dtype=bool), tau=0.0)
    assert m.sum() == 0


def test_flow_consistency_flags_simulated_occlusion(small_scene, small_dataset):
    # pixels the simulator labels occluded between two frames must be
    # dropped by the forward-backward check at the default threshold
    ds = small_dataset
    keys = [k for k in ds.flow_pairs if abs(k[0] - k[1]) == 5]
    flagged = checked = kept = visible = 0
    for key in keys:
        pair = ds.flow_pairs[key]
        fg = ds.frames[key[0]].mask > 0.5
        m = flow_consistency_mask(pair, fg)
        occl = pair.occl & fg
        flagged += int((~m[occl]).sum())
        checked += int(occl.sum())
    assert checked > 0
    assert flagged / checked >= 0.9
    # while small-motion adjacent pairs keep nearly all visible pixels
    for key in (k for k in ds.flow_pairs if abs(k[0] - k[1]) == 1):
        pair = ds.flow_pairs[key]
        fg = ds.frames[key[0]].mask > 0.5
        m = flow_consistency_mask(pair, fg)
        vis = fg & ~pair.occl
        kept += int(m[vis].sum())
        visible += int(vis.sum())
    assert kept / visible >= 0.95


def test_flow_loss_zero_weights():
    rng = np.random.default_rng(4)
    pts = rng.uniform(-1, 1, (5, 4, 3))
    from conftest import SMALL_SPEC
    from deformnvs.synth import SynthScene

    cam = SynthScene(SMALL_SPEC).camera(0)
    loss, empty = flow_loss_single(
        pts,
        Tensor(rng.standard_normal((5, 4, 3))),
        Tensor(np.zeros((5, 4))),
        cam,
        rng.uniform(0, 32, (5, 2)),
        np.ones(5, dtype=bool),
    )
    assert not empty
    assert loss.data == 0.0


def test_flow_loss_empty_support():
    loss, empty = flow_loss_single(
        np.zeros((2, 3, 3)),
        Tensor(np.zeros((2, 3, 3))),
        Tensor(np.ones((2, 3))),
        None,
        np.zeros((2, 2)),
        np.zeros(2, dtype=bool),
    )
    assert empty and loss.data == 0.0
    combined, all_empty = flow_loss([(loss, empty)])
    assert all_empty and combined.data == 0.0


def test_flow_loss_zero_at_ground_truth(small_scene):
    # offsets equal to the exact scene flow project onto the flow target,
    # so the residual vanishes analytically
    scene = small_scene
    t_tgt, t_src = float(scene.timestamps()[2]), float(scene.timestamps()[6])
    cam_src = scene.camera(6)
    rng = np.random.default_rng(5)
    pts = rng.uniform(-0.4, 0.4, (6, 5, 3))
    gt = np.stack([scene.gt_scene_flow(pts[i], t_tgt, t_src) for i in range(6)])
    warped = (pts + gt).reshape(-1, 3)
    u, _ = project(cam_src, Tensor(warped))
    u = u.data.reshape(6, 5, 2)
    w = np.zeros((6, 5))
    w[:, 2] = 1.0  # one-hot: the flow target is that sample's projection
    targets = u[:, 2, :]
    loss, empty = flow_loss_single(pts, Tensor(gt), Tensor(w), cam_src, targets, np.ones(6, dtype=bool))
    assert not empty
    assert loss.data < 1e-8
    # perturbing the offsets far beyond the Huber cutoff blows the loss up
    loss2, _ = flow_loss_single(
        pts, Tensor(gt + 0.05), Tensor(w), cam_src, targets, np.ones(6, dtype=bool)
    )
    assert loss2.data > 10 * max(loss.data, 1e-9)


def test_flow_loss_gradient_matches_finite_differences(small_scene):
    scene = small_scene
    cam = scene.camera(3)
    rng = np.random.default_rng(6)
    pts = rng.uniform(-0.3, 0.3, (1, 4, 3))
    w = rng.uniform(0.1, 1.0, (1, 4))
    targets = rng.uniform(8, 24, (1, 2))
    d0 = rng.standard_normal((1, 4, 3)) * 0.01
    valid = np.ones(1, dtype=bool)

    def f(d_np):
        loss, _ = flow_loss_single(pts, Tensor(d_np), Tensor(w), cam, targets, valid)
        return float(loss.data)

    delta = Tensor(d0.copy(), requires_grad=True)
    with Tape() as tape:
        loss, _ = flow_loss_single(pts, delta, Tensor(w), cam, targets, valid)
        tape.backward(loss)
    fd = np.zeros_like(d0)
    h = 1e-6
    it = np.nditer(d0, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        up, dn = d0.copy(), d0.copy()
        up[idx] += h
        dn[idx] -= h
        fd[idx] = (f(up) - f(dn)) / (2 * h)
        it.iternext()
    rel = np.abs(delta.grad - fd).max() / max(np.abs(fd).max(), 1e-12)
    assert rel < 1e-3


def test_flow_loss_stops_gradient_at_weights(small_scene):
    scene = small_scene
    cam = scene.camera(1)
    rng = np.random.default_rng(7)
    pts = rng.uniform(-0.3, 0.3, (2, 3, 3))
    w = Tensor(rng.uniform(0.1, 1.0, (2, 3)), requires_grad=True)
    delta = Tensor(rng.standard_normal((2, 3, 3)) * 0.01, requires_grad=True)
    with Tape() as tape:
        loss, _ = flow_loss_single(pts, delta, w, cam, rng.uniform(4, 28, (2, 2)), np.ones(2, dtype=bool))
        tape.backward(loss)
    assert w.grad is None
    assert delta.grad is not None and np.any(delta.grad != 0.0)


def test_cse_loss_cases():
    rng = np.random.default_rng(8)
    tgt = rng.standard_normal((10, 4))
    fg = np.ones(10, dtype=bool)
    assert cse_loss(Tensor(tgt.copy()), tgt, fg).data == 0.0
    assert cse_loss(Tensor(tgt + 1.0), tgt, np.zeros(10, dtype=bool)).data == 0.0
    pred = tgt + rng.standard_normal((10, 4)) * 0.1
    fg2 = rng.uniform(size=10) > 0.4
    got = cse_loss(Tensor(pred), tgt, fg2).data
    eps = HUBER_EPS
    per = eps * (np.sqrt(1 + (np.linalg.norm(pred - tgt, axis=-1) / eps) ** 2) - 1)
    assert abs(got - per[fg2].sum() / fg2.sum()) < 1e-10


def test_total_loss_weights_and_linearity():
    w = LossWeights()
    assert (w.photo, w.flow, w.cse) == (1.0, 1000.0, 10.0)
    parts = [Tensor(np.array(v)) for v in (0.5, 2e-4, 0.03, 0.7)]
    tot = total_loss(*parts, w)
    expect = 0.5 + 1000 * 2e-4 + 10 * 0.03 + 1 * 0.7
    assert abs(tot.data - expect) < 1e-12
    doubled = total_loss(*[Tensor(2 * p.data) for p in parts], w)
    assert abs(doubled.data - 2 * expect) < 1e-12
    zeros = [Tensor(np.array(0.0))] * 4
    assert total_loss(*zeros, w).data == 0.0
    no_mask = total_loss(*parts, LossWeights(use_mask=False))
    assert abs(no_mask.data - (expect - 0.7)) < 1e-12
