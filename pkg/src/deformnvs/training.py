"""Optimization loop, evaluation protocols, and metrics.

Covers Adam with plateau learning-rate decay, batch construction over
source views, the known/unseen frame split, full-frame evaluation, and
the three protocols: single-scene reconstruction (msssr), cross-scene
few-shot reconstruction (fscr), and fine-tuning from a checkpoint (ft).
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .autodiff import tensor as T
from .autodiff.tensor import Tensor, Tape, active_tape
from .dataset import SceneDataset
from .encoder import EncoderConfig, SourceView, make_source_view
from .geometry import rays_for_pixels, stratified_ray_points
from .losses import (
    LossWeights,
    cse_loss,
    flow_consistency_mask,
    flow_loss,
    flow_loss_single,
    mask_loss,
    photo_loss,
    total_loss,
)
from .nerformer import NerformerConfig, init_all_params, trackerf_forward
from .nn import ParamStore
from .render import RenderOutput, composite, ea_weights

N_SRC_SWEEP = (5, 10, 15, 20, 25)
PSNR_CAP = 60.0


class NumericError(RuntimeError):
    """Non-finite gradient or loss; carries the offending parameter name."""


@dataclass
class TrainConfig:
    task: str = "msssr"
    seed: int = 0
    max_steps: int = 5000
    lr: float = 5e-4
    decay_factor: float = 10.0
    patience: int = 500
    plateau_rel: float = 1e-3
    plateau_window: int = 50
    max_decays: int = 2
    n_src_min: int = 5
    n_src_max: int = 25
    rays_per_step: int = 512
    n_samples: int = 32
    jitter: bool = True
    use_offsets: bool = True
    eval_max_frames: int = 0  # 0 = every unseen frame
    eval_chunk: int = 512
    log_every: int = 100
    loss: LossWeights = field(default_factory=LossWeights)
    enc: EncoderConfig = field(default_factory=EncoderConfig)
    net: NerformerConfig = field(default_factory=NerformerConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (1 <= self.n_src_min <= self.n_src_max):
            raise ValueError("bad n_src range")

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def frame_split(n: int) -> np.ndarray:
    """Known/unseen labels: repeating 15 known frames then 5 held out."""
    if n < 1:
        raise ValueError("need at least one frame")
    return (np.arange(n) % 20) < 15


@dataclass
class Batch:
    target: int
    sources: list[int]
    pixels: np.ndarray  # (R, 2) integer (x, y)


def make_batch(
    dataset: SceneDataset, known: np.ndarray, cfg: TrainConfig, rng: np.random.Generator
) -> Batch:
    """Pick a known target, source frames without replacement, and ray pixels
    (half from the target's foreground, half anywhere).

    One source is swapped for a flow partner of the target when available so
    the flow term gets supervision every step.
    """
    known_idx = np.flatnonzero(known)
    if known_idx.size < cfg.n_src_min + 1:
        raise ValueError(
            f"{known_idx.size} known frames; need at least {cfg.n_src_min + 1}"
        )
    target = int(rng.choice(known_idx))
    pool = known_idx[known_idx != target]
    n_src = int(rng.integers(cfg.n_src_min, cfg.n_src_max + 1))
    n_src = min(n_src, pool.size)
    sources = list(rng.choice(pool, size=n_src, replace=False))
    partners = [s for s in dataset.flow_sources_for(target) if known[s] and s != target]
    if partners and not any(s in partners for s in sources):
        sources[-1] = int(rng.choice(partners))
    frame = dataset.frames[target]
    h, w = frame.mask.shape
    n_fg = cfg.rays_per_step // 2
    fg_ys, fg_xs = np.nonzero(frame.mask > 0.5)
    pix = np.empty((cfg.rays_per_step, 2), dtype=np.int64)
    if fg_ys.size:
        pick = rng.integers(0, fg_ys.size, n_fg)
        pix[:n_fg, 0] = fg_xs[pick]
        pix[:n_fg, 1] = fg_ys[pick]
    else:
        pix[:n_fg, 0] = rng.integers(0, w, n_fg)
        pix[:n_fg, 1] = rng.integers(0, h, n_fg)
    pix[n_fg:, 0] = rng.integers(0, w, cfg.rays_per_step - n_fg)
    pix[n_fg:, 1] = rng.integers(0, h, cfg.rays_per_step - n_fg)
    return Batch(target=target, sources=[int(s) for s in sources], pixels=pix)


# -- optimizer --------------------------------------------------------------------


class AdamState:
    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0


def adam_step(
    store: ParamStore,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, p in store.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter '{name}'")
        g = g.astype(p.data.dtype, copy=False)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


class PlateauState:
    """Windowed-mean plateau detector; divides lr by the decay factor when the
    mean loss stops improving by a relative margin, at most max_decays times."""

    def __init__(self, cfg: TrainConfig):
        self.lr = cfg.lr
        self.cfg = cfg
        self.history: list[float] = []
        self.best = np.inf
        self.since = 0
        self.decays = 0

    def update(self, loss: float) -> float:
        cfg = self.cfg
        self.history.append(loss)
        if len(self.history) < cfg.plateau_window:
            return self.lr
        wm = float(np.mean(self.history[-cfg.plateau_window:]))
        if wm < self.best * (1.0 - cfg.plateau_rel):
            self.best = wm
            self.since = 0
        else:
            self.since += 1
        if self.since >= cfg.patience and self.decays < cfg.max_decays:
            self.lr /= cfg.decay_factor
            self.decays += 1
            self.since = 0
            self.best = wm
        return self.lr


# -- metrics ----------------------------------------------------------------------


def metrics(
    pred_image: np.ndarray,
    gt_image: np.ndarray,
    pred_mask: np.ndarray,
    gt_mask: np.ndarray,
) -> dict[str, float]:
    if pred_image.shape != gt_image.shape or pred_mask.shape != gt_mask.shape:
        raise ValueError("shape mismatch in metrics")
    mse = float(np.mean((pred_image.astype(np.float64) - gt_image) ** 2))
    psnr = PSNR_CAP if mse < 1e-6 else min(10.0 * np.log10(1.0 / mse), PSNR_CAP)
    l1 = float(np.mean(np.abs(pred_image.astype(np.float64) - gt_image)))
    a = pred_mask > 0.5
    b = gt_mask > 0.5
    union = np.logical_or(a, b).sum()
    iou = 1.0 if union == 0 else float(np.logical_and(a, b).sum() / union)
    return {"psnr": float(psnr), "l1": l1, "iou": iou}


# -- model ------------------------------------------------------------------------


@dataclass
class TrackerFModel:
    enc: EncoderConfig
    net: NerformerConfig
    store: ParamStore

    @classmethod
    def create(cls, enc: EncoderConfig, net: NerformerConfig, seed: int) -> "TrackerFModel":
        store = ParamStore(rng=np.random.default_rng(seed))
        init_all_params(store, enc, net)
        return cls(enc=enc, net=net, store=store)

    def save(self, ckpt_dir: str | Path, step: int, extra: dict | None = None) -> None:
        info = {"enc": asdict(self.enc), "net": asdict(self.net)}
        if extra:
            info.update(extra)
        self.store.save(ckpt_dir, step=step, extra=info)

    @classmethod
    def load(cls, ckpt_dir: str | Path) -> tuple["TrackerFModel", dict]:
        store, index = ParamStore.load(ckpt_dir)
        extra = dict(index.get("extra", {}))
        extra.setdefault("step", index.get("step", 0))
        # JSON turns tuples into lists; restore them for the config dataclasses
        enc_kw = {k: tuple(v) if isinstance(v, list) else v for k, v in extra["enc"].items()}
        net_kw = {k: tuple(v) if isinstance(v, list) else v for k, v in extra["net"].items()}
        return cls(enc=EncoderConfig(**enc_kw), net=NerformerConfig(**net_kw), store=store), extra


def forward_rays(
    model: TrackerFModel,
    views: list[SourceView],
    t_tgt: float,
    origins: np.ndarray,
    directions: np.ndarray,
    near: float,
    far: float,
    n_samples: int,
    rng: np.random.Generator | None = None,
    jitter: bool = False,
    use_offsets: bool = True,
) -> tuple[RenderOutput, np.ndarray, Tensor | None]:
    """Sample rays, run the two-pass network, composite.

    Returns (render output, sample points (R, N_S, 3), offsets or None).
    """
    samples = stratified_ray_points(
        origins, directions, near, far, n_samples, jitter=jitter, rng=rng
    )
    preds, delta = trackerf_forward(
        model.store,
        model.enc,
        model.net,
        samples.points,
        directions,
        views,
        t_tgt,
        use_offsets=use_offsets,
    )
    weights, residual = ea_weights(preds.sigma, samples.delta)
    color = composite(weights, preds.color)
    cse = composite(weights, preds.cse) if preds.cse is not None else None
    mask = T.sum_(weights, axis=1)
    out = RenderOutput(
        color=color,
        mask=mask,
        weights=weights,
        residual=residual,
        depths=samples.depths,
        cse=cse,
    )
    return out, samples.points, delta


# -- training ---------------------------------------------------------------------


def train(
    model: TrackerFModel,
    datasets: list[SceneDataset],
    splits: list[np.ndarray],
    cfg: TrainConfig,
    log=None,
) -> dict:
    """Fit the model on the known frames of the given scenes.

    Returns a history dict with per-step total losses and the step count.
    """
    rng = np.random.default_rng(cfg.seed)
    adam = AdamState()
    plateau = PlateauState(cfg)
    losses: list[float] = []
    for step in range(cfg.max_steps):
        si = int(rng.integers(0, len(datasets))) if len(datasets) > 1 else 0
        ds, known = datasets[si], splits[si]
        batch = make_batch(ds, known, cfg, rng)
        tgt_frame = ds.frames[batch.target]
        near, far = ds.near_far(tgt_frame.camera)
        px = batch.pixels[:, 0]
        py = batch.pixels[:, 1]
        pix_centers = batch.pixels.astype(np.float64) + 0.5
        origins, dirs = rays_for_pixels(tgt_frame.camera, pix_centers)
        with Tape() as tape:
            views = [make_source_view(model.store, model.enc, ds.frames[s]) for s in batch.sources]
            out, points, delta = forward_rays(
                model,
                views,
                tgt_frame.timestamp,
                origins,
                dirs,
                near,
                far,
                cfg.n_samples,
                rng=rng,
                jitter=cfg.jitter,
                use_offsets=cfg.use_offsets,
            )
            l_photo = photo_loss(out.color, tgt_frame.image[py, px], tgt_frame.mask[py, px])
            l_mask = mask_loss(out.mask, tgt_frame.mask[py, px])
            l_cse = None
            if out.cse is not None and tgt_frame.cse is not None:
                l_cse = cse_loss(out.cse, tgt_frame.cse[py, px], tgt_frame.mask[py, px] > 0.5)
            l_flow = None
            if delta is not None and cfg.loss.flow > 0:
                terms = []
                for vi, s in enumerate(batch.sources):
                    pair = ds.flow_pairs.get((batch.target, s))
                    if pair is None:
                        continue
                    valid2d = flow_consistency_mask(pair, tgt_frame.mask > 0.5)
                    ray_valid = valid2d[py, px]
                    flow_targets = pix_centers + pair.fwd[py, px]
                    delta_v = T.reshape(
                        delta[:, :, vi : vi + 1, :], (points.shape[0], points.shape[1], 3)
                    )
                    terms.append(
                        flow_loss_single(
                            points,
                            delta_v,
                            out.weights,
                            ds.frames[s].camera,
                            flow_targets,
                            ray_valid,
                        )
                    )
                if terms:
                    l_flow, _ = flow_loss(terms)
            loss = total_loss(l_photo, l_flow, l_cse, l_mask, cfg.loss)
            lval = loss.item()
            if not np.isfinite(lval):
                raise NumericError(f"non-finite total loss at step {step}")
            tape.backward(loss)
        adam_step(model.store, adam, plateau.lr)
        model.store.zero_grad()
        losses.append(lval)
        plateau.update(lval)
        if log is not None and (step % cfg.log_every == 0 or step == cfg.max_steps - 1):
            log(f"step {step} loss {lval:.6f} lr {plateau.lr:.2e}")
    return {"losses": losses, "steps": cfg.max_steps, "final_lr": plateau.lr}


# -- evaluation -------------------------------------------------------------------


def nearest_known_sources(
    dataset: SceneDataset, known: np.ndarray, target: int, n_src: int
) -> list[int]:
    known_idx = np.flatnonzero(known)
    known_idx = known_idx[known_idx != target]
    order = np.argsort(np.abs(known_idx - target), kind="stable")
    return [int(k) for k in known_idx[order][:n_src]]


def render_frame(
    model: TrackerFModel,
    dataset: SceneDataset,
    views: list[SourceView],
    target: int,
    cfg: TrainConfig,
) -> dict[str, np.ndarray]:
    """Full-image render of one frame (no gradient recording)."""
    assert active_tape() is None, "evaluation must not run under a tape"
    frame = dataset.frames[target]
    h, w = frame.mask.shape
    near, far = dataset.near_far(frame.camera)
    ys, xs = np.mgrid[0:h, 0:w]
    pix = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=-1).astype(np.float64)
    color = np.zeros((h * w, 3), dtype=np.float32)
    mask = np.zeros(h * w, dtype=np.float32)
    cse = np.zeros((h * w, dataset.d_cse), dtype=np.float32) if dataset.d_cse else None
    for lo in range(0, h * w, cfg.eval_chunk):
        hi = min(lo + cfg.eval_chunk, h * w)
        origins, dirs = rays_for_pixels(frame.camera, pix[lo:hi])
        out, _, _ = forward_rays(
            model,
            views,
            frame.timestamp,
            origins,
            dirs,
            near,
            far,
            cfg.n_samples,
            jitter=False,
            use_offsets=cfg.use_offsets,
        )
        color[lo:hi] = out.color.data
        mask[lo:hi] = out.mask.data
        if cse is not None and out.cse is not None:
            cse[lo:hi] = out.cse.data
    res = {"color": color.reshape(h, w, 3), "mask": mask.reshape(h, w)}
    if cse is not None:
        res["cse"] = cse.reshape(h, w, -1)
    return res


def evaluate(
    model: TrackerFModel,
    dataset: SceneDataset,
    known: np.ndarray,
    cfg: TrainConfig,
    n_src: int,
    frames: list[int] | None = None,
    keep_renders: bool = False,
) -> tuple[list[dict], dict[int, dict]]:
    """Render held-out frames from their nearest known sources and score them."""
    if frames is None:
        frames = [int(i) for i in np.flatnonzero(~known)]
        if cfg.eval_max_frames:
            frames = frames[: cfg.eval_max_frames]
    per_frame = []
    renders: dict[int, dict] = {}
    for k in frames:
        srcs = nearest_known_sources(dataset, known, k, n_src)
        views = [make_source_view(model.store, model.enc, dataset.frames[s]) for s in srcs]
        res = render_frame(model, dataset, views, k, cfg)
        gt = dataset.frames[k]
        gt_img = gt.image * gt.mask[..., None]
        m = metrics(res["color"], gt_img, res["mask"], gt.mask)
        m["frame"] = k
        per_frame.append(m)
        if keep_renders:
            renders[k] = res
    return per_frame, renders


def mean_metrics(per_frame: list[dict]) -> dict[str, float]:
    keys = ("psnr", "l1", "iou")
    return {k: float(np.mean([m[k] for m in per_frame])) for k in keys}


def make_report(
    task: str,
    scene_id: str,
    per_frame: list[dict],
    cfg: TrainConfig,
    steps: int,
    wall_seconds: float,
    n_src: int | None = None,
) -> dict:
    rep = {
        "task": task,
        "scene_id": scene_id,
        "per_frame": per_frame,
        "mean": mean_metrics(per_frame),
        "steps": steps,
        "wall_seconds": wall_seconds,
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
    }
    if n_src is not None:
        rep["n_src"] = n_src
    return rep


# -- protocols --------------------------------------------------------------------


def run_msssr(
    dataset: SceneDataset, cfg: TrainConfig, out_dir: str | Path, log=None,
    model: TrackerFModel | None = None,
) -> dict:
    """Fit one model to one scene's known frames, evaluate the unseen frames."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if model is None:
        model = TrackerFModel.create(cfg.enc, cfg.net, cfg.seed)
    known = frame_split(len(dataset))
    t0 = time.time()
    hist = train(model, [dataset], [known], cfg, log=log)
    n_src_eval = min(cfg.n_src_max, int(known.sum()) - 1)
    per_frame, _ = evaluate(model, dataset, known, cfg, n_src=n_src_eval)
    report = make_report(
        cfg.task, dataset.scene_id, per_frame, cfg, hist["steps"], time.time() - t0
    )
    model.save(out_dir / "checkpoint", step=hist["steps"])
    (out_dir / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    (out_dir / "losses.json").write_text(json.dumps(hist["losses"]) + "\n")
    return report


def run_fscr(
    train_datasets: list[SceneDataset],
    test_dataset: SceneDataset,
    cfg: TrainConfig,
    out_dir: str | Path,
    log=None,
) -> dict:
    """Train across scenes, then condition on the test scene's known frames
    without weight updates, sweeping the source-view count."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = TrackerFModel.create(cfg.enc, cfg.net, cfg.seed)
    splits = [frame_split(len(d)) for d in train_datasets]
    t0 = time.time()
    hist = train(model, train_datasets, splits, cfg, log=log)
    known = frame_split(len(test_dataset))
    rows = []
    for n_src in N_SRC_SWEEP:
        per_frame, _ = evaluate(model, test_dataset, known, cfg, n_src=n_src)
        rows.append(
            make_report(
                cfg.task, test_dataset.scene_id, per_frame, cfg,
                hist["steps"], time.time() - t0, n_src=n_src,
            )
        )
    report = {"task": cfg.task, "rows": rows, "config_hash": cfg.config_hash(), "seed": cfg.seed}
    model.save(out_dir / "checkpoint", step=hist["steps"])
    (out_dir / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return report


def run_ft(
    ckpt_dir: str | Path,
    dataset: SceneDataset,
    cfg: TrainConfig,
    out_dir: str | Path,
    log=None,
) -> dict:
    """Fine-tune a pretrained checkpoint on a new scene under the single-scene
    protocol."""
    model, _ = TrackerFModel.load(ckpt_dir)
    if model.enc.d_cse and dataset.d_cse and model.enc.d_cse != dataset.d_cse:
        raise ValueError(
            f"checkpoint embeds {model.enc.d_cse}-dim surface coordinates, "
            f"dataset has {dataset.d_cse}"
        )
    return run_msssr(dataset, cfg, out_dir, log=log, model=model)
