"""Source-view feature extraction and time-conditioned token grids.

Each source frame is encoded by a small CNN (optionally with the frame's
canonical-embedding channels concatenated); a 3D ray point is tied to a
source view by bilinearly sampling the feature map at the point's
projection, and the token is extended with harmonic encodings of the
target and source timestamps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import tensor as T
from .autodiff.tensor import Tensor
from .dataset import Frame
from .geometry import (
    GAMMA_DIR,
    GAMMA_SPACE,
    GAMMA_TIME,
    bilinear_sample,
    harmonic_encode_np,
    project_safe,
)
from .nn import ParamStore, conv2d


@dataclass
class EncoderConfig:
    d_z: int = 32
    d_cse: int = 8
    use_cse: bool = True
    widths: tuple = (16, 32, 32)

    @property
    def d_token_feat(self) -> int:
        return self.d_z + (self.d_cse if self.use_cse else 0)

    @property
    def d_time(self) -> int:
        return 2 * (GAMMA_TIME + 1)


def init_encoder_params(store: ParamStore, cfg: EncoderConfig, prefix: str = "enc") -> None:
    chans = (3, *cfg.widths, cfg.d_z)
    for i in range(len(chans) - 1):
        cin, cout = chans[i], chans[i + 1]
        store.xavier(f"{prefix}/conv{i}/w", 9 * cin, cout, shape=(3, 3, cin, cout))
        store.zeros(f"{prefix}/conv{i}/b", (cout,))


@dataclass
class SourceView:
    """One conditioning frame plus its cached feature map."""

    frame: Frame
    fmap: Tensor  # (H', W', D_z [+ D_CSE])

    @property
    def timestamp(self) -> float:
        return self.frame.timestamp


def encode_image(store: ParamStore, cfg: EncoderConfig, frame: Frame, prefix: str = "enc") -> Tensor:
    """CNN feature map at half resolution; CSE channels appended when enabled."""
    x = Tensor(frame.image[None].astype(np.float32))
    n_layers = len(cfg.widths) + 1
    h = x
    for i in range(n_layers):
        stride = 2 if i == 0 else 1
        h = conv2d(h, store[f"{prefix}/conv{i}/w"], store[f"{prefix}/conv{i}/b"], stride=stride)
        if i < n_layers - 1:
            h = T.relu(h)
    fmap = T.reshape(h, h.shape[1:])
    if cfg.use_cse:
        if frame.cse is None:
            raise ValueError("use_cse is set but the frame has no CSE channels")
        cse_small = _avg_pool2(frame.cse.astype(np.float32))
        fmap = T.concat([fmap, Tensor(cse_small)], axis=-1)
    return fmap


def _avg_pool2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    return img[: h - h % 2, : w - w % 2].reshape(h // 2, 2, w // 2, 2, -1).mean(axis=(1, 3))


def make_source_view(store: ParamStore, cfg: EncoderConfig, frame: Frame) -> SourceView:
    return SourceView(frame=frame, fmap=encode_image(store, cfg, frame))


def wce(x: Tensor, view: SourceView) -> tuple[Tensor, np.ndarray]:
    """Sample the view's feature map at the projection of points x (N, 3).

    Invalid projections (behind camera or outside the image) yield a zero
    token and a cleared validity flag.
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    cam = view.frame.camera
    u, _depth, in_front = project_safe(cam, x)
    scale = Tensor(np.array([1.0 / cam.width, 1.0 / cam.height], dtype=u.dtype))
    coords = T.mul(u, T.broadcast_to(scale, u.shape))
    feats, in_bounds = bilinear_sample(view.fmap, coords)
    valid = in_front & in_bounds
    gate = Tensor(valid.astype(feats.dtype)[:, None])
    tokens = T.mul(feats, T.broadcast_to(gate, feats.shape))
    return tokens, valid


def twce(x: Tensor, view: SourceView, t_tgt: float) -> tuple[Tensor, np.ndarray]:
    """[wce(x, view), gamma(t_tgt), gamma(t_src)] per point."""
    tokens, valid = wce(x, view)
    n = tokens.shape[0]
    enc_tgt = harmonic_encode_np(np.array([t_tgt]), GAMMA_TIME)
    enc_src = harmonic_encode_np(np.array([view.timestamp]), GAMMA_TIME)
    times = np.tile(np.concatenate([enc_tgt, enc_src]).astype(tokens.dtype.type), (n, 1))
    return T.concat([tokens, Tensor(times)], axis=1), valid


def positional_block(points: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """Constant per-point spatial identity: gamma(x) and gamma(ray dir)."""
    r, ns, _ = points.shape
    enc_x = harmonic_encode_np(points.reshape(-1, 3), GAMMA_SPACE)
    enc_d = harmonic_encode_np(directions, GAMMA_DIR)
    enc_d = np.repeat(enc_d[:, None, :], ns, axis=1).reshape(r * ns, -1)
    return np.concatenate([enc_x, enc_d], axis=1).astype(np.float32)


def token_grid(
    points,
    views: list[SourceView],
    t_tgt: float,
    directions: np.ndarray | None = None,
    positional: bool = True,
    positional_points: np.ndarray | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Assemble the (R, N_S, N_src, D) token grid for a batch of rays.

    `points` may be a constant array or a tensor of offset-adjusted points
    (R, N_S, N_src, 3); in the latter case gradients flow into the offsets
    through projection and sampling. The optional positional block encodes
    the *unadjusted* sample identity and is shared across views.
    """
    if not views:
        raise ValueError("token_grid needs at least one source view")
    per_view = isinstance(points, Tensor) and points.ndim == 4
    if per_view:
        r, ns, nv, _ = points.shape
        if nv != len(views):
            raise ValueError("per-view points must match the number of views")
    else:
        pts_np = points.data if isinstance(points, Tensor) else np.asarray(points)
        r, ns, _ = pts_np.shape
    tok_list, valid_list = [], []
    for i, view in enumerate(views):
        if per_view:
            flat = T.reshape(points[:, :, i, :], (r * ns, 3))
        else:
            flat = Tensor(pts_np.reshape(r * ns, 3).astype(np.float32))
        tok, valid = twce(flat, view, t_tgt)
        tok_list.append(T.reshape(tok, (r, ns, 1, tok.shape[-1])))
        valid_list.append(valid.reshape(r, ns, 1))
    tokens = T.concat(tok_list, axis=2)
    valid = np.concatenate(valid_list, axis=2)
    if positional:
        if positional_points is None:
            if per_view:
                raise ValueError("per-view points need explicit positional_points")
            positional_points = pts_np
        if directions is None:
            raise ValueError("positional tokens need ray directions")
        pos = positional_block(np.asarray(positional_points), directions)
        pos_grid = np.broadcast_to(
            pos.reshape(r, ns, 1, -1), (r, ns, len(views), pos.shape[-1])
        ).astype(np.float32)
        tokens = T.concat([tokens, Tensor(np.ascontiguousarray(pos_grid))], axis=3)
    return tokens, valid


def pool_mean_std(tokens: Tensor, axis: int = -2) -> Tensor:
    """Concatenate mean and population std over the source-view axis."""
    m = T.mean(tokens, axis=axis)
    s = T.std(tokens, axis=axis)
    return T.concat([m, s], axis=-1)


def token_dim(cfg: EncoderConfig, positional: bool = True) -> int:
    d = cfg.d_token_feat + 2 * cfg.d_time
    if positional:
        d += 3 * 2 * (GAMMA_SPACE + 1) + 3 * 2 * (GAMMA_DIR + 1)
    return d
