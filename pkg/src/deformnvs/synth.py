"""Procedural dynamic-scene oracle.

An analytically deforming textured blob supplies exact density, color,
canonical coordinates, scene flow, optical flow, masks and reference
renders. The deformation is a z-dependent twist composed with a rigid
motion, both with closed-form inverses, so ground-truth scene flow between
any two times is exact.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import kernels, tenio
from .geometry import Camera, rays_for_pixels


@dataclass
class SceneSpec:
    seed: int = 0
    scene_id: str = "blob-0"
    n_frames: int = 200
    height: int = 64
    width: int = 64
    orbit_radius: float = 4.0
    orbit_height: float = 0.5
    orbit_revs: float = 1.5
    radii: tuple = (1.0, 0.7, 0.5)
    rot_rate: float = 0.02  # rigid revolutions over the whole sequence
    trans_amp: float = 0.45
    bend_amp: float = 0.2  # twist amplitude in radians
    bend_freq: float = 2.0  # twist cycles over the sequence
    texture_seed: int = 1
    cse_seed: int = 2
    d_cse: int = 8
    sigma_max: float = 60.0
    shell_width: float = 0.04
    dense_samples: int = 256
    flow_offsets: tuple = (1, 5)

    @property
    def bounding_radius(self) -> float:
        return 1.3 * max(self.radii) + self.trans_amp

    @property
    def bounding_center(self) -> np.ndarray:
        return np.zeros(3)


def _rot_z(angle):
    """Batched 2D rotation applied to the xy-plane of (N, 3) points."""
    c, s = np.cos(angle), np.sin(angle)
    return c, s


class WarpField:
    """Forward map canonical -> world at time t, with closed-form inverse.

    Forward: twist about the z-axis by an angle depending only on z (which
    the twist leaves unchanged, keeping the inverse closed-form), then a
    rigid rotation about z plus a translation.
    """

    def __init__(self, spec: SceneSpec):
        self.spec = spec

    def _twist_angle(self, z: np.ndarray, t: float) -> np.ndarray:
        s = self.spec
        return s.bend_amp * np.sin(2 * np.pi * s.bend_freq * t) * np.tanh(z / s.radii[2])

    def _rigid(self, t: float) -> tuple[float, np.ndarray]:
        s = self.spec
        theta = 2 * np.pi * s.rot_rate * t
        # mostly vertical travel: near-perpendicular to the orbiting cameras'
        # view rays, so the motion stays observable in the images
        trans = s.trans_amp * np.array(
            [0.2 * np.sin(2 * np.pi * t), 0.0, np.sin(2 * np.pi * t)]
        )
        return theta, trans

    def forward(self, p: np.ndarray, t: float) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        phi = self._twist_angle(p[..., 2], t)
        c, s_ = _rot_z(phi)
        q = np.stack(
            [c * p[..., 0] - s_ * p[..., 1], s_ * p[..., 0] + c * p[..., 1], p[..., 2]], axis=-1
        )
        theta, trans = self._rigid(t)
        ct, st = np.cos(theta), np.sin(theta)
        out = np.stack(
            [ct * q[..., 0] - st * q[..., 1], st * q[..., 0] + ct * q[..., 1], q[..., 2]], axis=-1
        )
        return out + trans

    def inverse(self, x: np.ndarray, t: float) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        theta, trans = self._rigid(t)
        y = x - trans
        ct, st = np.cos(-theta), np.sin(-theta)
        q = np.stack(
            [ct * y[..., 0] - st * y[..., 1], st * y[..., 0] + ct * y[..., 1], y[..., 2]], axis=-1
        )
        phi = -self._twist_angle(q[..., 2], t)  # twist preserves z
        c, s_ = _rot_z(phi)
        return np.stack(
            [c * q[..., 0] - s_ * q[..., 1], s_ * q[..., 0] + c * q[..., 1], q[..., 2]], axis=-1
        )

    def jacobian_dets(self, t: float, n_grid: int = 8, h: float = 1e-4) -> np.ndarray:
        """Numeric forward-map Jacobian determinants on a canonical grid."""
        s = self.spec
        axes = [np.linspace(-1.2 * r, 1.2 * r, n_grid) for r in s.radii]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        jac = np.empty((grid.shape[0], 3, 3))
        for i in range(3):
            dp = np.zeros(3)
            dp[i] = h
            jac[:, :, i] = (self.forward(grid + dp, t) - self.forward(grid - dp, t)) / (2 * h)
        return np.linalg.det(jac)


class SynthScene:
    """Analytic scene: warp + canonical density/color/embedding functions."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        self.warp = WarpField(spec)
        trng = np.random.default_rng(spec.texture_seed)
        self._tex_axes = trng.normal(size=(3, 3))
        self._tex_axes /= np.linalg.norm(self._tex_axes, axis=1, keepdims=True)
        self._tex_freq = trng.uniform(2.0, 5.0, size=3)
        self._tex_phase = trng.uniform(0, 2 * np.pi, size=3)
        crng = np.random.default_rng(spec.cse_seed)
        a = crng.normal(size=(3, spec.d_cse))
        self._cse_map = a / np.linalg.norm(a, axis=0, keepdims=True)

    # -- canonical-frame functions -----------------------------------------
    def canonical_density(self, p: np.ndarray) -> np.ndarray:
        s = self.spec
        d = np.sqrt(np.sum((p / np.asarray(s.radii)) ** 2, axis=-1))
        return s.sigma_max / (1.0 + np.exp(-(1.0 - d) / s.shell_width))

    def canonical_color(self, p: np.ndarray) -> np.ndarray:
        proj = p @ self._tex_axes.T  # (..., 3)
        return 0.5 + 0.5 * np.sin(self._tex_freq * proj + self._tex_phase)

    def canonical_cse(self, p: np.ndarray) -> np.ndarray:
        return p @ self._cse_map

    # -- world-frame oracle --------------------------------------------------
    def gt_field(self, x: np.ndarray, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(sigma, color, canonical coordinate) at world points x, time t."""
        p = self.warp.inverse(x, t)
        return self.canonical_density(p), self.canonical_color(p), p

    def gt_scene_flow(self, x: np.ndarray, t_tgt: float, t_src: float) -> np.ndarray:
        """Displacement of the physical point at x from t_tgt to t_src."""
        return self.warp.forward(self.warp.inverse(x, t_tgt), t_src) - x

    # -- cameras and timestamps ----------------------------------------------
    def timestamps(self) -> np.ndarray:
        n = self.spec.n_frames
        return np.zeros(1) if n == 1 else np.arange(n) / (n - 1)

    def camera(self, k: int) -> Camera:
        s = self.spec
        frac = k / s.n_frames
        ang = 2 * np.pi * s.orbit_revs * frac
        pos = np.array([s.orbit_radius * np.cos(ang), s.orbit_radius * np.sin(ang), s.orbit_height])
        fwd = -pos / np.linalg.norm(pos)
        up = np.array([0.0, 0.0, 1.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        r = np.stack([right, down, fwd])
        if np.linalg.det(r) < 0:
            r = np.stack([right, -down, fwd])
        t = -r @ pos
        dist = np.linalg.norm(pos)
        focal = 0.5 * s.width * dist / (1.15 * self.spec.bounding_radius)
        kmat = np.array(
            [[focal, 0.0, s.width / 2.0], [0.0, focal, s.height / 2.0], [0.0, 0.0, 1.0]]
        )
        return Camera(kmat, r, t, s.height, s.width)

    def near_far(self, camera: Camera) -> tuple[float, float]:
        dist = np.linalg.norm(camera.center - self.spec.bounding_center)
        r = 1.1 * self.spec.bounding_radius
        return max(dist - r, 0.05), dist + r

    # -- reference rendering ----------------------------------------------------
    def pixel_grid(self) -> np.ndarray:
        s = self.spec
        xs = np.arange(s.width) + 0.5
        ys = np.arange(s.height) + 0.5
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)

    def render_reference(
        self, k: int, n_samples: int | None = None
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Densely EA-rendered (image, mask, cse image, expected depth) for frame k."""
        s = self.spec
        n_samples = n_samples or s.dense_samples
        cam = self.camera(k)
        t = float(self.timestamps()[k])
        near, far = self.near_far(cam)
        pixels = self.pixel_grid()
        origins, dirs = rays_for_pixels(cam, pixels)
        delta = (far - near) / n_samples
        depths = near + (np.arange(n_samples) + 0.5) * delta
        pts = origins[:, None, :] + depths[None, :, None] * dirs[:, None, :]
        sigma, color, canon = self.gt_field(pts.reshape(-1, 3), t)
        npix = pixels.shape[0]
        sigma = np.ascontiguousarray(sigma.reshape(npix, n_samples))
        w, _res = kernels.ea_forward(sigma, float(delta))
        image = (w[:, :, None] * color.reshape(npix, n_samples, 3)).sum(axis=1)
        mask = w.sum(axis=1)
        cse_vals = self.canonical_cse(canon).reshape(npix, n_samples, s.d_cse)
        cse = (w[:, :, None] * cse_vals).sum(axis=1)
        depth = (w * depths[None, :]).sum(axis=1) / np.maximum(mask, 1e-12)
        hw = (s.height, s.width)
        return (
            image.reshape(*hw, 3),
            mask.reshape(hw),
            cse.reshape(*hw, s.d_cse),
            depth.reshape(hw),
        )

    # -- ground-truth optical flow -------------------------------------------------
    def gt_optical_flow(
        self,
        k_tgt: int,
        k_src: int,
        depth_tgt: np.ndarray,
        mask_tgt: np.ndarray,
        depth_src: np.ndarray,
        mask_src: np.ndarray,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Pixel flow tgt->src plus occlusion labels, from expected depths.

        Foreground pixels are lifted by expected depth, advected with the
        exact scene flow and reprojected; a pixel is labeled occluded when
        the advected point is not the visible surface in the source view.
        """
        s = self.spec
        cam_t, cam_s = self.camera(k_tgt), self.camera(k_src)
        tt, ts = float(self.timestamps()[k_tgt]), float(self.timestamps()[k_src])
        pixels = self.pixel_grid()
        fg = mask_tgt.reshape(-1) > 0.5
        flow = np.zeros((s.height * s.width, 2))
        occl = np.zeros(s.height * s.width, dtype=bool)
        if fg.any():
            origins, dirs = rays_for_pixels(cam_t, pixels[fg])
            x = origins + depth_tgt.reshape(-1)[fg, None] * dirs
            x_src = x + self.gt_scene_flow(x, tt, ts)
            cam_pts = x_src @ cam_s.r.T + cam_s.t
            z = cam_pts[:, 2]
            uv = cam_pts[:, :2] / np.maximum(z[:, None], 1e-9) * np.array(
                [cam_s.k[0, 0], cam_s.k[1, 1]]
            ) + np.array([cam_s.k[0, 2], cam_s.k[1, 2]])
            flow[fg] = uv - pixels[fg]
            inside = (
                (z > 0)
                & (uv[:, 0] >= 0)
                & (uv[:, 0] <= s.width - 1)
                & (uv[:, 1] >= 0)
                & (uv[:, 1] <= s.height - 1)
            )
            # visibility test against the source view's expected depth
            src_depth_at = np.full(uv.shape[0], np.inf)
            src_mask_at = np.zeros(uv.shape[0])
            if inside.any():
                px = np.ascontiguousarray(uv[inside, 0])
                py = np.ascontiguousarray(uv[inside, 1])
                packed = np.ascontiguousarray(
                    np.stack([depth_src, mask_src], axis=-1).astype(np.float64)
                )
                sampled = kernels.bilinear_forward(packed, px, py)
                src_depth_at[inside] = sampled[:, 0]
                src_mask_at[inside] = sampled[:, 1]
            tol = 6.0 * s.shell_width + 0.05 * s.bounding_radius
            # along-ray distance in the source view, same unit as stored depths
            ray_dist = np.linalg.norm(x_src - cam_s.center[None, :], axis=-1)
            # a landing on a low-mask region is silhouette grazing, not occlusion;
            # occlusion requires being clearly behind a confidently rendered surface
            behind = (src_mask_at > 0.5) & (ray_dist >= src_depth_at + tol)
            visible = inside & (z > 0) & ~behind
            occl_fg = ~visible
            occl[fg] = occl_fg
        return flow.reshape(s.height, s.width, 2), occl.reshape(s.height, s.width)


# -- candidate masks --------------------------------------------------------------

def candidate_masks(
    mask: np.ndarray, count: int, noise: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, int]:
    """True mask plus jittered/translated/eroded decoys with confidences.

    Returns (masks (count, H, W), confidences (count,), true index).
    Decoys are displaced far enough that their IoU with the truth stays
    below ~0.7.
    """
    if count < 1:
        raise ValueError("need at least one candidate")
    h, w = mask.shape
    binary = mask > 0.5
    ys, xs = np.nonzero(binary)
    extent = max(
        (ys.max() - ys.min() + 1) if ys.size else 4, (xs.max() - xs.min() + 1) if xs.size else 4
    )
    cands = []
    for _ in range(count - 1):
        m = binary.copy()
        shift_mag = max(int(0.55 * extent), 3) + rng.integers(0, max(int(0.3 * extent), 2))
        ang = rng.uniform(0, 2 * np.pi)
        dy = int(round(shift_mag * np.sin(ang)))
        dx = int(round(shift_mag * np.cos(ang)))
        m = np.roll(np.roll(m, dy, axis=0), dx, axis=1)
        it = int(rng.integers(0, 3))
        if it and m.any():
            m = (
                ndimage.binary_erosion(m, iterations=it)
                if rng.random() < 0.5
                else ndimage.binary_dilation(m, iterations=it)
            )
        if noise > 0:
            flip = rng.random(m.shape) < noise * 0.02
            m = np.logical_xor(m, flip)
        if not m.any():
            m[h // 2, w // 2] = True
        cands.append(m.astype(np.float32))
    true_index = int(rng.integers(0, count))
    cands.insert(true_index, binary.astype(np.float32))
    confidences = 0.3 + 0.4 * rng.random(count)
    confidences[true_index] = 0.6 + 0.3 * rng.random()
    return np.stack(cands), confidences, true_index


# -- dataset writer -----------------------------------------------------------------

def write_dataset(
    spec: SceneSpec,
    out_dir: str | Path,
    candidates: int = 0,
    candidate_noise: float = 1.0,
) -> Path:
    """Render every frame and persist manifest + .ten arrays (+ PPM previews)."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "flows").mkdir(exist_ok=True)
    scene = SynthScene(spec)
    times = scene.timestamps()
    n = spec.n_frames
    frames_meta = []
    depths, masks = [], []
    for k in range(n):
        image, mask, cse, depth = scene.render_reference(k)
        cam = scene.camera(k)
        base = f"frames/{k:04d}"
        tenio.save_ten(out / f"{base}.image.ten", image.astype(np.float32))
        tenio.save_ten(out / f"{base}.mask.ten", mask.astype(np.float32))
        tenio.save_ten(out / f"{base}.cse.ten", cse.astype(np.float32))
        tenio.save_ten(out / f"{base}.depth.ten", depth.astype(np.float32))
        tenio.save_ppm(out / f"{base}.ppm", image)
        frames_meta.append(
            {
                "index": k,
                "timestamp": float(times[k]),
                "image": f"{base}.image.ten",
                "mask": f"{base}.mask.ten",
                "cse": f"{base}.cse.ten",
                "depth": f"{base}.depth.ten",
                "camera": cam.to_dict(),
            }
        )
        depths.append(depth)
        masks.append(mask)
    flow_meta = []
    for k in range(n):
        for off in spec.flow_offsets:
            j = k + off
            if j >= n:
                continue
            fwd, occl = scene.gt_optical_flow(k, j, depths[k], masks[k], depths[j], masks[j])
            bwd, _ = scene.gt_optical_flow(j, k, depths[j], masks[j], depths[k], masks[k])
            base = f"flows/{k:04d}_{j:04d}"
            tenio.save_ten(out / f"{base}.fwd.ten", fwd.astype(np.float32))
            tenio.save_ten(out / f"{base}.bwd.ten", bwd.astype(np.float32))
            tenio.save_ten(out / f"{base}.occl.ten", occl.astype(np.uint8))
            flow_meta.append(
                {
                    "tgt": k,
                    "src": j,
                    "fwd": f"{base}.fwd.ten",
                    "bwd": f"{base}.bwd.ten",
                    "occl": f"{base}.occl.ten",
                }
            )
    manifest = {
        "scene_id": spec.scene_id,
        "H": spec.height,
        "W": spec.width,
        "bounding_sphere": {
            "center": spec.bounding_center.tolist(),
            "radius": float(spec.bounding_radius),
        },
        "frames": frames_meta,
        "flow_pairs": flow_meta,
        "spec": asdict(spec),
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)
    if candidates > 0:
        write_candidates(out, candidates, candidate_noise, seed=spec.seed + 991)
    return out


def write_candidates(dataset_dir: str | Path, count: int, noise: float, seed: int = 0) -> Path:
    """Emit per-frame candidate mask stacks (true mask + decoys) for tracking."""
    root = Path(dataset_dir)
    with open(root / "manifest.json") as f:
        manifest = json.load(f)
    cdir = root / "candidates"
    cdir.mkdir(exist_ok=True)
    rng = np.random.default_rng(seed)
    confidences = {}
    truth = {}
    for fr in manifest["frames"]:
        mask = tenio.load_ten(root / fr["mask"])
        stack, conf, true_idx = candidate_masks(mask, count, noise, rng)
        tenio.save_ten(cdir / f"{fr['index']:04d}.masks.ten", stack.astype(np.float32))
        confidences[str(fr["index"])] = conf.tolist()
        truth[str(fr["index"])] = true_idx
    with open(cdir / "confidences.json", "w") as f:
        json.dump(confidences, f)
    with open(cdir / "truth.json", "w") as f:
        json.dump(truth, f)
    return cdir
