"""Cameras, rays, harmonic encoding, and differentiable sampling.

Cameras are stored decomposed (K, R, t) rather than as one 4x4 matrix so
pixel<->ray math has explicit intrinsics; compose_pose() gives back the
homogeneous world-to-camera matrix for round-trip checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .autodiff import tensor as T
from .autodiff.gradcheck import register_op_check
from .autodiff.tensor import Tensor

# Harmonic-encoding levels (desk-scale defaults).
GAMMA_SPACE = 10
GAMMA_TIME = 4
GAMMA_DIR = 4


class BehindCameraError(ValueError):
    pass


class OutOfBoundsError(ValueError):
    pass


@dataclass
class Camera:
    """Pinhole camera: intrinsics K, world-to-camera rotation R, translation t."""

    k: np.ndarray
    r: np.ndarray
    t: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=np.float64).reshape(3, 3)
        self.r = np.asarray(self.r, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        err = np.abs(self.r @ self.r.T - np.eye(3)).max()
        if err > 1e-6 or abs(np.linalg.det(self.r) - 1.0) > 1e-6:
            raise ValueError("camera rotation must be orthonormal with det +1")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.r.T @ self.t

    def compose_pose(self) -> np.ndarray:
        """Homogeneous 4x4 world-to-camera transform [R|t]."""
        m = np.eye(4)
        m[:3, :3] = self.r
        m[:3, 3] = self.t
        return m

    def to_dict(self) -> dict:
        return {"K": self.k.reshape(-1).tolist(), "R": self.r.reshape(-1).tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d: dict, height: int, width: int) -> "Camera":
        return cls(np.array(d["K"]), np.array(d["R"]), np.array(d["t"]), height, width)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel: np.ndarray

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=np.float64)
        norm = np.linalg.norm(self.direction)
        if abs(norm - 1.0) > 1e-9:
            self.direction = self.direction / norm


@dataclass
class RaySamples:
    """Equispaced (optionally jittered) points along a batch of rays."""

    points: np.ndarray  # (R, N_S, 3)
    depths: np.ndarray  # (R, N_S)
    delta: float

    def __post_init__(self):
        gaps = np.diff(self.depths, axis=-1)
        if np.any(gaps <= 0):
            raise ValueError("sample depths must be strictly increasing")


# -- projection ---------------------------------------------------------------

def _cam_constants(camera: Camera, dtype) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    rt = Tensor(camera.r.T.astype(dtype))
    t = Tensor(camera.t.astype(dtype))
    f = Tensor(np.array([camera.k[0, 0], camera.k[1, 1]], dtype=dtype))
    pp = Tensor(np.array([camera.k[0, 2], camera.k[1, 2]], dtype=dtype))
    return rt, t, f, pp


def project(camera: Camera, x: Tensor) -> tuple[Tensor, Tensor]:
    """Perspective-project points (N, 3) to pixels (N, 2); differentiable in x.

    Raises BehindCameraError if any point has non-positive camera depth.
    Use project_safe for the flagged variant.
    """
    u, depth, valid = project_safe(camera, x)
    if not np.all(valid):
        raise BehindCameraError("point(s) behind camera in project()")
    return u, depth


def project_safe(camera: Camera, x: Tensor, eps: float = 1e-6) -> tuple[Tensor, Tensor, np.ndarray]:
    """Like project(), but clamps non-positive depths and returns a validity
    mask instead of raising."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    n = x.shape[0]
    rt, t, f, pp = _cam_constants(camera, x.dtype)
    x_cam = T.add(T.matmul(x, rt), T.broadcast_to(t, (n, 3)))
    depth = T.reshape(x_cam[:, 2:3], (n,))
    valid = depth.data > eps
    # clamp depth away from zero so the division stays finite for flagged points
    depth_c = T.add(T.relu(T.sub(depth, eps)), eps)
    xy = x_cam[:, 0:2]
    zz = T.broadcast_to(T.reshape(depth_c, (n, 1)), (n, 2))
    u = T.add(T.mul(T.div(xy, zz), T.broadcast_to(f, (n, 2))), T.broadcast_to(pp, (n, 2)))
    return u, depth, valid


def ray_for_pixel(camera: Camera, pixel) -> Ray:
    """Ray from the camera center through a pixel (continuous pixel coords)."""
    pixel = np.asarray(pixel, dtype=np.float64)
    if not (0.0 <= pixel[0] <= camera.width and 0.0 <= pixel[1] <= camera.height):
        raise OutOfBoundsError(f"pixel {pixel} outside {camera.width}x{camera.height} image")
    origins, dirs = rays_for_pixels(camera, pixel[None, :])
    return Ray(origins[0], dirs[0], pixel)


def rays_for_pixels(camera: Camera, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched ray generation; returns (origins (N,3), unit directions (N,3))."""
    pixels = np.asarray(pixels, dtype=np.float64)
    ones = np.ones((pixels.shape[0], 1))
    homo = np.concatenate([pixels, ones], axis=1)
    d_cam = homo @ np.linalg.inv(camera.k).T
    d_world = d_cam @ camera.r
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.center, d_world.shape).copy()
    return origins, d_world


# -- harmonic encoding ---------------------------------------------------------

def harmonic_encode(a: Tensor, levels: int, include_input: bool = False) -> Tensor:
    """Per input scalar: (sin 2^k a, cos 2^k a) for k = 0..levels.

    Output width is 2*(levels+1) per scalar (plus 1 when include_input, an
    off-by-default toggle for the raw value).
    """
    if not isinstance(a, Tensor):
        a = Tensor(a)
    parts = [a] if include_input else []
    for k in range(levels + 1):
        scaled = T.mul(a, float(2**k))
        parts.append(T.sin(scaled))
        parts.append(T.cos(scaled))
    return T.concat(parts, axis=-1)


def harmonic_encode_np(a: np.ndarray, levels: int, include_input: bool = False) -> np.ndarray:
    a = np.asarray(a)
    parts = [a] if include_input else []
    for k in range(levels + 1):
        parts.append(np.sin(a * 2**k))
        parts.append(np.cos(a * 2**k))
    return np.concatenate(parts, axis=-1)


# -- bilinear sampling ----------------------------------------------------------

def bilinear_sample(fmap: Tensor, coords: Tensor) -> tuple[Tensor, np.ndarray]:
    """Sample an (H, W, D) feature map at normalized coords (N, 2) in [0,1]^2.

    Differentiable w.r.t. both the map values and the coordinates (the
    coordinate path is what carries gradients into predicted offsets).
    Out-of-range coords clamp to the border; the returned bool mask flags
    in-bounds samples.
    """
    if not isinstance(fmap, Tensor):
        fmap = Tensor(fmap)
    if not isinstance(coords, Tensor):
        coords = Tensor(coords)
    h, w, _ = fmap.shape
    sx = np.asarray(w - 1.0, dtype=fmap.dtype)
    sy = np.asarray(h - 1.0, dtype=fmap.dtype)
    px = np.ascontiguousarray(coords.data[:, 0].astype(fmap.dtype) * sx)
    py = np.ascontiguousarray(coords.data[:, 1].astype(fmap.dtype) * sy)
    out = kernels.bilinear_forward(fmap.data, px, py)
    valid = (
        (coords.data[:, 0] >= 0.0)
        & (coords.data[:, 0] <= 1.0)
        & (coords.data[:, 1] >= 0.0)
        & (coords.data[:, 1] <= 1.0)
    )

    def bw(g):
        gf, gpx, gpy = kernels.bilinear_backward(fmap.data, px, py, np.ascontiguousarray(g, dtype=fmap.dtype))
        gcoords = np.stack([gpx * sx, gpy * sy], axis=1)
        return gf, gcoords.astype(coords.dtype)

    return T.record_op(out, (fmap, coords), bw, "bilinear_sample"), valid


# -- ray sampling ----------------------------------------------------------------

def stratified_ray_points(
    origins: np.ndarray,
    directions: np.ndarray,
    near: float,
    far: float,
    n_samples: int,
    jitter: bool = False,
    rng: np.random.Generator | None = None,
) -> RaySamples:
    """N_S points per ray on equal bins of [near, far]; bin centers without
    jitter, uniform within each bin with jitter."""
    if not (0.0 < near < far):
        raise ValueError(f"invalid ray bounds near={near} far={far}")
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    n_rays = origins.shape[0]
    delta = (far - near) / n_samples
    base = near + np.arange(n_samples) * delta
    if jitter:
        if rng is None:
            rng = np.random.default_rng()
        offs = rng.uniform(0.0, 1.0, size=(n_rays, n_samples))
    else:
        offs = np.full((n_rays, n_samples), 0.5)
    depths = base[None, :] + offs * delta
    points = origins[:, None, :] + depths[:, :, None] * directions[:, None, :]
    return RaySamples(points=points, depths=depths, delta=delta)


# -- gradient-check registrations -------------------------------------------------

def _project_case(rng):
    cam = _random_camera(rng)

    def loss(x):
        u, depth = project(cam, x)
        return T.sum_(T.add(T.mul(u, u), T.broadcast_to(T.reshape(T.mul(depth, depth), (x.shape[0], 1)), u.shape)))

    x = rng.uniform(-0.5, 0.5, size=(4, 3)) + np.array([0.0, 0.0, 4.0])
    x_world = (x - cam.t) @ cam.r  # put points in front of the camera
    return loss, [x_world]


def _bilinear_case(rng):
    def loss(fmap, coords):
        out, _ = bilinear_sample(fmap, coords)
        return T.sum_(T.mul(out, out))

    fmap = rng.uniform(-1.0, 1.0, size=(5, 6, 3))
    # interior coords away from cell boundaries (bilinear is non-smooth there)
    coords = (np.floor(rng.uniform(0, 4, size=(7, 2))) + rng.uniform(0.2, 0.8, size=(7, 2))) / np.array([5.0, 4.0])
    return loss, [fmap, coords]


def _random_camera(rng) -> Camera:
    angle = rng.uniform(0, 2 * np.pi)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    kx, ky, kz = axis
    kmat = np.array([[0, -kz, ky], [kz, 0, -kx], [-ky, kx, 0]])
    r = np.eye(3) + np.sin(angle) * kmat + (1 - np.cos(angle)) * kmat @ kmat
    t = rng.uniform(-1, 1, size=3)
    k = np.array([[60.0, 0.0, 32.0], [0.0, 60.0, 32.0], [0.0, 0.0, 1.0]])
    return Camera(k, r, t, 64, 64)


register_op_check("project", _project_case)
register_op_check("bilinear_sample", _bilinear_case)
def _harmonic_case(rng):
    # random per-channel weights; an unweighted square would collapse to a
    # constant via sin^2 + cos^2 and check nothing
    wvec = Tensor(rng.uniform(0.5, 1.5, size=(4 * 2 * 4,)))

    def loss(a):
        enc = harmonic_encode(a, 3)
        return T.sum_(T.mul(T.mul(enc, enc), wvec))

    return loss, [rng.uniform(-2, 2, size=(4,))]


register_op_check("harmonic_encode", _harmonic_case)
