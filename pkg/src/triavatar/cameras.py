"""Pinhole cameras, rays, ray-box intersection, and similarity alignment.

Conventions (fixed here for the whole project): the world-to-camera map is
x_cam = R @ x_world + t, the camera looks along +z in its own frame, and
image y grows downward. Pixel (i, j) has its center at continuous image
coordinates (j + 0.5, i + 0.5).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .engine import make_rng


@dataclass
class Camera:
    R: np.ndarray  # 3x3 rotation, world -> camera
    t: np.ndarray  # 3-vector, meters
    K: np.ndarray  # 3x3 intrinsics, pixels
    width: int
    height: int

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.validate()

    def validate(self) -> None:
        if np.max(np.abs(self.R.T @ self.R - np.eye(3))) > 1e-9:
            raise ValueError("camera rotation is not orthonormal")
        if np.linalg.det(self.R) < 0:
            raise ValueError("camera rotation has negative determinant")
        fx, fy = self.K[0, 0], self.K[1, 1]
        cx, cy = self.K[0, 2], self.K[1, 2]
        if fx <= 0 or fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < cx < self.width and 0 < cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def with_center(self, c: np.ndarray) -> "Camera":
        return replace(self, t=-self.R @ np.asarray(c, dtype=np.float64))


@dataclass
class Aabb:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if not np.all(self.lo < self.hi):
            raise ValueError("AABB min must be componentwise below max")

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    def corners(self) -> np.ndarray:
        """The 8 box corners, [8, 3]."""
        lo, hi = self.lo, self.hi
        return np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])


@dataclass
class Similarity:
    """x -> s * R @ x + t with s > 0 and R in SO(3)."""

    s: float
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.s <= 0:
            raise ValueError("similarity scale must be positive")

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return self.s * pts @ self.R.T + self.t

    @staticmethod
    def identity() -> "Similarity":
        return Similarity(1.0, np.eye(3), np.zeros(3))


def ray_for_pixel(camera: Camera, px: float, py: float) -> tuple[np.ndarray, np.ndarray]:
    """World-space ray through continuous image point (px, py)."""
    o, d = rays_for_pixels(camera, np.array([px]), np.array([py]))
    return o[0], d[0]


def rays_for_pixels(camera: Camera, px: np.ndarray, py: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ray generation; returns origins [N,3] and unit directions [N,3]."""
    fx, fy = camera.K[0, 0], camera.K[1, 1]
    cx, cy = camera.K[0, 2], camera.K[1, 2]
    d_cam = np.stack(
        [(np.asarray(px, dtype=np.float64) - cx) / fx,
         (np.asarray(py, dtype=np.float64) - cy) / fy,
         np.ones_like(np.asarray(px, dtype=np.float64))],
        axis=-1,
    )
    d_world = d_cam @ camera.R  # row-vector form of R.T @ d
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origin = np.broadcast_to(camera.center, d_world.shape).copy()
    return origin, d_world


def intersect_aabb(origin: np.ndarray, direction: np.ndarray, box: Aabb) -> Optional[tuple[float, float]]:
    """Entry/exit distances of a unit-direction ray against the box, or None.

    The entry distance is clamped to 0 when the origin starts inside.
    """
    t0, t1, hit = intersect_aabb_batch(origin[None, :], direction[None, :], box)
    if not hit[0]:
        return None
    return float(t0[0]), float(t1[0])


def intersect_aabb_batch(origins: np.ndarray, directions: np.ndarray, box: Aabb):
    """Slab test over [N,3] rays -> (t_near [N], t_far [N], hit mask [N])."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        ta = (box.lo[None, :] - origins) * inv
        tb = (box.hi[None, :] - origins) * inv
    # parallel rays: +-inf from the division sorts correctly unless the
    # origin sits inside the slab, where 0 * inf yields NaN
    lo = np.fmin(ta, tb)
    hi = np.fmax(ta, tb)
    parallel = directions == 0.0
    inside = (origins >= box.lo[None, :]) & (origins <= box.hi[None, :])
    lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
    t_near = np.max(lo, axis=1)
    t_far = np.min(hi, axis=1)
    t_near_c = np.maximum(t_near, 0.0)
    hit = (t_far > t_near_c) & (t_far > 0) & (t_near <= t_far)
    return t_near_c, t_far, hit


def umeyama_align(src: np.ndarray, dst: np.ndarray) -> Similarity:
    """Least-squares similarity s*R*src + t ~= dst, closed form via SVD.

    Raises on degenerate (coincident or collinear) source sets, where the
    rotation is not determined.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("point sets must both be N x 3")
    n = src.shape[0]
    if n < 3:
        raise ValueError("need at least 3 correspondences")

    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d

    spread = np.linalg.svd(xs, compute_uv=False)
    if spread[0] < 1e-12 or spread[1] < 1e-9 * spread[0]:
        raise ValueError("degenerate source points (coincident or collinear)")

    cov = xd.T @ xs / n
    u, d, vt = np.linalg.svd(cov)
    sign = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    e = np.ones(3)
    e[2] = sign
    rot = u @ np.diag(e) @ vt
    var_s = (xs ** 2).sum() / n
    scale = float((d * e).sum() / var_s)
    trans = mu_d - scale * rot @ mu_s
    return Similarity(scale, rot, trans)


def apply_alignment(cameras: Sequence[Camera], sim: Similarity) -> list[Camera]:
    """Re-express cameras in the transformed world frame.

    For any world point p, the new camera projects sim(p) exactly where the
    old camera projected p; intrinsics are untouched.
    """
    out = []
    for cam in cameras:
        r_new = cam.R @ sim.R.T
        t_new = sim.s * cam.t - r_new @ sim.t
        out.append(Camera(R=r_new, t=t_new, K=cam.K.copy(), width=cam.width, height=cam.height))
    return out


def perturb_translation(cameras: Sequence[Camera], sigma_meters: float, seed: int) -> list[Camera]:
    """Add i.i.d. zero-mean Gaussian noise to every camera center."""
    if sigma_meters < 0:
        raise ValueError("sigma must be non-negative")
    rng = make_rng(seed)
    noise = rng.standard_normal((len(cameras), 3)) * sigma_meters
    return [cam.with_center(cam.center + noise[i]) for i, cam in enumerate(cameras)]


def look_at_rotation(eye: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World->camera rotation for a camera at eye looking at target.

    With world +y as up the image renders upright under the y-down pixel
    convention.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    z = target - eye
    z = z / np.linalg.norm(z)
    x = np.cross(z, up)
    nx = np.linalg.norm(x)
    if nx < 1e-12:
        # looking straight along up: pick any perpendicular
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
        nx = np.linalg.norm(x)
    x = x / nx
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=0)


def save_cameras(path, entries: Sequence[tuple[str, Camera]]) -> None:
    """cameras.json: [{image, R (9, row-major), t (3), K (9, row-major), width, height}]"""
    rows = []
    for image, cam in entries:
        rows.append(
            {
                "image": image,
                "R": [float(v) for v in cam.R.ravel()],
                "t": [float(v) for v in cam.t],
                "K": [float(v) for v in cam.K.ravel()],
                "width": int(cam.width),
                "height": int(cam.height),
            }
        )
    Path(path).write_text(json.dumps(rows, indent=1))


def load_cameras(path) -> list[tuple[str, Camera]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"cameras file not found: {path}")
    rows = json.loads(path.read_text())
    out = []
    for row in rows:
        try:
            cam = Camera(
                R=np.array(row["R"], dtype=np.float64).reshape(3, 3),
                t=np.array(row["t"], dtype=np.float64),
                K=np.array(row["K"], dtype=np.float64).reshape(3, 3),
                width=int(row["width"]),
                height=int(row["height"]),
            )
        except (KeyError, ValueError) as exc:
            raise ValueError(f"bad camera record in {path}: {exc}") from exc
        out.append((row.get("image", ""), cam))
    return out
