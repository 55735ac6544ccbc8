"""Procedural expression-parameterized head scenes with analytic ground truth.

A SceneFamily is a miniature bust (the box spans 10 cm) whose density and
albedo are smooth closed-form functions of position and a 64-dim expression
code. Only the first four code dims act: mouth aperture, mouth width, and
left/right eye closure, each on [-1, 1]. The miniature scale is deliberate:
it makes millimeter-level camera noise span mild-to-severe degradation at
the 32x32 render resolution used throughout.

The ground-truth renderer runs the exact same compositor as the learned
path; only the field function is swapped.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .cameras import Aabb, Camera, look_at_rotation, save_cameras
from .engine import Tensor, make_rng
from .renderer import RenderConfig, render_field
from . import images

ACTIVE_DIMS = 4
PSI_DIM = 64


def _expit(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


@dataclass
class SceneFamily:
    """One synthetic identity; everything derives from the identity seed."""

    identity_seed: int = 0
    aabb_half: float = 0.05
    density: float = 150.0

    def __post_init__(self):
        rng = make_rng(self.identity_seed, 77)
        u = lambda lo, hi, n=None: rng.uniform(lo, hi, n)
        self.radii = np.array([0.038, 0.046, 0.042]) * (1.0 + u(-0.1, 0.1, 3))
        self.skin = np.clip(np.array([0.82, 0.60, 0.47]) + u(-0.06, 0.06, 3), 0.05, 0.95)
        self.stripe_freq = float(rng.integers(3, 8))
        self.stripe_phase = float(u(0, 2 * np.pi))
        self.stripe_amp = float(u(0.10, 0.16))
        self.hairline = float(u(0.25, 0.45))
        self.hair = np.clip(np.array([0.15, 0.10, 0.08]) + u(-0.04, 0.04, 3), 0.02, 0.9)
        self.lip = np.clip(np.array([0.55, 0.15, 0.15]) + u(-0.05, 0.05, 3), 0.02, 0.9)
        self.eye_color = np.array([0.08, 0.08, 0.10])
        rx, ry, rz = self.radii
        my = -0.45 * ry * (1.0 + u(-0.08, 0.08))
        self.mouth_center = np.array([0.0, my, rz * np.sqrt(max(0.05, 1 - (my / ry) ** 2)) * 0.92])
        ex = 0.45 * rx * (1.0 + u(-0.08, 0.08))
        ey = 0.30 * ry
        ez = rz * np.sqrt(max(0.05, 1 - (ex / rx) ** 2 - (ey / ry) ** 2)) * 0.95
        self.eye_centers = np.array([[-ex, ey, ez], [ex, ey, ez]])
        self.eye_r = 0.22 * rx
        self.mouth_w = np.array([0.33 * rx, 0.16 * ry, 0.45 * rz])

    @property
    def aabb(self) -> Aabb:
        h = self.aabb_half
        return Aabb((-h, -h, -h), (h, h, h))

    @property
    def config(self):
        # lets the shared renderer treat a family like a generator config
        return self

    def to_dict(self) -> dict:
        return {"identity_seed": self.identity_seed, "aabb_half": self.aabb_half, "density": self.density}

    @staticmethod
    def from_dict(d: dict) -> "SceneFamily":
        return SceneFamily(**d)


def clamp_psi(psi: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(psi, dtype=np.float64), -1.0, 1.0)


def scene_field(family: SceneFamily, psi, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Analytic density and albedo at world points.

    psi may be a single [64] code or per-point codes [M, 64]; values clamp
    to [-1, 1]. Everything is smooth in both psi and position.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    m = pts.shape[0]
    psi = clamp_psi(psi)
    if psi.ndim == 1:
        psi = np.broadcast_to(psi, (m, PSI_DIM))
    mouth_open = psi[:, 0]
    mouth_wide = psi[:, 1]
    closure = 0.5 * (1.0 + psi[:, 2:4])  # [M, 2] left/right eyelid closure

    rel = pts / family.radii
    q = (rel ** 2).sum(axis=1)
    sigma = family.density * _expit((1.0 - q) / 0.06)

    # mouth cavity: multiplicative carve, strictly deepening with psi[0]
    strength = 0.64 + 0.36 * mouth_open  # in [0.28, 1.0]
    wx = family.mouth_w[0] * (1.0 + 0.35 * mouth_wide)
    dm = pts - family.mouth_center
    d2 = (dm[:, 0] / wx) ** 2 + (dm[:, 1] / family.mouth_w[1]) ** 2 + (dm[:, 2] / family.mouth_w[2]) ** 2
    bump = np.exp(-d2)
    sigma = sigma * (1.0 - strength * bump)

    # eyelid blobs thicken as the eyes close
    for i in range(2):
        de = (pts - family.eye_centers[i]) / (0.9 * family.eye_r)
        lid = np.exp(-(de ** 2).sum(axis=1))
        sigma = sigma + 0.4 * family.density * closure[:, i] * lid * _expit((1.2 - q) / 0.06)

    # albedo: skin with an azimuthal pattern, hair cap/back, lips, eyes
    az = np.arctan2(rel[:, 0], rel[:, 2])
    pattern = 0.5 + 0.5 * np.sin(family.stripe_freq * az + family.stripe_phase)
    rgb = family.skin[None, :] * (1.0 - family.stripe_amp + 2.0 * family.stripe_amp * pattern)[:, None]

    hair_mask = _expit((rel[:, 1] - family.hairline) / 0.07) + _expit((-rel[:, 2] - 0.35) / 0.07)
    hair_mask = np.clip(hair_mask, 0.0, 1.0)
    rgb = rgb + (family.hair[None, :] - rgb) * hair_mask[:, None]

    lip_mask = 0.9 * np.exp(-d2 * 0.8)
    rgb = rgb + (family.lip[None, :] - rgb) * lip_mask[:, None]

    for i in range(2):
        de = (pts - family.eye_centers[i]) / family.eye_r
        eye_mask = np.exp(-(de ** 2).sum(axis=1)) * (1.0 - closure[:, i]) * 0.95
        rgb = rgb + (family.eye_color[None, :] - rgb) * eye_mask[:, None]

    return sigma, np.clip(rgb, 0.0, 1.0)


def analytic_field(family: SceneFamily, psi) -> Callable:
    """Field closure for the shared renderer; constants, no gradients."""
    psi = clamp_psi(psi)

    def fieldfn(points, batch_idx=None):
        if psi.ndim == 2 and batch_idx is not None:
            per_point = psi[np.asarray(batch_idx, dtype=np.int64)]
            sigma, rgb = scene_field(family, per_point, points)
        else:
            sigma, rgb = scene_field(family, psi, points)
        return Tensor(sigma), Tensor(rgb)

    return fieldfn


def render_ground_truth(family: SceneFamily, psi, camera: Camera, config: RenderConfig) -> np.ndarray:
    """Analytic render through the shared compositor; returns [H, W, 3]."""
    img = render_field(analytic_field(family, psi), [camera], family.aabb, config)
    return img.data.reshape(camera.height, camera.width, 3)


# -- camera rigs ---------------------------------------------------------

RIG_KINDS = ("frontal", "hemisphere", "full360")


def camera_rig(
    kind: str,
    n: int,
    radius: float = 0.42,
    seed: int = 0,
    resolution: int = 32,
    aabb_half: float = 0.05,
) -> list[Camera]:
    """Cameras on a sphere, all looking at the origin.

    frontal: azimuth in [-45, 45] deg; hemisphere: [-90, 90]; full360:
    an evenly spaced azimuth ring with elevation jitter. A frontal rig of
    n=1 is the canonical frontal camera (azimuth 0, elevation 0).
    """
    if kind not in RIG_KINDS:
        raise ValueError(f"unknown rig kind {kind!r}")
    if n < 1:
        raise ValueError("need at least one camera")
    half_diag = aabb_half * np.sqrt(3.0)
    if radius <= half_diag:
        raise ValueError("rig radius must clear the scene box")

    if kind == "full360":
        az = 360.0 * np.arange(n) / n
        rng = make_rng(seed, 31)
        elev = rng.uniform(-15.0, 25.0, n)
    else:
        span = 45.0 if kind == "frontal" else 90.0
        az = -span + 2 * span * (np.arange(n) + 0.5) / n
        elev = 10.0 * np.sin(2.39996 * np.arange(n))

    # frame the head (which fills most of the box per axis), not the box
    # diagonal; corner rays may leave the frustum harmlessly
    tan_half = 1.15 * aabb_half / (radius - half_diag)
    f = 0.5 * resolution / tan_half
    k = np.array([[f, 0, resolution / 2.0], [0, f, resolution / 2.0], [0, 0, 1.0]])

    cams = []
    for a_deg, e_deg in zip(az, elev):
        a, e = np.deg2rad(a_deg), np.deg2rad(e_deg)
        eye = radius * np.array([np.sin(a) * np.cos(e), np.sin(e), np.cos(a) * np.cos(e)])
        rot = look_at_rotation(eye, np.zeros(3))
        cams.append(Camera(R=rot, t=-rot @ eye, K=k, width=resolution, height=resolution))
    return cams


def canonical_frontal_camera(resolution: int = 32, radius: float = 0.42, aabb_half: float = 0.05) -> Camera:
    return camera_rig("frontal", 1, radius=radius, resolution=resolution, aabb_half=aabb_half)[0]


def uniform_psi_sampler(active: int = ACTIVE_DIMS) -> Callable:
    def sampler(rng) -> np.ndarray:
        psi = np.zeros(PSI_DIM)
        psi[:active] = rng.uniform(-1.0, 1.0, active)
        return psi

    return sampler


def constant_psi_sampler(psi: np.ndarray) -> Callable:
    fixed = clamp_psi(psi).copy()

    def sampler(rng) -> np.ndarray:
        return fixed.copy()

    return sampler


def emit_dataset(
    family: SceneFamily,
    n_frames: int,
    rig: Sequence[Camera],
    psi_sampler: Callable,
    out_dir,
    seed: int,
    render_config: Optional[RenderConfig] = None,
) -> Path:
    """Write frames/NNNNNN.png, cameras.json, truth.json and a manifest.

    truth.json carries the per-frame ground-truth codes; it exists for
    oracles and evaluation only and is never read by the trainers.
    """
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    cfg = render_config or RenderConfig(n_coarse=48, n_fine=48, jitter=False, seed=seed)
    rng = make_rng(seed, 55)

    entries = []
    truth = []
    for i in range(n_frames):
        cam = rig[i % len(rig)]
        psi = psi_sampler(rng)
        img = render_ground_truth(family, psi, cam, cfg)
        name = f"frames/{i:06d}.png"
        images.save_png(out / name, img)
        entries.append((name, cam))
        truth.append({"frame": i, "psi": [float(v) for v in psi]})
    save_cameras(out / "cameras.json", entries)
    (out / "truth.json").write_text(json.dumps(truth))
    manifest = {
        "n_frames": n_frames,
        "family": family.to_dict(),
        "render": cfg.to_dict(),
        "seed": seed,
    }
    (out / "dataset.json").write_text(json.dumps(manifest, indent=1))
    return out


def mouth_roi(family: SceneFamily, camera: Camera) -> np.ndarray:
    """Boolean [H, W] mask of pixels near the projected mouth center."""
    x = camera.R @ family.mouth_center + camera.t
    uvw = camera.K @ x
    cx, cy = uvw[0] / uvw[2], uvw[1] / uvw[2]
    r_px = camera.K[0, 0] * (1.45 * family.mouth_w[0]) / x[2]
    jj, ii = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
    return (jj + 0.5 - cx) ** 2 + (ii + 0.5 - cy) ** 2 <= r_px ** 2


class GroundTruthGenerator:
    """Analytic stand-in exposing the generator protocol.

    Latents are expression codes in disguise: w = tanh(z) on the active
    dims, zero elsewhere. Used by tests and the expression-estimation
    pipeline to run the stage-two machinery against exact ground truth.
    """

    def __init__(self, family: SceneFamily):
        self.family = family
        self.config = family  # .aabb, for the shared renderer

    @property
    def z_dim(self) -> int:
        return PSI_DIM

    @property
    def w_dim(self) -> int:
        return PSI_DIM

    def map_latent(self, z) -> Tensor:
        z = z.data if isinstance(z, Tensor) else np.atleast_2d(np.asarray(z, dtype=np.float64))
        z = np.atleast_2d(z)
        w = np.zeros((z.shape[0], PSI_DIM))
        w[:, :ACTIVE_DIMS] = np.tanh(z[:, :ACTIVE_DIMS])
        return Tensor(w)

    def psi_of_w(self, w) -> np.ndarray:
        w = w.data if isinstance(w, Tensor) else np.asarray(w)
        return clamp_psi(w.reshape(-1)[:PSI_DIM])

    def make_field(self, w):
        w_arr = w.data if isinstance(w, Tensor) else np.atleast_2d(np.asarray(w))
        w_arr = np.atleast_2d(w_arr)
        return analytic_field(self.family, w_arr), None
