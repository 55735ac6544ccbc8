"""Differentiable image formation: ray marching through a density/color field.

One compositor serves both the learned tri-plane field and the analytic
ground-truth field, so oracle renders and model renders share every line of
integration code.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import engine as eng
from .cameras import Aabb, Camera, intersect_aabb_batch, rays_for_pixels
from .engine import Tensor, make_rng

# Field: (points [M,3], batch_idx [M]) -> (sigma Tensor [M], rgb Tensor [M,3])
Field = Callable[[np.ndarray, np.ndarray], tuple[Tensor, Tensor]]


@dataclass
class RenderConfig:
    n_coarse: int = 24
    n_fine: int = 24
    resolution: int = 32
    background: tuple = (1.0, 1.0, 1.0)
    jitter: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_coarse < 1 or self.n_fine < 0:
            raise ValueError("need n_coarse >= 1 and n_fine >= 0")
        if self.resolution < 2:
            raise ValueError("resolution must be at least 2")

    def to_dict(self) -> dict:
        return {
            "n_coarse": self.n_coarse,
            "n_fine": self.n_fine,
            "resolution": self.resolution,
            "background": list(self.background),
            "jitter": self.jitter,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "RenderConfig":
        d = dict(d)
        d["background"] = tuple(d.get("background", (1.0, 1.0, 1.0)))
        return RenderConfig(**d)


def stratified_samples(interval: tuple[float, float], n: int, jitter: bool, seed: int = 0) -> np.ndarray:
    """One t-value per equal-width stratum of the interval."""
    t0, t1 = float(interval[0]), float(interval[1])
    if not t0 < t1:
        raise ValueError("need t_near < t_far")
    rng = make_rng(seed)
    return _stratified_rows(np.array([t0]), np.array([t1]), n, jitter, rng)[0]


def _stratified_rows(t0: np.ndarray, t1: np.ndarray, n: int, jitter: bool, rng) -> np.ndarray:
    """[R] interval bounds -> [R, n] samples; midpoints unless jittered."""
    r = t0.shape[0]
    if jitter:
        offsets = rng.uniform(size=(r, n))
    else:
        offsets = np.full((r, n), 0.5)
    width = (t1 - t0)[:, None] / n
    return t0[:, None] + (np.arange(n)[None, :] + offsets) * width


def importance_resample(t_coarse: np.ndarray, weights: np.ndarray, n_fine: int, seed: int = 0) -> np.ndarray:
    """Inverse-CDF draws from the piecewise-constant distribution whose bins
    are centered on the coarse samples. All-zero weights fall back to
    midpoint-stratified samples over the same span. Returns the fine
    t-values, sorted; callers merge them with the coarse set."""
    rng = make_rng(seed)
    if np.any(weights < 0):
        raise ValueError("weights must be non-negative")
    out = _importance_rows(t_coarse[None, :], weights[None, :], n_fine, rng)[0]
    return np.sort(out)


def _bin_edges(t: np.ndarray) -> np.ndarray:
    """[R, n] sample positions -> [R, n+1] bin edges around them."""
    mids = 0.5 * (t[:, 1:] + t[:, :-1])
    lo = (2.0 * t[:, :1] - mids[:, :1])
    hi = (2.0 * t[:, -1:] - mids[:, -1:])
    return np.concatenate([lo, mids, hi], axis=1)


def _importance_rows(t: np.ndarray, weights: np.ndarray, n_fine: int, rng) -> np.ndarray:
    r, nc = weights.shape
    edges = _bin_edges(t)
    u = rng.uniform(size=(r, n_fine))

    total = weights.sum(axis=1)
    ok = total > 0
    safe_total = np.where(ok, total, 1.0)
    cdf = np.cumsum(weights, axis=1) / safe_total[:, None]  # [R, nc]
    cdf = np.concatenate([np.zeros((r, 1)), cdf], axis=1)
    cdf[:, -1] = 1.0

    # row-offset trick: one flat searchsorted over strictly increasing data
    offsets = np.arange(r)[:, None] * 2.0
    flat_cdf = (cdf + offsets).ravel()
    flat_u = (u * (1.0 - 1e-12) + offsets).ravel()
    idx = np.searchsorted(flat_cdf, flat_u, side="right").reshape(r, n_fine)
    idx = np.clip(idx - np.arange(r)[:, None] * (nc + 1) - 1, 0, nc - 1)

    cdf_lo = np.take_along_axis(cdf, idx, axis=1)
    cdf_hi = np.take_along_axis(cdf, idx + 1, axis=1)
    denom = np.maximum(cdf_hi - cdf_lo, 1e-300)
    frac = (u - cdf_lo) / denom
    e_lo = np.take_along_axis(edges, idx, axis=1)
    e_hi = np.take_along_axis(edges, idx + 1, axis=1)
    fine = e_lo + frac * (e_hi - e_lo)

    fallback = _stratified_rows(edges[:, 0], edges[:, -1], n_fine, jitter=False, rng=rng)
    return np.where(ok[:, None], fine, fallback)


def deltas_for(t: np.ndarray, t_far: np.ndarray) -> np.ndarray:
    """Forward differences with the final delta reaching the box exit."""
    d = np.diff(t, axis=1)
    last = (t_far[:, None] - t[:, -1:])
    return np.concatenate([d, last], axis=1)


def composite(sigma: Tensor, rgb: Tensor, deltas: np.ndarray, background) -> tuple[Tensor, Tensor, Tensor]:
    """Alpha-composite samples along rays.

    sigma [R,S], rgb [R,S,3], deltas [R,S]. Transmittance is computed from
    the exclusive cumulative optical depth, which keeps
    sum(weights) + T_end = 1 to within accumulated rounding only.
    Returns (pixel [R,3], weights [R,S], T_end [R]).
    """
    r, s = sigma.shape
    tau = sigma * Tensor(np.asarray(deltas, dtype=np.float64))
    t_incl = eng.exp(-eng.cumsum(tau, 1))  # prod_{j<=i} (1 - alpha_j)
    ones = Tensor(np.ones((r, 1)))
    t_excl = eng.concat([ones, t_incl[:, :-1]], axis=1)
    weights = t_excl - t_incl  # T_i * alpha_i
    t_end = t_incl[:, s - 1]
    w3 = eng.reshape(weights, (r, s, 1))
    pixel = eng.tsum(w3 * rgb, axis=1)
    bg = Tensor(np.asarray(background, dtype=np.float64))
    pixel = pixel + eng.reshape(t_end, (r, 1)) * bg
    return pixel, weights, t_end


def render_field(
    field: Field,
    cameras: Sequence[Camera],
    box: Aabb,
    config: RenderConfig,
) -> Tensor:
    """Render a batch of cameras against per-camera fields.

    batch_idx passed to the field selects which scene/latents a point
    belongs to. Rays that miss the box show the background. Returns
    [B, H, W, 3].
    """
    b = len(cameras)
    w_px, h_px = cameras[0].width, cameras[0].height
    for cam in cameras:
        if cam.width != w_px or cam.height != h_px:
            raise ValueError("batched render requires uniform camera resolutions")

    origins, dirs, bidx, flat_idx = [], [], [], []
    jj, ii = np.meshgrid(np.arange(w_px), np.arange(h_px))
    px = (jj + 0.5).ravel()
    py = (ii + 0.5).ravel()
    for i, cam in enumerate(cameras):
        o, d = rays_for_pixels(cam, px, py)
        origins.append(o)
        dirs.append(d)
        bidx.append(np.full(px.size, i, dtype=np.int64))
        flat_idx.append(np.arange(px.size, dtype=np.int64) + i * px.size)
    origins = np.concatenate(origins)
    dirs = np.concatenate(dirs)
    bidx = np.concatenate(bidx)
    flat_idx = np.concatenate(flat_idx)

    t0, t1, hit = intersect_aabb_batch(origins, dirs, box)

    bg = np.asarray(config.background, dtype=np.float64)
    canvas = Tensor(np.tile(bg, (b * h_px * w_px, 1)))
    if hit.any():
        o_h, d_h = origins[hit], dirs[hit]
        t0_h, t1_h, bidx_h = t0[hit], t1[hit], bidx[hit]
        rng = make_rng(config.seed, 0xC0A)
        pixel = _march(field, o_h, d_h, t0_h, t1_h, bidx_h, config, rng)
        canvas = eng.scatter_rows(canvas, flat_idx[hit], pixel)
    return eng.reshape(canvas, (b, h_px, w_px, 3))


def _march(field, o, d, t0, t1, bidx, config, rng) -> Tensor:
    """Coarse + importance-sampled pass over hit rays; returns [R, 3]."""
    r = o.shape[0]
    nc, nf = config.n_coarse, config.n_fine

    t_c = _stratified_rows(t0, t1, nc, config.jitter, rng)
    sig_c, rgb_c = _eval_field(field, o, d, t_c, bidx)
    if nf == 0:
        pix, _, _ = composite(sig_c, rgb_c, deltas_for(t_c, t1), config.background)
        return pix

    with eng.no_grad():
        _, w_c, _ = composite(sig_c, rgb_c, deltas_for(t_c, t1), config.background)
    t_f = _importance_rows(t_c, w_c.data, nf, rng)
    sig_f, rgb_f = _eval_field(field, o, d, t_f, bidx)

    t_all = np.concatenate([t_c, t_f], axis=1)
    perm = np.argsort(t_all, axis=1, kind="stable")
    rows = np.arange(r)[:, None]
    t_sorted = np.take_along_axis(t_all, perm, axis=1)

    sig_all = eng.concat([sig_c, sig_f], axis=1)
    rgb_all = eng.concat([rgb_c, rgb_f], axis=1)
    sig_sorted = sig_all[rows, perm]
    rgb_sorted = rgb_all[rows, perm]

    pix, _, _ = composite(sig_sorted, rgb_sorted, deltas_for(t_sorted, t1), config.background)
    return pix


def _eval_field(field, o, d, t, bidx):
    """Query the field at [R, S] ray parameters; returns [R,S] and [R,S,3]."""
    r, s = t.shape
    pts = o[:, None, :] + t[:, :, None] * d[:, None, :]
    sigma, rgb = field(pts.reshape(r * s, 3), np.repeat(bidx, s))
    return eng.reshape(sigma, (r, s)), eng.reshape(rgb, (r, s, 3))


def render(generator, w, camera: Camera, config: RenderConfig) -> Tensor:
    """One image from the appearance model: [H, W, 3], differentiable in w
    and the generator weights."""
    field, _ = generator.make_field(w if w.ndim == 2 else _row(w))
    img = render_field(field, [camera], generator.config.aabb, config)
    return eng.reshape(img, (camera.height, camera.width, 3))


def render_batch(generator, w_batch, cameras: Sequence[Camera], config: RenderConfig) -> Tensor:
    """Batched render: latent row i drives the image seen by camera i."""
    if w_batch.shape[0] != len(cameras):
        raise ValueError("one latent row per camera required")
    field, _ = generator.make_field(w_batch)
    return render_field(field, cameras, generator.config.aabb, config)


def _row(w):
    return eng.reshape(w, (1, w.shape[0])) if isinstance(w, Tensor) else np.atleast_2d(w)


def to_image(t) -> np.ndarray:
    """Tensor/array -> clamped float image in [0, 1]."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    return np.clip(arr, 0.0, 1.0)
