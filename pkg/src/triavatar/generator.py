"""The generative appearance model: latent z -> mapping MLP -> w -> three
feature planes -> per-point density and color.

The synthesis path never sees camera parameters; a fixed w always produces
the same planes, which is what makes renders of one latent 3D-consistent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import engine as eng
from .cameras import Aabb
from .engine import Tensor, make_rng


@dataclass
class GeneratorConfig:
    z_dim: int = 64
    w_dim: int = 512
    plane_res: int = 32      # P: feature planes are P x P
    plane_ch: int = 16       # C: channels per plane
    dec_hidden: int = 32
    base_res: int = 8        # synthesis starts here and upsamples x2 to P
    density_bias: float = 30.0  # initial raw density; sets opacity at init
    aabb_lo: tuple = (-0.05, -0.05, -0.05)
    aabb_hi: tuple = (0.05, 0.05, 0.05)

    def __post_init__(self):
        stages = 0
        r = self.base_res
        while r < self.plane_res:
            r *= 2
            stages += 1
        if r != self.plane_res:
            raise ValueError("plane_res must be base_res * 2^k")
        self.n_stages = stages

    @property
    def aabb(self) -> Aabb:
        return Aabb(self.aabb_lo, self.aabb_hi)

    def to_dict(self) -> dict:
        return {
            "z_dim": self.z_dim,
            "w_dim": self.w_dim,
            "plane_res": self.plane_res,
            "plane_ch": self.plane_ch,
            "dec_hidden": self.dec_hidden,
            "base_res": self.base_res,
            "density_bias": self.density_bias,
            "aabb_lo": list(self.aabb_lo),
            "aabb_hi": list(self.aabb_hi),
        }

    @staticmethod
    def from_dict(d: dict) -> "GeneratorConfig":
        d = dict(d)
        d["aabb_lo"] = tuple(d.get("aabb_lo", (-0.05,) * 3))
        d["aabb_hi"] = tuple(d.get("aabb_hi", (0.05,) * 3))
        return GeneratorConfig(**d)


def _linear_init(rng, fan_in, fan_out, gain=1.0):
    return rng.standard_normal((fan_in, fan_out)) * (gain / np.sqrt(fan_in))


def _conv_init(rng, c_out, c_in, k=3, gain=1.0):
    return rng.standard_normal((c_out, c_in, k, k)) * (gain / np.sqrt(c_in * k * k))


class Generator:
    """Parameter container plus the forward ops of the appearance model."""

    def __init__(self, config: GeneratorConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    # -- construction ----------------------------------------------------
    @staticmethod
    def init(config: GeneratorConfig, seed: int) -> "Generator":
        rng = make_rng(seed, 11)
        c3 = 3 * config.plane_ch
        p: dict[str, np.ndarray] = {}
        p["map.w0"] = _linear_init(rng, config.z_dim, config.w_dim)
        p["map.b0"] = np.zeros(config.w_dim)
        p["map.w1"] = _linear_init(rng, config.w_dim, config.w_dim)
        p["map.b1"] = np.zeros(config.w_dim)
        p["map.w2"] = _linear_init(rng, config.w_dim, config.w_dim)
        p["map.b2"] = np.zeros(config.w_dim)
        p["synth.base.w"] = _linear_init(rng, config.w_dim, c3 * config.base_res ** 2)
        p["synth.base.b"] = np.zeros(c3 * config.base_res ** 2)
        for s in range(config.n_stages):
            p[f"synth.conv{s}.w"] = _conv_init(rng, c3, c3)
            p[f"synth.conv{s}.b"] = np.zeros(c3)
            p[f"synth.aff{s}.w"] = _linear_init(rng, config.w_dim, c3, gain=0.3)
            p[f"synth.aff{s}.b"] = np.zeros(c3)
        p["synth.out.w"] = _conv_init(rng, c3, c3)
        p["synth.out.b"] = np.zeros(c3)
        p["dec.w0"] = _linear_init(rng, config.plane_ch, config.dec_hidden)
        p["dec.b0"] = np.zeros(config.dec_hidden)
        p["dec.w1"] = _linear_init(rng, config.dec_hidden, 4)
        b1 = np.zeros(4)
        b1[0] = config.density_bias
        p["dec.b1"] = b1
        params = {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}
        return Generator(config, params)

    def freeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = False

    def unfreeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = True

    def param_hash(self) -> int:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return int.from_bytes(h.digest()[:8], "little")

    # -- forward ---------------------------------------------------------
    def map_latent(self, z) -> Tensor:
        """z [B, z_dim] -> w [B, w_dim]. Depends on z only, never on cameras."""
        z = z if isinstance(z, Tensor) else Tensor(np.atleast_2d(np.asarray(z, dtype=np.float64)))
        if z.ndim == 1:
            z = eng.reshape(z, (1, z.shape[0]))
        p = self.params
        h = eng.leaky_relu(eng.matmul(z, p["map.w0"]) + p["map.b0"])
        h = eng.leaky_relu(eng.matmul(h, p["map.w1"]) + p["map.b1"])
        return eng.matmul(h, p["map.w2"]) + p["map.b2"]

    def synthesize_planes(self, w) -> Tensor:
        """w [B, w_dim] -> planes [B, 3, C, P, P]."""
        w = w if isinstance(w, Tensor) else Tensor(np.atleast_2d(np.asarray(w, dtype=np.float64)))
        if w.ndim == 1:
            w = eng.reshape(w, (1, w.shape[0]))
        cfg = self.config
        p = self.params
        b = w.shape[0]
        c3 = 3 * cfg.plane_ch
        x = eng.matmul(w, p["synth.base.w"]) + p["synth.base.b"]
        x = eng.reshape(x, (b, c3, cfg.base_res, cfg.base_res))
        for s in range(cfg.n_stages):
            x = eng.upsample2x(x)
            x = eng.conv2d(x, p[f"synth.conv{s}.w"], p[f"synth.conv{s}.b"])
            style = eng.matmul(w, p[f"synth.aff{s}.w"]) + p[f"synth.aff{s}.b"]
            x = x + eng.reshape(style, (b, c3, 1, 1))
            x = eng.leaky_relu(x)
        x = eng.conv2d(x, p["synth.out.w"], p["synth.out.b"])
        return eng.reshape(x, (b, 3, cfg.plane_ch, cfg.plane_res, cfg.plane_res))

    def sample_planes(self, planes: Tensor, points, batch_idx: Optional[np.ndarray] = None) -> Tensor:
        """Tri-plane lookup: sum of three bilinear reads per point.

        points: [M, 3] world coordinates (Tensor or array); batch_idx: [M]
        selects the plane set per point. Points outside the AABB clamp to
        edge texels.
        """
        cfg = self.config
        box = cfg.aabb
        pts_is_tensor = isinstance(points, Tensor)
        pts = points if pts_is_tensor else Tensor(np.asarray(points, dtype=np.float64))
        scale = cfg.plane_res / box.extent  # texels per meter, per axis
        uvw = (pts - Tensor(box.lo)) * Tensor(scale) - 0.5  # texel coords per axis
        b = planes.shape[0]
        c = cfg.plane_ch
        planes_flat = eng.reshape(planes, (b * 3, c, cfg.plane_res, cfg.plane_res))
        m = pts.shape[0]
        bidx = np.zeros(m, dtype=np.int64) if batch_idx is None else np.asarray(batch_idx, dtype=np.int64)
        # plane k for batch b lives at row b*3+k of planes_flat
        feats = None
        for k, (a0, a1) in enumerate(((0, 1), (0, 2), (1, 2))):
            uv = uvw[:, (a0, a1)]
            f = eng.bilerp2d(planes_flat, uv, bidx * 3 + k)
            feats = f if feats is None else feats + f
        return feats

    def decode(self, feats: Tensor) -> tuple[Tensor, Tensor]:
        """Features [M, C] -> (density [M], rgb [M, 3])."""
        p = self.params
        h = eng.relu(eng.matmul(feats, p["dec.w0"]) + p["dec.b0"])
        raw = eng.matmul(h, p["dec.w1"]) + p["dec.b1"]
        sigma = eng.softplus(eng.reshape(raw[:, 0:1], (raw.shape[0],)))
        rgb = eng.sigmoid(raw[:, 1:4])
        return sigma, rgb

    def make_field(self, w):
        """Bind planes once; the returned field maps points to (sigma, rgb)."""
        planes = self.synthesize_planes(w)

        def field(points, batch_idx=None):
            feats = self.sample_planes(planes, points, batch_idx)
            return self.decode(feats)

        return field, planes

    # -- persistence -------------------------------------------------------
    def save(self, path) -> None:
        eng.save_checkpoint(path, self.params, {"generator": self.config.to_dict()})

    @staticmethod
    def load(path) -> "Generator":
        tensors, config = eng.load_checkpoint(path)
        gen_cfg = GeneratorConfig.from_dict(config["generator"])
        params = {k: Tensor(v, requires_grad=True, name=k) for k, v in tensors.items()}
        return Generator(gen_cfg, params)


# module-level aliases matching the operation names
def map_latent(generator: Generator, z) -> Tensor:
    return generator.map_latent(z)


def synthesize_planes(generator: Generator, w) -> Tensor:
    return generator.synthesize_planes(w)


def sample_triplane(generator: Generator, planes: Tensor, points, batch_idx=None) -> Tensor:
    return generator.sample_planes(planes, points, batch_idx)


def decode(generator: Generator, feats: Tensor) -> tuple[Tensor, Tensor]:
    return generator.decode(feats)
