"""Differentiable volume rendering over one or two voxel radiance fields.

Rays are marched through the shared scene box with stratified samples;
per-sample opacities composite front to back (w_i = a_i * prod(1 - a_j)).
The dual-field path mixes colors by opacity share and can truncate
gradients into the human field. Also provides camera sampling and the
azimuth/elevation dependent prompt-view weighting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
import torch

from .field import RadianceField

OVERHEAD_ELEVATION_DEG = 60.0
SHADING_TYPES = ("albedo", "lambertian", "textureless")
SHADING_WEIGHTS = (0.75, 0.125, 0.125)
AMBIENT = 0.1


@dataclass
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    fov_y: float = 50.0
    resolution: tuple[int, int] = (64, 64)
    elevation: float = 0.0
    azimuth: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.look_at = np.asarray(self.look_at, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)
        if np.allclose(self.position, self.look_at):
            raise ValueError("camera position coincides with look_at")

    def rays(self):
        """Per-pixel origins and unit directions, row-major (H*W, 3)."""
        w, h = self.resolution
        fwd = self.look_at - self.position
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        right = right / np.linalg.norm(right)
        cam_up = np.cross(right, fwd)
        tan_half = math.tan(math.radians(self.fov_y) / 2.0)
        aspect = w / h
        xs = (np.arange(w) + 0.5) / w * 2.0 - 1.0
        ys = 1.0 - (np.arange(h) + 0.5) / h * 2.0
        px, py = np.meshgrid(xs, ys)  # (h, w)
        dirs = (fwd[None, None]
                + px[..., None] * tan_half * aspect * right[None, None]
                + py[..., None] * tan_half * cam_up[None, None])
        dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
        origins = np.broadcast_to(self.position, dirs.shape)
        return origins.reshape(-1, 3), dirs.reshape(-1, 3)


def camera_from_angles(focus, radius: float, elevation: float, azimuth: float,
                       fov_y: float = 50.0, resolution=(64, 64)) -> Camera:
    """Orbit camera, z-up: azimuth 0 in front of the subject, elevation from horizontal."""
    focus = np.asarray(focus, dtype=np.float64)
    el = math.radians(elevation)
    az = math.radians(azimuth)
    offset = radius * np.array([math.sin(az) * math.cos(el),
                                -math.cos(az) * math.cos(el),
                                math.sin(el)])
    return Camera(position=focus + offset, look_at=focus, up=np.array([0.0, 0.0, 1.0]),
                  fov_y=fov_y, resolution=tuple(resolution),
                  elevation=elevation, azimuth=azimuth % 360.0)


def sample_camera(rng: np.random.Generator, focus, radius_range, elevation_range,
                  fov_y: float = 50.0, resolution=(64, 64)) -> Camera:
    """Uniform azimuth in [0, 360), uniform elevation and radius in their ranges."""
    r0, r1 = radius_range
    e0, e1 = elevation_range
    if r1 < r0 or e1 < e0:
        raise ValueError("invalid camera ranges")
    azimuth = float(rng.uniform(0.0, 360.0))
    elevation = float(rng.uniform(e0, e1))
    radius = float(rng.uniform(r0, r1))
    return camera_from_angles(focus, radius, elevation, azimuth, fov_y, resolution)


@dataclass(frozen=True)
class ViewPromptWeights:
    front: float
    side: float
    back: float
    overhead: float

    def as_dict(self) -> dict[str, float]:
        return {"front": self.front, "side": self.side, "back": self.back,
                "overhead": self.overhead}

    def argmax_view(self) -> str:
        d = self.as_dict()
        return max(d, key=d.get)


def view_prompt_weights(camera: Camera) -> ViewPromptWeights:
    """Blend weights over {front, side, back, overhead} for prompt suffixing.

    Overhead saturates above 60 deg elevation; below that the weights blend
    piecewise-linearly between azimuth anchors front(0), side(90), back(180),
    side(270).
    """
    if camera.elevation > OVERHEAD_ELEVATION_DEG:
        return ViewPromptWeights(0.0, 0.0, 0.0, 1.0)
    az = camera.azimuth % 360.0
    seg, u = divmod(az, 90.0)
    u /= 90.0
    seg = int(seg)
    front = side = back = 0.0
    if seg == 0:      # front -> side
        front, side = 1.0 - u, u
    elif seg == 1:    # side -> back
        side, back = 1.0 - u, u
    elif seg == 2:    # back -> side
        back, side = 1.0 - u, u
    else:             # side -> front
        side, front = 1.0 - u, u
    return ViewPromptWeights(front, side, back, 0.0)


@dataclass
class RenderOutput:
    """Composited image plus the per-sample cache the regularizers consume."""

    rgb: torch.Tensor                 # (H, W, 3) in [0, 1]
    opacity: torch.Tensor             # (H, W) accumulated weights
    weights: torch.Tensor             # (N_rays, S)
    ray_dirs: torch.Tensor            # (N_rays, 3)
    normals: torch.Tensor | None = None  # (N_rays, S, 3) when shading computed them
    extras: dict = dc_field(default_factory=dict)


def _ray_box_spans(origins, dirs, box_min, box_max):
    """Entry/exit distances of each ray against the box (slab method)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    t0 = (box_min[None] - origins) * inv
    t1 = (box_max[None] - origins) * inv
    # parallel rays: +-inf propagates correctly through min/max
    t0 = np.where(np.isnan(t0), -np.inf, t0)
    t1 = np.where(np.isnan(t1), np.inf, t1)
    tn = np.max(np.minimum(t0, t1), axis=1)
    tf = np.min(np.maximum(t0, t1), axis=1)
    tn = np.maximum(tn, 0.0)
    return tn, tf


def _sample_positions(camera: Camera, box_min, box_max, samples_per_ray: int,
                      jitter_rng: np.random.Generator | None):
    """Stratified sample positions inside the scene box.

    Returns (positions (N,S,3), delta (N,), dirs (N,3)); rays that miss the
    box get delta 0 and placeholder positions that composite to nothing.
    """
    if samples_per_ray < 2:
        raise ValueError("samples_per_ray must be >= 2")
    origins, dirs = camera.rays()
    tn, tf = _ray_box_spans(origins, dirs, np.asarray(box_min), np.asarray(box_max))
    hit = tf > tn
    span = np.where(hit, tf - tn, 0.0)
    delta = span / samples_per_ray
    if jitter_rng is None:
        offs = np.full((origins.shape[0], samples_per_ray), 0.5)
    else:
        offs = jitter_rng.uniform(0.0, 1.0, size=(origins.shape[0], samples_per_ray))
    ts = tn[:, None] + (np.arange(samples_per_ray)[None, :] + offs) * delta[:, None]
    pos = origins[:, None, :] + ts[..., None] * dirs[:, None, :]
    center = 0.5 * (np.asarray(box_min) + np.asarray(box_max))
    pos = np.where(hit[:, None, None], pos, center)
    return pos, delta, dirs


def _shade(color, normals, light_dirs, shading: str):
    """Apply a shading model to per-sample colors.

    lambertian: color * (ambient + (1-ambient) * max(n.l, 0));
    textureless: same with a white albedo; albedo: color unchanged.
    """
    if shading == "albedo":
        return color
    if normals is None:
        raise ValueError(f"{shading} shading requires normals")
    ndl = (normals * light_dirs).sum(-1).clamp(min=0.0)
    lit = (AMBIENT + (1.0 - AMBIENT) * ndl).unsqueeze(-1)
    if shading == "textureless":
        return lit.expand_as(color)
    if shading == "lambertian":
        return color * lit
    raise ValueError(f"unknown shading {shading!r}")


NORMAL_EPS = 1e-4


def _safe_normals(spatial_grad: torch.Tensor) -> torch.Tensor:
    # outward normal of the density landscape; smooth damping to zero where the
    # spatial gradient vanishes keeps the normalization Jacobian bounded
    g = -spatial_grad
    norm_sq = (g * g).sum(dim=-1, keepdim=True)
    return g / torch.sqrt(norm_sq + NORMAL_EPS**2)


def _composite(alphas: torch.Tensor, colors: torch.Tensor, background, resolution,
               ray_dirs, normals, extras) -> RenderOutput:
    trans = torch.cumprod(1.0 - alphas, dim=-1)
    trans = torch.cat([torch.ones_like(trans[:, :1]), trans[:, :-1]], dim=-1)
    weights = alphas * trans
    acc = weights.sum(-1)
    bg = torch.as_tensor(np.asarray(background, dtype=np.float64), dtype=alphas.dtype)
    rgb_flat = (weights.unsqueeze(-1) * colors).sum(-2) + (1.0 - acc).unsqueeze(-1) * bg
    w, h = resolution
    return RenderOutput(rgb=rgb_flat.reshape(h, w, 3), opacity=acc.reshape(h, w),
                        weights=weights, ray_dirs=ray_dirs, normals=normals, extras=extras)


def _query_for_render(fld: RadianceField, pos, delta, shading: str, detach: bool):
    n_rays, s = pos.shape[:2]
    need_normals = shading != "albedo"
    sample = fld.query(pos.reshape(-1, 3), with_spatial_grad=need_normals)
    sigma = sample.sigma.reshape(n_rays, s)
    color = sample.color.reshape(n_rays, s, 3)
    normals = None
    if need_normals:
        normals = _safe_normals(sample.sigma_spatial_grad).reshape(n_rays, s, 3)
    if detach:
        sigma = sigma.detach()
        color = color.detach()
        normals = None if normals is None else normals.detach()
    delta_t = torch.as_tensor(delta, dtype=fld.dtype).unsqueeze(-1)
    alphas = 1.0 - torch.exp(-sigma * delta_t)
    return alphas, color, normals


def render_single(fld: RadianceField, camera: Camera, samples_per_ray: int = 48,
                  shading: str = "albedo", light=None, background=(0.0, 0.0, 0.0),
                  jitter_rng: np.random.Generator | None = None) -> RenderOutput:
    """Volume-render one field; pixel = sum(w_i c_i) + (1 - sum w_i) * background."""
    pos, delta, dirs = _sample_positions(camera, fld.box_min, fld.box_max,
                                         samples_per_ray, jitter_rng)
    light_dirs = _light_dirs(light, camera, pos, shading, fld.dtype)
    alphas, color, normals = _query_for_render(fld, pos, delta, shading, detach=False)
    shaded = _shade(color, normals, light_dirs, shading)
    dirs_t = torch.as_tensor(dirs, dtype=fld.dtype)
    return _composite(alphas, shaded, background, camera.resolution, dirs_t, normals,
                      extras={"delta": delta})


def render_composite(field_h: RadianceField, field_o: RadianceField, camera: Camera,
                     samples_per_ray: int = 48, shading: str = "albedo", light=None,
                     background=(0.0, 0.0, 0.0), truncate_human_grad: bool = False,
                     jitter_rng: np.random.Generator | None = None) -> RenderOutput:
    """Alpha-composited dual-field rendering.

    Per sample: a = a_h + a_o - a_h*a_o (multiplied transmittances) and the
    color mixes by opacity share. With `truncate_human_grad` the human field
    contributes forward values only.
    """
    if not (np.allclose(field_h.box_min, field_o.box_min)
            and np.allclose(field_h.box_max, field_o.box_max)):
        raise ValueError("fields must share scene bounds")
    pos, delta, dirs = _sample_positions(camera, field_h.box_min, field_h.box_max,
                                         samples_per_ray, jitter_rng)
    light_dirs = _light_dirs(light, camera, pos, shading, field_h.dtype)
    a_h, c_h, n_h = _query_for_render(field_h, pos, delta, shading,
                                      detach=truncate_human_grad)
    a_o, c_o, n_o = _query_for_render(field_o, pos, delta, shading, detach=False)
    s_h = _shade(c_h, n_h, light_dirs, shading)
    s_o = _shade(c_o, n_o, light_dirs, shading)

    alpha = a_h + a_o - a_h * a_o
    denom = a_h + a_o
    safe = denom.clamp_min(torch.finfo(denom.dtype).tiny)
    half = torch.full((), 0.5, dtype=denom.dtype)
    m_h = torch.where(denom > 0, a_h / safe, half)
    m_o = torch.where(denom > 0, a_o / safe, half)
    color = m_h.unsqueeze(-1) * s_h + m_o.unsqueeze(-1) * s_o

    dirs_t = torch.as_tensor(dirs, dtype=field_h.dtype)
    return _composite(alpha, color, background, camera.resolution, dirs_t, None,
                      extras={"delta": delta})


def _light_dirs(light, camera: Camera, pos: np.ndarray, shading: str,
                dtype) -> torch.Tensor | None:
    """Per-sample unit directions toward the point light (default: headlight)."""
    if shading == "albedo":
        return None
    src = camera.position if light is None else np.asarray(light, dtype=np.float64)
    v = src[None, None, :] - pos
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    v = np.where(n > 1e-12, v / np.maximum(n, 1e-12), 0.0)
    return torch.as_tensor(v, dtype=dtype)


def draw_shading(rng: np.random.Generator) -> str:
    """Per-iteration shading type, shared by both fields."""
    return SHADING_TYPES[int(rng.choice(len(SHADING_TYPES), p=SHADING_WEIGHTS))]


def turntable_cameras(focus, radius: float, n_frames: int, elevation: float = 15.0,
                      resolution=(64, 64), fov_y: float = 50.0) -> list[Camera]:
    return [camera_from_angles(focus, radius, elevation, 360.0 * i / n_frames,
                               fov_y, resolution) for i in range(n_frames)]
