"""The optimization loop: camera tracing, per-iteration term orchestration,
Adam updates, checkpointing, and deterministic seeded RNG streams.

One iteration renders the human, head, object, and composite views, turns
each into a score-distillation gradient, adds the anchor-geometry losses and
regularizers under the annealed weights, and applies one Adam step to both
fields. All randomness flows from four named, seed-derived streams so runs
are bit-reproducible and checkpoints resume exactly.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .anchor import AnchorOccupancy
from .field import (RadianceField, field_occupancy_alpha, grid_occupancy_alpha,
                    voxel_center_positions)
from .guidance import build_condition
from .losses import (Schedule, geo_h_loss, geo_o_loss, opacity_loss,
                     orientation_loss, schedule_at, sds_term, total_loss)
from .render import draw_shading, render_composite, render_single, sample_camera

CKPT_MAGIC = b"IFCK"
CKPT_VERSION = 1

STREAM_NAMES = ("camera", "noise", "shading", "geometry")


@dataclass
class Prompts:
    human: str
    object: str
    interaction: str


@dataclass
class EngineParams:
    """Per-run knobs; defaults follow the full-scale recipe, tests shrink them."""

    resolution: tuple[int, int] = (64, 64)
    samples_per_ray: int = 48
    radius_scale_range: tuple[float, float] = (1.2, 2.0)   # x scene half-extent
    elevation_range: tuple[float, float] = (-10.0, 80.0)
    fov_y: float = 50.0
    head_fraction: float = 0.15
    head_radius_factor: float = 0.5
    geo_samples_in: int = 4096
    geo_samples_out: int = 4096
    lr: float = 0.01
    betas: tuple[float, float] = (0.9, 0.99)
    adam_eps: float = 1e-8
    guidance_scale: float = 20.0
    enable_head_sds: bool = True
    enable_interaction_sds: bool = True
    ref_step: float | None = None      # None: one voxel of the human field
    eta: float | None = None           # None: two voxels of the human field
    background: tuple[float, float, float] | None = None  # None: random per iter


class RngStreams:
    """Independent, seed-derived generators for each randomness consumer."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        children = np.random.SeedSequence(self.seed).spawn(len(STREAM_NAMES))
        for name, child in zip(STREAM_NAMES, children):
            setattr(self, name, np.random.default_rng(child))

    def state_snapshot(self) -> dict:
        return {n: getattr(self, n).bit_generator.state for n in STREAM_NAMES}

    def restore(self, snapshot: dict) -> None:
        for n in STREAM_NAMES:
            getattr(self, n).bit_generator.state = snapshot[n]


class Adam:
    """Plain Adam over the two fields' raw tensors; state serializes bit-exactly."""

    def __init__(self, params: list[torch.Tensor], lr: float, betas, eps: float):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [torch.zeros_like(p) for p in params]
        self.v = [torch.zeros_like(p) for p in params]

    @torch.no_grad()
    def step(self) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.b1**self.step_count
        bc2 = 1.0 - self.b2**self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m.mul_(self.b1).add_(g, alpha=1.0 - self.b1)
            v.mul_(self.b2).addcmul_(g, g, value=1.0 - self.b2)
            p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(self.eps), value=-self.lr)

    def zero_grad(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.grad = None


@dataclass
class SceneState:
    field_h: RadianceField
    field_o: RadianceField
    anchor: AnchorOccupancy
    prompts: Prompts
    rng: RngStreams
    optimizer: Adam
    iteration: int = 0

    @classmethod
    def fresh(cls, anchor: AnchorOccupancy, prompts: Prompts, resolution: int,
              seed: int, params: EngineParams | None = None) -> "SceneState":
        params = params or EngineParams()
        res = (resolution,) * 3
        fh = RadianceField.blob_init(res, anchor.box_min, anchor.box_max)
        fo = RadianceField.blob_init(res, anchor.box_min, anchor.box_max)
        opt = Adam(fh.parameters() + fo.parameters(), params.lr, params.betas,
                   params.adam_eps)
        return cls(field_h=fh, field_o=fo, anchor=anchor, prompts=prompts,
                   rng=RngStreams(seed), optimizer=opt)


def trace_focus(fld: RadianceField, ref_step: float | None = None) -> np.ndarray:
    """Mean position of voxels whose opacity exceeds 0.5; box center if none."""
    alpha = grid_occupancy_alpha(fld, ref_step).detach().numpy()
    centers = voxel_center_positions(fld).reshape(-1, 3)
    mask = alpha.reshape(-1) > 0.5
    if not mask.any():
        return 0.5 * (fld.box_min + fld.box_max)
    return centers[mask].mean(axis=0)


def trace_focus_union(field_h: RadianceField, field_o: RadianceField,
                      ref_step: float | None = None) -> np.ndarray:
    """Scene-level focus: mean over both fields' supra-threshold voxel centers."""
    pts = []
    for fld in (field_h, field_o):
        alpha = grid_occupancy_alpha(fld, ref_step).detach().numpy().reshape(-1)
        centers = voxel_center_positions(fld).reshape(-1, 3)
        pts.append(centers[alpha > 0.5])
    pts = np.concatenate(pts, axis=0)
    if len(pts) == 0:
        return 0.5 * (field_h.box_min + field_h.box_max)
    return pts.mean(axis=0)


def inside_anchor_fraction(fld: RadianceField, anchor: AnchorOccupancy,
                           ref_step: float | None = None) -> float:
    """Fraction of anchor-occupied voxel centers the field considers opaque."""
    centers = anchor.voxel_centers(np.argwhere(anchor.grid))
    step = fld.voxel_size if ref_step is None else ref_step
    alpha = field_occupancy_alpha(fld, centers, step).detach().numpy()
    return float(np.mean(alpha > 0.5))


def _half_extent(anchor: AnchorOccupancy) -> float:
    return float(0.5 * (anchor.box_max - anchor.box_min).max())


def step(state: SceneState, provider, params: EngineParams,
         schedule: Schedule) -> dict:
    """Advance one iteration; returns the metrics record for logging.

    Provider failures abort the iteration with the RNG streams restored, so a
    retry replays the identical iteration.
    """
    weights = schedule_at(schedule, state.iteration)
    eta = params.eta if params.eta is not None else 2.0 * state.field_h.voxel_size
    ref_step = params.ref_step
    snapshot = state.rng.state_snapshot()
    try:
        half = _half_extent(state.anchor)
        radius_range = (params.radius_scale_range[0] * half,
                        params.radius_scale_range[1] * half)
        rng_cam = state.rng.camera
        scene_cam = sample_camera(rng_cam, trace_focus_union(state.field_h, state.field_o,
                                                             ref_step),
                                  radius_range, params.elevation_range,
                                  params.fov_y, params.resolution)
        obj_cam = sample_camera(rng_cam, trace_focus(state.field_o, ref_step),
                                radius_range, params.elevation_range,
                                params.fov_y, params.resolution)
        head = state.anchor.head_region(params.head_fraction)
        head_cam = sample_camera(rng_cam, head.center,
                                 (params.head_radius_factor * radius_range[0],
                                  params.head_radius_factor * radius_range[1]),
                                 params.elevation_range, params.fov_y,
                                 params.resolution)

        rng_shade = state.rng.shading
        shading = draw_shading(rng_shade)
        light_az = rng_shade.uniform(0.0, 360.0)
        light_el = rng_shade.uniform(10.0, 80.0)
        lr_ = np.radians([light_el, light_az])
        light = 2.5 * half * np.array([np.sin(lr_[1]) * np.cos(lr_[0]),
                                       -np.cos(lr_[1]) * np.cos(lr_[0]),
                                       np.sin(lr_[0])])
        background = (rng_shade.uniform(0.0, 1.0, size=3)
                      if params.background is None
                      else np.asarray(params.background, dtype=np.float64))

        rng_noise = state.rng.noise
        draws = [(float(rng_noise.uniform(0.02, 0.98)), int(rng_noise.integers(2**63)))
                 for _ in range(4)]

        kw = dict(samples_per_ray=params.samples_per_ray, shading=shading,
                  light=light, background=background)
        x_h = render_single(state.field_h, scene_cam, jitter_rng=rng_cam, **kw)
        x_o = render_single(state.field_o, obj_cam, jitter_rng=rng_cam, **kw)
        renders = {"human": (x_h, scene_cam), "object": (x_o, obj_cam)}
        if params.enable_head_sds:
            x_head = render_single(state.field_h, head_cam, jitter_rng=rng_cam, **kw)
            renders["human_head"] = (x_head, head_cam)
        if params.enable_interaction_sds:
            x_i = render_composite(state.field_h, state.field_o, scene_cam,
                                   truncate_human_grad=True, jitter_rng=rng_cam, **kw)
            renders["interaction"] = (x_i, scene_cam)

        prompt_of = {"human": state.prompts.human, "human_head": state.prompts.human,
                     "object": state.prompts.object,
                     "interaction": state.prompts.interaction}
        sds = {}
        for i, role in enumerate(("human", "human_head", "object", "interaction")):
            if role not in renders:
                continue
            out, cam = renders[role]
            cond = build_condition(prompt_of[role], role, cam, params.guidance_scale)
            t, eps_seed = draws[i]
            sds[role] = sds_term(out, cond, provider, t, eps_seed)

        geo_seed = int(state.rng.geometry.integers(2**63))
        p_in, p_out = state.anchor.sample_points(params.geo_samples_in,
                                                 params.geo_samples_out, geo_seed)
        geo_h = geo_h_loss(state.field_h, state.anchor, eta, p_in, p_out, ref_step)
        geo_o = geo_o_loss(state.field_o, state.anchor, p_in, ref_step)

        reg = opacity_loss(x_h) + opacity_loss(x_o)
        orient_val = 0.0
        if shading != "albedo":
            orient = orientation_loss(x_h) + orientation_loss(x_o)
            orient_val = float(orient.detach())
            reg = reg + orient

        zero = torch.zeros(())
        sds_h = sds["human"].proxy + (sds["human_head"].proxy
                                      if "human_head" in sds else zero)
        sds_o = sds["object"].proxy + (sds["interaction"].proxy
                                       if "interaction" in sds else zero)
        loss = total_loss(sds_h, sds_o, geo_h, geo_o, reg, weights)
    except Exception:
        state.rng.restore(snapshot)
        raise

    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    state.iteration += 1
    return {
        "iter": state.iteration - 1,
        "lambda1": weights.lambda1,
        "lambda2": weights.lambda2,
        "geo_h": float(geo_h.detach()),
        "geo_o": float(geo_o.detach()),
        "orient": orient_val,
        "opacity": float((opacity_loss(x_h) + opacity_loss(x_o)).detach()),
        "shading": shading,
        "sds_residuals": {k: v.residual_msq for k, v in sds.items()},
    }


def run(state: SceneState, provider, params: EngineParams, schedule: Schedule,
        iterations: int, metrics_path=None, checkpoint_every: int = 0,
        checkpoint_dir=None, progress=None) -> None:
    """Drive `iterations` steps, streaming metrics and periodic checkpoints."""
    metrics_fh = open(metrics_path, "a") if metrics_path else None
    try:
        for _ in range(iterations):
            record = step(state, provider, params, schedule)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(record) + "\n")
            if progress is not None:
                progress(record)
            if (checkpoint_every and checkpoint_dir
                    and state.iteration % checkpoint_every == 0):
                save_checkpoint(state, f"{checkpoint_dir}/ckpt_{state.iteration:06d}.ifck")
    finally:
        if metrics_fh is not None:
            metrics_fh.close()


# --- checkpoint serialization ----------------------------------------------

def _write_blob(buf, raw: bytes) -> None:
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _read_blob(fh) -> bytes:
    (n,) = struct.unpack("<I", fh.read(4))
    raw = fh.read(n)
    if len(raw) != n:
        raise ValueError("truncated checkpoint")
    return raw


def _field_chunk(fld: RadianceField) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<3I", *fld.resolution))
    buf.write(struct.pack("<6d", *fld.box_min, *fld.box_max))
    buf.write(fld.raw_density.detach().numpy().astype("<f4").tobytes())
    buf.write(fld.raw_color.detach().numpy().astype("<f4").tobytes())
    return buf.getvalue()


def _field_from_chunk(raw: bytes) -> RadianceField:
    fh = io.BytesIO(raw)
    res = struct.unpack("<3I", fh.read(12))
    bounds = struct.unpack("<6d", fh.read(48))
    fld = RadianceField(res, bounds[:3], bounds[3:])
    n = res[0] * res[1] * res[2]
    dens = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(res)
    col = np.frombuffer(fh.read(12 * n), dtype="<f4").reshape(res + (3,))
    with torch.no_grad():
        fld.raw_density.copy_(torch.as_tensor(dens.copy()))
        fld.raw_color.copy_(torch.as_tensor(col.copy()))
    return fld


def save_checkpoint(state: SceneState, path) -> None:
    """Bit-exact snapshot: fields, optimizer moments, RNG streams, prompts."""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    buf.write(struct.pack("<Q", state.iteration))
    buf.write(struct.pack("<Q", state.rng.seed))
    for text in (state.prompts.human, state.prompts.object, state.prompts.interaction):
        _write_blob(buf, text.encode("utf-8"))
    _write_blob(buf, _field_chunk(state.field_h))
    _write_blob(buf, _field_chunk(state.field_o))
    opt = state.optimizer
    buf.write(struct.pack("<Q", opt.step_count))
    buf.write(struct.pack("<3d", opt.lr, opt.b1, opt.b2))
    buf.write(struct.pack("<d", opt.eps))
    for tensors in (opt.m, opt.v):
        for t in tensors:
            _write_blob(buf, t.numpy().astype("<f4").tobytes())
    snapshot = state.rng.state_snapshot()
    _write_blob(buf, json.dumps(snapshot, sort_keys=True).encode("utf-8"))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, anchor: AnchorOccupancy | None) -> SceneState:
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (iteration,) = struct.unpack("<Q", fh.read(8))
        (seed,) = struct.unpack("<Q", fh.read(8))
        prompts = Prompts(*[_read_blob(fh).decode("utf-8") for _ in range(3)])
        field_h = _field_from_chunk(_read_blob(fh))
        field_o = _field_from_chunk(_read_blob(fh))
        (step_count,) = struct.unpack("<Q", fh.read(8))
        lr, b1, b2 = struct.unpack("<3d", fh.read(24))
        (eps,) = struct.unpack("<d", fh.read(8))
        opt = Adam(field_h.parameters() + field_o.parameters(), lr, (b1, b2), eps)
        opt.step_count = step_count
        for tensors in (opt.m, opt.v):
            for i, ref in enumerate(tensors):
                arr = np.frombuffer(_read_blob(fh), dtype="<f4").reshape(ref.shape)
                tensors[i] = torch.as_tensor(arr.copy())
        rng_state = json.loads(_read_blob(fh).decode("utf-8"))
    rng = RngStreams(seed)
    rng.restore(rng_state)
    return SceneState(field_h=field_h, field_o=field_o, anchor=anchor,
                      prompts=prompts, rng=rng, optimizer=opt, iteration=iteration)
