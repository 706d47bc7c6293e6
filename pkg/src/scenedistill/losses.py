"""Loss terms and their annealing schedule.

Score-distillation terms contribute gradients only (their monitoring scalar
is the mean squared noise residual); the geometric terms tie field opacity
to the anchor occupancy through clamped binary cross-entropy; orientation
and opacity regularizers act on the per-sample render cache.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .anchor import AnchorOccupancy
from .field import RadianceField, field_occupancy_alpha
from .guidance import T_RANGE, TextCondition, add_noise
from .render import RenderOutput

CE_CLAMP = 1e-6
OPACITY_EPS = 0.01  # inside the sqrt of the opacity regularizer


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda1: float
    lambda2: float
    lambda3: float
    eta: float
    iteration: int


@dataclass(frozen=True)
class Schedule:
    """Piecewise loss-weight schedule over the optimization run.

    lambda1 climbs 0 -> 1 in steps of 0.1 every total/10 iterations; lambda2
    is 0.001 in the first and last tenth, 0.01 in the second and ninth, and
    0.1 in between; lambda3 stays constant.
    """

    total_iters: int = 10_000
    lambda3: float = 0.1
    eta: float = 0.1

    def __post_init__(self):
        if self.total_iters < 1:
            raise LossError("total_iters must be >= 1")
        if self.eta <= 0:
            raise LossError("eta must be > 0")


def schedule_at(schedule: Schedule, iteration: int) -> LossWeights:
    total = schedule.total_iters
    if not 0 <= iteration <= total:
        raise LossError(f"iteration {iteration} outside [0, {total}]")
    lam1 = min(10 * iteration // total, 10) / 10.0
    tenth = iteration * 10  # compare against k * total to stay in integers
    if tenth < total or tenth >= 9 * total:
        lam2 = 0.001
    elif tenth < 2 * total or tenth >= 8 * total:
        lam2 = 0.01
    else:
        lam2 = 0.1
    return LossWeights(lambda1=lam1, lambda2=lam2, lambda3=schedule.lambda3,
                       eta=schedule.eta, iteration=iteration)


def _bce(alpha: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    a = alpha.clamp(CE_CLAMP, 1.0 - CE_CLAMP)
    return -(target * torch.log(a) + (1.0 - target) * torch.log(1.0 - a))


def geo_h_loss(field_h: RadianceField, anchor: AnchorOccupancy, eta: float,
               p_in: np.ndarray, p_out: np.ndarray,
               ref_step: float | None = None) -> torch.Tensor:
    """Anchor-adherence loss for the human field.

    Inside points must be occupied; outside points are penalized for opacity
    with a weight that ramps from 0 at the anchor surface to 1 far away
    (1 - exp(-d / (2 eta^2))), leaving room for surface detail.
    """
    if eta <= 0:
        raise LossError("eta must be > 0")
    terms = []
    if len(p_in):
        a_in = field_occupancy_alpha(field_h, p_in, ref_step)
        f_in = torch.as_tensor(anchor.occupancy(p_in), dtype=a_in.dtype)
        terms.append(_bce(a_in, f_in).mean())
    if len(p_out):
        a_out = field_occupancy_alpha(field_h, p_out, ref_step)
        f_out = torch.as_tensor(anchor.occupancy(p_out), dtype=a_out.dtype)
        d = torch.as_tensor(anchor.surface_distance(p_out), dtype=a_out.dtype)
        decay = 1.0 - torch.exp(-d / (2.0 * eta * eta))
        terms.append((_bce(a_out, f_out) * decay).mean())
    if not terms:
        return torch.zeros((), dtype=field_h.dtype)
    return sum(terms)


def geo_o_loss(field_o: RadianceField, anchor: AnchorOccupancy, p_in: np.ndarray,
               ref_step: float | None = None) -> torch.Tensor:
    """Collision-avoidance loss: object opacity inside the anchor is penalized."""
    if not len(p_in):
        return torch.zeros((), dtype=field_o.dtype)
    a_in = field_occupancy_alpha(field_o, p_in, ref_step)
    f_in = torch.as_tensor(anchor.occupancy(p_in), dtype=a_in.dtype)
    return _bce(a_in, 1.0 - f_in).mean()


def orientation_loss(render: RenderOutput) -> torch.Tensor:
    """Penalize visible normals that face away from the camera.

    sum_i stopgrad(w_i) * max(n_i . v, 0)^2 per ray, averaged over rays; v is
    the ray direction, so forward-facing normals (n.v < 0) cost nothing.
    """
    if render.normals is None:
        raise LossError("orientation loss needs a render with normals "
                        "(lambertian or textureless shading)")
    ndv = (render.normals * render.ray_dirs.unsqueeze(1)).sum(-1)
    per_ray = (render.weights.detach() * ndv.clamp(min=0.0) ** 2).sum(-1)
    return per_ray.mean()


def opacity_loss(render: RenderOutput) -> torch.Tensor:
    """Mean over rays of sqrt((sum_i w_i)^2 + 0.01); pushes rays to commit
    to either foreground or background."""
    acc = render.weights.sum(-1)
    return torch.sqrt(acc**2 + OPACITY_EPS).mean()


@dataclass
class SdsTerm:
    """Backpropagatable stand-in for one score-distillation term.

    `proxy` is a scalar whose gradient w.r.t. the render parameters equals
    w(t) * (eps_hat - eps) * d(render)/d(params); `residual_msq` is the
    logged mean squared residual (no gradient).
    """

    proxy: torch.Tensor
    residual_msq: float
    t: float


def sds_term(render: RenderOutput, condition: TextCondition, provider, t: float,
             epsilon_seed: int, weight: float = 1.0) -> SdsTerm:
    """One SDS evaluation: noise the render, query the provider, build the proxy.

    The residual backpropagates per pixel and the proxy is normalized by the
    pixel count, so the term's weight against the point-averaged geometric
    losses does not scale with render resolution.
    """
    if not T_RANGE[0] < t < T_RANGE[1]:
        raise LossError(f"t={t} outside ({T_RANGE[0]}, {T_RANGE[1]})")
    rgb = render.rgb
    x = rgb.detach().cpu().numpy().astype(np.float64)
    eps = np.random.default_rng(epsilon_seed).standard_normal(x.shape)
    x_t = add_noise(x, t, eps, provider.schedule())
    eps_hat = provider.predict_noise(x_t, t, condition)
    if eps_hat.shape != x.shape:
        raise LossError(f"provider returned shape {eps_hat.shape}, expected {x.shape}")
    residual = weight * (eps_hat - eps)
    n_pixels = rgb.shape[0] * rgb.shape[1]
    proxy = (torch.as_tensor(residual, dtype=rgb.dtype) * rgb).sum() / n_pixels
    return SdsTerm(proxy=proxy, residual_msq=float(np.mean((eps_hat - eps) ** 2)), t=t)


def total_loss(sds_h: torch.Tensor, sds_o: torch.Tensor, geo_h: torch.Tensor,
               geo_o: torch.Tensor, reg: torch.Tensor,
               weights: LossWeights) -> torch.Tensor:
    """L = SDS_H + lambda1 * SDS_O + geo_H + lambda2 * geo_O + lambda3 * reg."""
    return (sds_h + weights.lambda1 * sds_o + geo_h + weights.lambda2 * geo_o
            + weights.lambda3 * reg)
