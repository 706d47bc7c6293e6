"""Learnable voxel radiance fields: raw density + color grids, trilinear queries.

Raw parameters are unconstrained; density activates through softplus and
color through sigmoid, and queries interpolate the *activated* per-voxel
values so a uniform raw grid evaluates exactly to its activated constant
everywhere. Gradients flow to the eight surrounding voxels through torch
autograd.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

# softplus underflows to exactly 0.0 at this raw value in both f32 and f64,
# which makes "empty field" degeneracies bit-exact
RAW_EMPTY = -1.0e4


@dataclass
class FieldSample:
    """Activated field values at query points, graph-attached for backprop."""

    sigma: torch.Tensor      # (N,)
    color: torch.Tensor      # (N, 3)
    sigma_spatial_grad: torch.Tensor | None = None  # (N, 3) d(sigma)/d(position)


class RadianceField:
    """Dense voxel grid of raw density and raw color over an axis-aligned box."""

    def __init__(self, resolution, box_min, box_max, dtype=torch.float32,
                 requires_grad: bool = True):
        self.resolution = tuple(int(n) for n in resolution)
        if len(self.resolution) != 3 or min(self.resolution) < 1:
            raise ValueError(f"bad resolution {resolution}")
        self.box_min = np.asarray(box_min, dtype=np.float64)
        self.box_max = np.asarray(box_max, dtype=np.float64)
        if not np.all(self.box_max > self.box_min):
            raise ValueError("degenerate field bounds")
        self.dtype = dtype
        self.raw_density = torch.full(self.resolution, RAW_EMPTY, dtype=dtype,
                                      requires_grad=requires_grad)
        self.raw_color = torch.zeros(self.resolution + (3,), dtype=dtype,
                                     requires_grad=requires_grad)

    @property
    def cell(self) -> np.ndarray:
        return (self.box_max - self.box_min) / np.asarray(self.resolution)

    @property
    def voxel_size(self) -> float:
        return float(self.cell.mean())

    @property
    def parameter_count(self) -> int:
        nx, ny, nz = self.resolution
        return nx * ny * nz * 4

    def parameters(self) -> list[torch.Tensor]:
        return [self.raw_density, self.raw_color]

    def activated(self):
        """(sigma, color) voxel grids: softplus density, sigmoid color."""
        return F.softplus(self.raw_density), torch.sigmoid(self.raw_color)

    @classmethod
    def empty(cls, resolution, box_min, box_max, **kw) -> "RadianceField":
        return cls(resolution, box_min, box_max, **kw)

    @classmethod
    def blob_init(cls, resolution, box_min, box_max, sigma_inside: float = 0.1,
                  radius_scale: float = 0.4, center=None, **kw) -> "RadianceField":
        """Density blob: sigma ~= sigma_inside in a centered sphere, ~0 outside."""
        fld = cls(resolution, box_min, box_max, **kw)
        half = 0.5 * (fld.box_max - fld.box_min)
        center = 0.5 * (fld.box_min + fld.box_max) if center is None else np.asarray(center)
        radius = radius_scale * float(half.min())
        idx = np.stack(np.meshgrid(*[np.arange(n) for n in fld.resolution], indexing="ij"),
                       axis=-1)
        centers = fld.box_min + (idx + 0.5) * fld.cell
        inside = np.linalg.norm(centers - center, axis=-1) <= radius
        raw_in = float(np.log(np.expm1(sigma_inside)))  # softplus inverse
        raw = np.where(inside, raw_in, -10.0)
        with torch.no_grad():
            fld.raw_density.copy_(torch.as_tensor(raw, dtype=fld.dtype))
        return fld

    _CORNERS = torch.tensor([[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)])

    def _interp(self, grids: list[torch.Tensor], points: torch.Tensor):
        """Clamp-to-edge trilinear interpolation of per-voxel tensors.

        Returns per-grid interpolated values plus the corner values and the
        per-axis weight factors needed for the analytic spatial derivative.
        """
        bmin = torch.as_tensor(self.box_min, dtype=points.dtype)
        cell = torch.as_tensor(self.cell, dtype=points.dtype)
        u = (points - bmin) / cell - 0.5
        i0 = torch.floor(u)
        f = u - i0
        offs = self._CORNERS  # (8, 3)
        idx = (i0.long().unsqueeze(1) + offs).clamp(
            min=torch.zeros(3, dtype=torch.long),
            max=torch.tensor(self.resolution, dtype=torch.long) - 1)
        ny, nz = self.resolution[1], self.resolution[2]
        flat = (idx[..., 0] * ny + idx[..., 1]) * nz + idx[..., 2]  # (M, 8)
        # per-axis weight: off=0 -> 1-f, off=1 -> f
        axis_w = (1.0 - f.unsqueeze(1)) + offs * (2.0 * f.unsqueeze(1) - 1.0)  # (M,8,3)
        w = axis_w.prod(dim=-1)  # (M, 8)
        outs = []
        corner_vals = []
        for g in grids:
            vals = g.reshape(-1, *g.shape[3:])[flat]  # (M, 8) or (M, 8, C)
            corner_vals.append(vals)
            if vals.dim() > 2:
                outs.append((w.unsqueeze(-1) * vals).sum(dim=1))
            else:
                outs.append((w * vals).sum(dim=1))
        return outs, corner_vals, axis_w

    def query(self, points, with_spatial_grad: bool = False) -> FieldSample:
        """Activated (sigma, color) at arbitrary points.

        Out-of-box points return sigma 0 and mid-gray color with no gradient.
        `with_spatial_grad` additionally returns the analytic d(sigma)/dp,
        itself differentiable with respect to the voxel parameters.
        """
        points = torch.as_tensor(points, dtype=self.dtype).reshape(-1, 3)
        sig_grid, col_grid = self.activated()
        (sigma, color), corners, axis_w = self._interp([sig_grid, col_grid], points)

        bmin = torch.as_tensor(self.box_min, dtype=self.dtype)
        bmax = torch.as_tensor(self.box_max, dtype=self.dtype)
        inside = ((points >= bmin) & (points <= bmax)).all(dim=1)
        sigma = torch.where(inside, sigma, torch.zeros((), dtype=self.dtype))
        color = torch.where(inside.unsqueeze(-1), color,
                            torch.full((), 0.5, dtype=self.dtype))

        grad = None
        if with_spatial_grad:
            cell = torch.as_tensor(self.cell, dtype=self.dtype)
            sign = (2 * self._CORNERS - 1).to(self.dtype)       # (8, 3): -1 or +1
            sig_vals = corners[0]                               # (M, 8)
            comps = []
            for a in range(3):
                others = [ax for ax in range(3) if ax != a]
                dw = sign[:, a] * axis_w[..., others[0]] * axis_w[..., others[1]]
                comps.append((dw * sig_vals).sum(dim=1) / cell[a])
            grad = torch.stack(comps, dim=-1)
            grad = torch.where(inside.unsqueeze(-1), grad,
                               torch.zeros((), dtype=self.dtype))
        return FieldSample(sigma=sigma, color=color, sigma_spatial_grad=grad)


def alpha_from_sigma(sigma, step):
    """Opacity of a segment of length `step` under density `sigma`."""
    if isinstance(step, (int, float)) and step <= 0:
        raise ValueError("step must be > 0")
    sigma_t = sigma if torch.is_tensor(sigma) else torch.as_tensor(sigma, dtype=torch.float64)
    return 1.0 - torch.exp(-sigma_t * step)


def field_occupancy_alpha(field: RadianceField, points, ref_step: float | None = None):
    """Per-point opacity with a fixed reference step (default: one voxel)."""
    step = field.voxel_size if ref_step is None else float(ref_step)
    return alpha_from_sigma(field.query(points).sigma, step)


def grid_occupancy_alpha(field: RadianceField, ref_step: float | None = None) -> torch.Tensor:
    """Voxel-center opacities for the whole grid (no interpolation needed)."""
    step = field.voxel_size if ref_step is None else float(ref_step)
    sigma, _ = field.activated()
    return 1.0 - torch.exp(-sigma * step)


def voxel_center_positions(field: RadianceField) -> np.ndarray:
    idx = np.stack(np.meshgrid(*[np.arange(n) for n in field.resolution], indexing="ij"),
                   axis=-1)
    return field.box_min + (idx + 0.5) * field.cell
