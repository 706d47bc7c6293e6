"""Voxelized body-occupancy oracle for the anchor pose.

A boolean lattice over an axis-aligned box answers inside/outside queries
(trilinear, so values soften across one voxel at the boundary), unsigned
distance to the occupancy surface, head-region localization, and draws the
inside/outside point sets consumed by the geometric losses.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

MAGIC = b"IFAN"
VERSION = 1

DEFAULT_HEAD_FRACTION = 0.15


class AnchorError(ValueError):
    pass


def _trilinear(values: np.ndarray, box_min, cell, points: np.ndarray) -> np.ndarray:
    """Clamp-to-edge trilinear interpolation of a cell-centered grid."""
    u = (points - box_min) / cell - 0.5
    i0 = np.floor(u).astype(np.int64)
    f = u - i0
    out = np.zeros(points.shape[0], dtype=np.float64)
    shape = np.asarray(values.shape)
    for corner in range(8):
        offs = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        idx = np.clip(i0 + offs, 0, shape - 1)
        w = np.prod(np.where(offs == 1, f, 1.0 - f), axis=1)
        out += w * values[idx[:, 0], idx[:, 1], idx[:, 2]]
    return out


@dataclass(frozen=True)
class HeadRegion:
    """Axis-aligned box around the top slab of the occupied volume."""

    box_min: np.ndarray
    box_max: np.ndarray

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.box_min + self.box_max)


class AnchorOccupancy:
    """Boolean occupancy lattice plus an unsigned distance field to its surface.

    The distance field holds, per voxel, the exact Euclidean distance (in
    scene units) to the nearest boundary voxel center, where boundary voxels
    are occupied voxels with an unoccupied 6-neighbor or on the grid border.
    Immutable after construction; concurrent reads are safe.
    """

    def __init__(self, grid: np.ndarray, box_min, box_max):
        grid = np.ascontiguousarray(grid, dtype=bool)
        if grid.ndim != 3:
            raise AnchorError("occupancy grid must be 3-D")
        if not grid.any():
            raise AnchorError("anchor has no occupied voxels")
        self.grid = grid
        self.box_min = np.asarray(box_min, dtype=np.float64)
        self.box_max = np.asarray(box_max, dtype=np.float64)
        if not np.all(self.box_max > self.box_min):
            raise AnchorError("degenerate bounding box")
        self.resolution = grid.shape
        self.cell = (self.box_max - self.box_min) / np.asarray(grid.shape)
        self.distance_field = self._build_distance_field()
        self._occupied_idx = np.argwhere(self.grid)

    @property
    def voxel_size(self) -> float:
        return float(self.cell.mean())

    def _boundary_mask(self) -> np.ndarray:
        interior = ndimage.binary_erosion(self.grid, structure=_SIX_CONN, border_value=0)
        return self.grid & ~interior

    def _build_distance_field(self) -> np.ndarray:
        boundary = self._boundary_mask()
        # EDT measures distance to the nearest zero, so zero out the boundary set
        return ndimage.distance_transform_edt(~boundary, sampling=self.cell)

    def voxel_centers(self, idx: np.ndarray) -> np.ndarray:
        return self.box_min + (idx + 0.5) * self.cell

    def _inside_box(self, points: np.ndarray) -> np.ndarray:
        return np.all((points >= self.box_min) & (points <= self.box_max), axis=1)

    def occupancy(self, points) -> np.ndarray:
        """Trilinear occupancy in [0, 1]; exactly 0 outside the box."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        vals = _trilinear(self.grid.astype(np.float64), self.box_min, self.cell, points)
        return np.where(self._inside_box(points), vals, 0.0)

    def surface_distance(self, points) -> np.ndarray:
        """Unsigned distance (scene units) to the occupancy boundary.

        Inside the box this is the interpolated distance field; outside it is
        the distance to the box plus the field value at the box projection.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        clamped = np.clip(points, self.box_min, self.box_max)
        vals = _trilinear(self.distance_field, self.box_min, self.cell, clamped)
        extra = np.linalg.norm(points - clamped, axis=1)
        return np.maximum(vals, 0.0) + extra

    def sample_points(self, count_in: int, count_out: int, seed: int):
        """Deterministic (P_in, P_out) draw.

        P_in: uniform over occupied voxels, jittered inside the voxel, kept
        only where interpolated occupancy >= 0.5. P_out: uniform over the box,
        rejecting points whose containing voxel is occupied.
        """
        if count_in < 0 or count_out < 0:
            raise AnchorError("sample counts must be >= 0")
        rng = np.random.default_rng(seed)
        p_in = np.empty((count_in, 3), dtype=np.float64)
        filled = 0
        attempts = 0
        while filled < count_in:
            n = count_in - filled
            picks = self._occupied_idx[rng.integers(len(self._occupied_idx), size=n)]
            jitter = rng.uniform(-0.5, 0.5, size=(n, 3))
            cand = self.box_min + (picks + 0.5 + jitter) * self.cell
            keep = cand[self.occupancy(cand) >= 0.5]
            p_in[filled:filled + len(keep)] = keep
            filled += len(keep)
            attempts += 1
            if attempts > 200:
                raise RuntimeError("inside-point rejection failed to converge")
        p_out = np.empty((count_out, 3), dtype=np.float64)
        filled = 0
        attempts = 0
        while filled < count_out:
            n = count_out - filled
            cand = rng.uniform(self.box_min, self.box_max, size=(n, 3))
            cells = np.floor((cand - self.box_min) / self.cell).astype(np.int64)
            cells = np.minimum(cells, np.asarray(self.grid.shape) - 1)
            occ = self.grid[cells[:, 0], cells[:, 1], cells[:, 2]]
            keep = cand[~occ]
            p_out[filled:filled + len(keep)] = keep
            filled += len(keep)
            attempts += 1
            if attempts > 200:
                raise RuntimeError("outside-point rejection failed to converge")
        return p_in, p_out

    def head_region(self, height_fraction: float = DEFAULT_HEAD_FRACTION) -> HeadRegion:
        """Tight box around occupied voxels in the top slab of the vertical (z) extent."""
        if not 0.0 < height_fraction <= 1.0:
            raise AnchorError("height_fraction must be in (0, 1]")
        iz = self._occupied_idx[:, 2]
        z_lo, z_hi = iz.min(), iz.max()
        cutoff = z_hi - height_fraction * (z_hi - z_lo)
        sel = self._occupied_idx[iz >= cutoff - 1e-9]
        lo = self.box_min + sel.min(axis=0) * self.cell
        hi = self.box_min + (sel.max(axis=0) + 1) * self.cell
        return HeadRegion(box_min=lo, box_max=hi)


_SIX_CONN = ndimage.generate_binary_structure(3, 1)


def save_anchor(anchor: AnchorOccupancy, path) -> None:
    """Binary anchor format: magic IFAN, box, resolution, 0/1 bytes x-fastest."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<6f", *anchor.box_min, *anchor.box_max))
        fh.write(struct.pack("<3I", *anchor.resolution))
        fh.write(anchor.grid.astype(np.uint8).tobytes(order="F"))


def load_anchor(path) -> AnchorOccupancy:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise AnchorError(f"not an anchor file: {path}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise AnchorError(f"unsupported anchor version {version}")
        box = struct.unpack("<6f", fh.read(24))
        nx, ny, nz = struct.unpack("<3I", fh.read(12))
        raw = fh.read(nx * ny * nz)
        if len(raw) != nx * ny * nz:
            raise AnchorError("truncated anchor file")
    grid = np.frombuffer(raw, dtype=np.uint8).reshape((nx, ny, nz), order="F")
    return AnchorOccupancy(grid.astype(bool), box[:3], box[3:])


def synth_anchor(shape: str, resolution: int = 32, extent: float = 1.0) -> AnchorOccupancy:
    """Procedural occupancy fixtures over a [-extent, extent]^3 box.

    Shapes: capsule-person (torso capsule with a sphere head), sphere, box.
    """
    n = int(resolution)
    box_min = np.full(3, -extent)
    box_max = np.full(3, extent)
    cell = (box_max - box_min) / n
    idx = np.stack(np.meshgrid(*[np.arange(n)] * 3, indexing="ij"), axis=-1)
    centers = box_min + (idx + 0.5) * cell

    if shape == "sphere":
        grid = np.linalg.norm(centers, axis=-1) <= 0.55 * extent
    elif shape == "box":
        grid = np.all(np.abs(centers) <= 0.45 * extent, axis=-1)
    elif shape == "capsule-person":
        # torso: vertical segment capsule; head: sphere sitting on top
        a = np.array([0.0, 0.0, -0.62 * extent])
        b = np.array([0.0, 0.0, 0.28 * extent])
        ab = b - a
        tseg = np.clip(np.einsum("...k,k->...", centers - a, ab) / ab.dot(ab), 0.0, 1.0)
        closest = a + tseg[..., None] * ab
        torso = np.linalg.norm(centers - closest, axis=-1) <= 0.22 * extent
        head_c = np.array([0.0, 0.0, 0.58 * extent])
        head = np.linalg.norm(centers - head_c, axis=-1) <= 0.17 * extent
        grid = torso | head
    else:
        raise AnchorError(f"unknown synth shape {shape!r}")
    return AnchorOccupancy(grid, box_min, box_max)
