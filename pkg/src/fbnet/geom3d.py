"""Differentiable rigid rotation of cubic 3D feature grids."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .core import AngleRange, Config, ConfigError

# Fractional sample offsets this close to a lattice point collapse onto it,
# so rotations by exact multiples of pi/2 act as pure index permutations.
SNAP_EPS = 1e-6


def wrap_angle(a: float) -> float:
    """Map any finite angle into the canonical range (-pi, pi]."""
    a = math.fmod(a + math.pi, math.tau)
    if a <= 0.0:
        a += math.tau
    return a - math.pi


@dataclass(frozen=True)
class ViewPose:
    """Rotation angles (radians) about the x, y, z axes, canonicalized."""

    theta_x: float
    theta_y: float
    theta_z: float

    def __post_init__(self):
        for name in ("theta_x", "theta_y", "theta_z"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
            object.__setattr__(self, name, wrap_angle(v))

    def as_array(self) -> np.ndarray:
        return np.array([self.theta_x, self.theta_y, self.theta_z])

    def as_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor([self.theta_x, self.theta_y, self.theta_z],
                            dtype=dtype)


@dataclass(frozen=True)
class PoseRanges:
    """Per-axis sampling intervals: azimuth = theta_y, elevation = theta_x,
    roll = theta_z."""

    azimuth: AngleRange
    elevation: AngleRange
    roll: AngleRange

    @classmethod
    def from_config(cls, cfg: Config) -> "PoseRanges":
        return cls(azimuth=cfg.azimuth_range, elevation=cfg.elevation_range,
                   roll=cfg.roll_range)


def sample_pose(ranges: PoseRanges, rng: np.random.Generator) -> ViewPose:
    """Uniform independent draw per axis; draw order fixed as (x, y, z)."""
    for name, (lo, hi) in (("elevation", ranges.elevation),
                           ("azimuth", ranges.azimuth),
                           ("roll", ranges.roll)):
        if lo > hi:
            raise ConfigError(f"{name} range is empty: ({lo}, {hi})")
    tx = rng.uniform(*ranges.elevation)
    ty = rng.uniform(*ranges.azimuth)
    tz = rng.uniform(*ranges.roll)
    return ViewPose(tx, ty, tz)


def pose_to_rotation(pose: ViewPose) -> np.ndarray:
    """3x3 rotation matrix, composition R = Rz(tz) @ Ry(ty) @ Rx(tx)."""
    cx, sx = math.cos(pose.theta_x), math.sin(pose.theta_x)
    cy, sy = math.cos(pose.theta_y), math.sin(pose.theta_y)
    cz, sz = math.cos(pose.theta_z), math.sin(pose.theta_z)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]], dtype=np.float64)
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]], dtype=np.float64)
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]], dtype=np.float64)
    return rz @ ry @ rx


def rotation_matrices(theta: torch.Tensor) -> torch.Tensor:
    """Batched differentiable version of pose_to_rotation; theta (..., 3)."""
    tx, ty, tz = theta[..., 0], theta[..., 1], theta[..., 2]
    cx, sx = torch.cos(tx), torch.sin(tx)
    cy, sy = torch.cos(ty), torch.sin(ty)
    cz, sz = torch.cos(tz), torch.sin(tz)
    one, zero = torch.ones_like(tx), torch.zeros_like(tx)
    rx = torch.stack([one, zero, zero,
                      zero, cx, -sx,
                      zero, sx, cx], dim=-1).reshape(*tx.shape, 3, 3)
    ry = torch.stack([cy, zero, sy,
                      zero, one, zero,
                      -sy, zero, cy], dim=-1).reshape(*tx.shape, 3, 3)
    rz = torch.stack([cz, -sz, zero,
                      sz, cz, zero,
                      zero, zero, one], dim=-1).reshape(*tx.shape, 3, 3)
    return rz @ ry @ rx


def rotate_volume(vol: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    """Inverse-warp a batch of cubic feature volumes to new orientations.

    vol: (N, C, S, S, S); theta: (N, 3) or (3,), radians. Every output voxel
    center (normalized to [-1, 1]^3 about the grid center) samples the input
    at R^-1 * coordinate by trilinear interpolation; samples outside the cube
    read as zero. Differentiable in both vol and theta.
    """
    if vol.ndim != 5:
        raise ValueError(f"expected (N, C, D, H, W) volume, got shape {tuple(vol.shape)}")
    n, c, d, h, w = vol.shape
    if not (d == h == w):
        raise ValueError(f"rotation requires a cubic grid, got D,H,W = {(d, h, w)}")
    s = d
    dtype, device = vol.dtype, vol.device

    theta = torch.as_tensor(theta, dtype=dtype, device=device)
    if theta.ndim == 1:
        theta = theta.unsqueeze(0).expand(n, 3)
    if theta.shape != (n, 3):
        raise ValueError(f"theta must have shape (N, 3), got {tuple(theta.shape)}")
    rot = rotation_matrices(theta)

    axis = (torch.linspace(-1.0, 1.0, s, dtype=dtype, device=device)
            if s > 1 else torch.zeros(1, dtype=dtype, device=device))
    zz, yy, xx = torch.meshgrid(axis, axis, axis, indexing="ij")
    pos = torch.stack([xx, yy, zz], dim=-1).reshape(1, -1, 3)
    src = pos @ rot  # row-vector form of R^T @ p, i.e. the inverse rotation

    u = (src + 1.0) * ((s - 1) / 2.0)
    base = torch.floor(u)
    frac = u - base
    frac = torch.where(frac < SNAP_EPS, torch.zeros_like(frac), frac)
    frac = torch.where(frac > 1.0 - SNAP_EPS, torch.ones_like(frac), frac)
    base = base.long()

    flat = vol.reshape(n, c, s ** 3)
    out = torch.zeros_like(flat)
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                idx = base + torch.tensor([dx, dy, dz], device=device)
                weight = ((frac[..., 0] if dx else 1.0 - frac[..., 0])
                          * (frac[..., 1] if dy else 1.0 - frac[..., 1])
                          * (frac[..., 2] if dz else 1.0 - frac[..., 2]))
                inside = ((idx >= 0) & (idx < s)).all(dim=-1)
                idx = idx.clamp(0, s - 1)
                lin = (idx[..., 2] * s + idx[..., 1]) * s + idx[..., 0]
                vals = flat.gather(2, lin.unsqueeze(1).expand(n, c, -1))
                out = out + (weight * inside.to(dtype)).unsqueeze(1) * vals
    return out.reshape(n, c, s, s, s)


def rotate_grid(grid: torch.Tensor, pose) -> torch.Tensor:
    """Rotate a single (C, S, S, S) feature grid to a pose.

    `pose` may be a ViewPose or a length-3 tensor (kept differentiable).
    """
    if grid.ndim != 4:
        raise ValueError(f"expected (C, D, H, W) grid, got shape {tuple(grid.shape)}")
    theta = pose.as_tensor(grid.dtype) if isinstance(pose, ViewPose) else pose
    return rotate_volume(grid.unsqueeze(0), theta)[0]
