"""Camera poses, pinhole projection, voxel grids and feature warping.

Conventions (fixed for the whole package):
  * world frame is right-handed with up = +y; cameras sit on a sphere around
    the origin and look at the origin;
  * azimuth 0 / elevation 0 places the camera on the +z axis (forward = -z);
    positive azimuth rotates the camera toward +x, positive elevation lifts it;
  * camera frame: z forward, x right, y down; world->camera is
    p_c = R (p_w - C) with C the camera center, translation = -R C;
  * pixel coordinates have integer values at pixel centers, u along width,
    v along height (down); a feature map sample is valid for
    0 <= u <= W-1 and 0 <= v <= H-1;
  * feature maps are channel-first tensors (C, H, W).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch


@dataclass(frozen=True)
class CameraPose:
    """Rigid world->camera transform of a camera on the look-at sphere."""

    azimuth: float      # degrees in [-180, 180]
    elevation: float    # degrees in [-90, 90]
    radius: float       # > 0, distance of camera center from origin
    rotation: np.ndarray     # (3, 3) orthonormal, det +1
    translation: np.ndarray  # (3,), p_cam = rotation @ p_world + translation

    @property
    def camera_center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        """(..., 3) world points -> (..., 3) camera-frame points."""
        return points @ self.rotation.T + self.translation


@dataclass(frozen=True)
class Intrinsics:
    """Shared pinhole intrinsics (one focal for all views of a run)."""

    focal: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.focal <= 0:
            raise ValueError(f"focal must be > 0, got {self.focal}")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}"
            )


def scale_intrinsics(intr: Intrinsics, factor: float) -> Intrinsics:
    """Intrinsics for a feature map resampled by `factor` (pixel centers aligned)."""
    w = int(round(intr.width * factor))
    h = int(round(intr.height * factor))
    if w < 1 or h < 1:
        raise ValueError(f"scale factor {factor} collapses the image")
    return Intrinsics(
        focal=intr.focal * factor,
        cx=(intr.cx + 0.5) * factor - 0.5,
        cy=(intr.cy + 0.5) * factor - 0.5,
        width=w,
        height=h,
    )


def pose_from_angles(azimuth: float, elevation: float, radius: float) -> CameraPose:
    """Place a camera on the sphere, looking at the origin.

    Center C = radius * (sin az cos el, sin el, cos az cos el). The camera
    basis is z = -C/|C| (forward), x = normalize(z x up), y = z x x (down);
    at |elevation| = 90 the up hint degenerates and -z_world is used instead.
    """
    if radius <= 0:
        raise ValueError(f"radius must be > 0, got {radius}")
    az = math.radians(azimuth)
    el = math.radians(elevation)
    center = radius * np.array(
        [math.sin(az) * math.cos(el), math.sin(el), math.cos(az) * math.cos(el)],
        dtype=np.float64,
    )
    z_cam = -center / np.linalg.norm(center)
    up = np.array([0.0, 1.0, 0.0])
    x_cam = np.cross(z_cam, up)
    nx = np.linalg.norm(x_cam)
    if nx < 1e-12:  # looking straight up or down
        up = np.array([0.0, 0.0, -1.0])
        x_cam = np.cross(z_cam, up)
        nx = np.linalg.norm(x_cam)
    x_cam = x_cam / nx
    y_cam = np.cross(z_cam, x_cam)
    rotation = np.stack([x_cam, y_cam, z_cam])
    translation = -rotation @ center
    return CameraPose(
        azimuth=float(azimuth),
        elevation=float(elevation),
        radius=float(radius),
        rotation=rotation,
        translation=translation,
    )


class Projection(NamedTuple):
    u: float
    v: float
    depth: float
    in_frustum: bool


def project(point: np.ndarray, pose: CameraPose, intr: Intrinsics) -> Projection:
    """Pinhole projection of one world point.

    u = focal * x_c / z_c + cx (v analogous); depth = z_c. Points at or behind
    the camera plane come back with in_frustum=False and NaN pixel coordinates
    instead of raising.
    """
    p = np.asarray(point, dtype=np.float64)
    x_c, y_c, z_c = pose.rotation @ p + pose.translation
    if z_c <= 0.0:
        return Projection(math.nan, math.nan, float(z_c), False)
    u = intr.focal * x_c / z_c + intr.cx
    v = intr.focal * y_c / z_c + intr.cy
    return Projection(float(u), float(v), float(z_c), True)


@dataclass(frozen=True)
class VoxelGrid:
    """Cubic lattice of L^3 vertices spanning [-extent, extent] per axis."""

    size: int
    extent: float
    axis_coords: np.ndarray  # (L,)

    @property
    def spacing(self) -> float:
        return 2.0 * self.extent / (self.size - 1)

    @property
    def vertices(self) -> np.ndarray:
        """(L^3, 3) vertex coordinates, index order i*L*L + j*L + k <-> (x_i, y_j, z_k)."""
        c = self.axis_coords
        xs, ys, zs = np.meshgrid(c, c, c, indexing="ij")
        return np.stack([xs, ys, zs], axis=-1).reshape(-1, 3)


def build_voxel_grid(size: int, extent: float = 1.0) -> VoxelGrid:
    if size < 2:
        raise ValueError(f"grid size must be >= 2, got {size}")
    if extent <= 0:
        raise ValueError(f"extent must be > 0, got {extent}")
    coords = np.linspace(-extent, extent, size, dtype=np.float64)
    return VoxelGrid(size=size, extent=extent, axis_coords=coords)


def _bilinear_gather(features: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample (C, H, W) at continuous pixel coords; zero outside [0, W-1]x[0, H-1].

    Returns (samples (n, C), valid (n,) bool).
    """
    _, h, w = features.shape
    valid = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1) & torch.isfinite(u) & torch.isfinite(v)
    uc = torch.where(valid, u, torch.zeros_like(u)).clamp(0, w - 1)
    vc = torch.where(valid, v, torch.zeros_like(v)).clamp(0, h - 1)
    j0 = uc.floor().long().clamp(0, w - 2) if w > 1 else uc.long() * 0
    i0 = vc.floor().long().clamp(0, h - 2) if h > 1 else vc.long() * 0
    j1 = (j0 + 1).clamp(max=w - 1)
    i1 = (i0 + 1).clamp(max=h - 1)
    fu = uc - j0.to(uc.dtype)
    fv = vc - i0.to(vc.dtype)
    flat = features.reshape(features.shape[0], -1)  # (C, H*W)

    def grab(ii: torch.Tensor, jj: torch.Tensor) -> torch.Tensor:
        return flat[:, ii * w + jj].T  # (n, C)

    w00 = ((1 - fu) * (1 - fv)).unsqueeze(-1)
    w01 = (fu * (1 - fv)).unsqueeze(-1)
    w10 = ((1 - fu) * fv).unsqueeze(-1)
    w11 = (fu * fv).unsqueeze(-1)
    out = w00 * grab(i0, j0) + w01 * grab(i0, j1) + w10 * grab(i1, j0) + w11 * grab(i1, j1)
    return out * valid.unsqueeze(-1).to(out.dtype), valid


def sample_view_features(
    features: torch.Tensor,
    pose: CameraPose,
    intr: Intrinsics,
    grid: VoxelGrid,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Warp one view's feature map into the voxel grid.

    Every grid vertex is projected into the view and the map (C, H, W) is
    bilinearly interpolated at (u, v). Vertices behind the camera or outside
    the map's support get zero features. Returns the warped volume
    (C, L, L, L) and a validity mask (L, L, L) marking vertices that
    actually received data (the "empty vs black" distinction).
    """
    if not torch.isfinite(features).all():
        raise ValueError("feature map contains non-finite values")
    dtype = features.dtype
    L = grid.size
    verts = torch.as_tensor(grid.vertices, dtype=dtype)
    rot = torch.as_tensor(pose.rotation, dtype=dtype)
    tr = torch.as_tensor(pose.translation, dtype=dtype)
    cam = verts @ rot.T + tr
    z = cam[:, 2]
    front = z > 0
    zsafe = torch.where(front, z, torch.ones_like(z))
    u = intr.focal * cam[:, 0] / zsafe + intr.cx
    v = intr.focal * cam[:, 1] / zsafe + intr.cy
    u = torch.where(front, u, torch.full_like(u, math.nan))
    v = torch.where(front, v, torch.full_like(v, math.nan))
    samples, valid = _bilinear_gather(features, u, v)
    volume = samples.T.reshape(features.shape[0], L, L, L)
    validity = (valid & front).reshape(L, L, L).to(dtype)
    return volume, validity


def world_to_grid(points: torch.Tensor, grid: VoxelGrid) -> torch.Tensor:
    """Continuous grid coordinates g in [0, L-1] per axis for world points (..., 3)."""
    extent = grid.extent
    spacing = grid.spacing
    return (points + extent) / spacing


def trilinear_sample_volume(volume: torch.Tensor, points: torch.Tensor, grid: VoxelGrid) -> torch.Tensor:
    """Trilinearly sample a dense (C, L, L, L) volume at world points (..., 3).

    Zero outside the grid extent; differentiable w.r.t. the volume. Returns
    (..., C).
    """
    L = grid.size
    g = world_to_grid(points, grid)
    shape = g.shape[:-1]
    g = g.reshape(-1, 3)
    inside = ((g >= 0) & (g <= L - 1)).all(dim=1)
    gc = g.clamp(0, L - 1)
    base = gc.floor().long().clamp(0, L - 2)
    frac = gc - base.to(gc.dtype)
    flat = volume.reshape(volume.shape[0], -1)  # (C, L^3)
    out = None
    for corner in range(8):
        db = ((corner >> 2) & 1, (corner >> 1) & 1, corner & 1)
        idx = base + torch.tensor(db, dtype=torch.long)
        wgt = torch.ones_like(frac[:, 0])
        for ax in range(3):
            wgt = wgt * (frac[:, ax] if db[ax] else (1 - frac[:, ax]))
        flat_idx = (idx[:, 0] * L + idx[:, 1]) * L + idx[:, 2]
        vals = flat[:, flat_idx].T  # (n, C)
        term = wgt.unsqueeze(-1) * vals
        out = term if out is None else out + term
    out = out * inside.unsqueeze(-1).to(out.dtype)
    return out.reshape(*shape, volume.shape[0])


def frustum_ray_points(
    pose: CameraPose,
    intr: Intrinsics,
    depth_samples: int,
    near: float,
    far: float,
    out_height: int,
    out_width: int,
    dtype: torch.dtype = torch.float32,
) -> tuple[torch.Tensor, torch.Tensor]:
    """World-space sample points along pixel rays of a target view.

    Rays pass through the centers of an out_height x out_width resampling of
    the view's image plane; depths are z-distances (camera frame) linearly
    spaced over [near, far]. Returns points (D, H_out, W_out, 3) and the
    shared depth ladder (D,).
    """
    if depth_samples < 2:
        raise ValueError(f"need >= 2 depth samples, got {depth_samples}")
    if not (0 < near < far):
        raise ValueError(f"need 0 < near < far, got near={near}, far={far}")
    sx = out_width / intr.width
    sy = out_height / intr.height
    # pixel centers of the downsampled plane expressed in full-res pixel units
    us = (torch.arange(out_width, dtype=dtype) + 0.5) / sx - 0.5
    vs = (torch.arange(out_height, dtype=dtype) + 0.5) / sy - 0.5
    vv, uu = torch.meshgrid(vs, us, indexing="ij")
    dirs = torch.stack(
        [(uu - intr.cx) / intr.focal, (vv - intr.cy) / intr.focal, torch.ones_like(uu)],
        dim=-1,
    )  # (H, W, 3) camera-frame directions at unit z
    depths = torch.linspace(near, far, depth_samples, dtype=dtype)
    cam_pts = depths.view(-1, 1, 1, 1) * dirs.unsqueeze(0)  # (D, H, W, 3)
    rot = torch.as_tensor(pose.rotation, dtype=dtype)
    tr = torch.as_tensor(pose.translation, dtype=dtype)
    world = (cam_pts - tr) @ rot  # R^T (p_c - t)
    return world, depths
