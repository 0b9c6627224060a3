"""Conditioning chain from posed views and a head prior to frustum features.

Three stages feed the denoiser: light per-view context encoding, warping of
the context maps into a shared voxel volume joined with sparse occupancy
evidence from the mesh prior, and a per-view frustum resampling processed by
a small 3D UNet into a resolution pyramid. Every stage is an ordinary torch
module, so gradients flow end to end from the frustum features back to the
input pixels and the occupancy features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .cameras import (
    CameraPose,
    Intrinsics,
    VoxelGrid,
    frustum_ray_points,
    sample_view_features,
    trilinear_sample_volume,
)
from .meshes import SparseOccupancy


def sinusoidal_embedding(value, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sin/cos embedding of scalar values; output (..., dim), dim even."""
    if dim % 2 != 0:
        raise ValueError(f"embedding dim must be even, got {dim}")
    v = torch.as_tensor(value, dtype=torch.float64)
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64) / half
    )
    ang = v.unsqueeze(-1) * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


def pose_embedding(pose: CameraPose, dim: int) -> torch.Tensor:
    """Vector embedding of a camera pose's (azimuth, elevation), in radians."""
    if dim % 4 != 0:
        raise ValueError(f"pose embedding dim must be divisible by 4, got {dim}")
    az = sinusoidal_embedding(math.radians(pose.azimuth), dim // 2)
    el = sinusoidal_embedding(math.radians(pose.elevation), dim // 2)
    return torch.cat([az, el], dim=-1)


def _time_pose_embedding(t: int, pose: CameraPose, dim: int, dtype: torch.dtype) -> torch.Tensor:
    emb = torch.cat([sinusoidal_embedding(float(t), dim), pose_embedding(pose, dim)])
    return emb.to(dtype)


class ViewContextEncoder(nn.Module):
    """Light conv encoder for one noisy view, with time/angle conditioning.

    conv3x3 -> add projected (t, azimuth, elevation) embedding -> SiLU ->
    strided conv3x3 -> SiLU -> conv3x3. Output is (channels, ceil(H/2),
    ceil(W/2)); with every .weight zeroed the output collapses to the final
    bias, which the tests use as a linearity anchor.
    """

    def __init__(self, in_channels: int = 3, channels: int = 16, emb_dim: int = 32):
        super().__init__()
        self.channels = channels
        self.emb_dim = emb_dim
        self.conv_in = nn.Conv2d(in_channels, channels, 3, padding=1)
        self.emb_proj = nn.Linear(2 * emb_dim, channels)
        self.conv_down = nn.Conv2d(channels, channels, 3, stride=2, padding=1)
        self.conv_out = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, views: torch.Tensor, poses: Sequence[CameraPose], t: int) -> torch.Tensor:
        """(k, C, H, W) noisy views -> (k, channels, H', W') context maps."""
        if views.ndim != 4:
            raise ValueError(f"expected (k, C, H, W) views, got {tuple(views.shape)}")
        if len(poses) != views.shape[0]:
            raise ValueError(f"{views.shape[0]} views but {len(poses)} poses")
        if t < 1:
            raise ValueError(f"diffusion time must be >= 1, got {t}")
        dtype = views.dtype
        embs = torch.stack(
            [_time_pose_embedding(t, p, self.emb_dim, dtype) for p in poses]
        )
        h = self.conv_in(views) + self.emb_proj(embs)[:, :, None, None]
        h = F.silu(h)
        h = F.silu(self.conv_down(h))
        return self.conv_out(h)


def encode_view_context(
    view: torch.Tensor, pose: CameraPose, t: int, encoder: ViewContextEncoder
) -> torch.Tensor:
    """Encode a single (C, H, W) view; see ViewContextEncoder."""
    if view.ndim != 3:
        raise ValueError(f"expected (C, H, W) view, got {tuple(view.shape)}")
    return encoder(view.unsqueeze(0), [pose], t)[0]


@dataclass(frozen=True)
class AppearanceVolume:
    """Per-view context features warped into the shared voxel grid.

    In "concat" mode `features` holds the per-view channel blocks in input
    view order, (k*C, L, L, L) with validity (k, L, L, L); in "mean" mode the
    blocks are averaged, (C, L, L, L) with the coverage fraction (1, L, L, L).
    Voxels outside a view's frustum hold zeros in that view's block.
    """

    features: torch.Tensor
    validity: torch.Tensor
    view_count: int
    mode: str

    @property
    def tensor(self) -> torch.Tensor:
        """Features with validity appended as extra channels."""
        return torch.cat([self.features, self.validity], dim=0)

    @property
    def grid_size(self) -> int:
        return self.features.shape[-1]


def build_appearance_volume(
    contexts: torch.Tensor,
    poses: Sequence[CameraPose],
    intr: Intrinsics,
    grid: VoxelGrid,
    mode: str = "concat",
) -> AppearanceVolume:
    """Warp k context maps (k, C, H', W') into one appearance volume.

    `intr` must describe the context-map resolution (scale_intrinsics from
    the image-space intrinsics when the encoder downsamples).
    """
    if contexts.ndim != 4 or contexts.shape[0] < 1:
        raise ValueError(f"expected (k>=1, C, H, W) contexts, got {tuple(contexts.shape)}")
    if len(poses) != contexts.shape[0]:
        raise ValueError(f"{contexts.shape[0]} context maps but {len(poses)} poses")
    if mode not in ("concat", "mean"):
        raise ValueError(f"unknown aggregation mode {mode!r}")
    if contexts.shape[2] != intr.height or contexts.shape[3] != intr.width:
        raise ValueError(
            f"context maps are {contexts.shape[2]}x{contexts.shape[3]} but intrinsics "
            f"describe {intr.height}x{intr.width}"
        )
    vols, vals = [], []
    for i, pose in enumerate(poses):
        vol, val = sample_view_features(contexts[i], pose, intr, grid)
        vols.append(vol)
        vals.append(val)
    if mode == "concat":
        features = torch.cat(vols, dim=0)
        validity = torch.stack(vals, dim=0)
    else:
        features = torch.stack(vols, dim=0).mean(dim=0)
        validity = torch.stack(vals, dim=0).mean(dim=0, keepdim=True)
    return AppearanceVolume(
        features=features, validity=validity, view_count=len(poses), mode=mode
    )


@dataclass(frozen=True)
class HybridVolume:
    """Dense fused appearance+geometry volume, (C, L, L, L), finite everywhere."""

    features: torch.Tensor

    @property
    def grid_size(self) -> int:
        return self.features.shape[-1]


class GeometryFusion(nn.Module):
    """Fuse an appearance volume with sparse occupancy into a dense volume.

    The geometry branch runs a two-level sparse 3D conv realized as
    gather-conv-scatter: convolutions are evaluated densely but outputs are
    masked to the occupied sites (and their pooled coarse sites), so an empty
    occupancy contributes exact zeros. The appearance branch is a 1x1x1
    projection; both are concatenated and mixed by a dense conv stage.
    """

    def __init__(
        self,
        appearance_channels: int,
        occupancy_channels: int = 4,
        geometry_channels: int = 16,
        out_channels: int = 16,
    ):
        super().__init__()
        self.occupancy_channels = occupancy_channels
        self.geo_in = nn.Conv3d(occupancy_channels, geometry_channels, 3, padding=1)
        self.geo_down = nn.Conv3d(geometry_channels, geometry_channels, 3, stride=2, padding=1)
        self.geo_coarse = nn.Conv3d(geometry_channels, geometry_channels, 3, padding=1)
        self.geo_merge = nn.Conv3d(2 * geometry_channels, geometry_channels, 1)
        self.app_proj = nn.Conv3d(appearance_channels, geometry_channels, 1)
        self.fuse_a = nn.Conv3d(2 * geometry_channels, out_channels, 3, padding=1)
        self.fuse_b = nn.Conv3d(out_channels, out_channels, 3, padding=1)

    def geometry_features(
        self, indices: torch.Tensor, features: torch.Tensor, grid_size: int
    ) -> torch.Tensor:
        """Masked hierarchical conv over occupied sites; (C_geo, L, L, L).

        Exactly zero everywhere when `indices` is empty, and zero off the
        occupied sites always.
        """
        p = next(self.parameters())
        n_sites = grid_size ** 3
        dense = torch.zeros(self.occupancy_channels, n_sites, dtype=p.dtype, device=p.device)
        mask = torch.zeros(1, n_sites, dtype=p.dtype, device=p.device)
        if indices.shape[0] > 0:
            feats = features.to(p.dtype) if torch.is_tensor(features) else torch.as_tensor(features, dtype=p.dtype)
            lin = (indices[:, 0] * grid_size + indices[:, 1]) * grid_size + indices[:, 2]
            dense = dense.index_copy(1, lin, feats.T)
            mask = mask.index_copy(
                1, lin, torch.ones(1, indices.shape[0], dtype=p.dtype, device=p.device)
            )
        dense = dense.reshape(self.occupancy_channels, grid_size, grid_size, grid_size)
        mask = mask.reshape(1, grid_size, grid_size, grid_size)
        fine = F.silu(self.geo_in(dense.unsqueeze(0))) * mask
        coarse_mask = F.max_pool3d(mask.unsqueeze(0), 2, ceil_mode=True).squeeze(0)
        coarse = F.silu(self.geo_down(fine)) * coarse_mask
        coarse = F.silu(self.geo_coarse(coarse)) * coarse_mask
        up = F.interpolate(coarse, size=(grid_size,) * 3, mode="nearest") * mask
        merged = self.geo_merge(torch.cat([fine, up], dim=1)) * mask
        return merged.squeeze(0)

    def appearance_features(self, appearance: torch.Tensor) -> torch.Tensor:
        return self.app_proj(appearance.unsqueeze(0)).squeeze(0)

    def forward(
        self, appearance: torch.Tensor, indices: torch.Tensor, features: torch.Tensor
    ) -> torch.Tensor:
        """(C_a, L, L, L) + occupied (n, 3)/(n, occ_ch) -> (C_out, L, L, L)."""
        if appearance.shape[0] != self.app_proj.in_channels:
            raise ValueError(
                f"appearance has {appearance.shape[0]} channels, fusion expects "
                f"{self.app_proj.in_channels}"
            )
        grid_size = appearance.shape[-1]
        geo = self.geometry_features(indices, features, grid_size)
        app = self.appearance_features(appearance)
        h = torch.cat([app, geo], dim=0).unsqueeze(0)
        h = F.silu(self.fuse_a(h))
        return self.fuse_b(h).squeeze(0)


def fuse_geometry(
    volume: AppearanceVolume, occ: SparseOccupancy, fusion: GeometryFusion
) -> HybridVolume:
    """Fuse an appearance volume with mesh-prior occupancy; dense output."""
    if occ.grid_size != volume.grid_size:
        raise ValueError(
            f"occupancy grid {occ.grid_size} != appearance grid {volume.grid_size}"
        )
    if occ.features.shape[1] != fusion.occupancy_channels:
        raise ValueError(
            f"occupancy has {occ.features.shape[1]} channels, fusion expects "
            f"{fusion.occupancy_channels}"
        )
    indices = torch.as_tensor(occ.indices, dtype=torch.long)
    out = fusion(volume.tensor, indices, occ.features)
    return HybridVolume(features=out)


@dataclass(frozen=True)
class FrustumVolume:
    """Per-target-view conditioning pyramid sampled along camera rays.

    `levels` holds feature maps (C_r, D, H_r, W_r) ordered largest-first with
    strictly decreasing spatial resolution; the depth ladder is shared.
    """

    levels: tuple
    depths: torch.Tensor
    near: float
    far: float

    def __post_init__(self) -> None:
        if len(self.levels) < 2:
            raise ValueError(f"need >= 2 pyramid levels, got {len(self.levels)}")
        sizes = [lvl.shape[-2] * lvl.shape[-1] for lvl in self.levels]
        if any(b >= a for a, b in zip(sizes, sizes[1:])):
            raise ValueError(f"pyramid resolutions must strictly decrease, got {sizes}")
        if self.depths.shape[0] < 2:
            raise ValueError(f"need >= 2 depth samples, got {self.depths.shape[0]}")

    def level_for(self, height: int, width: int) -> torch.Tensor:
        """The pyramid level matching a spatial resolution."""
        for lvl in self.levels:
            if lvl.shape[-2] == height and lvl.shape[-1] == width:
                return lvl
        raise ValueError(f"no matching resolution level for {height}x{width}")

    @classmethod
    def zeros(
        cls,
        channels: int,
        depth_samples: int,
        base_size: int,
        n_levels: int = 3,
        near: float = 1.0,
        far: float = 3.0,
        dtype: torch.dtype = torch.float32,
    ) -> "FrustumVolume":
        """All-zero pyramid, for ablation and plumbing tests."""
        levels = tuple(
            torch.zeros(channels, depth_samples, base_size >> i, base_size >> i, dtype=dtype)
            for i in range(n_levels)
        )
        return cls(
            levels=levels,
            depths=torch.linspace(near, far, depth_samples, dtype=dtype),
            near=near,
            far=far,
        )


def default_depth_range(pose: CameraPose, grid: VoxelGrid) -> tuple[float, float]:
    """Near/far covering the grid's bounding sphere as seen from the camera."""
    reach = math.sqrt(3.0) * grid.extent
    near = max(pose.radius - reach, 0.05 * pose.radius)
    return near, pose.radius + reach


def sample_frustum(
    hybrid: HybridVolume,
    pose: CameraPose,
    intr: Intrinsics,
    grid: VoxelGrid,
    depth_samples: int = 16,
    near: float | None = None,
    far: float | None = None,
    out_size: int | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Resample the fused volume along a target view's rays.

    Returns (samples (C, D, H, W), depths (D,)); H = W = out_size (default:
    the intrinsics' image size). Points outside the grid sample to zero.
    """
    if near is None or far is None:
        d_near, d_far = default_depth_range(pose, grid)
        near = d_near if near is None else near
        far = d_far if far is None else far
    h = out_size if out_size is not None else intr.height
    w = out_size if out_size is not None else intr.width
    pts, depths = frustum_ray_points(
        pose, intr, depth_samples, near, far, h, w, dtype=hybrid.features.dtype
    )
    samples = trilinear_sample_volume(hybrid.features, pts, grid)  # (D, H, W, C)
    return samples.permute(3, 0, 1, 2), depths


class FrustumNet(nn.Module):
    """Small 3D UNet over a frustum sampling, downsampling spatially only.

    Strides are (1, 2, 2) so the depth axis survives; each stage adds a
    projected (t, viewpoint) embedding; 1x1x1 heads at every decoder
    resolution emit the conditioning pyramid.
    """

    def __init__(
        self,
        in_channels: int,
        base: int = 16,
        out_channels: int = 16,
        emb_dim: int = 32,
    ):
        super().__init__()
        self.emb_dim = emb_dim
        self.out_channels = out_channels
        c0, c1, c2 = base, 2 * base, 3 * base
        self.enc0 = nn.Conv3d(in_channels, c0, 3, padding=1)
        self.emb0 = nn.Linear(2 * emb_dim, c0)
        self.enc1 = nn.Conv3d(c0, c1, 3, stride=(1, 2, 2), padding=1)
        self.emb1 = nn.Linear(2 * emb_dim, c1)
        self.enc2 = nn.Conv3d(c1, c2, 3, stride=(1, 2, 2), padding=1)
        self.emb2 = nn.Linear(2 * emb_dim, c2)
        self.dec1 = nn.Conv3d(c2 + c1, c1, 3, padding=1)
        self.dec0 = nn.Conv3d(c1 + c0, c0, 3, padding=1)
        self.head0 = nn.Conv3d(c0, out_channels, 1)
        self.head1 = nn.Conv3d(c1, out_channels, 1)
        self.head2 = nn.Conv3d(c2, out_channels, 1)

    def forward(self, samples: torch.Tensor, pose: CameraPose, t: int) -> tuple:
        """(C, D, H, W) frustum samples -> 3 maps largest-first."""
        if samples.ndim != 4:
            raise ValueError(f"expected (C, D, H, W) samples, got {tuple(samples.shape)}")
        if t < 1:
            raise ValueError(f"diffusion time must be >= 1, got {t}")
        dtype = samples.dtype
        emb = _time_pose_embedding(t, pose, self.emb_dim, dtype)
        x = samples.unsqueeze(0)
        h0 = F.silu(self.enc0(x) + self.emb0(emb)[None, :, None, None, None])
        h1 = F.silu(self.enc1(h0) + self.emb1(emb)[None, :, None, None, None])
        h2 = F.silu(self.enc2(h1) + self.emb2(emb)[None, :, None, None, None])
        u1 = F.interpolate(h2, size=h1.shape[2:], mode="nearest")
        d1 = F.silu(self.dec1(torch.cat([u1, h1], dim=1)))
        u0 = F.interpolate(d1, size=h0.shape[2:], mode="nearest")
        d0 = F.silu(self.dec0(torch.cat([u0, h0], dim=1)))
        return (
            self.head0(d0).squeeze(0),
            self.head1(d1).squeeze(0),
            self.head2(h2).squeeze(0),
        )


def build_frustum_volume(
    hybrid: HybridVolume,
    pose: CameraPose,
    t: int,
    net: FrustumNet,
    intr: Intrinsics,
    grid: VoxelGrid,
    depth_samples: int = 16,
    near: float | None = None,
    far: float | None = None,
    out_size: int | None = None,
) -> FrustumVolume:
    """Sample the fused volume along a view's rays and run the frustum net."""
    if near is None or far is None:
        d_near, d_far = default_depth_range(pose, grid)
        near = d_near if near is None else near
        far = d_far if far is None else far
    samples, depths = sample_frustum(
        hybrid, pose, intr, grid,
        depth_samples=depth_samples, near=near, far=far, out_size=out_size,
    )
    levels = net(samples, pose, t)
    return FrustumVolume(levels=levels, depths=depths, near=float(near), far=float(far))
