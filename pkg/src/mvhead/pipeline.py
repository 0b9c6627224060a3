"""Assembled conditional noise predictor.

MultiViewPipeline wires the conditioning chain (context encoder, appearance
warping, geometry fusion, frustum nets) in front of the joint denoiser. The
same object serves training (loss gradients flow through everything) and
DDIM sampling (duck-typed through predict_eps).
"""

from __future__ import annotations

from typing import Iterator, Sequence

import torch
from torch import nn

from .cameras import CameraPose, Intrinsics, VoxelGrid, scale_intrinsics
from .conditioning import (
    FrustumNet,
    GeometryFusion,
    ViewContextEncoder,
    build_appearance_volume,
    build_frustum_volume,
    fuse_geometry,
)
from .denoiser import JointDenoiser
from .meshes import SparseOccupancy, empty_occupancy


class MultiViewPipeline(nn.Module):
    """Conditioning chain plus backbone, exposed as one noise predictor.

    The backbone parameter group is the denoiser; everything else (context
    encoder, fusion, frustum net) belongs to the "other" group, mirroring
    the two learning-rate groups of the training schedule.
    """

    def __init__(
        self,
        context: ViewContextEncoder,
        fusion: GeometryFusion,
        frustum: FrustumNet,
        backbone: JointDenoiser,
        grid: VoxelGrid,
        intr: Intrinsics,
        depth_samples: int = 8,
        appearance_mode: str = "mean",
    ):
        super().__init__()
        self.context = context
        self.fusion = fusion
        self.frustum = frustum
        self.backbone = backbone
        self.grid = grid
        self.intr = intr
        self.depth_samples = depth_samples
        self.appearance_mode = appearance_mode

    def backbone_parameters(self) -> Iterator[nn.Parameter]:
        return self.backbone.parameters()

    def other_parameters(self) -> Iterator[nn.Parameter]:
        for module in (self.context, self.fusion, self.frustum):
            yield from module.parameters()

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def predict_eps(
        self,
        views: torch.Tensor,
        t: int,
        poses: Sequence[CameraPose],
        y: torch.Tensor,
        occupancy: SparseOccupancy | None = None,
    ) -> torch.Tensor:
        """Noise prediction for k noisy views at shared timestep t."""
        if views.ndim != 4:
            raise ValueError(f"expected (k, C, H, W) views, got {tuple(views.shape)}")
        if len(poses) != views.shape[0]:
            raise ValueError(f"{views.shape[0]} views but {len(poses)} poses")
        occ = occupancy if occupancy is not None else empty_occupancy(self.grid.size)
        ctx = self.context(views, poses, t)
        ictx = scale_intrinsics(self.intr, ctx.shape[-1] / self.intr.width)
        appearance = build_appearance_volume(
            ctx, poses, ictx, self.grid, mode=self.appearance_mode
        )
        hybrid = fuse_geometry(appearance, occ, self.fusion)
        volumes = [
            build_frustum_volume(
                hybrid, pose, t, self.frustum, self.intr, self.grid,
                depth_samples=self.depth_samples, out_size=views.shape[-1],
            )
            for pose in poses
        ]
        return self.backbone(views, y, volumes, t, poses)

    def forward(
        self,
        views: torch.Tensor,
        t: int,
        poses: Sequence[CameraPose],
        y: torch.Tensor,
        occupancy: SparseOccupancy | None = None,
    ) -> torch.Tensor:
        return self.predict_eps(views, t, poses, y, occupancy)
