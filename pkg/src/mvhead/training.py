"""Training loop, learning-rate schedule, view subsets and joint sampling.

The loss is the multi-view denoising objective: for one identity, draw a
shared timestep, noise a random k-view subset, run the full conditioning
chain plus joint denoiser, and average the per-view L2 norms of the noise
residual. With k=1 this reduces to the single-view epsilon loss.
"""

from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .cameras import CameraPose, Intrinsics, VoxelGrid, build_voxel_grid, pose_from_angles
from .conditioning import FrustumNet, GeometryFusion, ViewContextEncoder
from .denoiser import DenoiserConfig, JointDenoiser
from .diffusion import (
    MultiViewState,
    NoiseSchedule,
    build_schedule,
    ddim_step,
    ddim_timesteps,
    forward_diffuse,
    haar_decode,
    haar_encode,
)
from .meshes import SparseOccupancy, estimate_mesh, voxelize_mesh
from .pipeline import MultiViewPipeline

LOG_COLUMNS = ("step", "loss", "lr_backbone", "lr_other", "wall_time_s")
LOG_NAME = "train_log.csv"
CHECKPOINT_FORMAT = "mvhead-checkpoint-v1"


@dataclass(frozen=True)
class TrainConfig:
    """Flat training configuration; every field maps to one config-file key."""

    # diffusion
    t_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # data and geometry
    image_size: int = 32
    n_views: int = 16
    subset_k: int = 4
    grid_size: int = 8
    grid_extent: float = 1.0
    mesh_provider: str = "toy-parametric"
    use_real_proxy: bool = True
    use_synthetic_proxy: bool = True
    pruning_enabled: bool = False
    # model
    context_channels: int = 16
    fusion_channels: int = 16
    frustum_base: int = 8
    cond_channels: int = 8
    depth_samples: int = 8
    base_channels: int = 32
    channel_mults: tuple = (1, 2, 3)
    heads: int = 4
    emb_dim: int = 32
    attn_max_size: int = 16
    attention_enabled: bool = True
    appearance_mode: str = "mean"
    latent_space: str = "pixel"
    # optimization
    batch_size: int = 2
    total_steps: int = 2000
    warmup_steps: int = 100
    backbone_lr_start: float = 1e-6
    backbone_lr_end: float = 5e-5
    other_lr: float = 5e-4
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    shared_noise: bool = False
    seed: int = 0
    checkpoint_every: int = 500

    def __post_init__(self) -> None:
        if not (1 <= self.subset_k <= self.n_views):
            raise ValueError(f"need 1 <= k <= N, got k={self.subset_k}, N={self.n_views}")
        if self.warmup_steps < 0:
            raise ValueError(f"warmup must be >= 0, got {self.warmup_steps}")
        for name in ("backbone_lr_start", "backbone_lr_end", "other_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.t_steps < 1:
            raise ValueError(f"t_steps must be >= 1, got {self.t_steps}")
        if self.latent_space not in ("pixel", "haar"):
            raise ValueError(f"latent_space must be pixel or haar, got {self.latent_space}")
        if self.appearance_mode not in ("concat", "mean"):
            raise ValueError(f"unknown appearance_mode {self.appearance_mode!r}")
        if len(self.channel_mults) > 3:
            raise ValueError("at most 3 resolutions (frustum pyramid depth)")
        divisor = 2 ** (len(self.channel_mults) - 1) * (2 if self.latent_space == "haar" else 1)
        if self.image_size % divisor != 0:
            raise ValueError(f"image_size {self.image_size} not divisible by {divisor}")
        if not (self.use_real_proxy or self.use_synthetic_proxy):
            raise ValueError("at least one data domain must be enabled")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        return d


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    if "channel_mults" in d:
        d["channel_mults"] = tuple(d["channel_mults"])
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return TrainConfig(**d)


def desk_train_config(**overrides) -> TrainConfig:
    """The small-footprint configuration used by the end-to-end smoke runs.

    The wider beta range compensates for the short T=100 schedule so that the
    forward process still destroys most of the signal by the final step.
    """
    base = dict(
        t_steps=100,
        beta_start=2e-3,
        beta_end=0.12,
        image_size=32,
        n_views=8,
        subset_k=4,
        grid_size=8,
        context_channels=8,
        fusion_channels=8,
        frustum_base=4,
        cond_channels=4,
        depth_samples=4,
        base_channels=16,
        heads=4,
        emb_dim=16,
        batch_size=2,
        total_steps=2000,
        checkpoint_every=500,
    )
    base.update(overrides)
    return TrainConfig(**base)


def model_channels(config: TrainConfig) -> int:
    return 3 if config.latent_space == "pixel" else 12


def default_intrinsics(config: TrainConfig) -> Intrinsics:
    s = config.image_size
    return Intrinsics(focal=float(s), cx=(s - 1) / 2, cy=(s - 1) / 2, width=s, height=s)


def build_pipeline(config: TrainConfig) -> tuple[MultiViewPipeline, NoiseSchedule]:
    """Deterministically construct the model stack and its noise schedule."""
    torch.manual_seed(config.seed)
    in_ch = model_channels(config)
    grid = build_voxel_grid(config.grid_size, config.grid_extent)
    intr = default_intrinsics(config)
    context = ViewContextEncoder(in_ch, config.context_channels, config.emb_dim)
    if config.appearance_mode == "mean":
        app_ch = config.context_channels + 1
    else:
        app_ch = config.subset_k * (config.context_channels + 1)
    fusion = GeometryFusion(
        appearance_channels=app_ch,
        occupancy_channels=4,
        geometry_channels=config.fusion_channels,
        out_channels=config.fusion_channels,
    )
    frustum = FrustumNet(
        in_channels=config.fusion_channels,
        base=config.frustum_base,
        out_channels=config.cond_channels,
        emb_dim=config.emb_dim,
    )
    backbone = JointDenoiser(
        DenoiserConfig(
            in_channels=in_ch,
            base_channels=config.base_channels,
            channel_mults=config.channel_mults,
            heads=config.heads,
            emb_dim=config.emb_dim,
            cond_channels=config.cond_channels,
            attn_max_size=config.attn_max_size,
            attention_enabled=config.attention_enabled,
        )
    )
    pipeline = MultiViewPipeline(
        context, fusion, frustum, backbone, grid, intr,
        depth_samples=config.depth_samples, appearance_mode=config.appearance_mode,
    )
    schedule = build_schedule(config.t_steps, config.beta_start, config.beta_end)
    return pipeline, schedule


def lr_at(step: int, group: str, config: TrainConfig) -> float:
    """Learning rate at an optimizer step for the named parameter group."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if group == "other":
        return config.other_lr
    if group != "backbone":
        raise ValueError(f"unknown group {group!r}")
    lo, hi = config.backbone_lr_start, config.backbone_lr_end
    if config.warmup_steps == 0 or step >= config.warmup_steps:
        return hi
    return lo + (hi - lo) * step / config.warmup_steps


def sample_view_subset(n: int, k: int, generator: torch.Generator) -> list[int]:
    """k distinct view indices, uniform without replacement."""
    if not (1 <= k <= n):
        raise ValueError(f"need 1 <= k <= N, got k={k}, N={n}")
    return torch.randperm(n, generator=generator)[:k].tolist()


def to_model_space(image: np.ndarray) -> torch.Tensor:
    """uint8 (H, W, C) image -> float32 (C, H, W) tensor in [-1, 1]."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8 or arr.ndim != 3:
        raise ValueError(f"expected uint8 (H, W, C) image, got {arr.dtype} {arr.shape}")
    x = torch.from_numpy(arr.astype(np.float32) / 255.0)
    return x.permute(2, 0, 1) * 2.0 - 1.0


def to_image(x: torch.Tensor) -> np.ndarray:
    """(C, H, W) tensor in [-1, 1] -> uint8 (H, W, C) image."""
    arr = ((x.detach().clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round()
    return arr.permute(1, 2, 0).to(torch.uint8).numpy()


@dataclass
class ViewBatch:
    """One identity's training sample: conditioning image, targets, geometry."""

    y: torch.Tensor
    views: torch.Tensor
    poses: tuple
    occupancy: SparseOccupancy


def batch_from_record(record, config: TrainConfig, grid: VoxelGrid) -> ViewBatch:
    """Precompute one identity's tensors and mesh occupancy."""
    if len(record.views) != config.n_views:
        raise ValueError(
            f"{record.identity_id} has {len(record.views)} views, config expects {config.n_views}"
        )
    first = record.views[0].image
    if first.shape[0] != config.image_size:
        raise ValueError(
            f"{record.identity_id} images are {first.shape[0]}px, config expects {config.image_size}"
        )
    views = torch.stack([to_model_space(v.image) for v in record.views])
    poses = tuple(
        pose_from_angles(v.azimuth, v.elevation, v.radius) for v in record.views
    )
    front = min(record.views, key=lambda v: abs(v.azimuth))
    y = to_model_space(front.image)
    mesh = estimate_mesh(front.image, provider=config.mesh_provider, grid_extent=config.grid_extent)
    occupancy = voxelize_mesh(mesh, grid)
    if config.latent_space == "haar":
        views = haar_encode(views)
        y = haar_encode(y.unsqueeze(0)).squeeze(0)
    return ViewBatch(y=y, views=views, poses=poses, occupancy=occupancy)


def diffusion_loss(
    batch: ViewBatch,
    pipeline: MultiViewPipeline,
    schedule: NoiseSchedule,
    generator: torch.Generator,
    shared_noise: bool = False,
) -> torch.Tensor:
    """Mean per-view L2 norm of the noise residual at a random timestep.

    `batch.views` holds the k views to denoise (callers subset beforehand).
    """
    t = int(torch.randint(1, schedule.num_steps + 1, (1,), generator=generator).item())
    k = batch.views.shape[0]
    if shared_noise:
        eps = torch.randn(
            (1, *batch.views.shape[1:]), generator=generator, dtype=batch.views.dtype
        ).expand(k, -1, -1, -1)
    else:
        eps = torch.randn(batch.views.shape, generator=generator, dtype=batch.views.dtype)
    clean = MultiViewState(views=batch.views, poses=batch.poses, t=0)
    noisy = forward_diffuse(clean, t, eps, schedule)
    eps_hat = pipeline.predict_eps(noisy.views, t, batch.poses, batch.y, batch.occupancy)
    return (eps - eps_hat).flatten(1).norm(dim=1).mean()


def _subset_batch(batch: ViewBatch, indices: Sequence[int]) -> ViewBatch:
    return ViewBatch(
        y=batch.y,
        views=batch.views[list(indices)],
        poses=tuple(batch.poses[i] for i in indices),
        occupancy=batch.occupancy,
    )


def _optimizer(pipeline: MultiViewPipeline, config: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        [
            {"params": list(pipeline.backbone_parameters()), "lr": config.backbone_lr_start},
            {"params": list(pipeline.other_parameters()), "lr": config.other_lr},
        ],
        betas=(config.adam_beta1, config.adam_beta2),
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )


def save_checkpoint(
    path: str | Path,
    pipeline: MultiViewPipeline,
    optimizer: torch.optim.AdamW,
    generator: torch.Generator,
    step: int,
    config: TrainConfig,
    schedule: NoiseSchedule,
) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in pipeline.state_dict().items():
        arrays[f"model/{name}"] = tensor.detach().cpu().numpy()
    opt_state = optimizer.state_dict()
    for pid, state in opt_state["state"].items():
        for key, val in state.items():
            arrays[f"optim/state/{pid}/{key}"] = np.asarray(
                val.detach().cpu().numpy() if torch.is_tensor(val) else val
            )
    arrays["rng/torch"] = generator.get_state().numpy()
    arrays["schedule/betas"] = schedule.betas
    cfg = config.to_dict()
    meta = {
        "format": CHECKPOINT_FORMAT,
        "step": step,
        "config": cfg,
        "config_hash": ckpt.config_hash(cfg),
        "optim_param_groups": [
            {k: v for k, v in g.items()} for g in opt_state["param_groups"]
        ],
    }
    ckpt.save_arrays(path, arrays, meta)


def _restore_optimizer(
    optimizer: torch.optim.AdamW, arrays: dict, meta: dict
) -> None:
    state: dict[int, dict] = {}
    for name, arr in arrays.items():
        if not name.startswith("optim/state/"):
            continue
        _, _, pid, key = name.split("/", 3)
        state.setdefault(int(pid), {})[key] = torch.from_numpy(arr.copy())
    optimizer.load_state_dict(
        {"state": state, "param_groups": meta["optim_param_groups"]}
    )


def load_checkpoint(path: str | Path):
    """Rebuild (pipeline, schedule, config, arrays, meta) from a checkpoint."""
    arrays, meta = ckpt.load_arrays(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {meta.get('format')!r}")
    config = config_from_dict(meta["config"])
    pipeline, schedule = build_pipeline(config)
    model_state = {
        name[len("model/") :]: torch.from_numpy(arr.copy())
        for name, arr in arrays.items()
        if name.startswith("model/")
    }
    pipeline.load_state_dict(model_state)
    return pipeline, schedule, config, arrays, meta


@dataclass
class TrainResult:
    losses: list
    checkpoint_path: Path
    pipeline: MultiViewPipeline
    schedule: NoiseSchedule


def fit(
    config: TrainConfig,
    dataset: Sequence,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Train on identity records; deterministic given config and seed.

    Writes train_log.csv and periodic checkpoints under out_dir. Aborts with
    a RuntimeError when the loss goes non-finite.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pipeline, schedule = build_pipeline(config)
    optimizer = _optimizer(pipeline, config)
    generator = torch.Generator().manual_seed(config.seed)
    start_step = 0
    if resume_from is not None:
        arrays, meta = ckpt.load_arrays(resume_from)
        if meta["config_hash"] != ckpt.config_hash(config.to_dict()):
            raise ValueError("checkpoint was written with a different config")
        pipeline.load_state_dict(
            {
                name[len("model/") :]: torch.from_numpy(arr.copy())
                for name, arr in arrays.items()
                if name.startswith("model/")
            }
        )
        _restore_optimizer(optimizer, arrays, meta)
        generator.set_state(torch.from_numpy(arrays["rng/torch"].copy()))
        start_step = int(meta["step"])
    batches = [batch_from_record(r, config, pipeline.grid) for r in dataset]
    log_path = out_dir / LOG_NAME
    log_mode = "a" if resume_from is not None and log_path.exists() else "w"
    losses: list[float] = []
    ckpt_path = out_dir / f"checkpoint_{start_step:06d}.ckpt"
    with open(log_path, log_mode, newline="") as log_file:
        writer = csv.writer(log_file)
        if log_mode == "w":
            writer.writerow(LOG_COLUMNS)
        for step in range(start_step, config.total_steps):
            t0 = time.perf_counter()
            lr_b = lr_at(step, "backbone", config)
            lr_o = lr_at(step, "other", config)
            optimizer.param_groups[0]["lr"] = lr_b
            optimizer.param_groups[1]["lr"] = lr_o
            picks = torch.randint(len(batches), (config.batch_size,), generator=generator)
            item_losses = []
            for i in picks.tolist():
                subset = sample_view_subset(config.n_views, config.subset_k, generator)
                sub = _subset_batch(batches[i], subset)
                item_losses.append(
                    diffusion_loss(sub, pipeline, schedule, generator, config.shared_noise)
                )
            loss = torch.stack(item_losses).mean()
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss {loss.item()} at step {step}; aborting"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.item()))
            writer.writerow(
                [step, f"{losses[-1]:.6f}", f"{lr_b:.3e}", f"{lr_o:.3e}",
                 f"{time.perf_counter() - t0:.4f}"]
            )
            done = step + 1
            if done % config.checkpoint_every == 0 or done == config.total_steps:
                ckpt_path = out_dir / f"checkpoint_{done:06d}.ckpt"
                save_checkpoint(
                    ckpt_path, pipeline, optimizer, generator, done, config, schedule
                )
    return TrainResult(
        losses=losses, checkpoint_path=ckpt_path, pipeline=pipeline, schedule=schedule
    )


def sample_views(
    model,
    y: torch.Tensor,
    poses: Sequence[CameraPose],
    schedule: NoiseSchedule,
    steps: int = 50,
    eta: float = 0.0,
    generator: torch.Generator | None = None,
    occupancy: SparseOccupancy | None = None,
    clip_range: tuple | None = (-1.0, 1.0),
) -> torch.Tensor:
    """Joint DDIM sampling of all requested views from Gaussian noise.

    `model` is anything with predict_eps(views, t, poses, y, occupancy);
    outputs are clipped to clip_range unless it is None.
    """
    if len(poses) == 0:
        raise ValueError("need at least one target pose")
    ladder = ddim_timesteps(schedule.num_steps, steps)
    x = torch.randn((len(poses), *y.shape), generator=generator, dtype=y.dtype)
    state = MultiViewState(views=x, poses=tuple(poses), t=ladder[0])
    for t, t_prev in zip(ladder[:-1], ladder[1:]):
        with torch.no_grad():
            eps_hat = model.predict_eps(state.views, t, state.poses, y, occupancy)
        state = ddim_step(state, eps_hat, t_prev, schedule, eta=eta, generator=generator)
    out = state.views
    if clip_range is not None:
        out = out.clamp(*clip_range)
    return out


def sample_images(
    pipeline: MultiViewPipeline,
    schedule: NoiseSchedule,
    config: TrainConfig,
    y_image: np.ndarray,
    poses: Sequence[CameraPose],
    steps: int = 50,
    eta: float = 0.0,
    generator: torch.Generator | None = None,
    occupancy: SparseOccupancy | None = None,
) -> list:
    """Sample views conditioned on a uint8 image; returns uint8 images.

    Derives mesh occupancy from the conditioning image when none is given,
    and handles the optional latent transform around the DDIM loop.
    """
    y = to_model_space(y_image)
    if occupancy is None:
        mesh = estimate_mesh(
            y_image, provider=config.mesh_provider, grid_extent=config.grid_extent
        )
        occupancy = voxelize_mesh(mesh, pipeline.grid)
    latent = config.latent_space == "haar"
    if latent:
        y = haar_encode(y.unsqueeze(0)).squeeze(0)
    out = sample_views(
        pipeline, y, poses, schedule, steps=steps, eta=eta,
        generator=generator, occupancy=occupancy,
        clip_range=None if latent else (-1.0, 1.0),
    )
    if latent:
        out = haar_decode(out).clamp(-1.0, 1.0)
    return [to_image(v) for v in out]
