"""Joint multi-view noise predictor.

A small UNet denoises k posed views in one forward pass. Views exchange
information only inside joint attention blocks, where the flattened spatial
tokens of every view plus the tokens of the clean conditioning image form a
single sequence. The conditioning image contributes keys and values but its
own outputs are discarded, and no positional or view-id information is ever
added to token features, which keeps the whole model equivariant to view
order. Frustum conditioning enters by channel concatenation at every stage
whose resolution matches a pyramid level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .cameras import CameraPose
from .conditioning import FrustumVolume, pose_embedding, sinusoidal_embedding


def _norm_groups(channels: int) -> int:
    for g in range(min(8, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


class ResBlock2d(nn.Module):
    """GroupNorm residual block with a channelwise embedding shift.

    The second conv starts at zero so a fresh block is the identity.
    """

    def __init__(self, channels: int, emb_channels: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_norm_groups(channels), channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.emb = nn.Linear(emb_channels, channels)
        self.norm2 = nn.GroupNorm(_norm_groups(channels), channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x))) + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


@dataclass(frozen=True)
class ViewTokenSequence:
    """Flattened spatial tokens of several views plus the conditioning image.

    view_ids tags each token's source (-1 marks the conditioning image) and
    positions holds its (row, col); both are bookkeeping only and are never
    mixed into the token features.
    """

    tokens: torch.Tensor     # (S, C)
    view_ids: torch.Tensor   # (S,) long
    positions: torch.Tensor  # (S, 2) long

    def __post_init__(self) -> None:
        s = self.tokens.shape[0]
        if self.view_ids.shape != (s,) or self.positions.shape != (s, 2):
            raise ValueError(
                f"inconsistent tags: {s} tokens, {tuple(self.view_ids.shape)} ids, "
                f"{tuple(self.positions.shape)} positions"
            )


def tokens_from_maps(maps: torch.Tensor, view_ids: Sequence[int]) -> ViewTokenSequence:
    """(k, C, H, W) feature maps -> one token sequence in view order."""
    if maps.ndim != 4:
        raise ValueError(f"expected (k, C, H, W) maps, got {tuple(maps.shape)}")
    k, c, h, w = maps.shape
    if len(view_ids) != k:
        raise ValueError(f"{k} maps but {len(view_ids)} view ids")
    tokens = maps.permute(0, 2, 3, 1).reshape(k * h * w, c)
    ids = torch.as_tensor(list(view_ids), dtype=torch.long).repeat_interleave(h * w)
    rows = torch.arange(h).repeat_interleave(w)
    cols = torch.arange(w).repeat(h)
    positions = torch.stack([rows, cols], dim=1).repeat(k, 1)
    return ViewTokenSequence(tokens=tokens, view_ids=ids, positions=positions)


def maps_from_tokens(seq: ViewTokenSequence, height: int, width: int) -> torch.Tensor:
    """Invert tokens_from_maps for the non-negative view ids, in id order."""
    ids = sorted(set(seq.view_ids.tolist()) - {-1})
    out = []
    for vid in ids:
        sel = seq.tokens[seq.view_ids == vid]
        if sel.shape[0] != height * width:
            raise ValueError(
                f"view {vid} has {sel.shape[0]} tokens, expected {height * width}"
            )
        out.append(sel.reshape(height, width, -1).permute(2, 0, 1))
    return torch.stack(out)


class JointAttention(nn.Module):
    """Multi-head scaled dot-product self-attention over a token sequence."""

    def __init__(self, channels: int, heads: int = 4):
        super().__init__()
        if channels % heads != 0:
            raise ValueError(f"{channels} channels not divisible by {heads} heads")
        self.heads = heads
        self.qkv = nn.Linear(channels, 3 * channels)
        self.out = nn.Linear(channels, channels)

    def attend(self, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(S, C) -> (output (S, C), softmax weights (heads, S, S))."""
        if tokens.ndim != 2 or tokens.shape[0] == 0:
            raise ValueError(f"expected nonempty (S, C) tokens, got {tuple(tokens.shape)}")
        s, c = tokens.shape
        d = c // self.heads
        q, k, v = self.qkv(tokens).split(c, dim=1)
        q = q.reshape(s, self.heads, d).permute(1, 0, 2)
        k = k.reshape(s, self.heads, d).permute(1, 0, 2)
        v = v.reshape(s, self.heads, d).permute(1, 0, 2)
        logits = q @ k.transpose(1, 2) / math.sqrt(d)
        weights = torch.softmax(logits, dim=-1)
        mixed = (weights @ v).permute(1, 0, 2).reshape(s, c)
        return self.out(mixed), weights

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.attend(tokens)[0]

    def weights(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.attend(tokens)[1]


def joint_view_attention(seq: ViewTokenSequence, attn: JointAttention) -> ViewTokenSequence:
    """Apply joint attention to a token sequence; tags pass through."""
    return ViewTokenSequence(
        tokens=attn(seq.tokens), view_ids=seq.view_ids, positions=seq.positions
    )


class CondInject(nn.Module):
    """Concatenate a depth-averaged frustum level into a stage's features."""

    def __init__(self, stage_channels: int, cond_channels: int):
        super().__init__()
        self.cond_proj = nn.Conv2d(cond_channels, stage_channels, 1)
        self.merge = nn.Conv2d(2 * stage_channels, stage_channels, 1)

    def forward(self, stage: torch.Tensor, levels: torch.Tensor) -> torch.Tensor:
        """stage (k, C, H, W) + levels (k, C_f, D, H, W) -> (k, C, H, W)."""
        if levels.shape[-2:] != stage.shape[-2:]:
            raise ValueError(
                f"level resolution {tuple(levels.shape[-2:])} != stage {tuple(stage.shape[-2:])}"
            )
        cond = self.cond_proj(levels.mean(dim=2))
        return self.merge(torch.cat([stage, cond], dim=1))


def inject_condition(
    stage: torch.Tensor, volumes: Sequence[FrustumVolume], inject: CondInject
) -> torch.Tensor:
    """Inject each view's pyramid level matching the stage resolution.

    Raises if any volume lacks a level at the stage's (H, W).
    """
    h, w = stage.shape[-2:]
    levels = torch.stack([vol.level_for(h, w) for vol in volumes])
    return inject(stage, levels)


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 3
    base_channels: int = 32
    channel_mults: tuple = (1, 2, 3)
    heads: int = 4
    emb_dim: int = 32
    cond_channels: int = 16
    attn_max_size: int = 16
    attention_enabled: bool = True

    def __post_init__(self) -> None:
        if len(self.channel_mults) < 2:
            raise ValueError("need at least 2 resolutions")
        if self.emb_dim % 4 != 0:
            raise ValueError(f"emb_dim must be divisible by 4, got {self.emb_dim}")


class JointDenoiser(nn.Module):
    """UNet noise predictor over k views with joint cross-view attention.

    Per resolution: frustum injection, a residual block, and (at resolutions
    of attn_max_size or below) one joint attention block whose token sequence
    spans all views plus the conditioning image. The conditioning image runs
    through the same convolutional path with a zero condition, a t=0
    embedding and a zero pose embedding; it only ever contributes attention
    context. With attention_enabled=False the attention blocks are skipped
    entirely and views are processed independently.
    """

    def __init__(self, config: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.config = config
        chs = [config.base_channels * m for m in config.channel_mults]
        emb_total = 2 * config.emb_dim
        self.stem = nn.Conv2d(config.in_channels, chs[0], 3, padding=1)
        self.injects = nn.ModuleList(
            CondInject(c, config.cond_channels) for c in chs
        )
        self.enc_res = nn.ModuleList(ResBlock2d(c, emb_total) for c in chs)
        self.attns = nn.ModuleList(JointAttention(c, config.heads) for c in chs)
        self.downs = nn.ModuleList(
            nn.Conv2d(chs[i], chs[i + 1], 3, stride=2, padding=1)
            for i in range(len(chs) - 1)
        )
        self.mid = ResBlock2d(chs[-1], emb_total)
        self.up_convs = nn.ModuleList(
            nn.Conv2d(chs[i + 1] + chs[i], chs[i], 3, padding=1)
            for i in reversed(range(len(chs) - 1))
        )
        self.dec_res = nn.ModuleList(
            ResBlock2d(chs[i], emb_total) for i in reversed(range(len(chs) - 1))
        )
        self.out_norm = nn.GroupNorm(_norm_groups(chs[0]), chs[0])
        self.out_conv = nn.Conv2d(chs[0], config.in_channels, 3, padding=1)

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _embeddings(
        self, t: int, poses: Sequence[CameraPose], dtype: torch.dtype
    ) -> tuple[torch.Tensor, torch.Tensor]:
        d = self.config.emb_dim
        t_emb = sinusoidal_embedding(float(t), d)
        emb_v = torch.stack([torch.cat([t_emb, pose_embedding(p, d)]) for p in poses])
        emb_y = torch.cat([sinusoidal_embedding(0.0, d), torch.zeros(d, dtype=torch.float64)])
        return emb_v.to(dtype), emb_y.unsqueeze(0).to(dtype)

    def _attention(self, h_v: torch.Tensor, h_y: torch.Tensor | None, attn: JointAttention) -> torch.Tensor:
        k, _, hh, ww = h_v.shape
        maps = h_v if h_y is None else torch.cat([h_v, h_y], dim=0)
        ids = list(range(k)) + ([-1] if h_y is not None else [])
        seq = tokens_from_maps(maps, ids)
        out = joint_view_attention(seq, attn)
        return maps_from_tokens(out, hh, ww)[:k]

    def forward(
        self,
        views: torch.Tensor,
        y: torch.Tensor,
        volumes: Sequence[FrustumVolume],
        t: int,
        poses: Sequence[CameraPose],
    ) -> torch.Tensor:
        cfg = self.config
        if views.ndim != 4 or views.shape[0] < 1:
            raise ValueError(f"expected (k>=1, C, H, W) views, got {tuple(views.shape)}")
        k = views.shape[0]
        if y.shape != views.shape[1:]:
            raise ValueError(
                f"conditioning image {tuple(y.shape)} does not match views {tuple(views.shape[1:])}"
            )
        if len(volumes) != k:
            raise ValueError(f"{k} views but {len(volumes)} frustum volumes")
        if len(poses) != k:
            raise ValueError(f"{k} views but {len(poses)} poses")
        if t < 0:
            raise ValueError(f"diffusion time must be >= 0, got {t}")
        dtype = views.dtype
        emb_v, emb_y = self._embeddings(t, poses, dtype)
        use_y = cfg.attention_enabled
        h_v = self.stem(views)
        h_y = self.stem(y.unsqueeze(0)) if use_y else None
        zero_level = None
        skips = []
        for i in range(len(self.enc_res)):
            h_v = inject_condition(h_v, volumes, self.injects[i])
            if use_y:
                zero_level = torch.zeros(
                    1, cfg.cond_channels, 1, *h_y.shape[-2:], dtype=dtype
                )
                h_y = self.injects[i](h_y, zero_level)
            h_v = self.enc_res[i](h_v, emb_v)
            if use_y:
                h_y = self.enc_res[i](h_y, emb_y)
            if cfg.attention_enabled and max(h_v.shape[-2:]) <= cfg.attn_max_size:
                h_v = h_v + self._attention(h_v, h_y, self.attns[i])
            if i < len(self.downs):
                skips.append(h_v)
                h_v = self.downs[i](h_v)
                if use_y:
                    h_y = self.downs[i](h_y)
        h_v = self.mid(h_v, emb_v)
        for j in range(len(self.up_convs)):
            skip = skips.pop()
            h_v = F.interpolate(h_v, size=skip.shape[-2:], mode="nearest")
            h_v = self.up_convs[j](torch.cat([h_v, skip], dim=1))
            h_v = self.dec_res[j](h_v, emb_v)
        return self.out_conv(F.silu(self.out_norm(h_v)))


def predict_noise(
    model: JointDenoiser,
    views: torch.Tensor,
    y: torch.Tensor,
    volumes: Sequence[FrustumVolume],
    t: int,
    poses: Sequence[CameraPose],
) -> torch.Tensor:
    """Joint noise prediction for k views; output shaped like the input views."""
    return model(views, y, volumes, t, poses)
