"""Small hierarchical self-attention encoder with an FPN decoder.

A laptop-scale stand-in for a Mix Transformer: overlapping strided patch
embeddings, full multi-head self-attention blocks with a depthwise-conv MLP,
and an FPN that fuses every stage. Also hosts the local/global projection
heads used by the contrastive objectives and the auxiliary decoder used for
global-local fusion.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class StageSpec:
    patch_size: int
    stride: int
    embed_dim: int
    num_heads: int
    num_blocks: int


@dataclass(frozen=True)
class NetworkConfig:
    stages: tuple = (
        StageSpec(7, 4, 32, 1, 2),
        StageSpec(3, 2, 64, 2, 2),
        StageSpec(3, 2, 128, 4, 2),
    )
    in_channels: int = 1
    num_classes: int = 2
    fpn_channels: int = 32
    local_proj_dim: int = 32
    local_proj_grid: int = 4
    global_proj_dim: int = 64
    aux_channels: int = 32
    mlp_ratio: int = 2

    def __post_init__(self):
        stages = tuple(s if isinstance(s, StageSpec) else StageSpec(*s) for s in self.stages)
        object.__setattr__(self, "stages", stages)
        if not stages:
            raise ValueError("at least one stage required")
        for s in stages:
            if min(s.patch_size, s.stride, s.embed_dim, s.num_heads, s.num_blocks) < 1:
                raise ValueError(f"all stage dimensions must be >= 1: {s}")
            if s.embed_dim % s.num_heads:
                raise ValueError(f"embed_dim {s.embed_dim} not divisible by num_heads {s.num_heads}")
        if min(self.num_classes, self.fpn_channels, self.local_proj_dim, self.local_proj_grid,
               self.global_proj_dim, self.aux_channels) < 1:
            raise ValueError("all network dimensions must be >= 1")

    @property
    def total_stride(self):
        return math.prod(s.stride for s in self.stages)

    def check_input(self, h, w):
        if h % self.total_stride or w % self.total_stride:
            raise ValueError(f"input {h}x{w} must be divisible by the total stride {self.total_stride}")

    def check_projection(self, h, w):
        if self.local_proj_grid > min(h, w) // self.total_stride:
            raise ValueError("local_proj_grid exceeds the smallest stage resolution")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "stages" in d:
            d["stages"] = tuple(StageSpec(**s) if isinstance(s, dict) else StageSpec(*s) for s in d["stages"])
        return cls(**d)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def attention_matrix(q, k, heads: int):
    """Row-stochastic attention ``softmax(Q K^T / sqrt(D / heads))`` per head.

    ``q`` and ``k`` are ``(..., N, D)``; returns ``(..., heads, N, N)``.
    """
    dim = q.shape[-1]
    if heads < 1 or dim % heads:
        raise ValueError(f"feature dim {dim} not divisible into {heads} heads")
    d = dim // heads
    qh = q.unflatten(-1, (heads, d)).transpose(-3, -2)
    kh = k.unflatten(-1, (heads, d)).transpose(-3, -2)
    return torch.softmax(qh @ kh.transpose(-2, -1) / math.sqrt(d), dim=-1)


class OverlapPatchEmbed(nn.Module):
    def __init__(self, in_ch, dim, patch_size, stride):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, dim, patch_size, stride, padding=patch_size // 2)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        x = self.proj(x)
        h, w = x.shape[-2:]
        return self.norm(x.flatten(2).transpose(1, 2)), h, w


class SelfAttention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        q = self.q(x)
        k, v = self.kv(x).chunk(2, dim=-1)
        attn = attention_matrix(q, k, self.heads)
        vh = v.unflatten(-1, (self.heads, -1)).transpose(1, 2)
        out = (attn @ vh).transpose(1, 2).flatten(2)
        return self.proj(out), attn


class MixFFN(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.dw = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, h, w):
        x = self.fc1(x)
        x = self.dw(x.transpose(1, 2).unflatten(2, (h, w))).flatten(2).transpose(1, 2)
        return self.fc2(F.gelu(x))


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = MixFFN(dim, dim * mlp_ratio)

    def forward(self, x, h, w):
        a, attn = self.attn(self.norm1(x))
        x = x + a
        x = x + self.ffn(self.norm2(x), h, w)
        return x, attn


class Stage(nn.Module):
    def __init__(self, in_ch, spec: StageSpec, mlp_ratio):
        super().__init__()
        self.embed = OverlapPatchEmbed(in_ch, spec.embed_dim, spec.patch_size, spec.stride)
        self.blocks = nn.ModuleList(Block(spec.embed_dim, spec.num_heads, mlp_ratio)
                                    for _ in range(spec.num_blocks))
        self.norm = nn.LayerNorm(spec.embed_dim)

    def forward(self, x, keep_attention=0):
        x, h, w = self.embed(x)
        maps = []
        for i, blk in enumerate(self.blocks):
            x, attn = blk(x, h, w)
            if i >= len(self.blocks) - keep_attention:
                maps.append(attn)
        x = self.norm(x)
        return x.transpose(1, 2).unflatten(2, (h, w)), maps


class FPNDecoder(nn.Module):
    def __init__(self, in_dims, channels):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(d, channels, 1) for d in in_dims)
        self.smooth = nn.ModuleList(nn.Conv2d(channels, channels, 3, padding=1) for _ in in_dims)
        self.fuse = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, feats, drop_stage=None):
        lat = [l(f) for l, f in zip(self.lateral, feats)]
        if drop_stage is not None:
            lat[drop_stage] = torch.zeros_like(lat[drop_stage])
        # top-down pathway
        for i in range(len(lat) - 2, -1, -1):
            lat[i] = lat[i] + F.interpolate(lat[i + 1], size=lat[i].shape[-2:], mode="bilinear",
                                            align_corners=False)
        size = lat[0].shape[-2:]
        out = 0
        for s, l in zip(self.smooth, lat):
            y = F.relu(s(l))
            out = out + (y if y.shape[-2:] == size else
                         F.interpolate(y, size=size, mode="bilinear", align_corners=False))
        return F.relu(self.fuse(out))


class LocalProjectionHead(nn.Module):
    """Two convolutions, pooled to an S x S grid, unit-normalised per cell."""

    def __init__(self, in_ch, dim, grid):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, in_ch, 3, padding=1)
        self.conv2 = nn.Conv2d(in_ch, dim, 1)
        self.grid = grid

    def forward(self, fused):
        x = self.conv2(F.relu(self.conv1(fused)))
        x = F.adaptive_avg_pool2d(x, self.grid)
        return F.normalize(x.permute(0, 2, 3, 1), dim=-1)


class GlobalProjectionHead(nn.Module):
    def __init__(self, in_ch, dim):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, dim, 1)

    def forward(self, fused):
        x = self.conv(fused).amax(dim=(-2, -1))
        return F.normalize(x, dim=-1)


class AuxDecoder(nn.Module):
    """Decoder for concatenated local and masked-global features."""

    def __init__(self, in_ch, hidden, num_classes):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, num_classes, 1)

    def forward(self, x):
        return self.conv2(F.relu(self.conv1(x)))


@dataclass
class ForwardOutput:
    logits: torch.Tensor
    fused_features: torch.Tensor
    stage_features: list = field(default_factory=list)
    attention_maps: list = field(default_factory=list)


class SegNet(nn.Module):
    ENCODER_PREFIX = "stages."

    def __init__(self, config: NetworkConfig = NetworkConfig()):
        super().__init__()
        self.config = config
        self.step_count = 0
        in_ch = config.in_channels
        stages = []
        for spec in config.stages:
            stages.append(Stage(in_ch, spec, config.mlp_ratio))
            in_ch = spec.embed_dim
        self.stages = nn.ModuleList(stages)
        self.decoder = FPNDecoder([s.embed_dim for s in config.stages], config.fpn_channels)
        self.seg_head = nn.Conv2d(config.fpn_channels, config.num_classes, 1)
        self.local_head = LocalProjectionHead(config.fpn_channels, config.local_proj_dim, config.local_proj_grid)
        self.global_head = GlobalProjectionHead(config.fpn_channels, config.global_proj_dim)
        self.aux_decoder = AuxDecoder(2 * config.fpn_channels, config.aux_channels, config.num_classes)

    def forward(self, image, capture_attention=False, drop_stage=None) -> ForwardOutput:
        if image.dim() == 2:
            image = image[None, None]
        elif image.dim() == 3:
            image = image[:, None]
        if image.shape[1] != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} input channels, got {image.shape[1]}")
        H, W = image.shape[-2:]
        self.config.check_input(H, W)
        x = image
        feats, maps = [], []
        last = len(self.stages) - 1
        for i, stage in enumerate(self.stages):
            x, m = stage(x, keep_attention=2 if (capture_attention and i == last) else 0)
            feats.append(x)
            maps.extend(m)
        fused = self.decoder(feats, drop_stage=drop_stage)
        logits = F.interpolate(self.seg_head(fused), size=(H, W), mode="bilinear", align_corners=False)
        return ForwardOutput(logits, fused, feats, maps)

    def features(self, image):
        return self.forward(image).fused_features

    def project_local(self, fused):
        return self.local_head(fused)

    def project_global(self, fused):
        return self.global_head(fused)

    def param_groups(self):
        enc, dec = [], []
        for name, p in self.named_parameters():
            (enc if name.startswith(self.ENCODER_PREFIX) else dec).append(p)
        return enc, dec


def forward(model: SegNet, image, capture_attention=False) -> ForwardOutput:
    return model(image, capture_attention=capture_attention)


def project_local(model: SegNet, fused):
    return model.project_local(fused)


def project_global(model: SegNet, fused):
    return model.project_global(fused)


def model_arrays(model: nn.Module, prefix=""):
    return {prefix + k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def load_arrays(model: nn.Module, arrays, prefix="", strict=True):
    state = model.state_dict()
    missing = [k for k in state if prefix + k not in arrays]
    if strict and missing:
        raise KeyError(f"checkpoint missing parameters: {missing[:5]}")
    new = {}
    for k, v in state.items():
        if prefix + k in arrays:
            a = torch.from_numpy(np.asarray(arrays[prefix + k]))
            if tuple(a.shape) != tuple(v.shape):
                raise ValueError(f"shape mismatch for {k}: {tuple(a.shape)} vs {tuple(v.shape)}")
            new[k] = a.to(v.dtype)
        else:
            new[k] = v
    model.load_state_dict(new)


def load_pretrained(model: nn.Module, arrays) -> list:
    """Copy every array whose name and shape match a model parameter.

    Returns the loaded names; anything else is silently skipped.
    """
    state = model.state_dict()
    loaded = []
    with torch.no_grad():
        for name, arr in arrays.items():
            if name in state and tuple(np.shape(arr)) == tuple(state[name].shape):
                state[name].copy_(torch.as_tensor(np.asarray(arr)))
                loaded.append(name)
    return loaded
