"""Block-structured patch transformer used as the epsilon-prediction denoiser."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..exceptions import InvalidConfig


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 16
    patch_size: int = 4
    embed_dim: int = 32
    depth: int = 4
    num_heads: int = 2
    mlp_hidden: int = 64
    num_classes: int = 4
    T: int = 1000

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise InvalidConfig("image_size must be a multiple of patch_size")
        if self.embed_dim % self.num_heads:
            raise InvalidConfig("embed_dim must be a multiple of num_heads")

    @property
    def num_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    def param_count(self) -> int:
        """Parameter count implied by the configuration alone."""
        D, P, Hd = self.embed_dim, self.patch_dim, self.mlp_hidden
        block = 2 * 2 * D + (3 * D * D + 3 * D) + (D * D + D) + (D * Hd + Hd) + (Hd * D + D)
        embed = (P * D + D) + self.num_tokens * D + 2 * (D * D + D) + self.num_classes * D
        final = 2 * D + (D * P + P)
        return embed + self.depth * block + final


@dataclass(frozen=True)
class LayerInfo:
    layer_id: str
    block: int
    kind: str  # "qkv", "proj", "fc1", "fc2"
    shape: tuple[int, int]  # (out, in)


@dataclass
class StageRoute:
    """Per-stage structural edits applied on top of the shared dense weights.

    ``overrides`` replaces whole weight matrices by layer-id, ``head_masks``
    and ``channel_masks`` gate attention heads and MLP hidden channels of a
    block, and ``skip`` lists blocks that act as identity.
    """

    overrides: Mapping[str, torch.Tensor] = field(default_factory=dict)
    head_masks: Mapping[int, torch.Tensor] = field(default_factory=dict)
    channel_masks: Mapping[int, torch.Tensor] = field(default_factory=dict)
    skip: frozenset = frozenset()

    @property
    def is_empty(self) -> bool:
        return not (self.overrides or self.head_masks or self.channel_masks or self.skip)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, qkv_w=None, proj_w=None, head_mask=None, trace=None, prefix=""):
        B, N, C = x.shape
        H = self.num_heads
        if trace is not None:
            trace[prefix + "qkv"] = x
        qkv = F.linear(x, self.qkv.weight if qkv_w is None else qkv_w, self.qkv.bias)
        q, k, v = qkv.reshape(B, N, 3, H, C // H).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(q, k, v)
        if head_mask is not None:
            out = out * head_mask[None, :, None, None]
        out = out.transpose(1, 2).reshape(B, N, C)
        if trace is not None:
            trace[prefix + "proj"] = out
        return F.linear(out, self.proj.weight if proj_w is None else proj_w, self.proj.bias)


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, fc1_w=None, fc2_w=None, channel_mask=None, trace=None, prefix=""):
        if trace is not None:
            trace[prefix + "fc1"] = x
        h = F.gelu(F.linear(x, self.fc1.weight if fc1_w is None else fc1_w, self.fc1.bias))
        if channel_mask is not None:
            h = h * channel_mask
        if trace is not None:
            trace[prefix + "fc2"] = h
        return F.linear(h, self.fc2.weight if fc2_w is None else fc2_w, self.fc2.bias)


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, hidden: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, hidden)

    def forward(self, x, index: int, route: StageRoute | None = None, trace=None):
        p = f"blocks.{index}."
        ov = route.overrides if route is not None else {}
        head_mask = route.head_masks.get(index) if route is not None else None
        channel_mask = route.channel_masks.get(index) if route is not None else None
        x = x + self.attn(
            self.norm1(x),
            qkv_w=ov.get(p + "attn.qkv"),
            proj_w=ov.get(p + "attn.proj"),
            head_mask=head_mask,
            trace=trace,
            prefix=p + "attn.",
        )
        x = x + self.mlp(
            self.norm2(x),
            fc1_w=ov.get(p + "mlp.fc1"),
            fc2_w=ov.get(p + "mlp.fc2"),
            channel_mask=channel_mask,
            trace=trace,
            prefix=p + "mlp.",
        )
        return x


class DenoiserModel(nn.Module):
    """Class-conditional patch transformer predicting the added noise.

    Images are split into ``(image_size / patch_size)**2`` tokens. A
    sinusoidal timestep embedding (passed through a small MLP) and a class
    embedding are added to every token before the blocks.
    """

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config = config or ModelConfig()
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        D = config.embed_dim
        self.patch_embed = nn.Linear(config.patch_dim, D)
        self.pos_embed = nn.Parameter(0.02 * torch.randn(1, config.num_tokens, D))
        self.time_mlp = nn.Sequential(nn.Linear(D, D), nn.SiLU(), nn.Linear(D, D))
        self.class_embed = nn.Embedding(config.num_classes, D)
        self.blocks = nn.ModuleList(Block(D, config.num_heads, config.mlp_hidden) for _ in range(config.depth))
        self.norm = nn.LayerNorm(D)
        self.head = nn.Linear(D, config.patch_dim)
        torch.random.set_rng_state(gen_state)

    def patchify(self, x: torch.Tensor) -> torch.Tensor:
        B = x.shape[0]
        p, g = self.config.patch_size, self.config.image_size // self.config.patch_size
        return x.reshape(B, g, p, g, p).permute(0, 1, 3, 2, 4).reshape(B, g * g, p * p)

    def unpatchify(self, tokens: torch.Tensor) -> torch.Tensor:
        B = tokens.shape[0]
        p, g = self.config.patch_size, self.config.image_size // self.config.patch_size
        return tokens.reshape(B, g, g, p, p).permute(0, 1, 3, 2, 4).reshape(B, g * p, g * p)

    def embed(self, x, t, labels) -> torch.Tensor:
        cond = self.time_mlp(timestep_embedding(t, self.config.embed_dim)) + self.class_embed(labels)
        return self.patch_embed(self.patchify(x)) + self.pos_embed + cond[:, None, :]

    def forward(self, x, t, labels, route: StageRoute | None = None, trace: dict | None = None):
        """Predict noise for images ``x`` (B, H, W) at timesteps ``t`` (B,).

        ``trace``, when a dict, receives every prunable layer's input under its
        layer-id plus ``block_in.{i}`` / ``block_out.{i}`` tensors.
        """
        h = self.embed(x, t, labels)
        skip = route.skip if route is not None else frozenset()
        for i, blk in enumerate(self.blocks):
            if i in skip:
                continue
            if trace is not None:
                trace[f"block_in.{i}"] = h
            h = blk(h, i, route=route, trace=trace)
            if trace is not None:
                trace[f"block_out.{i}"] = h
        return self.unpatchify(self.head(self.norm(h)))

    def layer_registry(self) -> dict[str, LayerInfo]:
        """Every prunable linear layer keyed by its stable layer-id, in block order."""
        reg = {}
        for i, blk in enumerate(self.blocks):
            for kind, lin in (("qkv", blk.attn.qkv), ("proj", blk.attn.proj), ("fc1", blk.mlp.fc1), ("fc2", blk.mlp.fc2)):
                lid = f"blocks.{i}.{'attn' if kind in ('qkv', 'proj') else 'mlp'}.{kind}"
                reg[lid] = LayerInfo(lid, i, kind, tuple(lin.weight.shape))
        return reg

    def layer_weight(self, layer_id: str) -> torch.Tensor:
        return self.get_submodule(layer_id).weight

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())
