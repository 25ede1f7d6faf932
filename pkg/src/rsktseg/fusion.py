"""Spatial and class enhancement transformers over the cost embedding.

Cost tensors are channel-last ``H x W x N_t x d``.  Every spatial operation
treats the class axis as a batch axis, and the class-axis attention uses no
positional encoding, so the whole stack is equivariant to class reordering.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn


class ConfigurationError(ValueError):
    pass


@dataclass
class FusionConfig:
    num_layers: int = 2
    d_c: int = 128
    heads: int = 4
    r1: int = 2
    r2: int = 2
    positional_embedding: bool = True
    pos_grid: int = 4

    def validate(self, grid_h: Optional[int] = None, grid_w: Optional[int] = None) -> None:
        if self.num_layers < 0:
            raise ConfigurationError("fusion.num_layers must be >= 0")
        if self.heads < 1 or self.d_c % self.heads:
            raise ConfigurationError(f"fusion.d_c={self.d_c} not divisible by fusion.heads={self.heads}")
        if self.r1 < 1 or self.r2 < 1:
            raise ConfigurationError("reduction ratios must be >= 1")
        for size in (grid_h, grid_w):
            if size is None:
                continue
            if size % self.r1 or size % self.r2:
                raise ConfigurationError(f"grid side {size} not divisible by r1={self.r1} and r2={self.r2}")


def to_maps(x: torch.Tensor) -> torch.Tensor:
    """``H x W x N x C`` -> ``N x C x H x W``."""
    return x.permute(2, 3, 0, 1)


def from_maps(x: torch.Tensor) -> torch.Tensor:
    """``N x C x H x W`` -> ``H x W x N x C``."""
    return x.permute(2, 3, 0, 1)


def _split_heads(x, heads):
    b, length, d = x.shape
    return x.reshape(b, length, heads, d // heads).transpose(1, 2)


def attend(q, k, v, heads: int):
    """Scaled dot-product attention over ``(batch, length, dim)`` inputs.

    Returns the merged output and the ``(batch, heads, Lq, Lk)`` probabilities.
    """
    b, lq, d = q.shape
    q, k, v = (_split_heads(t, heads) for t in (q, k, v))
    scores = q @ k.transpose(-2, -1) / math.sqrt(d // heads)
    probs = scores.softmax(dim=-1)
    out = (probs @ v).transpose(1, 2).reshape(b, lq, d)
    return out, probs


class CrossAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ConfigurationError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, query, key, value, return_weights: bool = False):
        out, probs = attend(self.q(query), self.k(key), self.v(value), self.heads)
        out = self.proj(out)
        return (out, probs) if return_weights else out


class SelfAttention(nn.Module):
    """Fused-qkv self-attention; numerically the cross-attention path with query == key == value."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ConfigurationError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    @classmethod
    def from_cross(cls, cross: CrossAttention) -> "SelfAttention":
        dim = cross.q.in_features
        new = cls(dim, cross.heads).to(cross.q.weight.dtype)
        with torch.no_grad():
            new.qkv.weight.copy_(torch.cat([cross.q.weight, cross.k.weight, cross.v.weight]))
            new.qkv.bias.copy_(torch.cat([cross.q.bias, cross.k.bias, cross.v.bias]))
            new.proj.load_state_dict(cross.proj.state_dict())
        return new

    def forward(self, x, return_weights: bool = False):
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        out, probs = attend(q, k, v, self.heads)
        out = self.proj(out)
        return (out, probs) if return_weights else out


class FeedForward(nn.Sequential):
    def __init__(self, dim: int, expansion: int = 4):
        super().__init__(nn.Linear(dim, dim * expansion), nn.GELU(), nn.Linear(dim * expansion, dim))


class SpatialReduce(nn.Module):
    """Concatenate cost with both guidance grids, then a stride-r1 convolution to d_c."""

    def __init__(self, cost_dim: int, guide_dim: int, d_c: int, r1: int):
        super().__init__()
        self.r1 = r1
        self.cost_dim = cost_dim
        self.conv = nn.Conv2d(cost_dim + 2 * guide_dim, d_c, kernel_size=r1, stride=r1)

    def forward(self, cost, clip_mid, dino_mid):
        H, W, N, _ = cost.shape
        if H % self.r1 or W % self.r1:
            raise ConfigurationError(f"grid {H}x{W} not divisible by r1={self.r1}")
        if clip_mid.shape[:2] != (H, W) or dino_mid.shape[:2] != (H, W):
            raise ConfigurationError("guidance grids must match the cost grid")
        guide = torch.cat([clip_mid, dino_mid], dim=-1).unsqueeze(2).expand(H, W, N, -1)
        x = torch.cat([cost, guide.to(cost.dtype)], dim=-1)
        return from_maps(self.conv(to_maps(x)))


class SETLayer(nn.Module):
    """Full-resolution queries attend to the spatially reduced tokens, per class."""

    def __init__(self, d_c: int, heads: int, positional_embedding: bool = True, pos_grid: int = 4):
        super().__init__()
        self.norm_q = nn.LayerNorm(d_c)
        self.norm_kv = nn.LayerNorm(d_c)
        self.attn = CrossAttention(d_c, heads)
        self.norm_ff = nn.LayerNorm(d_c)
        self.ffn = FeedForward(d_c)
        self.pos = nn.Parameter(0.02 * torch.randn(pos_grid, pos_grid, d_c)) if positional_embedding else None

    def _pos(self, h, w):
        pos = to_maps(self.pos.unsqueeze(2))  # 1 x d x g x g
        if pos.shape[-2:] != (h, w):
            pos = F.interpolate(pos, size=(h, w), mode="bilinear", align_corners=False)
        return pos[0].permute(1, 2, 0).reshape(1, h * w, -1)

    def forward(self, cost, reduced, return_weights: bool = False):
        H, W, N, d = cost.shape
        h, w = reduced.shape[:2]
        x = cost.permute(2, 0, 1, 3).reshape(N, H * W, d)
        kv = reduced.permute(2, 0, 1, 3).reshape(N, h * w, d)
        q_in = self.norm_q(x)
        kv_in = self.norm_kv(kv)
        k_in = kv_in
        if self.pos is not None:
            q_in = q_in + self._pos(H, W)
            k_in = kv_in + self._pos(h, w)
        attn_out, probs = self.attn(q_in, k_in, kv_in, return_weights=True)
        x = x + attn_out
        x = x + self.ffn(self.norm_ff(x))
        out = x.reshape(N, H, W, d).permute(1, 2, 0, 3)
        return (out, probs) if return_weights else out


class ClassReduce(nn.Module):
    """Append per-class text, project to d_c, average-pool space by r2."""

    def __init__(self, d_c: int, text_dim: int, r2: int):
        super().__init__()
        self.r2 = r2
        self.proj = nn.Linear(d_c + text_dim, d_c)

    def forward(self, cost, text):
        H, W, N, _ = cost.shape
        if H % self.r2 or W % self.r2:
            raise ConfigurationError(f"grid {H}x{W} not divisible by r2={self.r2}")
        if text.shape[0] != N:
            raise ConfigurationError(f"text has {text.shape[0]} classes, cost has {N}")
        x = torch.cat([cost, text.to(cost.dtype).expand(H, W, N, -1)], dim=-1)
        x = to_maps(self.proj(x))
        if self.r2 > 1:
            x = F.avg_pool2d(x, kernel_size=self.r2, stride=self.r2)
        return from_maps(x)


class CETLayer(nn.Module):
    """Self-attention across classes at each pooled cell, upsampled back onto the skip stream."""

    def __init__(self, d_c: int, heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(d_c)
        self.attn = SelfAttention(d_c, heads)
        self.norm_ff = nn.LayerNorm(d_c)
        self.ffn = FeedForward(d_c)

    def forward(self, reduced, skip, return_weights: bool = False):
        h, w, N, d = reduced.shape
        x = reduced.reshape(h * w, N, d)
        attn_out, probs = self.attn(self.norm(x), return_weights=True)
        y = x + attn_out
        y = y + self.ffn(self.norm_ff(y))
        update = (y - x).reshape(h, w, N, d)
        H, W = skip.shape[:2]
        if (h, w) != (H, W):
            update = from_maps(F.interpolate(to_maps(update), size=(H, W), mode="bilinear", align_corners=False))
        out = skip + update
        return (out, probs) if return_weights else out


class FusionLayer(nn.Module):
    def __init__(self, cfg: FusionConfig, guide_dim: int, text_dim: int):
        super().__init__()
        self.spatial_reduce = SpatialReduce(cfg.d_c, guide_dim, cfg.d_c, cfg.r1)
        self.set = SETLayer(cfg.d_c, cfg.heads, cfg.positional_embedding, cfg.pos_grid)
        self.class_reduce = ClassReduce(cfg.d_c, text_dim, cfg.r2)
        self.cet = CETLayer(cfg.d_c, cfg.heads)

    def forward(self, cost, clip_mid, dino_mid, text):
        so = self.set(cost, self.spatial_reduce(cost, clip_mid, dino_mid))
        return self.cet(self.class_reduce(so, text), so)


class Aggregator(nn.Module):
    """Input projection C_f -> d_c followed by ``num_layers`` (SET, CET) pairs."""

    def __init__(self, cfg: FusionConfig, in_dim: int, guide_dim: int, text_dim: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.input_proj = nn.Linear(in_dim, cfg.d_c)
        self.layers = nn.ModuleList(FusionLayer(cfg, guide_dim, text_dim) for _ in range(cfg.num_layers))

    def forward(self, cost, clip_mid, dino_mid, text):
        self.cfg.validate(cost.shape[0], cost.shape[1])
        x = self.input_proj(cost)
        for layer in self.layers:
            x = layer(x, clip_mid, dino_mid, text)
        return x


def attention_flops(seq_len_q: int, seq_len_kv: int, d_c: int) -> int:
    """Multiply-add count of the attention score and weighted-sum terms: ``2 * Lq * Lkv * d``."""
    for name, v in (("seq_len_q", seq_len_q), ("seq_len_kv", seq_len_kv), ("d_c", d_c)):
        if int(v) != v or v <= 0:
            raise ValueError(f"{name} must be a positive integer, got {v}")
    return 2 * int(seq_len_q) * int(seq_len_kv) * int(d_c)


def reduction_ratio(h_f: int, w_f: int, d_c: int, r: int, reading: str = "both") -> Fraction:
    """Exact FLOP ratio after shrinking the grid by ``r`` per side.

    ``reading="both"`` shrinks queries and keys (self-attention on the reduced
    grid, ratio 1/r^4); ``reading="kv"`` shrinks only keys/values
    (cross-attention from the full grid, ratio 1/r^2).
    """
    if h_f % r or w_f % r:
        raise ValueError(f"grid {h_f}x{w_f} not divisible by r={r}")
    full = h_f * w_f
    reduced = full // (r * r)
    before = attention_flops(full, full, d_c)
    if reading == "both":
        after = attention_flops(reduced, reduced, d_c)
    elif reading == "kv":
        after = attention_flops(full, reduced, d_c)
    else:
        raise ValueError(f"unknown reading {reading!r}")
    return Fraction(after, before)
