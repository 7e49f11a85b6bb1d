"""Global scene summary via cross-covariance attention on the full frame.

A downsampled copy of the whole packed RAW is patch-embedded and run
through attention blocks that attend over the feature dimension (linear
in token count), then a CLS token gathers the sequence through class
attention and is projected to a bottleneck-width gating vector.  All
normalization layers keep running batch statistics so they can be frozen
during finetuning.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from polyisp.nnisp.blocks import StatsNorm
from polyisp.nnisp.config import XcitConfig


class CrossCovarianceAttention(nn.Module):
    """Attention over channels: per-head softmax of normalized K^T Q."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        h = self.heads
        dh = d // h
        qkv = self.qkv(x).reshape(b, n, 3, h, dh).permute(2, 0, 3, 4, 1)
        q, k, v = qkv[0], qkv[1], qkv[2]  # (b, h, dh, n)
        q = F.normalize(q, dim=-1)
        k = F.normalize(k, dim=-1)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.temperature, dim=-1)
        out = (attn @ v).reshape(b, d, n).transpose(1, 2)
        return self.proj(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, ratio: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * ratio)
        self.fc2 = nn.Linear(dim * ratio, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class XcaBlock(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_ratio: int):
        super().__init__()
        self.norm1 = StatsNorm(dim)
        self.attn = CrossCovarianceAttention(dim, heads)
        self.norm2 = StatsNorm(dim)
        self.ffn = FeedForward(dim, ffn_ratio)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class ClassAttention(nn.Module):
    """Standard attention where only the CLS token queries the sequence."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        """x (B, 1+N, dim) with CLS first; returns the CLS update (B,1,dim)."""
        b, n, d = x.shape
        h = self.heads
        dh = d // h
        q = self.q(x[:, :1]).reshape(b, 1, h, dh).transpose(1, 2)
        k = self.k(x).reshape(b, n, h, dh).transpose(1, 2)
        v = self.v(x).reshape(b, n, h, dh).transpose(1, 2)
        attn = torch.softmax((q @ k.transpose(-2, -1)) / math.sqrt(dh), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, 1, d)
        return self.proj(out)


class ClsBlock(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_ratio: int):
        super().__init__()
        self.norm1 = StatsNorm(dim)
        self.attn = ClassAttention(dim, heads)
        self.norm2 = StatsNorm(dim)
        self.ffn = FeedForward(dim, ffn_ratio)

    def forward(self, cls: Tensor, tokens: Tensor) -> Tensor:
        joined = torch.cat([cls, tokens], dim=1)
        cls = cls + self.attn(self.norm1(joined))
        return cls + self.ffn(self.norm2(cls))


class GlobalSemantics(nn.Module):
    def __init__(self, cfg: XcitConfig, out_dim: int):
        super().__init__()
        self.cfg = cfg
        steps = int(math.log2(cfg.patch))
        if 2**steps != cfg.patch:
            raise ValueError("xcit patch must be a power of two")
        chans = [4] + [max(cfg.dim >> (steps - 1 - i), 4) for i in range(steps)]
        stem = []
        for cin, cout in zip(chans, chans[1:]):
            stem += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.GELU()]
        self.stem = nn.Sequential(*stem[:-1])
        self.blocks = nn.ModuleList(
            XcaBlock(cfg.dim, cfg.heads, cfg.ffn_ratio) for _ in range(cfg.blocks)
        )
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.dim))
        self.cls_blocks = nn.ModuleList(
            ClsBlock(cfg.dim, cfg.heads, cfg.ffn_ratio) for _ in range(cfg.cls_blocks)
        )
        self.final_norm = StatsNorm(cfg.dim)
        self.proj = nn.Linear(cfg.dim, out_dim)

    def set_stats_mode(self, mode: str) -> None:
        for m in self.modules():
            if isinstance(m, StatsNorm):
                m.mode = mode

    def forward(self, x_full: Tensor, mode: str = "eval") -> Tensor:
        """x_full (B,4,H,W) packed RAW -> gating vector (B, out_dim)."""
        if x_full.ndim != 4 or x_full.shape[1] != 4:
            raise ValueError("expected a packed (B,4,H,W) input")
        self.set_stats_mode(mode)
        s = self.cfg.input_size
        if x_full.shape[-2:] != (s, s):
            x_full = F.interpolate(
                x_full, size=(s, s), mode="bilinear", align_corners=False
            )
        t = self.stem(x_full)
        tokens = t.flatten(2).transpose(1, 2)
        for blk in self.blocks:
            tokens = blk(tokens)
        cls = self.cls_token.expand(tokens.shape[0], -1, -1).to(tokens.dtype)
        for blk in self.cls_blocks:
            cls = blk(cls, tokens)
        return self.proj(self.final_norm(cls[:, 0]))
