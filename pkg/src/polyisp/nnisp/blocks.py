"""Backbone building blocks: wavelet resampling, token attention, norms."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn


def dwt_haar(x: Tensor) -> Tensor:
    """Orthonormal Haar analysis: (B,C,H,W) -> (B,4C,H/2,W/2).

    Band order LL, LH, HL, HH along the channel axis.
    """
    if x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ValueError("spatial dimensions must be even")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    ll = (a + b + c + d) / 2
    lh = (a - b + c - d) / 2
    hl = (a + b - c - d) / 2
    hh = (a - b - c + d) / 2
    return torch.cat([ll, lh, hl, hh], dim=1)


def idwt_haar(x: Tensor) -> Tensor:
    """Inverse of dwt_haar: (B,4C,H,W) -> (B,C,2H,2W)."""
    if x.shape[1] % 4:
        raise ValueError("channel count must be divisible by 4")
    c4 = x.shape[1] // 4
    ll, lh, hl, hh = x[:, :c4], x[:, c4 : 2 * c4], x[:, 2 * c4 : 3 * c4], x[:, 3 * c4 :]
    a = (ll + lh + hl + hh) / 2
    b = (ll - lh + hl - hh) / 2
    c = (ll + lh - hl - hh) / 2
    d = (ll - lh - hl + hh) / 2
    out = x.new_zeros((x.shape[0], c4, x.shape[2] * 2, x.shape[3] * 2))
    out[..., 0::2, 0::2] = a
    out[..., 0::2, 1::2] = b
    out[..., 1::2, 0::2] = c
    out[..., 1::2, 1::2] = d
    return out


def positional_encoding(origin: Tensor, dim: int) -> Tensor:
    """Sinusoidal code of a patch's absolute (y, x) origin.

    origin: (B, 2) coordinates in packed-raw pixels on the full frame.
    Every token of the patch shares this code; it tells the network where
    the crop sits in the frame, not where tokens sit inside the crop.
    """
    if dim % 4:
        raise ValueError("encoding dim must be divisible by 4")
    quarter = dim // 4
    freqs = torch.exp(
        -math.log(10000.0)
        * torch.arange(quarter, dtype=origin.dtype, device=origin.device)
        / quarter
    )
    y = origin[:, 0:1] * freqs
    x = origin[:, 1:2] * freqs
    return torch.cat([torch.sin(y), torch.cos(y), torch.sin(x), torch.cos(x)], dim=1)


class TokenAttention(nn.Module):
    """Single-query multi-head attention over the spatial tokens.

    The query is one vector per sample (a learned embedding in the
    encoder, a projection of the style embedding in the decoder).  Keys
    and values come from FC layers on layer-normalized tokens, with the
    patch-origin code added to their inputs.  The attended summary gates
    the tokens multiplicatively through a residual, followed by an
    FC -> LayerNorm -> GELU residual tail.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.dim = dim
        self.heads = heads
        self.norm_kv = nn.LayerNorm(dim)
        self.fc_k = nn.Linear(dim, dim)
        self.fc_v = nn.Linear(dim, dim)
        self.fc_out = nn.Linear(dim, dim)
        self.norm_out = nn.LayerNorm(dim)

    def forward(self, tokens: Tensor, query: Tensor, pos: Tensor) -> Tensor:
        """tokens (B,N,dim), query (B,dim), pos (B,dim) -> (B,N,dim)."""
        if tokens.shape[-1] != self.dim or query.shape[-1] != self.dim:
            raise ValueError("token/query dim mismatch")
        b, n, d = tokens.shape
        h = self.heads
        dh = d // h
        kv_in = self.norm_kv(tokens) + pos[:, None, :]
        k = self.fc_k(kv_in).reshape(b, n, h, dh)
        v = self.fc_v(kv_in).reshape(b, n, h, dh)
        q = query.reshape(b, h, dh)
        scores = torch.einsum("bhd,bnhd->bhn", q, k) / math.sqrt(dh)
        attn = torch.softmax(scores, dim=-1)
        summary = torch.einsum("bhn,bnhd->bhd", attn, v).reshape(b, d)
        tokens = tokens + tokens * summary[:, None, :]
        tail = F.gelu(self.norm_out(self.fc_out(tokens)))
        return tokens + tail


class ResidualBlock(nn.Module):
    """Residual conv block with optional token attention up front.

    With attention: x + conv2(gelu(conv1(attend(x)))); without it the
    attention stage and its inner residuals drop out entirely.
    """

    def __init__(
        self,
        channels: int,
        heads: int,
        kernel: int = 3,
        attention: bool = False,
        query_source: str = "learned",  # "learned" | "style"
        embed_dim: int = 0,
        mid_channels: int | None = None,
    ):
        super().__init__()
        pad = kernel // 2
        mid = mid_channels if mid_channels is not None else max(channels // 2, 4)
        self.conv1 = nn.Conv2d(channels, mid, kernel, padding=pad)
        self.conv2 = nn.Conv2d(mid, channels, kernel, padding=pad)
        self.attention = TokenAttention(channels, heads) if attention else None
        self.query_source = query_source
        self.query = None
        self.query_proj = None
        if attention:
            if query_source == "style":
                self.query_proj = nn.Linear(embed_dim, channels)
            else:
                self.query = nn.Parameter(torch.zeros(channels))

    def forward(self, x: Tensor, embed: Tensor | None, pos: Tensor) -> Tensor:
        t = x
        if self.attention is not None:
            b, c, hh, ww = t.shape
            tokens = t.flatten(2).transpose(1, 2)
            if self.query_proj is not None:
                q = self.query_proj(embed)
            else:
                q = self.query[None, :].expand(b, -1)
            tokens = self.attention(tokens, q, pos)
            t = tokens.transpose(1, 2).reshape(b, c, hh, ww)
        t = self.conv2(F.gelu(self.conv1(t)))
        return x + t


class StatsNorm(nn.Module):
    """Per-channel normalization with running batch statistics.

    mode "train" normalizes with minibatch statistics and updates the
    running buffers; "eval" and "frozen" both normalize with the stored
    running statistics and never touch them.  "frozen" is the
    finetune-time setting that keeps pretraining statistics intact.
    """

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.register_buffer("running_mean", torch.zeros(dim))
        self.register_buffer("running_var", torch.ones(dim))
        self.mode = "eval"

    def forward(self, x: Tensor) -> Tensor:
        """x (..., dim), statistics over all leading axes."""
        if self.mode == "train":
            flat = x.reshape(-1, x.shape[-1])
            mean = flat.mean(dim=0)
            var = flat.var(dim=0, unbiased=False)
            with torch.no_grad():
                self.running_mean.mul_(1 - self.momentum).add_(
                    self.momentum * mean.detach().to(self.running_mean.dtype)
                )
                self.running_var.mul_(1 - self.momentum).add_(
                    self.momentum * var.detach().to(self.running_var.dtype)
                )
        elif self.mode in ("eval", "frozen"):
            mean = self.running_mean.to(x.dtype)
            var = self.running_var.to(x.dtype)
        else:
            raise ValueError(f"unknown stats mode {self.mode!r}")
        xn = (x - mean) / torch.sqrt(var + self.eps)
        return xn * self.weight + self.bias
