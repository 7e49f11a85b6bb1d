"""The device-conditioned RAW -> sRGB network.

Wavelet encoder/decoder with single-query attention blocks, metadata
branches (white balance, illuminant estimation, ISO/exposure affine), a
device-embedding bottleneck product, and a cross-covariance global
semantics gate.  Input is a packed (B,4,H,W) patch, output a
(B,3,2H,2W) rendition in [0,1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from polyisp.nnisp.blocks import (
    ResidualBlock,
    StatsNorm,
    TokenAttention,
    dwt_haar,
    idwt_haar,
    positional_encoding,
)
from polyisp.nnisp.config import ModelConfig
from polyisp.nnisp.semantics import GlobalSemantics
from polyisp.nnisp.state import NetworkState

SOFTPLUS_ONE = math.log(math.e - 1)  # softplus(x) == 1


@dataclass
class ForwardAux:
    wb_used: Tensor  # (B, 4)
    alpha: Tensor  # (B, widths[0])
    beta: Tensor  # (B, widths[0])
    g: Tensor  # (B, bottleneck_width)


class WbBranch(nn.Module):
    """Projects the 4-vector white balance to per-level channel scales."""

    def __init__(self, out_dims: tuple[int, int]):
        super().__init__()
        self.stages = nn.ModuleList(
            nn.Sequential(nn.Linear(4, 16), nn.GELU(), nn.Linear(16, d))
            for d in out_dims
        )

    def forward(self, wb: Tensor) -> list[Tensor]:
        return [F.softplus(stage(wb)) for stage in self.stages]


class IllumBranch(nn.Module):
    """Estimates scene white balance from the RAW and the device embedding.

    Greens are pinned to 1; only the red and blue gains are predicted.
    """

    def __init__(self, embed_dim: int):
        super().__init__()
        self.convs = nn.Sequential(
            nn.Conv2d(4, 16, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.GELU(),
        )
        self.mlp = nn.Sequential(
            nn.Linear(64 + embed_dim, 64), nn.GELU(), nn.Linear(64, 2)
        )

    def forward(self, x4: Tensor, embed: Tensor) -> Tensor:
        feat = self.convs(x4).mean(dim=(2, 3))
        rb = F.softplus(self.mlp(torch.cat([feat, embed], dim=1)))
        ones = torch.ones_like(rb[:, :1])
        return torch.cat([rb[:, 0:1], ones, ones, rb[:, 1:2]], dim=1)


class IsoExpBranch(nn.Module):
    """Lifts ISO and exposure to a global affine (alpha, beta) on level 0."""

    def __init__(self, width: int):
        super().__init__()
        self.width = width
        self.lift_iso = nn.Linear(1, 32)
        self.lift_exp = nn.Linear(1, 32)
        self.mlp = nn.Sequential(nn.Linear(64, 64), nn.ReLU(), nn.Linear(64, 2 * width))

    def forward(self, iso: Tensor, exposure_s: Tensor) -> tuple[Tensor, Tensor]:
        if torch.any(iso <= 0) or torch.any(exposure_s <= 0):
            raise ValueError("iso and exposure must be positive")
        iso_n = torch.log2(iso / 100.0)[:, None]
        exp_n = torch.log2(exposure_s * 1000.0)[:, None]
        a = F.relu(self.lift_iso(iso_n))
        b = F.relu(self.lift_exp(exp_n))
        out = self.mlp(torch.cat([a, b], dim=1))
        return out[:, : self.width], out[:, self.width :]


class MultiDeviceISP(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        w = config.widths
        bw = config.bottleneck_width
        heads = config.attn_heads
        attn = config.features.attention
        cond = config.conditioning

        if cond:
            self.embedding_table = nn.Parameter(
                torch.zeros(config.num_devices, config.embed_dim)
            )
            self.embed_proj = nn.Linear(config.embed_dim, bw)
        else:
            self.embedding_table = None
            self.embed_proj = None

        self.wb_branch = (
            WbBranch((w[0], w[1])) if config.features.adapt_illuminants else None
        )
        self.illum_branch = IllumBranch(config.embed_dim) if config.learned_wb else None
        self.iso_exp_branch = IsoExpBranch(w[0]) if config.features.iso_exp else None
        self.global_semantics = (
            GlobalSemantics(config.xcit, bw) if config.features.global_semantics else None
        )

        self.in_conv = nn.Conv2d(4, w[0], 3, padding=1)
        self.encoder_blocks = nn.ModuleList(
            ResidualBlock(w[i], heads, attention=attn) for i in range(config.levels)
        )
        trans_out = list(w[1:]) + [bw]
        self.enc_transitions = nn.ModuleList(
            nn.Conv2d(4 * w[i], trans_out[i], 1) for i in range(config.levels)
        )
        self.bottleneck_blocks = nn.ModuleList(
            ResidualBlock(bw, heads, kernel=1, attention=False, mid_channels=bw)
            for _ in range(config.bottleneck_res_blocks)
        )
        dec_in = [bw] + list(w[1:][::-1])  # inputs per decoder level L-1..0
        self.dec_transitions = nn.ModuleList(
            nn.Conv2d(dec_in[config.levels - 1 - i], 4 * w[i], 1)
            for i in range(config.levels)
        )
        self.fuse = nn.ModuleList(
            nn.Conv2d(2 * w[i], w[i], 1) for i in range(config.levels)
        )
        self.decoder_blocks = nn.ModuleList(
            ResidualBlock(
                w[i],
                heads,
                attention=attn,
                query_source="style" if cond else "learned",
                embed_dim=config.embed_dim,
            )
            for i in range(config.levels)
        )
        self.head = nn.Conv2d(w[0], 12, 3, padding=1)

    # -- conditioning ------------------------------------------------------

    def embed_device(self, weights: Tensor) -> Tensor:
        """Convex device weights (B,K) -> embedding (B,embed_dim)."""
        if self.embedding_table is None:
            raise ValueError("model was built without device conditioning")
        if weights.ndim != 2 or weights.shape[1] != self.config.num_devices:
            raise ValueError(
                f"weights must be (B,{self.config.num_devices})"
            )
        return weights @ self.embedding_table

    # -- forward -----------------------------------------------------------

    def forward(
        self,
        x4: Tensor,
        wb: Tensor,
        iso: Tensor,
        exposure_s: Tensor,
        weights: Tensor,
        x_full4: Tensor | None = None,
        pipeline: str = "meta-wb",
        patch_origin: Tensor | None = None,
        stats_mode: str = "eval",
    ) -> tuple[Tensor, ForwardAux]:
        cfg = self.config
        b = x4.shape[0]
        if x4.ndim != 4 or x4.shape[1] != 4:
            raise ValueError("x4 must be (B,4,H,W)")
        block = 2 ** (cfg.levels + 1)
        if x4.shape[-2] % (block // 2) or x4.shape[-1] % (block // 2):
            raise ValueError(
                f"patch dims must be multiples of {block // 2} packed pixels"
            )
        if patch_origin is None:
            patch_origin = torch.zeros(b, 2, dtype=x4.dtype, device=x4.device)
        if x_full4 is None:
            x_full4 = x4

        embed = self.embed_device(weights) if cfg.conditioning else None

        if pipeline == "meta-wb":
            wb_used = wb
        elif pipeline == "learned-wb":
            if self.illum_branch is None:
                raise ValueError("model was built without the illuminant estimator")
            illum_embed = (
                embed
                if embed is not None
                else x4.new_zeros(b, cfg.embed_dim)
            )
            wb_used = self.illum_branch(x_full4, illum_embed)
        else:
            raise ValueError(f"unknown pipeline {pipeline!r}")

        x = x4 * wb_used[:, :, None, None]
        x_full = x_full4 * wb_used[:, :, None, None]

        if self.wb_branch is not None:
            scales = self.wb_branch(wb_used)
        else:
            scales = [x4.new_ones(b, cfg.widths[0]), x4.new_ones(b, cfg.widths[1])]
        if self.iso_exp_branch is not None:
            alpha, beta = self.iso_exp_branch(iso, exposure_s)
        else:
            alpha = x4.new_ones(b, cfg.widths[0])
            beta = x4.new_zeros(b, cfg.widths[0])

        pos = {
            dim: positional_encoding(patch_origin, dim) for dim in set(cfg.widths)
        }

        f = self.in_conv(x)
        skips = []
        for lvl in range(cfg.levels):
            if lvl == 0:
                f = f * scales[0][:, :, None, None]
                f = alpha[:, :, None, None] * f + beta[:, :, None, None]
            elif lvl == 1:
                f = f * scales[1][:, :, None, None]
            f = self.encoder_blocks[lvl](f, None, pos[cfg.widths[lvl]])
            skips.append(f)
            f = self.enc_transitions[lvl](dwt_haar(f))

        for blk in self.bottleneck_blocks:
            f = blk(f, None, None)
        if self.embed_proj is not None:
            f = f * self.embed_proj(embed)[:, :, None, None]
        if self.global_semantics is not None:
            g = self.global_semantics(x_full, mode=stats_mode)
        else:
            g = x4.new_ones(b, cfg.bottleneck_width)
        f = f * g[:, :, None, None]

        for lvl in range(cfg.levels - 1, -1, -1):
            f = idwt_haar(self.dec_transitions[lvl](f))
            f = self.fuse[lvl](torch.cat([f, skips[lvl]], dim=1))
            f = self.decoder_blocks[lvl](f, embed, pos[cfg.widths[lvl]])

        y = torch.sigmoid(F.pixel_shuffle(self.head(f), 2))
        return y, ForwardAux(wb_used=wb_used, alpha=alpha, beta=beta, g=g)


# --------------------------------------------------------------------------
# Initialization


def init_parameters(model: MultiDeviceISP, seed: int) -> None:
    """Seeded deterministic init: He fan-in for convs/FC, small-normal
    embeddings and queries, identity-leaning gates."""
    gen = torch.Generator().manual_seed(seed)
    for module in model.modules():
        if isinstance(module, (nn.Conv2d, nn.Linear)):
            fan_in = module.weight[0].numel()
            std = math.sqrt(2.0 / fan_in)
            with torch.no_grad():
                module.weight.normal_(0.0, std, generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
        elif isinstance(module, (nn.LayerNorm, StatsNorm)):
            with torch.no_grad():
                module.weight.fill_(1.0)
                module.bias.zero_()
                if isinstance(module, StatsNorm):
                    module.running_mean.zero_()
                    module.running_var.fill_(1.0)
    # residual branches start at identity (zeroed last conv, zeroed value
    # projection) so depth does not amplify activations at init
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, ResidualBlock):
                module.conv2.weight.zero_()
            if isinstance(module, TokenAttention):
                module.fc_v.weight.zero_()
        # transitions, fuse and head have no activation after them:
        # variance-preserving scale instead of He's ReLU compensation
        plain = list(model.enc_transitions) + list(model.dec_transitions) + list(
            model.fuse
        ) + [model.in_conv, model.head]
        for conv in plain:
            conv.weight.mul_(math.sqrt(0.5))
    # modulation branches start at exact identity: final projections are
    # zeroed with identity-valued biases, so early training sees a plain
    # backbone while the gates learn from zero
    with torch.no_grad():
        if model.embedding_table is not None:
            model.embedding_table.normal_(0.0, 0.02, generator=gen)
            model.embed_proj.weight.zero_()
            model.embed_proj.bias.fill_(1.0)
        for blk in list(model.encoder_blocks) + list(model.decoder_blocks):
            if blk.query is not None:
                blk.query.normal_(0.0, blk.query.numel() ** -0.5, generator=gen)
        if model.wb_branch is not None:
            for stage in model.wb_branch.stages:
                stage[-1].weight.zero_()
                stage[-1].bias.fill_(SOFTPLUS_ONE)
        if model.illum_branch is not None:
            model.illum_branch.mlp[-1].weight.zero_()
            model.illum_branch.mlp[-1].bias.fill_(SOFTPLUS_ONE)
        if model.iso_exp_branch is not None:
            model.iso_exp_branch.mlp[-1].weight.zero_()
            bias = model.iso_exp_branch.mlp[-1].bias
            bias.zero_()
            bias[: model.iso_exp_branch.width].fill_(1.0)
        if model.global_semantics is not None:
            gs = model.global_semantics
            gs.cls_token.normal_(0.0, 0.02, generator=gen)
            gs.proj.weight.zero_()
            gs.proj.bias.fill_(1.0)
            for m in gs.modules():
                if hasattr(m, "temperature"):
                    m.temperature.fill_(1.0)


def build_model(config: ModelConfig, seed: int = 0) -> MultiDeviceISP:
    model = MultiDeviceISP(config)
    init_parameters(model, seed)
    return model


# --------------------------------------------------------------------------
# NetworkState bridge


def to_network_state(
    model: MultiDeviceISP,
    rng_state: dict | None = None,
    extra_tensors: dict[str, np.ndarray] | None = None,
    extra_config: dict | None = None,
) -> NetworkState:
    tensors: dict[str, np.ndarray] = {}
    for name, p in model.named_parameters():
        tensors[f"model/{name}"] = p.detach().cpu().numpy().astype(np.float32)
    for name, buf in model.named_buffers():
        tensors[f"model/{name}"] = buf.detach().cpu().numpy().astype(np.float32)
    if extra_tensors:
        tensors.update(extra_tensors)
    config = {"model": model.config.to_dict()}
    if extra_config:
        config.update(extra_config)
    state = NetworkState(tensors=tensors, config=config, rng_state=rng_state or {})
    state.validate()
    return state


def load_into_model(model: MultiDeviceISP, state: NetworkState) -> None:
    own = dict(model.named_parameters())
    own.update(dict(model.named_buffers()))
    for name, tensor in own.items():
        key = f"model/{name}"
        if key not in state.tensors:
            raise ValueError(f"checkpoint is missing tensor {key!r}")
        src = state.tensors[key]
        if tuple(src.shape) != tuple(tensor.shape):
            raise ValueError(
                f"shape mismatch for {key!r}: {src.shape} vs {tuple(tensor.shape)}"
            )
        with torch.no_grad():
            tensor.copy_(torch.from_numpy(src.copy()))


def model_from_state(state: NetworkState) -> MultiDeviceISP:
    config = ModelConfig.from_dict(state.config["model"])
    model = MultiDeviceISP(config)
    load_into_model(model, state)
    return model


# --------------------------------------------------------------------------
# Parameter accounting


def param_breakdown(config: ModelConfig) -> dict[str, int]:
    model = MultiDeviceISP(config)
    groups: dict[str, int] = {}
    for name, p in model.named_parameters():
        top = name.split(".")[0]
        groups[top] = groups.get(top, 0) + p.numel()
    return groups


def param_count(config: ModelConfig) -> int:
    return sum(param_breakdown(config).values())
