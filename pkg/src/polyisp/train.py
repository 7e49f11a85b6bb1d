"""Optimization loop, LR schedule, finetune protocol, gradient checks."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

import polyisp.imageio as iio
from polyisp.data import Batch, SceneCache, sample_batch
from polyisp.imageio import Manifest, NetworkState
from polyisp.losses import LossWeights, MetricReport, metric_report, total_loss, total_loss_wb
from polyisp.nnisp.config import ModelConfig
from polyisp.nnisp.model import (
    MultiDeviceISP,
    build_model,
    load_into_model,
    model_from_state,
    to_network_state,
)


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    seed: int = 0
    pipeline: str = "meta-wb"  # meta-wb | learned-wb
    freeze_norm_stats: bool = False
    patch_size: int = 64
    steps_per_epoch: int | None = None
    checkpoint_every: int = 0  # 0 = final only
    val_every: int = 0  # 0 = no validation metrics in the log
    num_threads: int = 1
    loss: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 2:
            raise ValueError("need at least 2 epochs so the decay phase exists")
        if self.pipeline not in ("meta-wb", "learned-wb"):
            raise ValueError(f"unknown pipeline {self.pipeline!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("loss"), dict):
            d["loss"] = LossWeights(**d["loss"])
        return TrainConfig(**d)


def lr_at(epoch: float, cfg: TrainConfig) -> float:
    """Constant for the first half, then linear decay reaching 0 at the end."""
    if epoch < 0 or epoch > cfg.epochs:
        raise ValueError("epoch out of range")
    half = cfg.epochs / 2.0
    if epoch < half:
        return cfg.lr
    return cfg.lr * (1.0 - (epoch - half) / half)


# --------------------------------------------------------------------------
# Checkpoint plumbing (model + optimizer + sampler rng)


def _checkpoint_state(
    model: MultiDeviceISP,
    optimizer: torch.optim.Adam | None,
    rng: np.random.Generator,
    train_cfg: TrainConfig,
    epoch: int,
) -> NetworkState:
    extra: dict[str, np.ndarray] = {}
    if optimizer is not None:
        named = dict(model.named_parameters())
        for name, p in named.items():
            st = optimizer.state.get(p)
            if not st:
                continue
            extra[f"optim/exp_avg/{name}"] = (
                st["exp_avg"].detach().numpy().astype(np.float32)
            )
            extra[f"optim/exp_avg_sq/{name}"] = (
                st["exp_avg_sq"].detach().numpy().astype(np.float32)
            )
            extra.setdefault(
                "optim/step",
                np.array([float(st["step"])], dtype=np.float32),
            )
    return to_network_state(
        model,
        rng_state={"numpy": rng.bit_generator.state},
        extra_tensors=extra,
        extra_config={
            "train": train_cfg.to_dict(),
            "progress": {"epoch": epoch},
            "frozen_stats": train_cfg.freeze_norm_stats,
        },
    )


def _restore_optimizer(
    optimizer: torch.optim.Adam, model: MultiDeviceISP, state: NetworkState
) -> None:
    if "optim/step" not in state.tensors:
        return
    step = float(state.tensors["optim/step"][0])
    for name, p in model.named_parameters():
        ea = state.tensors.get(f"optim/exp_avg/{name}")
        eas = state.tensors.get(f"optim/exp_avg_sq/{name}")
        if ea is None or eas is None:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(step),
            "exp_avg": torch.from_numpy(ea.copy()),
            "exp_avg_sq": torch.from_numpy(eas.copy()),
        }


def _batch_tensors(batch: Batch):
    return (
        torch.from_numpy(batch.x4),
        torch.from_numpy(batch.wb),
        torch.from_numpy(batch.iso),
        torch.from_numpy(batch.exposure_s),
        torch.from_numpy(batch.weights),
        torch.from_numpy(batch.x_full4),
        torch.from_numpy(batch.patch_origin),
    )


def train(
    manifest: Manifest,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir: str | Path,
    init: str | Path | None = None,
    resume: bool = False,
) -> Path:
    """Run the optimization loop; returns the final checkpoint path.

    init=None starts fresh; init=<checkpoint> loads weights (finetune) or,
    with resume=True, also the optimizer moments, sampler rng and epoch
    counter so training continues exactly where it stopped.
    """
    torch.set_num_threads(train_cfg.num_threads)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if train_cfg.freeze_norm_stats and init is None:
        raise ValueError("freeze_norm_stats requires initializing from a checkpoint")

    start_epoch = 0
    rng = np.random.default_rng(train_cfg.seed)
    if init is not None:
        ckpt = iio.load_checkpoint(init)
        model = model_from_state(ckpt)
        if resume:
            start_epoch = int(ckpt.config.get("progress", {}).get("epoch", 0))
            if ckpt.rng_state.get("numpy"):
                rng.bit_generator.state = ckpt.rng_state["numpy"]
    else:
        model = build_model(model_cfg, seed=train_cfg.seed)
    model.train()

    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=train_cfg.lr,
        betas=(train_cfg.beta1, train_cfg.beta2),
        eps=train_cfg.eps,
    )
    if init is not None and resume:
        _restore_optimizer(optimizer, model, ckpt)

    cache = SceneCache(manifest)
    train_recs = manifest.split("train")
    if not train_recs:
        raise ValueError("manifest has no train split")
    scenes = {r.scene_id for r in train_recs}
    first = cache.packed_raw(train_recs[0])[0]
    tiles = max(
        1,
        (first.shape[1] // (train_cfg.patch_size // 2))
        * (first.shape[2] // (train_cfg.patch_size // 2)),
    )
    steps = train_cfg.steps_per_epoch or math.ceil(
        len(scenes) * tiles / train_cfg.batch_size
    )
    stats_mode = "frozen" if train_cfg.freeze_norm_stats else "train"

    log_path = out / "train_log.jsonl"
    log_lines = []
    final_path = out / "final.mick"
    for epoch in range(start_epoch, train_cfg.epochs):
        lr = lr_at(epoch, train_cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        epoch_loss = 0.0
        for _ in range(steps):
            batch = sample_batch(
                manifest,
                train_cfg.batch_size,
                rng,
                patch_size=train_cfg.patch_size,
                cache=cache,
            )
            x4, wb, iso, exp_s, weights, x_full, origin = _batch_tensors(batch)
            y, aux = model(
                x4,
                wb,
                iso,
                exp_s,
                weights,
                x_full4=x_full,
                pipeline=train_cfg.pipeline,
                patch_origin=origin,
                stats_mode=stats_mode,
            )
            gt = torch.from_numpy(batch.gt)
            mask = torch.from_numpy(batch.mask)
            if train_cfg.pipeline == "learned-wb":
                loss = total_loss_wb(
                    y, gt, mask, aux.wb_used, torch.from_numpy(batch.wb_dg),
                    train_cfg.loss,
                )
            else:
                loss = total_loss(y, gt, mask, train_cfg.loss)
            if not torch.isfinite(loss):
                dump = _checkpoint_state(model, optimizer, rng, train_cfg, epoch)
                iio.save_checkpoint(dump, out / "diverged.mick")
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}; state dumped to "
                    f"{out / 'diverged.mick'}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.item())

        entry: dict = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": epoch_loss / steps,
        }
        if train_cfg.val_every and (epoch + 1) % train_cfg.val_every == 0:
            state = _checkpoint_state(model, optimizer, rng, train_cfg, epoch + 1)
            report = metric_report(
                manifest, "val", state, pipeline=train_cfg.pipeline
            )
            entry["val"] = {
                str(d): vals for d, vals in sorted(report.per_device.items())
            }
        log_lines.append(json.dumps(entry, sort_keys=True))
        log_path.write_text("\n".join(log_lines) + "\n")

        if train_cfg.checkpoint_every and (epoch + 1) % train_cfg.checkpoint_every == 0:
            state = _checkpoint_state(model, optimizer, rng, train_cfg, epoch + 1)
            iio.save_checkpoint(state, out / f"ckpt_epoch_{epoch + 1:04d}.mick")

    state = _checkpoint_state(model, optimizer, rng, train_cfg, train_cfg.epochs)
    iio.save_checkpoint(state, final_path)
    return final_path


def evaluate(
    manifest: Manifest,
    split: str,
    state: NetworkState,
    pipeline: str = "meta-wb",
) -> MetricReport:
    return metric_report(manifest, split, state, pipeline=pipeline)


# --------------------------------------------------------------------------
# Gradient verification


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-3)


def _buffers_of(modules) -> list[torch.Tensor]:
    bufs = []
    for m in modules:
        bufs.extend(m.buffers())
    return bufs


def _fd_max_rel_err(
    fn, leaves: list[torch.Tensor], eps: float, rng: np.random.Generator,
    n_coords: int = 24, modules=(),
) -> tuple[float, str]:
    """Central finite differences vs autograd on sampled coordinates."""
    bufs = _buffers_of(modules)

    def call() -> torch.Tensor:
        saved = [b.clone() for b in bufs]
        out = fn()
        with torch.no_grad():
            for b, s in zip(bufs, saved):
                b.copy_(s)
        return out

    for leaf in leaves:
        leaf.grad = None
    loss = call()
    loss.backward()
    worst = (0.0, "none")
    for li, leaf in enumerate(leaves):
        flat = leaf.detach().reshape(-1)
        n = flat.numel()
        idxs = (
            range(n)
            if n <= n_coords
            else sorted(rng.choice(n, size=n_coords, replace=False).tolist())
        )
        gflat = leaf.grad.reshape(-1)
        for i in idxs:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
            fp = call().item()
            with torch.no_grad():
                flat[i] = orig - eps
            fm = call().item()
            with torch.no_grad():
                flat[i] = orig
            fd = (fp - fm) / (2 * eps)
            err = _rel_err(fd, gflat[i].item())
            if err > worst[0]:
                worst = (err, f"leaf{li}[{i}] fd={fd:.3e} an={gflat[i].item():.3e}")
    return worst


def _tiny_model_config() -> ModelConfig:
    from polyisp.nnisp.config import XcitConfig

    return ModelConfig(
        widths=(8, 12, 16),
        bottleneck_width=16,
        embed_dim=16,
        attn_heads=4,
        xcit=XcitConfig(patch=4, blocks=1, dim=8, heads=2, input_size=8,
                        cls_blocks=1, ffn_ratio=2),
        num_devices=2,
    )


def grad_check(block: str, eps: float = 1e-5, seed: int = 0) -> tuple[float, str]:
    """Max relative error of analytic vs central-difference gradients for
    one named block, run in double precision on small shapes."""
    torch.set_num_threads(1)
    rng = np.random.default_rng(seed)
    t64 = torch.float64

    def rand(*shape, lo=-1.0, hi=1.0):
        return torch.tensor(
            rng.uniform(lo, hi, size=shape), dtype=t64, requires_grad=True
        )

    if block == "linear":
        lin = torch.nn.Linear(6, 4, dtype=t64)
        x = rand(3, 6)
        proj = torch.tensor(rng.standard_normal((3, 4)), dtype=t64)
        fn = lambda: (lin(x) * proj).sum()
        return _fd_max_rel_err(fn, [x, lin.weight, lin.bias], eps, rng)

    if block == "dwt":
        x = rand(1, 2, 4, 4)
        proj = torch.tensor(rng.standard_normal((1, 8, 2, 2)), dtype=t64)
        from polyisp.nnisp.blocks import dwt_haar

        fn = lambda: (dwt_haar(x) * proj).sum()
        return _fd_max_rel_err(fn, [x], eps, rng)

    if block == "wb_branch":
        from polyisp.nnisp.model import WbBranch

        m = WbBranch((6, 8)).double()
        wb = rand(2, 4, lo=0.5, hi=2.0)
        fn = lambda: sum(s.sum() * (i + 1) for i, s in enumerate(m(wb)))
        return _fd_max_rel_err(
            fn, [wb] + list(m.parameters()), eps, rng, modules=[m]
        )

    if block == "illum_branch":
        from polyisp.nnisp.model import IllumBranch

        m = IllumBranch(embed_dim=8).double()
        x = rand(2, 4, 8, 8, lo=0.0, hi=1.0)
        e = rand(2, 8)
        proj = torch.tensor(rng.standard_normal((2, 4)), dtype=t64)
        fn = lambda: (m(x, e) * proj).sum()
        return _fd_max_rel_err(
            fn, [x, e] + list(m.parameters()), eps, rng, modules=[m]
        )

    if block == "iso_exp_branch":
        from polyisp.nnisp.model import IsoExpBranch

        m = IsoExpBranch(width=6).double()
        iso = rand(2, lo=50.0, hi=800.0)
        exp_s = rand(2, lo=0.001, hi=0.1)
        proj_a = torch.tensor(rng.standard_normal((2, 6)), dtype=t64)
        proj_b = torch.tensor(rng.standard_normal((2, 6)), dtype=t64)

        def fn():
            a, b = m(iso, exp_s)
            return (a * proj_a).sum() + (b * proj_b).sum()

        return _fd_max_rel_err(
            fn, [iso, exp_s] + list(m.parameters()), eps, rng, modules=[m]
        )

    if block in ("encoder_attention", "decoder_attention"):
        from polyisp.nnisp.blocks import TokenAttention, positional_encoding

        dim, heads = 8, 2
        m = TokenAttention(dim, heads).double()
        tokens = rand(2, 4, dim)
        origin = torch.tensor([[3.0, 5.0], [0.0, 2.0]], dtype=t64)
        pos = positional_encoding(origin, dim)
        proj = torch.tensor(rng.standard_normal((2, 4, dim)), dtype=t64)
        if block == "encoder_attention":
            q = rand(2, dim)
            fn = lambda: (m(tokens, q, pos) * proj).sum()
            leaves = [tokens, q] + list(m.parameters())
        else:
            qproj = torch.nn.Linear(6, dim, dtype=t64)
            e = rand(2, 6)
            fn = lambda: (m(tokens, qproj(e), pos) * proj).sum()
            leaves = [tokens, e] + list(m.parameters()) + list(qproj.parameters())
        return _fd_max_rel_err(fn, leaves, eps, rng, modules=[m])

    if block == "residual_block":
        from polyisp.nnisp.blocks import ResidualBlock, positional_encoding

        m = ResidualBlock(8, heads=2, attention=True).double()
        x = rand(1, 8, 4, 4)
        pos = positional_encoding(torch.tensor([[1.0, 2.0]], dtype=t64), 8)
        proj = torch.tensor(rng.standard_normal((1, 8, 4, 4)), dtype=t64)
        fn = lambda: (m(x, None, pos) * proj).sum()
        return _fd_max_rel_err(
            fn, [x] + list(m.parameters()), eps, rng, modules=[m]
        )

    if block == "global_semantics":
        from polyisp.nnisp.config import XcitConfig
        from polyisp.nnisp.semantics import GlobalSemantics

        cfg = XcitConfig(patch=4, blocks=1, dim=8, heads=2, input_size=8,
                         cls_blocks=1, ffn_ratio=2)
        m = GlobalSemantics(cfg, out_dim=6).double()
        x = rand(2, 4, 8, 8, lo=0.0, hi=1.0)
        proj = torch.tensor(rng.standard_normal((2, 6)), dtype=t64)
        fn = lambda: (m(x, mode="train") * proj).sum()
        return _fd_max_rel_err(
            fn, [x] + list(m.parameters()), eps, rng, modules=[m]
        )

    if block in ("masked_l1", "masked_perceptual", "masked_ssim", "total_loss"):
        from polyisp import losses

        h = 16
        y = rand(1, 3, h, h, lo=0.1, hi=0.9)
        gt = torch.tensor(rng.uniform(0.1, 0.9, size=(1, 3, h, h)), dtype=t64)
        # structured mask: a solid valid region so SSIM windows survive
        m = torch.ones(1, h, h, dtype=t64)
        m[:, :2, :] = 0.0
        m[:, :, :3] = 0.0
        fns = {
            "masked_l1": lambda: losses.masked_l1(y, gt, m),
            "masked_perceptual": lambda: losses.masked_perceptual(y, gt, m),
            "masked_ssim": lambda: losses.masked_ssim_loss(y, gt, m),
            "total_loss": lambda: losses.total_loss(y, gt, m),
        }
        return _fd_max_rel_err(fns[block], [y], eps, rng, n_coords=48)

    if block == "forward":
        from polyisp import losses

        cfg = _tiny_model_config()
        model = build_model(cfg, seed=seed).double()
        model.train()
        x4 = rand(1, 4, 8, 8, lo=0.05, hi=0.95)
        wb = torch.tensor([[1.5, 1.0, 1.0, 1.8]], dtype=t64)
        iso = torch.tensor([200.0], dtype=t64)
        exp_s = torch.tensor([0.01], dtype=t64)
        w = torch.tensor([[0.3, 0.7]], dtype=t64)
        gt = torch.tensor(rng.uniform(0.1, 0.9, size=(1, 3, 16, 16)), dtype=t64)
        mask = torch.ones(1, 16, 16, dtype=t64)

        def fn():
            # learned-wb exercises every branch, including the estimator
            y, _ = model(x4, wb, iso, exp_s, w, pipeline="learned-wb",
                         stats_mode="train")
            return losses.total_loss(y, gt, mask)

        params = [p for p in model.parameters()]
        return _fd_max_rel_err(
            fn, [x4] + params, eps, rng, n_coords=3, modules=[model]
        )

    raise ValueError(f"unknown block {block!r}")


GRAD_CHECK_BLOCKS = [
    "linear",
    "dwt",
    "wb_branch",
    "illum_branch",
    "iso_exp_branch",
    "encoder_attention",
    "decoder_attention",
    "residual_block",
    "global_semantics",
    "masked_l1",
    "masked_perceptual",
    "masked_ssim",
    "total_loss",
    "forward",
]
