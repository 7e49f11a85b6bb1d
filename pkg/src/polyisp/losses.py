"""Masked reconstruction losses and evaluation metrics.

Training losses are torch (differentiable); PSNR and the CIEDE2000
color error are numpy.  The perceptual term uses a fixed, seeded random
convolutional feature stack instead of pretrained weights, which keeps
the repository weight-free while still comparing multi-scale structure.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from polyisp import color
from polyisp.imageio import Manifest, NetworkState

PERCEPTUAL_SEED = 1234
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


@dataclass
class LossWeights:
    lambda_l1: float = 1.0
    lambda_perc: float = 1.0
    lambda_ssim: float = 0.1
    lambda_illu: float = 0.1

    def __post_init__(self) -> None:
        if min(self.lambda_l1, self.lambda_perc, self.lambda_ssim, self.lambda_illu) < 0:
            raise ValueError("loss weights must be non-negative")


def _prep(y, gt, m):
    """Normalize to (B,C,H,W) tensors plus a (B,1,H,W) float mask."""
    y = torch.as_tensor(y)
    gt = torch.as_tensor(gt)
    if y.shape != gt.shape:
        raise ValueError("prediction and target shapes differ")
    if y.ndim == 3:
        y = y[None]
        gt = gt[None]
    m = torch.as_tensor(m, dtype=y.dtype)
    if m.ndim == 2:
        m = m[None]
    if m.shape != (y.shape[0], y.shape[2], y.shape[3]):
        raise ValueError("mask must be (B,H,W) matching the images")
    return y, gt, m[:, None]


def masked_l1(y, gt, m) -> Tensor:
    """sum of masked |y - gt| over (3 * number of valid pixels)."""
    y, gt, m = _prep(y, gt, m)
    denom = m.sum() * y.shape[1]
    if denom.item() == 0:
        return torch.zeros((), dtype=y.dtype)
    return ((y - gt).abs() * m).sum() / denom


_FEATURE_STACKS: dict = {}


def _feature_stack(seed: int, dtype: torch.dtype, channels_in: int = 3):
    key = (seed, dtype, channels_in)
    if key not in _FEATURE_STACKS:
        rng = np.random.default_rng(seed)
        weights = []
        chans = [channels_in, 8, 16, 32]
        for cin, cout in zip(chans, chans[1:]):
            w = rng.standard_normal((cout, cin, 3, 3)) * math.sqrt(2.0 / (cin * 9))
            weights.append(torch.as_tensor(w, dtype=dtype))
        _FEATURE_STACKS[key] = weights
    return _FEATURE_STACKS[key]


def masked_perceptual(y, gt, m, seed: int = PERCEPTUAL_SEED) -> Tensor:
    """Mean masked L1 across three random conv feature stages.

    Stage masks are min-pooled over each feature's receptive footprint,
    so a feature counts only when every contributing pixel was valid and
    the loss is exactly independent of masked-out content.
    """
    y, gt, m = _prep(y, gt, m)
    stack = _feature_stack(seed, y.dtype, y.shape[1])
    total = torch.zeros((), dtype=y.dtype)
    fy, fg, ms = y, gt, m
    for w in stack:
        fy = F.gelu(F.conv2d(fy, w, stride=2, padding=1))
        fg = F.gelu(F.conv2d(fg, w, stride=2, padding=1))
        ms = -F.max_pool2d(-ms, 3, stride=2, padding=1)
        denom = ms.sum() * fy.shape[1]
        if denom.item() > 0:
            total = total + ((fy - fg).abs() * ms).sum() / denom
    return total / len(stack)


def _gaussian_window(dtype: torch.dtype) -> Tensor:
    half = (_SSIM_WINDOW - 1) / 2
    x = torch.arange(_SSIM_WINDOW, dtype=dtype) - half
    g = torch.exp(-(x**2) / (2 * _SSIM_SIGMA**2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim_map(y, gt) -> Tensor:
    """Per-pixel SSIM over valid window positions, (B,C,H-10,W-10)."""
    y = torch.as_tensor(y)
    gt = torch.as_tensor(gt, dtype=y.dtype)
    if y.ndim == 3:
        y = y[None]
        gt = gt[None]
    if y.shape[-1] < _SSIM_WINDOW or y.shape[-2] < _SSIM_WINDOW:
        raise ValueError(f"image smaller than the {_SSIM_WINDOW}px SSIM window")
    c = y.shape[1]
    win = _gaussian_window(y.dtype).expand(c, 1, -1, -1)

    def blur(t):
        return F.conv2d(t, win, groups=c)

    mu1 = blur(y)
    mu2 = blur(gt)
    s11 = blur(y * y) - mu1 * mu1
    s22 = blur(gt * gt) - mu2 * mu2
    s12 = blur(y * gt) - mu1 * mu2
    c1 = (_SSIM_K1 * 1.0) ** 2
    c2 = (_SSIM_K2 * 1.0) ** 2
    return ((2 * mu1 * mu2 + c1) * (2 * s12 + c2)) / (
        (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    )


def ssim(y, gt) -> float:
    """Mean SSIM; dynamic range 1, 11-tap gaussian window, sigma 1.5."""
    return float(ssim_map(y, gt).mean().item())


def _window_valid(m: Tensor) -> Tensor:
    """(B,1,H,W) mask -> positions whose full SSIM window is valid."""
    return -F.max_pool2d(-m, _SSIM_WINDOW, stride=1)


def masked_ssim_loss(y, gt, m) -> Tensor:
    """Mean of (1 - SSIM map) over map positions with fully valid windows.

    Gating the map (rather than zeroing inputs) keeps window statistics
    unbiased, and requiring whole-window validity makes the loss exactly
    independent of masked-out content.
    """
    y, gt, m = _prep(y, gt, m)
    smap = ssim_map(y, gt)
    mc = _window_valid(m)
    denom = mc.sum() * smap.shape[1]
    if denom.item() == 0:
        return torch.zeros((), dtype=y.dtype)
    return ((1.0 - smap) * mc).sum() / denom


def total_loss(y, gt, m, weights: LossWeights | None = None) -> Tensor:
    w = weights or LossWeights()
    out = w.lambda_l1 * masked_l1(y, gt, m)
    if w.lambda_perc:
        out = out + w.lambda_perc * masked_perceptual(y, gt, m)
    if w.lambda_ssim:
        out = out + w.lambda_ssim * masked_ssim_loss(y, gt, m)
    return out


def total_loss_wb(y, gt, m, wb_pred, wb_gt, weights: LossWeights | None = None) -> Tensor:
    w = weights or LossWeights()
    wb_pred = torch.as_tensor(wb_pred)
    wb_gt = torch.as_tensor(wb_gt, dtype=wb_pred.dtype)
    return total_loss(y, gt, m, w) + w.lambda_illu * (wb_pred - wb_gt).abs().sum()


# --------------------------------------------------------------------------
# Metrics


def psnr(y, gt) -> float:
    """10*log10(1/MSE) for [0,1] images; identical inputs give inf."""
    y = np.asarray(y, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mse = float(np.mean((y - gt) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(1.0 / mse)


def delta_e(y, gt) -> float:
    """Mean per-pixel CIEDE2000 between two sRGB images in [0,1]."""
    lab1 = color.srgb_to_lab(np.asarray(y, dtype=np.float64))
    lab2 = color.srgb_to_lab(np.asarray(gt, dtype=np.float64))
    return float(np.mean(color.ciede2000(lab1, lab2)))


def _masked_psnr(y, gt, m) -> float:
    m3 = m[..., None].astype(np.float64)
    denom = 3.0 * m.sum()
    if denom == 0:
        return float("inf")
    mse = float((((y - gt) ** 2) * m3).sum() / denom)
    return float("inf") if mse == 0.0 else 10.0 * math.log10(1.0 / mse)


def _masked_delta_e(y, gt, m) -> float:
    if m.sum() == 0:
        return 0.0
    de = color.ciede2000(color.srgb_to_lab(y), color.srgb_to_lab(gt))
    return float(de[m > 0].mean())


def _masked_ssim(y, gt, m) -> float:
    smap = ssim_map(
        torch.as_tensor(np.moveaxis(y, -1, 0), dtype=torch.float64),
        torch.as_tensor(np.moveaxis(gt, -1, 0), dtype=torch.float64),
    ).numpy()[0]
    mc = (
        _window_valid(torch.as_tensor(m, dtype=torch.float64)[None, None])
        .numpy()[0, 0]
    )
    if mc.sum() == 0:
        return 1.0
    return float(np.moveaxis(smap, 0, -1)[mc > 0].mean())


@dataclass
class MetricReport:
    per_device: dict[int, dict[str, float]]
    n_images: dict[int, int]
    missing: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        def enc(v):
            return "inf" if isinstance(v, float) and math.isinf(v) else v

        payload = {
            "per_device": {
                str(d): {k: enc(v) for k, v in vals.items()}
                for d, vals in sorted(self.per_device.items())
            },
            "n_images": {str(d): n for d, n in sorted(self.n_images.items())},
            "missing": self.missing,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_text(self) -> str:
        cols = ["psnr", "delta_e", "ssim"]
        lines = ["device    PSNR^      dE_v     SSIM^    images"]
        for d in sorted(self.per_device):
            vals = self.per_device[d]
            nums = "  ".join(f"{vals[c]:8.4f}" for c in cols)
            lines.append(f"{d:<8}{nums}  {self.n_images[d]:8d}")
        return "\n".join(lines)

    def mean_psnr(self) -> float:
        return float(np.mean([v["psnr"] for v in self.per_device.values()]))


def metric_report(
    manifest: Manifest,
    split: str,
    state: NetworkState,
    pipeline: str = "meta-wb",
) -> MetricReport:
    """Per-device PSNR / dE / SSIM of a checkpoint on a manifest split.

    Ground truth is warped into the network's geometry with the
    manifest's flow fields; invalid pixels are excluded from all three
    metrics.
    """
    import polyisp.imageio as iio
    from polyisp.align import warp_bilinear
    from polyisp.nnisp.model import model_from_state

    model = model_from_state(state)
    model.eval()
    torch.set_num_threads(1)

    sums: dict[int, dict[str, float]] = {}
    counts: dict[int, int] = {}
    missing: list[str] = []
    for rec in manifest.split(split):
        raw_p = manifest.resolve(rec.raw_path)
        rgb_p = manifest.resolve(rec.rgb_path)
        if not raw_p.exists() or not rgb_p.exists():
            missing.append(f"{rec.scene_id}/{rec.device_id}")
            continue
        raw = iio.read_raw(raw_p)
        gt = iio.read_rgb(rgb_p).pixels.astype(np.float64)
        x4 = np.moveaxis(iio.pack_rggb(raw), -1, 0)[None]
        with torch.no_grad():
            y, _ = model(
                torch.as_tensor(x4, dtype=torch.float32),
                torch.as_tensor([raw.meta.wb_gains], dtype=torch.float32),
                torch.as_tensor([raw.meta.iso], dtype=torch.float32),
                torch.as_tensor([raw.meta.exposure_s], dtype=torch.float32),
                torch.eye(model.config.num_devices)[[rec.device_id]],
                pipeline=pipeline,
            )
        out = np.moveaxis(y[0].numpy().astype(np.float64), 0, -1)
        if rec.flow_path is not None:
            flow = iio.read_flow(manifest.resolve(rec.flow_path))
            gt_w, mask = warp_bilinear(gt, flow)
        else:
            gt_w, mask = gt, np.ones(gt.shape[:2], dtype=np.uint8)
        entry = sums.setdefault(
            rec.device_id, {"psnr": 0.0, "delta_e": 0.0, "ssim": 0.0}
        )
        entry["psnr"] += _masked_psnr(out, gt_w, mask)
        entry["delta_e"] += _masked_delta_e(out, gt_w, mask)
        entry["ssim"] += _masked_ssim(out, gt_w, mask)
        counts[rec.device_id] = counts.get(rec.device_id, 0) + 1

    per_device = {
        d: {k: v / counts[d] for k, v in vals.items()} for d, vals in sums.items()
    }
    return MetricReport(per_device=per_device, n_images=counts, missing=missing)
