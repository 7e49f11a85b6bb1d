"""Synthetic dataset construction, patch extraction, and batch sampling.

Scenes are procedurally generated (or read from a directory), unprocessed
into RAW with the inverse reference ISP, and rendered once per device
preset.  Each target rendition is stored deliberately misaligned by a
smooth random flow whose exact inverse is recorded, so training sees the
same warping problem the loss masking is built for while ground truth
stays exactly known.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

import polyisp.imageio as iio
from polyisp.align import warp_bilinear
from polyisp.imageio import FlowField, Manifest, ManifestRecord, RawMeta, RgbImage
from polyisp.refisp import (
    DevicePreset,
    NoiseParams,
    inverse_isp,
    make_device_styles,
    render_device,
    save_presets,
)


@dataclass
class SynthConfig:
    n_scenes: int = 60
    scene_size: int = 128
    k_devices: int = 3
    source_dir: str | None = None
    misalign_px: float = 3.0
    noise: NoiseParams = field(default_factory=NoiseParams)
    wb_red: tuple[float, float] = (1.2, 2.2)
    wb_blue: tuple[float, float] = (1.2, 2.2)
    splits: dict[str, float] = field(
        default_factory=lambda: {"train": 0.8, "val": 0.1, "test": 0.1}
    )
    seed: int = 0
    style_seed: int = 0

    def __post_init__(self) -> None:
        if self.k_devices < 2:
            raise ValueError("need at least two devices")
        if abs(sum(self.splits.values()) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        if self.scene_size % 2:
            raise ValueError("scene_size must be even")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "SynthConfig":
        d = dict(d)
        if "noise" in d and isinstance(d["noise"], dict):
            d["noise"] = NoiseParams(**d["noise"])
        if "wb_red" in d:
            d["wb_red"] = tuple(d["wb_red"])
        if "wb_blue" in d:
            d["wb_blue"] = tuple(d["wb_blue"])
        return SynthConfig(**d)


# --------------------------------------------------------------------------
# Procedural scenes


def _upsample_bilinear(grid: np.ndarray, size: int) -> np.ndarray:
    """(g,g) -> (size,size) separable bilinear, endpoints aligned."""
    g = grid.shape[0]
    coords = np.linspace(0.0, g - 1.0, size)
    i0 = np.floor(coords).astype(int)
    i1 = np.minimum(i0 + 1, g - 1)
    frac = coords - i0
    rows = grid[i0] * (1 - frac)[:, None] + grid[i1] * frac[:, None]
    cols = rows[:, i0] * (1 - frac)[None, :] + rows[:, i1] * frac[None, :]
    return cols


def _value_noise(rng: np.random.Generator, size: int) -> np.ndarray:
    out = np.zeros((size, size))
    amp = 1.0
    for g in (4, 8, 16):
        if g >= size:
            break
        out += amp * _upsample_bilinear(rng.standard_normal((g, g)), size)
        amp *= 0.55
    out -= out.mean()
    peak = np.abs(out).max()
    return out / peak if peak > 0 else out


def _box_blur(img: np.ndarray, passes: int) -> np.ndarray:
    for _ in range(passes):
        p = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
        img = (
            p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:]
            + 4 * p[1:-1, 1:-1]
        ) / 8
    return img


def generate_scene(size: int, rng: np.random.Generator) -> np.ndarray:
    """One procedural sRGB scene: gradients + band-limited texture +
    occasional soft color patches.

    Content is kept demosaic-friendly and desaturated enough that the
    inverse ISP stays inside the sensor gamut for every sampled style.
    """
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.zeros((size, size, 3))
    for c in range(3):
        fx, fy = rng.uniform(0.4, 1.8, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.15, 0.3)
        img[..., c] = 0.5 + amp * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    tex = _value_noise(rng, size)
    img += rng.uniform(0.08, 0.2) * tex[..., None]
    if rng.random() < 0.6:
        cells = rng.integers(2, 5)
        cw = size // (2 * cells)
        y0 = int(rng.integers(0, size - cells * cw))
        x0 = int(rng.integers(0, size - cells * cw))
        colors = rng.uniform(0.25, 0.75, size=(cells, cells, 3))
        for i in range(cells):
            for j in range(cells):
                img[y0 + i * cw : y0 + (i + 1) * cw,
                    x0 + j * cw : x0 + (j + 1) * cw] = colors[i, j]
        img = _box_blur(img, 2)
    luma = img @ np.array([0.2126, 0.7152, 0.0722])
    img = luma[..., None] + 0.72 * (img - luma[..., None])
    return np.clip(img, 0.04, 0.92)


def _load_source_scenes(directory: str, size: int) -> list[np.ndarray]:
    paths = sorted(Path(directory).glob("*.ppm"))
    if not paths:
        raise ValueError(f"no .ppm source images found in {directory}")
    scenes = []
    for p in paths:
        px = iio.read_rgb(p).pixels.astype(np.float64)
        h, w = px.shape[:2]
        if h < size or w < size:
            raise ValueError(f"source image {p} smaller than scene_size {size}")
        scenes.append(np.clip(px[:size, :size], 0.04, 0.96))
    return scenes


# --------------------------------------------------------------------------
# Misalignment flows


def smooth_random_flow(
    rng: np.random.Generator, size: int, max_px: float
) -> FlowField:
    """Smooth random displacement field with peak magnitude max_px."""
    u = _value_noise(rng, size)
    v = _value_noise(rng, size)
    mag = np.hypot(u, v).max()
    if mag > 0:
        scale = max_px / mag
        u, v = u * scale, v * scale
    return FlowField(u=u.astype(np.float32), v=v.astype(np.float32))


def invert_flow(flow: FlowField, iterations: int = 25) -> FlowField:
    """Fixed-point inverse: returns F with F(p) + flow(p + F(p)) ~= 0."""
    from polyisp.align import _bilinear_gather

    h, w = flow.u.shape
    yy, xx = np.mgrid[0:h, 0:w]
    fu = -flow.u.astype(np.float64)
    fv = -flow.v.astype(np.float64)
    for _ in range(iterations):
        qx = np.clip(xx + fu, 0, w - 1)
        qy = np.clip(yy + fv, 0, h - 1)
        fu = -_bilinear_gather(flow.u.astype(np.float64), qx, qy)
        fv = -_bilinear_gather(flow.v.astype(np.float64), qx, qy)
    return FlowField(u=fu.astype(np.float32), v=fv.astype(np.float32))


# --------------------------------------------------------------------------
# Dataset build


def _split_of(index: int, n: int, splits: dict[str, float]) -> str:
    n_train = int(round(splits.get("train", 0.0) * n))
    n_val = int(round(splits.get("val", 0.0) * n))
    if index < n_train:
        return "train"
    if index < n_train + n_val:
        return "val"
    return "test"


def build_synth_dataset(cfg: SynthConfig, out_dir: str | Path) -> Manifest:
    """Write RAWs, per-device ground truths, flows, presets and manifest."""
    out = Path(out_dir)
    (out / "raw").mkdir(parents=True, exist_ok=True)
    (out / "rgb").mkdir(exist_ok=True)
    (out / "flow").mkdir(exist_ok=True)

    presets = make_device_styles(cfg.k_devices, seed=cfg.style_seed)
    save_presets(presets, out / "presets.json")
    (out / "synth_config.json").write_text(
        json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"
    )

    rng = np.random.default_rng(cfg.seed)
    if cfg.source_dir is not None:
        scenes = _load_source_scenes(cfg.source_dir, cfg.scene_size)
        n = len(scenes)
    else:
        n = cfg.n_scenes
        scenes = None
    if n == 0:
        raise ValueError("no scenes to synthesize")

    records: list[ManifestRecord] = []
    for idx in range(n):
        scene_rng = np.random.default_rng(rng.integers(0, 2**63))
        srgb = (
            scenes[idx]
            if scenes is not None
            else generate_scene(cfg.scene_size, scene_rng)
        )
        scene_id = f"scene_{idx:04d}"
        split = _split_of(idx, n, cfg.splits)

        wb = (
            float(scene_rng.uniform(*cfg.wb_red)),
            1.0,
            1.0,
            float(scene_rng.uniform(*cfg.wb_blue)),
        )
        meta = RawMeta(
            black_level=64,
            white_level=1023,
            wb_gains=wb,
            iso=float(np.round(2 ** scene_rng.uniform(np.log2(100), np.log2(1600)))),
            exposure_s=float(2 ** scene_rng.uniform(np.log2(1e-3), np.log2(0.1))),
            device_id=0,
        )
        raw = inverse_isp(
            RgbImage(pixels=srgb.astype(np.float32), colorspace="srgb"),
            presets[0].style,
            meta,
            noise=cfg.noise,
            seed=int(scene_rng.integers(0, 2**31)),
        )
        raw_rel = f"raw/{scene_id}.pgm"
        iio.write_raw(raw, out / raw_rel)

        for preset in presets:
            aligned = render_device(raw, preset).pixels.astype(np.float64)
            if preset.device_id == 0 or cfg.misalign_px == 0:
                flow = FlowField(
                    u=np.zeros_like(aligned[..., 0], dtype=np.float32),
                    v=np.zeros_like(aligned[..., 0], dtype=np.float32),
                )
                stored = aligned
            else:
                shift = smooth_random_flow(
                    scene_rng, cfg.scene_size, cfg.misalign_px
                )
                stored, _ = warp_bilinear(aligned, shift)
                flow = invert_flow(shift)
            rgb_rel = f"rgb/{scene_id}_d{preset.device_id}.ppm"
            flow_rel = f"flow/{scene_id}_d{preset.device_id}.flo"
            iio.write_rgb(
                RgbImage(pixels=stored.astype(np.float32), colorspace="srgb"),
                out / rgb_rel,
            )
            iio.write_flow(flow, out / flow_rel)
            wb_dg = tuple(g * b for g, b in zip(wb, preset.wb_bias))
            records.append(
                ManifestRecord(
                    scene_id=scene_id,
                    device_id=preset.device_id,
                    raw_path=raw_rel,
                    rgb_path=rgb_rel,
                    flow_path=flow_rel,
                    split=split,
                    wb_dg=wb_dg,
                )
            )

    manifest = Manifest(records=records, root=out)
    iio.save_manifest(manifest, out / "manifest.jsonl")
    return manifest


# --------------------------------------------------------------------------
# Patches


def extract_patches(image: np.ndarray, patch_size: int, crop=None):
    """Non-overlapping row-major tiles with absolute (y, x) coordinates.

    crop is an optional (height, width) region anchored at the origin;
    it must be an exact multiple of patch_size.
    """
    h, w = image.shape[:2]
    ch, cw = crop if crop is not None else (h, w)
    if ch > h or cw > w:
        raise ValueError("crop exceeds image dimensions")
    if ch % patch_size or cw % patch_size:
        raise ValueError("crop is not divisible by patch size")
    patches = []
    for y in range(0, ch, patch_size):
        for x in range(0, cw, patch_size):
            patches.append((y, x, image[y : y + patch_size, x : x + patch_size]))
    return patches


# --------------------------------------------------------------------------
# Augmentation helpers


def flip_image(img: np.ndarray, h_flip: bool, v_flip: bool) -> np.ndarray:
    """Spatial flip for (H,W), (H,W,C) or (C,H,W) handled by caller axes."""
    if h_flip:
        img = img[..., ::-1]
    if v_flip:
        img = img[..., ::-1, :] if img.ndim >= 2 else img
    return np.ascontiguousarray(img)


def flip_flow(flow: FlowField, h_flip: bool, v_flip: bool) -> FlowField:
    u, v = flow.u, flow.v
    if h_flip:
        u = -u[:, ::-1]
        v = v[:, ::-1]
    if v_flip:
        u = u[::-1, :]
        v = -v[::-1, :]
    return FlowField(u=np.ascontiguousarray(u), v=np.ascontiguousarray(v))


# --------------------------------------------------------------------------
# Batch sampling


@dataclass
class Batch:
    x4: np.ndarray  # (B,4,h,w) packed patch
    x_full4: np.ndarray  # (B,4,Hp,Wp) packed full frame
    wb: np.ndarray  # (B,4) source metadata gains
    iso: np.ndarray  # (B,)
    exposure_s: np.ndarray  # (B,)
    weights: np.ndarray  # (B,K) one-hot device draw
    device_id: np.ndarray  # (B,)
    gt: np.ndarray  # (B,3,H,W) warped-to-source ground truth patch
    mask: np.ndarray  # (B,H,W) validity
    wb_dg: np.ndarray  # (B,4) target device illuminant
    patch_origin: np.ndarray  # (B,2) packed-pixel (y,x) of the patch


class SceneCache:
    """Memoizes decoded raws, ground truths and warps for one manifest."""

    def __init__(self, manifest: Manifest):
        self.manifest = manifest
        self._packed: dict[str, tuple] = {}
        self._warped: dict[tuple, tuple] = {}

    def packed_raw(self, rec: ManifestRecord):
        if rec.raw_path not in self._packed:
            raw = iio.read_raw(self.manifest.resolve(rec.raw_path))
            packed = np.moveaxis(iio.pack_rggb(raw), -1, 0).astype(np.float32)
            self._packed[rec.raw_path] = (packed, raw.meta)
        return self._packed[rec.raw_path]

    def warped_gt(self, rec: ManifestRecord):
        key = (rec.scene_id, rec.device_id)
        if key not in self._warped:
            gt = iio.read_rgb(self.manifest.resolve(rec.rgb_path)).pixels
            if rec.flow_path is not None:
                flow = iio.read_flow(self.manifest.resolve(rec.flow_path))
                warped, mask = warp_bilinear(gt.astype(np.float64), flow)
            else:
                warped, mask = gt.astype(np.float64), np.ones(
                    gt.shape[:2], dtype=np.uint8
                )
            self._warped[key] = (
                np.moveaxis(warped, -1, 0).astype(np.float32),
                mask.astype(np.float32),
            )
        return self._warped[key]


def sample_batch(
    manifest: Manifest,
    batch_size: int,
    rng: np.random.Generator,
    patch_size: int = 64,
    split: str = "train",
    cache: SceneCache | None = None,
    augment: bool = True,
) -> Batch:
    """Random scenes, a uniform device draw per sample, random tile and
    flips; deterministic given the generator state."""
    cache = cache or SceneCache(manifest)
    by_scene: dict[str, dict[int, ManifestRecord]] = {}
    for rec in manifest.split(split):
        by_scene.setdefault(rec.scene_id, {})[rec.device_id] = rec
    scene_ids = sorted(by_scene)
    if not scene_ids:
        raise ValueError(f"manifest has no {split!r} records")
    devices = manifest.device_ids()
    k = len(devices)

    cols = {name: [] for name in Batch.__dataclass_fields__}
    for _ in range(batch_size):
        scene = scene_ids[rng.integers(len(scene_ids))]
        device = devices[rng.integers(k)]
        rec = by_scene[scene][device]
        packed, meta = cache.packed_raw(rec)
        gt, mask = cache.warped_gt(rec)
        hp = packed.shape[1]
        ps_p = patch_size // 2  # patch size in packed pixels
        tiles_y = hp // ps_p
        tiles_x = packed.shape[2] // ps_p
        ty = int(rng.integers(tiles_y))
        tx = int(rng.integers(tiles_x))
        oy, ox = ty * ps_p, tx * ps_p

        x4 = packed[:, oy : oy + ps_p, ox : ox + ps_p]
        gt_p = gt[:, 2 * oy : 2 * oy + patch_size, 2 * ox : 2 * ox + patch_size]
        mask_p = mask[2 * oy : 2 * oy + patch_size, 2 * ox : 2 * ox + patch_size]
        x_full = packed
        origin = np.array([oy, ox], dtype=np.float32)

        if augment:
            h_flip = bool(rng.integers(2))
            v_flip = bool(rng.integers(2))
            if h_flip:
                x4 = x4[:, :, ::-1]
                gt_p = gt_p[:, :, ::-1]
                mask_p = mask_p[:, ::-1]
                x_full = x_full[:, :, ::-1]
                origin[1] = packed.shape[2] - ps_p - ox
            if v_flip:
                x4 = x4[:, ::-1, :]
                gt_p = gt_p[:, ::-1, :]
                mask_p = mask_p[::-1, :]
                x_full = x_full[:, ::-1, :]
                origin[0] = hp - ps_p - oy

        cols["x4"].append(np.ascontiguousarray(x4))
        cols["x_full4"].append(np.ascontiguousarray(x_full))
        cols["wb"].append(np.asarray(meta.wb_gains, dtype=np.float32))
        cols["iso"].append(np.float32(meta.iso))
        cols["exposure_s"].append(np.float32(meta.exposure_s))
        onehot = np.zeros(k, dtype=np.float32)
        onehot[devices.index(device)] = 1.0
        cols["weights"].append(onehot)
        cols["device_id"].append(np.int64(device))
        cols["gt"].append(np.ascontiguousarray(gt_p))
        cols["mask"].append(np.ascontiguousarray(mask_p))
        cols["wb_dg"].append(np.asarray(rec.wb_dg, dtype=np.float32))
        cols["patch_origin"].append(origin)

    return Batch(**{name: np.stack(vals) for name, vals in cols.items()})
