"""Deterministic reference ISP, its inverse, and parametric device styles.

The forward path renders a RAW mosaic into sRGB with a fixed stage order
(wb -> demosaic -> gains -> ccm -> saturation -> tone -> gamma).  The
inverse path unprocesses an sRGB image back into a noisy quantized
mosaic.  Device presets are randomized style parameter sets whose
renditions are guaranteed to be mutually distinct on a color checker, so
one RAW can be paired with several exactly-known target appearances.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from polyisp import color
from polyisp.imageio import RawImage, RawMeta, RgbImage


@dataclass
class StyleParams:
    ccm: np.ndarray  # 3x3, rows sum to 1
    gains: tuple[float, float, float]
    tone_knots: tuple[tuple[float, float], ...]  # monotone, endpoints (0,0),(1,1)
    gamma: float
    saturation: float

    def __post_init__(self) -> None:
        self.ccm = np.asarray(self.ccm, dtype=np.float64)
        self.gains = tuple(float(g) for g in self.gains)
        self.tone_knots = tuple((float(x), float(y)) for x, y in self.tone_knots)
        if self.ccm.shape != (3, 3):
            raise ValueError("ccm must be 3x3")
        if not np.allclose(self.ccm.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("ccm rows must sum to 1")
        if any(g <= 0 for g in self.gains):
            raise ValueError("gains must be positive")
        if len(self.tone_knots) < 4:
            raise ValueError("tone curve needs at least 4 knots")
        xs = [k[0] for k in self.tone_knots]
        ys = [k[1] for k in self.tone_knots]
        if xs[0] != 0.0 or ys[0] != 0.0 or xs[-1] != 1.0 or ys[-1] != 1.0:
            raise ValueError("tone curve endpoints must be (0,0) and (1,1)")
        if any(a >= b for a, b in zip(xs, xs[1:])) or any(
            a >= b for a, b in zip(ys, ys[1:])
        ):
            raise ValueError("tone knots must be strictly increasing")
        if not 1.8 <= self.gamma <= 2.6:
            raise ValueError("gamma must lie in [1.8, 2.6]")
        if self.saturation < 0:
            raise ValueError("saturation must be >= 0")

    def to_dict(self) -> dict:
        return {
            "ccm": self.ccm.tolist(),
            "gains": list(self.gains),
            "tone_knots": [list(k) for k in self.tone_knots],
            "gamma": self.gamma,
            "saturation": self.saturation,
        }

    @staticmethod
    def from_dict(d: dict) -> "StyleParams":
        return StyleParams(
            ccm=np.array(d["ccm"]),
            gains=tuple(d["gains"]),
            tone_knots=tuple(tuple(k) for k in d["tone_knots"]),
            gamma=float(d["gamma"]),
            saturation=float(d["saturation"]),
        )


IDENTITY_TONE = ((0.0, 0.0), (1 / 3, 1 / 3), (2 / 3, 2 / 3), (1.0, 1.0))


def identity_style() -> StyleParams:
    return StyleParams(
        ccm=np.eye(3),
        gains=(1.0, 1.0, 1.0),
        tone_knots=IDENTITY_TONE,
        gamma=2.2,
        saturation=1.0,
    )


@dataclass
class DevicePreset:
    device_id: int
    name: str
    style: StyleParams
    wb_bias: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        self.wb_bias = tuple(float(g) for g in self.wb_bias)

    def to_dict(self) -> dict:
        return {
            "device_id": self.device_id,
            "name": self.name,
            "style": self.style.to_dict(),
            "wb_bias": list(self.wb_bias),
        }

    @staticmethod
    def from_dict(d: dict) -> "DevicePreset":
        return DevicePreset(
            device_id=int(d["device_id"]),
            name=d["name"],
            style=StyleParams.from_dict(d["style"]),
            wb_bias=tuple(d["wb_bias"]),
        )


def save_presets(presets: list[DevicePreset], path: str | Path) -> None:
    Path(path).write_text(
        json.dumps([p.to_dict() for p in presets], indent=2, sort_keys=True) + "\n"
    )


def load_presets(path: str | Path) -> list[DevicePreset]:
    return [DevicePreset.from_dict(d) for d in json.loads(Path(path).read_text())]


# --------------------------------------------------------------------------
# Forward stages


def apply_wb(image: np.ndarray, gains) -> np.ndarray:
    """Channel-wise white balance multiply on the last axis."""
    gains = np.asarray(gains, dtype=np.float64)
    if np.any(gains <= 0):
        raise ValueError("wb gains must be positive")
    if image.shape[-1] != gains.shape[0]:
        raise ValueError("gain count must match channel count")
    return image * gains


def apply_wb_mosaic(mosaic: np.ndarray, gains) -> np.ndarray:
    """White balance on an RGGB mosaic, gains in R, G1, G2, B order."""
    gains = np.asarray(gains, dtype=np.float64)
    if np.any(gains <= 0):
        raise ValueError("wb gains must be positive")
    out = np.asarray(mosaic, dtype=np.float64).copy()
    out[0::2, 0::2] *= gains[0]
    out[0::2, 1::2] *= gains[1]
    out[1::2, 0::2] *= gains[2]
    out[1::2, 1::2] *= gains[3]
    return out


def demosaic_bilinear(mosaic: np.ndarray) -> np.ndarray:
    """Bilinear RGGB demosaic; edges use replicate padding."""
    m = np.asarray(mosaic, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] % 2 or m.shape[1] % 2:
        raise ValueError("mosaic must be 2-D with even dimensions")
    h, w = m.shape
    yy, xx = np.mgrid[0:h, 0:w]
    r_mask = (yy % 2 == 0) & (xx % 2 == 0)
    g1_mask = (yy % 2 == 0) & (xx % 2 == 1)
    g2_mask = (yy % 2 == 1) & (xx % 2 == 0)
    b_mask = (yy % 2 == 1) & (xx % 2 == 1)

    p = np.pad(m, 1, mode="edge")
    c = p[1:-1, 1:-1]
    n = p[:-2, 1:-1]
    s = p[2:, 1:-1]
    wv = p[1:-1, :-2]
    e = p[1:-1, 2:]
    nw = p[:-2, :-2]
    ne = p[:-2, 2:]
    sw = p[2:, :-2]
    se = p[2:, 2:]

    r = np.where(r_mask, c, 0.0)
    g = np.where(g1_mask | g2_mask, c, 0.0)
    b = np.where(b_mask, c, 0.0)

    r = np.where(b_mask, 0.25 * (nw + ne + sw + se), r)
    b = np.where(r_mask, 0.25 * (nw + ne + sw + se), b)
    g = np.where(r_mask | b_mask, 0.25 * (n + s + wv + e), g)
    r = np.where(g1_mask, 0.5 * (wv + e), r)
    r = np.where(g2_mask, 0.5 * (n + s), r)
    b = np.where(g1_mask, 0.5 * (n + s), b)
    b = np.where(g2_mask, 0.5 * (wv + e), b)
    return np.stack([r, g, b], axis=-1)


def _tone_forward(v: np.ndarray, knots) -> np.ndarray:
    xs = np.array([k[0] for k in knots])
    ys = np.array([k[1] for k in knots])
    return np.interp(v, xs, ys)


def _tone_inverse(v: np.ndarray, knots) -> np.ndarray:
    xs = np.array([k[0] for k in knots])
    ys = np.array([k[1] for k in knots])
    return np.interp(v, ys, xs)


def apply_style(img: RgbImage, style: StyleParams) -> RgbImage:
    """Linear RGB in [0,1] -> display sRGB rendition.

    Stage order: gains -> ccm -> saturation -> tone -> gamma encode.
    """
    if img.colorspace != "linear":
        raise ValueError("apply_style expects a linear-colorspace image")
    v = np.asarray(img.pixels, dtype=np.float64)
    v = v * np.asarray(style.gains)
    v = v @ style.ccm.T
    luma = v @ color.REC709_LUMA
    v = luma[..., None] + style.saturation * (v - luma[..., None])
    v = np.clip(v, 0.0, 1.0)
    v = _tone_forward(v, style.tone_knots)
    v = v ** (1.0 / style.gamma)
    v = np.clip(v, 0.0, 1.0)
    return RgbImage(pixels=v.astype(np.float32), colorspace="srgb")


def invert_style(img: RgbImage, style: StyleParams) -> np.ndarray:
    """sRGB rendition -> linear RGB, inverting apply_style stage by stage."""
    if abs(np.linalg.det(style.ccm)) < 1e-8:
        raise ValueError("ccm is singular, style not invertible")
    if style.saturation <= 0:
        raise ValueError("saturation must be positive for inversion")
    v = np.asarray(img.pixels, dtype=np.float64)
    v = np.clip(v, 0.0, 1.0) ** style.gamma
    v = _tone_inverse(v, style.tone_knots)
    # saturation preserves Rec.709 luma, so the output luma equals the
    # pre-saturation luma and the mix can be unwound exactly
    luma = v @ color.REC709_LUMA
    v = luma[..., None] + (v - luma[..., None]) / style.saturation
    v = v @ np.linalg.inv(style.ccm).T
    v = v / np.asarray(style.gains)
    return v


# --------------------------------------------------------------------------
# Full pipelines


def forward_isp(raw: RawImage, style: StyleParams) -> RgbImage:
    """normalize -> white balance -> demosaic -> style; deterministic."""
    from polyisp.imageio import normalize_raw

    m = normalize_raw(raw.mosaic, raw.meta.black_level, raw.meta.white_level)
    m = apply_wb_mosaic(m, raw.meta.wb_gains)
    linear = demosaic_bilinear(m)
    return apply_style(
        RgbImage(pixels=np.clip(linear, 0.0, 1.0).astype(np.float32),
                 colorspace="linear"),
        style,
    )


@dataclass
class NoiseParams:
    shot_gain: float = 0.0  # gaussian variance per unit normalized signal
    read_sigma: float = 0.0  # gaussian sigma in normalized units


def mosaic_from_rgb(linear: np.ndarray) -> np.ndarray:
    """Sample an RGGB mosaic from a full-resolution linear RGB image."""
    h, w, _ = linear.shape
    m = np.empty((h, w), dtype=np.float64)
    m[0::2, 0::2] = linear[0::2, 0::2, 0]
    m[0::2, 1::2] = linear[0::2, 1::2, 1]
    m[1::2, 0::2] = linear[1::2, 0::2, 1]
    m[1::2, 1::2] = linear[1::2, 1::2, 2]
    return m


def inverse_isp(
    img: RgbImage,
    style: StyleParams,
    meta: RawMeta,
    noise: NoiseParams | None = None,
    seed: int = 0,
) -> RawImage:
    """Unprocess an sRGB image into a quantized RAW mosaic for `meta`."""
    linear = invert_style(img, style)
    m = mosaic_from_rgb(linear)
    inv_gains = 1.0 / np.asarray(meta.wb_gains, dtype=np.float64)
    m = apply_wb_mosaic(m, inv_gains)
    if noise is not None and (noise.shot_gain > 0 or noise.read_sigma > 0):
        rng = np.random.default_rng(seed)
        sigma = np.sqrt(noise.shot_gain * np.maximum(m, 0.0) + noise.read_sigma**2)
        m = m + rng.standard_normal(m.shape) * sigma
    span = meta.white_level - meta.black_level
    counts = np.floor(meta.black_level + np.clip(m, 0.0, 1.0) * span + 0.5)
    counts = np.clip(counts, meta.black_level, meta.white_level)
    return RawImage(mosaic=counts.astype(np.uint16), meta=meta)


def render_device(raw: RawImage, preset: DevicePreset) -> RgbImage:
    """Device rendition: scene wb perturbed by the preset bias, then style."""
    wb = tuple(
        g * b for g, b in zip(raw.meta.wb_gains, preset.wb_bias)
    )
    biased = RawImage(
        mosaic=raw.mosaic,
        meta=RawMeta(
            black_level=raw.meta.black_level,
            white_level=raw.meta.white_level,
            wb_gains=wb,
            iso=raw.meta.iso,
            exposure_s=raw.meta.exposure_s,
            device_id=preset.device_id,
        ),
    )
    return forward_isp(biased, preset.style)


# --------------------------------------------------------------------------
# Device style generation

# Classic 24-patch checker, 8-bit sRGB coordinates.
_CHECKER_SRGB = np.array(
    [
        [115, 82, 68], [194, 150, 130], [98, 122, 157], [87, 108, 67],
        [133, 128, 177], [103, 189, 170], [214, 126, 44], [80, 91, 166],
        [193, 90, 99], [94, 60, 108], [157, 188, 64], [224, 163, 46],
        [56, 61, 150], [70, 148, 73], [175, 54, 60], [231, 199, 31],
        [187, 86, 149], [8, 133, 161], [243, 243, 242], [200, 200, 200],
        [160, 160, 160], [122, 122, 122], [85, 85, 85], [52, 52, 52],
    ],
    dtype=np.float64,
) / 255.0

CHECKER_LINEAR = color.srgb_to_linear(_CHECKER_SRGB)

_PATCH = 8  # checker patch edge in pixels; interior excludes 2px demosaic rim


def checker_raw(black_level: int = 64, white_level: int = 1023) -> RawImage:
    """A neutral RAW of the 24-patch checker laid out on a 4x6 grid."""
    tiles = CHECKER_LINEAR.reshape(4, 6, 3)
    linear = np.repeat(np.repeat(tiles, _PATCH, axis=0), _PATCH, axis=1)
    m = mosaic_from_rgb(linear)
    span = white_level - black_level
    counts = np.floor(black_level + np.clip(m, 0, 1) * span + 0.5).astype(np.uint16)
    meta = RawMeta(
        black_level=black_level,
        white_level=white_level,
        wb_gains=(1.0, 1.0, 1.0, 1.0),
        iso=100.0,
        exposure_s=1 / 100,
    )
    return RawImage(mosaic=counts, meta=meta)


def _checker_interior_mask(h: int, w: int) -> np.ndarray:
    mask = np.zeros((h, w), dtype=bool)
    for i in range(4):
        for j in range(6):
            mask[i * _PATCH + 2 : (i + 1) * _PATCH - 2,
                 j * _PATCH + 2 : (j + 1) * _PATCH - 2] = True
    return mask


def checker_distance(a: DevicePreset, b: DevicePreset) -> float:
    """Mean CIEDE2000 between two presets' checker renditions."""
    raw = checker_raw()
    ra = render_device(raw, a).pixels
    rb = render_device(raw, b).pixels
    mask = _checker_interior_mask(*raw.mosaic.shape)
    de = color.ciede2000(color.srgb_to_lab(ra), color.srgb_to_lab(rb))
    return float(de[mask].mean())


def _sample_style(rng: np.random.Generator) -> StyleParams:
    # ranges leave raw-domain headroom so inversion stays in gamut
    off = rng.uniform(-0.16, 0.16, size=(3, 3))
    np.fill_diagonal(off, 0.0)
    ccm = np.eye(3) + off
    ccm = ccm / ccm.sum(axis=1, keepdims=True)
    gains = tuple(rng.uniform(0.94, 1.1, size=3))
    xs = np.concatenate([[0.0], np.sort(rng.uniform(0.15, 0.85, size=4)), [1.0]])
    while np.min(np.diff(xs)) < 0.03:
        xs = np.concatenate([[0.0], np.sort(rng.uniform(0.15, 0.85, size=4)), [1.0]])
    p = rng.uniform(0.72, 1.38)
    ys = xs**p
    return StyleParams(
        ccm=ccm,
        gains=gains,
        tone_knots=tuple(zip(xs, ys)),
        gamma=float(rng.uniform(1.9, 2.5)),
        saturation=float(rng.uniform(0.85, 1.25)),
    )


def make_device_styles(
    k: int, seed: int = 0, min_checker_de: float = 5.0
) -> list[DevicePreset]:
    """K device presets with pairwise checker distance >= min_checker_de."""
    if k < 1:
        raise ValueError("need at least one device")
    presets = [DevicePreset(device_id=0, name="device0", style=identity_style())]
    if k == 1:
        return presets
    rng = np.random.default_rng(seed)
    attempts = 0
    while len(presets) < k:
        attempts += 1
        if attempts > 1000:
            raise RuntimeError(
                "failed to sample sufficiently distinct device styles "
                f"after {attempts - 1} attempts"
            )
        style = _sample_style(rng)
        if abs(np.linalg.det(style.ccm)) < 0.05:
            continue
        wb_bias = (
            float(rng.uniform(0.88, 1.14)), 1.0, 1.0, float(rng.uniform(0.88, 1.14))
        )
        candidate = DevicePreset(
            device_id=len(presets),
            name=f"device{len(presets)}",
            style=style,
            wb_bias=wb_bias,
        )
        if all(checker_distance(candidate, p) >= min_checker_de for p in presets):
            presets.append(candidate)
    return presets
