import hashlib

import numpy as np
import pytest

import polyisp.imageio as iio
from polyisp.imageio import RawImage, RawMeta, RgbImage
from polyisp.refisp import (
    DevicePreset,
    NoiseParams,
    StyleParams,
    apply_style,
    apply_wb,
    checker_distance,
    demosaic_bilinear,
    forward_isp,
    identity_style,
    inverse_isp,
    invert_style,
    load_presets,
    make_device_styles,
    render_device,
    save_presets,
)

GOLDEN_ISP_SHA256 = "ab98c6b7a2f6beca9bf49812ce0799eb9e6980ad34592ea27dcb398282e380eb"


def _neutral_meta(wb=(1.0, 1.0, 1.0, 1.0)):
    return RawMeta(black_level=64, white_level=1023, wb_gains=wb,
                   iso=100.0, exposure_s=0.01)


# --------------------------------------------------------------------------
# Demosaic


def _demosaic_oracle(m):
    """Per-pixel same-color neighbor averaging with replicate padding."""
    h, w = m.shape
    out = np.zeros((h, w, 3))

    def at(y, x):
        return m[min(max(y, 0), h - 1), min(max(x, 0), w - 1)]

    def color_of(y, x):
        if y % 2 == 0 and x % 2 == 0:
            return 0
        if y % 2 == 1 and x % 2 == 1:
            return 2
        return 1

    for y in range(h):
        for x in range(w):
            c = color_of(y, x)
            out[y, x, c] = m[y, x]
            if c == 0:  # red site: G from cross, B from diagonals
                out[y, x, 1] = (at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1)) / 4
                out[y, x, 2] = (at(y - 1, x - 1) + at(y - 1, x + 1) + at(y + 1, x - 1) + at(y + 1, x + 1)) / 4
            elif c == 2:  # blue site
                out[y, x, 1] = (at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1)) / 4
                out[y, x, 0] = (at(y - 1, x - 1) + at(y - 1, x + 1) + at(y + 1, x - 1) + at(y + 1, x + 1)) / 4
            elif y % 2 == 0:  # G1: R horizontal, B vertical
                out[y, x, 0] = (at(y, x - 1) + at(y, x + 1)) / 2
                out[y, x, 2] = (at(y - 1, x) + at(y + 1, x)) / 2
            else:  # G2: R vertical, B horizontal
                out[y, x, 0] = (at(y - 1, x) + at(y + 1, x)) / 2
                out[y, x, 2] = (at(y, x - 1) + at(y, x + 1)) / 2
    return out


def test_demosaic_constant_is_constant():
    out = demosaic_bilinear(np.full((6, 6), 0.37))
    assert np.allclose(out, 0.37)


def test_demosaic_linear():
    rng = np.random.default_rng(0)
    m = rng.random((8, 8))
    assert np.allclose(demosaic_bilinear(2 * m), 2 * demosaic_bilinear(m))


def test_demosaic_single_red_sample_matches_oracle():
    m = np.zeros((4, 4))
    m[2, 2] = 1.0  # a red site
    assert np.allclose(demosaic_bilinear(m), _demosaic_oracle(m))


def test_demosaic_random_matches_oracle():
    rng = np.random.default_rng(5)
    m = rng.random((6, 8))
    assert np.allclose(demosaic_bilinear(m), _demosaic_oracle(m))


def test_demosaic_odd_dims_rejected():
    with pytest.raises(ValueError):
        demosaic_bilinear(np.zeros((5, 4)))


# --------------------------------------------------------------------------
# White balance


def test_apply_wb_red_doubled():
    img = np.ones((2, 2, 4))
    out = apply_wb(img, [2, 1, 1, 1])
    assert np.allclose(out[..., 0], 2.0)
    assert np.allclose(out[..., 1:], 1.0)


def test_apply_wb_identity():
    rng = np.random.default_rng(1)
    img = rng.random((3, 3, 3))
    assert np.allclose(apply_wb(img, [1, 1, 1]), img)


def test_apply_wb_matches_elementwise_oracle():
    rng = np.random.default_rng(2)
    img = rng.random((4, 5, 4))
    gains = rng.uniform(0.5, 2.0, size=4)
    out = apply_wb(img, gains)
    for c in range(4):
        assert np.allclose(out[..., c], img[..., c] * gains[c])


def test_apply_wb_nonpositive_rejected():
    with pytest.raises(ValueError):
        apply_wb(np.ones((2, 2, 3)), [1, 0, 1])


# --------------------------------------------------------------------------
# Style


def _style_oracle(pixels, style: StyleParams):
    """Straight-line scalar reimplementation of the five stages."""
    xs = [k[0] for k in style.tone_knots]
    ys = [k[1] for k in style.tone_knots]

    def tone(v):
        if v <= xs[0]:
            return ys[0]
        for (x0, y0), (x1, y1) in zip(style.tone_knots, style.tone_knots[1:]):
            if v <= x1:
                return y0 + (y1 - y0) * (v - x0) / (x1 - x0)
        return ys[-1]

    h, w, _ = pixels.shape
    out = np.zeros((h, w, 3))
    for y in range(h):
        for x in range(w):
            r, g, b = (pixels[y, x] * np.asarray(style.gains)).tolist()
            rr = style.ccm[0, 0] * r + style.ccm[0, 1] * g + style.ccm[0, 2] * b
            gg = style.ccm[1, 0] * r + style.ccm[1, 1] * g + style.ccm[1, 2] * b
            bb = style.ccm[2, 0] * r + style.ccm[2, 1] * g + style.ccm[2, 2] * b
            lum = 0.2126 * rr + 0.7152 * gg + 0.0722 * bb
            vals = []
            for c in (rr, gg, bb):
                v = lum + style.saturation * (c - lum)
                v = min(max(v, 0.0), 1.0)
                v = tone(v)
                v = v ** (1.0 / style.gamma)
                vals.append(min(max(v, 0.0), 1.0))
            out[y, x] = vals
    return out


def test_identity_style_mid_gray():
    img = RgbImage(pixels=np.full((2, 2, 3), 0.5, np.float32), colorspace="linear")
    out = apply_style(img, identity_style())
    assert np.allclose(out.pixels, 0.5 ** (1 / 2.2), atol=1e-6)


def test_zero_saturation_gives_grayscale():
    rng = np.random.default_rng(3)
    style = StyleParams(ccm=np.eye(3), gains=(1, 1, 1),
                        tone_knots=identity_style().tone_knots,
                        gamma=2.2, saturation=0.0)
    img = RgbImage(pixels=rng.random((4, 4, 3)).astype(np.float32),
                   colorspace="linear")
    out = apply_style(img, style).pixels
    assert np.allclose(out[..., 0], out[..., 1], atol=1e-6)
    assert np.allclose(out[..., 1], out[..., 2], atol=1e-6)


def test_apply_style_matches_oracle():
    rng = np.random.default_rng(4)
    presets = make_device_styles(3, seed=1)
    img = RgbImage(pixels=rng.uniform(0.05, 0.95, (5, 5, 3)).astype(np.float32),
                   colorspace="linear")
    for preset in presets:
        got = apply_style(img, preset.style).pixels
        want = _style_oracle(img.pixels.astype(np.float64), preset.style)
        assert np.allclose(got, want, atol=1e-6)


def test_apply_style_requires_linear():
    img = RgbImage(pixels=np.zeros((2, 2, 3), np.float32), colorspace="srgb")
    with pytest.raises(ValueError):
        apply_style(img, identity_style())


# --------------------------------------------------------------------------
# Forward / inverse pipelines


def test_forward_isp_gray_card_flat():
    mosaic = np.full((8, 8), 500, np.uint16)
    raw = RawImage(mosaic=mosaic, meta=_neutral_meta())
    out = forward_isp(raw, identity_style()).pixels
    assert np.allclose(out, out[0, 0], atol=1e-6)
    assert np.allclose(out[0, 0, 0], out[0, 0, 1], atol=1e-6)


def test_luma_preserving_ccm_changes_only_chroma():
    # perturbation orthogonal to the Rec.709 luma weights, zero row sums
    u = np.array([0.7152, -0.2126, 0.0])
    q = np.array([1.0, -1.0, 0.0])
    ccm = np.eye(3) + 0.2 * np.outer(u, q)
    base = identity_style()
    alt = StyleParams(ccm=ccm, gains=base.gains, tone_knots=base.tone_knots,
                      gamma=base.gamma, saturation=base.saturation)
    rng = np.random.default_rng(6)
    mosaic = (200 + rng.integers(0, 500, (16, 16))).astype(np.uint16)
    raw = RawImage(mosaic=mosaic, meta=_neutral_meta())
    out_a = forward_isp(raw, base).pixels.astype(np.float64)
    out_b = forward_isp(raw, alt).pixels.astype(np.float64)
    assert not np.allclose(out_a, out_b, atol=1e-4)  # chroma moved
    luma_a = (out_a**2.2) @ np.array([0.2126, 0.7152, 0.0722])
    luma_b = (out_b**2.2) @ np.array([0.2126, 0.7152, 0.0722])
    assert np.abs(luma_a - luma_b).max() < 1e-3


def test_forward_isp_golden_hash(tmp_path):
    from polyisp.data import generate_scene

    rng = np.random.default_rng(0)
    img = generate_scene(64, rng)
    presets = make_device_styles(3, seed=0)
    raw = inverse_isp(RgbImage(pixels=img.astype(np.float32), colorspace="srgb"),
                      presets[0].style, _neutral_meta((1.6, 1, 1, 1.3)), seed=0)
    out = forward_isp(raw, presets[0].style)
    iio.write_rgb(out, tmp_path / "golden.ppm")
    digest = hashlib.sha256((tmp_path / "golden.ppm").read_bytes()).hexdigest()
    assert digest == GOLDEN_ISP_SHA256


def test_inverse_round_trip_error_small():
    from polyisp.data import generate_scene

    presets = make_device_styles(3, seed=0)
    meta = _neutral_meta((1.8, 1.0, 1.0, 1.4))
    errs = []
    for s in range(6):
        rng = np.random.default_rng(50 + s)
        img = generate_scene(64, rng)
        style = presets[s % 3].style
        raw = inverse_isp(RgbImage(pixels=img.astype(np.float32),
                                   colorspace="srgb"), style, meta, seed=0)
        out = forward_isp(raw, style).pixels.astype(np.float64)
        errs.append(np.abs(out - img)[2:-2, 2:-2].mean())
    assert np.mean(errs) < 1 / 255


def test_inverse_isp_black_maps_to_black_level():
    img = RgbImage(pixels=np.zeros((4, 4, 3), np.float32), colorspace="srgb")
    raw = inverse_isp(img, identity_style(), _neutral_meta(), seed=0)
    assert np.all(raw.mosaic == 64)


def test_inverse_isp_seeded_determinism():
    rng = np.random.default_rng(8)
    img = RgbImage(pixels=rng.uniform(0.2, 0.8, (8, 8, 3)).astype(np.float32),
                   colorspace="srgb")
    noise = NoiseParams(shot_gain=1e-3, read_sigma=2e-3)
    a = inverse_isp(img, identity_style(), _neutral_meta(), noise=noise, seed=42)
    b = inverse_isp(img, identity_style(), _neutral_meta(), noise=noise, seed=42)
    c = inverse_isp(img, identity_style(), _neutral_meta(), noise=noise, seed=43)
    assert np.array_equal(a.mosaic, b.mosaic)
    assert not np.array_equal(a.mosaic, c.mosaic)


def test_invert_style_rejects_singular_ccm():
    style = identity_style()
    singular = StyleParams(
        ccm=np.array([[0.5, 0.5, 0.0], [0.5, 0.5, 0.0], [0.0, 0.0, 1.0]]),
        gains=style.gains, tone_knots=style.tone_knots,
        gamma=style.gamma, saturation=style.saturation,
    )
    img = RgbImage(pixels=np.full((2, 2, 3), 0.5, np.float32), colorspace="srgb")
    with pytest.raises(ValueError, match="singular"):
        invert_style(img, singular)


def test_forward_monotone_in_signal():
    rng = np.random.default_rng(9)
    presets = make_device_styles(3, seed=2)
    base = rng.uniform(0.05, 0.45, (6, 6, 3))
    for preset in presets:
        lo = apply_style(RgbImage(pixels=base.astype(np.float32),
                                  colorspace="linear"), preset.style).pixels
        hi = apply_style(RgbImage(pixels=(2 * base).astype(np.float32),
                                  colorspace="linear"), preset.style).pixels
        assert np.all(hi >= lo - 1e-9)


# --------------------------------------------------------------------------
# Device presets


def test_single_device_identity_leaning():
    presets = make_device_styles(1, seed=0)
    assert len(presets) == 1
    assert np.allclose(presets[0].style.ccm, np.eye(3))


def test_three_devices_distinct_seed0():
    presets = make_device_styles(3, seed=0)
    assert [p.device_id for p in presets] == [0, 1, 2]
    for i in range(3):
        for j in range(i + 1, 3):
            assert checker_distance(presets[i], presets[j]) >= 5.0


def test_presets_deterministic():
    a = make_device_styles(3, seed=5)
    b = make_device_styles(3, seed=5)
    assert [p.to_dict() for p in a] == [p.to_dict() for p in b]


def test_presets_json_round_trip(tmp_path):
    presets = make_device_styles(2, seed=3)
    save_presets(presets, tmp_path / "p.json")
    back = load_presets(tmp_path / "p.json")
    assert [p.to_dict() for p in back] == [p.to_dict() for p in presets]


def test_render_device_applies_wb_bias():
    mosaic = np.full((8, 8), 520, np.uint16)
    raw = RawImage(mosaic=mosaic, meta=_neutral_meta())
    preset = DevicePreset(device_id=1, name="warm", style=identity_style(),
                          wb_bias=(1.3, 1.0, 1.0, 0.8))
    neutral = render_device(raw, DevicePreset(0, "n", identity_style()))
    warm = render_device(raw, preset)
    assert warm.pixels[4, 4, 0] > neutral.pixels[4, 4, 0]
    assert warm.pixels[4, 4, 2] < neutral.pixels[4, 4, 2]
