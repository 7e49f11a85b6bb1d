"""Dense warping, occlusion masking, and a classical pyramidal flow estimator.

Flow convention: ``flow(p)`` is the displacement such that the source
pixel at ``p`` corresponds to the destination pixel at ``p + flow(p)``;
``warp_bilinear(dst, flow)`` therefore resamples ``dst`` into the source
geometry.
"""

from __future__ import annotations

import numpy as np

from polyisp.color import REC709_LUMA
from polyisp.imageio import FlowField, RgbImage


def _as_array(image) -> np.ndarray:
    if isinstance(image, RgbImage):
        return np.asarray(image.pixels, dtype=np.float64)
    return np.asarray(image, dtype=np.float64)


def _bilinear_gather(img: np.ndarray, qx: np.ndarray, qy: np.ndarray) -> np.ndarray:
    """Sample img at fractional coordinates with border-clamped taps."""
    h, w = img.shape[:2]
    x0 = np.floor(qx).astype(np.int64)
    y0 = np.floor(qy).astype(np.int64)
    fx = qx - x0
    fy = qy - y0
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    return (
        img[y0c, x0c] * (1 - fx) * (1 - fy)
        + img[y0c, x1c] * fx * (1 - fy)
        + img[y1c, x0c] * (1 - fx) * fy
        + img[y1c, x1c] * fx * fy
    )


def _validity_weight(qx: np.ndarray, qy: np.ndarray, h: int, w: int) -> np.ndarray:
    """In-bounds bilinear weight mass at each sample location (zero padding)."""
    x0 = np.floor(qx).astype(np.int64)
    y0 = np.floor(qy).astype(np.int64)
    fx = qx - x0
    fy = qy - y0
    inside_x0 = (x0 >= 0) & (x0 <= w - 1)
    inside_x1 = (x0 + 1 >= 0) & (x0 + 1 <= w - 1)
    inside_y0 = (y0 >= 0) & (y0 <= h - 1)
    inside_y1 = (y0 + 1 >= 0) & (y0 + 1 <= h - 1)
    wx = inside_x0 * (1 - fx) + inside_x1 * fx
    wy = inside_y0 * (1 - fy) + inside_y1 * fy
    return wx * wy


def warp_bilinear(image, flow: FlowField):
    """Resample image at p + flow(p).

    Returns (warped, mask).  A pixel is masked valid when every
    nonzero-weight bilinear tap of its sample location lies inside the
    image, i.e. the sample coordinate is within [0, W-1] x [0, H-1].
    """
    img = _as_array(image)
    h, w = img.shape[:2]
    if flow.u.shape != (h, w):
        raise ValueError("flow dimensions must match image")
    yy, xx = np.mgrid[0:h, 0:w]
    qx = xx + flow.u.astype(np.float64)
    qy = yy + flow.v.astype(np.float64)
    warped = _bilinear_gather(img, qx, qy)
    mask = (qx >= 0) & (qx <= w - 1) & (qy >= 0) & (qy <= h - 1)
    return warped, mask.astype(np.uint8)


def occlusion_mask(
    fwd: FlowField,
    bwd: FlowField,
    fb_thresh: float = 1.0,
    validity_thresh: float = 0.999,
) -> np.ndarray:
    """Binary mask of pixels whose warped correspondence is trustworthy.

    Valid iff the bilinear validity weight at p + fwd(p) is at least
    validity_thresh and the forward/backward mismatch
    |fwd(p) + bwd(p + fwd(p))| is at most fb_thresh pixels.
    """
    if fwd.u.shape != bwd.u.shape:
        raise ValueError("forward and backward flows must share dimensions")
    h, w = fwd.u.shape
    yy, xx = np.mgrid[0:h, 0:w]
    qx = xx + fwd.u.astype(np.float64)
    qy = yy + fwd.v.astype(np.float64)
    weight = _validity_weight(qx, qy, h, w)
    bwd_u = _bilinear_gather(bwd.u.astype(np.float64), qx, qy)
    bwd_v = _bilinear_gather(bwd.v.astype(np.float64), qx, qy)
    mismatch = np.hypot(fwd.u + bwd_u, fwd.v + bwd_v)
    valid = (weight >= validity_thresh) & (mismatch <= fb_thresh)
    return valid.astype(np.uint8)


# --------------------------------------------------------------------------
# Pyramidal block matching

BLOCK = 8


def _to_gray(image) -> np.ndarray:
    img = _as_array(image)
    if img.ndim == 3:
        return img @ REC709_LUMA
    return img


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    h2, w2 = h // 2, w // 2
    return img[: h2 * 2, : w2 * 2].reshape(h2, 2, w2, 2).mean(axis=(1, 3))


def _block_grid(n: int) -> list[int]:
    starts = list(range(0, n - BLOCK + 1, BLOCK))
    if starts[-1] != n - BLOCK:
        starts.append(n - BLOCK)
    return starts


def _sad(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a - b).sum())


def _match_level(
    src: np.ndarray, dst: np.ndarray, init_u: np.ndarray, init_v: np.ndarray,
    radius: int, refine: bool,
):
    h, w = src.shape
    u = init_u.copy()
    v = init_v.copy()
    for by in _block_grid(h):
        for bx in _block_grid(w):
            block = src[by : by + BLOCK, bx : bx + BLOCK]
            cy, cx = by + BLOCK // 2, bx + BLOCK // 2
            iu = int(np.rint(init_u[cy, cx]))
            iv = int(np.rint(init_v[cy, cx]))
            best = None
            best_du, best_dv = iu, iv
            sads = {}
            for dv in range(iv - radius, iv + radius + 1):
                ty = by + dv
                if ty < 0 or ty + BLOCK > h:
                    continue
                for du in range(iu - radius, iu + radius + 1):
                    tx = bx + du
                    if tx < 0 or tx + BLOCK > w:
                        continue
                    s = _sad(block, dst[ty : ty + BLOCK, tx : tx + BLOCK])
                    sads[(du, dv)] = s
                    if best is None or s < best:
                        best = s
                        best_du, best_dv = du, dv
            fu, fv = float(best_du), float(best_dv)
            if refine and best is not None and best > 0:
                fu += _parabolic_offset(sads, best_du, best_dv, axis=0)
                fv += _parabolic_offset(sads, best_du, best_dv, axis=1)
            u[by : by + BLOCK, bx : bx + BLOCK] = fu
            v[by : by + BLOCK, bx : bx + BLOCK] = fv
    return u, v


def _parabolic_offset(sads: dict, du: int, dv: int, axis: int) -> float:
    if axis == 0:
        lo, hi = sads.get((du - 1, dv)), sads.get((du + 1, dv))
    else:
        lo, hi = sads.get((du, dv - 1)), sads.get((du, dv + 1))
    mid = sads[(du, dv)]
    if lo is None or hi is None:
        return 0.0
    denom = lo - 2 * mid + hi
    if denom <= 0:
        return 0.0
    return float(np.clip((lo - hi) / (2 * denom), -0.5, 0.5))


def flow_block_match(src, dst, levels: int = 3, radius: int = 4) -> FlowField:
    """Coarse-to-fine integer block search with final half-pel refinement."""
    a = _to_gray(src)
    b = _to_gray(dst)
    if a.shape != b.shape:
        raise ValueError("images must share dimensions")
    if min(a.shape) < BLOCK:
        raise ValueError("image smaller than one matching block")
    pyr_a, pyr_b = [a], [b]
    for _ in range(levels - 1):
        nxt = _downsample2(pyr_a[-1])
        if min(nxt.shape) < BLOCK:
            break
        pyr_a.append(nxt)
        pyr_b.append(_downsample2(pyr_b[-1]))

    u = np.zeros_like(pyr_a[-1])
    v = np.zeros_like(pyr_a[-1])
    for lvl in range(len(pyr_a) - 1, -1, -1):
        if lvl < len(pyr_a) - 1:
            u = 2.0 * np.repeat(np.repeat(u, 2, axis=0), 2, axis=1)
            v = 2.0 * np.repeat(np.repeat(v, 2, axis=0), 2, axis=1)
            u = u[: pyr_a[lvl].shape[0], : pyr_a[lvl].shape[1]]
            v = v[: pyr_a[lvl].shape[0], : pyr_a[lvl].shape[1]]
            if u.shape != pyr_a[lvl].shape:
                pad_y = pyr_a[lvl].shape[0] - u.shape[0]
                pad_x = pyr_a[lvl].shape[1] - u.shape[1]
                u = np.pad(u, ((0, pad_y), (0, pad_x)), mode="edge")
                v = np.pad(v, ((0, pad_y), (0, pad_x)), mode="edge")
        u, v = _match_level(
            pyr_a[lvl], pyr_b[lvl], u, v, radius, refine=(lvl == 0)
        )
    return FlowField(u=u.astype(np.float32), v=v.astype(np.float32))
