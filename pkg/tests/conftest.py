import numpy as np
import pytest

from polyisp.imageio import RawImage, RawMeta


@pytest.fixture
def small_meta():
    return RawMeta(
        black_level=64,
        white_level=1023,
        wb_gains=(1.8, 1.0, 1.0, 1.4),
        iso=200.0,
        exposure_s=0.01,
        device_id=0,
    )


def random_raw(seed: int, h: int = 16, w: int = 16, meta: RawMeta | None = None):
    rng = np.random.default_rng(seed)
    meta = meta or RawMeta(
        black_level=64,
        white_level=1023,
        wb_gains=(1.8, 1.0, 1.0, 1.4),
        iso=200.0,
        exposure_s=0.01,
    )
    mosaic = rng.integers(0, meta.white_level + 1, size=(h, w), dtype=np.uint16)
    return RawImage(mosaic=mosaic, meta=meta)
