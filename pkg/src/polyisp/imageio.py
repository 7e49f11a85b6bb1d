"""Bit-exact readers and writers for every on-disk artifact.

Formats:
  RAW        16-bit binary PGM (P5, maxval 65535, big-endian samples)
             with a ``<stem>.json`` metadata sidecar.
  sRGB       binary PPM (P6, maxval 255).
  flow       Middlebury-style: float32 magic 202021.25, int32 width,
             int32 height, interleaved float32 (u, v) row-major,
             little-endian.
  checkpoint ASCII JSON header line + contiguous little-endian float32
             payload ("MICK1").
  manifest   JSON Lines, paths relative to the manifest file.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from polyisp.nnisp.state import NetworkState

FLOW_MAGIC = 202021.25
CHECKPOINT_FORMAT = "MICK1"


@dataclass
class RawMeta:
    black_level: int
    white_level: int
    wb_gains: tuple[float, float, float, float]  # RGBG order, greens 1.0
    iso: float
    exposure_s: float
    device_id: int | None = None

    def __post_init__(self) -> None:
        self.wb_gains = tuple(float(g) for g in self.wb_gains)
        if len(self.wb_gains) != 4:
            raise ValueError("wb_gains must have 4 entries (RGBG)")
        if not self.black_level < self.white_level:
            raise ValueError("black_level must be below white_level")
        if any(g <= 0 for g in self.wb_gains):
            raise ValueError("wb_gains must be positive")
        if self.iso <= 0:
            raise ValueError("iso must be positive")
        if self.exposure_s <= 0:
            raise ValueError("exposure_s must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "RawMeta":
        return RawMeta(
            black_level=int(d["black_level"]),
            white_level=int(d["white_level"]),
            wb_gains=tuple(d["wb_gains"]),
            iso=float(d["iso"]),
            exposure_s=float(d["exposure_s"]),
            device_id=None if d.get("device_id") is None else int(d["device_id"]),
        )


@dataclass
class RawImage:
    mosaic: np.ndarray  # (H, W) integer sensor counts
    meta: RawMeta
    cfa: str = "RGGB"

    def __post_init__(self) -> None:
        if self.cfa != "RGGB":
            raise ValueError(f"unsupported CFA pattern {self.cfa!r}")
        if self.mosaic.ndim != 2:
            raise ValueError("mosaic must be 2-D")
        h, w = self.mosaic.shape
        if h % 2 or w % 2:
            raise ValueError("mosaic dimensions must be even")
        if self.mosaic.max(initial=0) > self.meta.white_level:
            raise ValueError("value exceeds white level")


@dataclass
class RgbImage:
    pixels: np.ndarray  # (H, W, 3) float in [0, 1]
    colorspace: str = "srgb"  # "srgb" | "linear"

    def __post_init__(self) -> None:
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError("pixels must be (H, W, 3)")
        if self.colorspace not in ("srgb", "linear"):
            raise ValueError(f"unknown colorspace {self.colorspace!r}")


@dataclass
class FlowField:
    u: np.ndarray  # (H, W) x-displacement in pixels
    v: np.ndarray  # (H, W) y-displacement in pixels

    def __post_init__(self) -> None:
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ValueError("u and v must be 2-D arrays of identical shape")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise ValueError("flow must be finite")


@dataclass
class ManifestRecord:
    scene_id: str
    device_id: int
    raw_path: str
    rgb_path: str
    split: str  # train | val | test
    flow_path: str | None = None
    wb_dg: tuple[float, float, float, float] | None = None

    def __post_init__(self) -> None:
        if self.split not in ("train", "val", "test"):
            raise ValueError(f"unknown split {self.split!r}")
        if self.wb_dg is not None:
            self.wb_dg = tuple(float(g) for g in self.wb_dg)


@dataclass
class Manifest:
    records: list[ManifestRecord]
    root: Path = field(default_factory=Path)

    def __post_init__(self) -> None:
        seen = set()
        for r in self.records:
            key = (r.scene_id, r.device_id)
            if key in seen:
                raise ValueError(f"duplicate record for scene/device {key}")
            seen.add(key)

    def resolve(self, relpath: str) -> Path:
        return self.root / relpath

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def device_ids(self) -> list[int]:
        return sorted({r.device_id for r in self.records})


# --------------------------------------------------------------------------
# RAW (PGM P5, 16-bit big-endian) + JSON sidecar


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def write_raw(raw: RawImage, path: str | Path) -> None:
    path = Path(path)
    h, w = raw.mosaic.shape
    header = f"P5\n{w} {h}\n65535\n".encode("ascii")
    payload = raw.mosaic.astype(">u2").tobytes()
    path.write_bytes(header + payload)
    sidecar = {"cfa": raw.cfa, **raw.meta.to_dict()}
    _sidecar_path(path).write_text(
        json.dumps(sidecar, sort_keys=True, separators=(",", ":")) + "\n"
    )


def _parse_pnm_header(data: bytes, magic: bytes):
    """Returns (width, height, maxval, payload_offset)."""
    if not data.startswith(magic):
        raise ValueError(f"malformed header: expected {magic.decode()} file")
    fields: list[int] = []
    i = len(magic)
    while len(fields) < 3:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        j = i
        while j < len(data) and not data[j : j + 1].isspace():
            j += 1
        token = data[i:j]
        if not token.isdigit():
            raise ValueError("malformed header: non-numeric field")
        fields.append(int(token))
        i = j
    if i >= len(data) or not data[i : i + 1].isspace():
        raise ValueError("malformed header: missing whitespace before payload")
    return fields[0], fields[1], fields[2], i + 1


def read_raw(path: str | Path) -> RawImage:
    path = Path(path)
    sidecar = _sidecar_path(path)
    if not sidecar.exists():
        raise ValueError(f"missing sidecar {sidecar}")
    data = path.read_bytes()
    w, h, maxval, off = _parse_pnm_header(data, b"P5")
    if maxval != 65535:
        raise ValueError(f"expected maxval 65535, got {maxval}")
    expected = h * w * 2
    if len(data) - off != expected:
        raise ValueError("payload size does not match header dimensions")
    mosaic = np.frombuffer(data, dtype=">u2", count=h * w, offset=off)
    mosaic = mosaic.reshape(h, w).astype(np.uint16)
    side = json.loads(sidecar.read_text())
    cfa = side.pop("cfa", "RGGB")
    meta = RawMeta.from_dict(side)
    return RawImage(mosaic=mosaic, meta=meta, cfa=cfa)


# --------------------------------------------------------------------------
# sRGB (PPM P6, 8-bit)


def float_to_byte(pixels: np.ndarray) -> np.ndarray:
    """Quantize [0,1] floats, round half away from zero after clamping."""
    v = np.clip(pixels.astype(np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def write_rgb(img: RgbImage, path: str | Path) -> None:
    path = Path(path)
    h, w, _ = img.pixels.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    path.write_bytes(header + float_to_byte(img.pixels).tobytes())


def read_rgb(path: str | Path, colorspace: str = "srgb") -> RgbImage:
    data = Path(path).read_bytes()
    w, h, maxval, off = _parse_pnm_header(data, b"P6")
    if maxval != 255:
        raise ValueError(f"expected maxval 255, got {maxval}")
    if len(data) - off != h * w * 3:
        raise ValueError("payload size does not match header dimensions")
    bytes_ = np.frombuffer(data, dtype=np.uint8, count=h * w * 3, offset=off)
    pixels = (bytes_.reshape(h, w, 3).astype(np.float32)) / 255.0
    return RgbImage(pixels=pixels, colorspace=colorspace)


# --------------------------------------------------------------------------
# Flow (.flo)


def write_flow(flow: FlowField, path: str | Path) -> None:
    h, w = flow.u.shape
    buf = bytearray()
    buf += np.array([FLOW_MAGIC], dtype="<f4").tobytes()
    buf += np.array([w, h], dtype="<i4").tobytes()
    data = np.stack([flow.u, flow.v], axis=-1).astype("<f4")
    buf += data.tobytes()
    Path(path).write_bytes(bytes(buf))


def read_flow(path: str | Path) -> FlowField:
    data = Path(path).read_bytes()
    magic = np.frombuffer(data, dtype="<f4", count=1, offset=0)[0]
    if magic != np.float32(FLOW_MAGIC):
        raise ValueError("bad flow magic")
    w, h = np.frombuffer(data, dtype="<i4", count=2, offset=4)
    uv = np.frombuffer(data, dtype="<f4", count=2 * h * w, offset=12)
    uv = uv.reshape(int(h), int(w), 2)
    return FlowField(u=uv[..., 0].copy(), v=uv[..., 1].copy())


# --------------------------------------------------------------------------
# Packing and normalization


def normalize_raw(counts, black_level: int, white_level: int):
    """(v - bl) / (wl - bl), clamped to [0, 1]."""
    if not black_level < white_level:
        raise ValueError("black_level must be below white_level")
    v = (np.asarray(counts, dtype=np.float32) - black_level) / (
        white_level - black_level
    )
    return np.clip(v, 0.0, 1.0)


def pack_rggb(raw: RawImage) -> np.ndarray:
    """Mosaic -> (H/2, W/2, 4) normalized tensor, channel order R, G1, G2, B."""
    h, w = raw.mosaic.shape
    if h % 2 or w % 2:
        raise ValueError("mosaic dimensions must be even")
    m = normalize_raw(raw.mosaic, raw.meta.black_level, raw.meta.white_level)
    return np.stack(
        [m[0::2, 0::2], m[0::2, 1::2], m[1::2, 0::2], m[1::2, 1::2]], axis=-1
    )


# --------------------------------------------------------------------------
# Checkpoints ("MICK1")


def save_checkpoint(state: NetworkState, path: str | Path) -> None:
    entries = []
    payload = bytearray()
    for name in sorted(state.tensors):
        t = np.ascontiguousarray(state.tensors[name], dtype="<f4")
        entries.append(
            {
                "name": name,
                "shape": list(t.shape),
                "dtype": "f32",
                "offset": len(payload),
            }
        )
        payload += t.tobytes()
    header = {
        "format": CHECKPOINT_FORMAT,
        "tensors": entries,
        "config": state.config,
        "rng_state": state.rng_state,
    }
    line = json.dumps(header, sort_keys=True, separators=(",", ":"))
    Path(path).write_bytes(line.encode("ascii") + b"\n" + bytes(payload))


def load_checkpoint(path: str | Path) -> NetworkState:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise ValueError("missing checkpoint header line")
    header = json.loads(data[:nl].decode("ascii"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unknown checkpoint format {header.get('format')!r}")
    payload = data[nl + 1 :]
    tensors: dict[str, np.ndarray] = {}
    covered = 0
    for entry in sorted(header["tensors"], key=lambda e: e["offset"]):
        if entry["dtype"] != "f32":
            raise ValueError(f"unsupported dtype {entry['dtype']!r}")
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 4
        if entry["offset"] != covered:
            raise ValueError("tensor offsets are inconsistent")
        covered += nbytes
        if covered > len(payload):
            raise ValueError("tensor extends past payload")
        arr = np.frombuffer(
            payload, dtype="<f4", count=count, offset=entry["offset"]
        )
        tensors[entry["name"]] = arr.reshape(shape).copy()
    if covered != len(payload):
        raise ValueError("payload size does not match tensor table")
    return NetworkState(
        tensors=tensors,
        config=header.get("config", {}),
        rng_state=header.get("rng_state", {}),
    )


# --------------------------------------------------------------------------
# Manifest (JSON Lines)


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    lines = []
    for r in manifest.records:
        d = asdict(r)
        d = {k: v for k, v in d.items() if v is not None}
        lines.append(json.dumps(d, sort_keys=True, separators=(",", ":")))
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    records = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        records.append(
            ManifestRecord(
                scene_id=d["scene_id"],
                device_id=int(d["device_id"]),
                raw_path=d["raw_path"],
                rgb_path=d["rgb_path"],
                split=d["split"],
                flow_path=d.get("flow_path"),
                wb_dg=tuple(d["wb_dg"]) if d.get("wb_dg") is not None else None,
            )
        )
    return Manifest(records=records, root=path.parent)
