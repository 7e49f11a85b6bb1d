"""Command-line entry point wiring all modules into reproducible commands.

Every subcommand reads one optional JSON config file; individual
``--set dotted.path=value`` flags override config keys.  Unknown keys are
rejected.  Each command echoes its effective configuration next to its
outputs and is byte-deterministic given config + seed.  Errors leave a
machine-readable JSON object on stderr and a nonzero exit code.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np

CONFIG_SECTIONS = ("synth", "model", "train", "loss")


class CliError(Exception):
    pass


# --------------------------------------------------------------------------
# Config plumbing


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_override(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise CliError(f"cannot override through non-object key {k!r}")
    node[keys[-1]] = value


def load_config(args) -> dict:
    cfg: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"config file {path} does not exist")
        cfg = json.loads(path.read_text())
        unknown = set(cfg) - set(CONFIG_SECTIONS)
        if unknown:
            raise CliError(f"unknown config sections: {sorted(unknown)}")
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise CliError(f"--set expects key.path=value, got {item!r}")
        dotted, _, raw = item.partition("=")
        if dotted.split(".")[0] not in CONFIG_SECTIONS:
            raise CliError(f"unknown config section in {dotted!r}")
        _apply_override(cfg, dotted, _parse_value(raw))
    return cfg


def _build_section(section: dict, cls, base: dict | None = None):
    allowed = {f.name for f in dataclass_fields(cls)}
    unknown = set(section) - allowed - {"variant"}
    if unknown:
        raise CliError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    merged = dict(base or {})
    merged.update({k: v for k, v in section.items() if k != "variant"})
    return cls.from_dict(merged) if hasattr(cls, "from_dict") else cls(**merged)


def model_config_from(cfg: dict):
    from polyisp.nnisp.config import ModelConfig

    section = dict(cfg.get("model", {}))
    variant = section.get("variant", "toy")
    if variant not in ("toy", "full"):
        raise CliError(f"model.variant must be 'toy' or 'full', got {variant!r}")
    base = (ModelConfig.toy() if variant == "toy" else ModelConfig.full()).to_dict()
    return _build_section(section, ModelConfig, base)


def train_config_from(cfg: dict):
    from polyisp.train import TrainConfig

    return _build_section(cfg.get("train", {}), TrainConfig)


def synth_config_from(cfg: dict):
    from polyisp.data import SynthConfig

    return _build_section(cfg.get("synth", {}), SynthConfig)


def echo_config(cfg: dict, target: Path, command: str) -> None:
    payload = {"command": command, "config": cfg}
    if target.suffix:
        path = target.with_name(target.name + ".config.json")
    else:
        target.mkdir(parents=True, exist_ok=True)
        path = target / "effective_config.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# Checkpoint/model helpers


def _load_state(path: str):
    import polyisp.imageio as iio

    p = Path(path)
    if not p.exists():
        raise CliError(f"checkpoint {p} does not exist")
    return iio.load_checkpoint(p)


def _num_devices(state) -> int:
    return int(state.config["model"]["num_devices"])


def _weights_from_args(args, state) -> np.ndarray:
    k = _num_devices(state)
    if getattr(args, "weights", None):
        w = np.array([float(t) for t in args.weights.split(",")], dtype=np.float32)
        if w.shape[0] != k:
            raise CliError(f"expected {k} weights, got {w.shape[0]}")
        total = float(np.clip(w, 0, None).sum())
        if np.any(w < 0) or abs(total - 1.0) > 1e-6:
            if total == 0:
                raise CliError("weights must have positive mass")
            print(
                "warning: weights not on the simplex, normalizing",
                file=sys.stderr,
            )
            w = np.clip(w, 0, None) / total
        return w
    device = getattr(args, "device", None)
    if device is None:
        raise CliError("provide --device or --weights")
    if device < 0 or device >= k:
        raise CliError(
            f"unknown device id {device}; valid ids: {list(range(k))}"
        )
    w = np.zeros(k, dtype=np.float32)
    w[device] = 1.0
    return w


def _infer_rgb(state, raw_path: str, weights: np.ndarray, pipeline: str):
    import torch

    import polyisp.imageio as iio
    from polyisp.nnisp.model import model_from_state

    torch.set_num_threads(1)
    raw = iio.read_raw(raw_path)
    x4 = np.moveaxis(iio.pack_rggb(raw), -1, 0)[None]
    model = model_from_state(state)
    model.eval()
    with torch.no_grad():
        y, aux = model(
            torch.as_tensor(x4, dtype=torch.float32),
            torch.as_tensor([raw.meta.wb_gains], dtype=torch.float32),
            torch.as_tensor([raw.meta.iso], dtype=torch.float32),
            torch.as_tensor([raw.meta.exposure_s], dtype=torch.float32),
            torch.as_tensor(weights[None]),
            pipeline=pipeline,
        )
    rgb = np.moveaxis(y[0].numpy(), 0, -1)
    return rgb, aux


# --------------------------------------------------------------------------
# Subcommand implementations


def cmd_synth_data(args) -> int:
    from polyisp.data import build_synth_dataset

    cfg = load_config(args)
    synth = synth_config_from(cfg)
    out = Path(args.out)
    manifest = build_synth_dataset(synth, out)
    echo_config(cfg, out, "synth-data")
    print(json.dumps({"manifest": str(out / "manifest.jsonl"),
                      "records": len(manifest.records)}))
    return 0


def _run_training(args, command: str) -> int:
    import polyisp.imageio as iio
    from polyisp.train import train

    cfg = load_config(args)
    model_cfg = model_config_from(cfg)
    train_cfg = train_config_from(cfg)
    manifest = iio.load_manifest(args.manifest)
    out = Path(args.out)
    final = train(
        manifest,
        model_cfg,
        train_cfg,
        out,
        init=args.init,
        resume=bool(getattr(args, "resume", False)),
    )
    echo_config(cfg, out, command)
    print(json.dumps({"checkpoint": str(final)}))
    return 0


def cmd_train(args) -> int:
    return _run_training(args, "train")


def cmd_pretrain(args) -> int:
    return _run_training(args, "pretrain")


def cmd_eval(args) -> int:
    import polyisp.imageio as iio
    from polyisp.train import evaluate

    cfg = load_config(args)
    manifest = iio.load_manifest(args.manifest)
    state = _load_state(args.checkpoint)
    report = evaluate(manifest, args.split, state, pipeline=args.pipeline)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json() + "\n")
    (out / "metrics.txt").write_text(report.to_text() + "\n")
    echo_config(cfg, out, "eval")
    print(report.to_text())
    return 0


def cmd_infer(args) -> int:
    import polyisp.imageio as iio
    from polyisp.imageio import RgbImage

    cfg = load_config(args)
    state = _load_state(args.checkpoint)
    weights = _weights_from_args(args, state)
    rgb, _ = _infer_rgb(state, args.raw, weights, args.pipeline)
    out = Path(args.out)
    iio.write_rgb(RgbImage(pixels=rgb, colorspace="srgb"), out)
    echo_config(cfg, out, "infer")
    print(json.dumps({"output": str(out)}))
    return 0


def cmd_interp_grid(args) -> int:
    import polyisp.imageio as iio
    from polyisp.imageio import RgbImage

    cfg = load_config(args)
    state = _load_state(args.checkpoint)
    k = _num_devices(state)
    for d in (args.frm, args.to):
        if d < 0 or d >= k:
            raise CliError(f"unknown device id {d}; valid ids: {list(range(k))}")
    if args.steps < 2:
        raise CliError("need at least 2 interpolation steps")
    tiles = []
    for t in np.linspace(0.0, 1.0, args.steps):
        w = np.zeros(k, dtype=np.float32)
        w[args.frm] = 1.0 - t
        w[args.to] = w[args.to] + t
        rgb, _ = _infer_rgb(state, args.raw, w, args.pipeline)
        tiles.append(rgb)
    grid = np.concatenate(tiles, axis=1)
    out = Path(args.out)
    iio.write_rgb(RgbImage(pixels=grid, colorspace="srgb"), out)
    echo_config(cfg, out, "interp-grid")
    print(json.dumps({"output": str(out), "steps": args.steps}))
    return 0


def cmd_estimate_wb(args) -> int:
    state = _load_state(args.checkpoint)
    weights = _weights_from_args(args, state)
    _, aux = _infer_rgb(state, args.raw, weights, "learned-wb")
    wb = [float(v) for v in aux.wb_used[0]]
    print(json.dumps({"wb": wb}))
    return 0


def cmd_isp(args) -> int:
    import polyisp.imageio as iio
    from polyisp.refisp import load_presets, render_device

    cfg = load_config(args)
    presets = load_presets(args.presets)
    match = [p for p in presets if p.device_id == args.device]
    if not match:
        raise CliError(
            f"unknown device id {args.device}; valid ids: "
            f"{[p.device_id for p in presets]}"
        )
    raw = iio.read_raw(args.raw)
    rgb = render_device(raw, match[0])
    out = Path(args.out)
    iio.write_rgb(rgb, out)
    echo_config(cfg, out, "isp")
    print(json.dumps({"output": str(out)}))
    return 0


def cmd_flow(args) -> int:
    import polyisp.imageio as iio
    from polyisp.align import flow_block_match

    src = iio.read_rgb(args.src)
    dst = iio.read_rgb(args.dst)
    flow = flow_block_match(src, dst, levels=args.levels, radius=args.radius)
    iio.write_flow(flow, args.out)
    print(json.dumps({"output": args.out}))
    return 0


def cmd_warp(args) -> int:
    import polyisp.imageio as iio
    from polyisp.align import warp_bilinear
    from polyisp.imageio import RgbImage

    img = iio.read_rgb(args.image)
    flow = iio.read_flow(args.flow)
    warped, mask = warp_bilinear(img, flow)
    iio.write_rgb(
        RgbImage(pixels=warped.astype(np.float32), colorspace=img.colorspace),
        args.out,
    )
    if args.mask_out:
        m3 = np.repeat(mask[:, :, None].astype(np.float32), 3, axis=2)
        iio.write_rgb(RgbImage(pixels=m3, colorspace="linear"), args.mask_out)
    print(json.dumps({"output": args.out}))
    return 0


def cmd_gradcheck(args) -> int:
    from polyisp.train import GRAD_CHECK_BLOCKS, grad_check

    blocks = GRAD_CHECK_BLOCKS if args.blocks == "all" else args.blocks.split(",")
    failed = []
    for block in blocks:
        tol = 1e-3 if block == "forward" else 1e-4
        err, worst = grad_check(block)
        ok = err < tol
        if not ok:
            failed.append(block)
        print(json.dumps({"block": block, "max_rel_err": err, "tol": tol,
                          "pass": ok, "worst": worst}))
    return 1 if failed else 0


# --------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="polyisp",
        description="Multi-device neural ISP: synthesize data, train, "
        "render, and verify.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument(
            "--set",
            action="append",
            metavar="KEY.PATH=VALUE",
            help="override a config key (repeatable)",
        )

    p = sub.add_parser("synth-data", help="build a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_data)

    for name, fn in (("train", cmd_train), ("pretrain", cmd_pretrain)):
        p = sub.add_parser(name, help=f"{name} on a manifest")
        common(p)
        p.add_argument("--manifest", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--init", help="checkpoint to initialize from")
        p.add_argument("--resume", action="store_true",
                       help="restore optimizer/rng/epoch from --init")
        p.set_defaults(func=fn)

    p = sub.add_parser("eval", help="metric report for a checkpoint")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--pipeline", default="meta-wb",
                   choices=["meta-wb", "learned-wb"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="render one RAW with a checkpoint")
    common(p)
    p.add_argument("--raw", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--device", type=int)
    p.add_argument("--weights", help="comma-separated device weights")
    p.add_argument("--pipeline", default="meta-wb",
                   choices=["meta-wb", "learned-wb"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("interp-grid",
                       help="horizontal grid of interpolated renditions")
    common(p)
    p.add_argument("--raw", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--from", dest="frm", type=int, required=True)
    p.add_argument("--to", dest="to", type=int, required=True)
    p.add_argument("--steps", type=int, default=3)
    p.add_argument("--pipeline", default="meta-wb",
                   choices=["meta-wb", "learned-wb"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_interp_grid)

    p = sub.add_parser("estimate-wb", help="print the estimated white balance")
    common(p)
    p.add_argument("--raw", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--device", type=int)
    p.add_argument("--weights")
    p.set_defaults(func=cmd_estimate_wb)

    p = sub.add_parser("isp", help="reference-ISP rendition of a RAW")
    common(p)
    p.add_argument("--raw", required=True)
    p.add_argument("--presets", required=True)
    p.add_argument("--device", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_isp)

    p = sub.add_parser("flow", help="estimate flow between two images")
    common(p)
    p.add_argument("--src", required=True)
    p.add_argument("--dst", required=True)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--radius", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("warp", help="warp an image by a flow field")
    common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--flow", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask-out")
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("gradcheck", help="finite-difference gradient report")
    common(p)
    p.add_argument("--blocks", default="all")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ValueError, RuntimeError, OSError) as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 2


if __name__ == "__main__":
    sys.exit(main())
