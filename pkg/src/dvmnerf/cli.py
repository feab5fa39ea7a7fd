"""Command-line entry point.

Every command writes its artifacts under ``--out`` with fixed names and a
``manifest.txt`` recording the arguments, resolved configuration and input
hashes. ``dvmnerf rerun <manifest>`` replays a run and checks that the outputs
come out byte-identical.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import sys
import tempfile
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import (SceneDataset, View, default_scene, load_transforms, make_ring_cameras, oracle_view,
                   save_transforms, write_image, write_mask)
from .errors import ConfigError, DVMError, ValidationError
from .field import load_checkpoint, predict_depth_map, render_view, save_checkpoint
from .geometry import CameraIntrinsics, camera_centres, fps_select
from .metrics import MetricReport
from .morph import PairFilterConfig, morph_pair, pair_valid, rectified_clouds
from .rectify import rectify_pair
from .trainer import TrainConfig, train

log = logging.getLogger("dvmnerf")

CHECKPOINT = "checkpoint.bin"
TRAIN_LOG = "train_log.txt"
METRICS = "metrics.txt"
MANIFEST = "manifest.txt"
VIEWS = "views.txt"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


# ------------------------------------------------------------ config files

def _coerce(name: str, raw: str, kind):
    raw = raw.strip()
    if raw.lower() in ("none", "null", "") and "None" in str(kind):
        return None
    try:
        if "bool" in str(kind):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if "int" in str(kind) and "float" not in str(kind):
            return int(raw)
        if "float" in str(kind):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n} is not key = value: {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"unknown config key {key!r} on line {n}")
        values[key] = _coerce(key, raw, types[key])
    return values


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.as_dict().items())


def resolve_config(path: str | None, overrides: list[str], **flags) -> TrainConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update(parse_config_text("\n".join(overrides)))
    values.update({k: v for k, v in flags.items() if v is not None})
    try:
        return TrainConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------- manifest

def hash_path(path) -> str:
    """sha256 of a file, or of every file below a directory in sorted order."""
    path = Path(path)
    h = hashlib.sha256()
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for p in files:
        if path.is_dir():
            h.update(str(p.relative_to(path)).encode() + b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()


def write_manifest(out: Path, argv: list[str], inputs: dict, config: dict | None = None,
                   seed: int | None = None) -> None:
    outputs = {p.name: hash_path(p) for p in sorted(out.iterdir()) if p.is_file() and p.name != MANIFEST}
    manifest = {"tool": "dvmnerf", "version": __version__, "argv": argv,
                "inputs": {k: {"path": str(v), "sha256": hash_path(v)} for k, v in inputs.items() if v},
                "config": config or {}, "seed": seed, "outputs": outputs}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_indices(path) -> list[int]:
    try:
        return [int(tok) for tok in Path(path).read_text().split()]
    except ValueError as exc:
        raise ValidationError(f"{path} must list integer view indices") from exc


def _select(views: list[View], indices: list[int] | None) -> list[View]:
    if indices is None:
        return views
    bad = [i for i in indices if not 0 <= i < len(views)]
    if bad:
        raise ValidationError(f"view indices {bad} out of range for {len(views)} views")
    return [views[i] for i in indices]


# ---------------------------------------------------------------- commands

def cmd_make_scene(args) -> None:
    out = _out_dir(args.out)
    k = CameraIntrinsics.from_fov(0.6911112, args.size, args.size)
    elev = math.radians(args.elevation)
    scene = default_scene()
    train_cams = make_ring_cameras(args.candidates, args.radius, elev, intrinsics=k)
    test_cams = make_ring_cameras(args.test, args.radius, elev, intrinsics=k, azimuth_offset=math.pi / args.test)
    for split, cams in (("train", train_cams), ("test", test_cams)):
        save_transforms(out, split, [oracle_view(scene, c) for c in cams], args.near, args.far)
    write_manifest(out, args.argv, {})


def cmd_select_views(args) -> None:
    ds = load_transforms(args.data)
    views = ds[args.split]
    idx = fps_select(camera_centres([v.camera for v in views]), args.n, args.seed_index)
    out = _out_dir(args.out)
    (out / VIEWS).write_text("".join(f"{i}\n" for i in idx))
    write_manifest(out, args.argv, {"data": args.data})
    print(" ".join(map(str, idx)))


def _evaluate(field, views, near, far, n_coarse, n_fine) -> MetricReport:
    report = MetricReport()
    for i, v in enumerate(views):
        img, _, _ = render_view(field, v.camera, near, far, n_coarse, n_fine)
        report.add(v.name or f"view_{i:03d}", img, v.image)
    return report


def cmd_train(args) -> None:
    cfg = resolve_config(args.config, args.set or [], dvm=args.dvm, seed=args.seed)
    ds = load_transforms(args.data)
    indices = _read_indices(args.views) if args.views else None
    train_views = _select(ds["train"], indices)
    held_out = ds.splits.get(args.eval_split, []) if args.eval_split else []
    out = _out_dir(args.out)
    records = []
    result = train(SceneDataset({"train": train_views}, ds.near, ds.far, ds.background), cfg,
                   held_out=held_out, log_fn=records.append)
    with open(out / TRAIN_LOG, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    near = cfg.t_near if cfg.t_near is not None else ds.near
    far = cfg.t_far if cfg.t_far is not None else ds.far
    extra = {"config": cfg.as_dict(), "near": near, "far": far, "views": indices}
    digest = save_checkpoint(out / CHECKPOINT, result.field, extra)
    if held_out:
        _evaluate(result.field, held_out, near, far, cfg.n_coarse, cfg.n_fine).write(out / METRICS)
    write_manifest(out, args.argv, {"data": args.data, "config": args.config, "views": args.views},
                   cfg.as_dict(), cfg.seed)
    print(digest)


def cmd_eval(args) -> None:
    field, extra = load_checkpoint(args.checkpoint)
    ds = load_transforms(args.data)
    if args.split not in ds.splits:
        raise ValidationError(f"dataset has no {args.split!r} split")
    cfg = extra.get("config", {})
    near = extra.get("near", ds.near)
    far = extra.get("far", ds.far)
    report = _evaluate(field, ds[args.split], near, far, cfg.get("n_coarse", 32), cfg.get("n_fine", 64))
    out = _out_dir(args.out)
    report.write(out / METRICS)
    write_manifest(out, args.argv, {"checkpoint": args.checkpoint, "data": args.data})
    print(f"{report.mean_psnr:.4f}\t{report.mean_ssim:.4f}")


def cmd_morph(args) -> None:
    ds = load_transforms(args.data)
    views = ds[args.split]
    a, b = _select(views, [args.a, args.b])
    validity = pair_valid(a.camera, b.camera, PairFilterConfig(args.gamma))
    if not validity.valid:
        raise ValidationError(f"pair ({args.a}, {args.b}) rejected: {validity.reason}")
    if args.depth_source == "oracle":
        if a.depth is None or b.depth is None:
            raise ValidationError("oracle depth requested but the dataset has no depth maps")
        (da, ma), (db, mb) = (a.depth, a.depth_mask), (b.depth, b.depth_mask)
    else:
        if not args.checkpoint:
            raise ValidationError("--checkpoint is required with --depth-source checkpoint")
        field, extra = load_checkpoint(args.checkpoint)
        cfg = extra.get("config", {})
        near, far = extra.get("near", ds.near), extra.get("far", ds.far)
        thr = cfg.get("opacity_threshold", 0.5)
        nc, nf = cfg.get("n_coarse", 32), cfg.get("n_fine", 64)
        da, ma = predict_depth_map(field, a.camera, near, far, thr, nc, nf)
        db, mb = predict_depth_map(field, b.camera, near, far, thr, nc, nf)
    rect = rectify_pair(a.camera, a.image, da, b.camera, b.image, db, mask_k=a.valid & ma, mask_k2=b.valid & mb,
                        depth_mask_k=ma, depth_mask_k2=mb)
    clouds = rectified_clouds(rect)
    morphs = []
    for alpha in args.alpha:
        if not 0.0 <= alpha <= 1.0:
            raise ValidationError(f"alpha must lie in [0, 1], got {alpha}")
        r = morph_pair(rect, alpha, clouds=clouds)
        morphs.append(View(f"alpha_{alpha:.4f}", r.image, r.camera, r.mask, r.depth, r.mask))
    out = _out_dir(args.out)
    save_transforms(out, "morph", morphs, ds.near, ds.far)
    for i, m in enumerate(morphs):
        write_image(out / f"morph_{i:02d}.png", m.image)
        write_mask(out / f"morph_{i:02d}_mask.png", m.mask)
    write_manifest(out, args.argv, {"data": args.data, "checkpoint": args.checkpoint})


def cmd_rerun(args) -> None:
    manifest = json.loads(Path(args.manifest).read_text())
    argv = list(manifest["argv"])
    if "--out" not in argv:
        raise ValidationError("manifest argv has no --out")
    out = args.out or tempfile.mkdtemp(prefix="dvmnerf-rerun-")
    argv[argv.index("--out") + 1] = out
    code = main(argv)
    if code != 0:
        raise DVMError(f"replayed command exited with {code}")
    replayed = json.loads((Path(out) / MANIFEST).read_text())["outputs"]
    diffs = sorted(k for k in set(replayed) | set(manifest["outputs"])
                   if replayed.get(k) != manifest["outputs"].get(k))
    if diffs:
        raise DVMError(f"outputs differ from the manifest: {', '.join(diffs)}")
    print(f"reproduced {len(replayed)} outputs in {out}")


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dvmnerf", description="Few-shot radiance fields with depth-based view morphing.")
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("make-scene", help="render the analytic oracle scene to a transforms dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--candidates", type=int, default=100, help="ring cameras in the train split")
    s.add_argument("--test", type=int, default=8, help="held-out ring cameras")
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--radius", type=float, default=4.0)
    s.add_argument("--elevation", type=float, default=30.0, help="degrees")
    s.add_argument("--near", type=float, default=2.0)
    s.add_argument("--far", type=float, default=6.0)
    s.set_defaults(func=cmd_make_scene)

    s = sub.add_parser("select-views", help="farthest point sampling over camera centres")
    s.add_argument("--data", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed-index", type=int, default=0)
    s.add_argument("--split", default="train")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_select_views)

    s = sub.add_parser("train", help="train a field, optionally with view morphing")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--views", help="file of train-split indices (e.g. views.txt from select-views)")
    s.add_argument("--config", help="flat key = value file of training options")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config value")
    s.add_argument("--dvm", choices=("on", "off", "oracle-depth"))
    s.add_argument("--seed", type=int)
    s.add_argument("--eval-split", default="test", help="split scored during and after training ('' to skip)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("morph", help="rectify and morph one view pair")
    s.add_argument("--data", required=True)
    s.add_argument("--a", type=int, required=True)
    s.add_argument("--b", type=int, required=True)
    s.add_argument("--alpha", type=lambda t: [float(x) for x in t.split(",")], default=[0.5],
                   help="comma-separated positions in [0, 1]")
    s.add_argument("--depth-source", choices=("oracle", "checkpoint"), default="oracle")
    s.add_argument("--checkpoint")
    s.add_argument("--gamma", type=float, default=6.0)
    s.add_argument("--split", default="train")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_morph)

    s = sub.add_parser("rerun", help="replay a manifest and verify byte-identical outputs")
    s.add_argument("manifest")
    s.add_argument("--out", help="directory for the replay (default: a fresh temporary directory)")
    s.set_defaults(func=cmd_rerun)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.argv = argv
        torch.set_num_threads(1)  # bit-exact replays need a fixed reduction order
        args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DVMError, OSError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
