"""Command-line entry points: train, render, export-ply, import-ply, eval."""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .config import (ConfigError, RunConfig, config_from_dict, config_json,
                     dump_config, load_config)
from .core import GaussianCloud, InvalidInputError, init_cloud
from .evaluation import evaluate_against_oracle
from .io_ply import PlyFormatError, export_ply, import_ply
from .metrics import MetricsWriter
from .protocol import GuidanceRemoteError, ProtocolError, RemoteGuidance
from .rasterizer import render
from .scenes import SceneSpec
from .surface import _orbit_camera
from .trainer import GuidanceContext, PhotometricGuidance, Trainer

log = logging.getLogger("mvsplat")


def _build_guidance(cfg: RunConfig):
    if cfg.guidance.mode == "remote":
        return RemoteGuidance(cfg.guidance.remote_addr, timeout=cfg.guidance.timeout)
    return PhotometricGuidance(cfg.guidance.scene, supersample=cfg.guidance.supersample)


def _build_trainer(cfg: RunConfig, cloud: GaussianCloud | None = None) -> Trainer:
    guidance = _build_guidance(cfg)
    context = GuidanceContext(
        prompt=cfg.guidance.prompt, negative_prompt=cfg.guidance.negative_prompt,
        guidance_scale=cfg.guidance.guidance_scale,
        t_range=(cfg.guidance.t_min, cfg.guidance.t_max))
    if cloud is None:
        cloud = init_cloud(cfg.init_gaussians, cfg.scene.scene_extent, cfg.seed)
    return Trainer(cloud, cfg.scene, cfg.schedule, guidance,
                   regularizers=cfg.regularizers, settings=cfg.training,
                   context=context, seed=cfg.seed)


def _save_run_checkpoint(path, trainer: Trainer, step: int, cfg: RunConfig) -> None:
    ckpt_io.save_checkpoint(path, trainer.cloud, step, weights=trainer.weights,
                            opt=trainer.opt, rng=trainer.rng, surface=trainer.surface,
                            config_json=config_json(cfg))


def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config)
    except (ConfigError, InvalidInputError, OSError) as exc:
        print(f"error: invalid config {args.config}: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output.out_dir = args.out
    if args.deterministic:
        cfg.deterministic = True
    if args.guidance is not None:
        cfg.guidance.mode = args.guidance
    if args.remote_addr is not None:
        cfg.guidance.remote_addr = args.remote_addr
    if cfg.deterministic:
        os.environ["MVGS_THREADS"] = "1"

    out_dir = Path(cfg.output.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out_dir / "used_config.yaml")

    start_step = 0
    trainer = _build_trainer(cfg)
    if args.resume:
        try:
            ck = ckpt_io.load_checkpoint(args.resume)
        except (ckpt_io.CheckpointError, OSError) as exc:
            print(f"error: cannot resume from {args.resume}: {exc}", file=sys.stderr)
            return 2
        ckpt_io.restore_trainer(trainer, ck)
        start_step = ck.step
        log.info("resumed from %s at step %d (N=%d)", args.resume, start_step,
                 len(trainer.cloud))

    metrics_path = out_dir / "metrics.jsonl"
    total = cfg.training.total_steps
    snap = cfg.output.snapshot_interval
    status = 0
    with MetricsWriter(metrics_path, append=bool(args.resume)) as mw:
        step = start_step
        try:
            for step in range(start_step + 1, total + 1):
                rep = trainer.train_step(step)
                mw.write(rep.record(include_timing=not cfg.deterministic))
                if step % cfg.output.log_interval == 0 or rep.aborted:
                    log.info("step %d/%d N=%d l_sds=%.5f l_s=%.4f l_p=%.5f%s",
                             step, total, rep.n_gaussians, rep.l_sds, rep.l_s,
                             rep.l_p, " [ABORTED]" if rep.aborted else "")
                if step % snap == 0:
                    _save_run_checkpoint(out_dir / f"ckpt_{step:06d}.mvgs",
                                         trainer, step, cfg)
        except (GuidanceRemoteError, ProtocolError, OSError) as exc:
            print(f"error: guidance failure at step {step}: {exc}", file=sys.stderr)
            _save_run_checkpoint(out_dir / f"ckpt_failure_{step:06d}.mvgs",
                                 trainer, step, cfg)
            status = 3
        finally:
            trainer.guidance.close()
    if status == 0:
        _save_run_checkpoint(out_dir / "ckpt_final.mvgs", trainer, total, cfg)
        export_ply(trainer.cloud, out_dir / "cloud_final.ply")
        log.info("finished %d steps; N=%d", total, len(trainer.cloud))
    return status


def _load_cloud_and_config(path):
    ck = ckpt_io.load_checkpoint(path)
    cfg = (config_from_dict(json.loads(ck.config_json))
           if ck.config_json else RunConfig())
    return ck.cloud, cfg, ck


def _to_png(img: np.ndarray, path) -> None:
    from PIL import Image
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _depth_to_png16(depth: np.ndarray, path) -> None:
    from PIL import Image
    dmax = depth.max()
    scaled = (depth / dmax * 65535.0) if dmax > 0 else depth
    Image.fromarray(np.round(scaled).astype(np.uint16)).save(path)


def cmd_render(args) -> int:
    try:
        cloud, cfg, _ = _load_cloud_and_config(args.checkpoint)
    except (ckpt_io.CheckpointError, OSError, ConfigError) as exc:
        print(f"error: cannot read checkpoint {args.checkpoint}: {exc}", file=sys.stderr)
        return 2
    scene = cfg.scene
    bg = np.asarray(cfg.eval.background, dtype=float)
    if args.turntable:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        for i in range(args.turntable):
            az = 360.0 * i / args.turntable
            cam = _orbit_camera(az, args.elevation, scene)
            out = render(cloud, cam, bg)
            _to_png(out.color, out_dir / f"view_{i:03d}.png")
        return 0
    cam = _orbit_camera(args.azimuth, args.elevation, scene)
    out = render(cloud, cam, bg)
    _to_png(out.color, args.out)
    if args.depth_out:
        _depth_to_png16(out.depth, args.depth_out)
    return 0


def cmd_export_ply(args) -> int:
    try:
        cloud, _, _ = _load_cloud_and_config(args.checkpoint)
        export_ply(cloud, args.out)
    except (ckpt_io.CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def cmd_import_ply(args) -> int:
    try:
        cloud = import_ply(args.ply)
        ckpt_io.save_checkpoint(args.out, cloud, step=0)
    except (PlyFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"imported {len(cloud)} Gaussians")
    return 0


def cmd_eval(args) -> int:
    try:
        cloud, cfg, _ = _load_cloud_and_config(args.checkpoint)
    except (ckpt_io.CheckpointError, OSError, ConfigError) as exc:
        print(f"error: cannot read checkpoint {args.checkpoint}: {exc}", file=sys.stderr)
        return 2
    result = evaluate_against_oracle(
        cloud, cfg.guidance.scene, cfg.scene, n_views=cfg.eval.views,
        elevation_deg=cfg.eval.elevation_deg, background=cfg.eval.background,
        supersample=cfg.eval.supersample)
    record = result.record()
    with open(args.out, "w") as fh:
        json.dump(record, fh, indent=2)
    shown = "exact match" if result.exact_match else f"{result.psnr_overall:.2f} dB"
    print(f"PSNR over {cfg.eval.views} views: {shown}; N={result.n_gaussians}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvsplat",
                                description="Gaussian splat optimization engine")
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the optimization loop")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--resume", default=None)
    t.add_argument("--deterministic", action="store_true")
    t.add_argument("--guidance", choices=("photometric", "remote"), default=None)
    t.add_argument("--remote-addr", default=None)
    t.add_argument("--out", default=None)
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("render", help="render a checkpoint to PNG")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--azimuth", type=float, default=0.0)
    r.add_argument("--elevation", type=float, default=15.0)
    r.add_argument("--out", required=True)
    r.add_argument("--depth-out", default=None)
    r.add_argument("--turntable", type=int, default=0,
                   help="render N evenly spaced views into OUT directory")
    r.set_defaults(fn=cmd_render)

    e = sub.add_parser("export-ply", help="write the splat cloud as binary PLY")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_export_ply)

    i = sub.add_parser("import-ply", help="read a PLY cloud into a checkpoint")
    i.add_argument("--ply", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(fn=cmd_import_ply)

    v = sub.add_parser("eval", help="turntable PSNR against the oracle scene")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--out", required=True)
    v.set_defaults(fn=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
