"""Command line entry point: ``simulate``, ``train``, ``bench`` and ``eval``.

Configuration comes from a ``key = value`` file (``#`` starts a comment) with
command line flags applied on top.  Every command writes ``manifest.json``
next to its outputs holding the resolved configuration.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure
(including a diverged stage).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys

from .errors import DivergedError
from .evaluation import evaluate_chunks
from .geometry import Intrinsics
from .pose_graph import SelectionConfig, bench_solvers, write_bench_csv
from .radiance import VoxelRadianceField
from .scene_sim import (RenderSettings, export_stream, generate_scene, generate_stream,
                        load_stream, pose_from_dict, pose_to_dict)
from .training import MODES, TrainConfig, incremental_fit

log = logging.getLogger("incremental_nerf")

METRIC_COLUMNS = ["stage", "mode", "chunk", "psnr", "ssim", "mean_rot_err_deg", "mean_trans_err"]


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class RunConfig:
    # scene and stream
    seed: int = 0
    scene_resolution: int = 64
    n_chunks: int = 4
    per_chunk: int = 8
    width: int = 48
    height: int = 48
    fov_deg: float = 40.0
    orbit_radius: float = 3.0
    elevation_deg: float = 25.0
    arc_deg: float = 180.0
    near: float = 1.2
    far: float = 4.8
    samples: int = 64
    # simulated pose estimation
    sigma_rot: float = 0.005
    sigma_trans: float = 0.005
    # training (see TrainConfig)
    iters_per_stage: int = 1000
    rays_per_iter: int = 1024
    lr_field: float = 0.01
    lr_pose: float = 0.005
    field_decay: float = 0.9954
    pose_decay: float = 0.9
    pose_decay_every: int = 100
    grid_resolution: int = 64
    grid_half_extent: float = 1.2
    init_density_raw: float = -3.0
    init_color_raw: float = 0.0
    jitter: bool = False
    # reference selection
    d_select: int = 5
    s_th: float = 0.0
    lam: float = 1.0
    # solver benchmark
    bench_sizes: tuple = (8, 10, 12)
    bench_d: int = 4
    bench_seeds: int = 5
    bench_large_n: int = 194
    bench_large_d: int = 10

    def validate(self):
        ints = ("scene_resolution", "n_chunks", "per_chunk", "width", "height", "samples",
                "grid_resolution", "bench_d", "bench_seeds", "bench_large_n", "bench_large_d")
        for name in ints:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if not 0 < self.near < self.far:
            raise ConfigError("need 0 < near < far")
        if self.sigma_rot < 0 or self.sigma_trans < 0:
            raise ConfigError("noise levels must be nonnegative")
        if not 0 < self.fov_deg < 180:
            raise ConfigError("fov_deg must lie in (0, 180)")
        if any(n < 1 for n in self.bench_sizes):
            raise ConfigError("bench_sizes must be positive")
        try:
            self.train_config()
            self.selection_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def train_config(self):
        names = {f.name for f in dataclasses.fields(TrainConfig)}
        return TrainConfig(**{n: getattr(self, n) for n in names})

    def selection_config(self):
        return SelectionConfig(self.d_select, self.s_th, self.lam)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["bench_sizes"] = list(self.bench_sizes)
        return d


def _parse_value(field, text):
    text = text.strip()
    if field.type in ("bool", bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{field.name}: expected a boolean, got {text!r}")
    if field.type in ("tuple", tuple):
        try:
            return tuple(int(x) for x in text.replace(",", " ").split())
        except ValueError:
            raise ConfigError(f"{field.name}: expected integers, got {text!r}") from None
    cast = int if field.type in ("int", int) else float
    try:
        return cast(text)
    except ValueError:
        raise ConfigError(f"{field.name}: expected {cast.__name__}, got {text!r}") from None


def parse_config_text(text, base=None):
    """Apply ``key = value`` lines to ``base`` (defaults when omitted)."""
    cfg = base if base is not None else RunConfig()
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        setattr(cfg, key, _parse_value(fields[key], value))
    return cfg


def load_config(path=None, seed=None):
    cfg = RunConfig()
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        cfg = parse_config_text(text, cfg)
    if seed is not None:
        cfg.seed = seed
    return cfg.validate()


def write_manifest(out_dir, command, cfg, **extra):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {"command": command, "config": cfg.to_dict(), **extra}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def write_metrics_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def write_poses_json(path, poses, rewards, chunk_of, intrinsics):
    cameras = [{"id": i, "chunk": int(c), **pose_to_dict(p), "reward": float(r)}
               for i, (p, r, c) in enumerate(zip(poses, rewards, chunk_of))]
    with open(path, "w") as fh:
        json.dump({"cameras": cameras, "intrinsics": intrinsics.to_dict()}, fh, indent=1)


def read_poses_json(path):
    with open(path) as fh:
        data = json.load(fh)
    cams = sorted(data["cameras"], key=lambda c: c["id"])
    poses = [pose_from_dict(c) for c in cams]
    return poses, [c["chunk"] for c in cams], Intrinsics.from_dict(data["intrinsics"])


# -- commands ---------------------------------------------------------------


def cmd_simulate(cfg, out_dir):
    scene = generate_scene(cfg.seed, resolution=cfg.scene_resolution)
    k = Intrinsics.from_fov(cfg.width, cfg.height, cfg.fov_deg)
    render = RenderSettings(cfg.near, cfg.far, cfg.samples)
    stream = generate_stream(scene, cfg.n_chunks, cfg.per_chunk, k, render,
                             cfg.orbit_radius, cfg.elevation_deg, cfg.arc_deg)
    export_stream(stream, out_dir)
    scene.gt_field.save(os.path.join(out_dir, "gt_field.ilnf"))
    write_manifest(out_dir, "simulate", cfg, scene_checksum=scene.gt_field.checksum())
    return stream


def cmd_train(cfg, stream_dir, mode, out_dir):
    stream = load_stream(stream_dir)
    os.makedirs(out_dir, exist_ok=True)
    write_manifest(out_dir, "train", cfg, mode=mode, stream=os.path.abspath(stream_dir))
    csv_path = os.path.join(out_dir, "metrics.csv")

    def on_stage_end(t, state, metrics):
        state.field.save(os.path.join(out_dir, f"field_stage{t}.ilnf"))
        write_poses_json(os.path.join(out_dir, f"poses_stage{t}.json"), state.poses,
                         state.rewards, state.chunk_of, stream.intrinsics)
        write_metrics_csv(metrics, csv_path)

    result = incremental_fit(stream, cfg.train_config(), mode, cfg.sigma_rot, cfg.sigma_trans,
                             oracle_seed=cfg.seed, on_stage_end=on_stage_end)
    return result


def cmd_bench(cfg, out_csv):
    sel = SelectionConfig(cfg.bench_d, 0.0, cfg.lam)
    seeds = range(cfg.seed, cfg.seed + cfg.bench_seeds)
    rows = bench_solvers(list(cfg.bench_sizes), sel, seeds)
    large = SelectionConfig(cfg.bench_large_d, 0.0, cfg.lam)
    rows += bench_solvers([cfg.bench_large_n], large, seeds, budget=0)
    out_dir = os.path.dirname(os.path.abspath(out_csv))
    os.makedirs(out_dir, exist_ok=True)
    write_bench_csv(rows, out_csv)
    write_manifest(out_dir, "bench", cfg, output=os.path.basename(out_csv))
    return rows


def cmd_eval(checkpoint, poses_path, stream_dir, out_dir, mode="eval"):
    field = VoxelRadianceField.load(checkpoint)
    poses, chunk_of, _ = read_poses_json(poses_path)
    stream = load_stream(stream_dir)
    rows = evaluate_chunks(field, poses, chunk_of, stream)
    os.makedirs(out_dir, exist_ok=True)
    write_metrics_csv([{"stage": "", "mode": mode, **r} for r in rows],
                      os.path.join(out_dir, "eval.csv"))
    return rows


# -- argument handling ------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="incremental-nerf", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", required=True, help="output directory")
        return sp

    common(sub.add_parser("simulate", help="render a synthetic chunk stream"))
    t = common(sub.add_parser("train", help="incremental training over a stream"))
    t.add_argument("--stream", required=True, help="directory written by simulate")
    t.add_argument("--mode", choices=MODES, default="full")
    common(sub.add_parser("bench", help="greedy vs brute-force selection timings"))
    e = sub.add_parser("eval", help="score a checkpoint against the hidden ground truth")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--poses", required=True, help="pose JSON written by train")
    e.add_argument("--stream", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--mode", default="eval", help="label for the mode column")
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors (1) and --help (0)
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "eval":
            rows = cmd_eval(args.checkpoint, args.poses, args.stream, args.out, args.mode)
            for r in rows:
                print(f"chunk {r['chunk']}: psnr {r['psnr']:.3f} ssim {r['ssim']:.4f} "
                      f"rot {r['mean_rot_err_deg']:.4f} deg trans {r['mean_trans_err']:.5f}")
            return 0
        cfg = load_config(args.config, args.seed)
        if args.command == "simulate":
            cmd_simulate(cfg, args.out)
        elif args.command == "train":
            result = cmd_train(cfg, args.stream, args.mode, args.out)
            final = [m for m in result.metrics if m["stage"] == cfg.n_chunks - 1]
            for r in final:
                print(f"chunk {r['chunk']}: psnr {r['psnr']:.3f}")
        elif args.command == "bench":
            rows = cmd_bench(cfg, os.path.join(args.out, "bench.csv"))
            print(f"wrote {len(rows)} rows to {os.path.join(args.out, 'bench.csv')}")
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: missing file {exc.filename}", file=sys.stderr)
        return 1
    except DivergedError as exc:
        print(f"error: training diverged at stage {exc.stage}, iteration {exc.iteration}",
              file=sys.stderr)
        return 2
    except (OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0
