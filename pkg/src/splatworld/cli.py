"""Command-line surface: fit, render, animate, edit, bench."""
from __future__ import annotations

import argparse
import json
import resource
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .articulation import Pose, deform, posed_joint_positions
from .camera import Camera, orbit_cameras
from .errors import ManifestError, SplatworldError
from .guidance import MockOracleProvider, SocketProvider
from .optimize import TrainConfig, train
from .rasterizer import active_backend, get_backend, render_batch3d
from .scene import Scene, compose_and_render, remove_human, retarget_motion, scene_extent
from . import sceneio

# Published GPU-renderer reference figures quoted by `bench` for context only.
REFERENCE_FPS = {512: 361.01, 1024: 277.01}

_SUBCONFIGS = ("schedule", "lrs", "weights", "sampler", "timesteps")


def apply_config_overrides(config: TrainConfig, overrides: dict) -> TrainConfig:
    for key, value in overrides.items():
        if key in _SUBCONFIGS:
            sub = getattr(config, key)
            for k2, v2 in value.items():
                if not hasattr(sub, k2):
                    raise ManifestError(f"unknown config key {key}.{k2}")
                setattr(sub, k2, tuple(v2) if isinstance(v2, list) else v2)
        elif hasattr(config, key):
            setattr(config, key, tuple(value) if isinstance(value, list) else value)
        else:
            raise ManifestError(f"unknown config key {key}")
    return config


def make_provider(spec: str):
    if spec == "none":
        return None
    if spec.startswith("mock:"):
        from .provider import load_targets

        return MockOracleProvider(load_targets(spec[5:]))
    if spec.startswith("socket:"):
        return SocketProvider(spec[7:])
    raise SplatworldError(f"unknown guidance spec {spec!r} (use none|mock:<dir>|socket:<addr>)")


def cmd_fit(args) -> int:
    scene, frames, masks, extras = sceneio.load_manifest(args.manifest)
    config = TrainConfig()
    apply_config_overrides(config, extras["config"])
    if extras["bg_sphere"] is not None:
        config.bg_sphere = (np.array(extras["bg_sphere"][0]), extras["bg_sphere"][1])
    if args.seed is not None:
        config.seed = args.seed
    if args.bg_iters is not None:
        config.schedule.bg_iters = args.bg_iters
        config.schedule.__post_init__()
    if args.iters is not None:
        warm = min(config.schedule.warmup_iters, args.iters)
        config.schedule.warmup_iters = warm
        config.schedule.joint_iters = args.iters - warm

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    provider = make_provider(args.guidance)
    scene, records = train(
        scene, frames, scene.cameras, config,
        provider=provider,
        masks=masks,
        log_path=out / "metrics.jsonl",
        checkpoint_dir=str(out) if config.checkpoint_every else None,
    )
    ckpt = out / "checkpoint.swc"
    sceneio.save_checkpoint(scene, ckpt)
    last = records[-1] if records else {}
    print(f"fit complete: {ckpt} ({len(records)} logged iterations, final mse {last.get('loss_mse')})")
    return 0


def _cameras_for(args, scene: Scene, count: int):
    if args.camera:
        cams = sceneio.load_camera_track(args.camera)
    elif args.orbit:
        humans = scene.active_humans()
        if humans:
            j, h = humans[0]
            center = h.pelvis(h.pose_at(0))
            radius = args.orbit_radius or 3.0
        else:
            center = scene.background.centers.mean(axis=0)
            radius = args.orbit_radius or scene_extent(scene) * 0.5
        ref = scene.cameras[0] if scene.cameras else Camera.identity(300, 300, 256, 256)
        cams = orbit_cameras(
            center, radius, args.orbit, ref.fx, ref.fy, ref.width, ref.height,
            elevation=np.deg2rad(args.orbit_elevation),
        )
    elif scene.cameras:
        cams = scene.cameras
    else:
        raise SplatworldError("no camera source: pass --camera or --orbit")
    if len(cams) == 1 and count > 1:
        cams = cams * count
    return cams


def _write_frames(images, out_dir: Path, raw: bool):
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        p = out_dir / f"frame_{i:04d}.png"
        sceneio.save_png(img, p)
        if raw:
            np.save(out_dir / f"frame_{i:04d}.npy", img)
        paths.append(p)
    return paths


def cmd_render(args) -> int:
    scene = sceneio.load_checkpoint(args.ckpt)
    out_dir = Path(args.out)
    images = []
    if args.pose is not None:
        track = sceneio.load_pose_track(args.pose)
        for j, _ in scene.active_humans():
            scene = retarget_motion(scene, j, track)
        scene = replace(scene, frame_count=len(track))
        cams = _cameras_for(args, scene, len(track))
        for t in range(len(track)):
            images.append(compose_and_render(scene, t, cams[t % len(cams)], args.background).color)
    elif args.orbit:
        t = args.frame or 0
        if t >= scene.frame_count:
            raise SplatworldError(f"frame {t} out of range [0, {scene.frame_count})")
        cams = _cameras_for(args, scene, args.orbit)
        for cam in cams:
            images.append(compose_and_render(scene, t, cam, args.background).color)
    else:
        if args.frame is None:
            raise SplatworldError("pass --frame N, --pose FILE, or --orbit K")
        t = args.frame
        if t < 0 or t >= scene.frame_count:
            raise SplatworldError(f"frame {t} out of range [0, {scene.frame_count})")
        cams = _cameras_for(args, scene, 1)
        cam = cams[t] if len(cams) > t else cams[0]
        images.append(compose_and_render(scene, t, cam, args.background).color)
    paths = _write_frames(images, out_dir, args.raw)
    print(f"wrote {len(paths)} frame(s) to {out_dir}")
    return 0


def cmd_animate(args) -> int:
    scene = sceneio.load_checkpoint(args.ckpt)
    track = sceneio.load_pose_track(args.poses)
    scene = retarget_motion(scene, args.human, track)
    scene = replace(scene, frame_count=max(scene.frame_count, len(track)))
    cams = _cameras_for(args, scene, len(track))
    images = [
        compose_and_render(scene, t, cams[t % len(cams)], args.background).color
        for t in range(len(track))
    ]
    paths = _write_frames(images, Path(args.out), args.raw)
    print(f"wrote {len(paths)} frame(s) to {args.out}")
    return 0


def cmd_edit(args) -> int:
    scene = sceneio.load_checkpoint(args.ckpt)
    if args.remove is not None:
        try:
            scene = remove_human(scene, args.remove)
        except IndexError as exc:
            raise SplatworldError(str(exc)) from exc
    elif args.retarget is not None:
        j_str, _, pose_path = args.retarget.partition(":")
        if not pose_path:
            raise SplatworldError("--retarget expects <human-index>:<posefile>")
        track = sceneio.load_pose_track(pose_path)
        try:
            scene = retarget_motion(scene, int(j_str), track)
        except IndexError as exc:
            raise SplatworldError(str(exc)) from exc
    else:
        raise SplatworldError("edit needs --remove or --retarget")
    sceneio.save_checkpoint(scene, args.out)
    print(f"wrote {args.out}")
    return 0


def _bench_backend(scene, cam, backend_name: str, reps: int):
    j, h = scene.active_humans()[0]
    backend = get_backend(backend_name)
    pose = h.pose_at(0)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        posed = deform(h.canonical, h.skeleton, pose, h.grid, save_ctx=False)
        render_batch3d(
            posed.centers, posed.covs, posed.colors, posed.opacities, cam,
            save_ctx=False, backend=backend,
        )
        times.append(time.perf_counter() - t0)
    times = np.array(times)
    return {
        "backend": backend_name,
        "mean_ms": float(times.mean() * 1e3),
        "median_ms": float(np.median(times) * 1e3),
        "fps_mean": float(1.0 / times.mean()),
        "fps_median": float(1.0 / np.median(times)),
        "reps": reps,
    }


def cmd_bench(args) -> int:
    scene = sceneio.load_checkpoint(args.ckpt)
    if not scene.active_humans():
        raise SplatworldError("benchmark needs a scene with at least one human")
    j, h = scene.active_humans()[0]
    pose = h.pose_at(0)
    pelvis = h.pelvis(pose)
    body_radius = float(np.max(np.linalg.norm(h.canonical.centers - h.skeleton.rest_joints[0], axis=1)))
    dist = 2.2
    f = args.res * dist / (2.0 * 1.15 * body_radius)
    cam = Camera.look_at(pelvis + np.array([0.0, 0.0, dist]), pelvis, f, f, args.res, args.res)

    backends = []
    if args.backend in ("both", "compiled"):
        try:
            get_backend("compiled")
            backends.append(("compiled", args.reps))
        except ImportError:
            if args.backend == "compiled":
                raise SplatworldError("compiled kernels are not available in this install")
            print("compiled kernels unavailable; benchmarking python backend only")
    if args.backend in ("both", "python"):
        backends.append(("python", min(args.reps, 3)))

    n = len(h.canonical)
    print(f"benchmark: {n} Gaussians, {args.res}x{args.res}, posed human (deform + render)")
    results = []
    for name, reps in backends:
        r = _bench_backend(scene, cam, name, reps)
        results.append(r)
        print(
            f"  {name:9s}: mean {r['mean_ms']:8.2f} ms ({r['fps_mean']:7.2f} FPS), "
            f"median {r['median_ms']:8.2f} ms ({r['fps_median']:7.2f} FPS), reps {r['reps']}"
        )
    rss_mb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0
    print(f"  peak RSS: {rss_mb:.0f} MiB")
    ref = REFERENCE_FPS.get(args.res)
    if ref:
        print(f"  context: published GPU-renderer figure at this resolution: {ref} FPS "
              "(15k Gaussians, RTX 3090; reference only, not a pass/fail target)")
    if args.json:
        Path(args.json).write_text(json.dumps({"n_gaussians": n, "res": args.res, "results": results}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="splatworld",
        description="Compositional dynamic-scene reconstruction with 3D Gaussian splatting.",
    )
    ap.add_argument("--version", action="version", version="%(prog)s 0.1.0")
    sub = ap.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="optimize a scene from a manifest")
    fit.add_argument("--manifest", required=True)
    fit.add_argument("--out", required=True, help="output directory")
    fit.add_argument("--iters", type=int, default=None, help="total human-phase iterations")
    fit.add_argument("--bg-iters", type=int, default=None, help="background pre-optimization iterations")
    fit.add_argument("--seed", type=int, default=None)
    fit.add_argument("--guidance", default="none", help="none | mock:<dir> | socket:<addr>")
    fit.set_defaults(func=cmd_fit)

    def add_render_common(p):
        p.add_argument("--ckpt", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--camera", help="camera track file")
        p.add_argument("--orbit", type=int, default=0, help="render an orbit of K cameras")
        p.add_argument("--orbit-radius", type=float, default=None)
        p.add_argument("--orbit-elevation", type=float, default=15.0, help="degrees")
        p.add_argument("--background", type=float, nargs=3, default=(0.0, 0.0, 0.0))
        p.add_argument("--raw", action="store_true", help="also write float32 .npy frames")

    rnd = sub.add_parser("render", help="render checkpoint frames or novel poses")
    add_render_common(rnd)
    rnd.add_argument("--frame", type=int, default=None)
    rnd.add_argument("--pose", help="pose-track file applied to every human")
    rnd.set_defaults(func=cmd_render)

    ani = sub.add_parser("animate", help="retarget one human and render the sequence")
    add_render_common(ani)
    ani.add_argument("--poses", required=True, help="pose-track file")
    ani.add_argument("--human", type=int, default=0)
    ani.set_defaults(func=cmd_animate)

    ed = sub.add_parser("edit", help="remove or retarget a human in a checkpoint")
    ed.add_argument("--ckpt", required=True)
    ed.add_argument("--out", required=True)
    ed.add_argument("--remove", type=int, default=None, help="human index to drop")
    ed.add_argument("--retarget", default=None, help="<human-index>:<posefile>")
    ed.set_defaults(func=cmd_edit)

    be = sub.add_parser("bench", help="rendering speed of a posed human")
    be.add_argument("--ckpt", required=True)
    be.add_argument("--res", type=int, default=512)
    be.add_argument("--reps", type=int, default=20)
    be.add_argument("--backend", choices=("both", "compiled", "python"), default="both")
    be.add_argument("--json", help="also write results to this JSON file")
    be.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SplatworldError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return 1
    except (OSError, IndexError) as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
