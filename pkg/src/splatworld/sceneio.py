"""Scene ingestion, checkpoint serialization, and image I/O.

File formats (all little-endian / plain text, documented in the README):
  cameras:   one line per frame: fx fy cx cy W H  r00..r22 (row-major)  tx ty tz
  poses:     one line per frame: 3*J axis-angle values then 3 root translation
  mesh:      Wavefront OBJ ('v' lines; 'f' lines kept but unused)
  weights:   one line per vertex: J skinning weights
  skeleton:  JSON {"parents": [...], "rest_joints": [[x,y,z]...], ...}
  points:    one line per point: x y z r g b
  checkpoint: tagged binary, versioned; bit-exact round trip
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .articulation import Skeleton, TemplateMesh, bake_skinning_grid
from .camera import Camera
from .errors import CheckpointError, ManifestError
from .gaussians import GaussianSet
from .scene import Human, Scene, background_from_points, background_sphere, init_human

CKPT_MAGIC = b"SPLATWC\x00"
CKPT_VERSION = 1

_DTYPES = {0: "<f8", 1: "<i8"}
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.int64): 1}


# ---------------------------------------------------------------------------
# Plain-text readers
# ---------------------------------------------------------------------------

def _read_rows(path, expect_cols=None, what="record"):
    rows = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            vals = [float(x) for x in line.split()]
            if expect_cols is not None and len(vals) != expect_cols:
                raise ManifestError(
                    f"{path}:{ln}: {what} has {len(vals)} values, expected {expect_cols}"
                )
            rows.append(vals)
    if not rows:
        raise ManifestError(f"{path}: no {what}s found")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ManifestError(f"{path}: inconsistent {what} widths {sorted(widths)}")
    return np.array(rows, dtype=np.float64)


def load_camera_track(path) -> list:
    rows = _read_rows(path, expect_cols=18, what="camera record")
    cams = []
    for ln, r in enumerate(rows):
        try:
            cams.append(
                Camera(
                    fx=r[0], fy=r[1], cx=r[2], cy=r[3],
                    width=int(r[4]), height=int(r[5]),
                    R=r[6:15].reshape(3, 3), t=r[15:18],
                )
            )
        except Exception as exc:
            raise ManifestError(f"{path}: camera record {ln}: {exc}") from exc
    return cams


def save_camera_track(cams, path):
    with open(path, "w") as fh:
        fh.write("# fx fy cx cy W H r00..r22 tx ty tz\n")
        for c in cams:
            vals = [c.fx, c.fy, c.cx, c.cy, c.width, c.height, *c.R.reshape(-1), *c.t]
            fh.write(" ".join(f"{v:.17g}" for v in vals) + "\n")


def load_pose_track(path, n_joints=None) -> np.ndarray:
    rows = _read_rows(path, what="pose record")
    width = rows.shape[1]
    if (width - 3) % 3 != 0:
        raise ManifestError(f"{path}: pose rows must hold 3*J + 3 values, got {width}")
    if n_joints is not None and width != 3 * n_joints + 3:
        raise ManifestError(
            f"{path}: pose rows hold {width} values but the skeleton needs {3 * n_joints + 3}"
        )
    return rows


def save_pose_track(track, path):
    with open(path, "w") as fh:
        fh.write("# per frame: 3*J axis-angle values, then root translation xyz\n")
        for row in np.atleast_2d(track):
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def load_obj_vertices(path):
    verts, faces = [], []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise ManifestError(f"{path}:{ln}: malformed vertex line")
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                try:
                    faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
                except ValueError as exc:
                    raise ManifestError(f"{path}:{ln}: malformed face line") from exc
    if not verts:
        raise ManifestError(f"{path}: no vertices found")
    return np.array(verts, dtype=np.float64), (np.array(faces, dtype=np.int64) if faces else None)


def load_template_mesh(mesh_path, weights_path) -> TemplateMesh:
    verts, faces = load_obj_vertices(mesh_path)
    weights = _read_rows(weights_path, what="weight row")
    if len(weights) != len(verts):
        raise ManifestError(
            f"{weights_path}: {len(weights)} weight rows for {len(verts)} vertices in {mesh_path}"
        )
    return TemplateMesh(vertices=verts, weights=weights, faces=faces)


def load_skeleton(path) -> Skeleton:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON: {exc}") from exc
    try:
        return Skeleton(
            parents=np.array(data["parents"], dtype=np.int64),
            rest_joints=np.array(data["rest_joints"], dtype=np.float64),
            joint_names=data.get("names"),
            openpose_map=np.array(data["openpose_map"], dtype=np.int64) if "openpose_map" in data else None,
        )
    except KeyError as exc:
        raise ManifestError(f"{path}: missing skeleton field {exc}") from exc


def load_point_cloud(path):
    rows = _read_rows(path, expect_cols=6, what="point")
    return rows[:, :3], rows[:, 3:6]


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

def load_image(path) -> np.ndarray:
    path = str(path)
    if path.endswith(".npy"):
        img = np.load(path)
        return np.asarray(img, dtype=np.float64)
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return arr


def save_png(img, path):
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path)


def load_mask(path) -> np.ndarray:
    path = str(path)
    if path.endswith(".npy"):
        return (np.load(path) > 0.5).astype(np.float64)
    arr = np.asarray(Image.open(path).convert("L"), dtype=np.float64)
    return (arr > 127).astype(np.float64)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _write_field(fh, name: str, value):
    nb = name.encode()
    fh.write(struct.pack("<H", len(nb)))
    fh.write(nb)
    if isinstance(value, np.ndarray):
        arr = np.ascontiguousarray(value)
        if arr.dtype not in _DTYPE_CODES:
            arr = arr.astype(np.float64)
        fh.write(struct.pack("<BB", 0, _DTYPE_CODES[arr.dtype]))
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.astype(_DTYPES[_DTYPE_CODES[arr.dtype]], copy=False).tobytes())
    else:
        blob = json.dumps(value).encode()
        fh.write(struct.pack("<B", 1))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)


def _read_exactly(fh, n, path):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"{path}: truncated checkpoint")
    return buf


def _read_fields(fh, path) -> dict:
    fields = {}
    while True:
        head = fh.read(2)
        if not head:
            return fields
        if len(head) != 2:
            raise CheckpointError(f"{path}: truncated checkpoint")
        (nlen,) = struct.unpack("<H", head)
        name = _read_exactly(fh, nlen, path).decode()
        (kind,) = struct.unpack("<B", _read_exactly(fh, 1, path))
        if kind == 0:
            code, ndim = struct.unpack("<BB", _read_exactly(fh, 2, path))
            shape = struct.unpack(f"<{ndim}Q", _read_exactly(fh, 8 * ndim, path))
            count = int(np.prod(shape)) if ndim else 1
            dt = np.dtype(_DTYPES[code])
            raw = _read_exactly(fh, count * dt.itemsize, path)
            fields[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
        elif kind == 1:
            (blen,) = struct.unpack("<Q", _read_exactly(fh, 8, path))
            fields[name] = json.loads(_read_exactly(fh, blen, path).decode())
        else:
            raise CheckpointError(f"{path}: unknown field kind {kind}")


def _set_fields(prefix, gs: GaussianSet):
    return {
        f"{prefix}centers": gs.centers,
        f"{prefix}quats": gs.quats,
        f"{prefix}log_scales": gs.log_scales,
        f"{prefix}colors": gs.colors,
        f"{prefix}opacity_logits": gs.opacity_logits,
    }


def _set_from_fields(fields, prefix, space) -> GaussianSet:
    return GaussianSet(
        centers=fields[f"{prefix}centers"],
        quats=fields[f"{prefix}quats"],
        log_scales=fields[f"{prefix}log_scales"],
        colors=fields[f"{prefix}colors"],
        opacity_logits=fields[f"{prefix}opacity_logits"],
        space=space,
    )


def save_checkpoint(scene: Scene, path):
    """Write the full scene; the round trip reproduces every array bit-exactly."""
    from .articulation import SkinningGrid  # noqa: F401  (documented content)

    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        meta = {
            "frame_count": scene.frame_count,
            "n_slots": len(scene.humans),
            "active": [j for j, _ in scene.active_humans()],
        }
        _write_field(fh, "meta", meta)
        for name, arr in _set_fields("bg_", scene.background).items():
            _write_field(fh, name, arr)
        if scene.cameras:
            _write_field(
                fh,
                "cam_intr",
                np.array([[c.fx, c.fy, c.cx, c.cy, c.width, c.height] for c in scene.cameras]),
            )
            _write_field(fh, "cam_R", np.stack([c.R for c in scene.cameras]))
            _write_field(fh, "cam_t", np.stack([c.t for c in scene.cameras]))
        for j, h in scene.active_humans():
            p = f"h{j}_"
            for name, arr in _set_fields(p, h.canonical).items():
                _write_field(fh, name, arr)
            _write_field(fh, p + "skel_parents", h.skeleton.parents)
            _write_field(fh, p + "skel_rest", h.skeleton.rest_joints)
            if h.skeleton.openpose_map is not None:
                _write_field(fh, p + "skel_openpose", h.skeleton.openpose_map)
            _write_field(fh, p + "mesh_vertices", h.mesh.vertices)
            _write_field(fh, p + "mesh_weights", h.mesh.weights)
            if h.mesh.faces is not None:
                _write_field(fh, p + "mesh_faces", h.mesh.faces)
            _write_field(fh, p + "grid_origin", h.grid.origin)
            _write_field(fh, p + "grid_voxel", np.array([h.grid.voxel_size]))
            _write_field(fh, p + "grid_weights", h.grid.weights)
            _write_field(fh, p + "poses", h.pose_track)


def load_checkpoint(path) -> Scene:
    from .articulation import SkinningGrid

    with open(path, "rb") as fh:
        magic = fh.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a splatworld checkpoint")
        (version,) = struct.unpack("<I", _read_exactly(fh, 4, path))
        if version != CKPT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported checkpoint version {version} (expected {CKPT_VERSION})"
            )
        fields = _read_fields(fh, path)

    try:
        meta = fields["meta"]
        background = _set_from_fields(fields, "bg_", "world")
        cameras = []
        if "cam_intr" in fields:
            for intr, R, t in zip(fields["cam_intr"], fields["cam_R"], fields["cam_t"]):
                cameras.append(
                    Camera(fx=intr[0], fy=intr[1], cx=intr[2], cy=intr[3],
                           width=int(intr[4]), height=int(intr[5]), R=R, t=t)
                )
        humans = [None] * meta["n_slots"]
        for j in meta["active"]:
            p = f"h{j}_"
            skel = Skeleton(
                parents=fields[p + "skel_parents"],
                rest_joints=fields[p + "skel_rest"],
                openpose_map=fields.get(p + "skel_openpose"),
            )
            mesh = TemplateMesh(
                vertices=fields[p + "mesh_vertices"],
                weights=fields[p + "mesh_weights"],
                faces=fields.get(p + "mesh_faces"),
            )
            grid = SkinningGrid(
                origin=fields[p + "grid_origin"],
                voxel_size=float(fields[p + "grid_voxel"][0]),
                weights=fields[p + "grid_weights"],
            )
            humans[j] = Human(
                canonical=_set_from_fields(fields, p, "canonical"),
                skeleton=skel,
                mesh=mesh,
                grid=grid,
                pose_track=fields[p + "poses"],
            )
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing checkpoint field {exc}") from exc
    return Scene(background=background, humans=humans, cameras=cameras, frame_count=meta["frame_count"])


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

def load_manifest(path):
    """Build a Scene plus training inputs from a manifest JSON.

    Returns (scene, frames, masks, extras) where extras carries config
    overrides and background-sphere parameters for the trainer.
    """
    path = Path(path)
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise ManifestError(f"{path}: manifest not found") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON: {exc}") from exc
    base = path.parent

    def resolve(p):
        p = base / p
        if not p.exists():
            raise ManifestError(f"{path}: referenced file does not exist: {p}")
        return p

    if "frames" not in data or not data["frames"]:
        raise ManifestError(f"{path}: manifest lists no frames")
    frames = [load_image(resolve(p)) for p in data["frames"]]
    T = len(frames)

    masks = None
    if data.get("masks"):
        if len(data["masks"]) != T:
            raise ManifestError(f"{path}: {len(data['masks'])} masks for {T} frames")
        masks = [load_mask(resolve(p)) for p in data["masks"]]

    if "cameras" not in data:
        raise ManifestError(f"{path}: manifest has no camera track")
    cameras = load_camera_track(resolve(data["cameras"]))
    if len(cameras) != T:
        raise ManifestError(f"{path}: {len(cameras)} cameras for {T} frames")
    for i, c in enumerate(cameras):
        if (c.height, c.width) != frames[i].shape[:2]:
            raise ManifestError(
                f"{path}: camera {i} is {c.width}x{c.height} but frame {i} is "
                f"{frames[i].shape[1]}x{frames[i].shape[0]}"
            )

    grid_res = int(data.get("grid_resolution", 64))
    humans = []
    for idx, spec in enumerate(data.get("humans", [])):
        for key in ("mesh", "weights", "skeleton", "poses"):
            if key not in spec:
                raise ManifestError(f"{path}: human {idx} is missing '{key}'")
        skel = load_skeleton(resolve(spec["skeleton"]))
        mesh = load_template_mesh(resolve(spec["mesh"]), resolve(spec["weights"]))
        if mesh.n_joints != skel.n_joints:
            raise ManifestError(
                f"{path}: human {idx}: mesh has {mesh.n_joints} weight columns for a "
                f"{skel.n_joints}-joint skeleton"
            )
        poses = load_pose_track(resolve(spec["poses"]), skel.n_joints)
        if len(poses) != T:
            raise ManifestError(
                f"{path}: human {idx}: pose track has {len(poses)} frames, expected {T}"
            )
        humans.append(
            Human(
                canonical=init_human(mesh),
                skeleton=skel,
                mesh=mesh,
                grid=bake_skinning_grid(mesh, resolution=grid_res),
                pose_track=poses,
            )
        )

    bg_spec = data.get("background", {})
    bg_sphere = None
    if "pointcloud" in bg_spec:
        pts, cols = load_point_cloud(resolve(bg_spec["pointcloud"]))
        background = background_from_points(pts, cols)
    else:
        sphere = bg_spec.get("sphere", {})
        radius = float(sphere.get("radius", 30.0))
        n_points = int(sphere.get("points", 2000))
        if humans:
            center = np.mean([h.pose_track[:, -3:].mean(axis=0) for h in humans], axis=0)
        else:
            center = np.zeros(3)
        background = background_sphere(radius, n_points, center)
        bg_sphere = (center.tolist(), radius)

    scene = Scene(background=background, humans=humans, cameras=cameras, frame_count=T)
    extras = {"config": data.get("config", {}), "bg_sphere": bg_sphere}
    return scene, frames, masks, extras
