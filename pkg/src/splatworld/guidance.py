"""Diffusion-guidance plumbing around an opaque provider.

The provider is a black box that maps a rendered human image to a gradient
image (plus a scalar diagnostic); everything model-specific (latents, noise
prediction, prompt handling) lives behind that boundary. This module owns
what surrounds it: virtual camera sampling on a sphere around the human,
guidance pose sampling, noise-timestep annealing, request serialization, and
backprop of the returned gradient into the canonical Gaussians.
"""
from __future__ import annotations

import socket
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import zoom as ndi_zoom

from .articulation import Pose, posed_joint_positions
from .camera import Camera
from .rasterizer import render_batch3d, render_backward_3d
from .scene import Scene, SetGrads, _segment_grads

VIEW_TAGS = ("front", "side", "back")
FULL_BODY = "full"
ZOOM_BUCKETS = ("head", "upper", "lower")


@dataclass
class VirtualCameraSampler:
    """Camera sampler on a fixed-radius sphere centered on the human pelvis."""

    radius: float = 2.2
    azimuth_range: tuple = (-np.pi, np.pi)
    elevation_range: tuple = (-0.3 * np.pi, 0.3 * np.pi)
    image_size: int = 64
    fov_margin: float = 1.15  # full-body framing slack
    zoom_factor: float = 2.5  # focal multiplier for head/upper/lower views
    zoom_start_iter: int = 3000  # guidance iterations before zoom views switch on
    canonical_prob_early: float = 0.5
    canonical_prob_late: float = 0.2
    up_axis: tuple = (0.0, 1.0, 0.0)


@dataclass
class TimestepSchedule:
    """Noise-timestep range, annealed after an initial hold phase."""

    hold_iters: int = 2000
    decay_iters: int = 2000
    tau_max_start: float = 0.98
    tau_max_end: float = 0.3
    tau_min_start: float = 0.5
    tau_min_end: float = 0.02


def timestep_bounds(iteration: int, sched: TimestepSchedule):
    """Current (tau_min, tau_max): held flat, then linearly annealed."""
    if iteration < sched.hold_iters:
        f = 0.0
    elif iteration < sched.hold_iters + sched.decay_iters:
        f = (iteration - sched.hold_iters) / sched.decay_iters
    else:
        f = 1.0
    tau_max = sched.tau_max_start + f * (sched.tau_max_end - sched.tau_max_start)
    tau_min = sched.tau_min_start + f * (sched.tau_min_end - sched.tau_min_start)
    return float(tau_min), float(tau_max)


def anneal_timestep(rng: np.random.Generator, iteration: int, sched: TimestepSchedule):
    """Sample tau ~ U[tau_min, tau_max] at this guidance iteration; returns (tau, tau_max)."""
    tau_min, tau_max = timestep_bounds(iteration, sched)
    tau = float(rng.uniform(tau_min, tau_max))
    return tau, tau_max


def sample_guidance_pose(rng: np.random.Generator, pose_track, canonical_pose: Pose, late_stage: bool, sampler: Optional[VirtualCameraSampler] = None):
    """Draw a body pose for the guidance render: canonical A-pose or an observed one.

    Returns (Pose, is_canonical). An empty track always yields the canonical pose.
    """
    s = sampler or VirtualCameraSampler()
    p_canon = s.canonical_prob_late if late_stage else s.canonical_prob_early
    track = np.atleast_2d(pose_track) if pose_track is not None and len(pose_track) else None
    if track is None or rng.uniform() < p_canon:
        return canonical_pose, True
    t = int(rng.integers(len(track)))
    return Pose.from_vector(track[t], len(canonical_pose.axis_angles)), False


def sample_view_bucket(rng: np.random.Generator, is_canonical: bool, iteration: int, sampler: VirtualCameraSampler) -> str:
    """Full body early; after the zoom gate, posed draws also zoom on body parts."""
    if is_canonical or iteration < sampler.zoom_start_iter:
        return FULL_BODY
    return str(rng.choice((FULL_BODY,) + ZOOM_BUCKETS))


def _anchor_points(joints: np.ndarray, up: np.ndarray) -> dict:
    """Zoom anchors derived from joint heights (skeleton-layout agnostic)."""
    heights = joints @ up
    order = np.argsort(heights)
    n = len(joints)
    return {
        "head": joints[order[-1]],
        "upper": joints[order[max(0, int(0.6 * n)) :]].mean(axis=0),
        "lower": joints[order[: max(1, int(0.4 * n))]].mean(axis=0),
    }


def view_tag_from_azimuth(azimuth: float, body_yaw: float) -> str:
    rel = (azimuth - body_yaw + np.pi) % (2.0 * np.pi) - np.pi
    if abs(rel) <= np.pi / 4:
        return "front"
    if abs(rel) >= 3 * np.pi / 4:
        return "back"
    return "side"


def body_yaw(pose: Pose, up=(0.0, 1.0, 0.0)) -> float:
    """Heading of the root joint about the up axis (azimuth of the rotated +z)."""
    from .articulation import axis_angle_to_matrices

    R = axis_angle_to_matrices(pose.axis_angles[:1])[0]
    fwd = R @ np.array([0.0, 0.0, 1.0])
    upv = np.asarray(up, dtype=np.float64)
    fwd = fwd - (fwd @ upv) * upv
    if np.linalg.norm(fwd) < 1e-9:
        return 0.0
    return float(np.arctan2(fwd[0], fwd[2]))


def sample_virtual_camera(
    sampler: VirtualCameraSampler,
    rng: np.random.Generator,
    pelvis: np.ndarray,
    joints: np.ndarray,
    body_radius: float,
    iteration: int,
    bucket: str = FULL_BODY,
    yaw: float = 0.0,
):
    """Place a camera on the sphere around the pelvis, aimed at the bucket target.

    Zoom buckets re-aim at an anchor joint region with a longer focal length;
    they are only requested by callers after the zoom gate. Returns
    (Camera, view_tag).
    """
    azimuth = float(rng.uniform(*sampler.azimuth_range))
    elevation = float(rng.uniform(*sampler.elevation_range))
    up = np.asarray(sampler.up_axis, dtype=np.float64)
    up = up / np.linalg.norm(up)
    a = np.array([0.0, 0.0, 1.0]) if abs(up[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(up, a)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(up, e1)
    direction = np.cos(elevation) * (np.sin(azimuth) * e2 + np.cos(azimuth) * e1) + np.sin(elevation) * up
    eye = np.asarray(pelvis, dtype=np.float64) + sampler.radius * direction

    if bucket == FULL_BODY:
        target = np.asarray(pelvis, dtype=np.float64)
        focal_mul = 1.0
    else:
        target = _anchor_points(joints, up)[bucket]
        focal_mul = sampler.zoom_factor

    size = sampler.image_size
    f = focal_mul * size * sampler.radius / (2.0 * sampler.fov_margin * max(body_radius, 1e-6))
    cam = Camera.look_at(eye, target, f, f, size, size, up=tuple(-up))
    return cam, view_tag_from_azimuth(azimuth, yaw)


@dataclass
class GuidanceRequest:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    person_id: int
    text_token: str  # opaque conditioning token, provider-side meaning
    view_tag: str  # front | side | back
    joints2d: np.ndarray  # (J, 3) pixel x, y, confidence
    tau: float  # noise timestep in [0, 1]


@dataclass
class GuidanceResponse:
    grad_image: np.ndarray  # dL/d(image), same shape as the request image
    diagnostic: float = 0.0


class ProviderError(RuntimeError):
    """Provider unreachable or returned a failure status."""


def _resize_to(img: np.ndarray, shape) -> np.ndarray:
    if img.shape[:2] == tuple(shape):
        return img
    fy = shape[0] / img.shape[0]
    fx = shape[1] / img.shape[1]
    return ndi_zoom(img, (fy, fx, 1.0), order=1)


class MockOracleProvider:
    """Test double: responds with the gradient of 1/2 |R - target|^2, i.e. R - target.

    Targets are keyed by view tag; a missing bucket falls back to the nearest
    available one in a fixed preference order.
    """

    def __init__(self, targets: dict):
        if not targets:
            raise ValueError("mock provider needs at least one target image")
        self.targets = {k: np.asarray(v, dtype=np.float64) for k, v in targets.items()}

    def _pick(self, tag: str) -> np.ndarray:
        for key in (tag, "side", "front", "back"):
            if key in self.targets:
                return self.targets[key]
        return next(iter(self.targets.values()))

    def __call__(self, request: GuidanceRequest) -> GuidanceResponse:
        target = _resize_to(self._pick(request.view_tag), request.image.shape[:2])
        diff = request.image - target
        return GuidanceResponse(grad_image=diff, diagnostic=float(0.5 * np.sum(diff**2)))


# ---------------------------------------------------------------------------
# Wire protocol: length-prefixed little-endian binary messages.
# Request payload: person_id u32, tau f32, view_tag u8, W u32, H u32,
#   joint_count u8, joints (x f32, y f32, confidence f32) * J,
#   image row-major RGB f32.
# Response payload: status u8; on status 0: gradient image f32 (same layout),
#   diagnostic f32.
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<IfBIIB")


def encode_request(req: GuidanceRequest) -> bytes:
    img = np.ascontiguousarray(req.image, dtype="<f4")
    joints = np.ascontiguousarray(req.joints2d, dtype="<f4")
    h, w = img.shape[:2]
    payload = _HEADER.pack(req.person_id, req.tau, VIEW_TAGS.index(req.view_tag), w, h, len(joints))
    payload += joints.tobytes() + img.tobytes()
    return struct.pack("<I", len(payload)) + payload


def decode_request(payload: bytes) -> GuidanceRequest:
    person_id, tau, tag, w, h, jn = _HEADER.unpack_from(payload, 0)
    off = _HEADER.size
    joints = np.frombuffer(payload, dtype="<f4", count=jn * 3, offset=off).reshape(jn, 3)
    off += jn * 12
    img = np.frombuffer(payload, dtype="<f4", count=h * w * 3, offset=off).reshape(h, w, 3)
    return GuidanceRequest(
        image=img.astype(np.float64),
        person_id=person_id,
        text_token="",
        view_tag=VIEW_TAGS[tag],
        joints2d=joints.astype(np.float64),
        tau=tau,
    )


def encode_response(resp: Optional[GuidanceResponse]) -> bytes:
    if resp is None:
        payload = struct.pack("<B", 1)
    else:
        grad = np.ascontiguousarray(resp.grad_image, dtype="<f4")
        payload = struct.pack("<B", 0) + grad.tobytes() + struct.pack("<f", resp.diagnostic)
    return struct.pack("<I", len(payload)) + payload


def decode_response(payload: bytes, shape) -> GuidanceResponse:
    (status,) = struct.unpack_from("<B", payload, 0)
    if status != 0:
        raise ProviderError(f"provider returned status {status}")
    n = shape[0] * shape[1] * 3
    grad = np.frombuffer(payload, dtype="<f4", count=n, offset=1).reshape(shape[0], shape[1], 3)
    (diag,) = struct.unpack_from("<f", payload, 1 + 4 * n)
    return GuidanceResponse(grad_image=grad.astype(np.float64), diagnostic=diag)


def read_frame(read) -> bytes:
    head = _read_exact(read, 4)
    (length,) = struct.unpack("<I", head)
    return _read_exact(read, length)


def _read_exact(read, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = read(n - len(buf))
        if not chunk:
            raise ProviderError("provider stream closed mid-message")
        buf += chunk
    return buf


class SocketProvider:
    """Client for an external provider process over a local stream socket."""

    def __init__(self, address: str, timeout: float = 30.0):
        self.address = address
        self.timeout = timeout
        self._sock = None

    def _connect(self):
        if self._sock is not None:
            return
        if self.address.startswith("unix:"):
            s = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            s.settimeout(self.timeout)
            s.connect(self.address[5:])
        else:
            host, _, port = self.address.rpartition(":")
            s = socket.create_connection((host or "127.0.0.1", int(port)), timeout=self.timeout)
        self._sock = s

    def close(self):
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    def __call__(self, request: GuidanceRequest) -> GuidanceResponse:
        try:
            self._connect()
            self._sock.sendall(encode_request(request))
            payload = read_frame(self._sock.recv)
            return decode_response(payload, request.image.shape[:2])
        except (OSError, ProviderError) as exc:
            self.close()
            raise ProviderError(f"guidance provider failed: {exc}") from exc


def serve_connection(handler, read, write):
    """Run a provider loop over a byte stream until it closes; for provider processes."""
    while True:
        try:
            payload = read_frame(read)
        except ProviderError:
            return
        req = decode_request(payload)
        try:
            resp = handler(req)
        except Exception:
            resp = None
        write(encode_response(resp))


def default_openpose_map(n_joints: int) -> np.ndarray:
    """BODY_25 keypoint slot -> skeleton joint index (-1 where unmapped).

    For 24-joint SMPL-layout skeletons this is the usual approximate
    correspondence; other skeletons get a truncated identity mapping.
    """
    if n_joints == 24:
        return np.array(
            [15, 12, 17, 19, 21, 16, 18, 20, 0, 2, 5, 8, 1, 4, 7,
             -1, -1, -1, -1, 10, -1, -1, 11, -1, -1],
            dtype=np.int64,
        )
    table = np.full(25, -1, dtype=np.int64)
    table[: min(25, n_joints)] = np.arange(min(25, n_joints))
    return table


def project_joints(joints: np.ndarray, cam: Camera, joint_map: np.ndarray) -> np.ndarray:
    """Keypoints in pixel coordinates with visibility confidence, BODY_25 order."""
    view = cam.world_to_view(joints)
    z = view[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * view[:, 0] / z + cam.cx
        v = cam.fy * view[:, 1] / z + cam.cy
    out = np.zeros((len(joint_map), 3))
    for slot, ji in enumerate(joint_map):
        if ji < 0 or ji >= len(joints) or z[ji] <= 0:
            continue
        out[slot] = (u[ji], v[ji], 1.0)
    return out


def apply_guidance(
    scene: Scene,
    j: int,
    provider,
    sampler: VirtualCameraSampler,
    tsched: TimestepSchedule,
    rng: np.random.Generator,
    iteration: int,
    weight: float = 1.0,
    fill_color=(0.0, 0.0, 0.0),
    text_token: str = "",
):
    """One guidance step for human j: sample view/pose/timestep, render the
    human alone, query the provider, and backprop the returned gradient into
    the canonical attributes (scaled by `weight`).

    Returns (SetGrads or None, info dict); provider failures skip the step
    rather than aborting training.
    """
    from .articulation import deform

    h = scene.human(j)
    late = iteration >= sampler.zoom_start_iter
    canonical_pose = Pose.rest(h.skeleton.n_joints)
    pose, is_canon = sample_guidance_pose(rng, h.pose_track, canonical_pose, late, sampler)
    bucket = sample_view_bucket(rng, is_canon, iteration, sampler)
    tau, tau_max = anneal_timestep(rng, iteration, tsched)

    joints = posed_joint_positions(h.skeleton, pose)
    pelvis = joints[0]
    body_radius = float(np.max(np.linalg.norm(h.canonical.centers - h.skeleton.rest_joints[0], axis=1)))
    yaw = body_yaw(pose, sampler.up_axis)
    cam, tag = sample_virtual_camera(sampler, rng, pelvis, joints, body_radius, iteration, bucket, yaw)

    info = {"tau": tau, "tau_max": tau_max, "bucket": bucket, "view_tag": tag, "ok": False}
    if provider is None:
        return None, info

    posed = deform(h.canonical, h.skeleton, pose, h.grid, save_ctx=True)
    out = render_batch3d(posed.centers, posed.covs, posed.colors, posed.opacities, cam, fill_color, save_ctx=True)

    joint_map = h.skeleton.openpose_map
    if joint_map is None:
        joint_map = default_openpose_map(h.skeleton.n_joints)
    request = GuidanceRequest(
        image=out.color,
        person_id=j,
        text_token=text_token,
        view_tag=tag,
        joints2d=project_joints(joints, cam, joint_map),
        tau=tau,
    )
    try:
        response = provider(request)
    except Exception as exc:  # provider flakiness must not kill training
        info["error"] = str(exc)
        return None, info

    g3 = render_backward_3d(out, np.asarray(response.grad_image, dtype=np.float64) * weight)
    grads = _segment_grads(g3, slice(0, len(posed)), posed.ctx)
    info["ok"] = True
    info["diagnostic"] = float(response.diagnostic)
    return grads, info
