"""Compositional scene: world-space background plus canonical humans with pose tracks.

Rendering concatenates the background with every posed human into a single
world-space batch and rasterizes once; there is no per-layer compositing, so
occlusion between humans and background falls out of the global depth sort.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .articulation import (
    DeformCtx,
    Pose,
    Skeleton,
    SkinningGrid,
    TemplateMesh,
    bake_skinning_grid,
    deform,
    deform_backward,
    posed_joint_positions,
)
from .camera import Camera
from .errors import ContractViolationError, InvalidParameterError
from .gaussians import GaussianSet, logit
from .rasterizer import Grad3D, RenderOutput, render_backward_3d, render_batch3d

HUMAN_INIT_OPACITY = 0.9
HUMAN_INIT_GREY = 0.5
BG_INIT_OPACITY = 0.5
BG_SPHERE_RADIUS = 30.0


@dataclass
class Human:
    canonical: GaussianSet
    skeleton: Skeleton
    mesh: TemplateMesh
    grid: SkinningGrid
    pose_track: np.ndarray  # (T_j, 3*J + 3)

    def __post_init__(self):
        self.pose_track = np.atleast_2d(np.asarray(self.pose_track, dtype=np.float64))
        if self.pose_track.shape[1] != 3 * self.skeleton.n_joints + 3:
            raise InvalidParameterError("pose track width does not match the skeleton")

    def pose_at(self, t: int) -> Pose:
        t = min(int(t), len(self.pose_track) - 1)
        return Pose.from_vector(self.pose_track[t], self.skeleton.n_joints)

    def pelvis(self, pose: Pose) -> np.ndarray:
        return posed_joint_positions(self.skeleton, pose)[0]


@dataclass
class Scene:
    background: GaussianSet
    humans: list  # Optional[Human] entries; removed slots stay as None
    cameras: list  # per-frame training cameras
    frame_count: int

    def active_humans(self):
        return [(j, h) for j, h in enumerate(self.humans) if h is not None]

    def human(self, j: int) -> Human:
        if j < 0 or j >= len(self.humans) or self.humans[j] is None:
            raise IndexError(f"no human at index {j}")
        return self.humans[j]


def _knn_mean_distance(points: np.ndarray, k: int = 3) -> np.ndarray:
    """Per-point mean distance to the k nearest other points."""
    n = len(points)
    if n < 2:
        return np.full(n, 0.1)
    kk = min(k + 1, n)
    d, _ = cKDTree(points).query(points, k=kk)
    return d[:, 1:].mean(axis=1)


def fibonacci_sphere(n: int) -> np.ndarray:
    """Near-uniform unit directions (golden-angle spiral)."""
    i = np.arange(n, dtype=np.float64)
    phi = np.pi * (np.sqrt(5.0) - 1.0) * i
    y = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(1.0 - y * y, 0.0))
    return np.stack([r * np.cos(phi), y, r * np.sin(phi)], axis=1)


def background_from_points(positions: np.ndarray, colors: np.ndarray) -> GaussianSet:
    """One Gaussian per point; isotropic scale from local point spacing."""
    positions = np.asarray(positions, dtype=np.float64)
    if len(positions) == 0:
        raise InvalidParameterError("background point cloud is empty")
    colors = np.clip(np.asarray(colors, dtype=np.float64), 0.0, 1.0)
    scale = _knn_mean_distance(positions)
    m = len(positions)
    quats = np.zeros((m, 4))
    quats[:, 0] = 1.0
    return GaussianSet.from_attributes(
        centers=positions,
        quats=quats,
        scales=np.repeat(scale[:, None], 3, axis=1),
        colors=colors,
        opacities=np.full(m, BG_INIT_OPACITY),
        space="world",
    )


def background_sphere(radius: float = BG_SPHERE_RADIUS, n_points: int = 2000, center=(0.0, 0.0, 0.0)) -> GaussianSet:
    """Grey enclosing sphere used when no reconstruction point cloud exists."""
    dirs = fibonacci_sphere(n_points)
    positions = np.asarray(center, dtype=np.float64) + radius * dirs
    return background_from_points(positions, np.full((n_points, 3), HUMAN_INIT_GREY))


def init_human(mesh: TemplateMesh) -> GaussianSet:
    """Canonical human set seeded from the template vertices: grey, opacity 0.9."""
    m = len(mesh.vertices)
    quats = np.zeros((m, 4))
    quats[:, 0] = 1.0
    scale = _knn_mean_distance(mesh.vertices)
    return GaussianSet.from_attributes(
        centers=mesh.vertices.copy(),
        quats=quats,
        scales=np.repeat(scale[:, None], 3, axis=1),
        colors=np.full((m, 3), HUMAN_INIT_GREY),
        opacities=np.full(m, HUMAN_INIT_OPACITY),
        space="canonical",
    )


def make_human(mesh: TemplateMesh, skeleton: Skeleton, pose_track, grid_resolution: int = 64) -> Human:
    return Human(
        canonical=init_human(mesh),
        skeleton=skeleton,
        mesh=mesh,
        grid=bake_skinning_grid(mesh, resolution=grid_resolution),
        pose_track=pose_track,
    )


@dataclass
class SceneRenderCtx:
    segments: list  # ("background", None, slice, None) / ("human", j, slice, DeformCtx)
    render_ctx: object
    n_by_segment: dict


def compose(scene: Scene, t: int, save_ctx: bool = True):
    """Deform every human at frame t and concatenate with the background."""
    if t < 0 or t >= scene.frame_count:
        raise IndexError(f"frame {t} out of range [0, {scene.frame_count})")
    parts_c, parts_v, parts_col, parts_o = [], [], [], []
    segments = []
    offset = 0

    bg = scene.background
    if len(bg):
        parts_c.append(bg.centers)
        parts_v.append(bg.covariances())
        parts_col.append(bg.colors)
        parts_o.append(bg.opacities)
        segments.append(("background", None, slice(offset, offset + len(bg)), None))
        offset += len(bg)

    for j, h in scene.active_humans():
        posed = deform(h.canonical, h.skeleton, h.pose_at(t), h.grid, save_ctx=save_ctx)
        parts_c.append(posed.centers)
        parts_v.append(posed.covs)
        parts_col.append(posed.colors)
        parts_o.append(posed.opacities)
        segments.append(("human", j, slice(offset, offset + len(posed)), posed.ctx))
        offset += len(posed)

    if offset == 0:
        return np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros((0, 3)), np.zeros(0), segments
    return (
        np.concatenate(parts_c),
        np.concatenate(parts_v),
        np.concatenate(parts_col),
        np.concatenate(parts_o),
        segments,
    )


def compose_and_render(
    scene: Scene, t: int, cam: Camera, background_color=(0.0, 0.0, 0.0), save_ctx: bool = False
) -> RenderOutput:
    centers, covs, colors, opacs, segments = compose(scene, t, save_ctx=save_ctx)
    out = render_batch3d(centers, covs, colors, opacs, cam, background_color, save_ctx=save_ctx)
    if save_ctx:
        out.ctx = SceneRenderCtx(
            segments=segments,
            render_ctx=out.ctx,
            n_by_segment={seg[0:2]: seg[2].stop - seg[2].start for seg in segments},
        )
    return out


# Per-set gradient bundle; humans receive theirs in canonical space.
SetGrads = Grad3D


def _segment_grads(g3: Grad3D, seg_slice: slice, deform_ctx: Optional[DeformCtx]) -> SetGrads:
    sl = seg_slice
    grads = SetGrads(
        centers=g3.centers[sl].copy(),
        covs=g3.covs[sl].copy(),
        colors=g3.colors[sl].copy(),
        opacities=g3.opacities[sl].copy(),
        screen_norm=g3.screen_norm[sl].copy(),
        visible=g3.visible[sl].copy(),
    )
    if deform_ctx is not None:
        dc, dv = deform_backward(deform_ctx, grads.centers, grads.covs)
        grads.centers, grads.covs = dc, dv
    return grads


def scene_render_backward(out: RenderOutput, g_image, g_alpha=None) -> dict:
    """Route image gradients back to each set; human grads land in canonical space."""
    ctx = out.ctx
    if not isinstance(ctx, SceneRenderCtx):
        raise ContractViolationError("render output carries no scene forward state")
    g3 = render_backward_3d(RenderOutput(out.color, out.alpha, ctx.render_ctx), g_image, g_alpha)
    result = {}
    for kind, j, sl, dctx in ctx.segments:
        result[(kind, j)] = _segment_grads(g3, sl, dctx)
    return result


def render_human(
    scene: Scene,
    j: int,
    cam: Camera,
    pose: Optional[Pose] = None,
    t: Optional[int] = None,
    background_color=(0.0, 0.0, 0.0),
    save_ctx: bool = False,
) -> RenderOutput:
    """Render one human in isolation over a constant fill color."""
    h = scene.human(j)
    if pose is None:
        pose = h.pose_at(0 if t is None else t)
    posed = deform(h.canonical, h.skeleton, pose, h.grid, save_ctx=save_ctx)
    out = render_batch3d(posed.centers, posed.covs, posed.colors, posed.opacities, cam, background_color, save_ctx=save_ctx)
    if save_ctx:
        out.ctx = SceneRenderCtx(
            segments=[("human", j, slice(0, len(posed)), posed.ctx)],
            render_ctx=out.ctx,
            n_by_segment={("human", j): len(posed)},
        )
    return out


def remove_human(scene: Scene, j: int) -> Scene:
    """Drop human j; indices of the other humans stay stable (slot becomes empty)."""
    scene.human(j)  # validates
    humans = list(scene.humans)
    humans[j] = None
    return replace(scene, humans=humans)


def retarget_motion(scene: Scene, j: int, new_track: np.ndarray) -> Scene:
    """Swap human j's pose track; canonical Gaussians are untouched."""
    h = scene.human(j)
    new_track = np.atleast_2d(np.asarray(new_track, dtype=np.float64))
    if len(new_track) < 1:
        raise InvalidParameterError("new pose track must have at least one frame")
    if new_track.shape[1] != 3 * h.skeleton.n_joints + 3:
        raise InvalidParameterError("pose track width does not match the skeleton")
    humans = list(scene.humans)
    humans[j] = replace(h, pose_track=new_track)
    return replace(scene, humans=humans)


def scene_extent(scene: Scene) -> float:
    """Radius of the scene: max distance of any background center from their mean."""
    pts = scene.background.centers
    if len(pts) == 0:
        pts = np.concatenate([h.canonical.centers for _, h in scene.active_humans()] or [np.zeros((1, 3))])
    c = pts.mean(axis=0)
    return float(np.max(np.linalg.norm(pts - c, axis=1))) if len(pts) else 1.0
