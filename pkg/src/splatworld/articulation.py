"""Skeleton-driven deformation of canonical human Gaussians.

Linear blend skinning over a kinematic tree: per-point weights come from
inverse-distance interpolation of template-mesh skinning weights (30 nearest
vertices), precomputed into a voxel grid and queried by trilinear
interpolation at deform time. Centers move by the weighted joint rigid
transforms; covariances are conjugated by the weight-blended rotation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidParameterError
from .gaussians import GaussianSet

IDW_NEIGHBORS = 30
EXACT_HIT_DIST = 1e-8  # meters; query this close to a vertex takes its weights
GRID_PADDING = 0.1  # meters around the template bounding box


def axis_angle_to_matrices(aa: np.ndarray) -> np.ndarray:
    """Rodrigues formula, batched: (J, 3) axis-angle -> (J, 3, 3)."""
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1)
    safe = np.maximum(theta, 1e-12)
    axis = aa / safe[:, None]
    x, y, z = axis[:, 0], axis[:, 1], axis[:, 2]
    o = np.zeros_like(x)
    K = np.stack(
        [np.stack([o, -z, y], -1), np.stack([z, o, -x], -1), np.stack([-y, x, o], -1)], axis=1
    )
    s = np.sin(theta)[:, None, None]
    c = (1.0 - np.cos(theta))[:, None, None]
    R = np.eye(3)[None] + s * K + c * (K @ K)
    R[theta < 1e-12] = np.eye(3)
    return R


@dataclass
class Skeleton:
    """Kinematic tree: parent index per joint (root has parent -1) plus rest joints."""

    parents: np.ndarray  # (J,) int
    rest_joints: np.ndarray  # (J, 3) canonical-space positions
    joint_names: Optional[list] = None
    openpose_map: Optional[np.ndarray] = None  # BODY_25 slot -> joint index or -1

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.rest_joints = np.asarray(self.rest_joints, dtype=np.float64)
        J = len(self.parents)
        if self.rest_joints.shape != (J, 3):
            raise InvalidParameterError("rest joints must be (J, 3)")
        if not np.all(np.isfinite(self.rest_joints)):
            raise InvalidParameterError("rest joints must be finite")
        if self.parents[0] != -1:
            raise InvalidParameterError("joint 0 must be the root (parent -1)")
        if np.any(self.parents[1:] >= np.arange(1, J)) or np.any(self.parents[1:] < 0):
            raise InvalidParameterError("parents must form a tree with parents before children")

    @property
    def n_joints(self) -> int:
        return len(self.parents)


@dataclass
class Pose:
    """Per-joint axis-angle rotations plus a root translation.

    Angle magnitudes are wrapped into [0, 2*pi) on construction.
    """

    axis_angles: np.ndarray  # (J, 3)
    root_translation: np.ndarray  # (3,)

    def __post_init__(self):
        aa = np.asarray(self.axis_angles, dtype=np.float64)
        rt = np.asarray(self.root_translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(aa)) and np.all(np.isfinite(rt))):
            raise InvalidParameterError("pose parameters must be finite")
        theta = np.linalg.norm(aa, axis=-1)
        over = theta >= 2.0 * np.pi
        if np.any(over):
            aa = aa.copy()
            wrapped = np.mod(theta[over], 2.0 * np.pi)
            aa[over] *= (wrapped / theta[over])[:, None]
        self.axis_angles = aa
        self.root_translation = rt

    @classmethod
    def rest(cls, n_joints: int) -> "Pose":
        return cls(np.zeros((n_joints, 3)), np.zeros(3))

    @classmethod
    def from_vector(cls, vec: np.ndarray, n_joints: int) -> "Pose":
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if len(vec) != 3 * n_joints + 3:
            raise InvalidParameterError(
                f"pose vector needs {3 * n_joints + 3} values, got {len(vec)}"
            )
        return cls(vec[: 3 * n_joints].reshape(n_joints, 3), vec[3 * n_joints :])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.axis_angles.reshape(-1), self.root_translation])


def joint_transforms(skel: Skeleton, pose: Pose):
    """Forward kinematics relative to the rest pose.

    Returns (R, T) with shapes (J, 3, 3) and (J, 3) such that a point rigidly
    attached to joint k moves x -> R_k x + T_k; the zero pose maps rest joints
    to themselves (plus the root translation).
    """
    if len(pose.axis_angles) != skel.n_joints:
        raise InvalidParameterError("pose joint count does not match skeleton")
    local = axis_angle_to_matrices(pose.axis_angles)
    J = skel.n_joints
    rot = np.empty((J, 3, 3))
    pos = np.empty((J, 3))
    rot[0] = local[0]
    pos[0] = skel.rest_joints[0]
    for k in range(1, J):
        p = skel.parents[k]
        rot[k] = rot[p] @ local[k]
        pos[k] = rot[p] @ (skel.rest_joints[k] - skel.rest_joints[p]) + pos[p]
    T = pos - np.einsum("jab,jb->ja", rot, skel.rest_joints) + pose.root_translation
    return rot, T


def posed_joint_positions(skel: Skeleton, pose: Pose) -> np.ndarray:
    R, T = joint_transforms(skel, pose)
    return np.einsum("jab,jb->ja", R, skel.rest_joints) + T


@dataclass
class TemplateMesh:
    """Canonical-space template: vertices plus per-vertex skinning weights."""

    vertices: np.ndarray  # (V, 3)
    weights: np.ndarray  # (V, J), rows sum to 1
    faces: Optional[np.ndarray] = None
    _tree: Optional[cKDTree] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if len(self.vertices) != len(self.weights):
            raise InvalidParameterError("vertex and weight counts differ")
        if np.any(self.weights < -1e-12):
            raise InvalidParameterError("skinning weights must be nonnegative")
        rowsum = self.weights.sum(axis=1)
        if np.max(np.abs(rowsum - 1.0)) > 1e-6:
            raise InvalidParameterError("skinning weight rows must sum to 1")

    @property
    def n_joints(self) -> int:
        return self.weights.shape[1]

    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.vertices)
        return self._tree


def compute_vertex_weights(query: np.ndarray, mesh: TemplateMesh, k: int = IDW_NEIGHBORS) -> np.ndarray:
    """Inverse-distance blend of the k nearest template vertices' weights."""
    return compute_vertex_weights_batch(np.asarray(query, dtype=np.float64)[None], mesh, k)[0]

def compute_vertex_weights_batch(queries: np.ndarray, mesh: TemplateMesh, k: int = IDW_NEIGHBORS) -> np.ndarray:
    queries = np.asarray(queries, dtype=np.float64)
    k = min(k, len(mesh.vertices))
    d, idx = mesh.tree().query(queries, k=k)
    d = d.reshape(len(queries), k)
    idx = idx.reshape(len(queries), k)
    inv = 1.0 / np.maximum(d, EXACT_HIT_DIST)
    w = np.einsum("qk,qkj->qj", inv, mesh.weights[idx])
    w /= w.sum(axis=1, keepdims=True)
    hit = d[:, 0] < EXACT_HIT_DIST
    if np.any(hit):
        w[hit] = mesh.weights[idx[hit, 0]]
    return w


@dataclass
class SkinningGrid:
    """Voxelized skinning weights queried by trilinear interpolation."""

    origin: np.ndarray  # (3,) world position of the grid corner
    voxel_size: float  # cubic voxel edge length, meters
    weights: np.ndarray  # (nx, ny, nz, J)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 4:
            raise InvalidParameterError("grid weights must be (nx, ny, nz, J)")
        sums = self.weights.sum(axis=-1)
        if np.max(np.abs(sums - 1.0)) > 1e-5:
            raise InvalidParameterError("per-voxel weights must sum to 1")

    @property
    def dims(self):
        return self.weights.shape[:3]

    @property
    def n_joints(self) -> int:
        return self.weights.shape[3]

    def voxel_center(self, i, j, k) -> np.ndarray:
        return self.origin + (np.array([i, j, k], dtype=np.float64) + 0.5) * self.voxel_size


def bake_skinning_grid(mesh: TemplateMesh, resolution: int = 64, padding: float = GRID_PADDING) -> SkinningGrid:
    """Sample exact IDW weights at voxel centers over the padded template bounds."""
    lo = mesh.vertices.min(axis=0) - padding
    hi = mesh.vertices.max(axis=0) + padding
    extent = hi - lo
    voxel = float(np.max(extent)) / resolution
    dims = np.maximum(np.ceil(extent / voxel).astype(int), 1)
    # Center the (possibly slightly larger) grid on the padded box.
    origin = (lo + hi) / 2.0 - dims * voxel / 2.0

    ii, jj, kk = np.meshgrid(*(np.arange(n) for n in dims), indexing="ij")
    centers = origin + (np.stack([ii, jj, kk], axis=-1).reshape(-1, 3) + 0.5) * voxel
    w = compute_vertex_weights_batch(centers, mesh)
    return SkinningGrid(origin=origin, voxel_size=voxel, weights=w.reshape(*dims, -1))


def _grid_coords(grid: SkinningGrid, x: np.ndarray):
    """Continuous voxel-center coordinates, clamped to the grid interior."""
    c = (np.asarray(x, dtype=np.float64) - grid.origin) / grid.voxel_size - 0.5
    n = np.array(grid.dims, dtype=np.float64)
    inside = (c > 0.0) & (c < n - 1.0)  # clamped axes contribute zero gradient
    c = np.clip(c, 0.0, n - 1.0)
    i0 = np.minimum(c.astype(np.int64), np.maximum(np.array(grid.dims) - 2, 0))
    frac = c - i0
    return i0, frac, inside


def query_weights(grid: SkinningGrid, x: np.ndarray) -> np.ndarray:
    """Trilinear weight lookup for a single point, renormalized to sum 1."""
    w, _ = query_weights_batch(np.asarray(x, dtype=np.float64)[None], grid, with_grad=False)
    return w[0]


def query_weights_batch(points: np.ndarray, grid: SkinningGrid, with_grad: bool = False):
    """Batched trilinear lookup; optionally returns spatial gradients (Q, J, 3).

    Out-of-grid queries clamp to the boundary voxel (zero gradient along the
    clamped axis).
    """
    points = np.asarray(points, dtype=np.float64)
    Q = len(points)
    i0, frac, inside = _grid_coords(grid, points)
    nx, ny, nz = grid.dims
    gw = grid.weights

    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    u = np.zeros((Q, grid.n_joints))
    du = np.zeros((Q, grid.n_joints, 3)) if with_grad else None
    for dx in (0, 1):
        wx = fx if dx else 1.0 - fx
        gx = 1.0 if dx else -1.0
        xi = np.minimum(i0[:, 0] + dx, nx - 1)
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            gy = 1.0 if dy else -1.0
            yi = np.minimum(i0[:, 1] + dy, ny - 1)
            for dz in (0, 1):
                wz = fz if dz else 1.0 - fz
                gz = 1.0 if dz else -1.0
                zi = np.minimum(i0[:, 2] + dz, nz - 1)
                corner = gw[xi, yi, zi]  # (Q, J)
                u += (wx * wy * wz)[:, None] * corner
                if with_grad:
                    du[:, :, 0] += (gx * wy * wz)[:, None] * corner
                    du[:, :, 1] += (wx * gy * wz)[:, None] * corner
                    du[:, :, 2] += (wx * wy * gz)[:, None] * corner

    S = u.sum(axis=1, keepdims=True)
    w = u / S
    if not with_grad:
        return w, None
    du /= grid.voxel_size
    du *= inside[:, None, :]  # clamped axes are constant
    dS = du.sum(axis=1, keepdims=True)  # (Q, 1, 3)
    dw = du / S[:, :, None] - (u / S**2)[:, :, None] * dS
    return w, dw


@dataclass
class DeformCtx:
    """Saved forward state of a deformation, for backprop into canonical space."""

    weights: np.ndarray  # (M, J)
    dw_dx: np.ndarray  # (M, J, 3)
    joint_R: np.ndarray  # (J, 3, 3)
    joint_T: np.ndarray  # (J, 3)
    canon_centers: np.ndarray  # (M, 3)
    canon_covs: np.ndarray  # (M, 3, 3)
    blend_R: np.ndarray  # (M, 3, 3) weight-blended rotations


@dataclass
class PosedGaussians:
    """World-space posed Gaussians with explicit covariances."""

    centers: np.ndarray
    covs: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    ctx: Optional[DeformCtx] = None

    def __len__(self):
        return len(self.centers)


def deform(
    canonical: GaussianSet, skel: Skeleton, pose: Pose, grid: SkinningGrid, save_ctx: bool = True
) -> PosedGaussians:
    """Pose a canonical human set: blend joint rigid transforms per Gaussian.

    Centers move by the weight-blended rigid map; covariances are conjugated
    by the blended rotation (generally non-orthogonal). Colors and opacities
    pass through unchanged.
    """
    if canonical.space != "canonical":
        raise InvalidParameterError("deform expects a canonical-space set")
    R, T = joint_transforms(skel, pose)
    x = canonical.centers
    w, dw = query_weights_batch(x, grid, with_grad=save_ctx)

    posed_per_joint = np.einsum("jab,mb->mja", R, x) + T[None]
    centers = np.einsum("mj,mja->ma", w, posed_per_joint)
    A = np.einsum("mj,jab->mab", w, R)
    covs_c = canonical.covariances()
    covs = np.einsum("mab,mbc,mdc->mad", A, covs_c, A)

    ctx = None
    if save_ctx:
        ctx = DeformCtx(
            weights=w,
            dw_dx=dw,
            joint_R=R,
            joint_T=T,
            canon_centers=x,
            canon_covs=covs_c,
            blend_R=A,
        )
    return PosedGaussians(
        centers=centers, covs=covs, colors=canonical.colors.copy(), opacities=canonical.opacities, ctx=ctx
    )


def deform_backward(ctx: DeformCtx, dcenters_p: np.ndarray, dcovs_p: np.ndarray):
    """Backprop posed-space center/covariance gradients into canonical space.

    Accounts for the spatial variation of the skinning weights (trilinear
    grid gradient), so canonical-center gradients match finite differences of
    the full chain.
    """
    G = 0.5 * (dcovs_p + np.transpose(dcovs_p, (0, 2, 1)))
    A, R, T = ctx.blend_R, ctx.joint_R, ctx.joint_T
    dcovs_c = np.einsum("mba,mbc,mcd->mad", A, G, A)
    dA = 2.0 * np.einsum("mab,mbc,mcd->mad", G, A, ctx.canon_covs)

    posed_per_joint = np.einsum("jab,mb->mja", R, ctx.canon_centers) + T[None]
    dW = np.einsum("ma,mja->mj", dcenters_p, posed_per_joint)
    dW += np.einsum("mab,jab->mj", dA, R)

    dcenters_c = np.einsum("mj,jab,ma->mb", ctx.weights, R, dcenters_p)
    dcenters_c += np.einsum("mj,mjd->md", dW, ctx.dw_dx)
    return dcenters_c, dcovs_c
