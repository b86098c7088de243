"""Perspective projection of 3D Gaussians to screen-space splats.

The 2D covariance is the classic EWA approximation: the 3D covariance is
pushed through the camera rotation and the Jacobian of the perspective
projection linearized at the view-space mean, then dilated by a small
low-pass term so no splat falls below pixel size.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera
from .gaussians import GaussianSet

LOWPASS = 0.3  # px^2 added to the 2D covariance diagonal
NEAR_PLANE = 1e-3
FOOTPRINT_SIGMA = 3.0  # splat influence radius in standard deviations


@dataclass
class Splat2D:
    mean2d: np.ndarray  # (2,) pixels
    cov2d: np.ndarray  # (2, 2) pixels^2
    depth: float  # view-space z, meters
    source: int  # index into the projected set


@dataclass
class SplatBatch:
    """Struct-of-arrays collection of projected splats (culled ones removed)."""

    mean2d: np.ndarray  # (K, 2)
    cov2d: np.ndarray  # (K, 3) upper triangle (c11, c12, c22)
    conic: np.ndarray  # (K, 3) inverse covariance (a, b, c)
    depth: np.ndarray  # (K,)
    radius: np.ndarray  # (K,) screen-space bounding radius, pixels
    source: np.ndarray  # (K,) int64 indices into the input set

    def __len__(self):
        return len(self.depth)

    def __getitem__(self, i: int) -> Splat2D:
        c11, c12, c22 = self.cov2d[i]
        return Splat2D(
            mean2d=self.mean2d[i].copy(),
            cov2d=np.array([[c11, c12], [c12, c22]]),
            depth=float(self.depth[i]),
            source=int(self.source[i]),
        )


@dataclass
class ProjCtx:
    """Saved forward state for the projection backward pass (kept splats only)."""

    cam: Camera
    tview: np.ndarray  # (K, 3) view-space means
    M: np.ndarray  # (K, 2, 3) = J @ R_cam
    cov3d: np.ndarray  # (K, 3, 3) world covariances
    conic: np.ndarray  # (K, 3)


def project_arrays(centers, covs, cam: Camera, near=NEAR_PLANE, lowpass=LOWPASS):
    """Project world-space (centers, covariances) to screen splats.

    Returns (SplatBatch, ProjCtx). Gaussians behind the near plane or whose
    3-sigma footprint misses the frame entirely are culled.
    """
    centers = np.asarray(centers, dtype=np.float64)
    covs = np.asarray(covs, dtype=np.float64)
    tview = centers @ cam.R.T + cam.t
    in_front = tview[:, 2] > near

    idx = np.nonzero(in_front)[0]
    tv = tview[idx]
    tx, ty, tz = tv[:, 0], tv[:, 1], tv[:, 2]
    inv_z = 1.0 / tz

    u = cam.fx * tx * inv_z + cam.cx
    v = cam.fy * ty * inv_z + cam.cy

    # J = [[fx/z, 0, -fx x/z^2], [0, fy/z, -fy y/z^2]]
    K = len(idx)
    J = np.zeros((K, 2, 3), dtype=np.float64)
    J[:, 0, 0] = cam.fx * inv_z
    J[:, 0, 2] = -cam.fx * tx * inv_z**2
    J[:, 1, 1] = cam.fy * inv_z
    J[:, 1, 2] = -cam.fy * ty * inv_z**2

    M = J @ cam.R
    cov2 = np.einsum("kij,kjl,kml->kim", M, covs[idx], M)
    c11 = cov2[:, 0, 0] + lowpass
    c12 = cov2[:, 0, 1]
    c22 = cov2[:, 1, 1] + lowpass

    det = c11 * c22 - c12**2
    mid = 0.5 * (c11 + c22)
    lam_max = mid + np.sqrt(np.maximum(mid**2 - det, 0.0))
    radius = np.ceil(FOOTPRINT_SIGMA * np.sqrt(lam_max))

    visible = (
        (det > 0)
        & (u + radius >= 0)
        & (u - radius <= cam.width - 1)
        & (v + radius >= 0)
        & (v - radius <= cam.height - 1)
    )
    keep = np.nonzero(visible)[0]

    inv_det = 1.0 / det[keep]
    conic = np.stack([c22[keep] * inv_det, -c12[keep] * inv_det, c11[keep] * inv_det], axis=1)

    batch = SplatBatch(
        mean2d=np.ascontiguousarray(np.stack([u[keep], v[keep]], axis=1)),
        cov2d=np.ascontiguousarray(np.stack([c11[keep], c12[keep], c22[keep]], axis=1)),
        conic=np.ascontiguousarray(conic),
        depth=np.ascontiguousarray(tz[keep]),
        radius=np.ascontiguousarray(radius[keep]),
        source=idx[keep].astype(np.int64),
    )
    ctx = ProjCtx(cam=cam, tview=tv[keep], M=M[keep], cov3d=covs[idx[keep]], conic=batch.conic)
    return batch, ctx


def project(gaussians: GaussianSet, cam: Camera, near=NEAR_PLANE, lowpass=LOWPASS) -> SplatBatch:
    """Project a world-space GaussianSet; see project_arrays."""
    batch, _ = project_arrays(gaussians.centers, gaussians.covariances(), cam, near, lowpass)
    return batch


def sort_by_depth(batch: SplatBatch) -> SplatBatch:
    """Ascending view-space depth; ties keep source-index order (stable)."""
    order = np.argsort(batch.depth, kind="stable")
    return SplatBatch(
        mean2d=batch.mean2d[order],
        cov2d=batch.cov2d[order],
        conic=batch.conic[order],
        depth=batch.depth[order],
        radius=batch.radius[order],
        source=batch.source[order],
    )


def project_backward(ctx: ProjCtx, dmean2d: np.ndarray, dconic: np.ndarray):
    """Backprop screen-space gradients to world centers and covariances.

    dconic holds gradients w.r.t. the conic parameters (a, b, c) where the
    splat exponent is -(a dx^2 + c dy^2)/2 - b dx dy. Returns
    (dL/dcenters (K, 3), dL/dcov3d (K, 3, 3)) in the kept-splat order.
    """
    cam = ctx.cam
    K = len(ctx.tview)
    a, b, c = ctx.conic[:, 0], ctx.conic[:, 1], ctx.conic[:, 2]
    Q = np.empty((K, 2, 2), dtype=np.float64)
    Q[:, 0, 0] = a
    Q[:, 0, 1] = Q[:, 1, 0] = b
    Q[:, 1, 1] = c

    # Conic = inverse covariance: dL/dC = -Q G Q with G in full-matrix form.
    G = np.empty_like(Q)
    G[:, 0, 0] = dconic[:, 0]
    G[:, 0, 1] = G[:, 1, 0] = 0.5 * dconic[:, 1]
    G[:, 1, 1] = dconic[:, 2]
    H = -np.einsum("kij,kjl,klm->kim", Q, G, Q)

    dcov3d = np.einsum("kji,kjl,klm->kim", ctx.M, H, ctx.M)
    dM = 2.0 * np.einsum("kij,kjl,klm->kim", H, ctx.M, ctx.cov3d)
    dJ = np.einsum("kij,lj->kil", dM, cam.R)

    tx, ty, tz = ctx.tview[:, 0], ctx.tview[:, 1], ctx.tview[:, 2]
    inv_z2 = 1.0 / tz**2
    inv_z3 = inv_z2 / tz

    dtview = np.empty((K, 3), dtype=np.float64)
    dtview[:, 0] = dJ[:, 0, 2] * (-cam.fx * inv_z2)
    dtview[:, 1] = dJ[:, 1, 2] * (-cam.fy * inv_z2)
    dtview[:, 2] = (
        dJ[:, 0, 0] * (-cam.fx * inv_z2)
        + dJ[:, 0, 2] * (2.0 * cam.fx * tx * inv_z3)
        + dJ[:, 1, 1] * (-cam.fy * inv_z2)
        + dJ[:, 1, 2] * (2.0 * cam.fy * ty * inv_z3)
    )

    # Pixel position path: mean2d = pi(tview), with Jacobian J.
    J = np.zeros((K, 2, 3), dtype=np.float64)
    J[:, 0, 0] = cam.fx / tz
    J[:, 0, 2] = -cam.fx * tx * inv_z2
    J[:, 1, 1] = cam.fy / tz
    J[:, 1, 2] = -cam.fy * ty * inv_z2
    dtview += np.einsum("kij,ki->kj", J, dmean2d)

    dcenters = dtview @ cam.R
    return dcenters, dcov3d
