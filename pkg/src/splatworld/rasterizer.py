"""Tiled alpha-compositing rasterizer with analytic gradients.

The per-pixel compositing loops run in a compiled extension when available
(built from _kernels.pyx) and fall back to vectorized numpy otherwise; the
backend is chosen once at import and can be forced with the environment
variable SPLATWORLD_KERNELS={auto,compiled,python}.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .camera import Camera
from .errors import ContractViolationError
from .projection import SplatBatch, project_arrays, project_backward, sort_by_depth

TILE = 16


def _select_backend():
    choice = os.environ.get("SPLATWORLD_KERNELS", "auto")
    if choice not in ("auto", "compiled", "python"):
        raise ValueError(f"SPLATWORLD_KERNELS must be auto|compiled|python, got {choice!r}")
    if choice in ("auto", "compiled"):
        try:
            from . import _kernels as impl

            return impl
        except ImportError:
            if choice == "compiled":
                raise
    from . import _kernels_py as impl

    return impl


_impl = _select_backend()


def active_backend() -> str:
    return "compiled" if _impl.COMPILED else "python"


def get_backend(name: str):
    """Fetch a kernel module by name ('compiled' or 'python'); used by the benchmark."""
    if name == "python":
        from . import _kernels_py as impl

        return impl
    if name == "compiled":
        from . import _kernels as impl

        return impl
    raise ValueError(f"unknown backend {name!r}")


@dataclass
class RasterContext:
    """Forward state retained for the backward pass."""

    offsets: np.ndarray  # (n_tiles + 1,) int64 entry ranges
    entry_splat: np.ndarray  # (E,) int64 splat index (batch order) per entry
    e_mean: np.ndarray
    e_conic: np.ndarray
    e_color: np.ndarray
    e_opac: np.ndarray
    t_final: np.ndarray  # (H, W)
    n_contrib: np.ndarray  # (H, W) int32
    background: np.ndarray
    width: int
    height: int
    n_splats: int  # splats in the rasterized batch
    backend: object


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    ctx: Optional[RasterContext] = None


@dataclass
class SplatGrads:
    """Per-splat gradients in the order of the rasterized batch."""

    mean2d: np.ndarray  # (K, 2)
    conic: np.ndarray  # (K, 3)
    color: np.ndarray  # (K, 3)
    opacity: np.ndarray  # (K,)

    @property
    def screen_norm(self) -> np.ndarray:
        return np.linalg.norm(self.mean2d, axis=1)


def bin_splats(batch: SplatBatch, width: int, height: int, tile: int = TILE):
    """Assign each splat to every tile its bounding radius touches.

    Returns (offsets, entry_splat): entries grouped by tile, preserving the
    batch (depth) order inside each tile.
    """
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    n_tiles = ntx * nty
    K = len(batch)
    if K == 0:
        return np.zeros(n_tiles + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)

    u, v = batch.mean2d[:, 0], batch.mean2d[:, 1]
    r = batch.radius
    x_lo = np.clip(np.floor((u - r) / tile), 0, ntx - 1).astype(np.int64)
    x_hi = np.clip(np.floor((u + r) / tile), 0, ntx - 1).astype(np.int64)
    y_lo = np.clip(np.floor((v - r) / tile), 0, nty - 1).astype(np.int64)
    y_hi = np.clip(np.floor((v + r) / tile), 0, nty - 1).astype(np.int64)

    nx = x_hi - x_lo + 1
    ny = y_hi - y_lo + 1
    cnt = nx * ny
    splat_ids = np.repeat(np.arange(K, dtype=np.int64), cnt)
    starts = np.concatenate([[0], np.cumsum(cnt)[:-1]])
    local = np.arange(len(splat_ids), dtype=np.int64) - np.repeat(starts, cnt)
    nx_rep = np.repeat(nx, cnt)
    tile_x = np.repeat(x_lo, cnt) + local % nx_rep
    tile_y = np.repeat(y_lo, cnt) + local // nx_rep
    tile_id = tile_y * ntx + tile_x

    order = np.lexsort((splat_ids, tile_id))
    entry_splat = splat_ids[order]
    counts = np.bincount(tile_id, minlength=n_tiles)
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return offsets, entry_splat


def rasterize(
    batch: SplatBatch,
    colors: np.ndarray,
    opacities: np.ndarray,
    cam: Camera,
    background=(0.0, 0.0, 0.0),
    save_ctx: bool = True,
    backend=None,
) -> RenderOutput:
    """Front-to-back composite a depth-sorted splat batch.

    `colors`/`opacities` are indexed by the batch's source indices. Splats
    with per-pixel alpha below 1/255 are skipped and compositing stops once
    transmittance falls under 1e-4; leftover transmittance takes the
    background color.
    """
    impl = backend or _impl
    W, H = cam.width, cam.height
    bg = np.ascontiguousarray(background, dtype=np.float64)
    offsets, entry_splat = bin_splats(batch, W, H)

    src = batch.source
    e_mean = np.ascontiguousarray(batch.mean2d[entry_splat])
    e_conic = np.ascontiguousarray(batch.conic[entry_splat])
    e_color = np.ascontiguousarray(np.asarray(colors, dtype=np.float64)[src[entry_splat]])
    e_opac = np.ascontiguousarray(np.asarray(opacities, dtype=np.float64)[src[entry_splat]])

    image = np.empty((H, W, 3), dtype=np.float64)
    alpha = np.empty((H, W), dtype=np.float64)
    t_final = np.empty((H, W), dtype=np.float64)
    n_contrib = np.empty((H, W), dtype=np.int32)
    impl.rasterize_forward(
        offsets, e_mean, e_conic, e_color, e_opac, bg, W, H, TILE, image, alpha, t_final, n_contrib
    )

    ctx = None
    if save_ctx:
        ctx = RasterContext(
            offsets=offsets,
            entry_splat=entry_splat,
            e_mean=e_mean,
            e_conic=e_conic,
            e_color=e_color,
            e_opac=e_opac,
            t_final=t_final,
            n_contrib=n_contrib,
            background=bg,
            width=W,
            height=H,
            n_splats=len(batch),
            backend=impl,
        )
    return RenderOutput(color=image, alpha=alpha, ctx=ctx)


def rasterize_backward(ctx: RasterContext, g_image: np.ndarray, g_alpha=None) -> SplatGrads:
    """Backprop image (and optional alpha-map) gradients to per-splat attributes.

    Per-tile partial buffers are reduced in a fixed serial order, so the
    result is independent of how tiles were scheduled across threads.
    """
    if ctx is None:
        raise ContractViolationError("rasterize_backward requires the saved forward state")
    g_image = np.ascontiguousarray(g_image, dtype=np.float64)
    if g_image.shape != (ctx.height, ctx.width, 3):
        raise ContractViolationError("output gradient shape does not match the forward render")
    if g_alpha is None:
        g_alpha = np.zeros((ctx.height, ctx.width), dtype=np.float64)
    else:
        g_alpha = np.ascontiguousarray(g_alpha, dtype=np.float64)

    partial = np.zeros((len(ctx.entry_splat), 9), dtype=np.float64)
    ctx.backend.rasterize_backward(
        ctx.offsets,
        ctx.e_mean,
        ctx.e_conic,
        ctx.e_color,
        ctx.e_opac,
        ctx.background,
        ctx.width,
        ctx.height,
        TILE,
        ctx.t_final,
        ctx.n_contrib,
        g_image,
        g_alpha,
        partial,
    )
    acc = np.zeros((ctx.n_splats, 9), dtype=np.float64)
    np.add.at(acc, ctx.entry_splat, partial)
    return SplatGrads(
        mean2d=acc[:, 0:2].copy(),
        conic=acc[:, 2:5].copy(),
        color=acc[:, 5:8].copy(),
        opacity=acc[:, 8].copy(),
    )


@dataclass
class FullRenderCtx:
    proj_ctx: object
    raster_ctx: RasterContext
    source: np.ndarray  # original-set index per kept splat (sorted order)
    n_gaussians: int


@dataclass
class Grad3D:
    """Per-Gaussian gradients of one rendered set (world or canonical space)."""

    centers: np.ndarray  # (M, 3)
    covs: np.ndarray  # (M, 3, 3)
    colors: np.ndarray  # (M, 3)
    opacities: np.ndarray  # (M,) w.r.t. constrained opacity
    screen_norm: np.ndarray  # (M,) accumulated |dL/d mean2d|
    visible: np.ndarray  # (M,) bool, splat survived culling

    def add(self, other: "Grad3D") -> "Grad3D":
        self.centers += other.centers
        self.covs += other.covs
        self.colors += other.colors
        self.opacities += other.opacities
        self.screen_norm += other.screen_norm
        self.visible |= other.visible
        return self

    def scaled(self, f: float) -> "Grad3D":
        return Grad3D(
            f * self.centers, f * self.covs, f * self.colors, f * self.opacities,
            abs(f) * self.screen_norm, self.visible.copy(),
        )

    @classmethod
    def zeros(cls, m: int) -> "Grad3D":
        return cls(
            np.zeros((m, 3)), np.zeros((m, 3, 3)), np.zeros((m, 3)), np.zeros(m),
            np.zeros(m), np.zeros(m, dtype=bool),
        )


def render_batch3d(
    centers, covs, colors, opacities, cam: Camera, background=(0.0, 0.0, 0.0), save_ctx=True, backend=None
) -> RenderOutput:
    """Project, depth-sort and rasterize a world-space Gaussian batch."""
    batch, proj_ctx = project_arrays(centers, covs, cam)
    order = np.argsort(batch.depth, kind="stable")
    batch = SplatBatch(
        mean2d=batch.mean2d[order],
        cov2d=batch.cov2d[order],
        conic=batch.conic[order],
        depth=batch.depth[order],
        radius=batch.radius[order],
        source=batch.source[order],
    )
    out = rasterize(batch, colors, opacities, cam, background, save_ctx=save_ctx, backend=backend)
    if save_ctx:
        # Re-order the projection state to match the sorted batch.
        proj_ctx.tview = proj_ctx.tview[order]
        proj_ctx.M = proj_ctx.M[order]
        proj_ctx.cov3d = proj_ctx.cov3d[order]
        proj_ctx.conic = batch.conic
        out.ctx = FullRenderCtx(
            proj_ctx=proj_ctx,
            raster_ctx=out.ctx,
            source=batch.source,
            n_gaussians=len(centers),
        )
    return out


def render_backward_3d(out: RenderOutput, g_image, g_alpha=None) -> Grad3D:
    """Full analytic backward: image gradients to 3D centers/covariances/colors/opacities."""
    ctx = out.ctx
    if not isinstance(ctx, FullRenderCtx):
        raise ContractViolationError("render output carries no full-render forward state")
    sg = rasterize_backward(ctx.raster_ctx, g_image, g_alpha)
    dcen_k, dcov_k = project_backward(ctx.proj_ctx, sg.mean2d, sg.conic)

    M = ctx.n_gaussians
    grads = Grad3D(
        centers=np.zeros((M, 3)),
        covs=np.zeros((M, 3, 3)),
        colors=np.zeros((M, 3)),
        opacities=np.zeros(M),
        screen_norm=np.zeros(M),
        visible=np.zeros(M, dtype=bool),
    )
    src = ctx.source
    grads.centers[src] = dcen_k
    grads.covs[src] = dcov_k
    grads.colors[src] = sg.color
    grads.opacities[src] = sg.opacity
    grads.screen_norm[src] = sg.screen_norm
    grads.visible[src] = True
    return grads
