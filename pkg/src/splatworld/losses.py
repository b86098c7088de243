"""Reconstruction losses and regularizers, each returning (value, gradient)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class LossWeights:
    rgb: float = 0.8
    ssim: float = 0.2
    perceptual: float = 0.1  # only active when a perceptual plugin is configured
    guidance: float = 1.0
    hard_factor: float = 0.1  # hard-surface weight relative to the recon weight
    bg_reg: float = 1.0


def mse_loss(render: np.ndarray, target: np.ndarray, mask=None):
    """Mean squared error over (optionally masked) pixels; gradient w.r.t. render."""
    render = np.asarray(render, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if render.shape != target.shape:
        raise ValueError(f"image shapes differ: {render.shape} vs {target.shape}")
    diff = render - target
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != render.shape[:2]:
            raise ValueError(f"mask shape {mask.shape} does not match image {render.shape[:2]}")
        diff = diff * mask[:, :, None]
        n = max(float(mask.sum()), 1.0) * render.shape[2]
    else:
        n = float(diff.size)
    value = float(np.sum(diff**2) / n)
    grad = 2.0 * diff / n
    return value, grad


def _window() -> np.ndarray:
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(x**2) / (2.0 * SSIM_SIGMA**2))
    return g / g.sum()


def _blur(img: np.ndarray) -> np.ndarray:
    """Separable windowed mean with zero boundary; self-adjoint."""
    k = _window()
    out = correlate1d(img, k, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, k, axis=1, mode="constant", cval=0.0)


def ssim_loss(render: np.ndarray, target: np.ndarray):
    """Structural dissimilarity 1 - mean(SSIM) with its analytic image gradient.

    Gaussian window 11x11 (sigma 1.5), stability constants for unit dynamic
    range. Channels are scored independently and averaged.
    """
    x = np.asarray(render, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    if min(x.shape[0], x.shape[1]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    if x.ndim == 2:
        x = x[:, :, None]
        y = y[:, :, None]

    mu_x = _blur(x)
    mu_y = _blur(y)
    var_x = _blur(x * x) - mu_x**2
    var_y = _blur(y * y) - mu_y**2
    cov = _blur(x * y) - mu_x * mu_y

    A1 = 2.0 * mu_x * mu_y + SSIM_C1
    A2 = 2.0 * cov + SSIM_C2
    B1 = mu_x**2 + mu_y**2 + SSIM_C1
    B2 = var_x + var_y + SSIM_C2
    ssim_map = (A1 * A2) / (B1 * B2)
    n = ssim_map.size
    value = 1.0 - float(ssim_map.mean())

    # Partials of the SSIM map w.r.t. the windowed statistics.
    d_mu = (2.0 / B1) * (mu_y * A2 / B2 - mu_x * ssim_map)
    d_var = -ssim_map / B2
    d_cov = 2.0 * (A1 / B1) / B2

    # Chain through the (self-adjoint) windowing operator.
    grad = _blur(d_mu) + 2.0 * x * _blur(d_var) - 2.0 * _blur(d_var * mu_x)
    grad += y * _blur(d_cov) - _blur(d_cov * mu_y)
    grad *= -1.0 / n
    if render.ndim == 2:
        grad = grad[:, :, 0]
    return value, grad


def hard_surface_loss(alpha: np.ndarray):
    """Push rendered alpha toward fully opaque or fully empty.

    Per pixel: -log(exp(-|a|) + exp(-|1-a|)), averaged; minimized at a in
    {0, 1}, locally maximal at 0.5.
    """
    a = np.asarray(alpha, dtype=np.float64)
    if np.any(a < -1e-9) or np.any(a > 1.0 + 1e-9):
        raise ValueError("alpha map values must lie in [0, 1]")
    a = np.clip(a, 0.0, 1.0)
    e0 = np.exp(-a)
    e1 = np.exp(-(1.0 - a))
    value = float(np.mean(-np.log(e0 + e1)))
    grad = (e0 - e1) / (e0 + e1) / a.size
    return value, grad


def background_sphere_reg(centers: np.ndarray, sphere_center, radius: float = 30.0):
    """Sum of squared radial deviations of background centers from the sphere."""
    c = np.asarray(centers, dtype=np.float64) - np.asarray(sphere_center, dtype=np.float64)
    dist = np.linalg.norm(c, axis=1)
    dev = dist - radius
    value = float(np.sum(dev**2))
    grad = 2.0 * (dev / np.maximum(dist, 1e-12))[:, None] * c
    return value, grad


def recon_weight_schedule(iteration: int, tau_max: float, guidance_start: int = 1000) -> float:
    """Reconstruction weight: fixed 1.0 before guidance starts, then 1e6 * tau_max^2."""
    if iteration < guidance_start:
        return 1.0
    return 1e6 * tau_max**2


def total_loss(recon: float, guidance: float, hard: float, weights: LossWeights, lambda_recon: float) -> float:
    """Weighted objective; the hard-surface weight is tied to the recon weight."""
    return lambda_recon * recon + weights.guidance * guidance + weights.hard_factor * lambda_recon * hard


def psnr(render: np.ndarray, target: np.ndarray, mask=None) -> float:
    """Peak signal-to-noise ratio in dB on unit dynamic range."""
    v, _ = mse_loss(render, target, mask)
    return float(10.0 * np.log10(1.0 / max(v, 1e-12)))
