"""Training loop: staged Adam over Gaussian attributes with densify/prune.

Three phases: the background is pre-optimized alone, then the humans warm up
on reconstruction only, then humans and background train jointly with the
guidance loss. Human centers stay frozen (and opacity stays clamped) for the
first stretch of the human phase; human densification fires at fixed
iterations and oversized/transparent Gaussians are pruned periodically.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidParameterError, SplatworldError
from .gaussians import GaussianSet, covariance_factor_backward, logit, quats_to_rots
from .guidance import TimestepSchedule, VirtualCameraSampler, apply_guidance, timestep_bounds
from .losses import (
    LossWeights,
    background_sphere_reg,
    hard_surface_loss,
    mse_loss,
    recon_weight_schedule,
    ssim_loss,
)
from .rasterizer import render_backward_3d, render_batch3d
from .scene import (
    Scene,
    SetGrads,
    compose_and_render,
    render_human,
    scene_extent,
    scene_render_backward,
)

ADAM_B1 = 0.9
ADAM_B2 = 0.999
ADAM_EPS = 1e-15

PARAM_NAMES = ("centers", "quats", "log_scales", "colors", "opacity_logits")


@dataclass
class LearningRates:
    center_init: float = 1e-3
    center_final: float = 2e-6
    color: float = 2.5e-3
    opacity: float = 5e-2
    scale: float = 5e-3
    quat: float = 1e-3

    def center_at(self, it: int, horizon: int) -> float:
        """Exponential decay from the initial to the final center rate."""
        f = min(max(it, 0) / max(horizon, 1), 1.0)
        return self.center_init * (self.center_final / self.center_init) ** f

    def rate_for(self, name: str) -> float:
        return {
            "quats": self.quat,
            "log_scales": self.scale,
            "colors": self.color,
            "opacity_logits": self.opacity,
        }[name]


@dataclass
class ParamGrads:
    centers: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    colors: np.ndarray
    opacity_logits: np.ndarray


def param_grads_from(gs: GaussianSet, sg: SetGrads) -> ParamGrads:
    """Chain set-space gradients into the unconstrained parameterization."""
    dq, dls = covariance_factor_backward(gs.quats, gs.log_scales, sg.covs)
    o = gs.opacities
    return ParamGrads(
        centers=sg.centers,
        quats=dq,
        log_scales=dls,
        colors=sg.colors,
        opacity_logits=sg.opacities * o * (1.0 - o),
    )


class AdamState:
    """First/second moment accumulators tracking one GaussianSet's attributes."""

    def __init__(self, gs: GaussianSet):
        self.m = {n: np.zeros_like(getattr(gs, n)) for n in PARAM_NAMES}
        self.v = {n: np.zeros_like(getattr(gs, n)) for n in PARAM_NAMES}
        self.step = {n: 0 for n in PARAM_NAMES}

    def lengths_match(self, gs: GaussianSet) -> bool:
        return all(len(self.m[n]) == len(getattr(gs, n)) for n in PARAM_NAMES)


def adam_step(
    state: AdamState,
    gs: GaussianSet,
    grads: ParamGrads,
    lrs: LearningRates,
    center_lr: float,
    freeze_centers: bool = False,
    opacity_clamp: float = None,
):
    """One Adam update over every attribute; quaternions are renormalized and
    colors clipped back into [0, 1] afterwards."""
    for name in PARAM_NAMES:
        if name == "centers" and freeze_centers:
            continue
        g = getattr(grads, name)
        p = getattr(gs, name)
        if g.shape != p.shape:
            raise InvalidParameterError(f"gradient shape mismatch for {name}: {g.shape} vs {p.shape}")
        state.step[name] += 1
        t = state.step[name]
        m, v = state.m[name], state.v[name]
        m *= ADAM_B1
        m += (1.0 - ADAM_B1) * g
        v *= ADAM_B2
        v += (1.0 - ADAM_B2) * g**2
        mhat = m / (1.0 - ADAM_B1**t)
        vhat = v / (1.0 - ADAM_B2**t)
        lr = center_lr if name == "centers" else lrs.rate_for(name)
        p -= lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
    gs.normalize_quats()
    np.clip(gs.colors, 0.0, 1.0, out=gs.colors)
    if opacity_clamp is not None:
        np.minimum(gs.opacity_logits, logit(opacity_clamp), out=gs.opacity_logits)


class DensifyState:
    """Accumulated screen gradients and view counts driving densification."""

    def __init__(self, n: int):
        self.screen_accum = np.zeros(n)
        self.center_accum = np.zeros((n, 3))
        self.count = np.zeros(n, dtype=np.int64)

    def reset(self, n: int):
        self.__init__(n)


def accumulate_densify_stats(dstate: DensifyState, sg: SetGrads):
    """Add this iteration's screen-space gradient norms for visible Gaussians."""
    dstate.screen_accum += sg.screen_norm
    dstate.center_accum += sg.centers
    dstate.count += sg.visible.astype(np.int64)


def _sample_in_3sigma(rng: np.random.Generator, n: int) -> np.ndarray:
    """Standard-normal 3-vectors rejection-sampled to lie within 3 sigma."""
    out = np.empty((n, 3))
    for i in range(n):
        z = rng.standard_normal(3)
        while np.linalg.norm(z) > 3.0:
            z = rng.standard_normal(3)
        out[i] = z
    return out


def densify(
    gs: GaussianSet,
    state: AdamState,
    dstate: DensifyState,
    grad_threshold: float,
    split_scale_threshold: float,
    rng: np.random.Generator,
    split_factor: float = 1.6,
):
    """Clone small / split large Gaussians whose mean accumulated screen
    gradient exceeds the threshold. Returns (n_cloned, n_split)."""
    n = len(gs)
    mean_grad = dstate.screen_accum / np.maximum(dstate.count, 1)
    hot = (mean_grad > grad_threshold) & (dstate.count > 0)
    scales = gs.scales
    max_scale = scales.max(axis=1)
    clone = hot & (max_scale < split_scale_threshold)
    split = hot & ~clone

    if not np.any(hot):
        dstate.reset(n)
        return 0, 0

    keep = ~split
    new_parts = {name: [getattr(gs, name)[keep]] for name in PARAM_NAMES}
    n_new_rows = 0

    if np.any(clone):
        idx = np.nonzero(clone)[0]
        # Offset copies a short step down the accumulated center gradient.
        d = dstate.center_accum[idx]
        norms = np.linalg.norm(d, axis=1, keepdims=True)
        step = 0.3 * scales[idx].mean(axis=1, keepdims=True)
        offset = np.where(norms > 1e-12, -step * d / np.maximum(norms, 1e-12), 0.0)
        for name in PARAM_NAMES:
            block = getattr(gs, name)[idx].copy()
            if name == "centers":
                block += offset
            new_parts[name].append(block)
        n_new_rows += len(idx)

    if np.any(split):
        idx = np.nonzero(split)[0]
        R = quats_to_rots(gs.quats[idx])
        for _ in range(2):
            z = _sample_in_3sigma(rng, len(idx))
            child_centers = gs.centers[idx] + np.einsum("mij,mj->mi", R, scales[idx] * z)
            for name in PARAM_NAMES:
                block = getattr(gs, name)[idx].copy()
                if name == "centers":
                    block = child_centers
                elif name == "log_scales":
                    block = block - np.log(split_factor)
                new_parts[name].append(block)
        n_new_rows += 2 * len(idx)

    for name in PARAM_NAMES:
        merged = np.concatenate(new_parts[name])
        setattr(gs, name, np.ascontiguousarray(merged))
        state.m[name] = np.concatenate([state.m[name][keep], np.zeros_like(merged[len(state.m[name][keep]):])])
        state.v[name] = np.concatenate([state.v[name][keep], np.zeros_like(merged[len(state.v[name][keep]):])])
    dstate.reset(len(gs))
    return int(np.count_nonzero(clone)), int(np.count_nonzero(split))


def prune(
    gs: GaussianSet,
    state: AdamState,
    dstate: DensifyState,
    min_opacity: float = 0.05,
    max_scale: float = 0.5,
):
    """Drop exceptionally transparent or large Gaussians; returns removal count."""
    keep = (gs.opacities >= min_opacity) & (gs.scales.max(axis=1) <= max_scale)
    removed = int(np.count_nonzero(~keep))
    if removed:
        for name in PARAM_NAMES:
            setattr(gs, name, np.ascontiguousarray(getattr(gs, name)[keep]))
            state.m[name] = state.m[name][keep]
            state.v[name] = state.v[name][keep]
        dstate.screen_accum = dstate.screen_accum[keep]
        dstate.center_accum = dstate.center_accum[keep]
        dstate.count = dstate.count[keep]
    return removed


@dataclass
class Schedule:
    bg_iters: int = 30000
    warmup_iters: int = 1000  # human iterations before guidance kicks in
    joint_iters: int = 10000  # human+background iterations with guidance
    freeze_iters: int = 1500  # human centers fixed, opacity clamped
    opacity_clamp: float = 0.9
    human_densify_iters: tuple = (2000, 2500, 3000)
    prune_interval: int = 500
    bg_densify_interval: int = 100
    bg_densify_until: int = None  # default: half the background phase

    def __post_init__(self):
        if self.bg_densify_until is None:
            self.bg_densify_until = self.bg_iters // 2

    @property
    def human_iters(self) -> int:
        return self.warmup_iters + self.joint_iters


@dataclass
class TrainConfig:
    schedule: Schedule = field(default_factory=Schedule)
    lrs: LearningRates = field(default_factory=LearningRates)
    weights: LossWeights = field(default_factory=LossWeights)
    sampler: VirtualCameraSampler = field(default_factory=VirtualCameraSampler)
    timesteps: TimestepSchedule = field(default_factory=TimestepSchedule)
    seed: int = 0
    densify_grad_threshold: float = 2e-4
    split_scale_fraction: float = 0.01  # of scene extent
    prune_min_opacity: float = 0.05
    prune_max_scale_human: float = 0.5
    prune_max_scale_bg_fraction: float = 0.1
    fill_color: tuple = (0.0, 0.0, 0.0)
    random_grey_fill: bool = False  # random grey fill for human-only renders
    bg_sphere: tuple = None  # (center xyz, radius) when the background is sphere-mode
    perceptual_plugin: object = None  # optional (render, target) -> (value, grad)
    checkpoint_every: int = 0
    log_every: int = 1


def _recon_grad(render, target, mask, weights: LossWeights, perceptual=None):
    """Weighted reconstruction loss on one frame; returns (parts, image gradient)."""
    mse_v, g = mse_loss(render.color, target, mask)
    g_img = weights.rgb * g
    if mask is not None:
        ssim_v, sg = ssim_loss(render.color * mask[:, :, None], target * mask[:, :, None])
        sg = sg * mask[:, :, None]
    else:
        ssim_v, sg = ssim_loss(render.color, target)
    g_img += weights.ssim * sg
    parts = {"mse": mse_v, "ssim": ssim_v}
    if perceptual is not None:
        pv, pg = perceptual(render.color, target)
        parts["perceptual"] = pv
        g_img += weights.perceptual * pg
    return parts, g_img


class MetricsLog:
    """Line-oriented JSON records, optionally mirrored to a file."""

    def __init__(self, path=None):
        self.records = []
        self._fh = open(path, "w") if path else None

    def write(self, rec: dict):
        self.records.append(rec)
        if self._fh:
            self._fh.write(json.dumps(rec) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


def train(
    scene: Scene,
    frames,
    cameras,
    config: TrainConfig,
    provider=None,
    masks=None,
    log_path=None,
    checkpoint_dir=None,
):
    """Fit the scene to the observed frames; returns (scene, metric records).

    `frames` are float images in [0, 1]; `masks` (optional) mark supervised
    pixels. A null guidance provider degrades to reconstruction-only training
    while consuming the same random draws, so trajectories stay comparable.
    """
    if len(frames) < 1:
        raise InvalidParameterError("training needs at least one frame")
    if len(frames) != len(cameras):
        raise InvalidParameterError("frame and camera counts differ")
    rng = np.random.default_rng(config.seed)
    sched = config.schedule
    w = config.weights
    log = MetricsLog(log_path)
    extent = scene_extent(scene)
    split_thresh = config.split_scale_fraction * extent
    bg_max_scale = config.prune_max_scale_bg_fraction * extent

    bg = scene.background
    bg_adam = AdamState(bg)
    bg_dstate = DensifyState(len(bg))
    human_adam = {j: AdamState(h.canonical) for j, h in scene.active_humans()}
    human_dstate = {j: DensifyState(len(h.canonical)) for j, h in scene.active_humans()}

    global_iter = 0

    def checkpoint(tag):
        if checkpoint_dir is None:
            return
        from .sceneio import save_checkpoint

        save_checkpoint(scene, f"{checkpoint_dir}/{tag}.swc")

    def fail(msg):
        checkpoint("diagnostic_abort")
        log.close()
        raise SplatworldError(msg)

    # ---- Phase 1: background pre-optimization --------------------------------
    for it in range(sched.bg_iters if len(bg) else 0):
        t = int(rng.integers(len(frames)))
        mask = masks[t] if masks is not None else None
        out = render_batch3d(
            bg.centers, bg.covariances(), bg.colors, bg.opacities, cameras[t], config.fill_color, save_ctx=True
        )
        parts, g_img = _recon_grad(out, frames[t], mask, w, config.perceptual_plugin)
        sg = render_backward_3d(out, g_img)
        reg_v = 0.0
        if config.bg_sphere is not None:
            center, radius = config.bg_sphere
            reg_v, reg_g = background_sphere_reg(bg.centers, center, radius)
            sg.centers += w.bg_reg * reg_g
        if not np.isfinite(parts["mse"]):
            fail(f"non-finite loss in background phase at iteration {it}")

        accumulate_densify_stats(bg_dstate, sg)
        adam_step(bg_adam, bg, param_grads_from(bg, sg), config.lrs, config.lrs.center_at(it, sched.bg_iters))

        events = []
        if it < sched.bg_densify_until and it > 0 and it % sched.bg_densify_interval == 0:
            nc, ns = densify(bg, bg_adam, bg_dstate, config.densify_grad_threshold, split_thresh, rng)
            if nc or ns:
                events.append(f"densify:background:+{nc + ns}")
        if it > 0 and it % sched.prune_interval == 0:
            nr = prune(bg, bg_adam, bg_dstate, config.prune_min_opacity, bg_max_scale)
            events.append(f"prune:background:-{nr}")

        if it % config.log_every == 0 or events:
            log.write(
                {
                    "iter": global_iter,
                    "phase": "background",
                    "phase_iter": it,
                    "frame": t,
                    "loss_mse": parts["mse"],
                    "loss_ssim": parts["ssim"],
                    "loss_bg_reg": reg_v,
                    "counts": {"background": len(bg)},
                    "events": events,
                }
            )
        if config.checkpoint_every and it and it % config.checkpoint_every == 0:
            checkpoint(f"background_{it:06d}")
        global_iter += 1

    # ---- Phases 2+3: human warmup, then joint optimization with guidance -----
    active = scene.active_humans()
    for hit in range(sched.human_iters if active else 0):
        guidance_on = hit >= sched.warmup_iters
        gd_iter = hit - sched.warmup_iters
        frozen = hit < sched.freeze_iters
        t = int(rng.integers(len(frames)))
        mask = masks[t] if masks is not None else None
        tau_max = timestep_bounds(max(gd_iter, 0), config.timesteps)[1]
        lam_recon = recon_weight_schedule(hit, tau_max, guidance_start=sched.warmup_iters)
        fill = config.fill_color
        if config.random_grey_fill:
            grey = float(rng.uniform())
            fill = (grey, grey, grey)

        out = compose_and_render(scene, t, cameras[t], config.fill_color, save_ctx=True)
        parts, g_img = _recon_grad(out, frames[t], mask, w, config.perceptual_plugin)
        per_set = scene_render_backward(out, lam_recon * g_img)

        hard_total = 0.0
        zero_img = np.zeros_like(out.color)
        for j, h in active:
            hout = render_human(scene, j, cameras[t], t=t, background_color=fill, save_ctx=True)
            hv, hg = hard_surface_loss(hout.alpha)
            hard_total += hv
            hgrads = scene_render_backward(hout, zero_img, w.hard_factor * lam_recon * hg)
            per_set[("human", j)].add(hgrads[("human", j)])

        guid_diag = 0.0
        for j, h in active:
            grads, info = apply_guidance(
                scene, j, provider, config.sampler, config.timesteps, rng,
                max(gd_iter, 0), weight=w.guidance, fill_color=fill,
                text_token=f"<person-{j}>",
            ) if guidance_on else (None, {})
            if grads is not None:
                per_set[("human", j)].add(grads)
                guid_diag += info.get("diagnostic", 0.0)

        reg_v = 0.0
        if guidance_on and config.bg_sphere is not None:
            center, radius = config.bg_sphere
            reg_v, reg_g = background_sphere_reg(bg.centers, center, radius)
            per_set[("background", None)].centers += w.bg_reg * reg_g

        if not (np.isfinite(parts["mse"]) and np.isfinite(hard_total)):
            fail(f"non-finite loss in human phase at iteration {hit}")

        for j, h in active:
            sg = per_set[("human", j)]
            accumulate_densify_stats(human_dstate[j], sg)
            adam_step(
                human_adam[j],
                h.canonical,
                param_grads_from(h.canonical, sg),
                config.lrs,
                config.lrs.center_at(hit, sched.human_iters),
                freeze_centers=frozen,
                opacity_clamp=sched.opacity_clamp if frozen else None,
            )
        if guidance_on and len(bg):
            sg = per_set[("background", None)]
            accumulate_densify_stats(bg_dstate, sg)
            adam_step(
                bg_adam, bg, param_grads_from(bg, sg), config.lrs,
                config.lrs.center_at(sched.bg_iters + hit, sched.bg_iters + sched.human_iters),
            )

        events = []
        if hit in sched.human_densify_iters:
            for j, h in active:
                nc, ns = densify(
                    h.canonical, human_adam[j], human_dstate[j],
                    config.densify_grad_threshold, split_thresh, rng,
                )
                events.append(f"densify:human_{j}:+{nc + ns}")
        if hit > 0 and hit % sched.prune_interval == 0:
            for j, h in active:
                nr = prune(
                    h.canonical, human_adam[j], human_dstate[j],
                    config.prune_min_opacity, config.prune_max_scale_human,
                )
                events.append(f"prune:human_{j}:-{nr}")

        if hit % config.log_every == 0 or events:
            counts = {"background": len(bg)}
            counts.update({f"human_{j}": len(h.canonical) for j, h in active})
            log.write(
                {
                    "iter": global_iter,
                    "phase": "human",
                    "phase_iter": hit,
                    "frame": t,
                    "loss_mse": parts["mse"],
                    "loss_ssim": parts["ssim"],
                    "loss_hard": hard_total,
                    "loss_guidance": guid_diag,
                    "loss_bg_reg": reg_v,
                    "lambda_recon": lam_recon,
                    "tau_max": tau_max if guidance_on else None,
                    "guidance_active": guidance_on,
                    "center_frozen": frozen,
                    "opacity_clamped": frozen,
                    "counts": counts,
                    "events": events,
                }
            )
        if config.checkpoint_every and hit and hit % config.checkpoint_every == 0:
            checkpoint(f"human_{hit:06d}")
        global_iter += 1

    log.close()
    return scene, log.records
