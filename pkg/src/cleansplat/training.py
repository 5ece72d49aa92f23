"""End-to-end optimization loop, schedules, and evaluation protocols.

One optimization step samples a view (seeded shuffle per epoch), renders
the decomposed scene, backpropagates the total loss through the
compositing identity into both rasterizer passes, and applies Adam
updates to the static set, the sampled view's transient set, and any
appearance parameters.  Density control runs on a global cadence for the
static set and on per-view visit counts for the transient sets; opacity
resets touch the static set only.  Runs are deterministic for a fixed
(dataset, config, seed) triple.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .appearance import AppearanceModel, BackgroundModel
from .cameras import Camera
from .checkpoint import CheckpointData, save_checkpoint
from .compositing import (
    SceneModel,
    composite_backward,
    init_distractors,
    render_decomposed,
    render_static_only,
    static_layer_backward,
)
from .config import TrainConfig
from .data import Dataset, psnr, quantize
from .density import AdcEvent, AdcThresholds, DensifyStats, adc_step, reset_opacity
from .errors import DataError, NumericError, UsageError
from .gaussians import GaussianSet, inverse_sigmoid
from .losses import LossWeights, dssim_loss, l1_loss, ssim, total_loss
from .optim import AdamState, adam_step, exponential_lr
from .rasterizer import render_backward
from .sh import SH_C0

METRIC_COLUMNS = ("step", "view", "l1", "dssim", "alpha_reg", "bg_reg", "total",
                  "num_static", "num_distractors_view")


def downscale_image(image: np.ndarray, factor: int) -> np.ndarray:
    """Area-average downscale by an integer factor (odd edges cropped)."""
    if factor == 1:
        return image
    h = (image.shape[0] // factor) * factor
    w = (image.shape[1] // factor) * factor
    img = image[:h, :w]
    if img.ndim == 2:
        return img.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
    return img.reshape(h // factor, factor, w // factor, factor, -1).mean(axis=(1, 3))


def nearest_neighbor_log_scales(points: np.ndarray) -> np.ndarray:
    """Isotropic log-scales from the mean squared 3-NN distance."""
    n = len(points)
    if n >= 4:
        tree = cKDTree(points)
        dists, _ = tree.query(points, k=4)
        mean_sq = np.maximum(np.mean(dists[:, 1:] ** 2, axis=1), 1e-14)
        return np.repeat(0.5 * np.log(mean_sq)[:, None], 3, axis=1)
    return np.full((n, 3), np.log(0.1))


def init_static_set(dataset: Dataset, config: TrainConfig, rng) -> GaussianSet:
    """Seed the shared static set from sparse points (or randomly in the box)."""
    if dataset.init_points is not None and len(dataset.init_points):
        points = np.asarray(dataset.init_points, dtype=np.float64)
        colors = dataset.init_colors
        if colors is None:
            colors = rng.uniform(0.0, 1.0, size=(len(points), 3))
    else:
        lo, hi = dataset.bbox
        points = rng.uniform(lo, hi, size=(config.static_init_count, 3))
        colors = rng.uniform(0.0, 1.0, size=(len(points), 3))

    n = len(points)
    k = (config.sh_degree + 1) ** 2
    sh = np.zeros((n, k, 3))
    sh[:, 0, :] = (np.asarray(colors, dtype=np.float64) - 0.5) / SH_C0
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return GaussianSet(
        means=points,
        log_scales=nearest_neighbor_log_scales(points),
        quats=quats,
        opacity_logits=np.full(n, inverse_sigmoid(0.1)),
        colors=sh,
    )


def _loss_weights(config: TrainConfig, background_active: bool) -> LossWeights:
    return LossWeights(
        lambda_ssim=config.lambda_ssim,
        lambda_static_alpha=config.lambda_static_alpha,
        lambda_distractor_alpha=config.lambda_distractor_alpha,
        lambda_background=config.lambda_background if background_active else 0.0,
        t_eps=config.t_eps,
        mask_cut=config.mask_cut,
    )


def _static_lrs(config: TrainConfig, step: int, extent: float, sh_shape) -> dict:
    color_lr = np.full((1,) + sh_shape[1:], config.lr_sh_rest)
    color_lr[:, 0, :] = config.lr_sh_dc
    return {
        "means": exponential_lr(step, config.lr_means, config.lr_means_final,
                                config.iterations) * extent,
        "log_scales": config.lr_scales,
        "quats": config.lr_quats,
        "opacity_logits": config.lr_opacities,
        "colors": color_lr,
    }


def _distractor_lrs(config: TrainConfig, step: int, extent: float) -> dict:
    return {
        "means": exponential_lr(step, config.lr_means, config.lr_means_final,
                                config.iterations) * extent,
        "log_scales": config.lr_distractor_scales,
        "quats": config.lr_distractor_quats,
        "opacity_logits": config.lr_opacities,
        "colors": config.lr_distractor_rgb,
    }


def _appearance_lrs(config: TrainConfig, app: AppearanceModel) -> dict:
    lrs = {"image_embeds": config.lr_image_embed, "gauss_embeds": config.lr_gauss_embed}
    for key in app.mlp.params():
        lrs[f"mlp.{key}"] = config.lr_appearance_mlp
    return lrs


def _background_lrs(config: TrainConfig, bg: BackgroundModel, step: int) -> dict:
    lrs = {}
    pairs = {
        "enc": (config.lr_bg_encoder, config.lr_bg_encoder_final),
        "dc": (config.lr_bg_dc, config.lr_bg_dc_final),
        "rest": (config.lr_bg_rest, config.lr_bg_rest_final),
    }
    for key in bg.params():
        prefix = key.split(".", 1)[0]
        init, final = pairs[prefix]
        lrs[key] = exponential_lr(step, init, final, config.iterations)
    return lrs


@dataclass
class TrainResult:
    model: SceneModel
    metrics: list
    checkpoint: CheckpointData


def _notify(observer, method, *args):
    if observer is not None:
        fn = getattr(observer, method, None)
        if fn is not None:
            fn(*args)


def train(dataset: Dataset, config: TrainConfig, out_dir=None, observer=None) -> TrainResult:
    """Optimize a scene model on a dataset; optionally write artifacts.

    With ``out_dir`` set, the final checkpoint (``checkpoint.ckpt``), the
    metrics log (``metrics.csv``), and the effective config
    (``config.txt``) are written there; ``checkpoint_interval`` adds
    periodic ``checkpoint_<step>.ckpt`` snapshots.
    """
    config.validate()
    dataset.validate()
    rng = np.random.default_rng(config.seed)
    n_views = len(dataset)
    extent = dataset.scene_extent()
    bbox = np.asarray(dataset.bbox, dtype=np.float64)

    static = init_static_set(dataset, config, rng)
    model = SceneModel(static_set=static)
    if config.distractors_enabled:
        for view, frame in enumerate(dataset.frames):
            model.distractor_sets[view] = init_distractors(
                frame.camera, config.k_distractors, config.distractor_depth, rng,
                opacity=config.distractor_opacity,
            )
    if config.appearance_enabled:
        model.appearance = AppearanceModel(
            n_views, static.means, bbox, rng,
            embed_dim=config.embed_dim, gauss_embed_dim=config.gauss_embed_dim,
        )
    if config.background_enabled:
        if not config.appearance_enabled:
            raise UsageError("background model requires appearance embeddings")
        model.background = BackgroundModel(rng, embed_dim=config.embed_dim)

    adam_static = AdamState()
    adam_distractors = {view: AdamState() for view in model.distractor_sets}
    adam_appearance = AdamState()
    adam_background = AdamState()
    stats_static = DensifyStats.zeros(len(static))
    stats_distractors = {v: DensifyStats.zeros(len(s))
                         for v, s in model.distractor_sets.items()}
    view_counts = np.zeros(n_views, dtype=np.int64)
    weights = _loss_weights(config, config.background_enabled)

    def checkpoint_data(step):
        return CheckpointData(
            model=model, config=config, scene_extent=extent, bbox=bbox,
            global_step=step, view_counts=view_counts.copy(),
            cameras=[f.camera for f in dataset.frames],
            adam_static=adam_static, adam_distractors=adam_distractors,
            adam_appearance=adam_appearance, adam_background=adam_background,
            stats_static=stats_static, stats_distractors=stats_distractors,
        )

    metrics = []
    queue = []
    for step in range(1, config.iterations + 1):
        if not queue:
            queue = list(rng.permutation(n_views))
        view = int(queue.pop(0))
        frame = dataset.frames[view]
        if step <= config.warmup_steps and config.warmup_downscale > 1:
            cam = frame.camera.downscale(config.warmup_downscale)
            gt = downscale_image(frame.image, config.warmup_downscale)
        else:
            cam = frame.camera
            gt = frame.image
        view_counts[view] += 1

        comp = render_decomposed(model, view, cam, training=True)
        tl = total_loss(comp, gt, weights)
        if not np.isfinite(tl.value):
            raise NumericError(
                f"non-finite loss at step {step} (view {view}): "
                f"l1={tl.l1} dssim={tl.dssim} alpha={tl.alpha_reg} bg={tl.bg_reg}"
            )

        layer = composite_backward(comp, tl.d_composite, tl.d_alpha_s, tl.d_alpha_d)
        static_grads, app_grads, d_embed = static_layer_backward(
            model, comp.static_cache, layer.d_static_color, layer.d_static_alpha
        )
        stats_static.add(static_grads["screen_grad"], comp.static_out.radii,
                         comp.static_out.visible, cam.width, cam.height)

        dset = model.distractor_sets.get(view)
        dist_grads = None
        if comp.distractor_cache is not None:
            dist_grads = render_backward(
                comp.distractor_cache, layer.d_distractor_color, layer.d_distractor_alpha
            )
            stats_distractors[view].add(
                dist_grads["screen_grad"], comp.distractor_out.radii,
                comp.distractor_out.visible, cam.width, cam.height,
            )

        bg_grads = d_embed_bg = None
        if comp.background_cache is not None:
            bg_grads, d_embed_bg = model.background.backward(
                comp.background_cache, layer.d_background
            )

        # Parameter updates.
        adam_step(model.static_set.params(), static_grads, adam_static,
                  _static_lrs(config, step, extent, model.static_set.colors.shape),
                  group="static.")
        if dset is not None and dist_grads is not None and step > config.distractor_delay:
            adam_step(dset.params(), dist_grads, adam_distractors[view],
                      _distractor_lrs(config, step, extent), group=f"distractor{view}.")
            np.clip(dset.colors, 0.0, 1.0, out=dset.colors)
        if model.appearance is not None and app_grads is not None:
            e_grad = np.zeros_like(model.appearance.image_embeds)
            e_grad[view] = d_embed
            if d_embed_bg is not None:
                e_grad[view] += d_embed_bg
            app_grads["image_embeds"] = e_grad
            adam_step(model.appearance.params(), app_grads, adam_appearance,
                      _appearance_lrs(config, model.appearance), group="appearance.")
        if model.background is not None and bg_grads is not None:
            adam_step(model.background.params(), bg_grads, adam_background,
                      _background_lrs(config, model.background, step), group="background.")

        # Density control and opacity reset.
        radius_cap = config.adc_radius_cap if step > config.opacity_reset_period else None
        thresholds = AdcThresholds(
            grad_threshold=config.adc_grad_threshold,
            size_frac=config.adc_size_frac,
            cull_opacity=config.adc_cull_opacity,
            radius_cap=radius_cap,
            split_factor=config.adc_split_factor,
        )
        if (config.densify_start < step <= config.densify_until
                and step % config.static_adc_period == 0):
            def app_hook(keep, new_positions):
                if model.appearance is not None:
                    model.appearance.resize_gaussians(keep, new_positions)
                    if "gauss_embeds" in adam_appearance.slots:
                        adam_appearance.resize_rows("gauss_embeds", keep, len(new_positions))
            report = adc_step(model.static_set, stats_static, adam_static, thresholds,
                              extent, rng, densify=True, appearance_hook=app_hook)
            _notify(observer, "on_adc", AdcEvent(step, "static", -1, True, report))
        if dset is not None and view_counts[view] % config.adc_view_period == 0:
            densify = step <= config.densify_until
            report = adc_step(dset, stats_distractors[view], adam_distractors[view],
                              thresholds, extent, rng, densify=densify)
            _notify(observer, "on_adc", AdcEvent(step, "distractor", view, densify, report))
        if step % config.opacity_reset_period == 0 and step <= config.densify_until:
            reset_opacity(model.static_set, adam_static, config.opacity_reset_value)
            _notify(observer, "on_opacity_reset", step)

        metrics.append({
            "step": step,
            "view": view,
            "l1": tl.l1,
            "dssim": tl.dssim,
            "alpha_reg": tl.alpha_reg,
            "bg_reg": tl.bg_reg,
            "total": tl.value,
            "num_static": len(model.static_set),
            "num_distractors_view": len(dset) if dset is not None else 0,
        })
        _notify(observer, "on_step", metrics[-1])

        if (out_dir is not None and config.checkpoint_interval > 0
                and step % config.checkpoint_interval == 0 and step < config.iterations):
            save_checkpoint(Path(out_dir) / f"checkpoint_{step:06d}.ckpt",
                            checkpoint_data(step))

    data = checkpoint_data(config.iterations)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "checkpoint.ckpt", data)
        write_metrics_csv(out / "metrics.csv", metrics)
        (out / "config.txt").write_text(config.to_text())
    return TrainResult(model=model, metrics=metrics, checkpoint=data)


def write_metrics_csv(path, metrics):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for row in metrics:
            writer.writerow([
                row["step"], row["view"],
                f"{row['l1']:.10e}", f"{row['dssim']:.10e}",
                f"{row['alpha_reg']:.10e}", f"{row['bg_reg']:.10e}",
                f"{row['total']:.10e}",
                row["num_static"], row["num_distractors_view"],
            ])


def test_time_optimize(model: SceneModel, cam: Camera, image: np.ndarray,
                       iters: int = 128, lr: float = 0.01,
                       lambda_ssim: float = 0.2):
    """Fit a held-out image's appearance embedding on its left half.

    All model parameters stay frozen; only the fresh embedding moves.
    Returns (embedding, per-iteration losses).  Downstream evaluation is
    expected to use the right half only.
    """
    if model.appearance is None:
        raise UsageError("appearance model is disabled")
    half = cam.width // 2
    gt_left = np.asarray(image, dtype=np.float64)[:, :half]
    embedding = np.zeros(model.appearance.embed_dim)
    adam = AdamState()
    losses = []
    for _ in range(iters):
        render = render_static_only(model, cam, embedding=embedding)
        pred_left = render.color[:, :half]
        l1_val, l1_grad = l1_loss(pred_left, gt_left)
        ds_val, ds_grad = dssim_loss(np.clip(pred_left, 0.0, 1.0), gt_left)
        losses.append((1.0 - lambda_ssim) * l1_val + lambda_ssim * ds_val)
        d_left = (1.0 - lambda_ssim) * l1_grad + lambda_ssim * ds_grad

        d_color = np.zeros((cam.height, cam.width, 3))
        d_color[:, :half] = d_left
        d_embed = np.zeros_like(embedding)
        d_alpha = np.zeros((cam.height, cam.width))
        if render.background is not None:
            d_bg = (1.0 - render.alpha[:, :, None]) * d_color
            d_alpha = -np.sum(d_color * render.background, axis=2)
            _, d_e_bg = model.background.backward(render.background_cache, d_bg)
            d_embed += d_e_bg
        _, _, d_e = static_layer_backward(model, render.static_cache, d_color, d_alpha)
        if d_e is not None:
            d_embed += d_e
        adam_step({"e": embedding}, {"e": d_embed}, adam, {"e": lr}, group="test_embed.")
    return embedding, losses


def evaluate(model: SceneModel, dataset: Dataset, protocol: str = "static",
             psnr_cap: float = 99.0, tto_iters: int = 128) -> list:
    """Per-image metrics plus a final ``mean`` row.

    ``static``: render the static scene and compare against the clean
    reference images.  ``left-right``: fit each image's embedding on its
    left half, then score the right half.  Predictions are quantized to
    the 8-bit grid when the dataset was loaded from 8-bit files.
    """
    rows = []
    if protocol == "static":
        for frame in dataset.frames:
            if frame.clean is None:
                raise DataError(f"frame {frame.name} has no clean reference image")
            render = render_static_only(model, frame.camera)
            pred = np.clip(render.color, 0.0, 1.0)
            if dataset.quantized:
                pred = quantize(pred)
            rows.append({
                "name": frame.name,
                "psnr": psnr(pred, frame.clean, cap=psnr_cap),
                "ssim": ssim(pred, frame.clean),
            })
    elif protocol == "left-right":
        if model.appearance is None:
            raise UsageError("left-right protocol requires the appearance model")
        for frame in dataset.frames:
            cam = frame.camera
            embedding, _ = test_time_optimize(model, cam, frame.image, iters=tto_iters)
            render = render_static_only(model, cam, embedding=embedding)
            half = cam.width // 2
            pred = np.clip(render.color[:, half:], 0.0, 1.0)
            if dataset.quantized:
                pred = quantize(pred)
            gt = frame.image[:, half:]
            rows.append({
                "name": frame.name,
                "psnr": psnr(pred, gt, cap=psnr_cap),
                "ssim": ssim(pred, gt),
            })
    else:
        raise UsageError(f"unknown evaluation protocol '{protocol}'")

    rows.append({
        "name": "mean",
        "psnr": float(np.mean([r["psnr"] for r in rows])),
        "ssim": float(np.mean([r["ssim"] for r in rows])),
    })
    return rows
