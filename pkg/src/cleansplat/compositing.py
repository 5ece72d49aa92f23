"""Scene decomposition: one shared static set layered under per-view transients.

Each training view owns a private set of "distractor" Gaussians seeded on
a plane just in front of its camera.  Rendering a view rasterizes the
static and distractor sets independently and alpha-composites the
distractor layer over the static one (and optionally over a learned
environment background):

    c_comp = c_d + (1 - a_d) * c_s [+ (1 - a_d) * (1 - a_s) * c_bg]

The identity is computed literally so the decomposition can be inspected,
exported, and differentiated layer by layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .cameras import Camera
from .errors import UsageError
from .gaussians import COLOR_RGB, GaussianSet, inverse_sigmoid
from .projection import view_directions, view_directions_backward
from .rasterizer import RenderCache, RenderOutput, render_backward, render_forward
from .sh import eval_sh_colors, eval_sh_colors_backward


@dataclass
class SceneModel:
    """Static set plus an indexed family of per-view distractor sets.

    Distractor sets are disjoint parameter stores: optimizing view ``n``
    touches only the static set and ``distractor_sets[n]``.
    """

    static_set: GaussianSet
    distractor_sets: dict = field(default_factory=dict)
    appearance: object = None   # AppearanceModel | None
    background: object = None   # BackgroundModel | None


def init_distractors(cam: Camera, count: int, depth: float, rng,
                     opacity: float = 0.1) -> GaussianSet:
    """Seed a per-view distractor set on a plane in front of the camera.

    Points are drawn uniformly over the image plane (the unit square is
    mapped through the inverse intrinsics) and pushed to camera-space
    depth ``depth``, so every point projects inside its own frame.  The
    remaining parameters follow the usual point-cloud initialization:
    isotropic scale from the nearest-neighbor spacing on the plane, a
    low starting opacity, and random RGB colors.
    """
    if count < 1:
        raise UsageError("distractor count must be >= 1")
    if depth <= 0:
        raise UsageError("distractor plane depth must be positive")
    u = rng.uniform(0.0, 1.0, size=count)
    v = rng.uniform(0.0, 1.0, size=count)
    x_cam = (u * cam.width - cam.cx) * depth / cam.fx
    y_cam = (v * cam.height - cam.cy) * depth / cam.fy
    p_cam = np.stack([x_cam, y_cam, np.full(count, depth)], axis=1)
    means = cam.cam_to_world(p_cam)

    if count >= 4:
        tree = cKDTree(means)
        dists, _ = tree.query(means, k=4)
        mean_sq = np.maximum(np.mean(dists[:, 1:] ** 2, axis=1), 1e-14)
        log_scales = np.repeat(0.5 * np.log(mean_sq)[:, None], 3, axis=1)
    else:
        extent = depth * max(cam.width / cam.fx, cam.height / cam.fy)
        log_scales = np.full((count, 3), np.log(max(extent, 1e-6) / np.sqrt(count) / 3.0))

    quats = np.zeros((count, 4))
    quats[:, 0] = 1.0
    return GaussianSet(
        means=means,
        log_scales=log_scales,
        quats=quats,
        opacity_logits=np.full(count, inverse_sigmoid(opacity)),
        colors=rng.uniform(0.0, 1.0, size=(count, 3)),
        color_mode=COLOR_RGB,
    )


@dataclass
class StaticLayerCache:
    render: RenderCache
    view_dirs: np.ndarray | None = None
    view_norms: np.ndarray | None = None
    sh_pre_clamp: np.ndarray | None = None
    tone: object = None
    embedding: np.ndarray | None = None
    view_index: int = -1


@dataclass
class CompositeOutput:
    """All layers of one decomposed render, plus caches for the backward pass."""

    color: np.ndarray              # composite (H, W, 3)
    static_color: np.ndarray       # premultiplied static layer
    static_alpha: np.ndarray
    distractor_color: np.ndarray
    distractor_alpha: np.ndarray
    background: np.ndarray | None
    static_cache: StaticLayerCache | None = None
    distractor_cache: RenderCache | None = None
    background_cache: object = None
    static_out: RenderOutput | None = None
    distractor_out: RenderOutput | None = None


def distractor_mask(composite: CompositeOutput, threshold: float = 0.5) -> np.ndarray:
    """Boolean transient-region mask: distractor accumulation above threshold."""
    return composite.distractor_alpha > threshold


def _render_static_layer(model: SceneModel, cam: Camera, embedding, view_index=-1):
    """Static layer with optional appearance toning; returns output + cache."""
    gset = model.static_set
    if model.appearance is None or embedding is None:
        out, rcache = render_forward(gset, cam)
        return out, StaticLayerCache(render=rcache, view_index=view_index)

    dirs, norms = view_directions(gset.means, cam)
    base, pre = eval_sh_colors(gset.colors, dirs)
    toned, tone_cache = model.appearance.tone(
        base, gset.colors[:, 0, :], embedding, view_index=view_index
    )
    out, rcache = render_forward(gset, cam, colors=toned)
    return out, StaticLayerCache(
        render=rcache,
        view_dirs=dirs,
        view_norms=norms,
        sh_pre_clamp=pre,
        tone=tone_cache,
        embedding=np.asarray(embedding, dtype=np.float64),
        view_index=view_index,
    )


def static_layer_backward(model: SceneModel, cache: StaticLayerCache,
                          d_color, d_alpha):
    """Backward through the static layer including the appearance chain.

    Returns (set_grads, appearance_grads_or_None, d_embedding_or_None).
    """
    grads = render_backward(cache.render, d_color, d_alpha)
    if cache.tone is None:
        return grads, None, None

    app_grads, d_base, d_dc, d_e = model.appearance.tone_backward(
        cache.tone, grads["colors_rgb"]
    )
    gset = model.static_set
    d_sh, d_dirs = eval_sh_colors_backward(
        gset.colors, cache.view_dirs, cache.sh_pre_clamp, d_base
    )
    d_sh[:, 0, :] += d_dc
    grads["colors"] = d_sh
    grads["means"] = grads["means"] + view_directions_backward(
        cache.view_dirs, cache.view_norms, d_dirs
    )
    return grads, app_grads, d_e


def render_decomposed(model: SceneModel, view_index: int, cam: Camera,
                      training: bool = True) -> CompositeOutput:
    """Render the static and distractor layers for one view and composite.

    During training an unknown view index is an error; for held-out views
    (``training=False``) the distractor layer is identically empty.
    """
    embedding = None
    if model.appearance is not None:
        if training:
            embedding = model.appearance.image_embeds[view_index]
        else:
            embedding = np.zeros(model.appearance.embed_dim)

    static_out, static_cache = _render_static_layer(model, cam, embedding, view_index)

    if training and view_index not in model.distractor_sets and model.distractor_sets:
        raise UsageError(f"view {view_index} has no distractor set")
    dset = model.distractor_sets.get(view_index) if training else None
    if dset is not None:
        dist_out, dist_cache = render_forward(dset, cam)
    else:
        dist_out = RenderOutput(
            color=np.zeros((cam.height, cam.width, 3)),
            alpha=np.zeros((cam.height, cam.width)),
            radii=np.zeros(0),
            visible=np.zeros(0, dtype=bool),
        )
        dist_cache = None

    bg_img = None
    bg_cache = None
    if model.background is not None and embedding is not None:
        bg_img, bg_cache = model.background.color(cam, embedding)

    one_minus_ad = 1.0 - dist_out.alpha[:, :, None]
    color = dist_out.color + one_minus_ad * static_out.color
    if bg_img is not None:
        color = color + one_minus_ad * (1.0 - static_out.alpha[:, :, None]) * bg_img

    return CompositeOutput(
        color=color,
        static_color=static_out.color,
        static_alpha=static_out.alpha,
        distractor_color=dist_out.color,
        distractor_alpha=dist_out.alpha,
        background=bg_img,
        static_cache=static_cache,
        distractor_cache=dist_cache,
        background_cache=bg_cache,
        static_out=static_out,
        distractor_out=dist_out,
    )


@dataclass
class StaticRender:
    """Evaluation-time render of the static scene (no transient layer)."""

    color: np.ndarray
    alpha: np.ndarray
    background: np.ndarray | None
    static_cache: StaticLayerCache
    background_cache: object


def render_static_only(model: SceneModel, cam: Camera, embedding=None) -> StaticRender:
    """Render the static set alone, over the background when enabled."""
    if model.appearance is not None and embedding is None:
        embedding = np.zeros(model.appearance.embed_dim)
    static_out, static_cache = _render_static_layer(model, cam, embedding)
    color = static_out.color
    bg_img = None
    bg_cache = None
    if model.background is not None and embedding is not None:
        bg_img, bg_cache = model.background.color(cam, embedding)
        color = color + (1.0 - static_out.alpha[:, :, None]) * bg_img
    return StaticRender(color=color, alpha=static_out.alpha, background=bg_img,
                        static_cache=static_cache, background_cache=bg_cache)


@dataclass
class LayerGrads:
    d_static_color: np.ndarray
    d_static_alpha: np.ndarray
    d_distractor_color: np.ndarray
    d_distractor_alpha: np.ndarray
    d_background: np.ndarray | None


def composite_backward(comp: CompositeOutput, d_comp, d_alpha_s, d_alpha_d) -> LayerGrads:
    """Distribute composite-level gradients onto the individual layers.

    ``d_comp`` is dL/d(composite color); ``d_alpha_s``/``d_alpha_d`` are
    the *direct* gradients on the accumulation maps (regularizers), to
    which the compositing chain terms are added here.
    """
    d_comp = np.asarray(d_comp, dtype=np.float64)
    one_minus_ad = 1.0 - comp.distractor_alpha[:, :, None]
    d_cs = one_minus_ad * d_comp
    d_cd = d_comp.copy()

    d_ad = np.asarray(d_alpha_d, dtype=np.float64) - np.sum(d_comp * comp.static_color, axis=2)
    d_as = np.asarray(d_alpha_s, dtype=np.float64).copy()
    d_bg = None
    if comp.background is not None:
        one_minus_as = 1.0 - comp.static_alpha[:, :, None]
        d_bg = one_minus_ad * one_minus_as * d_comp
        d_ad = d_ad - np.sum(d_comp * one_minus_as * comp.background, axis=2)
        d_as = d_as - np.sum(d_comp * one_minus_ad * comp.background, axis=2)
    return LayerGrads(
        d_static_color=d_cs,
        d_static_alpha=d_as,
        d_distractor_color=d_cd,
        d_distractor_alpha=d_ad,
        d_background=d_bg,
    )
