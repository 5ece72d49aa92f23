"""Tile-based forward rendering and its exact analytic backward pass.

Splats are depth-sorted globally (stable, index tiebreak), binned into
16x16 pixel tiles by their 3-sigma bounding boxes, and blended front to
back per pixel.  A splat contributes while the running transmittance
stays at or above ``T_EPS``; blending stops at the first splat that
would drop below it.  The influence cutoff at 3 sigma zeroes a splat's
alpha outside its binned tiles, which makes the tiled result identical
to an untiled per-pixel blend.

The inner loops are compiled per tile (sequential per-pixel walks, plain
IEEE double arithmetic, fixed iteration order), so renders and gradients
are reproducible bit for bit.  Gradients flow through both the color and
the alpha map, since the training objective regularizes per-layer
accumulations directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .cameras import Camera
from .gaussians import COLOR_SH, GaussianSet, sigmoid
from .projection import (
    ProjectedSplats,
    project_backward,
    project_set,
    view_directions,
    view_directions_backward,
)
from .sh import eval_sh_colors, eval_sh_colors_backward

TILE_SIZE = 16
T_EPS = 1e-4          # stop blending before transmittance drops below this
ALPHA_CLAMP = 0.999   # per-splat alpha ceiling
CUTOFF = 4.5          # 0.5 * (3 sigma)^2 influence cutoff in Mahalanobis units


@dataclass
class TileBinning:
    """Per-tile lists of splat positions (into the depth-sorted arrays)."""

    tile_size: int
    tiles_x: int
    tiles_y: int
    lists: list  # list[np.ndarray], row-major tile order

    def tile_bounds(self, tile_id: int, width: int, height: int):
        ty, tx = divmod(tile_id, self.tiles_x)
        x0 = tx * self.tile_size
        y0 = ty * self.tile_size
        return x0, y0, min(x0 + self.tile_size, width), min(y0 + self.tile_size, height)


def bin_tiles(mean2d: np.ndarray, radius: np.ndarray, width: int, height: int) -> TileBinning:
    """Bin splats (given in depth order) into the tiles their boxes touch.

    The per-tile lists preserve the input order, so iterating a tile's
    list walks splats in nondecreasing depth.
    """
    tiles_x = max((width + TILE_SIZE - 1) // TILE_SIZE, 1)
    tiles_y = max((height + TILE_SIZE - 1) // TILE_SIZE, 1)
    n = mean2d.shape[0]
    if n == 0:
        return TileBinning(TILE_SIZE, tiles_x, tiles_y,
                           [np.empty(0, dtype=np.int64)] * (tiles_x * tiles_y))

    x0 = np.floor((mean2d[:, 0] - radius) / TILE_SIZE).astype(np.int64)
    x1 = np.floor((mean2d[:, 0] + radius) / TILE_SIZE).astype(np.int64)
    y0 = np.floor((mean2d[:, 1] - radius) / TILE_SIZE).astype(np.int64)
    y1 = np.floor((mean2d[:, 1] + radius) / TILE_SIZE).astype(np.int64)
    x0 = np.clip(x0, 0, tiles_x - 1)
    x1 = np.clip(x1, 0, tiles_x - 1)
    y0 = np.clip(y0, 0, tiles_y - 1)
    y1 = np.clip(y1, 0, tiles_y - 1)

    offscreen = (
        (mean2d[:, 0] + radius <= 0.0)
        | (mean2d[:, 0] - radius >= width)
        | (mean2d[:, 1] + radius <= 0.0)
        | (mean2d[:, 1] - radius >= height)
        | (radius <= 0.0)
    )
    nx = np.where(offscreen, 0, x1 - x0 + 1)
    ny = np.where(offscreen, 0, y1 - y0 + 1)
    counts = nx * ny
    total = int(counts.sum())
    lists = [np.empty(0, dtype=np.int64)] * (tiles_x * tiles_y)
    if total == 0:
        return TileBinning(TILE_SIZE, tiles_x, tiles_y, lists)

    splat_ids = np.repeat(np.arange(n), counts)
    starts = np.concatenate([[0], np.cumsum(counts[:-1])])
    k = np.arange(total) - np.repeat(starts, counts)
    w = nx[splat_ids]
    tx = x0[splat_ids] + k % w
    ty = y0[splat_ids] + k // w
    tile_ids = ty * tiles_x + tx

    order = np.argsort(tile_ids, kind="stable")  # keeps depth order inside a tile
    tile_sorted = tile_ids[order]
    splat_sorted = splat_ids[order]
    boundaries = np.searchsorted(tile_sorted, np.arange(tiles_x * tiles_y + 1))
    for t in range(tiles_x * tiles_y):
        lists[t] = splat_sorted[boundaries[t]:boundaries[t + 1]]
    return TileBinning(TILE_SIZE, tiles_x, tiles_y, lists)


@njit(cache=True)
def _blend_forward(mu, conic, opac, colors, x0, y0, w, h,
                   out_color, out_alpha, out_len, out_t):
    """Front-to-back blend of one tile; records the committed prefix
    length and final transmittance per pixel for the backward walk."""
    m = mu.shape[0]
    for py in range(h):
        yc = y0 + py + 0.5
        for px_i in range(w):
            xc = x0 + px_i + 0.5
            p = py * w + px_i
            t = 1.0
            cr = 0.0
            cg = 0.0
            cb = 0.0
            acc = 0.0
            prefix = m
            for i in range(m):
                dx = xc - mu[i, 0]
                dy = yc - mu[i, 1]
                power = 0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) \
                    + conic[i, 1] * dx * dy
                if power > CUTOFF:
                    continue
                a = opac[i] * np.exp(-power)
                if a > ALPHA_CLAMP:
                    a = ALPHA_CLAMP
                t_new = t * (1.0 - a)
                if t_new < T_EPS:
                    prefix = i
                    break
                weight = a * t
                cr += weight * colors[i, 0]
                cg += weight * colors[i, 1]
                cb += weight * colors[i, 2]
                acc += weight
                t = t_new
            out_color[p, 0] = cr
            out_color[p, 1] = cg
            out_color[p, 2] = cb
            out_alpha[p] = acc
            out_len[p] = prefix
            out_t[p] = t


@njit(cache=True)
def _blend_backward(mu, conic, opac, colors, x0, y0, w, h,
                    prefix_len, t_final, gc, ga,
                    d_mu, d_conic, d_opac, d_colors):
    """Reverse per-pixel walk over the committed prefix.

    Recovers each splat's incoming transmittance by dividing the stored
    final value back out, and accumulates the suffix shading term the
    alpha gradient needs.  Accumulation order is fixed, so gradients are
    bit-stable.
    """
    for py in range(h):
        yc = y0 + py + 0.5
        for px_i in range(w):
            xc = x0 + px_i + 0.5
            p = py * w + px_i
            t_run = t_final[p]
            suffix = 0.0
            gcr = gc[p, 0]
            gcg = gc[p, 1]
            gcb = gc[p, 2]
            gap = ga[p]
            for i in range(prefix_len[p] - 1, -1, -1):
                dx = xc - mu[i, 0]
                dy = yc - mu[i, 1]
                ca = conic[i, 0]
                cb_ = conic[i, 1]
                cc = conic[i, 2]
                power = 0.5 * (ca * dx * dx + cc * dy * dy) + cb_ * dx * dy
                if power > CUTOFF:
                    continue
                g = np.exp(-power)
                u = opac[i] * g
                a = u if u < ALPHA_CLAMP else ALPHA_CLAMP
                one_m = 1.0 - a
                t_i = t_run / one_m   # transmittance in front of splat i
                weight = a * t_i
                cdot = colors[i, 0] * gcr + colors[i, 1] * gcg \
                    + colors[i, 2] * gcb + gap
                d_colors[i, 0] += weight * gcr
                d_colors[i, 1] += weight * gcg
                d_colors[i, 2] += weight * gcb
                if u < ALPHA_CLAMP:
                    d_a = t_i * cdot - suffix / one_m
                    d_opac[i] += d_a * g
                    d_power = -g * d_a * opac[i]
                    d_conic[i, 0] += d_power * 0.5 * dx * dx
                    d_conic[i, 1] += d_power * dx * dy
                    d_conic[i, 2] += d_power * 0.5 * dy * dy
                    d_mu[i, 0] -= d_power * (ca * dx + cb_ * dy)
                    d_mu[i, 1] -= d_power * (cb_ * dx + cc * dy)
                suffix += weight * cdot
                t_run = t_i


@dataclass
class RenderOutput:
    """Premultiplied color and accumulation, plus per-Gaussian statistics.

    ``color`` carries no background: it is the plain front-to-back sum, so
    compositing layers is a pure algebraic operation downstream.  ``radii``
    and ``visible`` feed density control.
    """

    color: np.ndarray    # (H, W, 3)
    alpha: np.ndarray    # (H, W)
    radii: np.ndarray    # (N,) pixels, 0 when culled
    visible: np.ndarray  # (N,) bool, True when the splat reached any tile


@dataclass
class RenderCache:
    gset: GaussianSet
    cam: Camera
    proj: ProjectedSplats
    order: np.ndarray
    binning: TileBinning
    colors: np.ndarray           # (N, 3) per-Gaussian blend colors
    colors_overridden: bool
    sh_pre_clamp: np.ndarray | None
    view_dirs: np.ndarray | None
    view_norms: np.ndarray | None
    tile_state: list | None = None  # per tile (prefix_len, t_final)


def depth_order(proj: ProjectedSplats) -> np.ndarray:
    """Indices of visible splats, sorted by depth with index tiebreak."""
    idx = np.nonzero(proj.valid)[0]
    return idx[np.argsort(proj.depth[idx], kind="stable")]


def render_forward(gset: GaussianSet, cam: Camera, colors: np.ndarray | None = None):
    """Render one Gaussian set into premultiplied color and alpha maps.

    Args:
        gset: the set to render.
        cam: target camera.
        colors: optional (N, 3) override of the per-Gaussian blend colors
            (used when an appearance model tones colors before blending);
            by default colors come from the set's own color mode.

    Returns:
        (RenderOutput, RenderCache); the cache feeds ``render_backward``.
    """
    n = len(gset)
    height, width = cam.height, cam.width
    proj = project_set(gset, cam)

    sh_pre = None
    dirs = None
    norms = None
    if colors is not None:
        blend_colors = np.ascontiguousarray(colors, dtype=np.float64)
        if blend_colors.shape != (n, 3):
            raise ValueError("color override must be (N, 3)")
        overridden = True
    elif gset.color_mode == COLOR_SH:
        dirs, norms = view_directions(gset.means, cam)
        blend_colors, sh_pre = eval_sh_colors(gset.colors, dirs)
        overridden = False
    else:
        blend_colors = gset.colors
        overridden = False

    order = depth_order(proj)
    binning = bin_tiles(proj.mean2d[order], proj.radius[order], width, height)

    color = np.zeros((height, width, 3), dtype=np.float64)
    alpha = np.zeros((height, width), dtype=np.float64)
    opac = sigmoid(gset.opacity_logits)
    visible = np.zeros(n, dtype=bool)
    tile_state = [None] * len(binning.lists)

    for tile_id, sel in enumerate(binning.lists):
        if sel.size == 0:
            continue
        x0, y0, x1, y1 = binning.tile_bounds(tile_id, width, height)
        w, h = x1 - x0, y1 - y0
        g_idx = order[sel]
        visible[g_idx] = True
        t_color = np.zeros((w * h, 3))
        t_alpha = np.zeros(w * h)
        t_len = np.zeros(w * h, dtype=np.int64)
        t_t = np.zeros(w * h)
        _blend_forward(proj.mean2d[g_idx], proj.conic[g_idx], opac[g_idx],
                       blend_colors[g_idx], float(x0), float(y0), w, h,
                       t_color, t_alpha, t_len, t_t)
        tile_state[tile_id] = (t_len, t_t)
        color[y0:y1, x0:x1] = t_color.reshape(h, w, 3)
        alpha[y0:y1, x0:x1] = t_alpha.reshape(h, w)

    out = RenderOutput(color=color, alpha=alpha, radii=proj.radius.copy(), visible=visible)
    cache = RenderCache(
        gset=gset,
        cam=cam,
        proj=proj,
        order=order,
        binning=binning,
        colors=blend_colors,
        colors_overridden=overridden,
        sh_pre_clamp=sh_pre,
        view_dirs=dirs,
        view_norms=norms,
        tile_state=tile_state,
    )
    return out, cache


def render_backward(cache: RenderCache, d_color: np.ndarray, d_alpha: np.ndarray) -> dict:
    """Adjoint of :func:`render_forward`.

    Args:
        cache: the cache returned by the matching forward call.
        d_color: (H, W, 3) upstream gradient of the premultiplied color.
        d_alpha: (H, W) upstream gradient of the accumulation map.

    Returns:
        dict with gradients for every raw parameter (``means``,
        ``log_scales``, ``quats``, ``opacity_logits``, ``colors``), plus
        ``colors_rgb`` (dL/d blend color per Gaussian, for chaining into
        an appearance model when the colors were overridden) and
        ``screen_grad`` (dL/d pixel mean, the densification statistic).
        Tiles are reduced in a fixed order, so results are reproducible.
    """
    gset, cam, proj = cache.gset, cache.cam, cache.proj
    n = len(gset)
    height, width = cam.height, cam.width
    d_color = np.ascontiguousarray(d_color, dtype=np.float64)
    d_alpha = np.ascontiguousarray(d_alpha, dtype=np.float64)
    if d_color.shape != (height, width, 3) or d_alpha.shape != (height, width):
        raise ValueError("upstream gradient shape mismatch")

    opac = sigmoid(gset.opacity_logits)
    d_mean2d = np.zeros((n, 2), dtype=np.float64)
    d_conic = np.zeros((n, 3), dtype=np.float64)
    d_opac = np.zeros(n, dtype=np.float64)
    d_blend_colors = np.zeros((n, 3), dtype=np.float64)

    order = cache.order
    for tile_id, sel in enumerate(cache.binning.lists):
        if sel.size == 0:
            continue
        x0, y0, x1, y1 = cache.binning.tile_bounds(tile_id, width, height)
        w, h = x1 - x0, y1 - y0
        g_idx = order[sel]
        t_len, t_t = cache.tile_state[tile_id]
        gc = np.ascontiguousarray(d_color[y0:y1, x0:x1].reshape(-1, 3))
        ga = np.ascontiguousarray(d_alpha[y0:y1, x0:x1].reshape(-1))

        m = sel.size
        t_mu = np.zeros((m, 2))
        t_conic = np.zeros((m, 3))
        t_opac = np.zeros(m)
        t_cols = np.zeros((m, 3))
        _blend_backward(proj.mean2d[g_idx], proj.conic[g_idx], opac[g_idx],
                        cache.colors[g_idx], float(x0), float(y0), w, h,
                        t_len, t_t, gc, ga, t_mu, t_conic, t_opac, t_cols)
        d_mean2d[g_idx] += t_mu
        d_conic[g_idx] += t_conic
        d_opac[g_idx] += t_opac
        d_blend_colors[g_idx] += t_cols

    # conic = inv(cov2d): dL/dcov = -P G P with G the full conic gradient.
    pa, pb, pc = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 2]
    ga_, gb_, gc_ = d_conic[:, 0], 0.5 * d_conic[:, 1], d_conic[:, 2]
    m00 = pa * ga_ + pb * gb_
    m01 = pa * gb_ + pb * gc_
    m10 = pb * ga_ + pc * gb_
    m11 = pb * gb_ + pc * gc_
    d_cov_full00 = -(m00 * pa + m01 * pb)
    d_cov_full01 = -(m00 * pb + m01 * pc)
    d_cov_full10 = -(m10 * pa + m11 * pb)
    d_cov_full11 = -(m10 * pb + m11 * pc)
    d_cov2d = np.stack([d_cov_full00, d_cov_full01 + d_cov_full10, d_cov_full11], axis=1)

    grads = project_backward(gset, cam, proj, d_mean2d, d_cov2d)
    grads["opacity_logits"] = d_opac * opac * (1.0 - opac)
    grads["screen_grad"] = d_mean2d
    grads["colors_rgb"] = d_blend_colors

    if cache.colors_overridden:
        grads["colors"] = None
    elif gset.color_mode == COLOR_SH:
        d_sh, d_dirs = eval_sh_colors_backward(
            gset.colors, cache.view_dirs, cache.sh_pre_clamp, d_blend_colors
        )
        grads["colors"] = d_sh
        grads["means"] = grads["means"] + view_directions_backward(
            cache.view_dirs, cache.view_norms, d_dirs
        )
    else:
        grads["colors"] = d_blend_colors.copy()
    return grads
