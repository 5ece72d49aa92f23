"""Adaptive density control: clone, split, and cull Gaussians.

Screen-space positional gradients are accumulated between control steps;
points whose mean gradient exceeds a threshold are duplicated (small
ones) or split in two (large ones), and points that have faded out or
grown past a screen-radius cap are culled.  The static set runs on a
global iteration cadence, while each view's distractor set runs on its
own visit count; only the static set is subject to periodic opacity
resets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gaussians import GaussianSet, PARAM_KEYS, inverse_sigmoid, quat_to_rotation, sigmoid
from .optim import AdamState


@dataclass
class DensifyStats:
    """Per-Gaussian accumulators gathered between density-control steps."""

    grad_accum: np.ndarray
    count: np.ndarray
    max_radius: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "DensifyStats":
        return cls(np.zeros(n), np.zeros(n), np.zeros(n))

    def add(self, screen_grad: np.ndarray, radii: np.ndarray, visible: np.ndarray,
            width: int, height: int):
        """Record one render's statistics.

        ``screen_grad`` is dL/d(pixel mean); it is rescaled to
        normalized device units (half image extent = 1) so thresholds are
        resolution independent.
        """
        norms = np.hypot(screen_grad[:, 0] * (width / 2.0),
                         screen_grad[:, 1] * (height / 2.0))
        self.grad_accum[visible] += norms[visible]
        self.count[visible] += 1.0
        np.maximum(self.max_radius, np.where(visible, radii, 0.0), out=self.max_radius)

    def reset(self, n: int):
        self.grad_accum = np.zeros(n)
        self.count = np.zeros(n)
        self.max_radius = np.zeros(n)


@dataclass
class AdcThresholds:
    grad_threshold: float = 2e-4
    size_frac: float = 0.01          # of scene extent; split/clone boundary
    cull_opacity: float = 0.005
    radius_cap: float | None = None  # px; None disables radius/world-size culls
    world_size_frac: float = 0.1     # of scene extent, active with radius_cap
    split_factor: float = 1.6
    split_count: int = 2


@dataclass
class AdcReport:
    cloned: int = 0
    split: int = 0
    culled: int = 0

    @property
    def total_change(self):
        return self.cloned + self.split - self.culled


def adc_step(gset: GaussianSet, stats: DensifyStats, adam: AdamState,
             thresholds: AdcThresholds, scene_extent: float, rng,
             densify: bool = True, appearance_hook=None) -> AdcReport:
    """Run one density-control pass, mutating the set in place.

    Adam moment rows follow the set: survivors keep theirs, clones and
    split children start from zero.  With ``densify=False`` only culling
    runs.  ``appearance_hook`` is called as ``hook(keep_mask,
    new_positions)`` so per-Gaussian embeddings can track the resize.
    Statistics are reset afterwards.
    """
    report = AdcReport()
    n = len(gset)
    if n == 0:
        stats.reset(0)
        return report

    mean_grad = np.where(stats.count > 0, stats.grad_accum / np.maximum(stats.count, 1.0), 0.0)
    params = {k: getattr(gset, k) for k in PARAM_KEYS}
    max_radius = stats.max_radius.copy()
    size_limit = thresholds.size_frac * scene_extent
    max_scale = np.exp(gset.log_scales).max(axis=1)

    keep = np.ones(n, dtype=bool)
    new_blocks = []      # list of param dicts
    new_positions = []

    if densify:
        hot = mean_grad > thresholds.grad_threshold
        clone_mask = hot & (max_scale <= size_limit)
        split_mask = hot & (max_scale > size_limit)
        report.cloned = int(clone_mask.sum())
        report.split = int(split_mask.sum())

        if report.cloned:
            new_blocks.append({k: v[clone_mask].copy() for k, v in params.items()})
            new_positions.append(params["means"][clone_mask].copy())

        if report.split:
            sc = thresholds.split_count
            idx = np.nonzero(split_mask)[0]
            rep = np.repeat(idx, sc)
            scales = np.exp(params["log_scales"][rep])
            noise = rng.normal(size=(len(rep), 3)) * scales
            rots = quat_to_rotation(params["quats"][rep])
            offsets = np.einsum("nij,nj->ni", rots, noise)
            children = {k: params[k][rep].copy() for k in PARAM_KEYS}
            children["means"] = children["means"] + offsets
            children["log_scales"] = children["log_scales"] - np.log(thresholds.split_factor)
            new_blocks.append(children)
            new_positions.append(children["means"].copy())
            keep &= ~split_mask

    # Culling: faded points always; oversized points only while a radius
    # cap is in force (stats cover the window since the last control step).
    opac = sigmoid(params["opacity_logits"])
    cull = opac < thresholds.cull_opacity
    if thresholds.radius_cap is not None:
        cull |= max_radius > thresholds.radius_cap
        cull |= max_scale > thresholds.world_size_frac * scene_extent
    cull &= keep
    report.culled = int(cull.sum())
    keep &= ~cull

    kept_params = {k: v[keep] for k, v in params.items()}
    n_new = 0
    if new_blocks:
        merged = {k: np.concatenate([b[k] for b in new_blocks], axis=0) for k in PARAM_KEYS}
        n_new = merged["means"].shape[0]
        kept_params = {k: np.concatenate([kept_params[k], merged[k]], axis=0)
                       for k in PARAM_KEYS}
    gset.set_params(kept_params)
    for key in PARAM_KEYS:
        if key in adam.slots:
            adam.resize_rows(key, keep, n_new)

    if appearance_hook is not None:
        appearance_hook(
            keep,
            np.concatenate(new_positions, axis=0) if new_positions else np.zeros((0, 3)),
        )
    stats.reset(len(gset))
    return report


def reset_opacity(gset: GaussianSet, adam: AdamState, value: float = 0.01):
    """Clamp opacities to at most ``value`` and zero their Adam moments."""
    opac = sigmoid(gset.opacity_logits)
    gset.opacity_logits = inverse_sigmoid(np.minimum(opac, value))
    if "opacity_logits" in adam.slots:
        adam.zero("opacity_logits")


@dataclass
class AdcEvent:
    """One density-control invocation, for logs and instrumentation."""

    step: int
    target: str          # "static" or "distractor"
    view: int            # -1 for static
    densify: bool
    report: AdcReport
