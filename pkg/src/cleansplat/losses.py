"""Training objectives with analytic gradients w.r.t. their image inputs.

The photometric term is the usual blend of mean absolute error and
structural dissimilarity; on top of it sit L1 regularizers on the static
and distractor accumulation maps and, when the environment background is
enabled, an opacity penalty restricted to pixels the background already
explains.  Regularizers are averaged over pixels so the weights are
resolution independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class LossWeights:
    """Multipliers of the training objective; all must be nonnegative."""

    lambda_ssim: float = 0.2
    lambda_static_alpha: float = 0.01      # on |1 - a_s|
    lambda_distractor_alpha: float = 0.01  # on |a_d|
    lambda_background: float = 0.0
    t_eps: float = 0.003                   # background agreement threshold
    mask_cut: float = 0.6                  # box-filtered mask cutoff

    def validate(self):
        for name in ("lambda_ssim", "lambda_static_alpha", "lambda_distractor_alpha",
                     "lambda_background", "t_eps", "mask_cut"):
            if getattr(self, name) < 0:
                raise UsageError(f"{name} must be >= 0")


def l1_loss(pred: np.ndarray, gt: np.ndarray):
    """Mean absolute error and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise UsageError("l1_loss shape mismatch")
    diff = pred - gt
    value = float(np.abs(diff).mean())
    grad = np.sign(diff) / diff.size
    return value, grad


def _gaussian_kernel():
    half = SSIM_WINDOW // 2
    xs = np.arange(SSIM_WINDOW, dtype=np.float64) - half
    k = np.exp(-(xs ** 2) / (2.0 * SSIM_SIGMA ** 2))
    return k / k.sum()


_KERNEL = _gaussian_kernel()


def _filter_valid(img: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation with the SSIM window."""
    win = np.lib.stride_tricks.sliding_window_view(img, SSIM_WINDOW, axis=0)
    img = win @ _KERNEL
    win = np.lib.stride_tricks.sliding_window_view(img, SSIM_WINDOW, axis=1)
    return win @ _KERNEL


def _filter_adjoint(grad: np.ndarray, shape) -> np.ndarray:
    """Adjoint of :func:`_filter_valid` back onto a ``shape`` image."""
    pad = SSIM_WINDOW - 1
    buf = np.zeros((grad.shape[0] + 2 * pad, grad.shape[1] + 2 * pad))
    buf[pad: pad + grad.shape[0], pad: pad + grad.shape[1]] = grad
    win = np.lib.stride_tricks.sliding_window_view(buf, SSIM_WINDOW, axis=0)
    buf2 = win @ _KERNEL[::-1]
    win = np.lib.stride_tricks.sliding_window_view(buf2, SSIM_WINDOW, axis=1)
    out = win @ _KERNEL[::-1]
    return out[: shape[0], : shape[1]]


def _ssim_channel(x: np.ndarray, y: np.ndarray):
    """Per-channel SSIM map with intermediates for the backward pass."""
    mu_x = _filter_valid(x)
    mu_y = _filter_valid(y)
    xx = _filter_valid(x * x)
    yy = _filter_valid(y * y)
    xy = _filter_valid(x * y)
    var_x = xx - mu_x * mu_x
    var_y = yy - mu_y * mu_y
    cov = xy - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + SSIM_C1
    a2 = 2.0 * cov + SSIM_C2
    b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    b2 = var_x + var_y + SSIM_C2
    s = (a1 * a2) / (b1 * b2)
    return s, (mu_x, mu_y, a1, a2, b1, b2)


def ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean SSIM (valid region, per channel, 11x11 Gaussian window)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise UsageError("ssim shape mismatch")
    if pred.shape[0] < SSIM_WINDOW or pred.shape[1] < SSIM_WINDOW:
        raise UsageError("image smaller than the SSIM window")
    if pred.ndim == 2:
        pred = pred[:, :, None]
        gt = gt[:, :, None]
    vals = [float(_ssim_channel(pred[:, :, c], gt[:, :, c])[0].mean())
            for c in range(pred.shape[2])]
    return float(np.mean(vals))


def dssim_loss(pred: np.ndarray, gt: np.ndarray):
    """Structural dissimilarity (1 - SSIM) / 2 and its gradient w.r.t. pred."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise UsageError("dssim shape mismatch")
    if pred.shape[0] < SSIM_WINDOW or pred.shape[1] < SSIM_WINDOW:
        raise UsageError("image smaller than the SSIM window")
    squeeze = pred.ndim == 2
    if squeeze:
        pred = pred[:, :, None]
        gt = gt[:, :, None]

    channels = pred.shape[2]
    total = 0.0
    grad = np.zeros_like(pred)
    for c in range(channels):
        x = pred[:, :, c]
        y = gt[:, :, c]
        s, (mu_x, mu_y, a1, a2, b1, b2) = _ssim_channel(x, y)
        total += float(s.mean())

        # dL/dS per valid pixel; L = (1 - mean S) / 2 averaged over channels.
        d_s = np.full(s.shape, -0.5 / (s.size * channels))
        d_a1 = d_s * a2 / (b1 * b2)
        d_a2 = d_s * a1 / (b1 * b2)
        d_b1 = d_s * (-s / b1)
        d_b2 = d_s * (-s / b2)
        # S depends on x via mu_x, E[x^2], and E[xy].
        d_mu = d_a1 * 2.0 * mu_y + d_b1 * 2.0 * mu_x \
            + d_b2 * (-2.0 * mu_x) + d_a2 * 2.0 * (-mu_y)
        d_exx = d_b2
        d_exy = d_a2 * 2.0
        grad[:, :, c] = (
            _filter_adjoint(d_mu, x.shape)
            + 2.0 * x * _filter_adjoint(d_exx, x.shape)
            + y * _filter_adjoint(d_exy, x.shape)
        )
    value = (1.0 - total / channels) / 2.0
    if squeeze:
        grad = grad[:, :, 0]
    return value, grad


def alpha_regularizers(alpha_s: np.ndarray, alpha_d: np.ndarray, w: LossWeights):
    """L1 penalties pulling static accumulation to 1 and transient to 0.

    Returns (value, d_alpha_s, d_alpha_d); the maps live in [0, 1], which
    fixes the gradient signs.
    """
    value = 0.0
    d_as = np.zeros_like(alpha_s)
    d_ad = np.zeros_like(alpha_d)
    if w.lambda_static_alpha > 0:
        value += w.lambda_static_alpha * float(np.abs(1.0 - alpha_s).mean())
        d_as -= w.lambda_static_alpha / alpha_s.size
    if w.lambda_distractor_alpha > 0:
        value += w.lambda_distractor_alpha * float(np.abs(alpha_d).mean())
        d_ad += w.lambda_distractor_alpha / alpha_d.size
    return value, d_as, d_ad


def background_mask(c_bg: np.ndarray, gt: np.ndarray, t_eps: float, mask_cut: float):
    """Pixels the predicted background already explains.

    The per-pixel agreement indicator (mean absolute RGB error below
    ``t_eps``) is smoothed with a normalized 3x3 box filter (replicated
    borders) and thresholded at ``mask_cut``.  Returns (P, M).
    """
    c_bg = np.asarray(c_bg, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if c_bg.shape != gt.shape:
        raise UsageError("background_mask shape mismatch")
    err = np.abs(c_bg - gt).mean(axis=2)
    agree = (err <= t_eps).astype(np.float64)
    padded = np.pad(agree, 1, mode="edge")
    m = np.zeros_like(agree)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            m += padded[1 + dy: 1 + dy + agree.shape[0], 1 + dx: 1 + dx + agree.shape[1]]
    m /= 9.0
    return m > mask_cut, m


def bg_opacity_loss(alpha_d: np.ndarray, alpha_s: np.ndarray, p_mask: np.ndarray,
                    lambda_bg: float):
    """Penalize any Gaussian accumulation on background-explained pixels.

    The composite accumulation a_d + (1 - a_d) a_s is averaged over the
    mask; an empty mask contributes nothing.
    Returns (value, d_alpha_d, d_alpha_s).
    """
    count = int(p_mask.sum())
    d_ad = np.zeros_like(alpha_d)
    d_as = np.zeros_like(alpha_s)
    if count == 0 or lambda_bg == 0.0:
        return 0.0, d_ad, d_as
    acc = alpha_d + (1.0 - alpha_d) * alpha_s
    value = lambda_bg * float(np.abs(acc[p_mask]).mean())
    scale = lambda_bg / count
    d_ad[p_mask] = scale * (1.0 - alpha_s[p_mask])
    d_as[p_mask] = scale * (1.0 - alpha_d[p_mask])
    return value, d_ad, d_as


@dataclass
class TotalLoss:
    value: float
    l1: float
    dssim: float
    alpha_reg: float
    bg_reg: float
    d_composite: np.ndarray
    d_alpha_s: np.ndarray
    d_alpha_d: np.ndarray
    p_mask: np.ndarray | None


def total_loss(composite, gt: np.ndarray, w: LossWeights) -> TotalLoss:
    """Full objective on one decomposed render.

    Emits the gradients w.r.t. the composite color and both accumulation
    maps; chaining them through the compositing identity reaches every
    layer's rasterizer backward pass.
    """
    w.validate()
    gt = np.asarray(gt, dtype=np.float64)
    l1_val, l1_grad = l1_loss(composite.color, gt)
    ds_val, ds_grad = dssim_loss(composite.color, gt)
    d_comp = (1.0 - w.lambda_ssim) * l1_grad + w.lambda_ssim * ds_grad

    reg_val, d_as, d_ad = alpha_regularizers(
        composite.static_alpha, composite.distractor_alpha, w
    )

    bg_val = 0.0
    p_mask = None
    if composite.background is not None and w.lambda_background > 0:
        p_mask, _ = background_mask(composite.background, gt, w.t_eps, w.mask_cut)
        bg_val, d_ad_bg, d_as_bg = bg_opacity_loss(
            composite.distractor_alpha, composite.static_alpha, p_mask, w.lambda_background
        )
        d_ad = d_ad + d_ad_bg
        d_as = d_as + d_as_bg

    value = (1.0 - w.lambda_ssim) * l1_val + w.lambda_ssim * ds_val + reg_val + bg_val
    return TotalLoss(
        value=value,
        l1=l1_val,
        dssim=ds_val,
        alpha_reg=reg_val,
        bg_reg=bg_val,
        d_composite=d_comp,
        d_alpha_s=d_as,
        d_alpha_d=d_ad,
        p_mask=p_mask,
    )
