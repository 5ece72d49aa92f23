"""Real spherical-harmonic basis for view-dependent color.

Gaussian colors use degrees 0..3 with the hard-coded constants common in
splatting renderers (Condon-Shortley signs retained); the environment
background model additionally uses degree 4.  Direction gradients are
provided for degrees 0..3 only, which is all the color backward pass
needs; background rays are camera-fixed.
"""

from __future__ import annotations

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)
SH_C4 = (
    2.5033429417967046,
    -1.7701307697799304,
    0.9461746957575601,
    -0.6690465435572892,
    0.10578554691520431,
    -0.6690465435572892,
    0.47308734787878004,
    -1.7701307697799304,
    0.6258357354491761,
)


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Evaluate the basis at unit directions (N, 3); returns (N, K)."""
    if not 0 <= degree <= 4:
        raise ValueError("supported SH degrees are 0..4")
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    n = d.shape[0]
    basis = np.empty((n, num_sh_coeffs(degree)), dtype=np.float64)
    basis[:, 0] = SH_C0
    if degree < 1:
        return basis
    basis[:, 1] = -SH_C1 * y
    basis[:, 2] = SH_C1 * z
    basis[:, 3] = -SH_C1 * x
    if degree < 2:
        return basis
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    basis[:, 4] = SH_C2[0] * xy
    basis[:, 5] = SH_C2[1] * yz
    basis[:, 6] = SH_C2[2] * (2.0 * zz - xx - yy)
    basis[:, 7] = SH_C2[3] * xz
    basis[:, 8] = SH_C2[4] * (xx - yy)
    if degree < 3:
        return basis
    basis[:, 9] = SH_C3[0] * y * (3.0 * xx - yy)
    basis[:, 10] = SH_C3[1] * xy * z
    basis[:, 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
    basis[:, 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    basis[:, 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
    basis[:, 14] = SH_C3[5] * z * (xx - yy)
    basis[:, 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    if degree < 4:
        return basis
    basis[:, 16] = SH_C4[0] * xy * (xx - yy)
    basis[:, 17] = SH_C4[1] * yz * (3.0 * xx - yy)
    basis[:, 18] = SH_C4[2] * xy * (7.0 * zz - 1.0)
    basis[:, 19] = SH_C4[3] * yz * (7.0 * zz - 3.0)
    basis[:, 20] = SH_C4[4] * (35.0 * zz * zz - 30.0 * zz + 3.0)
    basis[:, 21] = SH_C4[5] * xz * (7.0 * zz - 3.0)
    basis[:, 22] = SH_C4[6] * (xx - yy) * (7.0 * zz - 1.0)
    basis[:, 23] = SH_C4[7] * xz * (xx - 3.0 * yy)
    basis[:, 24] = SH_C4[8] * (xx * (xx - 3.0 * yy) - yy * (3.0 * xx - yy))
    return basis


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Partial derivatives of the basis w.r.t. the direction components.

    Returns (N, K, 3).  Only degrees 0..3 are supported; these are the
    bases that sit upstream of Gaussian position gradients.
    """
    if not 0 <= degree <= 3:
        raise ValueError("basis gradients are provided for degrees 0..3")
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    n = d.shape[0]
    zero = np.zeros(n, dtype=np.float64)
    grad = np.zeros((n, num_sh_coeffs(degree), 3), dtype=np.float64)
    if degree < 1:
        return grad
    grad[:, 1, 1] = -SH_C1
    grad[:, 2, 2] = SH_C1
    grad[:, 3, 0] = -SH_C1
    if degree < 2:
        return grad
    xx, yy, zz = x * x, y * y, z * z
    grad[:, 4] = SH_C2[0] * np.stack([y, x, zero], axis=1)
    grad[:, 5] = SH_C2[1] * np.stack([zero, z, y], axis=1)
    grad[:, 6] = SH_C2[2] * np.stack([-2.0 * x, -2.0 * y, 4.0 * z], axis=1)
    grad[:, 7] = SH_C2[3] * np.stack([z, zero, x], axis=1)
    grad[:, 8] = SH_C2[4] * np.stack([2.0 * x, -2.0 * y, zero], axis=1)
    if degree < 3:
        return grad
    grad[:, 9] = SH_C3[0] * np.stack([6.0 * x * y, 3.0 * xx - 3.0 * yy, zero], axis=1)
    grad[:, 10] = SH_C3[1] * np.stack([y * z, x * z, x * y], axis=1)
    grad[:, 11] = SH_C3[2] * np.stack(
        [-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z], axis=1
    )
    grad[:, 12] = SH_C3[3] * np.stack(
        [-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy], axis=1
    )
    grad[:, 13] = SH_C3[4] * np.stack(
        [4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z], axis=1
    )
    grad[:, 14] = SH_C3[5] * np.stack([2.0 * x * z, -2.0 * y * z, xx - yy], axis=1)
    grad[:, 15] = SH_C3[6] * np.stack([3.0 * xx - 3.0 * yy, -6.0 * x * y, zero], axis=1)
    return grad


def eval_sh_colors(sh: np.ndarray, dirs: np.ndarray):
    """View-dependent RGB from SH blocks.

    Args:
        sh: (N, K, 3) coefficient blocks, K = (degree+1)^2, degree <= 3.
        dirs: (N, 3) unit view directions.

    Returns:
        (colors, pre_clamp): colors are sum(c * Y) + 0.5 clamped at zero,
        pre_clamp is kept for the backward pass.
    """
    sh = np.asarray(sh, dtype=np.float64)
    degree = int(round(np.sqrt(sh.shape[1]))) - 1
    basis = sh_basis(dirs, degree)
    pre = np.einsum("nk,nkc->nc", basis, sh) + 0.5
    return np.maximum(pre, 0.0), pre


def eval_sh_colors_backward(sh, dirs, pre_clamp, d_colors):
    """Gradients of :func:`eval_sh_colors` w.r.t. coefficients and directions."""
    sh = np.asarray(sh, dtype=np.float64)
    degree = int(round(np.sqrt(sh.shape[1]))) - 1
    d_pre = np.asarray(d_colors, dtype=np.float64) * (pre_clamp > 0.0)
    basis = sh_basis(dirs, degree)
    d_sh = basis[:, :, None] * d_pre[:, None, :]
    bgrad = sh_basis_grad(dirs, degree)
    # dL/ddir_j = sum_k dY_k/ddir_j * (sh_k . d_pre)
    coef = np.einsum("nkc,nc->nk", sh, d_pre)
    d_dirs = np.einsum("nk,nkj->nj", coef, bgrad)
    return d_sh, d_dirs
