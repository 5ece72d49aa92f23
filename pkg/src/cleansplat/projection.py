"""Perspective projection of 3D Gaussians into screen-space 2D splats.

The projected covariance uses the local affine (Jacobian) approximation
of the pinhole map: ``cov2d = J W cov3d W^T J^T`` with ``W`` the
world-to-camera rotation, plus a low-pass floor on the diagonal so a
splat never collapses below pixel scale.  Everything here is vectorized
over the Gaussian axis and has an exact analytic adjoint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cameras import Camera
from .gaussians import (
    GaussianSet,
    build_covariance,
    covariance_backward,
    quat_to_rotation,
    rotation_quat_backward,
)

NEAR_PLANE = 0.01
LOWPASS_FLOOR = 0.3  # px^2 added to both diagonal entries of cov2d
RADIUS_SIGMA = 3.0   # splat influence cutoff in standard deviations


@dataclass
class ProjectedSplats:
    """Screen-space splats plus intermediates cached for the backward pass.

    ``cov2d``/``conic`` are packed symmetric 2x2 matrices ``(a, b, c)`` for
    ``[[a, b], [b, c]]``.  Culled Gaussians have ``valid == False`` and
    zeroed rows.
    """

    mean2d: np.ndarray      # (N, 2) pixels
    cov2d: np.ndarray       # (N, 3) packed
    conic: np.ndarray       # (N, 3) packed inverse of cov2d
    depth: np.ndarray       # (N,) camera-space z
    radius: np.ndarray      # (N,) pixels, 0 when culled
    valid: np.ndarray       # (N,) bool
    p_cam: np.ndarray       # (N, 3)
    jac: np.ndarray         # (N, 2, 3)
    m: np.ndarray           # (N, 2, 3) = J @ W
    cov3d: np.ndarray       # (N, 3, 3)


def project_set(gset: GaussianSet, cam: Camera) -> ProjectedSplats:
    """Project every Gaussian of a set; culls points behind the near plane."""
    n = len(gset)
    w_rot = cam.rotation.T  # world-to-camera
    p_cam = gset.means @ w_rot.T - w_rot @ cam.translation
    valid = p_cam[:, 2] > NEAR_PLANE

    x = p_cam[:, 0]
    y = p_cam[:, 1]
    z = np.where(valid, p_cam[:, 2], 1.0)  # placeholder depth for culled rows
    inv_z = 1.0 / z

    mean2d = np.zeros((n, 2), dtype=np.float64)
    mean2d[:, 0] = cam.fx * x * inv_z + cam.cx
    mean2d[:, 1] = cam.fy * y * inv_z + cam.cy

    jac = np.zeros((n, 2, 3), dtype=np.float64)
    jac[:, 0, 0] = cam.fx * inv_z
    jac[:, 0, 2] = -cam.fx * x * inv_z * inv_z
    jac[:, 1, 1] = cam.fy * inv_z
    jac[:, 1, 2] = -cam.fy * y * inv_z * inv_z

    cov3d = build_covariance(gset.log_scales, gset.quats) if n else np.zeros((0, 3, 3))
    m = jac @ w_rot
    cov2d_full = np.einsum("nij,njk,nlk->nil", m, cov3d, m)
    a = cov2d_full[:, 0, 0] + LOWPASS_FLOOR
    b = cov2d_full[:, 0, 1]
    c = cov2d_full[:, 1, 1] + LOWPASS_FLOOR

    det = a * c - b * b
    nonsingular = det > 1e-12
    valid = valid & nonsingular
    det_safe = np.where(nonsingular, det, 1.0)
    conic = np.stack([c / det_safe, -b / det_safe, a / det_safe], axis=1)

    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = np.where(valid, RADIUS_SIGMA * np.sqrt(np.maximum(lam_max, 0.0)), 0.0)

    zero2 = np.zeros_like(mean2d)
    mean2d = np.where(valid[:, None], mean2d, zero2)
    cov2d = np.where(valid[:, None], np.stack([a, b, c], axis=1), 0.0)
    conic = np.where(valid[:, None], conic, 0.0)
    depth = np.where(valid, p_cam[:, 2], 0.0)

    return ProjectedSplats(
        mean2d=mean2d,
        cov2d=cov2d,
        conic=conic,
        depth=depth,
        radius=radius,
        valid=valid,
        p_cam=p_cam,
        jac=jac,
        m=m,
        cov3d=cov3d,
    )


def project_backward(
    gset: GaussianSet,
    cam: Camera,
    proj: ProjectedSplats,
    d_mean2d: np.ndarray,
    d_cov2d: np.ndarray,
):
    """Chain screen-space gradients back to 3D Gaussian parameters.

    Args:
        d_mean2d: (N, 2) dL/d(pixel mean).
        d_cov2d: (N, 3) dL/d(a, b, c) with b the single shared
            off-diagonal parameter of the packed 2x2 covariance.

    Returns:
        dict with ``means``, ``log_scales``, ``quats`` gradient arrays;
        culled Gaussians receive zeros.
    """
    n = len(gset)
    if n == 0:
        return {
            "means": np.zeros((0, 3)),
            "log_scales": np.zeros((0, 3)),
            "quats": np.zeros((0, 4)),
        }
    w_rot = cam.rotation.T
    mask = proj.valid.astype(np.float64)
    d_mean2d = d_mean2d * mask[:, None]
    d_cov2d = d_cov2d * mask[:, None]

    # Full-matrix gradient of the 2x2 covariance; off-diagonal parameter b
    # appears in both slots, so each slot carries half of dL/db.
    g2 = np.empty((n, 2, 2), dtype=np.float64)
    g2[:, 0, 0] = d_cov2d[:, 0]
    g2[:, 0, 1] = 0.5 * d_cov2d[:, 1]
    g2[:, 1, 0] = 0.5 * d_cov2d[:, 1]
    g2[:, 1, 1] = d_cov2d[:, 2]

    # cov2d = M cov3d M^T (+ floor): gradients to cov3d and to M.
    d_cov3d = np.einsum("nji,njk,nkl->nil", proj.m, g2, proj.m)
    d_m = 2.0 * np.einsum("nij,njk,nkl->nil", g2, proj.m, proj.cov3d)
    d_jac = d_m @ w_rot.T

    # Pixel mean: mean2d = pinhole(p_cam); its Jacobian is exactly `jac`.
    d_pcam = np.einsum("nij,ni->nj", proj.jac, d_mean2d)

    # Jacobian entries depend on p_cam.
    x = proj.p_cam[:, 0]
    y = proj.p_cam[:, 1]
    z = np.where(proj.valid, proj.p_cam[:, 2], 1.0)
    inv_z2 = 1.0 / (z * z)
    inv_z3 = inv_z2 / z
    d_pcam[:, 0] += d_jac[:, 0, 2] * (-cam.fx * inv_z2)
    d_pcam[:, 1] += d_jac[:, 1, 2] * (-cam.fy * inv_z2)
    d_pcam[:, 2] += (
        d_jac[:, 0, 0] * (-cam.fx * inv_z2)
        + d_jac[:, 1, 1] * (-cam.fy * inv_z2)
        + d_jac[:, 0, 2] * (2.0 * cam.fx * x * inv_z3)
        + d_jac[:, 1, 2] * (2.0 * cam.fy * y * inv_z3)
    )
    d_means = (d_pcam * mask[:, None]) @ w_rot

    d_ls, d_q = covariance_backward(gset.log_scales, gset.quats, d_cov3d)
    return {
        "means": d_means,
        "log_scales": d_ls * mask[:, None],
        "quats": d_q * mask[:, None],
    }


def eval_alpha(opacity: float, cov2d: np.ndarray, delta: np.ndarray) -> float:
    """Blending weight of one splat at offset ``delta`` from its center.

    ``alpha = opacity * exp(-0.5 delta^T cov2d^{-1} delta)`` clamped to
    0.999; a singular covariance contributes nothing.
    """
    cov2d = np.asarray(cov2d, dtype=np.float64)
    det = cov2d[0, 0] * cov2d[1, 1] - cov2d[0, 1] * cov2d[1, 0]
    if det <= 1e-12:
        return 0.0
    dx, dy = float(delta[0]), float(delta[1])
    power = 0.5 * (
        cov2d[1, 1] * dx * dx - 2.0 * cov2d[0, 1] * dx * dy + cov2d[0, 0] * dy * dy
    ) / det
    return min(float(opacity) * float(np.exp(-power)), 0.999)


def view_directions(means: np.ndarray, cam: Camera):
    """Unit directions from the camera center to each Gaussian, with norms."""
    rel = means - cam.translation
    norms = np.linalg.norm(rel, axis=1, keepdims=True)
    safe = np.maximum(norms, 1e-12)
    return rel / safe, safe[:, 0]


def view_directions_backward(dirs, norms, d_dirs):
    """Backprop through the normalization of :func:`view_directions`."""
    proj = np.sum(d_dirs * dirs, axis=1, keepdims=True)
    return (d_dirs - proj * dirs) / norms[:, None]
