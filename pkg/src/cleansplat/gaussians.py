"""Parameter store and geometry primitives for anisotropic 3D Gaussians.

A :class:`GaussianSet` keeps one struct-of-arrays block of Gaussian
parameters in the raw (unconstrained) domain used by the optimizer:
scales are stored as logarithms, opacities as logits, and quaternions are
normalized on use.  Colors are either a spherical-harmonic coefficient
block (shared static scene) or plain RGB vectors (per-view transient
layers).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Iteration order for parameter dictionaries; fixed so optimizer state,
# checkpoints and gradient reductions are deterministic.
PARAM_KEYS = ("means", "log_scales", "quats", "opacity_logits", "colors")

COLOR_SH = "sh"
COLOR_RGB = "rgb"


def sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inverse_sigmoid(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


def normalize_quats(quats):
    """Return unit quaternions; raises on (near-)zero input.

    Raw quaternions drift off the unit sphere during optimization and are
    re-normalized at every use site.
    """
    quats = np.asarray(quats, dtype=np.float64)
    norms = np.linalg.norm(quats, axis=-1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ValueError("degenerate quaternion")
    return quats / norms


def quat_to_rotation(quats):
    """Convert quaternions (w, x, y, z) to rotation matrices.

    Accepts a single 4-vector or an (N, 4) batch; the input is normalized
    first.  Returns (3, 3) or (N, 3, 3).
    """
    q = np.asarray(quats, dtype=np.float64)
    single = q.ndim == 1
    q = normalize_quats(np.atleast_2d(q))
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    r[:, 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    r[:, 0, 1] = 2.0 * (x * y - w * z)
    r[:, 0, 2] = 2.0 * (x * z + w * y)
    r[:, 1, 0] = 2.0 * (x * y + w * z)
    r[:, 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    r[:, 1, 2] = 2.0 * (y * z - w * x)
    r[:, 2, 0] = 2.0 * (x * z - w * y)
    r[:, 2, 1] = 2.0 * (y * z + w * x)
    r[:, 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return r[0] if single else r


def rotation_quat_backward(quats, d_rot):
    """Backpropagate rotation-matrix gradients to raw quaternions.

    ``d_rot`` is dL/dR with shape (N, 3, 3); the chain includes the
    normalization step, so the result is a gradient with respect to the
    raw (unnormalized) quaternions.
    """
    q_raw = np.asarray(quats, dtype=np.float64)
    norms = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    q = q_raw / norms
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = np.asarray(d_rot, dtype=np.float64)

    # dL/dq_hat_k = sum_ij g_ij * dR_ij/dq_hat_k, expanded entrywise.
    dq = np.empty_like(q)
    dq[:, 0] = 2.0 * (
        -z * g[:, 0, 1] + y * g[:, 0, 2]
        + z * g[:, 1, 0] - x * g[:, 1, 2]
        - y * g[:, 2, 0] + x * g[:, 2, 1]
    )
    dq[:, 1] = 2.0 * (
        y * g[:, 0, 1] + z * g[:, 0, 2]
        + y * g[:, 1, 0] - 2.0 * x * g[:, 1, 1] - w * g[:, 1, 2]
        + z * g[:, 2, 0] + w * g[:, 2, 1] - 2.0 * x * g[:, 2, 2]
    )
    dq[:, 2] = 2.0 * (
        -2.0 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2]
        + x * g[:, 1, 0] + z * g[:, 1, 2]
        - w * g[:, 2, 0] + z * g[:, 2, 1] - 2.0 * y * g[:, 2, 2]
    )
    dq[:, 3] = 2.0 * (
        -2.0 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2]
        + w * g[:, 1, 0] - 2.0 * z * g[:, 1, 1] + y * g[:, 1, 2]
        + x * g[:, 2, 0] + y * g[:, 2, 1]
    )
    # Through the normalization: dq_raw = (I - q q^T) dq_hat / |q_raw|.
    proj = np.sum(dq * q, axis=1, keepdims=True)
    return (dq - proj * q) / norms


def build_covariance(log_scales, quats):
    """World-space covariance R diag(s^2) R^T from log-scales and quaternions.

    Accepts single vectors or (N, 3)/(N, 4) batches.
    """
    ls = np.asarray(log_scales, dtype=np.float64)
    single = ls.ndim == 1
    ls = np.atleast_2d(ls)
    rot = quat_to_rotation(np.atleast_2d(np.asarray(quats, dtype=np.float64)))
    s2 = np.exp(2.0 * ls)
    cov = np.einsum("nij,nj,nkj->nik", rot, s2, rot)
    return cov[0] if single else cov


def covariance_backward(log_scales, quats, d_cov):
    """Backpropagate dL/dSigma (N, 3, 3, symmetric) to log-scales and quats."""
    ls = np.atleast_2d(np.asarray(log_scales, dtype=np.float64))
    q = np.atleast_2d(np.asarray(quats, dtype=np.float64))
    rot = quat_to_rotation(q)
    s2 = np.exp(2.0 * ls)
    g = 0.5 * (d_cov + np.transpose(d_cov, (0, 2, 1)))

    rtgr = np.einsum("nji,njk,nkl->nil", rot, g, rot)
    d_ls = 2.0 * s2 * np.einsum("nii->ni", rtgr)
    # dL/dR = 2 G R D with D = diag(s^2).
    d_rot = 2.0 * np.einsum("nij,njk,nk->nik", g, rot, s2)
    d_q = rotation_quat_backward(q, d_rot)
    return d_ls, d_q


@dataclass
class GaussianSet:
    """Struct-of-arrays store for one set of 3D Gaussians.

    Attributes:
        means: (N, 3) world positions.
        log_scales: (N, 3) log of per-axis standard deviations.
        quats: (N, 4) rotations (w, x, y, z), normalized on use.
        opacity_logits: (N,) opacity in logit space.
        colors: (N, K, 3) SH coefficients when ``color_mode == "sh"``
            (K = (degree+1)^2), else (N, 3) plain RGB kept inside [0, 1].
        color_mode: ``"sh"`` or ``"rgb"``.
    """

    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    color_mode: str = COLOR_SH

    def __post_init__(self):
        for key in PARAM_KEYS:
            setattr(self, key, np.ascontiguousarray(getattr(self, key), dtype=np.float64))

    def __len__(self):
        return self.means.shape[0]

    @property
    def sh_degree(self) -> int:
        if self.color_mode != COLOR_SH:
            raise ValueError("RGB set has no SH degree")
        return int(round(np.sqrt(self.colors.shape[1]))) - 1

    def scales(self):
        return np.exp(self.log_scales)

    def opacities(self):
        return sigmoid(self.opacity_logits)

    def params(self) -> dict:
        """Live views of the raw parameter arrays, in fixed key order."""
        return {key: getattr(self, key) for key in PARAM_KEYS}

    def set_params(self, params: dict):
        for key in PARAM_KEYS:
            setattr(self, key, np.ascontiguousarray(params[key], dtype=np.float64))

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            means=self.means.copy(),
            log_scales=self.log_scales.copy(),
            quats=self.quats.copy(),
            opacity_logits=self.opacity_logits.copy(),
            colors=self.colors.copy(),
            color_mode=self.color_mode,
        )

    def validate(self):
        """Check the structural invariants; raises ValueError on violation."""
        n = len(self)
        if self.means.shape != (n, 3) or self.log_scales.shape != (n, 3):
            raise ValueError("means/log_scales shape mismatch")
        if self.quats.shape != (n, 4) or self.opacity_logits.shape != (n,):
            raise ValueError("quats/opacity_logits shape mismatch")
        for key in PARAM_KEYS:
            if not np.all(np.isfinite(getattr(self, key))):
                raise ValueError(f"non-finite values in {key}")
        if n and np.any(np.linalg.norm(self.quats, axis=1) < 1e-12):
            raise ValueError("degenerate quaternion")
        if self.color_mode == COLOR_RGB:
            if self.colors.shape != (n, 3):
                raise ValueError("rgb colors must be (N, 3)")
            if n and (self.colors.min() < 0.0 or self.colors.max() > 1.0):
                raise ValueError("rgb colors out of [0, 1]")
        elif self.color_mode == COLOR_SH:
            if self.colors.ndim != 3 or self.colors.shape[2] != 3:
                raise ValueError("sh colors must be (N, K, 3)")
            k = self.colors.shape[1]
            deg = int(round(np.sqrt(k))) - 1
            if (deg + 1) ** 2 != k or deg > 3:
                raise ValueError("sh block must have (degree+1)^2 <= 16 coefficients")
        else:
            raise ValueError(f"unknown color mode {self.color_mode!r}")


def empty_set(color_mode=COLOR_SH, sh_degree=3) -> GaussianSet:
    k = (sh_degree + 1) ** 2
    colors = np.zeros((0, k, 3)) if color_mode == COLOR_SH else np.zeros((0, 3))
    return GaussianSet(
        means=np.zeros((0, 3)),
        log_scales=np.zeros((0, 3)),
        quats=np.zeros((0, 4)),
        opacity_logits=np.zeros((0,)),
        colors=colors,
        color_mode=color_mode,
    )
