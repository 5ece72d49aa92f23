"""Per-image appearance modelling and the learned environment background.

Exposure and illumination changes between captures are absorbed by a
small MLP that maps a per-image embedding, a per-Gaussian embedding, and
the Gaussian's base color to an affine color modulation (shift and
positive scale).  A second MLP predicts degree-4 spherical-harmonic
coefficients of an environment background from the per-image embedding
alone.  Both networks are plain dense ReLU stacks with hand-written
backward passes so the whole pipeline stays analytically differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cameras import Camera
from .errors import UsageError
from .gaussians import sigmoid
from .sh import sh_basis

IMAGE_EMBED_DIM = 32
GAUSS_EMBED_DIM = 24
FOURIER_COMPONENTS = 4
HIDDEN = 128
BACKGROUND_SH_DEGREE = 4


def fourier_features(positions: np.ndarray, bbox: np.ndarray) -> np.ndarray:
    """Multi-frequency sine/cosine features of box-normalized positions.

    Coordinates are normalized to [0, 1] inside ``bbox`` ((2, 3) lo/hi);
    each coordinate contributes ``sin(2^k pi t), cos(2^k pi t)`` for
    k = 0..3, giving 24 features per point.
    """
    p = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    lo, hi = np.asarray(bbox[0], dtype=np.float64), np.asarray(bbox[1], dtype=np.float64)
    span = np.maximum(hi - lo, 1e-12)
    t = (p - lo) / span
    feats = np.empty((p.shape[0], 3 * FOURIER_COMPONENTS * 2), dtype=np.float64)
    col = 0
    for axis in range(3):
        for k in range(FOURIER_COMPONENTS):
            arg = (2.0 ** k) * np.pi * t[:, axis]
            feats[:, col] = np.sin(arg)
            feats[:, col + 1] = np.cos(arg)
            col += 2
    return feats


class Mlp:
    """Dense ReLU network with explicit forward/backward.

    Parameters are exposed as a flat dict (``w0``, ``b0``, ...) so the
    optimizer and checkpoints treat them like any other array block.
    """

    def __init__(self, sizes, rng, zero_last=False, head_scale=0.01):
        self.sizes = list(sizes)
        self.weights = []
        self.biases = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            if last and zero_last:
                w = np.zeros((fan_in, fan_out))
            elif last:
                w = rng.normal(0.0, head_scale, size=(fan_in, fan_out))
            else:
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            self.weights.append(np.ascontiguousarray(w, dtype=np.float64))
            self.biases.append(np.zeros(fan_out, dtype=np.float64))

    def params(self) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    def set_params(self, params: dict):
        for i in range(len(self.weights)):
            self.weights[i] = np.ascontiguousarray(params[f"w{i}"], dtype=np.float64)
            self.biases[i] = np.ascontiguousarray(params[f"b{i}"], dtype=np.float64)

    def forward(self, x: np.ndarray):
        acts = [np.atleast_2d(np.asarray(x, dtype=np.float64))]
        h = acts[0]
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < n_layers - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, acts, d_out):
        """Returns (param grads dict, dL/dx)."""
        grads = {}
        d_h = np.asarray(d_out, dtype=np.float64)
        n_layers = len(self.weights)
        for i in range(n_layers - 1, -1, -1):
            if i < n_layers - 1:
                d_h = d_h * (acts[i + 1] > 0.0)
            grads[f"w{i}"] = acts[i].T @ d_h
            grads[f"b{i}"] = d_h.sum(axis=0)
            d_h = d_h @ self.weights[i].T
        return grads, d_h


@dataclass
class ToneCache:
    x: object
    acts: object
    gamma: np.ndarray
    base_colors: np.ndarray
    n: int
    view_index: int


class AppearanceModel:
    """Per-image and per-Gaussian embeddings plus the toning MLP."""

    def __init__(self, n_images, positions, bbox, rng,
                 embed_dim=IMAGE_EMBED_DIM, gauss_embed_dim=GAUSS_EMBED_DIM):
        self.embed_dim = embed_dim
        self.gauss_embed_dim = gauss_embed_dim
        self.bbox = np.asarray(bbox, dtype=np.float64).copy()
        self.image_embeds = np.zeros((n_images, embed_dim), dtype=np.float64)
        self.gauss_embeds = fourier_features(positions, self.bbox)
        if self.gauss_embeds.shape[1] != gauss_embed_dim:
            raise UsageError("gaussian embedding dim must match the Fourier feature size")
        self.mlp = Mlp([embed_dim + gauss_embed_dim + 3, HIDDEN, HIDDEN, 6], rng, zero_last=True)

    def params(self) -> dict:
        out = {"image_embeds": self.image_embeds, "gauss_embeds": self.gauss_embeds}
        for key, val in self.mlp.params().items():
            out[f"mlp.{key}"] = val
        return out

    def set_params(self, params: dict):
        self.image_embeds = np.ascontiguousarray(params["image_embeds"], dtype=np.float64)
        self.gauss_embeds = np.ascontiguousarray(params["gauss_embeds"], dtype=np.float64)
        self.mlp.set_params({k[4:]: v for k, v in params.items() if k.startswith("mlp.")})

    def resize_gaussians(self, keep_mask: np.ndarray, new_positions: np.ndarray):
        """Track densification: children get fresh Fourier features."""
        new_rows = fourier_features(new_positions, self.bbox) if len(new_positions) else \
            np.zeros((0, self.gauss_embed_dim))
        self.gauss_embeds = np.concatenate([self.gauss_embeds[keep_mask], new_rows], axis=0)

    def tone(self, base_colors, dc_coeffs, embedding, view_index=-1):
        """Affine color modulation gamma * c + beta per Gaussian.

        ``base_colors`` are the view-evaluated RGB values, ``dc_coeffs``
        the 0th-order SH coefficients used as MLP input.  ``gamma`` is
        exponentiated so it stays positive, and a zeroed head makes the
        initial modulation exactly the identity.
        """
        n = base_colors.shape[0]
        e = np.repeat(np.asarray(embedding, dtype=np.float64)[None, :], n, axis=0)
        x = np.concatenate([e, self.gauss_embeds[:n], dc_coeffs], axis=1)
        out, acts = self.mlp.forward(x)
        beta = out[:, :3]
        gamma = np.exp(out[:, 3:])
        toned = gamma * base_colors + beta
        return toned, ToneCache(x=x, acts=acts, gamma=gamma, base_colors=base_colors,
                                n=n, view_index=view_index)

    def tone_backward(self, cache: ToneCache, d_toned):
        """Gradients of :meth:`tone` w.r.t. everything it touched.

        Returns (param_grads, d_base_colors, d_dc, d_embedding).
        """
        d_toned = np.asarray(d_toned, dtype=np.float64)
        d_beta = d_toned
        d_gamma_raw = d_toned * cache.base_colors * cache.gamma
        d_out = np.concatenate([d_beta, d_gamma_raw], axis=1)
        mlp_grads, d_x = self.mlp.backward(cache.acts, d_out)
        d_e = d_x[:, : self.embed_dim].sum(axis=0)
        d_z = d_x[:, self.embed_dim: self.embed_dim + self.gauss_embed_dim]
        d_dc = d_x[:, self.embed_dim + self.gauss_embed_dim:]
        d_base = d_toned * cache.gamma

        grads = {"gauss_embeds": d_z}
        for key, val in mlp_grads.items():
            grads[f"mlp.{key}"] = val
        return grads, d_base, d_dc, d_e


@dataclass
class BackgroundCache:
    acts: object
    basis: np.ndarray
    pre_sigmoid: np.ndarray
    shape: tuple


class BackgroundModel:
    """Environment background: embedding -> degree-4 SH -> per-pixel color.

    The encoder is shared; the 0th-order coefficients and the remaining
    orders come from separate heads because they train at different
    rates.  Colors are squashed with a sigmoid to stay in [0, 1].
    """

    N_COEFFS = (BACKGROUND_SH_DEGREE + 1) ** 2

    def __init__(self, rng, embed_dim=IMAGE_EMBED_DIM):
        self.embed_dim = embed_dim
        self.encoder = Mlp([embed_dim, HIDDEN, HIDDEN, HIDDEN], rng)
        self.head_dc = Mlp([HIDDEN, 3], rng)
        self.head_rest = Mlp([HIDDEN, (self.N_COEFFS - 1) * 3], rng)

    def params(self) -> dict:
        out = {}
        for prefix, mlp in (("enc", self.encoder), ("dc", self.head_dc), ("rest", self.head_rest)):
            for key, val in mlp.params().items():
                out[f"{prefix}.{key}"] = val
        return out

    def set_params(self, params: dict):
        for prefix, mlp in (("enc", self.encoder), ("dc", self.head_dc), ("rest", self.head_rest)):
            mlp.set_params({k[len(prefix) + 1:]: v for k, v in params.items()
                            if k.startswith(prefix + ".")})

    def sh_coefficients(self, embedding):
        h, acts_enc = self.encoder.forward(embedding[None, :])
        # The encoder output feeds both heads after its own ReLU.
        feat = np.maximum(h, 0.0)
        dc, acts_dc = self.head_dc.forward(feat)
        rest, acts_rest = self.head_rest.forward(feat)
        coeffs = np.concatenate([dc.reshape(1, 3), rest.reshape(self.N_COEFFS - 1, 3)], axis=0)
        return coeffs, (acts_enc, acts_dc, acts_rest, h)

    def color(self, cam: Camera, embedding):
        """Render the background for a camera; returns (image, cache)."""
        coeffs, acts = self.sh_coefficients(np.asarray(embedding, dtype=np.float64))
        dirs = cam.ray_directions().reshape(-1, 3)
        basis = sh_basis(dirs, BACKGROUND_SH_DEGREE)
        pre = basis @ coeffs
        img = sigmoid(pre).reshape(cam.height, cam.width, 3)
        return img, BackgroundCache(acts=acts, basis=basis, pre_sigmoid=pre,
                                    shape=(cam.height, cam.width))

    def backward(self, cache: BackgroundCache, d_img):
        """Returns (param_grads, d_embedding)."""
        d_pre = np.asarray(d_img, dtype=np.float64).reshape(-1, 3)
        sig = sigmoid(cache.pre_sigmoid)
        d_pre = d_pre * sig * (1.0 - sig)
        d_coeffs = cache.basis.T @ d_pre
        acts_enc, acts_dc, acts_rest, h = cache.acts

        dc_grads, d_feat_dc = self.head_dc.backward(acts_dc, d_coeffs[0].reshape(1, 3))
        rest_grads, d_feat_rest = self.head_rest.backward(
            acts_rest, d_coeffs[1:].reshape(1, -1))
        d_h = (d_feat_dc + d_feat_rest) * (h > 0.0)
        enc_grads, d_e = self.encoder.backward(acts_enc, d_h)

        grads = {}
        for prefix, g in (("enc", enc_grads), ("dc", dc_grads), ("rest", rest_grads)):
            for key, val in g.items():
                grads[f"{prefix}.{key}"] = val
        return grads, d_e[0]
