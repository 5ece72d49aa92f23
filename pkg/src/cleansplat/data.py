"""Datasets: synthetic scene generation, on-disk format, images, metrics.

The synthetic generator builds a known ground-truth Gaussian scene (a
foreground cluster inside an enclosing shell so every view is fully
covered), renders clean images with the package's own renderer, and then
stamps opaque ellipse sprites into a configurable fraction of views.
Sprites are unique per view, which is exactly the multi-view
inconsistency the decomposition is meant to absorb; their footprints are
kept as ground truth for mask quality checks.

The on-disk format is a JSON manifest (documented in the README) next to
8-bit PNGs and an optional ASCII PLY point cloud.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .cameras import Camera, look_at_camera
from .errors import DataError, UsageError
from .gaussians import GaussianSet, inverse_sigmoid
from .rasterizer import render_forward
from .sh import SH_C0


@dataclass
class Frame:
    camera: Camera
    image: np.ndarray                 # (H, W, 3) float in [0, 1]
    clean: np.ndarray | None = None   # distractor-free variant, same viewpoint
    sprite_mask: np.ndarray | None = None  # (H, W) bool ground-truth footprint
    name: str = ""


@dataclass
class Dataset:
    frames: list
    init_points: np.ndarray | None = None   # (M, 3)
    init_colors: np.ndarray | None = None   # (M, 3) in [0, 1]
    bbox: np.ndarray = field(default_factory=lambda: np.array([[-1.0] * 3, [1.0] * 3]))
    quantized: bool = False   # True when images round-tripped through 8-bit files

    def __len__(self):
        return len(self.frames)

    def scene_extent(self) -> float:
        """Camera-spread radius, the global scale for learning rates and ADC."""
        centers = np.stack([f.camera.translation for f in self.frames])
        mean = centers.mean(axis=0)
        radius = float(np.linalg.norm(centers - mean, axis=1).max())
        if radius < 1e-9:
            radius = float(np.linalg.norm(self.bbox[1] - self.bbox[0]) / 2.0)
        return radius * 1.1

    def validate(self):
        if not self.frames:
            raise DataError("dataset has no frames")
        h, w = self.frames[0].image.shape[:2]
        for f in self.frames:
            if f.image.shape[:2] != (h, w):
                raise DataError("all images in a dataset must share dimensions")
        if self.init_points is not None and len(self.init_points):
            lo, hi = self.bbox
            if np.any(self.init_points < lo - 1e-9) or np.any(self.init_points > hi + 1e-9):
                raise DataError("bounding box does not enclose the init points")


@dataclass
class SyntheticSpec:
    """Recipe for a synthetic clean/cluttered dataset with known ground truth."""

    n_gaussians: int = 260
    n_views: int = 40
    width: int = 64
    height: int = 64
    clutter_ratio: float = 1.0
    sprites_min: int = 1
    sprites_max: int = 3
    sprite_scale: float = 0.22   # max sprite semi-axis, fraction of image size
    orbit_radius: float = 4.0
    orbit_height: float = 1.2
    fov_deg: float = 50.0
    n_init_points: int = 400
    seed: int = 0

    def validate(self):
        if not 0.0 <= self.clutter_ratio <= 1.0:
            raise UsageError("clutter ratio must be in [0, 1]")
        for name in ("n_gaussians", "n_views", "width", "height", "n_init_points"):
            if getattr(self, name) <= 0:
                raise UsageError(f"{name} must be positive")
        if not 1 <= self.sprites_min <= self.sprites_max:
            raise UsageError("sprite count range invalid")


def _ground_truth_set(spec: SyntheticSpec, rng) -> GaussianSet:
    n_cluster = max(int(spec.n_gaussians * 0.55), 1)
    n_shell = max(spec.n_gaussians - n_cluster, 1)

    # Foreground cluster inside the camera orbit.
    c_means = rng.normal(0.0, 0.45, size=(n_cluster, 3))
    c_means[:, 2] *= 0.8
    c_scales = rng.uniform(np.log(0.05), np.log(0.16), size=(n_cluster, 3))
    # Enclosing shell outside the orbit: backdrop visible from every view.
    shell_dirs = rng.normal(size=(n_shell, 3))
    shell_dirs /= np.linalg.norm(shell_dirs, axis=1, keepdims=True)
    shell_r = spec.orbit_radius * 2.0
    s_means = shell_dirs * shell_r
    s_scales = rng.uniform(np.log(0.55 * shell_r / np.sqrt(n_shell) * 3.0),
                           np.log(1.1 * shell_r / np.sqrt(n_shell) * 3.0),
                           size=(n_shell, 3))

    means = np.concatenate([c_means, s_means], axis=0)
    log_scales = np.concatenate([c_scales, s_scales], axis=0)
    n = means.shape[0]
    quats = rng.normal(size=(n, 4))
    opacities = rng.uniform(0.7, 0.98, size=n)
    rgb = rng.uniform(0.08, 0.92, size=(n, 3))
    colors = np.zeros((n, 1, 3))
    colors[:, 0, :] = (rgb - 0.5) / SH_C0
    return GaussianSet(
        means=means,
        log_scales=log_scales,
        quats=quats,
        opacity_logits=inverse_sigmoid(opacities),
        colors=colors,
    )


def _orbit_cameras(spec: SyntheticSpec, rng) -> list:
    fx = 0.5 * spec.width / np.tan(np.deg2rad(spec.fov_deg) / 2.0)
    cams = []
    for i in range(spec.n_views):
        angle = 2.0 * np.pi * i / spec.n_views + rng.uniform(-0.02, 0.02)
        height = spec.orbit_height + rng.uniform(-0.3, 0.3)
        pos = np.array([
            spec.orbit_radius * np.cos(angle),
            spec.orbit_radius * np.sin(angle),
            height,
        ])
        cams.append(look_at_camera(pos, np.zeros(3), np.array([0.0, 0.0, 1.0]),
                                   fx=fx, fy=fx, width=spec.width, height=spec.height))
    return cams


def _stamp_sprites(image: np.ndarray, spec: SyntheticSpec, rng):
    """Overlay 1..k opaque random ellipses; returns (image, footprint mask)."""
    h, w = image.shape[:2]
    out = image.copy()
    mask = np.zeros((h, w), dtype=bool)
    xs, ys = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    n_sprites = rng.integers(spec.sprites_min, spec.sprites_max + 1)
    for _ in range(n_sprites):
        cx = rng.uniform(0.2, 0.8) * w
        cy = rng.uniform(0.2, 0.8) * h
        rx = rng.uniform(0.08, spec.sprite_scale) * w
        ry = rng.uniform(0.08, spec.sprite_scale) * h
        angle = rng.uniform(0.0, np.pi)
        color = rng.uniform(0.05, 0.95, size=3)
        ca, sa = np.cos(angle), np.sin(angle)
        u = (xs - cx) * ca + (ys - cy) * sa
        v = -(xs - cx) * sa + (ys - cy) * ca
        hit = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
        out[hit] = color
        mask |= hit
    return out, mask


def generate_synthetic(spec: SyntheticSpec):
    """Build the dataset and return it with its generating Gaussian model.

    Clean images are renders of the returned model (same code path as the
    engine), so the model is an exact oracle for them.  The first
    ``ceil(ratio * n_views)`` views of a seeded permutation receive
    sprites; with ratio 0 the cluttered images equal the clean ones
    bit for bit.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    gt = _ground_truth_set(spec, rng)
    cams = _orbit_cameras(spec, rng)

    n_clutter = int(np.ceil(spec.clutter_ratio * spec.n_views))
    cluttered_views = set(rng.permutation(spec.n_views)[:n_clutter].tolist())

    frames = []
    for i, cam in enumerate(cams):
        clean = render_forward(gt, cam)[0].color
        clean = np.clip(clean, 0.0, 1.0)
        if i in cluttered_views:
            image, mask = _stamp_sprites(clean, spec, rng)
        else:
            image, mask = clean.copy(), np.zeros(clean.shape[:2], dtype=bool)
        frames.append(Frame(camera=cam, image=image, clean=clean,
                            sprite_mask=mask, name=f"view_{i:04d}"))

    # Seed points: jittered samples of the true Gaussian centers.
    idx = rng.integers(0, len(gt), size=spec.n_init_points)
    jitter = rng.normal(0.0, 1.0, size=(spec.n_init_points, 3)) * np.exp(gt.log_scales[idx]) * 0.5
    pts = gt.means[idx] + jitter
    cols = np.clip(gt.colors[idx, 0, :] * SH_C0 + 0.5, 0.0, 1.0)

    all_pts = np.concatenate([pts, gt.means], axis=0)
    margin = 0.05 * (all_pts.max(axis=0) - all_pts.min(axis=0) + 1e-9)
    bbox = np.stack([all_pts.min(axis=0) - margin, all_pts.max(axis=0) + margin])
    ds = Dataset(frames=frames, init_points=pts, init_colors=cols, bbox=bbox)
    ds.validate()
    return ds, gt


# ---------------------------------------------------------------------------
# Image I/O and metrics


def write_png(path, image: np.ndarray):
    """Write a float image in [0, 1] as an 8-bit PNG (grayscale/RGB/RGBA)."""
    arr = np.asarray(image, dtype=np.float64)
    data = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    if data.ndim == 2:
        img = Image.fromarray(data, mode="L")
    elif data.shape[2] == 3:
        img = Image.fromarray(data, mode="RGB")
    elif data.shape[2] == 4:
        img = Image.fromarray(data, mode="RGBA")
    else:
        raise UsageError("write_png expects HxW, HxWx3 or HxWx4 data")
    img.save(str(path))


def read_png(path) -> np.ndarray:
    try:
        img = Image.open(str(path))
        img.load()
    except Exception as exc:
        raise DataError(f"unreadable image: {path}") from exc
    arr = np.asarray(img, dtype=np.float64) / 255.0
    return arr


def psnr(a: np.ndarray, b: np.ndarray, cap: float = 99.0) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images, capped for logs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise UsageError("psnr shape mismatch")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return cap
    return min(float(10.0 * np.log10(1.0 / mse)), cap)


def quantize(image: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid, the precision of on-disk reference images."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


# ---------------------------------------------------------------------------
# On-disk dataset format

MANIFEST_NAME = "manifest.json"


def _camera_to_entry(cam: Camera) -> dict:
    transform = np.eye(4)
    transform[:3, :3] = cam.rotation
    transform[:3, 3] = cam.translation
    return {
        "transform": transform.reshape(-1).tolist(),  # row-major camera-to-world
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "w": cam.width, "h": cam.height,
    }


def _camera_from_entry(entry: dict, name: str) -> Camera:
    transform = np.asarray(entry["transform"], dtype=np.float64)
    if transform.size != 16:
        raise DataError(f"frame {name}: transform must have 16 entries")
    transform = transform.reshape(4, 4)
    rot = transform[:3, :3]
    if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-3):
        raise DataError(f"frame {name}: non-rigid rotation in transform")
    if np.linalg.det(rot) < 0:
        raise DataError(f"frame {name}: rotation is a reflection")
    cam = Camera(
        fx=float(entry["fx"]), fy=float(entry["fy"]),
        cx=float(entry["cx"]), cy=float(entry["cy"]),
        width=int(entry["w"]), height=int(entry["h"]),
        rotation=rot, translation=transform[:3, 3],
    )
    cam.validate(tol=1e-3)
    return cam


def save_dataset(ds: Dataset, out_dir):
    """Write the manifest, images, and optional points file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for frame in ds.frames:
        entry = _camera_to_entry(frame.camera)
        entry["image"] = f"{frame.name}.png"
        write_png(out / entry["image"], frame.image)
        if frame.clean is not None:
            entry["clean"] = f"{frame.name}_clean.png"
            write_png(out / entry["clean"], frame.clean)
        if frame.sprite_mask is not None:
            entry["mask"] = f"{frame.name}_mask.png"
            write_png(out / entry["mask"], frame.sprite_mask.astype(np.float64))
        entries.append(entry)
    manifest = {
        "frames": entries,
        "bbox": ds.bbox.tolist(),
    }
    if ds.init_points is not None:
        manifest["points"] = "points.ply"
        write_ply(out / "points.ply", ds.init_points, ds.init_colors)
    with open(out / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_dataset(data_dir) -> Dataset:
    """Load a dataset directory; frames are ordered by image file name."""
    root = Path(data_dir)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise DataError(f"missing manifest: {manifest_path}")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed manifest: {exc}") from exc

    frames = []
    for entry in sorted(manifest.get("frames", []), key=lambda e: e["image"]):
        name = re.sub(r"\.png$", "", entry["image"])
        cam = _camera_from_entry(entry, name)
        image = read_png(root / entry["image"])
        if image.ndim == 2:
            image = np.repeat(image[:, :, None], 3, axis=2)
        image = image[:, :, :3]
        clean = None
        if "clean" in entry:
            clean = read_png(root / entry["clean"])[:, :, :3]
        mask = None
        if "mask" in entry:
            mask = read_png(root / entry["mask"]) > 0.5
        frames.append(Frame(camera=cam, image=image, clean=clean,
                            sprite_mask=mask, name=name))
    if not frames:
        raise DataError("manifest lists no frames")

    points = colors = None
    if "points" in manifest:
        points, colors = read_ply(root / manifest["points"])
    bbox = np.asarray(manifest.get("bbox", [[-1.0] * 3, [1.0] * 3]), dtype=np.float64)
    ds = Dataset(frames=frames, init_points=points, init_colors=colors,
                 bbox=bbox, quantized=True)
    ds.validate()
    return ds


def write_ply(path, points: np.ndarray, colors: np.ndarray | None = None):
    points = np.asarray(points, dtype=np.float64)
    if colors is None:
        colors = np.full((len(points), 3), 0.5)
    rgb = np.round(np.clip(colors, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(points)}\n")
        for axis in "xyz":
            fh.write(f"property float {axis}\n")
        for chan in ("red", "green", "blue"):
            fh.write(f"property uchar {chan}\n")
        fh.write("end_header\n")
        for p, c in zip(points, rgb):
            fh.write(f"{p[0]!r} {p[1]!r} {p[2]!r} {c[0]} {c[1]} {c[2]}\n")


def read_ply(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing points file: {path}")
    with open(path) as fh:
        line = fh.readline().strip()
        if line != "ply":
            raise DataError(f"not an ascii ply file: {path}")
        n_vertex = None
        while True:
            line = fh.readline()
            if not line:
                raise DataError(f"truncated ply header: {path}")
            line = line.strip()
            if line.startswith("element vertex"):
                n_vertex = int(line.split()[-1])
            if line == "end_header":
                break
        if n_vertex is None:
            raise DataError(f"ply header missing vertex count: {path}")
        pts = np.zeros((n_vertex, 3))
        cols = np.full((n_vertex, 3), 0.5)
        for i in range(n_vertex):
            parts = fh.readline().split()
            if len(parts) < 3:
                raise DataError(f"truncated ply data: {path}")
            pts[i] = [float(v) for v in parts[:3]]
            if len(parts) >= 6:
                cols[i] = [float(v) / 255.0 for v in parts[3:6]]
    return pts, cols
