"""Versioned binary checkpoint container.

Layout (all integers and floats little-endian, arrays as 32-bit floats):

    magic  8s   b"CSPLATCK"
    u32    format version (currently 1)
    u32    config length, then UTF-8 config text (TrainConfig format)
    f32    scene extent
    6xf32  scene bounding box (lo, hi)
    u32    global step
    u32    number of views, then u32 per-view train counts
    u32    number of cameras, then per camera: fx fy cx cy (4xf32),
           u32 width, u32 height, 12xf32 camera-to-world pose (row-major
           rotation then translation)
    static Gaussian block
    u32    number of transient sets, then per set (ascending view index):
           u32 view index + Gaussian block
    u8     appearance present; if 1: named-array dict + Adam dict
    u8     background present; if 1: named-array dict + Adam dict

A Gaussian block is: u8 color mode (0 SH / 1 RGB), u32 count, u32 SH
coefficients per channel (0 for RGB), the five parameter arrays in fixed
order (means, log_scales, quats, opacity_logits, colors), the per-key
Adam state (u64 step count + first/second moment arrays), and the three
density-control accumulators.  Named-array dicts are sorted by key, each
entry u16 key length + key + array, so identical states serialize to
identical bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .appearance import AppearanceModel, BackgroundModel
from .cameras import Camera
from .compositing import SceneModel
from .config import TrainConfig
from .density import DensifyStats
from .errors import DataError
from .gaussians import COLOR_RGB, COLOR_SH, GaussianSet, PARAM_KEYS
from .optim import AdamState

MAGIC = b"CSPLATCK"
VERSION = 1


def _write_array(fh, arr: np.ndarray):
    arr = np.asarray(arr)
    fh.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_array(fh) -> np.ndarray:
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4")
    return data.reshape(shape).astype(np.float64)


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise DataError("truncated checkpoint file")
    return data


def _write_named(fh, arrays: dict):
    keys = sorted(arrays)
    fh.write(struct.pack("<I", len(keys)))
    for key in keys:
        enc = key.encode()
        fh.write(struct.pack("<H", len(enc)))
        fh.write(enc)
        _write_array(fh, arrays[key])


def _read_named(fh) -> dict:
    (count,) = struct.unpack("<I", _read_exact(fh, 4))
    out = {}
    for _ in range(count):
        (klen,) = struct.unpack("<H", _read_exact(fh, 2))
        key = _read_exact(fh, klen).decode()
        out[key] = _read_array(fh)
    return out


def _write_adam(fh, adam: AdamState, keys):
    fh.write(struct.pack("<I", len(keys)))
    for key in keys:
        enc = key.encode()
        fh.write(struct.pack("<H", len(enc)))
        fh.write(enc)
        slot = adam.slots.get(key)
        if slot is None:
            fh.write(struct.pack("<Q", 0))
            _write_array(fh, np.zeros(0))
            _write_array(fh, np.zeros(0))
        else:
            fh.write(struct.pack("<Q", slot.step))
            _write_array(fh, slot.m)
            _write_array(fh, slot.v)


def _read_adam(fh) -> AdamState:
    (count,) = struct.unpack("<I", _read_exact(fh, 4))
    state = AdamState()
    for _ in range(count):
        (klen,) = struct.unpack("<H", _read_exact(fh, 2))
        key = _read_exact(fh, klen).decode()
        (step,) = struct.unpack("<Q", _read_exact(fh, 8))
        m = _read_array(fh)
        v = _read_array(fh)
        if m.size or step:
            slot = state.ensure(key, m.shape)
            slot.m, slot.v, slot.step = m, v, step
    return state


def _write_set(fh, gset: GaussianSet, adam: AdamState, stats: DensifyStats):
    mode = 0 if gset.color_mode == COLOR_SH else 1
    k = gset.colors.shape[1] if gset.color_mode == COLOR_SH else 0
    fh.write(struct.pack("<BII", mode, len(gset), k))
    for key in PARAM_KEYS:
        _write_array(fh, getattr(gset, key))
    _write_adam(fh, adam, PARAM_KEYS)
    _write_array(fh, stats.grad_accum)
    _write_array(fh, stats.count)
    _write_array(fh, stats.max_radius)


def _read_set(fh):
    mode, n, k = struct.unpack("<BII", _read_exact(fh, 9))
    arrays = {key: _read_array(fh) for key in PARAM_KEYS}
    gset = GaussianSet(color_mode=COLOR_SH if mode == 0 else COLOR_RGB, **arrays)
    adam = _read_adam(fh)
    stats = DensifyStats(
        grad_accum=_read_array(fh), count=_read_array(fh), max_radius=_read_array(fh)
    )
    return gset, adam, stats


def _write_camera(fh, cam: Camera):
    fh.write(struct.pack("<ffff", cam.fx, cam.fy, cam.cx, cam.cy))
    fh.write(struct.pack("<II", cam.width, cam.height))
    fh.write(np.ascontiguousarray(cam.rotation, dtype="<f4").tobytes())
    fh.write(np.ascontiguousarray(cam.translation, dtype="<f4").tobytes())


def _read_camera(fh) -> Camera:
    fx, fy, cx, cy = struct.unpack("<ffff", _read_exact(fh, 16))
    width, height = struct.unpack("<II", _read_exact(fh, 8))
    rot = np.frombuffer(_read_exact(fh, 36), dtype="<f4").reshape(3, 3).astype(np.float64)
    trans = np.frombuffer(_read_exact(fh, 12), dtype="<f4").astype(np.float64)
    return Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height,
                  rotation=rot, translation=trans)


@dataclass
class CheckpointData:
    """Everything a training run needs to persist."""

    model: SceneModel
    config: TrainConfig
    scene_extent: float
    bbox: np.ndarray
    global_step: int
    view_counts: np.ndarray
    cameras: list = field(default_factory=list)
    adam_static: AdamState = field(default_factory=AdamState)
    adam_distractors: dict = field(default_factory=dict)
    adam_appearance: AdamState = field(default_factory=AdamState)
    adam_background: AdamState = field(default_factory=AdamState)
    stats_static: DensifyStats = field(default_factory=lambda: DensifyStats.zeros(0))
    stats_distractors: dict = field(default_factory=dict)


def save_checkpoint(path, data: CheckpointData):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        cfg = data.config.to_text().encode()
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<f", data.scene_extent))
        fh.write(np.asarray(data.bbox, dtype="<f4").tobytes())
        fh.write(struct.pack("<I", data.global_step))
        fh.write(struct.pack("<I", len(data.view_counts)))
        fh.write(np.asarray(data.view_counts, dtype="<u4").tobytes())
        fh.write(struct.pack("<I", len(data.cameras)))
        for cam in data.cameras:
            _write_camera(fh, cam)

        _write_set(fh, data.model.static_set, data.adam_static, data.stats_static)

        views = sorted(data.model.distractor_sets)
        fh.write(struct.pack("<I", len(views)))
        for view in views:
            fh.write(struct.pack("<I", view))
            _write_set(
                fh,
                data.model.distractor_sets[view],
                data.adam_distractors.get(view, AdamState()),
                data.stats_distractors.get(view, DensifyStats.zeros(0)),
            )

        app = data.model.appearance
        fh.write(struct.pack("<B", 1 if app is not None else 0))
        if app is not None:
            _write_named(fh, app.params())
            _write_array(fh, app.bbox)
            _write_adam(fh, data.adam_appearance, sorted(app.params()))

        bg = data.model.background
        fh.write(struct.pack("<B", 1 if bg is not None else 0))
        if bg is not None:
            _write_named(fh, bg.params())
            _write_adam(fh, data.adam_background, sorted(bg.params()))


def load_checkpoint(path) -> CheckpointData:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing checkpoint: {path}")
    with open(path, "rb") as fh:
        if _read_exact(fh, 8) != MAGIC:
            raise DataError(f"not a checkpoint file: {path}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4))
        config = TrainConfig.from_text(_read_exact(fh, cfg_len).decode())
        (extent,) = struct.unpack("<f", _read_exact(fh, 4))
        bbox = np.frombuffer(_read_exact(fh, 24), dtype="<f4").reshape(2, 3).astype(np.float64)
        (global_step,) = struct.unpack("<I", _read_exact(fh, 4))
        (n_views,) = struct.unpack("<I", _read_exact(fh, 4))
        view_counts = np.frombuffer(_read_exact(fh, 4 * n_views), dtype="<u4").astype(np.int64)
        (n_cams,) = struct.unpack("<I", _read_exact(fh, 4))
        cameras = [_read_camera(fh) for _ in range(n_cams)]

        static_set, adam_static, stats_static = _read_set(fh)
        (n_sets,) = struct.unpack("<I", _read_exact(fh, 4))
        distractor_sets = {}
        adam_distractors = {}
        stats_distractors = {}
        for _ in range(n_sets):
            (view,) = struct.unpack("<I", _read_exact(fh, 4))
            gset, adam, stats = _read_set(fh)
            distractor_sets[view] = gset
            adam_distractors[view] = adam
            stats_distractors[view] = stats

        appearance = None
        adam_appearance = AdamState()
        (present,) = struct.unpack("<B", _read_exact(fh, 1))
        if present:
            params = _read_named(fh)
            app_bbox = _read_array(fh)
            rng = np.random.default_rng(0)
            appearance = AppearanceModel(
                n_images=params["image_embeds"].shape[0],
                positions=np.zeros((params["gauss_embeds"].shape[0], 3)),
                bbox=app_bbox,
                rng=rng,
                embed_dim=params["image_embeds"].shape[1],
                gauss_embed_dim=params["gauss_embeds"].shape[1],
            )
            appearance.set_params(params)
            adam_appearance = _read_adam(fh)

        background = None
        adam_background = AdamState()
        (present,) = struct.unpack("<B", _read_exact(fh, 1))
        if present:
            params = _read_named(fh)
            background = BackgroundModel(np.random.default_rng(0),
                                         embed_dim=params["enc.w0"].shape[0])
            background.set_params(params)
            adam_background = _read_adam(fh)

    model = SceneModel(
        static_set=static_set,
        distractor_sets=distractor_sets,
        appearance=appearance,
        background=background,
    )
    return CheckpointData(
        model=model,
        config=config,
        scene_extent=float(extent),
        bbox=bbox,
        global_step=int(global_step),
        view_counts=view_counts,
        cameras=cameras,
        adam_static=adam_static,
        adam_distractors=adam_distractors,
        adam_appearance=adam_appearance,
        adam_background=adam_background,
        stats_static=stats_static,
        stats_distractors=stats_distractors,
    )
