"""Volume and label containers, the ``.cvol`` file format, resampling and
sliding-window patch utilities.

A ``.cvol`` file is a single UTF-8 JSON header line followed by the raw
little-endian, C-ordered payload::

    {"dims": [d1, d2, d3], "spacing": [s1, s2, s3], "dtype": "f32", "order": "C"}\\n
    <d1*d2*d3 * itemsize bytes>

Label files use ``"dtype": "u8"`` with values 0 (background), 1 (ovary only)
and 2 (follicle, which implies ovary).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}

BACKGROUND, OVARY, FOLLICLE = 0, 1, 2


class CvolFormatError(ValueError):
    """Malformed ``.cvol`` header."""


class CvolCorruptionError(ValueError):
    """Payload size does not match the header."""


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValueError(f"volume dims must be >= 1, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass
class LabelMask:
    follicle: np.ndarray
    ovary: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.follicle = np.asarray(self.follicle).astype(bool)
        self.ovary = np.asarray(self.ovary).astype(bool)
        if self.follicle.shape != self.ovary.shape or self.follicle.ndim != 3:
            raise ValueError("follicle and ovary masks must be 3D with equal shapes")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.follicle.shape)

    def to_label_map(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=np.uint8)
        out[self.ovary] = OVARY
        out[self.follicle] = FOLLICLE
        return out

    @classmethod
    def from_label_map(cls, labels: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> "LabelMask":
        labels = np.asarray(labels)
        return cls(labels == FOLLICLE, labels >= OVARY, spacing)

    def to_channels(self) -> np.ndarray:
        """(2, D1, D2, D3) float32 target, channel 0 follicle, channel 1 ovary."""
        return np.stack([self.follicle, self.ovary]).astype(np.float32)


# --------------------------------------------------------------------------
# file IO


def save_cvol(path, data: np.ndarray, spacing: Sequence[float]) -> Path:
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValueError(f"cvol payload must be 3D, got shape {data.shape}")
    if data.dtype == np.uint8 or data.dtype == bool:
        dtype_name = "u8"
    else:
        dtype_name = "f32"
    payload = np.ascontiguousarray(data.astype(_DTYPES[dtype_name], copy=False))
    header = {
        "dims": [int(d) for d in data.shape],
        "spacing": [float(s) for s in spacing],
        "dtype": dtype_name,
        "order": "C",
    }
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(payload.tobytes(order="C"))
    return path


def read_cvol(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Read the raw payload and spacing without any normalization."""
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise CvolFormatError(f"{path}: missing header terminator")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CvolFormatError(f"{path}: header is not valid JSON") from exc
    try:
        dims = [int(d) for d in header["dims"]]
        spacing = tuple(float(s) for s in header["spacing"])
        dtype = _DTYPES[header["dtype"]]
        order = header.get("order", "C")
    except (KeyError, TypeError, ValueError) as exc:
        raise CvolFormatError(f"{path}: bad header {header!r}") from exc
    if len(dims) != 3 or len(spacing) != 3 or order != "C" or min(dims) < 1:
        raise CvolFormatError(f"{path}: bad header {header!r}")
    payload = raw[newline + 1:]
    expected = math.prod(dims) * dtype.itemsize
    if len(payload) != expected:
        raise CvolCorruptionError(
            f"{path}: payload has {len(payload)} bytes, header implies {expected}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    return data, spacing


def normalize_minmax(data: np.ndarray) -> np.ndarray:
    data = np.asarray(data, dtype=np.float32)
    lo, hi = float(data.min()), float(data.max())
    if hi <= lo:
        return np.zeros_like(data)
    return ((data - lo) / (hi - lo)).astype(np.float32)


def load_volume(path) -> Volume:
    data, spacing = read_cvol(path)
    return Volume(normalize_minmax(data), spacing)


def save_volume(path, v: Volume) -> Path:
    return save_cvol(path, v.data.astype(np.float32), v.spacing)


def load_labels(path) -> LabelMask:
    data, spacing = read_cvol(path)
    return LabelMask.from_label_map(data, spacing)


def save_labels(path, m: LabelMask) -> Path:
    return save_cvol(path, m.to_label_map(), m.spacing)


# --------------------------------------------------------------------------
# resampling


def _resize_array(data: np.ndarray, out_shape: Sequence[int], order: int) -> np.ndarray:
    in_shape = data.shape
    if tuple(out_shape) == tuple(in_shape):
        return data.copy()
    # corner-aligned grid: first and last samples coincide with the input's
    axes = [
        np.linspace(0.0, n_in - 1.0, n_out) if n_out > 1 else np.array([(n_in - 1) / 2.0])
        for n_in, n_out in zip(in_shape, out_shape)
    ]
    grid = np.meshgrid(*axes, indexing="ij")
    out = ndimage.map_coordinates(
        data.astype(np.float64), grid, order=order, mode="nearest", prefilter=False
    )
    return out.astype(data.dtype) if order == 0 else out.astype(np.float32)


def resample(v, target_spacing: Sequence[float], mode: str = "trilinear"):
    """Resample a Volume (``trilinear``) or LabelMask (``nearest``) to a new
    voxel spacing. Output dims are ``round(dim * spacing / target)``, min 1."""
    target = tuple(float(t) for t in target_spacing)
    if len(target) != 3 or any(t <= 0 for t in target):
        raise ValueError(f"target spacing must be positive, got {target_spacing}")
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown resampling mode {mode!r}")
    out_shape = tuple(
        max(1, int(round(d * s / t))) for d, s, t in zip(v.shape, v.spacing, target)
    )
    return _resize_to(v, out_shape, target, mode)


def resize_inplane(v, inplane: Sequence[int] = (192, 192), mode: str = "trilinear"):
    """Resize the first two axes to ``inplane`` and scale the third by the
    mean in-plane factor, updating spacing so physical extent is kept."""
    f1, f2 = inplane[0] / v.shape[0], inplane[1] / v.shape[1]
    d3 = max(1, int(round(v.shape[2] * (f1 + f2) / 2.0)))
    out_shape = (int(inplane[0]), int(inplane[1]), d3)
    spacing = tuple(s * d / o for s, d, o in zip(v.spacing, v.shape, out_shape))
    return _resize_to(v, out_shape, spacing, mode)


def _resize_to(v, out_shape, spacing, mode):
    order = 1 if mode == "trilinear" else 0
    if isinstance(v, LabelMask):
        labels = _resize_array(v.to_label_map(), out_shape, order=0)
        return LabelMask.from_label_map(labels, spacing)
    data = v.data
    if order == 0:
        return Volume(_resize_array(data, out_shape, 0), spacing)
    return Volume(_resize_array(data.astype(np.float32), out_shape, 1), spacing)


# --------------------------------------------------------------------------
# patches


@dataclass
class PatchGrid:
    shape: tuple[int, int, int]
    patch_size: tuple[int, int, int]
    stride: tuple[int, int, int]
    origins: list[tuple[int, int, int]] = field(default_factory=list)

    def slices(self, origin) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + p) for o, p in zip(origin, self.patch_size))

    def __len__(self):
        return len(self.origins)


def _axis_starts(n: int, p: int, stride: int) -> list[int]:
    starts = list(range(0, n - p + 1, stride))
    if starts[-1] + p < n:
        starts.append(n - p)  # clamp the last patch inward
    return starts


def make_patch_grid(shape, patch_size, overlap_fraction: float = 0.5) -> PatchGrid:
    shape = tuple(int(s) for s in shape)
    patch_size = tuple(int(p) for p in patch_size)
    if not 0.0 <= overlap_fraction < 1.0:
        raise ValueError(f"overlap_fraction must lie in [0, 1), got {overlap_fraction}")
    if any(p > s for p, s in zip(patch_size, shape)):
        raise ValueError(f"patch {patch_size} larger than volume {shape}; pad first")
    stride = tuple(max(1, int(math.floor(p * (1.0 - overlap_fraction)))) for p in patch_size)
    starts = [_axis_starts(n, p, t) for n, p, t in zip(shape, patch_size, stride)]
    origins = [(a, b, c) for a in starts[0] for b in starts[1] for c in starts[2]]
    return PatchGrid(shape, patch_size, stride, origins)


def stitch(patch_outputs: Iterable[tuple[Sequence[int], np.ndarray]], shape) -> np.ndarray:
    """Average overlapping patch predictions with uniform weights.

    Patches are ``(origin, array)`` with array shape ``(C, p1, p2, p3)``.
    """
    acc = None
    count = np.zeros(tuple(shape), dtype=np.float64)
    for origin, patch in patch_outputs:
        patch = np.asarray(patch, dtype=np.float64)
        if acc is None:
            acc = np.zeros((patch.shape[0],) + tuple(shape), dtype=np.float64)
        sl = tuple(slice(o, o + p) for o, p in zip(origin, patch.shape[1:]))
        acc[(slice(None),) + sl] += patch
        count[sl] += 1.0
    if acc is None or np.any(count == 0):
        raise RuntimeError("patch grid does not cover every voxel")
    return (acc / count).astype(np.float32)


def pad_to(data: np.ndarray, min_shape, value: float = 0.0):
    """Zero-pad the last three axes symmetrically up to ``min_shape``.

    Returns the padded array and the crop slices that undo the padding.
    """
    spatial = data.shape[-3:]
    pads, crop = [], []
    for n, m in zip(spatial, min_shape):
        extra = max(0, int(m) - n)
        before = extra // 2
        pads.append((before, extra - before))
        crop.append(slice(before, before + n))
    lead = [(0, 0)] * (data.ndim - 3)
    if all(p == (0, 0) for p in pads):
        return data, tuple(crop)
    return np.pad(data, lead + pads, mode="constant", constant_values=value), tuple(crop)
