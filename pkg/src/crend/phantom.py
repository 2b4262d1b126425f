"""Synthetic ovary/follicle phantoms with blurred, speckled boundaries."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import LabelMask, Volume, normalize_minmax, save_labels, save_volume

_CONNECT26 = np.ones((3, 3, 3), dtype=bool)

BACKGROUND_LEVEL = 0.35
OVARY_LEVEL = 0.75
FOLLICLE_LEVEL = 0.08


class PlacementError(RuntimeError):
    def __init__(self, requested: int, achieved: int):
        super().__init__(
            f"could only place {achieved} of {requested} follicles without overlap"
        )
        self.requested = requested
        self.achieved = achieved


@dataclass
class PhantomSpec:
    volume_dims: tuple[int, int, int] = (32, 32, 16)
    spacing: tuple[float, float, float] = (0.5, 0.5, 0.5)
    n_follicles: tuple[int, int] = (2, 4)
    follicle_radius_mm: tuple[float, float] = (1.2, 2.2)
    ovary_axes_mm: tuple[float, float] = (5.0, 7.0)
    speckle_strength: float = 0.3
    boundary_blur_sigma: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.volume_dims = tuple(int(d) for d in self.volume_dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.n_follicles = tuple(int(n) for n in self.n_follicles)
        self.follicle_radius_mm = tuple(float(r) for r in self.follicle_radius_mm)
        self.ovary_axes_mm = tuple(float(a) for a in self.ovary_axes_mm)
        self.validate()

    def validate(self):
        if len(self.volume_dims) != 3 or min(self.volume_dims) < 1:
            raise ValueError(f"volume_dims must be three positive ints, got {self.volume_dims}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        lo, hi = self.n_follicles
        if lo < 0 or hi < lo:
            raise ValueError(f"n_follicles range invalid: {self.n_follicles}")
        for name in ("follicle_radius_mm", "ovary_axes_mm"):
            lo, hi = getattr(self, name)
            if lo <= 0 or hi < lo:
                raise ValueError(f"{name} range invalid: {(lo, hi)}")
        if not 0.0 <= self.speckle_strength < 1.0:
            raise ValueError("speckle_strength must lie in [0, 1)")
        if self.boundary_blur_sigma < 0:
            raise ValueError("boundary_blur_sigma must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def _physical_grid(dims, spacing):
    axes = [(np.arange(n) + 0.5) * s for n, s in zip(dims, spacing)]
    return np.meshgrid(*axes, indexing="ij")


def _ellipsoid(grid, center, axes, angle):
    """Boolean ellipsoid rotated by ``angle`` in the plane of the first two axes."""
    x, y, z = (g - c for g, c in zip(grid, center))
    ca, sa = np.cos(angle), np.sin(angle)
    u = ca * x + sa * y
    v = -sa * x + ca * y
    return (u / axes[0]) ** 2 + (v / axes[1]) ** 2 + (z / axes[2]) ** 2 <= 1.0


def generate_phantom(spec: PhantomSpec, max_retries: int = 1000) -> tuple[Volume, LabelMask]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    dims, spacing = spec.volume_dims, spec.spacing
    grid = _physical_grid(dims, spacing)
    extent = np.array(dims) * np.array(spacing)

    ovary_axes = rng.uniform(*spec.ovary_axes_mm, size=3)
    # keep the ovary inside the field of view with a one-voxel margin
    ovary_axes = np.minimum(ovary_axes, extent / 2.0 - np.array(spacing))
    ovary_axes = np.maximum(ovary_axes, np.array(spacing))
    center = extent / 2.0 + rng.uniform(-0.5, 0.5, size=3) * np.array(spacing)
    ovary = _ellipsoid(grid, center, ovary_axes, rng.uniform(0.0, np.pi))

    n_target = int(rng.integers(spec.n_follicles[0], spec.n_follicles[1] + 1))
    follicle = np.zeros(dims, dtype=bool)
    blocked = np.zeros(dims, dtype=bool)
    inside = np.argwhere(ovary)
    for placed in range(n_target):
        for _ in range(max_retries):
            radius = rng.uniform(*spec.follicle_radius_mm)
            axes = radius * rng.uniform(0.85, 1.15, size=3)
            c = (inside[rng.integers(len(inside))] + 0.5) * np.array(spacing)
            cand = _ellipsoid(grid, c, axes, rng.uniform(0.0, np.pi))
            if not cand.any() or not np.all(ovary[cand]) or np.any(blocked[cand]):
                continue
            if count_components(cand) != 1:
                continue
            follicle |= cand
            # keep instances apart so 26-connected components stay distinct
            blocked |= ndimage.binary_dilation(cand, structure=_CONNECT26)
            break
        else:
            raise PlacementError(n_target, placed)

    image = np.full(dims, BACKGROUND_LEVEL, dtype=np.float64)
    image[ovary] = OVARY_LEVEL
    image[follicle] = FOLLICLE_LEVEL
    if spec.boundary_blur_sigma > 0:
        sigma = [spec.boundary_blur_sigma / s for s in spacing]
        image = ndimage.gaussian_filter(image, sigma=sigma, mode="nearest")
    u = rng.random(dims)
    image = image * (1.0 + spec.speckle_strength * (2.0 * u - 1.0))
    image = normalize_minmax(image)
    return Volume(image, spacing), LabelMask(follicle, ovary, spacing)


def count_components(mask: np.ndarray) -> int:
    return int(ndimage.label(mask, structure=_CONNECT26)[1])


def generate_dataset(spec: PhantomSpec, n_volumes: int, out_dir) -> dict:
    """Write ``n_volumes`` image/label ``.cvol`` pairs and ``manifest.json``.

    Volume ``i`` uses seed ``spec.seed + i``. Paths in the manifest are
    relative to ``out_dir``.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out_dir}: {exc}") from exc
    entries = []
    for i in range(int(n_volumes)):
        seed = spec.seed + i
        vol, mask = generate_phantom(replace(spec, seed=seed))
        image_name, label_name = f"vol_{i:03d}_image.cvol", f"vol_{i:03d}_label.cvol"
        try:
            save_volume(out_dir / image_name, vol)
            save_labels(out_dir / label_name, mask)
        except OSError as exc:
            raise OSError(f"failed writing volume {i} to {out_dir}: {exc}") from exc
        entries.append({
            "image": image_name,
            "label": label_name,
            "seed": seed,
            "n_follicles": count_components(mask.follicle),
        })
    manifest = {"volumes": entries, "spec": asdict(spec)}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def load_manifest(path) -> tuple[dict, Path]:
    """Return the manifest and the directory its relative paths resolve from."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    return json.loads(path.read_text()), path.parent
