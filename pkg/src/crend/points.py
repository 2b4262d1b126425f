"""Uncertainty-biased point selection and differentiable point sampling.

Points live in normalized patch coordinates ``[0, 1]^3`` with corner-aligned
convention: coordinate ``u`` on an axis of ``n`` voxels sits at voxel index
``u * (n - 1)``. Grids of different resolution (the full-size coarse map and
the half-size fine map) therefore share their corner voxels exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

SOURCE_UNCERTAIN = "uncertain"
SOURCE_UNIFORM = "uniform"


@dataclass
class SelectionConfig:
    k: float = 2
    beta: float = 0.7
    n_points: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.n_points < 1:
            raise ValueError(f"n_points must be >= 1, got {self.n_points}")

    @property
    def n_candidates(self) -> int:
        return max(self.n_points, int(round(self.k * self.n_points)))

    @property
    def n_uncertain(self) -> int:
        return int(math.floor(self.beta * self.n_points))


@dataclass
class PointBatch:
    coords: np.ndarray            # (N, 3) float64 in [0, 1]
    source: np.ndarray            # (N,) of SOURCE_UNCERTAIN / SOURCE_UNIFORM
    candidates: np.ndarray        # (kN, 3) seeded candidate set
    candidate_scores: np.ndarray  # (kN,) uncertainty at each candidate
    labels: np.ndarray | None = None
    bucket: np.ndarray | None = None

    def __len__(self):
        return len(self.coords)

    @property
    def uncertain_coords(self) -> np.ndarray:
        return self.coords[self.source == SOURCE_UNCERTAIN]


def uncertainty(probs):
    """Distance to 0.5 of the least confident channel; 0 is maximally
    uncertain, 0.5 fully confident. Works on the last axis."""
    if isinstance(probs, torch.Tensor):
        return (probs - 0.5).abs().min(dim=-1).values
    probs = np.asarray(probs, dtype=np.float64)
    return np.abs(probs - 0.5).min(axis=-1)


def sample_map_at(feature_map, coords):
    """Trilinear interpolation of a ``(C, D1, D2, D3)`` map at ``(N, 3)``
    normalized coordinates, returning ``(N, C)``.

    Coordinates outside ``[0, 1]`` are clamped to the boundary. Torch inputs
    stay differentiable with respect to the map values.
    """
    as_numpy = not isinstance(feature_map, torch.Tensor)
    fmap = torch.as_tensor(feature_map)
    if fmap.dim() != 4:
        raise ValueError(f"expected a (C, D1, D2, D3) map, got {tuple(fmap.shape)}")
    dtype = fmap.dtype if fmap.is_floating_point() else torch.float64
    fmap = fmap.to(dtype)
    pts = torch.as_tensor(np.asarray(coords) if not isinstance(coords, torch.Tensor) else coords)
    pts = pts.to(device=fmap.device, dtype=torch.float64).clamp(0.0, 1.0)
    channels, *size = fmap.shape
    size_t = torch.tensor(size, dtype=torch.float64, device=fmap.device)
    pos = pts * (size_t - 1)
    lo = pos.floor().long()
    lo = torch.minimum(lo, (size_t - 2).clamp(min=0).long())
    hi = torch.minimum(lo + 1, (size_t - 1).long())
    frac = (pos - lo.to(torch.float64)).to(dtype)

    flat = fmap.reshape(channels, -1)
    strides = (size[1] * size[2], size[2], 1)
    out = 0
    for corner in range(8):
        bits = [(corner >> (2 - a)) & 1 for a in range(3)]
        idx = 0
        weight = 1
        for a, bit in enumerate(bits):
            idx = idx + (hi[:, a] if bit else lo[:, a]) * strides[a]
            weight = weight * (frac[:, a] if bit else 1 - frac[:, a])
        out = out + flat[:, idx] * weight
    out = out.t()
    return out.detach().numpy() if as_numpy else out


def coords_to_voxels(coords: np.ndarray, shape) -> np.ndarray:
    """Nearest voxel index of each normalized coordinate."""
    scale = np.asarray(shape, dtype=np.float64) - 1
    idx = np.rint(np.clip(coords, 0.0, 1.0) * scale).astype(np.int64)
    return idx


def voxels_to_coords(idx: np.ndarray, shape) -> np.ndarray:
    scale = np.maximum(np.asarray(shape, dtype=np.float64) - 1, 1.0)
    return np.asarray(idx, dtype=np.float64) / scale


def select_points(coarse, cfg: SelectionConfig) -> PointBatch:
    """Pick ``N`` points: the ``floor(beta N)`` most uncertain of ``kN``
    seeded uniform candidates plus ``N - floor(beta N)`` fresh uniform draws.

    Ties in uncertainty keep candidate order, so selection is fully
    determined by the seed.
    """
    if isinstance(coarse, torch.Tensor):
        coarse = coarse.detach()
    if min(np.shape(coarse)) < 1:
        raise ValueError("coarse map is empty")
    rng = np.random.default_rng(cfg.seed)
    candidates = rng.random((cfg.n_candidates, 3))
    probs = sample_map_at(torch.as_tensor(np.asarray(coarse), dtype=torch.float64), candidates)
    scores = uncertainty(probs).numpy()
    order = np.argsort(scores, kind="stable")
    n_unc = cfg.n_uncertain
    uncertain = candidates[order[:n_unc]]
    uniform = rng.random((cfg.n_points - n_unc, 3))
    coords = np.concatenate([uncertain, uniform], axis=0)
    source = np.array([SOURCE_UNCERTAIN] * n_unc + [SOURCE_UNIFORM] * (cfg.n_points - n_unc))
    return PointBatch(coords, source, candidates, scores)


def labels_at(target: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Nearest-voxel ground truth ``(N, C)`` for a ``(C, D1, D2, D3)`` target."""
    target = np.asarray(target)
    idx = coords_to_voxels(coords, target.shape[1:])
    return target[:, idx[:, 0], idx[:, 1], idx[:, 2]].T.copy()
