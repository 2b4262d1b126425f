"""Whole-volume prediction with sliding windows and point refinement."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .points import SelectionConfig, coords_to_voxels, sample_map_at, select_points
from .training import load_checkpoint
from .volume import LabelMask, Volume, make_patch_grid, pad_to, stitch


@dataclass
class Prediction:
    probs: np.ndarray               # (2, D1, D2, D3) float32
    mask: LabelMask
    refined_voxels: np.ndarray      # (M, 3) voxel indices overwritten by the rendering head
    coarse_probs: np.ndarray | None = None  # stitched map before refinement


def _forward(model, patch: np.ndarray):
    with torch.no_grad():
        out = model(torch.from_numpy(np.ascontiguousarray(patch, dtype=np.float32))[None, None])
    return out.probs[0], out.fine[0]


def default_n_points(shape) -> int:
    return max(1, int(np.prod(shape)) // 256)


def predict_volume(checkpoint, v: Volume, refine: bool = True, n_points: int | None = None, k: float = 2, seed: int = 0, overlap: float = 0.5) -> Prediction:
    """Predict a whole volume.

    ``checkpoint`` is a path or a ``(model, head, train_config)`` triple.
    Patches overlap by ``overlap`` and are averaged. With ``refine`` the
    ``n_points`` most uncertain of ``k * n_points`` seeded candidates are
    snapped to voxels and re-predicted by the rendering head from the
    stitched probabilities plus the fine features of the patch whose center
    is nearest; only those voxels change.
    """
    if isinstance(checkpoint, (tuple, list)):
        model, head, cfg = checkpoint
    else:
        model, head, cfg, _ = load_checkpoint(checkpoint)
    model.eval()
    head.eval()
    patch_size = tuple(cfg.patch_size)
    data, crop = pad_to(v.data.astype(np.float32), patch_size)
    grid = make_patch_grid(data.shape, patch_size, overlap)
    outputs = []
    for origin in grid.origins:
        probs, _ = _forward(model, data[grid.slices(origin)])
        outputs.append((origin, probs.numpy()))
    stitched = stitch(outputs, data.shape)
    coarse = stitched[(slice(None),) + crop].copy()
    probs = coarse.copy()

    refined = np.zeros((0, 3), dtype=np.int64)
    if refine:
        n = n_points or default_n_points(v.shape)
        pts = select_points(coarse, SelectionConfig(k=k, beta=1.0, n_points=n, seed=seed))
        refined = np.unique(coords_to_voxels(pts.coords, v.shape), axis=0)
        offset = np.array([c.start for c in crop])
        padded = refined + offset
        owner = _serving_patch(padded, grid)
        values = np.zeros((len(refined), 2), dtype=np.float32)
        for gi in np.unique(owner):
            sel = np.flatnonzero(owner == gi)
            origin = np.array(grid.origins[gi])
            _, fine = _forward(model, data[grid.slices(grid.origins[gi])])
            local = (padded[sel] - origin) / (np.array(patch_size) - 1.0)
            fine_vec = sample_map_at(fine, local)
            idx = refined[sel]
            coarse_vec = torch.from_numpy(coarse[:, idx[:, 0], idx[:, 1], idx[:, 2]].T.copy())
            with torch.no_grad():
                values[sel] = head.render(torch.cat([coarse_vec, fine_vec], dim=1)).numpy()
        probs[:, refined[:, 0], refined[:, 1], refined[:, 2]] = values.T

    return Prediction(probs, threshold(probs, v.spacing), refined, coarse)


def _serving_patch(voxels: np.ndarray, grid) -> np.ndarray:
    """Index of the containing patch with the nearest center, per voxel."""
    origins = np.asarray(grid.origins, dtype=np.float64)
    size = np.asarray(grid.patch_size, dtype=np.float64)
    centers = origins + (size - 1) / 2.0
    v = voxels[:, None, :].astype(np.float64)
    inside = np.all((v >= origins[None]) & (v < origins[None] + size), axis=2)
    dist = np.sum((v - centers[None]) ** 2, axis=2)
    dist[~inside] = np.inf
    return np.argmin(dist, axis=1)


def threshold(probs: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> LabelMask:
    ovary = probs[1] > 0.5
    follicle = (probs[0] > 0.5) & ovary
    return LabelMask(follicle, ovary, spacing)
