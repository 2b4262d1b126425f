"""Hybrid point features and the shared-MLP rendering head."""
from __future__ import annotations

import torch
from torch import nn

from .points import sample_map_at

EPS = 1e-7


class RenderingHead(nn.Module):
    """One-hidden-layer MLP applied independently to every point."""

    def __init__(self, in_features: int = 98, hidden_width: int = 256, n_classes: int = 2):
        super().__init__()
        self.in_features = in_features
        self.hidden = nn.Linear(in_features, hidden_width)
        self.out = nn.Linear(hidden_width, n_classes)

    def forward(self, hybrid: torch.Tensor) -> torch.Tensor:
        """Per-point logits, shape ``(N, n_classes)``."""
        return self.out(torch.relu(self.hidden(hybrid)))

    def render(self, hybrid: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self(hybrid))


def render(hybrid: torch.Tensor, head: RenderingHead) -> torch.Tensor:
    """Re-predicted per-point probabilities."""
    return head.render(hybrid)


def build_hybrid(coarse: torch.Tensor, fine: torch.Tensor, coords) -> torch.Tensor:
    """Concatenate the coarse probabilities and fine features sampled at the
    same normalized coordinates. ``coarse`` is ``(2, D1, D2, D3)`` and
    ``fine`` ``(96, D1/2, D2/2, D3/2)``; the result is ``(N, 98)``."""
    if coarse.dim() != 4 or fine.dim() != 4:
        raise ValueError("build_hybrid expects unbatched (C, D1, D2, D3) maps")
    if coarse.shape[0] != 2 or fine.shape[0] != 96:
        raise ValueError(
            f"expected 2 coarse and 96 fine channels, got {coarse.shape[0]} and {fine.shape[0]}"
        )
    return torch.cat([sample_map_at(coarse, coords), sample_map_at(fine, coords)], dim=1)


def rendering_loss(preds: torch.Tensor, labels: torch.Tensor, eps: float = EPS) -> tuple[torch.Tensor, int]:
    """Binary cross-entropy summed over points and both channels.

    Returns ``(loss_sum, n_points)``; predictions are clamped to
    ``[eps, 1 - eps]`` before taking logs.
    """
    if preds.shape != labels.shape:
        raise ValueError(f"prediction shape {tuple(preds.shape)} != label shape {tuple(labels.shape)}")
    if torch.isnan(preds).any():
        raise FloatingPointError("rendering head produced NaN predictions")
    p = preds.clamp(eps, 1.0 - eps)
    y = labels.to(p.dtype)
    loss = -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).sum()
    return loss, int(preds.shape[0])
