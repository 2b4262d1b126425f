"""Point-wise contrastive loss over confidence buckets of hybrid features.

For each class, anchors are high-confidence points of that class. Their
positives are the uncertain points of the same class and their negatives
the high-confidence points of the other class::

    pos_i = sum_k exp(cos(h_i, l_k))      neg_i = sum_k exp(cos(h_i, q_k))
    loss  = gamma + mean_i(-log(pos_i / neg_i))

``literal_sign=True`` switches to ``gamma - mean_i(-log(pos_i / neg_i))``,
which rewards pushing positives apart and is kept only for comparison.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

FOLLICLE_HIGH = "high_conf_follicle"
OVARY_HIGH = "high_conf_ovary"
FOLLICLE_UNCERTAIN = "uncertain_follicle"
OVARY_UNCERTAIN = "uncertain_ovary"
OTHER = "other"


@dataclass
class ContrastConfig:
    high_conf_threshold: float = 0.9
    uncertain_band: float = 0.1
    gamma: float = 2.0
    max_pairs: int = 64
    seed: int = 0
    literal_sign: bool = False

    def __post_init__(self):
        if not 0.5 < self.high_conf_threshold < 1.0:
            raise ValueError("high_conf_threshold must lie in (0.5, 1)")
        if not np.isfinite(self.gamma):
            raise ValueError("gamma must be finite")
        if self.max_pairs < 1:
            raise ValueError("max_pairs must be >= 1")


@dataclass
class PointBuckets:
    follicle_high: np.ndarray
    follicle_uncertain: np.ndarray
    ovary_high: np.ndarray
    ovary_uncertain: np.ndarray
    tags: np.ndarray  # per-point bucket name

    def sizes(self) -> dict:
        return {
            FOLLICLE_HIGH: len(self.follicle_high),
            FOLLICLE_UNCERTAIN: len(self.follicle_uncertain),
            OVARY_HIGH: len(self.ovary_high),
            OVARY_UNCERTAIN: len(self.ovary_uncertain),
        }


def cosine_sim(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(p) * np.linalg.norm(q)
    if norm == 0:
        return 0.0
    return float(np.clip(p @ q / norm, -1.0, 1.0))


def partition_points(probs, cfg: ContrastConfig, labels=None) -> PointBuckets:
    """Assign each point to at most one bucket.

    Without ``labels`` membership comes from the coarse ``(follicle, ovary)``
    probabilities alone, checked in the order follicle high, follicle
    uncertain, ovary high, ovary uncertain. Follicles sit inside the ovary, so
    a point on a follicle boundary is usually also confident ovary; checking
    the follicle channel first keeps such points in the follicle buckets.

    With per-point ground-truth ``labels`` ``(N, 2)`` the class is taken from
    the labels (follicle, or ovary-only; background points are excluded) and
    the probabilities only decide confidence: uncertain if any channel is
    within ``uncertain_band`` of 0.5, high if the prediction confidently
    agrees with the class.
    """
    if isinstance(probs, torch.Tensor):
        probs = probs.detach().cpu().numpy()
    probs = np.asarray(probs, dtype=np.float64).reshape(-1, 2)
    pf, po = probs[:, 0], probs[:, 1]
    thr, band = cfg.high_conf_threshold, cfg.uncertain_band
    tags = np.full(len(probs), OTHER, dtype=object)
    if labels is None:
        rules = [
            (FOLLICLE_HIGH, pf > thr),
            (FOLLICLE_UNCERTAIN, np.abs(pf - 0.5) < band),
            (OVARY_HIGH, po > thr),
            (OVARY_UNCERTAIN, np.abs(po - 0.5) < band),
        ]
    else:
        labels = np.asarray(labels).reshape(-1, 2) > 0.5
        is_follicle = labels[:, 0]
        is_ovary = labels[:, 1] & ~labels[:, 0]
        uncertain = np.abs(probs - 0.5).min(axis=1) < band
        rules = [
            (FOLLICLE_UNCERTAIN, is_follicle & uncertain),
            (OVARY_UNCERTAIN, is_ovary & uncertain),
            (FOLLICLE_HIGH, is_follicle & (pf > thr)),
            (OVARY_HIGH, is_ovary & (po > thr) & (pf < 1.0 - thr)),
        ]
    for name, hit in rules:
        tags[(tags == OTHER) & hit] = name
    idx = {name: np.flatnonzero(tags == name) for name, _ in rules}
    return PointBuckets(
        idx[FOLLICLE_HIGH], idx[FOLLICLE_UNCERTAIN], idx[OVARY_HIGH], idx[OVARY_UNCERTAIN],
        tags.astype(str),
    )


def _unit(x: torch.Tensor) -> torch.Tensor:
    norm = x.norm(dim=1, keepdim=True)
    safe = torch.where(norm > 0, norm, torch.ones_like(norm))
    return torch.where(norm > 0, x / safe, torch.zeros_like(x))


def _subsample(idx: np.ndarray, cap: int, rng: np.random.Generator) -> np.ndarray:
    if len(idx) <= cap:
        return idx
    return np.sort(rng.choice(idx, size=cap, replace=False))


def anchor_terms(features: torch.Tensor, buckets: PointBuckets, cfg: ContrastConfig) -> torch.Tensor:
    """Per-anchor ``-log(pos_i / neg_i)`` over both classes, follicle first."""
    rng = np.random.default_rng(cfg.seed)
    groups = [
        (buckets.follicle_high, buckets.follicle_uncertain, buckets.ovary_high),
        (buckets.ovary_high, buckets.ovary_uncertain, buckets.follicle_high),
    ]
    unit = _unit(features)
    terms = []
    for anchors, positives, negatives in groups:
        if len(anchors) == 0 or len(positives) == 0 or len(negatives) == 0:
            continue
        anchors = _subsample(anchors, cfg.max_pairs, rng)
        a = unit[torch.as_tensor(anchors)]
        log_pos = torch.logsumexp(a @ unit[torch.as_tensor(positives)].t(), dim=1)
        log_neg = torch.logsumexp(a @ unit[torch.as_tensor(negatives)].t(), dim=1)
        terms.append(log_neg - log_pos)
    if not terms:
        return features.new_zeros(0)
    return torch.cat(terms)


def contrastive_loss(features: torch.Tensor, buckets: PointBuckets, cfg: ContrastConfig) -> tuple[torch.Tensor, bool]:
    """Return ``(loss, skipped)``. ``skipped`` is True, and the loss exactly
    zero, when no class has anchors, positives and negatives at once."""
    if torch.isnan(features).any():
        raise FloatingPointError("NaN in contrastive features")
    terms = anchor_terms(features, buckets, cfg)
    if terms.numel() == 0:
        return features.sum() * 0.0, True
    mean_term = terms.mean()
    if cfg.literal_sign:
        return cfg.gamma - mean_term, False
    return cfg.gamma + mean_term, False
