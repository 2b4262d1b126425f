"""Training: augmentation, the three-term objective, Adam loop, checkpoints
and the JSON-lines loss log."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .backbone import BackboneConfig, SegmentorBackbone
from .contrastive import ContrastConfig, contrastive_loss, partition_points
from .points import SelectionConfig, labels_at, select_points
from .rendering import RenderingHead, build_hybrid, rendering_loss
from .volume import LabelMask, Volume, load_labels, load_volume, pad_to

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "crend-checkpoint/1"


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambda1: float = 0.8
    lambda2: float = 0.2
    lr: float = 1e-4
    batch_size: int = 1
    epochs: int = 150
    rotation_degrees: float = 30.0
    patch_size: tuple[int, int, int] = (192, 192, 128)
    seed: int = 0
    checkpoint_dir: str | None = None
    keep_checkpoints: int = 2
    deterministic: bool = True
    # backbone / heads
    base_channels: int = 32
    hidden_width: int = 256
    # point selection
    n_points: int = 18432
    k: float = 2
    beta: float = 0.7
    # contrastive
    gamma: float = 2.0
    high_conf_threshold: float = 0.9
    uncertain_band: float = 0.1
    max_pairs: int = 64
    literal_sign: bool = False
    label_buckets: bool = False
    # gradient multiplier for the point losses flowing back into the backbone
    aux_grad_scale: float = 1.0

    def __post_init__(self):
        self.patch_size = tuple(int(p) for p in self.patch_size)
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size != 1:
            raise ValueError("only batch_size=1 is supported")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 <= self.aux_grad_scale <= 1.0:
            raise ValueError("aux_grad_scale must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch_size"] = list(self.patch_size)
        return d

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(base_channels=self.base_channels)

    def selection_config(self, seed: int) -> SelectionConfig:
        return SelectionConfig(k=self.k, beta=self.beta, n_points=self.n_points, seed=seed)

    def contrast_config(self, seed: int) -> ContrastConfig:
        return ContrastConfig(
            high_conf_threshold=self.high_conf_threshold,
            uncertain_band=self.uncertain_band,
            gamma=self.gamma,
            max_pairs=self.max_pairs,
            seed=seed,
            literal_sign=self.literal_sign,
        )


FULL_PROFILE = TrainConfig()
# Desk-scale profile. At this size the unscaled point-loss gradients swamp the
# tiny backbone, so they reach it at a tenth of their strength.
TOY_PROFILE = TrainConfig(
    patch_size=(32, 32, 16), base_channels=4, n_points=512, epochs=10, lr=3e-3,
    aux_grad_scale=0.1,
)
PROFILES = {"full": FULL_PROFILE, "toy": TOY_PROFILE}


def total_loss(loss_ori, loss_r, loss_c, cfg: TrainConfig):
    """``loss_ori + lambda1 * loss_r + lambda2 * loss_c``."""
    for name, value in (("loss_ori", loss_ori), ("loss_r", loss_r), ("loss_c", loss_c)):
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise FloatingPointError(f"{name} is not finite ({v})")
    return loss_ori + cfg.lambda1 * loss_r + cfg.lambda2 * loss_c


def augment_rotation(v: Volume, m: LabelMask, angle_deg: float) -> tuple[Volume, LabelMask]:
    """Rotate about the third axis (in the plane of the first two), with
    linear interpolation for intensities, nearest for labels and zero fill."""
    if angle_deg == 0:
        return Volume(v.data.copy(), v.spacing), LabelMask(m.follicle.copy(), m.ovary.copy(), m.spacing)
    data = ndimage.rotate(
        v.data, angle_deg, axes=(0, 1), reshape=False, order=1, mode="constant", cval=0.0
    )
    labels = ndimage.rotate(
        m.to_label_map(), angle_deg, axes=(0, 1), reshape=False, order=0, mode="constant", cval=0
    )
    return Volume(data.astype(np.float32), v.spacing), LabelMask.from_label_map(labels, m.spacing)


class _ScaleGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return grad * ctx.scale, None


def scale_grad(x: torch.Tensor, scale: float) -> torch.Tensor:
    """Identity in the forward pass; multiplies the gradient by ``scale``."""
    if scale == 1.0:
        return x
    return _ScaleGrad.apply(x, scale)


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def random_patch(image: np.ndarray, target: np.ndarray, patch_size, rng: np.random.Generator):
    """Pad to at least ``patch_size`` then crop one random patch."""
    image, _ = pad_to(image, patch_size)
    target, _ = pad_to(target, patch_size)
    origin = [int(rng.integers(0, n - p + 1)) for n, p in zip(image.shape, patch_size)]
    sl = tuple(slice(o, o + p) for o, p in zip(origin, patch_size))
    return image[sl], target[(slice(None),) + sl]


def build_models(cfg: TrainConfig) -> tuple[SegmentorBackbone, RenderingHead]:
    torch.manual_seed(cfg.seed)
    model = SegmentorBackbone(cfg.backbone_config())
    bcfg = model.cfg
    head = RenderingHead(bcfg.n_classes + bcfg.fine_channels, cfg.hidden_width, bcfg.n_classes)
    return model, head


@dataclass
class StepLosses:
    total: torch.Tensor
    loss_ori: torch.Tensor
    loss_r: torch.Tensor
    loss_c: torch.Tensor
    skipped_contrastive: bool
    points: object = None


def compute_losses(model, head, image: torch.Tensor, target: torch.Tensor, cfg: TrainConfig, point_seed: int, coords=None, buckets=None) -> StepLosses:
    """Forward one patch and evaluate every loss term.

    ``image`` is ``(D1, D2, D3)``, ``target`` ``(2, D1, D2, D3)``. ``coords``
    and ``buckets`` may be fixed from outside (used by gradient checks);
    otherwise they are drawn with ``point_seed``.
    """
    out = model(image[None, None])
    coarse, fine, logits = out.probs[0], out.fine[0], out.logits[0]
    loss_ori = F.binary_cross_entropy_with_logits(logits, target)
    zero = loss_ori.new_zeros(())
    loss_r, loss_c, skipped, pts = zero, zero, False, None
    if cfg.lambda1 > 0 or cfg.lambda2 > 0:
        if coords is None:
            pts = select_points(coarse.detach(), cfg.selection_config(point_seed))
            coords = pts.coords
        g = cfg.aux_grad_scale
        hybrid = build_hybrid(scale_grad(coarse, g), scale_grad(fine, g), coords)
        labels = torch.as_tensor(labels_at(target.detach().cpu().numpy(), coords), dtype=hybrid.dtype)
        if cfg.lambda1 > 0:
            loss_sum, n = rendering_loss(head.render(hybrid), labels)
            loss_r = loss_sum / (n * labels.shape[1])
        if cfg.lambda2 > 0:
            ccfg = cfg.contrast_config(point_seed)
            if buckets is None:
                buckets = partition_points(hybrid[:, :2], ccfg, labels if cfg.label_buckets else None)
            loss_c, skipped = contrastive_loss(hybrid, buckets, ccfg)
    try:
        total = total_loss(loss_ori, loss_r, loss_c, cfg)
    except FloatingPointError as exc:
        raise TrainingDivergedError(str(exc)) from exc
    return StepLosses(total, loss_ori, loss_r, loss_c, bool(skipped), pts)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model, head, cfg: TrainConfig, optimizer=None, epoch: int = -1, step: int = 0) -> Path:
    state = {
        "format": CHECKPOINT_FORMAT,
        # the output location is not part of the model
        "config": json.dumps(replace(cfg, checkpoint_dir=None).to_dict(), sort_keys=True),
        "backbone_config": json.dumps(model.cfg.to_dict(), sort_keys=True),
        "backbone": model.state_dict(),
        "render_head": head.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "step": step,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(state, tmp)
    tmp.replace(path)
    return path


class CheckpointError(RuntimeError):
    pass


def load_checkpoint(path):
    """Return ``(model, head, cfg, state)`` from a checkpoint archive."""
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a variety of types here
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(state, dict) or state.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    cfg = TrainConfig.from_dict(json.loads(state["config"]))
    model = SegmentorBackbone(BackboneConfig(**json.loads(state["backbone_config"])))
    head = RenderingHead(model.cfg.n_classes + model.cfg.fine_channels, cfg.hidden_width, model.cfg.n_classes)
    try:
        model.load_state_dict(state["backbone"])
        head.load_state_dict(state["render_head"])
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint {path} does not match its config: {exc}") from exc
    model.eval()
    head.eval()
    return model, head, cfg, state


# --------------------------------------------------------------------------
# loop


def set_deterministic(enabled: bool = True):
    torch.use_deterministic_algorithms(enabled, warn_only=True)
    if enabled:
        torch.set_num_threads(1)


@dataclass
class FitResult:
    model: SegmentorBackbone
    head: RenderingHead
    history: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None


def fit(cfg: TrainConfig, volumes: Sequence[Volume], masks: Sequence[LabelMask], checkpoint_dir=None, resume=None, log_path=None) -> FitResult:
    """Train on in-memory volumes. One epoch visits every volume once in a
    seeded order, taking one augmented random patch per visit."""
    if len(volumes) == 0:
        raise ValueError("no training volumes")
    if len(volumes) != len(masks):
        raise ValueError("volumes and masks differ in length")
    set_deterministic(cfg.deterministic)
    model, head = build_models(cfg)
    params = list(model.parameters()) + list(head.parameters())
    optimizer = torch.optim.Adam(params, lr=cfg.lr)
    start_epoch, step = 0, 0
    if resume is not None:
        model, head, _, state = load_checkpoint(resume)
        params = list(model.parameters()) + list(head.parameters())
        optimizer = torch.optim.Adam(params, lr=cfg.lr)
        if state.get("optimizer"):
            optimizer.load_state_dict(state["optimizer"])
        start_epoch, step = state["epoch"] + 1, state["step"]
    model.train()
    head.train()

    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    log_fh = None
    if log_path is not None:
        log_fh = open(log_path, "a" if resume is not None else "w")
    images = [v.data.astype(np.float32) for v in volumes]
    targets = [m.to_channels() for m in masks]
    result = FitResult(model, head)
    saved: list[Path] = []
    try:
        for epoch in range(start_epoch, cfg.epochs):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(images))
            for vi in order:
                rng = np.random.default_rng([cfg.seed, epoch, int(vi)])
                angle = rng.uniform(-cfg.rotation_degrees, cfg.rotation_degrees) if cfg.rotation_degrees else 0.0
                img, tgt = images[vi], targets[vi]
                if angle:
                    v_aug, m_aug = augment_rotation(
                        Volume(img), LabelMask(tgt[0] > 0.5, tgt[1] > 0.5), angle
                    )
                    img, tgt = v_aug.data, m_aug.to_channels()
                img, tgt = random_patch(img, tgt, cfg.patch_size, rng)
                losses = compute_losses(
                    model, head, torch.from_numpy(np.ascontiguousarray(img)),
                    torch.from_numpy(np.ascontiguousarray(tgt)), cfg, derive_seed(cfg.seed, step),
                )
                optimizer.zero_grad(set_to_none=True)
                losses.total.backward()
                optimizer.step()
                record = {
                    "step": step,
                    "loss_ori": float(losses.loss_ori.detach()),
                    "loss_r": float(losses.loss_r.detach()),
                    "loss_c": float(losses.loss_c.detach()),
                    "skipped_contrastive": losses.skipped_contrastive,
                }
                result.history.append(record)
                if log_fh is not None:
                    log_fh.write(json.dumps(record) + "\n")
                    log_fh.flush()
                step += 1
            if ckpt_dir is not None:
                path = save_checkpoint(ckpt_dir / f"epoch_{epoch:04d}.pt", model, head, cfg, optimizer, epoch, step)
                saved.append(path)
                result.checkpoint = path
                while cfg.keep_checkpoints > 0 and len(saved) > cfg.keep_checkpoints:
                    saved.pop(0).unlink(missing_ok=True)
            logger.info("epoch %d done, step %d", epoch, step)
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    head.eval()
    return result


def load_dataset(manifest_path):
    from .phantom import load_manifest

    manifest, root = load_manifest(manifest_path)
    entries = manifest["volumes"]
    if not entries:
        raise ValueError(f"manifest {manifest_path} lists no volumes")
    volumes = [load_volume(root / e["image"]) for e in entries]
    masks = [load_labels(root / e["label"]) for e in entries]
    return volumes, masks, entries


def train(cfg: TrainConfig, manifest, checkpoint_dir=None, resume=None) -> tuple[Path, Path]:
    """Train from a dataset manifest; returns ``(checkpoint, log)`` paths."""
    volumes, masks, _ = load_dataset(manifest)
    ckpt_dir = Path(checkpoint_dir or cfg.checkpoint_dir or "checkpoints")
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path = ckpt_dir / "train_log.jsonl"
    result = fit(cfg, volumes, masks, checkpoint_dir=ckpt_dir, resume=resume, log_path=log_path)
    if result.checkpoint is None:
        result.checkpoint = save_checkpoint(ckpt_dir / "epoch_init.pt", result.model, result.head, cfg)
    return result.checkpoint, log_path


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)
