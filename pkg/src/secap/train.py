"""Training loop: P x K batches, per-step cosine schedule, epoch logging,
periodic checkpoints, and checkpoint-to-model reconstruction.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .data import (
    DEFAULT_VIEW_MAP,
    AugmentPolicy,
    Manifest,
    augment,
    derive_seed,
    pk_sample,
)
from .encoder import EncoderConfig
from .errors import ConfigurationError, ContractError, NumericError
from .losses import LossWeights, total_loss
from .model import ModelConfig, SeCapModel
from .optim import SGD, cosine_lr
from .storage import load_checkpoint, load_image, load_into, save_checkpoint
from .tensor import backward

CHECKPOINT_VERSION_TAG = "secap-checkpoint"

LOG_KEYS = ("loss_total", "loss_id_g", "loss_tri_g", "loss_id_l", "loss_tri_l", "loss_view", "loss_orth")
_PART_KEYS = {"loss_id_g": "id_g", "loss_tri_g": "tri_g", "loss_id_l": "id_l", "loss_tri_l": "tri_l", "loss_view": "view", "loss_orth": "orth"}


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    epochs: int = 120
    lr_max: float = 8e-3
    lr_min: float = 1.6e-6
    p: int = 16
    k: int = 4
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    momentum: float = 0.9  # conventional re-ID SGD settings; source text names only SGD
    weight_decay: float = 1e-4
    warmup_steps: int = 0
    checkpoint_every: int = 20
    holdout: float = 0.0  # identity fraction withheld by the caller; recorded for eval
    augment_policy: AugmentPolicy = field(default_factory=AugmentPolicy)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr_min > self.lr_max:
            raise ConfigurationError(f"lr_min {self.lr_min} exceeds lr_max {self.lr_max}")
        if self.p < 1 or self.k < 1:
            raise ConfigurationError(f"P and K must be >= 1, got P={self.p} K={self.k}")
        if self.checkpoint_every < 1:
            raise ConfigurationError("checkpoint_every must be >= 1")


@dataclass
class TrainResult:
    model: SeCapModel
    history: List[Dict[str, float]]
    label_map: Dict[int, int]
    total_steps: int
    checkpoint_paths: List[str]


def format_epoch_line(epoch: int, values: Dict[str, float], lr: float) -> str:
    parts = [f"epoch={epoch}"]
    parts.extend(f"{key}={values[key]!r}" for key in LOG_KEYS)
    parts.append(f"lr={lr!r}")
    return " ".join(parts)


def _view_label(view: int) -> int:
    # the view head classifies the collapsed aerial/ground side
    return DEFAULT_VIEW_MAP[view]


def checkpoint_metadata(model: SeCapModel, train_cfg: Optional[TrainConfig], epoch: int, label_ids: List[int]) -> dict:
    cfg = model.cfg
    enc = cfg.encoder
    meta = {
        "format": CHECKPOINT_VERSION_TAG,
        "epoch": epoch,
        "encoder": {
            "image_h": enc.image_h,
            "image_w": enc.image_w,
            "patch": enc.patch,
            "stride": enc.stride,
            "embed_dim": enc.embed_dim,
            "depth": enc.depth,
            "heads": enc.heads,
            "ffn_mult": enc.ffn_mult,
            "olp_enabled": enc.olp_enabled,
            "vdt_enabled": enc.vdt_enabled,
        },
        "model": {
            "num_ids": cfg.num_ids,
            "num_views": cfg.num_views,
            "prompt_len": cfg.prompt_len,
            "prm_variant": cfg.prm_variant,
            "ablate": cfg.ablate,
            "seed": cfg.seed,
        },
        "label_ids": list(label_ids),
    }
    if train_cfg is not None:
        meta["weights"] = {
            "alpha": train_cfg.weights.alpha,
            "beta": train_cfg.weights.beta,
            "lambda": train_cfg.weights.lam,
        }
        meta["train"] = {
            "epochs": train_cfg.epochs,
            "lr_max": train_cfg.lr_max,
            "lr_min": train_cfg.lr_min,
            "p": train_cfg.p,
            "k": train_cfg.k,
            "seed": train_cfg.seed,
            "momentum": train_cfg.momentum,
            "weight_decay": train_cfg.weight_decay,
            "warmup_steps": train_cfg.warmup_steps,
            "holdout": train_cfg.holdout,
        }
    return meta


def model_from_checkpoint(path) -> Tuple[SeCapModel, dict]:
    """Rebuild the exact model a checkpoint was saved from and load its weights."""
    meta, table = load_checkpoint(path)
    if meta.get("format") != CHECKPOINT_VERSION_TAG:
        from .errors import CheckpointError

        raise CheckpointError(f"{path}: metadata is not a model checkpoint")
    e = meta["encoder"]
    enc = EncoderConfig(
        image_h=e["image_h"],
        image_w=e["image_w"],
        patch=e["patch"],
        stride=e["stride"],
        embed_dim=e["embed_dim"],
        depth=e["depth"],
        heads=e["heads"],
        ffn_mult=e["ffn_mult"],
        olp_enabled=e["olp_enabled"],
        vdt_enabled=e["vdt_enabled"],
    )
    m = meta["model"]
    cfg = ModelConfig(
        encoder=enc,
        num_ids=m["num_ids"],
        num_views=m["num_views"],
        prompt_len=m["prompt_len"],
        prm_variant=m["prm_variant"],
        ablate=m["ablate"],
        seed=m["seed"],
    )
    model = SeCapModel(cfg)
    load_into(model.parameters(), table)
    return model, meta


def train(
    manifest_train: Manifest,
    cfg: TrainConfig,
    out_dir: Optional[str] = None,
    log: Optional[Callable[[str], None]] = None,
) -> TrainResult:
    """Run the full loop; deterministic for a fixed config and manifest."""
    ids = manifest_train.identities()
    if len(ids) < cfg.p:
        raise ContractError(f"manifest has {len(ids)} identities, fewer than P={cfg.p}")
    label_map = {identity: index for index, identity in enumerate(ids)}

    model_cfg = dataclasses.replace(cfg.model, num_ids=len(ids), num_views=2)
    model = SeCapModel(model_cfg)
    params = model.parameters()
    opt = SGD(params, lr=cfg.lr_max, momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    steps_per_epoch = max(1, len(manifest_train.records) // (cfg.p * cfg.k))
    total_steps = cfg.epochs * steps_per_epoch

    history: List[Dict[str, float]] = []
    checkpoint_paths: List[str] = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        sums = {key: 0.0 for key in LOG_KEYS}
        lr = cfg.lr_max
        for s in range(steps_per_epoch):
            batch = pk_sample(manifest_train, cfg.p, cfg.k, derive_seed("batch", cfg.seed, epoch, s))
            images = np.stack(
                [
                    augment(
                        load_image(manifest_train.resolve(r)),
                        cfg.augment_policy,
                        derive_seed("augment", cfg.seed, r.path, epoch, s, i),
                    )
                    for i, r in enumerate(batch)
                ]
            )
            id_labels = [label_map[r.identity] for r in batch]
            view_labels = [_view_label(r.view) for r in batch]
            total, parts = model.compute_losses(images, id_labels, view_labels, cfg.weights)
            value = total.data.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch} step {s}")
            backward(total)
            lr = cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min, cfg.warmup_steps)
            opt.lr = lr
            opt.step()
            step += 1
            sums["loss_total"] += value
            scalars = parts.scalars()
            for key, part in _PART_KEYS.items():
                sums[key] += scalars[part]
        means = {key: sums[key] / steps_per_epoch for key in LOG_KEYS}
        history.append({"epoch": epoch, "lr": lr, **means})
        if log is not None:
            log(format_epoch_line(epoch, means, lr))
        if out_dir is not None and (epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs):
            path = os.path.join(out_dir, f"checkpoint-{epoch:04d}.ckpt")
            save_checkpoint(path, params, checkpoint_metadata(model, cfg, epoch, ids))
            if path not in checkpoint_paths:
                checkpoint_paths.append(path)
    return TrainResult(
        model=model,
        history=history,
        label_map=label_map,
        total_steps=total_steps,
        checkpoint_paths=checkpoint_paths,
    )


def held_out_orthogonality(model: SeCapModel, manifest: Manifest, num_batches: int, p: int, k: int, seed) -> float:
    """Mean decoupling loss over seeded held-out batches (no augmentation)."""
    from .losses import orthogonality_loss
    from .tensor import no_grad

    if not model.cfg.uses_vdt:
        raise ContractError("model has no view branch; decoupling loss undefined")
    vals = []
    with no_grad():
        for b in range(num_batches):
            batch = pk_sample(manifest, p, k, derive_seed("heldout", seed, b))
            images = np.stack([load_image(manifest.resolve(r)) for r in batch])
            out = model.forward(images)
            vals.append(orthogonality_loss(out.x_inv, out.view_feat).data.item())
    return float(np.mean(vals))
