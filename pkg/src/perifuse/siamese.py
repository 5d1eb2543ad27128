"""Open-world training: two weight-shared evaluations of the same network,
coupled through the contrastive objective on the 512-dim joint embedding.

Weight sharing is physical, not copied: a "pair" is just two rows of one
batch through one parameter store.  The recognition softmax head stays
frozen (as in the end-to-end stage); the attribute and joint softmax heads,
which receive no gradient from the coupling loss, are frozen too so their
bytes are exactly preserved.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import GradTape, Tensor, l2_normalize_rows
from .data import DataError, LabeledDataset, sample_pairs
from .losses import coupled_loss
from .model import ParamStore, extract_embedding, forward
from .train import OptimizerState, SgdConfig, TrainingError, sgd_step

__all__ = [
    "SiameseConfig",
    "train_siamese",
    "margin_sweep",
    "verify_pair",
]

# blocks with no gradient path from the coupling loss, plus the recognition
# softmax head, which every end-to-end phase keeps frozen
_SIAMESE_FROZEN = frozenset({"pr_softmax", "sb_heads", "jpr_softmax"})


@dataclass(frozen=True)
class SiameseConfig:
    margin: float = 1.0
    sweep: tuple = (0.5, 1.0, 2.0, 3.0, 4.0, 5.0)
    pair_batch_size: int = 16
    pairs_per_epoch: int = 128
    epochs: int = 10
    genuine_fraction: float = 0.5
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    contrastive_form: str = "paper"
    normalize_embeddings: bool = False
    frozen_blocks: frozenset = _SIAMESE_FROZEN

    def __post_init__(self):
        if self.margin <= 0 or any(m <= 0 for m in self.sweep):
            raise TrainingError("margins must be positive")
        if not self.sweep:
            raise TrainingError("sweep set must be nonempty")
        if "pr_softmax" not in self.frozen_blocks:
            raise TrainingError("the recognition softmax head must stay frozen")

    def with_overrides(self, **kwargs) -> "SiameseConfig":
        return replace(self, **kwargs)


def _pairwise_sqdist_np(z: np.ndarray) -> np.ndarray:
    diff = z[:, None, :] - z[None, :, :]
    return (diff * diff).sum(axis=2)


def train_siamese(params: ParamStore, train_ds: LabeledDataset, cfg: SiameseConfig,
                  log_stream=None) -> tuple[ParamStore, list[dict]]:
    """Fine-tune the store against the coupling loss.

    Each batch stacks the images of ``pair_batch_size`` sampled pairs and
    applies the coupling loss over every ordered pair of that stack, so the
    sampled genuine fraction controls batch composition rather than the loss
    support.  Deterministic per (cfg, seed).
    """
    if np.unique(train_ds.identities()).size < 2:
        raise DataError("siamese training needs at least 2 identities")
    opt_cfg = SgdConfig(learning_rate=cfg.learning_rate, momentum=cfg.momentum,
                        weight_decay=cfg.weight_decay,
                        frozen_blocks=frozenset(cfg.frozen_blocks))
    images = train_ds.images()
    ids = train_ds.identities()
    state = OptimizerState.for_params(params)
    n_batches = max(1, cfg.pairs_per_epoch // cfg.pair_batch_size)
    logs: list[dict] = []
    for epoch in range(cfg.epochs):
        t0 = time.monotonic()
        pairs = sample_pairs(train_ds, n_batches * cfg.pair_batch_size,
                             cfg.genuine_fraction, seed=cfg.seed + 7919 * epoch)
        loss_sum = 0.0
        gen_d2_sum, imp_d2_sum = 0.0, 0.0
        for b in range(n_batches):
            chunk = pairs.pairs[b * cfg.pair_batch_size : (b + 1) * cfg.pair_batch_size]
            idx = np.concatenate([chunk[:, 0], chunk[:, 1]])
            batch_ids = ids[idx]
            tape = GradTape()
            taps = forward(params, Tensor(images[idx], tape))
            emb = l2_normalize_rows(taps.jpr_feat) if cfg.normalize_embeddings else taps.jpr_feat
            loss = coupled_loss(emb, batch_ids, cfg.margin, form=cfg.contrastive_form)
            if not np.isfinite(float(loss.data)):
                raise TrainingError(f"non-finite coupling loss at epoch {epoch}, batch {b}")
            tape.backward(loss)
            grads = {name: tape.grad(t) for name, t in params.items()
                     if ParamStore.block_of(name) not in cfg.frozen_blocks}
            sgd_step(params, grads, state, opt_cfg)

            loss_sum += float(loss.data)
            d2 = _pairwise_sqdist_np(emb.data)
            same = batch_ids[:, None] == batch_ids[None, :]
            off_diag = ~np.eye(len(batch_ids), dtype=bool)
            gen_mask = same & off_diag
            imp_mask = ~same
            gen_d2_sum += float(d2[gen_mask].mean()) if gen_mask.any() else 0.0
            imp_d2_sum += float(d2[imp_mask].mean()) if imp_mask.any() else 0.0
        entry = {
            "phase": "siamese",
            "epoch": epoch,
            "margin": cfg.margin,
            "loss": loss_sum / n_batches,
            "genuine_sqdist": gen_d2_sum / n_batches,
            "impostor_sqdist": imp_d2_sum / n_batches,
            "wall_ms": int(1000 * (time.monotonic() - t0)),
        }
        logs.append(entry)
        if log_stream is not None:
            log_stream.write(json.dumps(entry) + "\n")
    return params, logs


def verify_pair(params: ParamStore, image_a, image_b) -> float:
    """Similarity score for one image pair: negative squared embedding
    distance, so higher means more likely genuine and identical inputs score
    exactly 0."""
    batch = np.stack([np.asarray(image_a, dtype=np.float32),
                      np.asarray(image_b, dtype=np.float32)])
    emb = extract_embedding(params, batch)
    diff = emb[0].astype(np.float64) - emb[1].astype(np.float64)
    return float(-(diff * diff).sum())


def margin_sweep(params: ParamStore, train_ds: LabeledDataset, val_ds: LabeledDataset,
                 cfg: SiameseConfig, n_val_pairs: int = 400,
                 log_stream=None) -> tuple[float, list[dict]]:
    """Train one model per sweep margin from the same starting checkpoint and
    pick the margin with the lowest validation EER (ties toward the smaller
    margin).  Validation identities must be disjoint from training's."""
    from .metrics import auc, eer, open_world_scores, roc

    train_ids = set(np.unique(train_ds.identities()).tolist())
    val_ids = set(np.unique(val_ds.identities()).tolist())
    if train_ids & val_ids:
        raise DataError("margin sweep requires identity-disjoint train/val sets")

    val_pairs = sample_pairs(val_ds, n_val_pairs, genuine_fraction=0.5, seed=cfg.seed + 131)
    table: list[dict] = []
    for m in cfg.sweep:
        trial = params.copy()
        run_cfg = cfg.with_overrides(margin=float(m))
        train_siamese(trial, train_ds, run_cfg, log_stream=log_stream)
        scores = open_world_scores(trial, val_ds, val_pairs)
        curve = roc(scores)
        table.append({"margin": float(m), "eer": eer(curve), "auc": auc(curve)})
    best = min(table, key=lambda row: (row["eer"], row["margin"]))
    return best["margin"], table
