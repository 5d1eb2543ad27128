"""Three-stage optimization with per-stage freeze masks.

Stage 1 trains the recognition branch (its two hidden layers plus the
identity softmax head) over a frozen backbone.  Stage 2 trains only the
attribute branch.  Stage 3 trains everything end to end except the
recognition branch's softmax head, against the joint objective.  The
optimizer is SGD with momentum and decoupled-into-the-gradient weight
decay:  v <- mu*v - lr*(g + wd*w);  w <- w + v.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import GradTape, Tensor
from .data import DatasetSplit, LabeledDataset
from .losses import attribute_loss, classification_loss, joint_loss
from .model import BLOCKS, ParamStore, forward

__all__ = [
    "TrainingError",
    "StageConfig",
    "SgdConfig",
    "OptimizerState",
    "sgd_step",
    "run_stage",
    "run_full_pipeline",
    "identity_accuracy",
    "attribute_accuracy",
]

_ALL_BLOCKS = frozenset(BLOCKS)
_STAGE_TRAINABLE = {
    1: frozenset({"pr_fc", "pr_softmax"}),
    2: frozenset({"sb_fc", "sb_heads"}),
    3: _ALL_BLOCKS - {"pr_softmax"},
}


class TrainingError(RuntimeError):
    """Raised on NaN losses/gradients or invalid stage configurations."""


@dataclass(frozen=True)
class StageConfig:
    stage: int
    epochs: int
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    frozen_blocks: frozenset = frozenset()
    seed: int = 0
    attr_mask: tuple | None = None  # stages 2/3: attribute columns kept in the loss

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise TrainingError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainingError("epochs and batch_size must be >= 1")
        required = _ALL_BLOCKS - _STAGE_TRAINABLE[self.stage]
        if frozenset(self.frozen_blocks) != required:
            raise TrainingError(
                f"stage {self.stage} must freeze exactly {sorted(required)}, "
                f"got {sorted(self.frozen_blocks)}")

    @classmethod
    def for_stage(cls, stage: int, epochs: int, **kwargs) -> "StageConfig":
        frozen = _ALL_BLOCKS - _STAGE_TRAINABLE[stage]
        return cls(stage=stage, epochs=epochs, frozen_blocks=frozen, **kwargs)

    def with_overrides(self, **kwargs) -> "StageConfig":
        return replace(self, **kwargs)


@dataclass(frozen=True)
class SgdConfig:
    """The slice of a stage config the optimizer update actually reads;
    used directly by phases (like the Siamese one) with their own freeze
    masks."""

    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    frozen_blocks: frozenset = frozenset()


@dataclass
class OptimizerState:
    """Per-parameter velocity tensors; frozen blocks keep zero velocity."""

    velocities: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamStore) -> "OptimizerState":
        return cls({name: np.zeros_like(t.data) for name, t in params.items()})


def sgd_step(params: ParamStore, grads: dict, state: OptimizerState,
             cfg: "StageConfig | SgdConfig") -> None:
    """One in-place momentum step over all non-frozen blocks."""
    frozen = cfg.frozen_blocks
    for name, tensor in params.items():
        if ParamStore.block_of(name) in frozen:
            continue
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(tensor.data)
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in parameter {name}")
        v = state.velocities.get(name)
        if v is None:
            v = state.velocities[name] = np.zeros_like(tensor.data)
        np.multiply(v, cfg.momentum, out=v)
        v -= cfg.learning_rate * (g + cfg.weight_decay * tensor.data)
        tensor.data += v


def _stage_loss(stage: int, taps, labels, attrs, attr_mask):
    if stage == 1:
        return classification_loss(taps.pr_logits, labels)
    if stage == 2:
        return attribute_loss(taps.sb_logits, attrs, attr_mask=attr_mask)
    return joint_loss(taps.jpr_logits, labels, taps.sb_logits, attrs, attr_mask=attr_mask)


def _batch_identity_acc(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == labels).mean())


def _batch_attr_acc(logits: np.ndarray, attrs: np.ndarray, attr_mask) -> float:
    if logits.shape[1] == 0:
        return float("nan")
    cols = list(attr_mask) if attr_mask is not None else list(range(logits.shape[1]))
    pred = logits[:, cols] > 0.0
    return float((pred == (attrs[:, cols] > 0)).mean())


def run_stage(cfg: StageConfig, params: ParamStore, split: DatasetSplit,
              rng_seed: int | None = None, state: OptimizerState | None = None,
              log_stream=None) -> tuple[ParamStore, list[dict]]:
    """Train one stage on split.train; returns the mutated store and the
    per-epoch log.  Deterministic given (cfg, rng_seed): batch order is the
    only stochastic element and it is derived from the seed."""
    train = split.train
    images = train.images()
    labels = train.identities()
    attrs = train.attributes()
    n = len(train)
    if cfg.batch_size > n:
        raise TrainingError(f"batch_size {cfg.batch_size} exceeds train size {n}")
    if cfg.stage in (2, 3) and train.k == 0 and cfg.attr_mask is None:
        pass  # attribute loss over zero heads is legal and identically zero

    seed = cfg.seed if rng_seed is None else rng_seed
    rng = np.random.Generator(np.random.PCG64(seed))
    if state is None:
        state = OptimizerState.for_params(params)
    logs: list[dict] = []
    for epoch in range(cfg.epochs):
        t0 = time.monotonic()
        perm = rng.permutation(n)
        n_batches = n // cfg.batch_size
        sums = {"loss": 0.0, "ce": 0.0, "attr": 0.0, "train_acc": 0.0, "attr_acc": 0.0}
        for b in range(n_batches):
            idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            xb, yb, ab = images[idx], labels[idx], attrs[idx]
            tape = GradTape()
            taps = forward(params, Tensor(xb, tape))
            loss = _stage_loss(cfg.stage, taps, yb, ab, cfg.attr_mask)
            if not np.isfinite(loss.scalar):
                raise TrainingError(f"non-finite loss at stage {cfg.stage}, epoch {epoch}, batch {b}")
            tape.backward(loss.value)
            grads = {name: tape.grad(t) for name, t in params.items()
                     if ParamStore.block_of(name) not in cfg.frozen_blocks}
            sgd_step(params, grads, state, cfg)

            sums["loss"] += loss.scalar
            sums["ce"] += loss.components.get("ce", 0.0)
            sums["attr"] += loss.components.get("attr", 0.0)
            head = taps.pr_logits if cfg.stage == 1 else taps.jpr_logits
            sums["train_acc"] += _batch_identity_acc(head.data, yb)
            sums["attr_acc"] += _batch_attr_acc(taps.sb_logits.data, ab, cfg.attr_mask)
        entry = {
            "stage": cfg.stage,
            "epoch": epoch,
            "loss": sums["loss"] / n_batches,
            "ce": sums["ce"] / n_batches,
            "attr": sums["attr"] / n_batches,
            "train_acc": sums["train_acc"] / n_batches,
            "attr_acc": sums["attr_acc"] / n_batches,
            "wall_ms": int(1000 * (time.monotonic() - t0)),
        }
        logs.append(entry)
        if log_stream is not None:
            log_stream.write(json.dumps(entry) + "\n")
    return params, logs


def run_full_pipeline(cfgs: tuple[StageConfig, StageConfig, StageConfig],
                      params: ParamStore, split: DatasetSplit,
                      out_dir=None, log_stream=None) -> tuple[ParamStore, list[dict]]:
    """Run stages 1 -> 2 -> 3 on the same store, checkpointing after each
    stage when ``out_dir`` is given."""
    stages = tuple(cfgs)
    if tuple(c.stage for c in stages) != (1, 2, 3):
        raise TrainingError("pipeline needs stage configs (1, 2, 3) in order")
    all_logs: list[dict] = []
    for cfg in stages:
        params, logs = run_stage(cfg, params, split, log_stream=log_stream)
        all_logs.extend(logs)
        if out_dir is not None:
            from .checkpoint import save_checkpoint

            save_checkpoint(params, None, f"{out_dir}/stage{cfg.stage}.ckpt",
                            stage_marker=f"stage{cfg.stage}")
    return params, all_logs


def identity_accuracy(params: ParamStore, ds: LabeledDataset, head: str = "jpr",
                      batch_size: int = 64) -> float:
    """Top-1 identity accuracy of one softmax head over a dataset."""
    correct = 0
    images = ds.images()
    labels = ds.identities()
    for start in range(0, len(ds), batch_size):
        taps = forward(params, images[start : start + batch_size])
        logits = taps.pr_logits if head == "pr" else taps.jpr_logits
        correct += int((logits.data.argmax(axis=1) == labels[start : start + batch_size]).sum())
    return correct / len(ds)


def attribute_accuracy(params: ParamStore, ds: LabeledDataset,
                       batch_size: int = 64, attr_mask=None) -> tuple[float, np.ndarray]:
    """Mean and per-attribute accuracy of the binary heads (threshold 0)."""
    if ds.k == 0:
        raise TrainingError("dataset has no attributes to score")
    cols = list(attr_mask) if attr_mask is not None else list(range(ds.k))
    images = ds.images()
    attrs = ds.attributes()
    hits = np.zeros(len(cols), dtype=np.int64)
    for start in range(0, len(ds), batch_size):
        taps = forward(params, images[start : start + batch_size])
        pred = taps.sb_logits.data[:, cols] > 0.0
        hits += (pred == (attrs[start : start + batch_size][:, cols] > 0)).sum(axis=0)
    per_attr = hits / len(ds)
    return float(per_attr.mean()), per_attr
