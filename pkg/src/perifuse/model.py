"""The fused two-branch recognition graph.

A shared convolutional backbone feeds a recognition branch (two fully
connected layers plus an identity softmax head) whose first hidden layer
also feeds an attribute branch (two fully connected layers plus one binary
head per attribute).  The attribute branch's 256-dim feature is concatenated
in front of the recognition branch's 1024-dim feature into a 1280-dim fused
vector, which a final 512-dim layer and a second identity head consume.
That 512-dim layer is the embedding used for open-world matching.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import Tensor, concat, conv2d, flatten, linear, maxpool2d, relu

__all__ = [
    "ModelError",
    "ConvStage",
    "ArchConfig",
    "ParamStore",
    "ForwardTaps",
    "build",
    "forward",
    "extract_embedding",
    "param_count",
]

BLOCKS = ("backbone", "pr_fc", "pr_softmax", "sb_fc", "sb_heads", "jpr_fc", "jpr_softmax")


class ModelError(ValueError):
    """Raised on invalid configurations or mismatched batch shapes."""


@dataclass(frozen=True)
class ConvStage:
    """One backbone stage: 3x3-style same-padded conv, ReLU, optional 2x2 pool."""

    out_channels: int
    kernel: int = 3
    pool: bool = True


@dataclass(frozen=True)
class ArchConfig:
    """All sizes of the graph.  The fully connected sizes default to the
    production values (2048/1024 recognition, 512/256 attribute, 512 joint);
    the backbone is configurable because pretrained weights are out of reach
    at desk scale."""

    C: int
    k: int
    input_h: int = 64
    input_w: int = 64
    channels: int = 3
    backbone: tuple[ConvStage, ...] = (
        ConvStage(16), ConvStage(32), ConvStage(64), ConvStage(64),
    )
    pr_fc1_size: int = 2048
    pr_fc2_size: int = 1024
    sb_fc1_size: int = 512
    sb_fc2_size: int = 256
    jpr_fc_size: int = 512

    def __post_init__(self):
        sizes = (self.C, self.k + 1, self.input_h, self.input_w, self.channels,
                 self.pr_fc1_size, self.pr_fc2_size, self.sb_fc1_size,
                 self.sb_fc2_size, self.jpr_fc_size)
        if min(sizes) < 1:
            raise ModelError("all sizes must be >= 1 (and k >= 0)")
        h, w = self.input_h, self.input_w
        for i, stage in enumerate(self.backbone):
            if stage.kernel % 2 == 0:
                raise ModelError(f"stage {i}: kernel must be odd for same padding")
            if stage.pool:
                if h % 2 or w % 2:
                    raise ModelError(f"stage {i}: cannot 2x2-pool odd dims {h}x{w}")
                h, w = h // 2, w // 2

    @property
    def fusion_size(self) -> int:
        return self.sb_fc2_size + self.pr_fc2_size

    @property
    def backbone_flat_dim(self) -> int:
        h, w = self.input_h, self.input_w
        ch = self.channels
        for stage in self.backbone:
            ch = stage.out_channels
            if stage.pool:
                h, w = h // 2, w // 2
        return ch * h * w

    @classmethod
    def small(cls, C: int = 3, k: int = 2) -> "ArchConfig":
        """A miniature of the full wiring, cheap enough for coordinate-wise
        finite-difference sweeps."""
        return cls(
            C=C, k=k, input_h=8, input_w=8, channels=3,
            backbone=(ConvStage(4), ConvStage(8)),
            pr_fc1_size=16, pr_fc2_size=12,
            sb_fc1_size=10, sb_fc2_size=6, jpr_fc_size=8,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"] = [[s.out_channels, s.kernel, s.pool] for s in self.backbone]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        d["backbone"] = tuple(ConvStage(int(c), int(kk), bool(p)) for c, kk, p in d["backbone"])
        return cls(**d)


class ParamStore:
    """Named, block-structured collection of every trainable tensor.

    Names are ``block/param``; the block prefix is the unit of freezing.
    Iteration order is the fixed construction order, which also fixes the
    checkpoint payload order.
    """

    def __init__(self, config: ArchConfig):
        self.config = config
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> None:
        block = name.split("/", 1)[0]
        if block not in BLOCKS:
            raise ModelError(f"unknown block in parameter name {name!r}")
        if name in self._tensors:
            raise ModelError(f"duplicate parameter name {name!r}")
        self._tensors[name] = Tensor(data)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    @staticmethod
    def block_of(name: str) -> str:
        return name.split("/", 1)[0]

    def block_names(self) -> list[str]:
        seen = []
        for name in self._tensors:
            block = self.block_of(name)
            if block not in seen:
                seen.append(block)
        return seen

    def in_block(self, block: str) -> list[str]:
        return [n for n in self._tensors if self.block_of(n) == block]

    def total_params(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def copy(self) -> "ParamStore":
        clone = ParamStore(self.config)
        for name, t in self._tensors.items():
            clone._tensors[name] = Tensor(t.data.copy())
        return clone

    def astype(self, dtype) -> "ParamStore":
        clone = ParamStore(self.config)
        for name, t in self._tensors.items():
            clone._tensors[name] = Tensor(t.data.astype(dtype))
        return clone

    def state_bytes(self, block: str | None = None) -> bytes:
        """Raw little-endian payload of (a block of) the store, for bitwise
        freeze checks and checkpoint digests."""
        chunks = []
        for name, t in self._tensors.items():
            if block is None or self.block_of(name) == block:
                chunks.append(t.data.astype("<f4", copy=False).tobytes())
        return b"".join(chunks)


@dataclass
class ForwardTaps:
    """Every intermediate activation the evaluation protocols need."""

    pr_fc1: Tensor
    pr_fc2: Tensor
    pr_logits: Tensor
    sb_fc2: Tensor
    sb_logits: Tensor
    fused: Tensor
    jpr_feat: Tensor
    jpr_logits: Tensor


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def build(config: ArchConfig, seed: int = 0) -> ParamStore:
    """Initialize all trainable tensors: fan-in-scaled uniform weights,
    zero biases, fully determined by (config, seed)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    store = ParamStore(config)

    in_ch = config.channels
    for i, stage in enumerate(config.backbone):
        fan_in = in_ch * stage.kernel * stage.kernel
        store.add(f"backbone/conv{i}_w",
                  _uniform(rng, (stage.out_channels, in_ch, stage.kernel, stage.kernel), fan_in))
        store.add(f"backbone/conv{i}_b", np.zeros(stage.out_channels, dtype=np.float32))
        in_ch = stage.out_channels

    flat = config.backbone_flat_dim
    store.add("pr_fc/fc1_w", _uniform(rng, (flat, config.pr_fc1_size), flat))
    store.add("pr_fc/fc1_b", np.zeros(config.pr_fc1_size, dtype=np.float32))
    store.add("pr_fc/fc2_w", _uniform(rng, (config.pr_fc1_size, config.pr_fc2_size), config.pr_fc1_size))
    store.add("pr_fc/fc2_b", np.zeros(config.pr_fc2_size, dtype=np.float32))
    store.add("pr_softmax/w", _uniform(rng, (config.pr_fc2_size, config.C), config.pr_fc2_size))
    store.add("pr_softmax/b", np.zeros(config.C, dtype=np.float32))

    store.add("sb_fc/fc1_w", _uniform(rng, (config.pr_fc1_size, config.sb_fc1_size), config.pr_fc1_size))
    store.add("sb_fc/fc1_b", np.zeros(config.sb_fc1_size, dtype=np.float32))
    store.add("sb_fc/fc2_w", _uniform(rng, (config.sb_fc1_size, config.sb_fc2_size), config.sb_fc1_size))
    store.add("sb_fc/fc2_b", np.zeros(config.sb_fc2_size, dtype=np.float32))
    for t in range(config.k):
        store.add(f"sb_heads/head{t}_w", _uniform(rng, (config.sb_fc2_size, 1), config.sb_fc2_size))
        store.add(f"sb_heads/head{t}_b", np.zeros(1, dtype=np.float32))

    store.add("jpr_fc/w", _uniform(rng, (config.fusion_size, config.jpr_fc_size), config.fusion_size))
    store.add("jpr_fc/b", np.zeros(config.jpr_fc_size, dtype=np.float32))
    store.add("jpr_softmax/w", _uniform(rng, (config.jpr_fc_size, config.C), config.jpr_fc_size))
    store.add("jpr_softmax/b", np.zeros(config.C, dtype=np.float32))
    return store


def param_count(config: ArchConfig) -> int:
    """Closed-form trainable-parameter count.

    Per conv stage with f filters over c channels and kernel s: f*(c*s*s + 1).
    Fully connected d->m: m*(d + 1).  Heads: k single-logit layers over the
    256-dim attribute feature, plus two identity heads of size C.
    """
    total = 0
    in_ch = config.channels
    for stage in config.backbone:
        total += stage.out_channels * (in_ch * stage.kernel * stage.kernel + 1)
        in_ch = stage.out_channels
    flat = config.backbone_flat_dim
    total += config.pr_fc1_size * (flat + 1)
    total += config.pr_fc2_size * (config.pr_fc1_size + 1)
    total += config.C * (config.pr_fc2_size + 1)
    total += config.sb_fc1_size * (config.pr_fc1_size + 1)
    total += config.sb_fc2_size * (config.sb_fc1_size + 1)
    total += config.k * (config.sb_fc2_size + 1)
    total += config.jpr_fc_size * (config.fusion_size + 1)
    total += config.C * (config.jpr_fc_size + 1)
    return total


def forward(params: ParamStore, batch, tape=None, zero_sb: bool = False) -> ForwardTaps:
    """Run the full graph on a [N, channels, H, W] batch.

    The attribute branch consumes the recognition branch's first hidden
    layer, never the raw backbone output; the fusion is (attribute 256-dim,
    recognition 1024-dim) in that order.  ReLU follows every hidden fully
    connected layer; logits carry no activation.  ``zero_sb`` severs the
    attribute feature entering the fusion (ablation hook); the attribute
    branch itself still runs.
    """
    cfg = params.config
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch), tape)
    if tape is not None and x.tape is None:
        x = Tensor(x.data, tape)
    expected = (cfg.channels, cfg.input_h, cfg.input_w)
    if x.data.ndim != 4 or x.shape[1:] != expected:
        raise ModelError(f"batch shape {x.shape} does not match [N, {expected[0]}, {expected[1]}, {expected[2]}]")

    for i, stage in enumerate(cfg.backbone):
        x = conv2d(x, params[f"backbone/conv{i}_w"], params[f"backbone/conv{i}_b"],
                   stride=1, pad=stage.kernel // 2)
        x = relu(x)
        if stage.pool:
            x = maxpool2d(x, 2)
    feat = flatten(x)

    pr_fc1 = relu(linear(feat, params["pr_fc/fc1_w"], params["pr_fc/fc1_b"]))
    pr_fc2 = relu(linear(pr_fc1, params["pr_fc/fc2_w"], params["pr_fc/fc2_b"]))
    pr_logits = linear(pr_fc2, params["pr_softmax/w"], params["pr_softmax/b"])

    sb_fc1 = relu(linear(pr_fc1, params["sb_fc/fc1_w"], params["sb_fc/fc1_b"]))
    sb_fc2 = relu(linear(sb_fc1, params["sb_fc/fc2_w"], params["sb_fc/fc2_b"]))
    head_outs = [linear(sb_fc2, params[f"sb_heads/head{t}_w"], params[f"sb_heads/head{t}_b"])
                 for t in range(cfg.k)]
    if head_outs:
        sb_logits = head_outs[0]
        for h in head_outs[1:]:
            sb_logits = concat(sb_logits, h, axis=1)
    else:
        sb_logits = Tensor(np.zeros((x.shape[0], 0), dtype=sb_fc2.dtype))

    sb_for_fusion = Tensor(np.zeros_like(sb_fc2.data)) if zero_sb else sb_fc2
    fused = concat(sb_for_fusion, pr_fc2, axis=1)
    jpr_feat = relu(linear(fused, params["jpr_fc/w"], params["jpr_fc/b"]))
    jpr_logits = linear(jpr_feat, params["jpr_softmax/w"], params["jpr_softmax/b"])

    return ForwardTaps(pr_fc1=pr_fc1, pr_fc2=pr_fc2, pr_logits=pr_logits,
                       sb_fc2=sb_fc2, sb_logits=sb_logits, fused=fused,
                       jpr_feat=jpr_feat, jpr_logits=jpr_logits)


def extract_embedding(params: ParamStore, images) -> np.ndarray:
    """Evaluation-mode embedding: the joint block's 512-dim hidden feature."""
    taps = forward(params, np.asarray(images, dtype=np.float32))
    return taps.jpr_feat.data
