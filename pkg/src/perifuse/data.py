"""Sample containers, synthetic identity data, directory ingestion,
closed/open-world splitting, and genuine/impostor pair sampling.

Synthetic images are the desk-scale stand-in for license-gated periocular
datasets: each identity owns a random low-frequency template, each binary
attribute adds a fixed global motif when set, and attribute labels are a
property of the identity (one subject, one attribute vector), matching how
soft biometrics annotate real data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "DataError",
    "Sample",
    "LabeledDataset",
    "DatasetSplit",
    "PairBatch",
    "SynthSpec",
    "NormStats",
    "generate_synthetic",
    "load_image_directory",
    "split_closed_world",
    "split_open_world",
    "sample_pairs",
    "normalization_stats",
    "apply_normalization",
    "reindex_identities",
    "save_dataset",
    "load_dataset",
]


class DataError(ValueError):
    """Raised on malformed manifests, invalid specs, or impossible splits."""


@dataclass
class Sample:
    """One image with its identity index and k binary attribute labels."""

    image: np.ndarray          # [channels, H, W] float32 in [0, 1]
    identity: int
    attributes: np.ndarray     # [k] values in {0, 1}


@dataclass
class LabeledDataset:
    samples: list[Sample]
    C: int
    k: int
    provenance: str = "unspecified"

    def __post_init__(self):
        if not self.samples:
            raise DataError("dataset has zero samples")
        ids = {s.identity for s in self.samples}
        if not ids <= set(range(self.C)):
            raise DataError(f"identity labels {sorted(ids)[:5]}... outside [0, {self.C})")
        if ids != set(range(self.C)):
            missing = sorted(set(range(self.C)) - ids)
            raise DataError(f"identities {missing[:5]} have no samples")
        shape = self.samples[0].image.shape
        for i, s in enumerate(self.samples):
            if s.image.shape != shape:
                raise DataError(f"sample {i}: image shape {s.image.shape} != {shape}")
            if s.attributes.shape != (self.k,):
                raise DataError(f"sample {i}: expected {self.k} attributes, got {s.attributes.shape}")

    def __len__(self):
        return len(self.samples)

    @property
    def image_shape(self):
        return self.samples[0].image.shape

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples]).astype(np.float32)

    def identities(self) -> np.ndarray:
        return np.array([s.identity for s in self.samples], dtype=np.int64)

    def attributes(self) -> np.ndarray:
        if self.k == 0:
            return np.zeros((len(self.samples), 0), dtype=np.int64)
        return np.stack([s.attributes for s in self.samples]).astype(np.int64)

    def identity_counts(self) -> np.ndarray:
        return np.bincount(self.identities(), minlength=self.C)

    def subset(self, indices, provenance: str | None = None) -> "LabeledDataset":
        """Subset by index, keeping original identity labels.  C stays the
        nominal label-space size; density is only required at construction,
        so subsets are returned as plain containers via object surgery."""
        picked = [self.samples[i] for i in indices]
        if not picked:
            raise DataError("subset selects zero samples")
        ds = object.__new__(LabeledDataset)
        ds.samples = picked
        ds.C = self.C
        ds.k = self.k
        ds.provenance = provenance or self.provenance
        return ds


@dataclass
class DatasetSplit:
    train: LabeledDataset
    eval: LabeledDataset
    mode: str  # "closed" | "open"

    def __post_init__(self):
        train_ids = set(self.train.identities().tolist())
        eval_ids = set(self.eval.identities().tolist())
        if self.mode == "open":
            if train_ids & eval_ids:
                raise DataError("open-world split has overlapping identities")
        elif self.mode == "closed":
            if not eval_ids <= train_ids:
                raise DataError("closed-world split has eval identities missing from train")
        else:
            raise DataError(f"unknown split mode {self.mode!r}")


@dataclass
class PairBatch:
    """Index pairs with c=0 for genuine (same identity) and c=1 for impostor."""

    pairs: np.ndarray  # [P, 3] columns (i, j, c)

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64)
        if self.pairs.ndim != 2 or self.pairs.shape[1] != 3:
            raise DataError(f"pairs must be [P, 3], got {self.pairs.shape}")

    def __len__(self):
        return len(self.pairs)

    def validate_against(self, ds: LabeledDataset) -> None:
        ids = ds.identities()
        i, j, c = self.pairs.T
        expected = (ids[i] != ids[j]).astype(np.int64)
        if not np.array_equal(expected, c):
            raise DataError("pair labels inconsistent with identities")


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic identity dataset.

    ``attribute_assignment`` is one k-bit row per identity.  ``motif_seed``
    fixes the global attribute motifs independently of the data seed, so two
    specs can describe disjoint identity populations drawn from the same
    visual family.
    """

    C: int
    images_per_identity: int
    H: int = 64
    W: int = 64
    k: int = 2
    attribute_assignment: tuple = ()
    noise_std: float = 0.05
    attribute_signal: float = 0.5
    identity_signal: float = 1.0
    motif_seed: int = 0

    def __post_init__(self):
        if self.C * self.images_per_identity == 0:
            raise DataError("spec would generate zero samples")
        if self.noise_std < 0:
            raise DataError("noise_std must be >= 0")
        if not (0.0 <= self.attribute_signal <= 1.0 and 0.0 <= self.identity_signal <= 1.0):
            raise DataError("signal strengths must lie in [0, 1]")
        assignment = self.assignment_matrix()
        if assignment.shape != (self.C, self.k):
            raise DataError(f"attribute_assignment must be {self.C} rows of {self.k} bits")
        if assignment.size and not np.isin(assignment, (0, 1)).all():
            raise DataError("attribute_assignment entries must be 0 or 1")

    def assignment_matrix(self) -> np.ndarray:
        if not self.attribute_assignment:
            # default: attribute t is bit t of the identity index (balanced)
            ids = np.arange(self.C)[:, None]
            return ((ids >> np.arange(self.k)[None, :]) & 1).astype(np.int64)
        return np.asarray(self.attribute_assignment, dtype=np.int64).reshape(self.C, self.k)

    def to_dict(self) -> dict:
        return {
            "C": self.C, "images_per_identity": self.images_per_identity,
            "H": self.H, "W": self.W, "k": self.k,
            "attribute_assignment": self.assignment_matrix().tolist(),
            "noise_std": self.noise_std, "attribute_signal": self.attribute_signal,
            "identity_signal": self.identity_signal, "motif_seed": self.motif_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        d["attribute_assignment"] = tuple(tuple(int(b) for b in row)
                                          for row in d.get("attribute_assignment", ()))
        return cls(**d)


def _bilinear_upsample(coarse: np.ndarray, H: int, W: int) -> np.ndarray:
    """Upsample a [gh, gw] grid to [H, W] by separable linear interpolation."""
    gh, gw = coarse.shape
    ys = np.linspace(0, gh - 1, H)
    xs = np.linspace(0, gw - 1, W)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = coarse[y0][:, x0] * (1 - wx) + coarse[y0][:, x1] * wx
    bot = coarse[y1][:, x0] * (1 - wx) + coarse[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def _smooth_field(rng: np.random.Generator, channels: int, H: int, W: int,
                  grid: int) -> np.ndarray:
    """Low-frequency random field in [0, 1] per channel."""
    out = np.empty((channels, H, W))
    for c in range(channels):
        out[c] = _bilinear_upsample(rng.uniform(0.0, 1.0, size=(grid, grid)), H, W)
    return out


def generate_synthetic(spec: SynthSpec, seed: int) -> LabeledDataset:
    """Deterministically generate a dataset from (spec, seed).

    Image = 0.5 + identity_signal * (template - 0.5)
          + attribute_signal * 0.5 * sum of the identity's set motifs
          + per-image Gaussian noise, clipped to [0, 1].
    """
    motif_rng = np.random.Generator(np.random.PCG64(spec.motif_seed))
    motifs = []
    for _ in range(spec.k):
        m = _smooth_field(motif_rng, 3, spec.H, spec.W, grid=5) - 0.5
        peak = np.abs(m).max()
        motifs.append(m / peak if peak > 0 else m)

    rng = np.random.Generator(np.random.PCG64(seed))
    assignment = spec.assignment_matrix()
    samples = []
    for ident in range(spec.C):
        template = _smooth_field(rng, 3, spec.H, spec.W, grid=8)
        base = 0.5 + spec.identity_signal * (template - 0.5)
        for t in range(spec.k):
            if assignment[ident, t]:
                base = base + spec.attribute_signal * 0.5 * motifs[t]
        for _ in range(spec.images_per_identity):
            img = base
            if spec.noise_std > 0:
                img = img + rng.normal(0.0, spec.noise_std, size=base.shape)
            samples.append(Sample(
                image=np.clip(img, 0.0, 1.0).astype(np.float32),
                identity=ident,
                attributes=assignment[ident].copy(),
            ))
    return LabeledDataset(samples, C=spec.C, k=spec.k, provenance=f"synthetic(seed={seed})")


def load_image_directory(root, manifest, size: tuple[int, int] = (64, 64),
                         k: int | None = None) -> LabeledDataset:
    """Read ``relative_path,identity,attr_1,...,attr_k`` lines, decode and
    resize the images to ``size`` (H, W), scale to [0, 1], and re-index
    identities densely in order of first appearance."""
    from PIL import Image

    root = Path(root)
    manifest = Path(manifest)
    rows = []
    with open(manifest, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) < 2:
                raise DataError(f"{manifest.name}:{lineno}: expected path,identity[,attrs...]")
            path, label, attrs = parts[0], parts[1], parts[2:]
            if k is None:
                k = len(attrs)
            if len(attrs) != k:
                raise DataError(f"{manifest.name}:{lineno}: expected {k} attribute bits, got {len(attrs)}")
            try:
                bits = np.array([int(a) for a in attrs], dtype=np.int64)
            except ValueError:
                raise DataError(f"{manifest.name}:{lineno}: non-integer attribute bit") from None
            if bits.size and not np.isin(bits, (0, 1)).all():
                raise DataError(f"{manifest.name}:{lineno}: attribute bits must be 0 or 1")
            rows.append((lineno, path, label, bits))
    if not rows:
        raise DataError(f"{manifest.name}: manifest lists zero samples")

    id_map: dict[str, int] = {}
    samples = []
    h, w = size
    for lineno, rel, label, bits in rows:
        img_path = root / rel
        if not img_path.is_file():
            raise DataError(f"{manifest.name}:{lineno}: missing image file {rel}")
        with Image.open(img_path) as im:
            arr = np.asarray(im.convert("RGB").resize((w, h), Image.BILINEAR), dtype=np.float32)
        ident = id_map.setdefault(label, len(id_map))
        samples.append(Sample(image=np.ascontiguousarray(arr.transpose(2, 0, 1)) / 255.0,
                              identity=ident, attributes=bits))
    return LabeledDataset(samples, C=len(id_map), k=k or 0, provenance=str(root))


def split_closed_world(ds: LabeledDataset, eval_fraction: float, seed: int) -> DatasetSplit:
    """Per-identity stratified split; every identity keeps at least one
    training sample, so eval identities are always a subset of train's."""
    if not 0.0 < eval_fraction < 1.0:
        raise DataError(f"eval_fraction must be in (0, 1), got {eval_fraction}")
    counts = ds.identity_counts()
    lonely = np.nonzero(counts < 2)[0]
    if lonely.size:
        raise DataError(f"closed split needs >= 2 samples per identity; identity {lonely[0]} has {counts[lonely[0]]}")
    rng = np.random.Generator(np.random.PCG64(seed))
    ids = ds.identities()
    train_idx, eval_idx = [], []
    for ident in range(ds.C):
        members = np.nonzero(ids == ident)[0]
        members = members[rng.permutation(len(members))]
        n_eval = min(int(np.floor(eval_fraction * len(members))), len(members) - 1)
        eval_idx.extend(members[:n_eval].tolist())
        train_idx.extend(members[n_eval:].tolist())
    train_idx.sort()
    eval_idx.sort()
    if not eval_idx:
        raise DataError("closed split produced an empty eval side; raise eval_fraction")
    return DatasetSplit(train=ds.subset(train_idx), eval=ds.subset(eval_idx), mode="closed")


def split_open_world(ds: LabeledDataset, eval_subject_fraction: float, seed: int) -> DatasetSplit:
    """Partition identities disjointly; original identity labels are kept so
    disjointness stays checkable downstream."""
    if not 0.0 < eval_subject_fraction < 1.0:
        raise DataError(f"eval_subject_fraction must be in (0, 1), got {eval_subject_fraction}")
    present = np.unique(ds.identities())
    if present.size < 2:
        raise DataError("open split needs at least 2 identities")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = present[rng.permutation(present.size)]
    n_eval = int(np.floor(eval_subject_fraction * present.size))
    n_eval = min(max(n_eval, 1), present.size - 1)
    eval_ids = set(order[:n_eval].tolist())
    ids = ds.identities()
    eval_idx = [i for i in range(len(ds)) if ids[i] in eval_ids]
    train_idx = [i for i in range(len(ds)) if ids[i] not in eval_ids]
    return DatasetSplit(train=ds.subset(train_idx), eval=ds.subset(eval_idx), mode="open")


def sample_pairs(ds: LabeledDataset, n_pairs: int, genuine_fraction: float,
                 seed: int) -> PairBatch:
    """Draw genuine and impostor index pairs; c = 1 exactly when the two
    identities differ.  round(genuine_fraction * n_pairs) pairs are genuine."""
    if n_pairs <= 0:
        raise DataError("n_pairs must be positive")
    if not 0.0 <= genuine_fraction <= 1.0:
        raise DataError("genuine_fraction must lie in [0, 1]")
    ids = ds.identities()
    counts = np.bincount(ids, minlength=ds.C)
    rich = np.nonzero(counts >= 2)[0]
    present = np.nonzero(counts >= 1)[0]
    n_genuine = int(round(genuine_fraction * n_pairs))
    n_impostor = n_pairs - n_genuine
    if n_genuine and rich.size == 0:
        raise DataError("genuine pairs requested but no identity has 2 samples")
    if n_impostor and present.size < 2:
        raise DataError("impostor pairs requested but dataset has < 2 identities")

    by_identity = {ident: np.nonzero(ids == ident)[0] for ident in present}
    rng = np.random.Generator(np.random.PCG64(seed))
    rows = np.empty((n_pairs, 3), dtype=np.int64)
    for p in range(n_genuine):
        ident = rich[rng.integers(rich.size)]
        i, j = rng.choice(by_identity[ident], size=2, replace=False)
        rows[p] = (i, j, 0)
    for p in range(n_genuine, n_pairs):
        a, b = rng.choice(present, size=2, replace=False)
        i = rng.choice(by_identity[a])
        j = rng.choice(by_identity[b])
        rows[p] = (i, j, 1)
    rows = rows[rng.permutation(n_pairs)]
    return PairBatch(rows)


@dataclass
class NormStats:
    mean: np.ndarray  # [channels]
    std: np.ndarray   # [channels], floored at 1e-6


def normalization_stats(train: LabeledDataset) -> NormStats:
    """Per-channel mean and std over all training pixels (train side only)."""
    imgs = train.images()
    mean = imgs.mean(axis=(0, 2, 3))
    std = np.maximum(imgs.std(axis=(0, 2, 3)), 1e-6)
    return NormStats(mean=mean.astype(np.float32), std=std.astype(np.float32))


def apply_normalization(sample: Sample, stats: NormStats) -> np.ndarray:
    """(image - mean) / std per channel.  Not idempotent: applying twice
    shifts by a different amount than applying once."""
    return ((sample.image - stats.mean[:, None, None]) / stats.std[:, None, None]).astype(np.float32)


def reindex_identities(ds: LabeledDataset) -> tuple[LabeledDataset, dict[int, int]]:
    """Densely re-index the identities present (ascending original label
    order).  Needed before classifier training on an open-split train side."""
    present = np.unique(ds.identities())
    mapping = {int(old): new for new, old in enumerate(present.tolist())}
    samples = [Sample(image=s.image, identity=mapping[s.identity], attributes=s.attributes)
               for s in ds.samples]
    out = LabeledDataset(samples, C=len(mapping), k=ds.k,
                         provenance=f"{ds.provenance}/reindexed")
    return out, mapping


def save_dataset(ds: LabeledDataset, out_dir) -> None:
    """Persist as raw .npy arrays plus a JSON sidecar (bit-deterministic,
    unlike zip containers, which embed timestamps)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "images.npy", ds.images())
    np.save(out / "identities.npy", ds.identities())
    np.save(out / "attributes.npy", ds.attributes())
    meta = {"C": ds.C, "k": ds.k, "provenance": ds.provenance}
    (out / "dataset.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def load_dataset(in_dir) -> LabeledDataset:
    src = Path(in_dir)
    meta = json.loads((src / "dataset.json").read_text())
    images = np.load(src / "images.npy")
    identities = np.load(src / "identities.npy")
    attributes = np.load(src / "attributes.npy")
    samples = [Sample(image=images[i], identity=int(identities[i]), attributes=attributes[i])
               for i in range(len(images))]
    return LabeledDataset(samples, C=int(meta["C"]), k=int(meta["k"]),
                          provenance=str(meta.get("provenance", str(src))))
