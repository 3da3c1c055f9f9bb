"""Synthetic multi-domain feature datasets plus lossless CSV ingestion.

Each domain draws class samples from isotropic Gaussian generators and then
applies a scanner-style affine shift: ``x <- gain * x + bias + noise``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DataError, FormatError, ParameterError

TEST_FRACTION = 0.2
DEFAULT_DIM = 16


@dataclass(frozen=True)
class ClassGenerator:
    label: int
    mean: np.ndarray
    cov_scale: float
    n_samples: int

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        if self.n_samples < 1:
            raise ParameterError(f"class {self.label}: need at least one sample")
        if self.cov_scale <= 0:
            raise ParameterError(f"class {self.label}: covariance scale must be positive")


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    classes: tuple
    gain: float = 1.0
    bias: float = 0.0
    noise_scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if self.gain <= 0:
            raise ParameterError(f"domain {self.domain_id}: gain must be positive")
        if self.noise_scale < 0:
            raise ParameterError(f"domain {self.domain_id}: noise scale must be nonnegative")


@dataclass
class Dataset:
    features: np.ndarray  # (n, dim)
    labels: np.ndarray  # (n,) int
    domains: np.ndarray  # (n,) int
    splits: np.ndarray  # (n,) str, 'train' or 'test'

    def __post_init__(self):
        n = len(self.features)
        if not (len(self.labels) == len(self.domains) == len(self.splits) == n):
            raise DataError("dataset field lengths disagree")

    def __len__(self):
        return len(self.features)

    @property
    def dim(self):
        return self.features.shape[1]

    def subset(self, mask):
        return Dataset(
            features=self.features[mask],
            labels=self.labels[mask],
            domains=self.domains[mask],
            splits=self.splits[mask],
        )

    def split(self, which):
        return self.subset(self.splits == which)

    def select(self, labels=None, domains=None, split=None):
        mask = np.ones(len(self), dtype=bool)
        if labels is not None:
            mask &= np.isin(self.labels, list(labels))
        if domains is not None:
            mask &= np.isin(self.domains, list(domains))
        if split is not None:
            mask &= self.splits == split
        return self.subset(mask)

    def class_ids(self):
        return sorted(int(c) for c in np.unique(self.labels))


def concat_datasets(parts):
    parts = list(parts)
    if not parts:
        raise DataError("nothing to concatenate")
    return Dataset(
        features=np.concatenate([p.features for p in parts]),
        labels=np.concatenate([p.labels for p in parts]),
        domains=np.concatenate([p.domains for p in parts]),
        splits=np.concatenate([p.splits for p in parts]),
    )


def generate_domain(spec: DomainSpec) -> Dataset:
    """Draw every class of a domain, apply the scanner transform, and mark a
    stratified 80/20 train/test split.  Deterministic in spec.seed."""
    if not spec.classes:
        raise ParameterError(f"domain {spec.domain_id} declares no classes")
    rng = np.random.default_rng(spec.seed)
    feats, labels, splits = [], [], []
    for cg in spec.classes:
        x = rng.normal(cg.mean, cg.cov_scale, size=(cg.n_samples, cg.mean.size))
        x = spec.gain * x + spec.bias
        if spec.noise_scale > 0:
            x = x + rng.normal(0.0, spec.noise_scale, size=x.shape)
        n_test = int(round(TEST_FRACTION * cg.n_samples))
        n_test = min(max(n_test, 0), cg.n_samples - 1)
        marks = np.array(["train"] * (cg.n_samples - n_test) + ["test"] * n_test)
        rng.shuffle(marks)
        feats.append(x)
        labels.append(np.full(cg.n_samples, cg.label, dtype=np.int64))
        splits.append(marks)
    n_total = sum(cg.n_samples for cg in spec.classes)
    return Dataset(
        features=np.concatenate(feats),
        labels=np.concatenate(labels),
        domains=np.full(n_total, spec.domain_id, dtype=np.int64),
        splits=np.concatenate(splits),
    )


def synthetic_domain_spec(
    domain_id,
    labels,
    dim=DEFAULT_DIM,
    samples_per_class=100,
    seed=0,
    gain=1.0,
    bias=0.0,
    noise_scale=0.0,
    separation=6.0,
    pair_offset=2.5,
    spread=1.0,
):
    """Place class generators so consecutive label pairs partially overlap.

    Pair centers sit at distance `separation` from the origin in random
    directions (near-orthogonal in high dimension); the two classes of a pair
    are split by `pair_offset`, which with unit spread leaves a few percent
    of Bayes-optimal confusion inside each pair.
    """
    rng = np.random.default_rng((seed, domain_id, 23))
    classes = []
    labels = list(labels)
    for k in range(0, len(labels), 2):
        center = rng.normal(0.0, 1.0, dim)
        center *= separation / np.linalg.norm(center)
        offset = rng.normal(0.0, 1.0, dim)
        offset *= pair_offset / np.linalg.norm(offset)
        for j, label in enumerate(labels[k : k + 2]):
            mean = center + (j - 0.5) * offset
            classes.append(
                ClassGenerator(label=label, mean=mean, cov_scale=spread, n_samples=samples_per_class)
            )
    return DomainSpec(
        domain_id=domain_id,
        classes=tuple(classes),
        gain=gain,
        bias=bias,
        noise_scale=noise_scale,
        seed=(seed * 1009 + domain_id) % (2**31),
    )


def save_dataset(dataset: Dataset, path):
    """CSV with header ``label,domain,split,f0..f{D-1}``; float repr is used
    so the round trip is exact at double precision."""
    dim = dataset.dim
    header = "label,domain,split," + ",".join(f"f{i}" for i in range(dim))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for i in range(len(dataset)):
            feats = ",".join(repr(float(v)) for v in dataset.features[i])
            fh.write(f"{int(dataset.labels[i])},{int(dataset.domains[i])},{dataset.splits[i]},{feats}\n")


def load_dataset(path) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty file")
    header = lines[0].split(",")
    if header[:3] != ["label", "domain", "split"] or len(header) < 4:
        raise FormatError(f"{path}: line 1: bad header {lines[0]!r}")
    dim = len(header) - 3
    if header[3:] != [f"f{i}" for i in range(dim)]:
        raise FormatError(f"{path}: line 1: feature columns must be f0..f{dim - 1}")
    feats, labels, domains, splits = [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        cells = line.split(",")
        if len(cells) != dim + 3:
            raise FormatError(f"{path}: line {lineno}: expected {dim + 3} cells, got {len(cells)}")
        try:
            labels.append(int(cells[0]))
            domains.append(int(cells[1]))
        except ValueError as exc:
            raise FormatError(f"{path}: line {lineno}: non-integer label/domain") from exc
        if cells[2] not in ("train", "test"):
            raise FormatError(f"{path}: line {lineno}: split must be train or test")
        splits.append(cells[2])
        try:
            feats.append([float(v) for v in cells[3:]])
        except ValueError as exc:
            raise FormatError(f"{path}: line {lineno}: non-numeric feature") from exc
    if not feats:
        raise FormatError(f"{path}: no data rows")
    return Dataset(
        features=np.array(feats, dtype=np.float64),
        labels=np.array(labels, dtype=np.int64),
        domains=np.array(domains, dtype=np.int64),
        splits=np.array(splits),
    )
