"""Exemplar memory: seeded per-class subset retention and mixed old/new
epoch batch streams."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DataError, ParameterError
from .data import Dataset

DEFAULT_EXEMPLAR_FRACTION = 0.1


@dataclass
class ExemplarStore:
    """Per-class retained samples.  Immutable by convention after an
    increment finishes; add_class is only called between increments."""

    seed: int
    by_class: dict = field(default_factory=dict)  # label -> (features, domains)

    def add_class(self, label, features, domains):
        if label in self.by_class:
            raise DataError(f"class {label} already has exemplars")
        self.by_class[int(label)] = (np.array(features), np.array(domains))

    def classes(self):
        return sorted(self.by_class)

    def count(self, label):
        return len(self.by_class[label][0])

    def total(self):
        return sum(len(f) for f, _ in self.by_class.values())

    def flatten(self):
        """All exemplars as (features, labels, domains) arrays."""
        if not self.by_class:
            return None
        feats, labels, doms = [], [], []
        for label in self.classes():
            f, d = self.by_class[label]
            feats.append(f)
            labels.append(np.full(len(f), label, dtype=np.int64))
            doms.append(d)
        return np.concatenate(feats), np.concatenate(labels), np.concatenate(doms)


def retained_count(class_size, fraction):
    """floor(fraction * n), but never below one exemplar per class."""
    return max(1, int(np.floor(fraction * class_size)))


def select_exemplars(dataset: Dataset, fraction, seed) -> ExemplarStore:
    """Uniform per-class selection without replacement, deterministic in seed."""
    if not 0.0 < fraction <= 1.0:
        raise ParameterError(f"fraction must lie in (0, 1], got {fraction}")
    if len(dataset) == 0:
        raise DataError("cannot select exemplars from an empty dataset")
    store = ExemplarStore(seed=seed)
    rng = np.random.default_rng(seed)
    for label in dataset.class_ids():
        mask = dataset.labels == label
        n = int(mask.sum())
        if n == 0:
            raise DataError(f"class {label} has no samples")
        keep = retained_count(n, fraction)
        idx = np.flatnonzero(mask)
        chosen = rng.choice(idx, size=keep, replace=False)
        chosen.sort()
        store.add_class(label, dataset.features[chosen], dataset.domains[chosen])
    return store


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    old_flags: np.ndarray  # True where the sample is a replayed exemplar

    def __len__(self):
        return len(self.features)


def build_increment_batches(store, new_features, new_labels, new_domains, batch_size, seed, epoch=0):
    """One epoch's shuffled batch stream over old exemplars plus new samples.

    Every sample appears exactly once; each carries an old/new routing flag.
    Deterministic in (seed, epoch).
    """
    old = store.flatten() if store is not None else None
    n_new = len(new_features)
    if old is None and n_new == 0:
        raise DataError("no exemplars and no new samples to batch")
    if old is not None and n_new > 0 and batch_size < 2:
        raise ParameterError("batch size must be >= 2 when mixing old and new samples")
    if batch_size < 1:
        raise ParameterError(f"batch size must be positive, got {batch_size}")
    parts_f, parts_l, parts_d, parts_o = [], [], [], []
    if old is not None:
        of, ol, od = old
        parts_f.append(of)
        parts_l.append(ol)
        parts_d.append(od)
        parts_o.append(np.ones(len(of), dtype=bool))
    if n_new > 0:
        parts_f.append(np.asarray(new_features))
        parts_l.append(np.asarray(new_labels, dtype=np.int64))
        parts_d.append(np.asarray(new_domains, dtype=np.int64))
        parts_o.append(np.zeros(n_new, dtype=bool))
    feats = np.concatenate(parts_f)
    labels = np.concatenate(parts_l)
    doms = np.concatenate(parts_d)
    flags = np.concatenate(parts_o)
    rng = np.random.default_rng((seed, epoch))
    order = rng.permutation(len(feats))
    batches = []
    for start in range(0, len(order), batch_size):
        sel = order[start : start + batch_size]
        batches.append(Batch(feats[sel], labels[sel], doms[sel], flags[sel]))
    return batches
