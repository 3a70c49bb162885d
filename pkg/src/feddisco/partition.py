"""Synthetic labeled data and label-skewed client partitions.

Two heterogeneity schemes are provided:

* ``dirichlet_partition`` (NIID-1): per category, client shares are drawn
  from ``Dirichlet(beta, ..., beta)``.
* ``biased_partition_niid2`` (NIID-2): a fraction of clients only hold a few
  categories while the rest hold every category.

``exponential_class_counts`` builds globally imbalanced class sizes that can
be fed to ``synth_gaussian_mixture`` before partitioning.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .distributions import CategoryDistribution, from_counts


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if labels.ndim != 1 or labels.shape[0] != features.shape[0]:
            raise ValueError("labels must be a vector with one entry per feature row")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def num_features(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def distribution(self) -> CategoryDistribution:
        return from_counts(self.class_counts(), self.num_classes)


@dataclass(frozen=True)
class PartitionPlan:
    """Disjoint per-client index lists into a dataset."""

    assignments: tuple[np.ndarray, ...]
    scheme: str
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        lists = tuple(np.asarray(a, dtype=np.int64) for a in self.assignments)
        object.__setattr__(self, "assignments", lists)

    @property
    def num_clients(self) -> int:
        return len(self.assignments)

    def sizes(self) -> np.ndarray:
        return np.array([a.size for a in self.assignments], dtype=np.int64)

    def validate(self, num_samples: int) -> None:
        seen = np.zeros(num_samples, dtype=bool)
        for k, idx in enumerate(self.assignments):
            if idx.size == 0:
                raise ValueError(f"client {k} has no samples")
            if idx.min() < 0 or idx.max() >= num_samples:
                raise ValueError(f"client {k} has an index outside [0, {num_samples})")
            if np.any(seen[idx]) or np.unique(idx).size != idx.size:
                raise ValueError(f"client {k} shares samples with another client")
            seen[idx] = True

    def client_counts(self, labels, num_classes: int) -> np.ndarray:
        labels = np.asarray(labels)
        return np.stack([np.bincount(labels[idx], minlength=num_classes) for idx in self.assignments])

    def client_distributions(self, labels, num_classes: int) -> list[CategoryDistribution]:
        return [from_counts(row, num_classes) for row in self.client_counts(labels, num_classes)]

    def to_json(self) -> str:
        doc = {
            "scheme": self.scheme,
            "params": self.params,
            "clients": {str(k): idx.tolist() for k, idx in enumerate(self.assignments)},
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PartitionPlan":
        doc = json.loads(text)
        clients = doc["clients"]
        lists = [clients[str(k)] for k in range(len(clients))]
        return cls(tuple(lists), doc["scheme"], doc.get("params", {}))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


def _class_means(num_classes: int, num_features: int, separation: float) -> np.ndarray:
    means = np.zeros((num_classes, num_features))
    if num_features >= num_classes:
        # scaled basis vectors: every pair sits exactly `separation` apart
        means[np.arange(num_classes), np.arange(num_classes)] = separation / math.sqrt(2.0)
    else:
        # not enough room for an equidistant layout; space them along one axis
        means[:, 0] = separation * (np.arange(num_classes) - (num_classes - 1) / 2.0)
    return means


def synth_gaussian_mixture(
    num_classes: int,
    num_features: int,
    per_class_counts,
    class_separation: float,
    seed: int,
) -> LabeledDataset:
    """Isotropic unit-variance Gaussian blobs, one per class, in shuffled order."""
    counts = np.asarray(per_class_counts, dtype=np.int64)
    if num_classes < 2 or num_features < 1:
        raise ValueError("need at least 2 classes and 1 feature")
    if counts.shape != (num_classes,) or np.any(counts < 0):
        raise ValueError("per_class_counts must be one non-negative count per class")
    if np.count_nonzero(counts) < 2:
        raise ValueError("at least two classes must be non-empty")

    rng = np.random.default_rng(seed)
    means = _class_means(num_classes, num_features, class_separation)
    labels = np.repeat(np.arange(num_classes), counts)
    features = means[labels] + rng.standard_normal((labels.size, num_features))
    order = rng.permutation(labels.size)
    return LabeledDataset(features[order], labels[order], num_classes)


def exponential_class_counts(n1: int, rho: float, num_classes: int) -> np.ndarray:
    """Class sizes ``n_c = round(n1 * rho ** (-(c - 1) / (C - 1)))``."""
    if rho < 1:
        raise ValueError("imbalance ratio rho must be >= 1")
    if n1 < 1 or num_classes < 2:
        raise ValueError("need n1 >= 1 and at least 2 classes")
    exponents = -np.arange(num_classes) / (num_classes - 1)
    counts = np.floor(n1 * np.power(float(rho), exponents) + 0.5).astype(np.int64)
    counts[0] = n1
    return counts


def _largest_remainder(shares: np.ndarray, total: int) -> np.ndarray:
    raw = shares * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # stable sort keeps ties in client-index order
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _fill_empty_clients(lists: list[list[int]]) -> None:
    while True:
        empty = [k for k, idx in enumerate(lists) if not idx]
        if not empty:
            return
        donor = max(range(len(lists)), key=lambda k: len(lists[k]))
        if len(lists[donor]) < 2:
            raise ValueError("not enough samples to give every client one")
        lists[empty[0]].append(lists[donor].pop())


def _labels_and_classes(labels, num_classes: int | None) -> tuple[np.ndarray, int]:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.size == 0:
        raise ValueError("labels must be a non-empty vector")
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    return labels, num_classes


def dirichlet_partition(
    labels,
    num_clients: int,
    beta: float,
    seed: int,
    num_classes: int | None = None,
) -> PartitionPlan:
    """NIID-1 split: each category is divided by a ``Dirichlet(beta)`` draw.

    Counts come from largest-remainder rounding of the sampled shares, so each
    category is fully assigned. A client left with nothing takes one sample
    from the currently largest client.
    """
    if beta <= 0:
        raise ValueError("beta must be > 0")
    if num_clients < 2:
        raise ValueError("need at least 2 clients")
    labels, num_classes = _labels_and_classes(labels, num_classes)
    rng = np.random.default_rng(seed)
    lists: list[list[int]] = [[] for _ in range(num_clients)]
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            raise ValueError(f"category {c} has no samples")
        rng.shuffle(idx)
        shares = rng.dirichlet(np.full(num_clients, float(beta)))
        counts = _largest_remainder(shares, idx.size)
        start = 0
        for k, cnt in enumerate(counts):
            lists[k].extend(idx[start:start + cnt].tolist())
            start += cnt
    _fill_empty_clients(lists)
    return PartitionPlan(
        tuple(np.sort(np.array(x, dtype=np.int64)) for x in lists),
        "dirichlet",
        {"beta": float(beta), "seed": int(seed)},
    )


def num_biased_clients(num_clients: int, biased_fraction: float) -> int:
    # tolerance keeps 5/6 * 6 from rounding up to 6
    return min(num_clients, max(1, math.ceil(biased_fraction * num_clients - 1e-9)))


def niid2_categories(num_clients: int, biased_fraction: float, num_classes: int) -> list[list[int]]:
    """Categories held by each client under NIID-2 (round-robin for biased ones)."""
    n_biased = num_biased_clients(num_clients, biased_fraction)
    per_client = math.ceil(num_classes / n_biased)
    cats = []
    for k in range(num_clients):
        if k < n_biased:
            cats.append(sorted({(k * per_client + j) % num_classes for j in range(per_client)}))
        else:
            cats.append(list(range(num_classes)))
    return cats


def biased_partition_niid2(
    labels,
    num_clients: int,
    biased_fraction: float,
    seed: int,
    num_classes: int | None = None,
) -> PartitionPlan:
    """NIID-2 split: biased clients see a few categories, the rest see all.

    The first ``ceil(biased_fraction * K)`` clients are biased. Each category
    is shuffled and divided as evenly as possible among the clients that
    claim it; any remainder goes to the lowest-indexed claimants.
    """
    if num_clients < 2:
        raise ValueError("need at least 2 clients")
    if not 0 < biased_fraction < 1:
        raise ValueError("biased_fraction must lie strictly between 0 and 1")
    labels, num_classes = _labels_and_classes(labels, num_classes)
    rng = np.random.default_rng(seed)
    cats = niid2_categories(num_clients, biased_fraction, num_classes)
    lists: list[list[int]] = [[] for _ in range(num_clients)]
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        claimants = [k for k in range(num_clients) if c in cats[k]]
        for k, chunk in zip(claimants, np.array_split(idx, len(claimants))):
            lists[k].extend(chunk.tolist())
    for k, idx in enumerate(lists):
        if not idx:
            raise ValueError(f"client {k} received no samples; its categories are empty")
    return PartitionPlan(
        tuple(np.sort(np.array(x, dtype=np.int64)) for x in lists),
        "niid2",
        {
            "biased_fraction": float(biased_fraction),
            "num_biased": num_biased_clients(num_clients, biased_fraction),
            "seed": int(seed),
        },
    )
