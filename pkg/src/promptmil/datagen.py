"""Seeded synthetic MIL benchmark: bags of unit-norm features drawn from
phenotype clusters, with hidden instance labels obeying the bag-label rule
(a bag is positive iff it contains at least one positive instance).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics
from .errors import ConfigurationError

DEFAULT_TEST_RESERVE = 50


@dataclass
class Bag:
    """Instance feature rows plus the bag label; instance labels are hidden ground truth."""

    features: np.ndarray  # (n_i, m) float64
    label: int
    instance_labels: np.ndarray | None = None  # (n_i,) 0/1, None when unknown

    @property
    def size(self) -> int:
        return self.features.shape[0]


@dataclass
class SyntheticConfig:
    m: int
    n_phenotypes: int
    positive_phenotypes: tuple[int, ...]
    sigma: float
    witness_rate: float
    bag_size: tuple[int, int]
    bags_per_class: int
    seed: int
    centers: np.ndarray | None = None  # explicit (n_phenotypes, m) unit rows; None -> seeded Gram-Schmidt

    def __post_init__(self):
        self.positive_phenotypes = tuple(sorted(set(self.positive_phenotypes)))
        if self.m < 1 or self.n_phenotypes < 2:
            raise ConfigurationError("need m >= 1 and at least 2 phenotypes")
        if not self.positive_phenotypes:
            raise ConfigurationError("positive phenotype subset must be nonempty")
        if len(self.positive_phenotypes) >= self.n_phenotypes:
            raise ConfigurationError("positive phenotype subset must be a proper subset")
        if any(not 0 <= i < self.n_phenotypes for i in self.positive_phenotypes):
            raise ConfigurationError("positive phenotype index out of range")
        if not 0.0 < self.witness_rate <= 1.0:
            raise ConfigurationError(f"witness_rate must be in (0, 1], got {self.witness_rate}")
        if self.sigma < 0.0:
            raise ConfigurationError("sigma must be >= 0")
        lo, hi = self.bag_size
        if lo < 1 or hi < lo:
            raise ConfigurationError(f"bad bag_size range {self.bag_size}")
        if self.bags_per_class < 1:
            raise ConfigurationError("bags_per_class must be >= 1")
        if self.centers is None:
            if self.n_phenotypes > self.m:
                raise ConfigurationError("Gram-Schmidt centers need n_phenotypes <= m")
        else:
            self.centers = np.asarray(self.centers, dtype=np.float64)
            if self.centers.shape != (self.n_phenotypes, self.m):
                raise ConfigurationError(
                    f"centers must be ({self.n_phenotypes}, {self.m}), got {self.centers.shape}"
                )
            if not np.allclose(np.linalg.norm(self.centers, axis=1), 1.0, atol=1e-9):
                raise ConfigurationError("explicit centers must have unit-norm rows")


@dataclass
class SyntheticDataset:
    bags: list[Bag]
    config: SyntheticConfig
    centers: np.ndarray = field(repr=False, default=None)


def gram_schmidt(rows: np.ndarray) -> np.ndarray:
    """Orthonormalize rows in order; rejects (near-)dependent inputs."""
    rows = numerics.as_matrix(rows, "rows")
    out = np.zeros_like(rows)
    for i, r in enumerate(rows):
        v = r - out[:i].T @ (out[:i] @ r)
        norm = np.linalg.norm(v)
        if norm < 1e-10:
            raise ConfigurationError(f"row {i} is linearly dependent on earlier rows")
        out[i] = v / norm
    return out


def centers_from_prototypes(P0: np.ndarray) -> np.ndarray:
    """Cluster centers aligned with text prototypes (orthonormalized in row order).

    Emulates a pretrained joint embedding space: instance clusters sit where
    the corresponding phenotype descriptions encode to.
    """
    return gram_schmidt(P0)


def audit_label_consistency(bags) -> None:
    """Hard post-generation audit of the bag-label rule."""
    for i, bag in enumerate(bags):
        if bag.instance_labels is None:
            raise AssertionError(f"bag {i} is missing instance labels")
        positives = int(np.sum(bag.instance_labels))
        if bag.label == 0 and positives != 0:
            raise AssertionError(f"negative bag {i} contains {positives} positive instances")
        if bag.label == 1 and positives == 0:
            raise AssertionError(f"positive bag {i} contains no positive instance")


def generate(cfg: SyntheticConfig) -> SyntheticDataset:
    """Deterministic dataset: label-0 bags sample only negative phenotypes; label-1
    bags place ceil(witness_rate * n_i) positive-phenotype instances (at least one)
    at random positions. All features are unit-norm."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    if cfg.centers is not None:
        centers = cfg.centers
    else:
        centers = gram_schmidt(rng.normal(size=(cfg.n_phenotypes, cfg.m)))
    positive = np.array(cfg.positive_phenotypes)
    negative = np.array([i for i in range(cfg.n_phenotypes) if i not in cfg.positive_phenotypes])
    lo, hi = cfg.bag_size

    def sample_instances(phenotypes):
        noise = cfg.sigma * rng.standard_normal((len(phenotypes), cfg.m))
        return numerics.l2_normalize_rows(centers[phenotypes] + noise)

    bags: list[Bag] = []
    for label in (0, 1):
        for _ in range(cfg.bags_per_class):
            n_i = int(rng.integers(lo, hi + 1))
            phenotypes = rng.choice(negative, size=n_i)
            inst_labels = np.zeros(n_i, dtype=np.uint8)
            if label == 1:
                n_wit = max(1, math.ceil(cfg.witness_rate * n_i))
                where = rng.choice(n_i, size=n_wit, replace=False)
                phenotypes[where] = rng.choice(positive, size=n_wit)
                inst_labels[where] = 1
            bags.append(
                Bag(features=sample_instances(phenotypes), label=label, instance_labels=inst_labels)
            )
    audit_label_consistency(bags)
    return SyntheticDataset(bags=bags, config=cfg, centers=centers)


def few_shot_split(
    dataset, shots: int, seed: int, reserve: int = DEFAULT_TEST_RESERVE
) -> tuple[list[Bag], list[Bag]]:
    """Stratified support/test split: exactly `shots` support bags per class,
    sampled without replacement; everything else is test."""
    bags = dataset.bags if isinstance(dataset, SyntheticDataset) else list(dataset)
    if shots < 1:
        raise ConfigurationError("shots must be >= 1")
    by_class: dict[int, list[int]] = {}
    for i, bag in enumerate(bags):
        by_class.setdefault(int(bag.label), []).append(i)
    if len(by_class) < 2:
        raise ConfigurationError("need at least 2 classes to split")

    support_idx: set[int] = set()
    for cls in sorted(by_class):
        idx = by_class[cls]
        if len(idx) < shots + reserve:
            raise ConfigurationError(
                f"class {cls} has {len(idx)} bags; need >= {shots} shots + {reserve} reserve"
            )
        rng = np.random.default_rng(np.random.SeedSequence([seed, cls]))
        chosen = rng.permutation(len(idx))[:shots]
        support_idx.update(idx[j] for j in chosen)

    support = [bags[i] for i in sorted(support_idx)]
    test = [bags[i] for i in range(len(bags)) if i not in support_idx]
    return support, test
