"""Instance-feature aggregation: prompt-guided pooling, mean/max/attention baselines, and the prototype-diversity penalty."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics
from .errors import ContractViolationError, DegenerateInputError
from .prompts import PrototypeSet, _seeded_uniform

UNIT_NORM_ATOL = 1e-6


@dataclass(frozen=True)
class PoolingResult:
    """Aggregation weights (column-stochastic, one column per prototype) and the bag feature."""

    W: np.ndarray  # (n_i, n_p)
    F: np.ndarray  # (m,)

    def __post_init__(self):
        if not np.allclose(self.W.sum(axis=0), 1.0, atol=1e-9):
            raise ContractViolationError("aggregation weight columns must sum to 1")
        if not (np.all(self.W > 0.0) and np.all(self.W <= 1.0)):
            raise ContractViolationError("aggregation weights must lie in (0, 1]")
        if not np.all(np.isfinite(self.F)):
            raise ContractViolationError("bag feature must be finite")


@dataclass
class AttentionParams:
    """Trainable parameters of the gate-free attention pooling baseline."""

    V: np.ndarray  # (d_att, m)
    w: np.ndarray  # (d_att,)

    def __post_init__(self):
        if self.V.ndim != 2 or self.w.ndim != 1 or self.V.shape[0] != self.w.shape[0]:
            raise ContractViolationError(
                f"attention shapes inconsistent: V {self.V.shape}, w {self.w.shape}"
            )
        if self.V.shape[0] < 1:
            raise ContractViolationError("attention dimension must be >= 1")


def make_attention_params(seed: int, d_att: int, feature_dim: int) -> AttentionParams:
    return AttentionParams(
        V=_seeded_uniform(seed, "attention-V", (d_att, feature_dim)),
        w=_seeded_uniform(seed, "attention-w", (d_att,)),
    )


def _bag_matrix(Z, require_unit: bool = False) -> np.ndarray:
    Z = numerics.as_matrix(Z, "Z")
    if Z.shape[0] == 0:
        raise DegenerateInputError("empty bag")
    if require_unit:
        norms = np.linalg.norm(Z, axis=1)
        if not np.allclose(norms, 1.0, atol=UNIT_NORM_ATOL):
            raise ContractViolationError("instance features must be unit norm")
    return Z


def _proto_matrix(P) -> np.ndarray:
    if isinstance(P, PrototypeSet):
        return P.P
    P = numerics.as_matrix(P, "P")
    if not np.allclose(np.linalg.norm(P, axis=1), 1.0, atol=UNIT_NORM_ATOL):
        raise ContractViolationError("prototype rows must be unit norm")
    return P


def prompt_guided_pool(Z, P) -> PoolingResult:
    """Aggregate instances by softmax similarity to text prototypes.

    W holds one softmax-normalized column per prototype; the bag feature is
    the mean over prototypes of the weight-combined instance features, i.e.
    a convex combination of the instance rows.
    """
    Z = _bag_matrix(Z, require_unit=True)
    Pm = _proto_matrix(P)
    if Z.shape[1] != Pm.shape[1]:
        raise ContractViolationError(
            f"feature dims differ: instances {Z.shape[1]}, prototypes {Pm.shape[1]}"
        )
    W = numerics.softmax_columns(Z @ Pm.T)
    F = (W.T @ Z).mean(axis=0)
    return PoolingResult(W=W, F=F)


def mean_pool(Z) -> np.ndarray:
    Z = _bag_matrix(Z)
    return Z.mean(axis=0)


def max_pool(Z) -> np.ndarray:
    Z = _bag_matrix(Z)
    return Z.max(axis=0)


def attention_pool(Z, params: AttentionParams) -> tuple[np.ndarray, np.ndarray]:
    """Gate-free attention pooling: a_j ∝ exp(w·tanh(V z_j)), F = Σ a_j z_j."""
    Z = _bag_matrix(Z)
    if Z.shape[1] != params.V.shape[1]:
        raise ContractViolationError(
            f"feature dims differ: instances {Z.shape[1]}, attention {params.V.shape[1]}"
        )
    logits = np.tanh(Z @ params.V.T) @ params.w
    weights = numerics.softmax_columns(logits[:, None])[:, 0]
    return weights, weights @ Z


def diversity_loss(P) -> float:
    """Mean off-diagonal entry of the prototype Gram matrix (average pairwise cosine)."""
    Pm = _proto_matrix(P)
    n = Pm.shape[0]
    if n < 2:
        raise ContractViolationError("diversity loss needs at least 2 prototypes")
    gram = Pm @ Pm.T
    return float((gram.sum() - np.trace(gram)) / (n * (n - 1)))


def weight_diversity_loss(W) -> float:
    """Variant penalty on the aggregation weights: mean off-diagonal column correlation of W."""
    W = numerics.as_matrix(W, "W")
    n = W.shape[1]
    if n < 2:
        raise ContractViolationError("weight diversity needs at least 2 columns")
    C = numerics.l2_normalize_rows(W.T, "weight columns")
    gram = C @ C.T
    return float((gram.sum() - np.trace(gram)) / (n * (n - 1)))
