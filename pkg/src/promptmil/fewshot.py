"""Few-shot episode training of the learnable prompt tokens, inference, AUC
evaluation, and the repeated-runs stability protocol.

An episode trains only the learnable contexts (plus the attention baseline's
parameters when that pooler is selected) with full-batch momentum SGD on
cross-entropy over the support bags, optionally penalized by the prototype
diversity term. Everything else is frozen.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import numerics, pooling
from .datagen import SyntheticDataset, few_shot_split
from .errors import (
    ConfigurationError,
    ContractViolationError,
    DegenerateInputError,
    DivergenceError,
    EpisodeError,
)
from .pooling import AttentionParams, make_attention_params
from .prompts import (
    BagClassWeights,
    PromptLibrary,
    PrototypeSet,
    bag_class_weights,
    build_prototypes,
    encode_bag,
    encode_text_graph,
)

POOLERS = ("prompt_guided", "attention", "mean", "max")
BAG_PROMPT_MODES = ("full", "coop")
DIVERSITY_VARIANTS = ("prototype_gram", "weight_gram")


@dataclass
class TrainConfig:
    shots: int
    K: int = 2
    tau: float = 0.01
    lr: float = 0.002
    momentum: float = 0.9
    epochs: int = 200
    lambda_div: float = 0.1
    M: int = 10
    repeats: int = 5
    seed: int = 0
    pooler: str = "prompt_guided"
    bag_prompt_mode: str = "full"
    diversity_variant: str = "prototype_gram"
    d_att: int = 128
    test_reserve: int = 50

    def __post_init__(self):
        if self.shots < 1:
            raise ConfigurationError("shots must be >= 1")
        if self.K < 2:
            raise ConfigurationError("K must be >= 2")
        if not self.tau > 0:
            raise ConfigurationError("tau must be positive")
        if self.lr < 0 or self.momentum < 0:
            raise ConfigurationError("lr and momentum must be >= 0")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.repeats < 1:
            raise ConfigurationError("repeats must be >= 1")
        if self.M < 0:
            raise ConfigurationError("M must be >= 0")
        if self.lambda_div < 0:
            raise ConfigurationError("lambda_div must be >= 0")
        if self.pooler not in POOLERS:
            raise ConfigurationError(f"pooler must be one of {POOLERS}, got {self.pooler!r}")
        if self.bag_prompt_mode not in BAG_PROMPT_MODES:
            raise ConfigurationError(f"bag_prompt_mode must be one of {BAG_PROMPT_MODES}")
        if self.diversity_variant not in DIVERSITY_VARIANTS:
            raise ConfigurationError(f"diversity_variant must be one of {DIVERSITY_VARIANTS}")
        if self.d_att < 1:
            raise ConfigurationError("d_att must be >= 1")


@dataclass
class RepeatMetrics:
    repeat: int
    support_seed: int
    bag_auc: float
    instance_auc: float | None
    loss_history: list[float]
    snapshot: dict[str, np.ndarray]

    def __post_init__(self):
        if not 0.0 <= self.bag_auc <= 1.0:
            raise ContractViolationError("bag AUC out of [0, 1]")
        if self.instance_auc is not None and not 0.0 <= self.instance_auc <= 1.0:
            raise ContractViolationError("instance AUC out of [0, 1]")


@dataclass
class EpisodeResult:
    """Per-repeat metrics plus the best-of-repeats / mean / STD summary."""

    shots: int
    per_repeat: list[RepeatMetrics]
    best_repeat: int
    best_bag_auc: float
    best_instance_auc: float | None
    mean_bag_auc: float
    std_bag_auc: float
    mean_instance_auc: float | None = None
    std_instance_auc: float | None = None


def classify_bag(F, B, tau: float) -> np.ndarray:
    """Class probabilities from cosine similarity between the bag feature and
    each class weight row, softened by temperature."""
    Bm = B.B if isinstance(B, BagClassWeights) else numerics.as_matrix(B, "B")
    sims = np.array([numerics.cosine(F, row) for row in Bm])
    return numerics.class_probabilities(sims, tau)


def instance_scores(Z, P: PrototypeSet) -> np.ndarray:
    """Per-instance positive score: mean aggregation weight over the
    positive-polarity prototype columns."""
    positive = P.positive_indices
    if not positive:
        raise ConfigurationError("no positive-polarity prototype; instance scoring needs one")
    W = pooling.prompt_guided_pool(Z, P).W
    return W[:, positive].mean(axis=1)


def auc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative; ties
    count one half (midrank statistic)."""
    scores = numerics.as_vector(np.asarray(scores, dtype=np.float64), "scores")
    labels = np.asarray(labels)
    if labels.shape != scores.shape:
        raise ContractViolationError("scores and labels must have the same length")
    positive = labels == 1
    n_pos = int(positive.sum())
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInputError("AUC needs both classes present")

    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.shape[0])
    i = 0
    while i < scores.shape[0]:
        j = i
        while j + 1 < scores.shape[0] and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _unique_contexts(groups, pooler: str) -> list[np.ndarray]:
    """Distinct learnable arrays in group order; instance contexts only matter
    when prototypes are in the graph."""
    relevant = groups if pooler == "prompt_guided" else [g for g in groups if g.level == "bag"]
    seen: dict[int, np.ndarray] = {}
    for g in relevant:
        seen.setdefault(id(g.learnable), g.learnable)
    return list(seen.values())


def _check_support(support, cfg: TrainConfig) -> None:
    counts: dict[int, int] = {}
    for bag in support:
        label = int(bag.label)
        if not 0 <= label < cfg.K:
            raise EpisodeError(f"support bag label {label} out of range for K={cfg.K}")
        counts[label] = counts.get(label, 0) + 1
    expected = {c: cfg.shots for c in range(cfg.K)}
    if counts != expected:
        raise EpisodeError(f"support must hold exactly {cfg.shots} bags per class, got {counts}")


def objective_graph(Zs, ys, groups, library: PromptLibrary, cfg: TrainConfig, attention=None):
    """Build the training objective for one epoch.

    Returns ``(loss, leaves)`` where ``leaves`` maps parameter names to leaf
    tensors whose ``.value`` aliases the live parameter arrays.
    """
    vocab, enc = library.vocab, library.text_enc
    ctx_arrays = _unique_contexts(groups, cfg.pooler)
    ctx_leaves = {id(a): ad.leaf(a) for a in ctx_arrays}
    leaves = {f"ctx:{i}": ctx_leaves[id(a)] for i, a in enumerate(ctx_arrays)}

    def encoded(gs):
        return ad.concat_rows([encode_text_graph(g, vocab, enc, ctx_leaves[id(g.learnable)]) for g in gs])

    bag_groups = [g for g in groups if g.level == "bag"]
    if len(bag_groups) != cfg.K:
        raise EpisodeError(f"need {cfg.K} bag-level prompt groups, got {len(bag_groups)}")
    B = encoded(bag_groups)
    B_T = ad.transpose(B)

    P = P_T = None
    if cfg.pooler == "prompt_guided":
        inst_groups = [g for g in groups if g.level == "instance"]
        P = encoded(inst_groups)
        P_T = ad.transpose(P)

    att_V = att_w = None
    if cfg.pooler == "attention":
        if attention is None:
            raise ConfigurationError("attention pooler needs AttentionParams")
        att_V = ad.leaf(attention.V)
        att_w = ad.leaf(attention.w.reshape(-1, 1))
        leaves["att:V"] = att_V
        leaves["att:w"] = att_w

    total = None
    div_terms = []
    for Z, y in zip(Zs, ys):
        Zc = ad.constant(Z)
        if cfg.pooler == "prompt_guided":
            W = ad.softmax_cols(ad.matmul(Zc, P_T))
            F = ad.mean_rows(ad.matmul(ad.transpose(W), Zc))
            if cfg.lambda_div > 0 and cfg.diversity_variant == "weight_gram":
                div_terms.append(ad.gram_offdiag_mean(ad.normalize_rows(ad.transpose(W))))
        elif cfg.pooler == "attention":
            H = ad.tanh(ad.matmul(Zc, ad.transpose(att_V)))
            a = ad.softmax_cols(ad.matmul(H, att_w))
            F = ad.matmul(ad.transpose(a), Zc)
        elif cfg.pooler == "mean":
            F = ad.constant(pooling.mean_pool(Z)[None, :])
        else:
            F = ad.constant(pooling.max_pool(Z)[None, :])
        sims = ad.matmul(ad.normalize_rows(F), B_T)
        term = ad.ce_with_softmax(ad.scale(sims, 1.0 / cfg.tau), int(y))
        total = term if total is None else ad.add(total, term)

    loss = ad.scale(total, 1.0 / len(Zs))
    if cfg.pooler == "prompt_guided" and cfg.lambda_div > 0:
        if cfg.diversity_variant == "prototype_gram":
            penalty = ad.gram_offdiag_mean(P)
        else:
            per_bag = div_terms[0]
            for t in div_terms[1:]:
                per_bag = ad.add(per_bag, t)
            penalty = ad.scale(per_bag, 1.0 / len(div_terms))
        loss = ad.add(loss, ad.scale(penalty, cfg.lambda_div))
    return loss, leaves


def train_episode(support, groups, library: PromptLibrary, cfg: TrainConfig, attention=None):
    """Full-batch momentum SGD on the support bags; mutates the learnable
    contexts (and attention parameters) in place. Returns (groups, loss_history)."""
    _check_support(support, cfg)
    Zs = [encode_bag(bag.features, library.image_enc) for bag in support]
    ys = [int(bag.label) for bag in support]

    velocity: dict[str, np.ndarray] = {}
    history: list[float] = []
    for epoch in range(cfg.epochs):
        loss, leaves = objective_graph(Zs, ys, groups, library, cfg, attention)
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(epoch)
        history.append(value)
        loss.backward()
        for name, leaf in leaves.items():
            if leaf.grad is None or leaf.value.size == 0:
                continue
            buf = velocity.setdefault(name, np.zeros_like(leaf.value))
            buf *= cfg.momentum
            buf += leaf.grad
            leaf.value -= cfg.lr * buf
    return groups, history


@dataclass
class EvalMetrics:
    bag_auc: float
    instance_auc: float | None
    bag_scores: list[float] = field(repr=False, default_factory=list)


def _bag_feature(Z, cfg: TrainConfig, P=None, attention=None):
    """Pooled bag feature plus the per-instance scores the pooler defines."""
    if cfg.pooler == "prompt_guided":
        res = pooling.prompt_guided_pool(Z, P)
        return res.F, instance_scores(Z, P)
    if cfg.pooler == "attention":
        weights, F = pooling.attention_pool(Z, attention)
        return F, weights
    if cfg.pooler == "mean":
        return pooling.mean_pool(Z), None
    return pooling.max_pool(Z), None


def evaluate(test_bags, groups, library: PromptLibrary, cfg: TrainConfig, attention=None) -> EvalMetrics:
    """Bag AUC from the positive-class probability; instance AUC from the
    pooler's instance scores wherever hidden instance labels exist."""
    if cfg.K != 2:
        raise ConfigurationError("AUC evaluation is defined for K=2")
    if not test_bags:
        raise DegenerateInputError("empty test set")
    if cfg.pooler == "attention" and attention is None:
        raise ConfigurationError("attention pooler needs AttentionParams")
    P = build_prototypes(groups, library.vocab, library.text_enc)
    B = bag_class_weights(groups, library.vocab, library.text_enc)

    bag_scores, bag_labels = [], []
    inst_scores, inst_labels = [], []
    for bag in test_bags:
        Z = encode_bag(bag.features, library.image_enc)
        F, scores = _bag_feature(Z, cfg, P=P, attention=attention)
        probs = classify_bag(F, B, cfg.tau)
        bag_scores.append(float(probs[1]))
        bag_labels.append(int(bag.label))
        if scores is not None and bag.instance_labels is not None:
            inst_scores.extend(float(s) for s in scores)
            inst_labels.extend(int(v) for v in bag.instance_labels)

    bag_auc = auc(np.array(bag_scores), np.array(bag_labels))
    instance_auc = None
    if inst_labels and len(set(inst_labels)) == 2:
        instance_auc = auc(np.array(inst_scores), np.array(inst_labels))
    return EvalMetrics(bag_auc=bag_auc, instance_auc=instance_auc, bag_scores=bag_scores)


def _snapshot(groups, attention) -> dict[str, np.ndarray]:
    snap: dict[str, np.ndarray] = {}
    for level in ("instance", "bag"):
        arrays = {id(g.learnable): g.learnable for g in groups if g.level == level}
        for i, arr in enumerate(arrays.values()):
            snap[f"{level}_ctx_{i}"] = arr.copy()
    if attention is not None:
        snap["attention_V"] = attention.V.copy()
        snap["attention_w"] = attention.w.copy()
    return snap


def run_repeat(bags, library: PromptLibrary, cfg: TrainConfig, repeat: int) -> RepeatMetrics:
    """One episode of the stability protocol: fresh support draw, fresh
    learnable initialization, train, evaluate."""
    support_seed = cfg.seed + repeat
    support, test = few_shot_split(bags, cfg.shots, support_seed, cfg.test_reserve)
    groups = library.make_groups(cfg.M, seed=support_seed, bag_prompt_mode=cfg.bag_prompt_mode)
    attention = None
    if cfg.pooler == "attention":
        attention = make_attention_params(support_seed, cfg.d_att, library.image_enc.feature_dim)
    _, history = train_episode(support, groups, library, cfg, attention)
    metrics = evaluate(test, groups, library, cfg, attention)
    return RepeatMetrics(
        repeat=repeat,
        support_seed=support_seed,
        bag_auc=metrics.bag_auc,
        instance_auc=metrics.instance_auc,
        loss_history=history,
        snapshot=_snapshot(groups, attention),
    )


def _run_repeat_star(args):
    return run_repeat(*args)


def stability_run(dataset, library: PromptLibrary, cfg: TrainConfig, jobs: int = 1) -> EpisodeResult:
    """Repeat episodes with support seeds seed+0..repeats-1 and summarize:
    per-repeat metrics, best (selected by bag AUC), mean, and STD."""
    bags = dataset.bags if isinstance(dataset, SyntheticDataset) else list(dataset)
    tasks = [(bags, library, cfg, r) for r in range(cfg.repeats)]
    if jobs > 1 and cfg.repeats > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, cfg.repeats)) as pool:
            per_repeat = list(pool.map(_run_repeat_star, tasks))
    else:
        per_repeat = [run_repeat(*t) for t in tasks]

    bag_aucs = np.array([r.bag_auc for r in per_repeat])
    best = int(np.argmax(bag_aucs))
    inst_aucs = [r.instance_auc for r in per_repeat]
    have_inst = all(a is not None for a in inst_aucs)
    return EpisodeResult(
        shots=cfg.shots,
        per_repeat=per_repeat,
        best_repeat=best,
        best_bag_auc=float(bag_aucs[best]),
        best_instance_auc=per_repeat[best].instance_auc,
        mean_bag_auc=float(bag_aucs.mean()),
        std_bag_auc=float(bag_aucs.std()),
        mean_instance_auc=float(np.mean(inst_aucs)) if have_inst else None,
        std_instance_auc=float(np.std(inst_aucs)) if have_inst else None,
    )
