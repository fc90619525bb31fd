"""Prompt assembly and frozen toy encoders.

A prompt group is a three-part token sequence: learnable context rows,
fixed descriptive tokens parsed from a description file, and fixed
class-template tokens. The text encoder (mean pool + frozen projection +
L2 norm) turns instance-level groups into prototype rows and bag-level
groups into class-weight rows. The only trainable state in the whole
model is the learnable context matrices.

Description file format (UTF-8 text)::

    level=instance; tag=Lymphocytes; polarity=negative
    an image patch of [CLASS]
    free-text visual description, any number of lines

Bag-level files use ``polarity=n/a``; bag files sorted by filename define
the class index order.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import numerics
from .errors import (
    ConfigurationError,
    ContractViolationError,
    DegenerateInputError,
    VocabularyError,
)

INIT_SCALE = 0.05  # all embeddings and learnable tokens start uniform in [-0.05, 0.05]
DEFAULT_WORD_DIM = 512

_LEVELS = ("instance", "bag")
_POLARITIES = ("positive", "negative", "n/a")


def _hash_key(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:16], "big")


def _seeded_uniform(seed: int, salt: str, shape) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, _hash_key(salt)]))
    return rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)


def tokenize(text: str) -> list[str]:
    """Whitespace-split lowercase words."""
    return text.lower().split()


class Vocabulary:
    """Token-to-id map with a deterministic seeded embedding per token.

    Embeddings are keyed by (seed, token) so they do not depend on insertion
    order. The table is frozen once all description files are loaded; lookups
    of unknown tokens after freezing raise ``VocabularyError``.
    """

    def __init__(self, seed: int, dim: int = DEFAULT_WORD_DIM):
        self.seed = seed
        self.dim = dim
        self._ids: dict[str, int] = {}
        self._tokens: list[str] = []
        self._rows: list[np.ndarray] = []
        self._frozen = False

    def __len__(self) -> int:
        return len(self._tokens)

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> None:
        self._frozen = True

    def add(self, token: str) -> int:
        existing = self._ids.get(token)
        if existing is not None:
            return existing
        if self._frozen:
            raise VocabularyError(f"unknown token {token!r} (vocabulary is frozen)")
        row = _seeded_uniform(self.seed, "token:" + token, (self.dim,))
        row.setflags(write=False)
        idx = len(self._tokens)
        self._ids[token] = idx
        self._tokens.append(token)
        self._rows.append(row)
        return idx

    def add_text(self, text: str) -> list[int]:
        return [self.add(t) for t in tokenize(text)]

    def id_of(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise VocabularyError(f"unknown token {token!r}") from None

    def token_of(self, idx: int) -> str:
        return self._tokens[idx]

    def rows(self, ids) -> np.ndarray:
        for i in ids:
            if not 0 <= i < len(self._rows):
                raise VocabularyError(f"unknown token id {i}")
        if not ids:
            return np.zeros((0, self.dim))
        return np.stack([self._rows[i] for i in ids])

    def table(self) -> np.ndarray:
        return self.rows(list(range(len(self._tokens))))


@dataclass(frozen=True)
class EncoderSpec:
    """A frozen encoder: either a seeded linear projection or a pass-through."""

    kind: str  # "toy-projection" | "precomputed"
    feature_dim: int
    seed: int
    projection: np.ndarray | None = None  # (input_dim, feature_dim), frozen

    def __post_init__(self):
        if self.kind not in ("toy-projection", "precomputed"):
            raise ConfigurationError(f"unknown encoder kind {self.kind!r}")
        if self.kind == "toy-projection":
            if self.projection is None or self.projection.shape[1] != self.feature_dim:
                raise ConfigurationError("toy-projection encoder needs an (input_dim, m) projection")
        elif self.projection is not None:
            raise ConfigurationError("precomputed encoder takes no projection")


def text_encoder(seed: int, word_dim: int, feature_dim: int) -> EncoderSpec:
    proj = _seeded_uniform(seed, "text-projection", (word_dim, feature_dim))
    proj.setflags(write=False)
    return EncoderSpec("toy-projection", feature_dim, seed, proj)


def image_encoder(
    feature_dim: int, seed: int = 0, kind: str = "precomputed", raw_dim: int | None = None
) -> EncoderSpec:
    if kind == "precomputed":
        return EncoderSpec("precomputed", feature_dim, seed)
    if raw_dim is None:
        raise ConfigurationError("toy-projection image encoder needs raw_dim")
    proj = _seeded_uniform(seed, "image-projection", (raw_dim, feature_dim))
    proj.setflags(write=False)
    return EncoderSpec("toy-projection", feature_dim, seed, proj)


@dataclass
class PromptGroup:
    """Three-part prompt: learnable context, descriptive tokens, class tokens.

    ``learnable`` may be shared (aliased) between groups of the same level;
    the trainer updates it in place.
    """

    learnable: np.ndarray  # (M, word_dim), trainable
    descriptive_tokens: list[int]
    class_tokens: list[int]
    level: str
    tag: str
    polarity: str | None = None

    def __post_init__(self):
        if self.level not in _LEVELS:
            raise ConfigurationError(f"unknown prompt level {self.level!r}")
        if not self.class_tokens:
            raise ConfigurationError(f"prompt group {self.tag!r} has an empty class template")


@dataclass(frozen=True)
class PromptSpec:
    """A parsed description file, before any learnable context exists."""

    level: str
    tag: str
    polarity: str | None
    template: str
    description: str
    source: str


@dataclass(frozen=True)
class PrototypeSet:
    """Unit-norm instance prototype rows with their tags and polarities."""

    P: np.ndarray  # (n_p, m)
    tags: tuple[str, ...]
    polarities: tuple[str, ...]

    def __post_init__(self):
        if self.P.shape[0] < 2:
            raise ContractViolationError("prototype sets need at least 2 rows")
        norms = np.linalg.norm(self.P, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise ContractViolationError("prototype rows must be unit norm")

    @property
    def positive_indices(self) -> list[int]:
        return [i for i, p in enumerate(self.polarities) if p == "positive"]


@dataclass(frozen=True)
class BagClassWeights:
    """Unit-norm class weight rows, one per bag-level prompt group."""

    B: np.ndarray  # (K, m)
    tags: tuple[str, ...]

    def __post_init__(self):
        if self.B.shape[0] < 2:
            raise ContractViolationError("need at least 2 bag classes")
        norms = np.linalg.norm(self.B, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise ContractViolationError("class weight rows must be unit norm")


def parse_description_file(path) -> PromptSpec:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if len(lines) < 2:
        raise ConfigurationError(f"{path}:1: expected a header line and a class template line")

    fields = {}
    for part in lines[0].split(";"):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigurationError(f"{path}:1: malformed header field {part!r}")
        key, value = (s.strip() for s in part.split("=", 1))
        fields[key] = value
    if set(fields) != {"level", "tag", "polarity"}:
        raise ConfigurationError(
            f"{path}:1: header must define exactly level, tag, polarity (got {sorted(fields)})"
        )
    level, tag, polarity = fields["level"], fields["tag"], fields["polarity"]
    if level not in _LEVELS:
        raise ConfigurationError(f"{path}:1: level must be instance or bag, got {level!r}")
    if polarity not in _POLARITIES:
        raise ConfigurationError(f"{path}:1: polarity must be one of {_POLARITIES}, got {polarity!r}")
    if level == "instance" and polarity == "n/a":
        raise ConfigurationError(f"{path}:1: instance-level prompts need positive or negative polarity")
    if level == "bag" and polarity != "n/a":
        raise ConfigurationError(f"{path}:1: bag-level prompts must use polarity=n/a")

    template = lines[1].strip()
    if template.count("[CLASS]") != 1:
        raise ConfigurationError(f"{path}:2: class template must contain [CLASS] exactly once")

    description = " ".join(line.strip() for line in lines[2:] if line.strip())
    return PromptSpec(
        level=level,
        tag=tag,
        polarity=None if polarity == "n/a" else polarity,
        template=template,
        description=description,
        source=str(path),
    )


@dataclass
class PromptLibrary:
    """Parsed description files plus the frozen vocabulary and encoders."""

    vocab: Vocabulary
    text_enc: EncoderSpec
    image_enc: EncoderSpec
    instance_specs: list[PromptSpec] = field(default_factory=list)
    bag_specs: list[PromptSpec] = field(default_factory=list)

    @property
    def class_names(self) -> list[str]:
        return [s.tag for s in self.bag_specs]

    def _group_from_spec(self, spec: PromptSpec, learnable: np.ndarray, coop: bool) -> PromptGroup:
        descriptive = "" if (coop and spec.level == "bag") else spec.description
        return PromptGroup(
            learnable=learnable,
            descriptive_tokens=[self.vocab.id_of(t) for t in tokenize(descriptive)],
            class_tokens=[self.vocab.id_of(t) for t in tokenize(spec.template.replace("[CLASS]", spec.tag))],
            level=spec.level,
            tag=spec.tag,
            polarity=spec.polarity,
        )

    def make_groups(self, m_tokens: int, seed: int, bag_prompt_mode: str = "full") -> list[PromptGroup]:
        """Fresh prompt groups with newly initialized learnable contexts.

        All instance-level groups share one context matrix; each bag-level
        group carries its own class-specific context, independent of the
        instance one. ``bag_prompt_mode="coop"`` drops the descriptive part
        of the bag-level prompts.
        """
        if bag_prompt_mode not in ("full", "coop"):
            raise ConfigurationError(f"unknown bag prompt mode {bag_prompt_mode!r}")
        if m_tokens < 0:
            raise ConfigurationError("learnable token count must be >= 0")
        coop = bag_prompt_mode == "coop"
        inst_ctx = _seeded_uniform(seed, "instance-context", (m_tokens, self.vocab.dim))
        groups = [self._group_from_spec(s, inst_ctx, coop) for s in self.instance_specs]
        for i, s in enumerate(self.bag_specs):
            bag_ctx = _seeded_uniform(seed, f"bag-context:{i}", (m_tokens, self.vocab.dim))
            groups.append(self._group_from_spec(s, bag_ctx, coop))
        return groups


def load_prompt_library(
    prompt_dir,
    feature_dim: int,
    encoder_seed: int,
    word_dim: int = DEFAULT_WORD_DIM,
    image_kind: str = "precomputed",
    image_raw_dim: int | None = None,
) -> PromptLibrary:
    """Parse every ``*.txt`` description file under ``prompt_dir`` (sorted order)."""
    prompt_dir = Path(prompt_dir)
    paths = sorted(prompt_dir.glob("*.txt"))
    if not paths:
        raise ConfigurationError(f"no description files (*.txt) in {prompt_dir}")
    specs = [parse_description_file(p) for p in paths]
    instance_specs = [s for s in specs if s.level == "instance"]
    bag_specs = [s for s in specs if s.level == "bag"]
    if len(instance_specs) < 2:
        raise ConfigurationError(f"{prompt_dir}: need at least 2 instance-level description files")
    if len(bag_specs) < 2:
        raise ConfigurationError(f"{prompt_dir}: need at least 2 bag-level description files")

    vocab = Vocabulary(encoder_seed, word_dim)
    for s in specs:
        vocab.add_text(s.description)
        vocab.add_text(s.template.replace("[CLASS]", s.tag))
    vocab.freeze()
    return PromptLibrary(
        vocab=vocab,
        text_enc=text_encoder(encoder_seed, word_dim, feature_dim),
        image_enc=image_encoder(feature_dim, encoder_seed, image_kind, image_raw_dim),
        instance_specs=instance_specs,
        bag_specs=bag_specs,
    )


def assemble_prompt(group: PromptGroup, vocab: Vocabulary) -> np.ndarray:
    """Token-embedding sequence: [learnable][descriptive][class], one row per token."""
    fixed = vocab.rows(group.descriptive_tokens + group.class_tokens)
    learnable = np.asarray(group.learnable, dtype=np.float64)
    if learnable.ndim != 2 or (learnable.size and learnable.shape[1] != vocab.dim):
        raise ContractViolationError(
            f"learnable context must be (M, {vocab.dim}), got {learnable.shape}"
        )
    return np.concatenate([learnable, fixed], axis=0)


def encode_text(seq: np.ndarray, enc: EncoderSpec) -> np.ndarray:
    """Mean over sequence positions, frozen projection, L2 norm."""
    if enc.kind != "toy-projection":
        raise ContractViolationError("text encoding needs a toy-projection encoder")
    seq = numerics.as_matrix(seq, "token sequence")
    if seq.shape[0] == 0:
        raise DegenerateInputError("cannot encode an empty token sequence")
    if seq.shape[1] != enc.projection.shape[0]:
        raise ContractViolationError(
            f"sequence width {seq.shape[1]} does not match projection input {enc.projection.shape[0]}"
        )
    pooled = seq.mean(axis=0, keepdims=True)
    projected = pooled @ enc.projection
    return numerics.l2_normalize_rows(projected, "projected text feature")[0]


def encode_text_graph(group: PromptGroup, vocab: Vocabulary, enc: EncoderSpec, ctx: ad.Tensor) -> ad.Tensor:
    """Differentiable twin of assemble_prompt + encode_text; gradient flows into ctx only."""
    fixed = vocab.rows(group.descriptive_tokens + group.class_tokens)
    if fixed.shape[0] == 0 and ctx.shape[0] == 0:
        raise DegenerateInputError("cannot encode an empty token sequence")
    seq = ad.concat_rows([ctx, ad.constant(fixed)])
    pooled = ad.mean_rows(seq)
    projected = ad.matmul(pooled, ad.constant(enc.projection))
    return ad.normalize_rows(projected)


def encode_image(raw: np.ndarray, enc: EncoderSpec) -> np.ndarray:
    """Project (toy kind) or pass through (precomputed kind), then L2-normalize."""
    raw = numerics.as_vector(raw, "instance input")
    if enc.kind == "toy-projection":
        if raw.shape[0] != enc.projection.shape[0]:
            raise ContractViolationError(
                f"instance input dim {raw.shape[0]} does not match projection input {enc.projection.shape[0]}"
            )
        raw = raw @ enc.projection
    elif raw.shape[0] != enc.feature_dim:
        raise ContractViolationError(
            f"precomputed feature dim {raw.shape[0]} != encoder feature dim {enc.feature_dim}"
        )
    return numerics.l2_normalize_rows(raw[None, :], "instance feature")[0]


def encode_bag(features: np.ndarray, enc: EncoderSpec) -> np.ndarray:
    """Encode every instance row of a bag; returns unit-norm (n_i, m).

    Vectorized equivalent of calling encode_image per row.
    """
    features = numerics.as_matrix(features, "bag features")
    if features.shape[0] == 0:
        raise DegenerateInputError("empty bag")
    if enc.kind == "toy-projection":
        if features.shape[1] != enc.projection.shape[0]:
            raise ContractViolationError(
                f"instance input dim {features.shape[1]} does not match projection input {enc.projection.shape[0]}"
            )
        features = features @ enc.projection
    elif features.shape[1] != enc.feature_dim:
        raise ContractViolationError(
            f"precomputed feature dim {features.shape[1]} != encoder feature dim {enc.feature_dim}"
        )
    return numerics.l2_normalize_rows(features, "instance features")


def build_prototypes(groups, vocab: Vocabulary, enc: EncoderSpec) -> PrototypeSet:
    """Encode the instance-level groups into a prototype matrix."""
    inst = [g for g in groups if g.level == "instance"]
    if len(inst) < 2:
        raise ContractViolationError("need at least 2 instance-level prompt groups")
    rows = [encode_text(assemble_prompt(g, vocab), enc) for g in inst]
    return PrototypeSet(
        P=np.stack(rows),
        tags=tuple(g.tag for g in inst),
        polarities=tuple(g.polarity for g in inst),
    )


def bag_class_weights(groups, vocab: Vocabulary, enc: EncoderSpec) -> BagClassWeights:
    """Encode the bag-level groups into class weight rows (class order = group order)."""
    bag = [g for g in groups if g.level == "bag"]
    if len(bag) < 2:
        raise ContractViolationError("need at least 2 bag-level prompt groups")
    rows = [encode_text(assemble_prompt(g, vocab), enc) for g in bag]
    return BagClassWeights(B=np.stack(rows), tags=tuple(g.tag for g in bag))


def frozen_fingerprint(vocab: Vocabulary, text_enc: EncoderSpec, image_enc: EncoderSpec, groups) -> str:
    """SHA-256 over everything that must not change during training."""
    h = hashlib.sha256()
    h.update(f"vocab:{vocab.seed}:{vocab.dim}:{len(vocab)}".encode())
    h.update(vocab.table().tobytes())
    for name, enc in (("text", text_enc), ("image", image_enc)):
        h.update(f"{name}:{enc.kind}:{enc.feature_dim}:{enc.seed}".encode())
        if enc.projection is not None:
            h.update(enc.projection.tobytes())
    for g in groups:
        h.update(f"group:{g.level}:{g.tag}:{g.polarity}".encode())
        h.update(np.asarray(g.descriptive_tokens, dtype=np.int64).tobytes())
        h.update(np.asarray(g.class_tokens, dtype=np.int64).tobytes())
    return h.hexdigest()
