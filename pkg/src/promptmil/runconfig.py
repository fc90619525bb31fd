"""Strict JSON config files for the command-line tools.

Unknown keys are rejected and referenced paths must exist at load time, so
a stale or typo'd config fails before any work starts. The config echo a
command writes is itself a valid config file.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigurationError
from .fewshot import TrainConfig

DEFAULT_SHOTS = [1, 2, 4, 8, 16]


def _load_json(path: Path) -> dict:
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top-level value must be an object")
    return data


def _check_keys(path, data: dict, allowed: set[str], required: set[str]) -> None:
    unknown = set(data) - allowed
    if unknown:
        raise ConfigurationError(f"{path}: unknown keys {sorted(unknown)}")
    missing = required - set(data)
    if missing:
        raise ConfigurationError(f"{path}: missing required keys {sorted(missing)}")


def _as_shot_list(value) -> list[int]:
    if isinstance(value, int):
        value = [value]
    if not isinstance(value, list) or not value or not all(isinstance(s, int) and s >= 1 for s in value):
        raise ConfigurationError(f"shots must be a positive int or list of them, got {value!r}")
    return list(value)


@dataclass
class RunConfig:
    """Everything train/eval/ablate/stability need: paths plus training knobs."""

    task: str
    embeddings: Path
    prompt_dir: Path
    out_dir: Path
    shots: list[int] = field(default_factory=lambda: list(DEFAULT_SHOTS))
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
    word_dim: int = 512
    encoder_seed: int = 0
    jobs: int = 1
    snapshot: Path | None = None

    def train_config(self, shots: int) -> TrainConfig:
        return TrainConfig(
            shots=shots,
            K=self.K,
            tau=self.tau,
            lr=self.lr,
            momentum=self.momentum,
            epochs=self.epochs,
            lambda_div=self.lambda_div,
            M=self.M,
            repeats=self.repeats,
            seed=self.seed,
            pooler=self.pooler,
            bag_prompt_mode=self.bag_prompt_mode,
            diversity_variant=self.diversity_variant,
            d_att=self.d_att,
            test_reserve=self.test_reserve,
        )

    def echo(self) -> dict:
        data = asdict(self)
        for key in ("embeddings", "prompt_dir", "out_dir", "snapshot"):
            if data[key] is not None:
                data[key] = str(data[key])
        return data


_RUN_KEYS = set(RunConfig.__dataclass_fields__)
_RUN_REQUIRED = {"task", "embeddings", "prompt_dir", "out_dir"}


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    data = _load_json(path)
    _check_keys(path, data, _RUN_KEYS, _RUN_REQUIRED)
    if overrides:
        data.update({k: v for k, v in overrides.items() if v is not None})
    data["shots"] = _as_shot_list(data.get("shots", DEFAULT_SHOTS))
    for key in ("embeddings", "prompt_dir", "out_dir", "snapshot"):
        if data.get(key) is not None:
            data[key] = Path(data[key])
    cfg = RunConfig(**data)
    if not cfg.embeddings.exists():
        raise ConfigurationError(f"{path}: embeddings archive does not exist: {cfg.embeddings}")
    if not cfg.prompt_dir.is_dir():
        raise ConfigurationError(f"{path}: prompt_dir does not exist: {cfg.prompt_dir}")
    if cfg.snapshot is not None and not cfg.snapshot.exists():
        raise ConfigurationError(f"{path}: snapshot does not exist: {cfg.snapshot}")
    if cfg.jobs < 1:
        raise ConfigurationError(f"{path}: jobs must be >= 1")
    cfg.train_config(cfg.shots[0])  # surface invalid training knobs now
    return cfg


@dataclass
class GenConfig:
    """Synthetic dataset generation: cluster geometry plus the output path.

    ``centers`` chooses between seeded Gram-Schmidt directions
    ("gram-schmidt") and prompt-aligned directions (an object naming a
    prompt_dir), which place each phenotype cluster where its description
    encodes to, emulating a pretrained joint embedding space.
    """

    task: str
    out: Path
    m: int
    n_phenotypes: int
    sigma: float
    witness_rate: float
    bag_size: tuple[int, int]
    bags_per_class: int
    seed: int
    positive_phenotypes: tuple[int, ...] | None = None
    centers: str | dict = "gram-schmidt"

    def echo(self) -> dict:
        data = asdict(self)
        data["out"] = str(data["out"])
        data["bag_size"] = list(data["bag_size"])
        if data["positive_phenotypes"] is not None:
            data["positive_phenotypes"] = list(data["positive_phenotypes"])
        return data


_GEN_KEYS = set(GenConfig.__dataclass_fields__)
_GEN_REQUIRED = {"task", "out", "m", "n_phenotypes", "sigma", "witness_rate", "bag_size", "bags_per_class", "seed"}


def load_gen_config(path, overrides: dict | None = None) -> GenConfig:
    path = Path(path)
    data = _load_json(path)
    _check_keys(path, data, _GEN_KEYS, _GEN_REQUIRED)
    if overrides:
        data.update({k: v for k, v in overrides.items() if v is not None})
    data["out"] = Path(data["out"])
    bag_size = data.get("bag_size")
    if not (isinstance(bag_size, (list, tuple)) and len(bag_size) == 2):
        raise ConfigurationError(f"{path}: bag_size must be a [lo, hi] pair")
    data["bag_size"] = (int(bag_size[0]), int(bag_size[1]))
    if data.get("positive_phenotypes") is not None:
        data["positive_phenotypes"] = tuple(int(i) for i in data["positive_phenotypes"])
    cfg = GenConfig(**data)
    centers = cfg.centers
    if isinstance(centers, str):
        if centers != "gram-schmidt":
            raise ConfigurationError(f"{path}: centers must be 'gram-schmidt' or an object")
        if cfg.positive_phenotypes is None:
            raise ConfigurationError(f"{path}: gram-schmidt centers need explicit positive_phenotypes")
    elif isinstance(centers, dict):
        unknown = set(centers) - {"prompt_dir", "encoder_seed", "word_dim"}
        if unknown:
            raise ConfigurationError(f"{path}: unknown centers keys {sorted(unknown)}")
        if "prompt_dir" not in centers:
            raise ConfigurationError(f"{path}: aligned centers need a prompt_dir")
        if not Path(centers["prompt_dir"]).is_dir():
            raise ConfigurationError(f"{path}: centers prompt_dir does not exist: {centers['prompt_dir']}")
    else:
        raise ConfigurationError(f"{path}: centers must be 'gram-schmidt' or an object")
    return cfg
