"""Command-line orchestration: dataset generation, training, evaluation,
ablations, and stability studies.

Subcommands: gen, train, eval, ablate, stability. Every run writes a
``config.echo`` next to its outputs; re-running from the echo reproduces
the results bit-identically.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import archive, datagen, fewshot, prompts
from .errors import ConfigurationError, PromptMILError
from .pooling import AttentionParams, make_attention_params
from .runconfig import GenConfig, RunConfig, load_gen_config, load_run_config

POOLER_LABELS = {
    "prompt_guided": "prompt-guided-pooling",
    "attention": "attention-pooling",
    "mean": "mean-pooling",
    "max": "max-pooling",
}
MODE_LABELS = {"full": "bag-prompt", "coop": "coop"}

# row order mirrors the published ablation tables
ABLATION_METHODS = [
    ("full", "attention"),
    ("coop", "attention"),
    ("coop", "prompt_guided"),
    ("full", "prompt_guided"),
]


def method_label(bag_prompt_mode: str, pooler: str) -> str:
    return f"{MODE_LABELS[bag_prompt_mode]}+{POOLER_LABELS[pooler]}"


def _write_text(path: Path, text: str) -> None:
    archive._atomic_write(path, text.encode("utf-8"))


def _write_json(path: Path, payload) -> None:
    _write_text(path, json.dumps(payload, indent=2) + "\n")


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _load_bags(cfg: RunConfig):
    bags, _ = archive.load_archive(cfg.embeddings)
    return bags, bags[0].features.shape[1]


def _load_library(cfg: RunConfig, feature_dim: int) -> prompts.PromptLibrary:
    library = prompts.load_prompt_library(
        cfg.prompt_dir,
        feature_dim=feature_dim,
        encoder_seed=cfg.encoder_seed,
        word_dim=cfg.word_dim,
    )
    if len(library.bag_specs) != cfg.K:
        raise ConfigurationError(
            f"config K={cfg.K} but {cfg.prompt_dir} defines {len(library.bag_specs)} bag classes"
        )
    return library


def _episode_json(episode: fewshot.EpisodeResult, method: str, with_history: bool) -> dict:
    per_repeat = []
    for r in episode.per_repeat:
        entry = {
            "repeat": r.repeat,
            "support_seed": r.support_seed,
            "bag_auc": r.bag_auc,
            "instance_auc": r.instance_auc,
            "final_loss": r.loss_history[-1],
        }
        if with_history:
            entry["loss_history"] = r.loss_history
        per_repeat.append(entry)
    return {
        "method": method,
        "shots": episode.shots,
        "per_repeat": per_repeat,
        "best_repeat": episode.best_repeat,
        "best_bag_auc": episode.best_bag_auc,
        "best_instance_auc": episode.best_instance_auc,
        "mean_bag_auc": episode.mean_bag_auc,
        "std_bag_auc": episode.std_bag_auc,
        "mean_instance_auc": episode.mean_instance_auc,
        "std_instance_auc": episode.std_instance_auc,
    }


def _result_rows(task: str, method: str, episodes) -> list[list]:
    rows = []
    for episode in episodes:
        for r in episode.per_repeat:
            rows.append(
                [
                    task,
                    method,
                    episode.shots,
                    r.repeat,
                    r.support_seed,
                    repr(r.bag_auc),
                    "" if r.instance_auc is None else repr(r.instance_auc),
                ]
            )
    return rows


RESULT_HEADER = ["task", "method", "shots", "repeat", "support_seed", "bag_auc", "instance_auc"]


def _snapshot_json(snapshot: dict) -> dict:
    return {k: v.tolist() for k, v in snapshot.items()}


def _apply_snapshot(groups, attention: AttentionParams | None, snap: dict) -> None:
    for level in ("instance", "bag"):
        arrays = {id(g.learnable): g.learnable for g in groups if g.level == level}
        for i, arr in enumerate(arrays.values()):
            key = f"{level}_ctx_{i}"
            if key not in snap:
                raise ConfigurationError(f"snapshot is missing {key}")
            stored = np.asarray(snap[key], dtype=np.float64)
            if stored.shape != arr.shape:
                raise ConfigurationError(
                    f"snapshot {key} has shape {stored.shape}, expected {arr.shape}"
                )
            arr[...] = stored
    if attention is not None:
        for key, arr in (("attention_V", attention.V), ("attention_w", attention.w)):
            if key in snap:
                stored = np.asarray(snap[key], dtype=np.float64)
                if stored.shape != arr.shape:
                    raise ConfigurationError(f"snapshot {key} shape mismatch")
                arr[...] = stored


def _aligned_centers(gen_cfg: GenConfig):
    spec = gen_cfg.centers
    library = prompts.load_prompt_library(
        Path(spec["prompt_dir"]),
        feature_dim=gen_cfg.m,
        encoder_seed=int(spec.get("encoder_seed", 0)),
        word_dim=int(spec.get("word_dim", prompts.DEFAULT_WORD_DIM)),
    )
    if len(library.instance_specs) != gen_cfg.n_phenotypes:
        raise ConfigurationError(
            f"centers prompt_dir defines {len(library.instance_specs)} phenotypes, "
            f"config says {gen_cfg.n_phenotypes}"
        )
    groups = library.make_groups(0, seed=0)
    protos = prompts.build_prototypes(groups, library.vocab, library.text_enc)
    centers = datagen.centers_from_prototypes(protos.P)
    return centers, tuple(protos.positive_indices)


def cmd_gen(args) -> int:
    cfg = load_gen_config(args.config, {"seed": args.seed, "out": args.out})
    if isinstance(cfg.centers, dict):
        centers, positive = _aligned_centers(cfg)
    else:
        centers, positive = None, cfg.positive_phenotypes
    synth = datagen.SyntheticConfig(
        m=cfg.m,
        n_phenotypes=cfg.n_phenotypes,
        positive_phenotypes=positive,
        sigma=cfg.sigma,
        witness_rate=cfg.witness_rate,
        bag_size=cfg.bag_size,
        bags_per_class=cfg.bags_per_class,
        seed=cfg.seed,
        centers=centers,
    )
    dataset = datagen.generate(synth)
    cfg.out.parent.mkdir(parents=True, exist_ok=True)
    sources = [f"{cfg.task}:seed{cfg.seed}:bag{i}" for i in range(len(dataset.bags))]
    archive.write_archive(cfg.out, dataset.bags, sources=sources)
    echo = cfg.echo()
    echo["positive_phenotypes"] = list(positive)
    _write_json(Path(str(cfg.out) + ".config.echo"), echo)

    per_class = {label: sum(1 for b in dataset.bags if b.label == label) for label in (0, 1)}
    instances = sum(b.size for b in dataset.bags)
    print(
        f"wrote {cfg.out}: {len(dataset.bags)} bags "
        f"(class 0: {per_class[0]}, class 1: {per_class[1]}), "
        f"{instances} instances, m={cfg.m}"
    )
    return 0


def _run_overrides(args) -> dict:
    shots = None
    if args.shots is not None:
        shots = [int(s) for s in args.shots.split(",")]
    return {
        "seed": args.seed,
        "shots": shots,
        "pooler": args.pooler,
        "bag_prompt_mode": args.bag_prompt_mode,
        "lambda_div": getattr(args, "lambda_div", None),
        "jobs": args.jobs,
        "out_dir": args.out,
        "snapshot": getattr(args, "snapshot", None),
    }


def _run_episodes(cfg: RunConfig):
    bags, m = _load_bags(cfg)
    library = _load_library(cfg, m)
    episodes = []
    for shots in cfg.shots:
        episodes.append(fewshot.stability_run(bags, library, cfg.train_config(shots), jobs=cfg.jobs))
    return episodes


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, _run_overrides(args))
    method = method_label(cfg.bag_prompt_mode, cfg.pooler)
    episodes = _run_episodes(cfg)

    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(cfg.out_dir / "config.echo", cfg.echo())
    _write_json(
        cfg.out_dir / "results.json",
        {
            "task": cfg.task,
            "method": method,
            "results": [_episode_json(e, method, with_history=True) for e in episodes],
        },
    )
    _write_text(
        cfg.out_dir / "results.csv", _csv_text(RESULT_HEADER, _result_rows(cfg.task, method, episodes))
    )
    _write_json(
        cfg.out_dir / "prompts.snapshot",
        {
            "task": cfg.task,
            "per_shot": {
                str(e.shots): _snapshot_json(e.per_repeat[e.best_repeat].snapshot) for e in episodes
            },
        },
    )
    for e in episodes:
        inst = "n/a" if e.best_instance_auc is None else f"{e.best_instance_auc:.4f}"
        print(
            f"{method} {e.shots}-shot: best bag AUC {e.best_bag_auc:.4f} "
            f"(mean {e.mean_bag_auc:.4f} +/- {e.std_bag_auc:.4f}), best instance AUC {inst}"
        )
    return 0


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config, _run_overrides(args))
    bags, m = _load_bags(cfg)
    library = _load_library(cfg, m)
    shots = cfg.shots[0]
    groups = library.make_groups(cfg.M, seed=cfg.seed, bag_prompt_mode=cfg.bag_prompt_mode)
    attention = None
    if cfg.pooler == "attention":
        attention = make_attention_params(cfg.seed, cfg.d_att, m)
    if cfg.snapshot is not None:
        payload = json.loads(Path(cfg.snapshot).read_text(encoding="utf-8"))
        per_shot = payload.get("per_shot", {})
        if str(shots) not in per_shot:
            raise ConfigurationError(
                f"snapshot {cfg.snapshot} has no entry for {shots} shots (has {sorted(per_shot)})"
            )
        _apply_snapshot(groups, attention, per_shot[str(shots)])

    metrics = fewshot.evaluate(bags, groups, library, cfg.train_config(shots), attention)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(cfg.out_dir / "config.echo", cfg.echo())
    _write_json(
        cfg.out_dir / "eval.json",
        {
            "task": cfg.task,
            "method": method_label(cfg.bag_prompt_mode, cfg.pooler),
            "shots": shots,
            "snapshot": None if cfg.snapshot is None else str(cfg.snapshot),
            "bags": len(bags),
            "bag_auc": metrics.bag_auc,
            "instance_auc": metrics.instance_auc,
        },
    )
    inst = "n/a" if metrics.instance_auc is None else f"{metrics.instance_auc:.4f}"
    print(f"eval on {len(bags)} bags: bag AUC {metrics.bag_auc:.4f}, instance AUC {inst}")
    return 0


def _grid_csv(shots, cells) -> str:
    header = ["method"] + [f"{s}-shot" for s in shots]
    rows = []
    for mode, pooler in ABLATION_METHODS:
        label = method_label(mode, pooler)
        rows.append([label] + [cells[(mode, pooler, s)] for s in shots])
    return _csv_text(header, rows)


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config, _run_overrides(args))
    bags, m = _load_bags(cfg)
    library = _load_library(cfg, m)
    shots_order = sorted(cfg.shots, reverse=True)

    bag_cells, inst_cells, detail = {}, {}, []
    for mode, pooler in ABLATION_METHODS:
        for shots in shots_order:
            tc = cfg.train_config(shots)
            tc.bag_prompt_mode = mode
            tc.pooler = pooler
            episode = fewshot.stability_run(bags, library, tc, jobs=cfg.jobs)
            bag_cells[(mode, pooler, shots)] = f"{episode.best_bag_auc:.4f}"
            inst_cells[(mode, pooler, shots)] = (
                "" if episode.best_instance_auc is None else f"{episode.best_instance_auc:.4f}"
            )
            detail.append(_episode_json(episode, method_label(mode, pooler), with_history=False))

    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(cfg.out_dir / "config.echo", cfg.echo())
    _write_text(cfg.out_dir / "ablation_bag.csv", _grid_csv(shots_order, bag_cells))
    _write_text(cfg.out_dir / "ablation_instance.csv", _grid_csv(shots_order, inst_cells))
    _write_json(cfg.out_dir / "ablation.json", {"task": cfg.task, "cells": detail})
    print((cfg.out_dir / "ablation_bag.csv").read_text(), end="")
    return 0


def cmd_stability(args) -> int:
    cfg = load_run_config(args.config, _run_overrides(args))
    method = method_label(cfg.bag_prompt_mode, cfg.pooler)
    episodes = _run_episodes(cfg)

    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(cfg.out_dir / "config.echo", cfg.echo())
    _write_json(
        cfg.out_dir / "stability.json",
        {
            "task": cfg.task,
            "method": method,
            "per_shot": [_episode_json(e, method, with_history=False) for e in episodes],
        },
    )
    _write_text(
        cfg.out_dir / "stability.csv", _csv_text(RESULT_HEADER, _result_rows(cfg.task, method, episodes))
    )
    for e in episodes:
        inst = "n/a" if e.std_instance_auc is None else f"{e.std_instance_auc:.4f}"
        print(f"{e.shots}-shot: bag AUC STD {e.std_bag_auc:.4f}, instance AUC STD {inst}")
    return 0


def _add_common(parser, with_snapshot=False) -> None:
    parser.add_argument("--config", required=True, help="path to a JSON run config")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--shots", default=None, help="comma-separated shot counts, e.g. 1,2,4,8,16")
    parser.add_argument("--pooler", choices=sorted(fewshot.POOLERS), default=None)
    parser.add_argument("--bag-prompt-mode", dest="bag_prompt_mode", choices=sorted(fewshot.BAG_PROMPT_MODES), default=None)
    parser.add_argument("--lambda", dest="lambda_div", type=float, default=None, help="diversity penalty weight")
    parser.add_argument("--jobs", type=int, default=None, help="parallel episodes")
    parser.add_argument("--out", default=None, help="output directory override")
    if with_snapshot:
        parser.add_argument("--snapshot", default=None, help="prompts.snapshot file to evaluate")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptmil",
        description="Few-shot weakly supervised bag classification with prompt-guided pooling.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic embedding archive")
    gen.add_argument("--config", required=True)
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--out", default=None, help="archive path override")
    gen.set_defaults(func=cmd_gen)

    train = sub.add_parser("train", help="train prompts over a shot sweep and report AUCs")
    _add_common(train)
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a prompt snapshot (or fresh prompts) on an archive")
    _add_common(ev, with_snapshot=True)
    ev.set_defaults(func=cmd_eval)

    ablate = sub.add_parser("ablate", help="pooling x bag-prompt ablation grid")
    _add_common(ablate)
    ablate.set_defaults(func=cmd_ablate)

    stability = sub.add_parser("stability", help="repeat-run stability report (STD per shot)")
    _add_common(stability)
    stability.set_defaults(func=cmd_stability)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PromptMILError as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 2


if __name__ == "__main__":
    sys.exit(main())
