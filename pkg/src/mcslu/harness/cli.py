"""Command-line interface.

Subcommands: gen-corpus, train-score-encoder, train-nlu, evaluate,
exp-integration, exp-flip, exp-sweep, gradcheck.  Every run writes a
manifest (config + hash + versions) next to its outputs.  Exit codes:
0 success, 2 usage/config error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import torch

from .. import neural, scoreenc
from ..deliberation import Vocabulary, evaluate_em
from ..simasr import FrozenAsrFrontend, balance_augment, default_grammar, gen_dataset, save_dataset
from .config import ConfigError, RunConfig, load_config
from . import experiments


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcslu",
        description="Confidence-aware spoken language understanding experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, helptext: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", type=Path, help="TOML or JSON run config")
        p.add_argument("--seed", type=int, help="override the first config seed")
        p.add_argument("--out", type=Path, help="output directory")
        return p

    p = add("gen-corpus", "generate and persist the synthetic dataset")
    p.add_argument("--embeddings", choices=("sidecar", "inline", "none"), default="sidecar")
    add("train-score-encoder", "train and freeze the confidence score encoder")
    p = add("train-nlu", "train a single NLU model and evaluate exact match")
    p.add_argument("--mode", help="override integration mode")
    p.add_argument("--score-source", dest="score_source", help="override score source")
    p = add("evaluate", "evaluate a saved NLU checkpoint on the test split")
    p.add_argument("--model", type=Path, required=True, help="checkpoint directory")
    add("exp-integration", "integration-method comparison table")
    add("exp-flip", "score-flipping curve")
    add("exp-sweep", "recognizer-quality sweep table")
    add("gradcheck", "finite-difference verification of all gradients")
    return parser


def _load(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides: dict = {}
    if args.seed is not None:
        overrides["seeds"] = (args.seed,) + tuple(cfg.seeds[1:])
    if getattr(args, "mode", None):
        overrides["mode"] = args.mode
    if getattr(args, "score_source", None):
        overrides["score_source"] = args.score_source
    if args.out is not None:
        overrides["out_dir"] = str(args.out)
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
        # re-validate after overrides
        cfg = dataclasses.replace(cfg)
    return cfg


def _cmd_gen_corpus(args: argparse.Namespace, cfg: RunConfig) -> int:
    out = Path(args.out) if args.out else Path(cfg.out_dir) / "corpus"
    dataset = gen_dataset(default_grammar(), cfg.sim, cfg.split_sizes)
    save_dataset(dataset, out, embeddings=args.embeddings)
    experiments.write_manifest(out, "gen_corpus", cfg)
    sizes = {k: len(v) for k, v in dataset.splits.items()}
    print(f"wrote {sizes} records to {out} (embeddings={args.embeddings})")
    return 0


def _cmd_train_score_encoder(args: argparse.Namespace, cfg: RunConfig) -> int:
    out = Path(args.out) if args.out else Path(cfg.out_dir) / "score_encoder"
    seed = cfg.seeds[0]
    dataset = gen_dataset(default_grammar(), cfg.sim, cfg.split_sizes)
    frontend = FrozenAsrFrontend(dataset.vocab, cfg.sim)
    balanced = balance_augment(dataset.splits["train"], cfg.balance_target, frontend, cfg.sim, seed=seed)
    model = scoreenc.ScoreEncoder(dataclasses.replace(cfg.score_encoder, seed=seed))
    result = scoreenc.train_score_encoder(
        model, balanced, dataclasses.replace(cfg.score_train, seed=seed)
    )
    out.mkdir(parents=True, exist_ok=True)
    neural.save_checkpoint(out / "ckpt", model.param_store())
    test_acc = scoreenc.eval_score_threshold(model, dataset.splits["test"])
    metrics = {
        "holdout": dataclasses.asdict(result.metrics),
        "test_threshold_accuracy": test_acc,
        "param_count": neural.param_count(model),
        "epochs": len(result.train_losses),
    }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    experiments.write_manifest(out, "train_score_encoder", cfg)
    print(
        f"score encoder: holdout accuracy {result.metrics.accuracy:.3f}, "
        f"auc {result.metrics.auc:.3f}, test accuracy {test_acc:.3f}, "
        f"{neural.param_count(model)} params -> {out}"
    )
    return 0


def _cmd_train_nlu(args: argparse.Namespace, cfg: RunConfig) -> int:
    out = Path(args.out) if args.out else Path(cfg.out_dir) / "nlu"
    preset = cfg.presets[0]
    spec = experiments.make_cell(cfg, preset, cfg.mode, cfg.score_source, cfg.seeds[0])
    result = experiments.run_nlu_cell(spec, out)
    stats = experiments.em_stats(result.records)
    experiments.write_manifest(out, "train_nlu", cfg)
    summary = {"cell": experiments.cell_tag(spec), "stats": stats, "meta": result.meta}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(
        f"{experiments.cell_tag(spec)}: em_all={stats['em_all']:.2f} "
        f"em_err={stats['em_err_subset']:.2f} em_ok={stats['em_ok_subset']:.2f} "
        f"(checkpoint under {out / 'cache' / experiments.cell_hash(spec)})"
    )
    return 0


def _cmd_evaluate(args: argparse.Namespace, cfg: RunConfig) -> int:
    from ..deliberation import NluModel

    out = Path(args.out) if args.out else Path(cfg.out_dir) / "evaluate"
    preset = cfg.presets[0]
    spec = experiments.make_cell(cfg, preset, cfg.mode, cfg.score_source, cfg.seeds[0])
    dataset = experiments._get_dataset(spec.sim, spec.split_sizes)
    vocab = Vocabulary(dataset.vocab, default_grammar().ontology_symbols())
    model = NluModel(spec.nlu, vocab)
    neural.load_checkpoint(args.model, model.param_store())
    model.eval()
    encoder = None
    if spec.score_source == "encoder":
        encoder, _ = experiments.get_score_encoder(spec, out)
    test_records = dataset.splits["test"]
    scores = experiments.hyp_scores(test_records, spec.score_source, spec.constant_score, encoder)
    records = evaluate_em(model, experiments.build_eval_examples(test_records, vocab, scores))
    stats = experiments.em_stats(records)
    out.mkdir(parents=True, exist_ok=True)
    from . import reporting

    reporting.write_records(out / "eval_records.jsonl", records)
    (out / "summary.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    experiments.write_manifest(out, "evaluate", cfg)
    print(f"em_all={stats['em_all']:.2f} em_err={stats['em_err_subset']:.2f} em_ok={stats['em_ok_subset']:.2f}")
    return 0


def _cmd_experiment(name: str, args: argparse.Namespace, cfg: RunConfig) -> int:
    out = Path(args.out) if args.out else None
    if name == "exp-integration":
        summary = experiments.run_integration_study(cfg, out_dir=out)
        agg = summary["aggregates"]
        for mode, stats in agg.items():
            print(
                f"{mode:18s} em_all={stats['em_all']['mean']:.2f} "
                f"em_err={stats['em_err_subset']['mean']:.2f} "
                f"em_ok={stats['em_ok_subset']['mean']:.2f}"
            )
    elif name == "exp-flip":
        summary = experiments.run_flip_curve(cfg, out_dir=out)
        print(f"baseline em_all={summary['baseline_em_all']:.2f}")
        for point in summary["curve"]:
            print(f"flip {point['ratio']:.2f}: em_all={point['em_all']['mean']:.2f}")
        be = summary["breakeven_ratio"]
        print(f"breakeven flip ratio: {'none' if be is None else f'{be:.3f}'}")
    elif name == "exp-sweep":
        summary = experiments.run_quality_sweep(cfg, out_dir=out)
        for preset, rows in summary["aggregates"].items():
            for key, stats in rows.items():
                print(f"{preset:8s} {key:28s} em_all={stats['em_all']['mean']:.2f}")
    return 0


def _cmd_gradcheck(args: argparse.Namespace, cfg: RunConfig) -> int:
    from . import gradchecks

    reports = gradchecks.full_suite()
    worst = 0.0
    for name, report in reports:
        status = "pass" if report.passed else "FAIL"
        print(f"{status}  {name:32s} max rel err {report.max_rel_err:.3e} ({report.n_coords} coords)")
        worst = max(worst, report.max_rel_err)
    print(f"worst relative error: {worst:.3e}")
    return 0 if all(r.passed for _, r in reports) else 1


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return 2 if err.code not in (0, None) else 0
    torch.set_num_threads(1)
    try:
        cfg = _load(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    try:
        if args.command == "gen-corpus":
            return _cmd_gen_corpus(args, cfg)
        if args.command == "train-score-encoder":
            return _cmd_train_score_encoder(args, cfg)
        if args.command == "train-nlu":
            return _cmd_train_nlu(args, cfg)
        if args.command == "evaluate":
            return _cmd_evaluate(args, cfg)
        if args.command in ("exp-integration", "exp-flip", "exp-sweep"):
            return _cmd_experiment(args.command, args, cfg)
        if args.command == "gradcheck":
            return _cmd_gradcheck(args, cfg)
        raise AssertionError(f"unhandled command {args.command}")
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
