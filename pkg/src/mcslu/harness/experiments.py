"""Experiment runners: integration comparison, score-flip curve, and the
ASR-quality sweep.

Each (mode, preset, score-source, seed) cell trains one NLU model and
evaluates exact match on the test split, recording one EM bit per
utterance.  Cells are independent and fully determined by their spec, so
they are cached on disk under a content hash and may run in parallel
worker processes; a single-threaded reducer assembles tables afterwards.
"""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .. import __version__, neural, scoreenc
from ..confidence import MODES, flip_scores
from ..deliberation import (
    EmRecord,
    NluConfig,
    NluExample,
    NluModel,
    TrainConfig,
    Vocabulary,
    evaluate_em,
    make_example,
    train_nlu,
)
from ..semtext import wer
from ..simasr import (
    NOISE_PRESETS,
    FrozenAsrFrontend,
    SimConfig,
    SluDataset,
    SluRecord,
    balance_augment,
    default_grammar,
    gen_dataset,
)
from .config import RunConfig, config_to_dict

# Bump to invalidate cached cells when training/eval semantics change.
CACHE_VERSION = 3

_DATASET_CACHE: dict = {}


def _get_dataset(sim: SimConfig, split_sizes: tuple[tuple[str, int], ...]) -> SluDataset:
    key = (sim, split_sizes)
    if key not in _DATASET_CACHE:
        _DATASET_CACHE[key] = gen_dataset(default_grammar(), sim, dict(split_sizes))
    return _DATASET_CACHE[key]


def _set_single_thread() -> None:
    torch.set_num_threads(1)


# ---------------------------------------------------------------------------
# Cell specs


@dataclass(frozen=True)
class CellSpec:
    """Everything that determines one trained-and-evaluated model."""

    sim: SimConfig
    split_sizes: tuple[tuple[str, int], ...]
    nlu: NluConfig
    train: TrainConfig
    score_source: str
    constant_score: float
    seed: int
    scoreenc: Optional[scoreenc.ScoreEncoderConfig] = None
    score_train: Optional[scoreenc.ScoreTrainConfig] = None
    balance_target: Optional[float] = None

    @property
    def preset_name(self) -> str:
        probs = {"p_sub": self.sim.p_sub, "p_del": self.sim.p_del, "p_ins": self.sim.p_ins}
        for name, preset in NOISE_PRESETS.items():
            if all(abs(probs[k] - v) < 1e-12 for k, v in preset.items()):
                return name
        return "custom"


def make_cell(cfg: RunConfig, preset: str, mode: str, score_source: str, seed: int) -> CellSpec:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "baseline":
        # the baseline never reads scores; canonicalize so its cache cell
        # is shared across experiments regardless of the configured source
        score_source, constant = "constant", 1.0
    else:
        constant = cfg.constant_score
    sim = replace(cfg.sim, **NOISE_PRESETS[preset])
    uses_encoder = score_source == "encoder"
    return CellSpec(
        sim=sim,
        split_sizes=tuple(sorted(cfg.split_sizes.items())),
        nlu=replace(cfg.nlu, mode=mode, seed=seed),
        train=replace(cfg.train, seed=seed),
        score_source=score_source,
        constant_score=constant,
        seed=seed,
        scoreenc=replace(cfg.score_encoder, seed=seed) if uses_encoder else None,
        score_train=replace(cfg.score_train, seed=seed) if uses_encoder else None,
        balance_target=cfg.balance_target if uses_encoder else None,
    )


def cell_hash(spec: CellSpec) -> str:
    payload = dataclasses.asdict(spec)
    payload["cache_version"] = CACHE_VERSION
    return neural.config_hash(payload)[:16]


def cell_tag(spec: CellSpec) -> str:
    return f"{spec.nlu.mode}@{spec.preset_name}@{spec.score_source}@s{spec.seed}"


# ---------------------------------------------------------------------------
# Score resolution and example building


def hyp_scores(records: Sequence[SluRecord], source: str, constant: float,
               encoder: Optional[scoreenc.ScoreEncoder] = None) -> np.ndarray:
    if source == "oracle":
        return np.array(
            [1.0 - min(1.0, wer(r.ref_words, r.hyp_words)) for r in records], dtype=np.float64
        )
    if source == "oracle_binary":
        return np.array([float(r.label) for r in records], dtype=np.float64)
    if source == "constant":
        return np.full(len(records), constant, dtype=np.float64)
    if source == "encoder":
        if encoder is None:
            raise ValueError("encoder score source requires a trained encoder")
        return scoreenc.score_records(encoder, records)
    raise ValueError(f"unknown score source {source!r}")


def build_train_examples(
    records: Sequence[SluRecord],
    vocab: Vocabulary,
    frontend: FrozenAsrFrontend,
    scores: np.ndarray,
) -> list[NluExample]:
    """Union strategy: every utterance contributes a reference-text example
    (score 1.0) and a hypothesis-text example (configured score)."""
    out: list[NluExample] = []
    for rec, s in zip(records, scores):
        out.append(make_example(rec, vocab, "hyp", float(s)))
        out.append(make_example(rec, vocab, "ref", 1.0, frontend))
    return out


def build_eval_examples(
    records: Sequence[SluRecord], vocab: Vocabulary, scores: np.ndarray
) -> list[NluExample]:
    return [make_example(rec, vocab, "hyp", float(s)) for rec, s in zip(records, scores)]


# ---------------------------------------------------------------------------
# Score-encoder cells


def scoreenc_cell_dir(spec: CellSpec, workspace: Path) -> Path:
    payload = {
        "sim": dataclasses.asdict(spec.sim),
        "split_sizes": spec.split_sizes,
        "scoreenc": dataclasses.asdict(spec.scoreenc),
        "score_train": dataclasses.asdict(spec.score_train),
        "balance_target": spec.balance_target,
        "cache_version": CACHE_VERSION,
    }
    return workspace / "cache" / f"enc-{neural.config_hash(payload)[:16]}"


def get_score_encoder(spec: CellSpec, workspace: Path) -> tuple[scoreenc.ScoreEncoder, dict]:
    """Train (or load) the frozen encoder for a cell's preset and seed."""
    cdir = scoreenc_cell_dir(spec, workspace)
    model = scoreenc.ScoreEncoder(spec.scoreenc)
    store = model.param_store()
    metrics_path = cdir / "metrics.json"
    if metrics_path.exists():
        neural.load_checkpoint(cdir / "ckpt", store)
        scoreenc.freeze(model)
        return model, json.loads(metrics_path.read_text())
    dataset = _get_dataset(spec.sim, spec.split_sizes)
    frontend = FrozenAsrFrontend(dataset.vocab, spec.sim)
    balanced = balance_augment(
        dataset.splits["train"], spec.balance_target, frontend, spec.sim, seed=spec.seed
    )
    result = scoreenc.train_score_encoder(model, balanced, spec.score_train)
    cdir.mkdir(parents=True, exist_ok=True)
    neural.save_checkpoint(cdir / "ckpt", store)
    metrics = {
        "accuracy": result.metrics.accuracy,
        "precision": result.metrics.precision,
        "recall": result.metrics.recall,
        "auc": result.metrics.auc,
        "n_holdout": result.metrics.n,
        "param_count": store.count,
        "epochs": len(result.train_losses),
        "threshold_accuracy": scoreenc.eval_score_threshold(model, dataset.splits["test"]),
    }
    metrics_path.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return model, metrics


# ---------------------------------------------------------------------------
# NLU cells


@dataclass
class CellResult:
    spec: CellSpec
    records: list[EmRecord]
    meta: dict


def _records_to_jsonl(records: Sequence[EmRecord], path: Path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({"id": r.id, "label": r.label, "em": r.em, "score_used": r.score_used}) + "\n")


def _records_from_jsonl(path: Path) -> list[EmRecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            row = json.loads(line)
            out.append(EmRecord(id=row["id"], label=row["label"], em=row["em"], score_used=row["score_used"]))
    return out


def run_nlu_cell(spec: CellSpec, workspace: Path) -> CellResult:
    """Train one model and evaluate EM on the test split (cached)."""
    _set_single_thread()
    cdir = workspace / "cache" / cell_hash(spec)
    rec_path = cdir / "eval_records.jsonl"
    meta_path = cdir / "meta.json"
    if rec_path.exists() and meta_path.exists():
        return CellResult(spec, _records_from_jsonl(rec_path), json.loads(meta_path.read_text()))

    dataset = _get_dataset(spec.sim, spec.split_sizes)
    frontend = FrozenAsrFrontend(dataset.vocab, spec.sim)
    vocab = Vocabulary(dataset.vocab, default_grammar().ontology_symbols())
    encoder = None
    enc_metrics: Optional[dict] = None
    if spec.score_source == "encoder":
        encoder, enc_metrics = get_score_encoder(spec, workspace)

    train_records = dataset.splits["train"]
    model = NluModel(spec.nlu, vocab)
    train_examples = build_train_examples(
        train_records, vocab, frontend,
        hyp_scores(train_records, spec.score_source, spec.constant_score, encoder),
    )
    valid_records = dataset.splits["valid"]
    valid_examples = build_eval_examples(
        valid_records, vocab, hyp_scores(valid_records, spec.score_source, spec.constant_score, encoder)
    )
    result = train_nlu(model, train_examples, valid_examples, spec.train)

    test_records = dataset.splits["test"]
    test_examples = build_eval_examples(
        test_records, vocab, hyp_scores(test_records, spec.score_source, spec.constant_score, encoder)
    )
    em_records = evaluate_em(model, test_examples)

    cdir.mkdir(parents=True, exist_ok=True)
    neural.save_checkpoint(cdir / "ckpt", model.param_store())
    _records_to_jsonl(em_records, rec_path)
    meta = {
        "tag": cell_tag(spec),
        "epochs": len(result.train_losses),
        "best_epoch": result.best_epoch,
        "train_losses": result.train_losses,
        "valid_losses": result.valid_losses,
        "train_seconds": result.seconds,
        "encoder_metrics": enc_metrics,
    }
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return CellResult(spec, em_records, meta)


def load_cell_model(spec: CellSpec, workspace: Path) -> NluModel:
    """Reload a cached cell's trained model (training it on a cache miss)."""
    run_nlu_cell(spec, workspace)
    dataset = _get_dataset(spec.sim, spec.split_sizes)
    vocab = Vocabulary(dataset.vocab, default_grammar().ontology_symbols())
    model = NluModel(spec.nlu, vocab)
    neural.load_checkpoint(workspace / "cache" / cell_hash(spec) / "ckpt", model.param_store())
    model.eval()
    return model


def _run_cell_worker(spec: CellSpec, workspace: str) -> None:
    run_nlu_cell(spec, Path(workspace))


def run_cells(specs: Sequence[CellSpec], workspace: Path, n_workers: int = 1) -> list[CellResult]:
    """Run cells (parallel across processes when asked), then collect."""
    todo = [s for s in specs if not (workspace / "cache" / cell_hash(s) / "eval_records.jsonl").exists()]
    if n_workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=n_workers, initializer=_set_single_thread) as pool:
            list(pool.map(_run_cell_worker, todo, [str(workspace)] * len(todo)))
    return [run_nlu_cell(s, workspace) for s in specs]


# ---------------------------------------------------------------------------
# Aggregation


def em_stats(records: Sequence[EmRecord]) -> dict:
    """Exact-match percentages overall and per ASR-correctness subset."""
    bits = np.array([r.em for r in records], dtype=np.float64)
    labels = np.array([r.label for r in records])
    err = bits[labels == 0]
    ok = bits[labels == 1]
    return {
        "em_all": 100.0 * float(bits.mean()) if bits.size else None,
        "em_err_subset": 100.0 * float(err.mean()) if err.size else None,
        "em_ok_subset": 100.0 * float(ok.mean()) if ok.size else None,
        "n_err": int(err.size),
        "n_ok": int(ok.size),
    }


def mean_std(values: Sequence[float]) -> dict:
    arr = np.array([v for v in values if v is not None], dtype=np.float64)
    if arr.size == 0:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": int(arr.size)}


def write_manifest(out_dir: Path, experiment: str, cfg: RunConfig) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "experiment": experiment,
        "config": config_to_dict(cfg),
        "config_hash": neural.config_hash(config_to_dict(cfg)),
        "seeds": list(cfg.seeds),
        "versions": {
            "mcslu": __version__,
            "torch": torch.__version__,
            "numpy": np.__version__,
            "cache": CACHE_VERSION,
        },
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Experiment 1: integration-method comparison


def run_integration_study(cfg: RunConfig, out_dir: Optional[Path] = None, workspace: Optional[Path] = None) -> dict:
    """Train all four integration modes with oracle scores on the noisiest
    preset and tabulate EM by ASR-error subset."""
    from . import reporting

    out = Path(out_dir) if out_dir else Path(cfg.out_dir) / "integration"
    ws = Path(workspace) if workspace else out.parent
    preset = cfg.presets[0]
    specs = [
        make_cell(cfg, preset, mode, "oracle", seed)
        for mode in MODES
        for seed in cfg.seeds
    ]
    results = run_cells(specs, ws, cfg.n_workers)
    write_manifest(out, "integration_study", cfg)

    rows = []
    for res in results:
        stats = em_stats(res.records)
        rows.append(
            {
                "mode": res.spec.nlu.mode,
                "preset": preset,
                "seed": res.spec.seed,
                **stats,
                "score_source": res.spec.score_source,
                "flip_ratio": "",
            }
        )
        reporting.write_records(out / "records" / f"{cell_tag(res.spec)}.jsonl", res.records)
    reporting.write_results_csv(out / "results.csv", rows)

    aggregates = {}
    for mode in MODES:
        sub = [r for r in rows if r["mode"] == mode]
        aggregates[mode] = {
            key: mean_std([r[key] for r in sub])
            for key in ("em_all", "em_err_subset", "em_ok_subset")
        }
    summary = {"experiment": "integration_study", "preset": preset, "rows": rows, "aggregates": aggregates}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    reporting.integration_figure(out / "integration.png", aggregates)
    return summary


# ---------------------------------------------------------------------------
# Experiment 2: score-flip curve


def flip_eval_records(
    spec: CellSpec, ratio: float, workspace: Path
) -> list[EmRecord]:
    """Evaluate a trained binary-oracle model with a flipped score subset."""
    cdir = workspace / "cache" / cell_hash(spec)
    cached = cdir / f"flip_{ratio:g}.jsonl"
    if cached.exists():
        return _records_from_jsonl(cached)
    model = load_cell_model(spec, workspace)
    dataset = _get_dataset(spec.sim, spec.split_sizes)
    vocab = Vocabulary(dataset.vocab, default_grammar().ontology_symbols())
    test_records = dataset.splits["test"]
    base = hyp_scores(test_records, "oracle_binary", spec.constant_score)
    flipped = flip_scores(base, ratio, seed=spec.seed * 1000 + int(round(ratio * 100)))
    records = evaluate_em(model, build_eval_examples(test_records, vocab, flipped))
    _records_to_jsonl(records, cached)
    return records


def run_flip_curve(
    cfg: RunConfig,
    ratios: Optional[Sequence[float]] = None,
    out_dir: Optional[Path] = None,
    workspace: Optional[Path] = None,
) -> dict:
    """Evaluate the score-aware model under increasingly corrupted binary
    oracle scores; locate where it stops beating the baseline."""
    from . import reporting

    out = Path(out_dir) if out_dir else Path(cfg.out_dir) / "flip"
    ws = Path(workspace) if workspace else out.parent
    ratios = tuple(cfg.flip_ratios if ratios is None else ratios)
    preset = cfg.presets[0]

    base_specs = [make_cell(cfg, preset, "baseline", "constant", seed) for seed in cfg.seeds]
    mcat_specs = [make_cell(cfg, preset, "append_fusion_dec", "oracle_binary", seed) for seed in cfg.seeds]
    run_cells(base_specs + mcat_specs, ws, cfg.n_workers)
    write_manifest(out, "flip_curve", cfg)

    rows = []
    for spec in base_specs:
        res = run_nlu_cell(spec, ws)
        rows.append(
            {
                "mode": "baseline",
                "preset": preset,
                "seed": spec.seed,
                **em_stats(res.records),
                "score_source": spec.score_source,
                "flip_ratio": "",
            }
        )
        reporting.write_records(out / "records" / f"{cell_tag(spec)}.jsonl", res.records)
    for spec in mcat_specs:
        for ratio in ratios:
            records = flip_eval_records(spec, ratio, ws)
            rows.append(
                {
                    "mode": "append_fusion_dec",
                    "preset": preset,
                    "seed": spec.seed,
                    **em_stats(records),
                    "score_source": spec.score_source,
                    "flip_ratio": f"{ratio:g}",
                }
            )
            reporting.write_records(
                out / "records" / f"{cell_tag(spec)}@flip{ratio:g}.jsonl", records
            )
    reporting.write_results_csv(out / "results.csv", rows)

    baseline_mean = mean_std([r["em_all"] for r in rows if r["mode"] == "baseline"])["mean"]
    curve = []
    for ratio in ratios:
        sub = [r for r in rows if r["flip_ratio"] == f"{ratio:g}"]
        curve.append(
            {
                "ratio": ratio,
                "em_all": mean_std([r["em_all"] for r in sub]),
                "em_err_subset": mean_std([r["em_err_subset"] for r in sub]),
                "em_ok_subset": mean_std([r["em_ok_subset"] for r in sub]),
            }
        )
    breakeven = breakeven_ratio([c["ratio"] for c in curve], [c["em_all"]["mean"] for c in curve], baseline_mean)
    summary = {
        "experiment": "flip_curve",
        "preset": preset,
        "rows": rows,
        "baseline_em_all": baseline_mean,
        "curve": curve,
        "breakeven_ratio": breakeven,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    reporting.flip_figure(out / "flip_curve.png", curve, baseline_mean, breakeven)
    return summary


def breakeven_ratio(ratios: Sequence[float], ems: Sequence[float], baseline: float) -> Optional[float]:
    """First flip ratio at which the mean curve crosses the baseline,
    linearly interpolated; None if it never does."""
    for i in range(len(ratios)):
        if ems[i] < baseline:
            if i == 0:
                return 0.0
            r0, r1 = ratios[i - 1], ratios[i]
            e0, e1 = ems[i - 1], ems[i]
            if e0 == e1:
                return r0
            return r0 + (e0 - baseline) * (r1 - r0) / (e0 - e1)
    return None


# ---------------------------------------------------------------------------
# Experiment 3: recognizer-quality sweep


SWEEP_ROWS = (
    ("baseline", "constant"),
    ("append_fusion_dec", "oracle"),
    ("append_fusion_dec", "encoder"),
)


def run_quality_sweep(cfg: RunConfig, out_dir: Optional[Path] = None, workspace: Optional[Path] = None) -> dict:
    """Baseline vs oracle-scored vs encoder-scored models across the three
    noise presets (cleanest to noisiest recognizer)."""
    from . import reporting

    out = Path(out_dir) if out_dir else Path(cfg.out_dir) / "sweep"
    ws = Path(workspace) if workspace else out.parent
    specs = [
        make_cell(cfg, preset, mode, source, seed)
        for preset in cfg.presets
        for mode, source in SWEEP_ROWS
        for seed in cfg.seeds
    ]
    results = run_cells(specs, ws, cfg.n_workers)
    write_manifest(out, "quality_sweep", cfg)

    rows = []
    for res in results:
        rows.append(
            {
                "mode": res.spec.nlu.mode,
                "preset": res.spec.preset_name,
                "seed": res.spec.seed,
                **em_stats(res.records),
                "score_source": res.spec.score_source,
                "flip_ratio": "",
            }
        )
        reporting.write_records(out / "records" / f"{cell_tag(res.spec)}.jsonl", res.records)
    reporting.write_results_csv(out / "results.csv", rows)

    aggregates: dict[str, dict] = {}
    for preset in cfg.presets:
        aggregates[preset] = {}
        for mode, source in SWEEP_ROWS:
            key = f"{mode}@{source}"
            sub = [r for r in rows if r["preset"] == preset and r["mode"] == mode and r["score_source"] == source]
            aggregates[preset][key] = {
                k: mean_std([r[k] for r in sub]) for k in ("em_all", "em_err_subset", "em_ok_subset")
            }
    summary = {"experiment": "quality_sweep", "presets": list(cfg.presets), "rows": rows, "aggregates": aggregates}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    reporting.sweep_figure(out / "quality_sweep.png", cfg.presets, aggregates)
    return summary
