"""Experiment presets, cell execution, and summaries rebuilt from the written artifacts."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DivergenceError, UsageError
from .policy import ConfidenceVocab, PolicyParams
from .protocol import (
    Algorithm,
    ConfidenceSource,
    ExperimentSpec,
    InitSpec,
    LossKind,
    RunKind,
    RunRecord,
    RunStatus,
    SuiteSpec,
    TrainerConfig,
    VariantSpec,
)
from .storage import (
    RunStorage,
    load_policy,
    load_suite,
    load_train_log,
    read_json,
    save_policy,
    save_suite,
    write_csv,
    write_json,
    write_train_log,
)
from .taskenv import TaskSuite, suite_from_spec
from .theory import certificates_passed, run_certificates
from .trainer import LOG_HEADER, evaluate_policy, train

logger = logging.getLogger(__name__)

FINAL_METRICS = ("exact_accuracy", "conf_mean", "ece", "pce", "auroc", "brier")
SOURCE_METRICS = ("conf_mean", "ece", "pce", "auroc", "brier")
SERIES_METRICS = tuple(name for name in LOG_HEADER if name != "step")

# base models state high verbal confidence; this tilts the initial verbal head upward
OVERCONFIDENT_BIAS = 4.0

# Tradeoff regime: hard tasks, a coarse and spread-out verbal head, and a horizon
# short enough that accuracy is still climbing when the cells are evaluated.
TRADEOFF_VOCAB = 6
TRADEOFF_BIAS = 1.5
TRADEOFF_STEPS = 20
TRADEOFF_EVAL_REPEATS = 16


def build_suite(spec: SuiteSpec) -> TaskSuite:
    return suite_from_spec(spec)


def initial_policy(suite: TaskSuite, init: InitSpec) -> PolicyParams:
    return PolicyParams.for_suite(suite, ConfidenceVocab.uniform(init.vocab_size), init.confidence_bias)


def cell_name(variant: str, seed: int) -> str:
    return f"{variant}-s{seed}"


def _default_suite() -> SuiteSpec:
    return SuiteSpec(seed=0, num_tasks=8, n_trajectories=10, difficulty_spec=((0.3, 0.5), (0.7, 0.5)))


def _tradeoff_suite() -> SuiteSpec:
    """One or three correct trajectories of ten, so most groups start all-wrong."""
    return SuiteSpec(
        seed=0, num_tasks=10, n_trajectories=10, difficulty_spec=((0.1, 0.5), (0.3, 0.5)), allow_degenerate=True
    )


def _trainer(**overrides: Any) -> TrainerConfig:
    base = {"steps": 200, "learning_rate": 0.5, "group_size": 8, "log_every": 2}
    base.update(overrides)
    return TrainerConfig(**base)


def _variant(
    name: str,
    warm_start: Optional[str] = None,
    bias: float = OVERCONFIDENT_BIAS,
    vocab_size: int = 21,
    **overrides: Any,
) -> VariantSpec:
    return VariantSpec(
        name=name,
        trainer=_trainer(**overrides),
        initial=InitSpec(vocab_size=vocab_size, confidence_bias=bias),
        warm_start=warm_start,
    )


def _tradeoff_variant(name: str, algorithm: Algorithm, **overrides: Any) -> VariantSpec:
    return _variant(
        name,
        bias=TRADEOFF_BIAS,
        vocab_size=TRADEOFF_VOCAB,
        algorithm=algorithm,
        steps=TRADEOFF_STEPS,
        eval_repeats=TRADEOFF_EVAL_REPEATS,
        **overrides,
    )


def _fig3(base_seed: int) -> ExperimentSpec:
    return ExperimentSpec(
        name="fig3-analog",
        suite=_default_suite(),
        variants=(
            _variant("verbal", algorithm=Algorithm.GRPO, steps=0),
            _variant("logits", algorithm=Algorithm.GRPO, steps=0, confidence_source=ConfidenceSource.LOGITS),
        ),
        repeats=3,
        base_seed=base_seed,
    )


def _fig4(base_seed: int) -> ExperimentSpec:
    # grpo logs sequence confidence so its conf_mean series tracks the sharpening policy
    return ExperimentSpec(
        name="fig4-analog",
        suite=_tradeoff_suite(),
        variants=(
            _tradeoff_variant("grpo", Algorithm.GRPO, confidence_source=ConfidenceSource.LOGITS),
            _tradeoff_variant("dcpo", Algorithm.DCPO),
        ),
        repeats=10,
        base_seed=base_seed,
    )


def _fig5(name: str, base_seed: int) -> ExperimentSpec:
    return ExperimentSpec(
        name=name,
        suite=_tradeoff_suite(),
        variants=(
            _tradeoff_variant("grpo", Algorithm.GRPO),
            _tradeoff_variant("coupled", Algorithm.COUPLED),
            _tradeoff_variant("dcpo", Algorithm.DCPO),
        ),
        repeats=10,
        base_seed=base_seed,
    )


def _ablation(base_seed: int) -> ExperimentSpec:
    return ExperimentSpec(
        name="ablation",
        suite=_default_suite(),
        variants=(
            _variant("grpo", algorithm=Algorithm.GRPO),
            _variant("dcpo", algorithm=Algorithm.DCPO),
            _variant("no-instance-labels", algorithm=Algorithm.DCPO, lam=1.0),
            _variant("no-group-labels", algorithm=Algorithm.DCPO, lam=0.0),
            _variant("no-decoupling", algorithm=Algorithm.DCPO, decoupled=False),
            # stale rollouts stand in for off-policy training
            _variant("no-on-policy", algorithm=Algorithm.DCPO, rollout_reuse=4),
        ),
        repeats=5,
        base_seed=base_seed,
    )


def _posthoc(base_seed: int) -> ExperimentSpec:
    return ExperimentSpec(
        name="posthoc",
        suite=_default_suite(),
        variants=(
            _variant("grpo", algorithm=Algorithm.GRPO),
            _variant(
                "grpo+brier",
                warm_start="grpo",
                algorithm=Algorithm.DCPO,
                lam=0.0,
                calibration_loss=LossKind.SQUARED,
                freeze_reasoning=True,
            ),
            _variant("dcpo", algorithm=Algorithm.DCPO),
        ),
        repeats=5,
        base_seed=base_seed,
    )


PRESETS: Dict[str, Callable[[int], ExperimentSpec]] = {
    "fig3-analog": _fig3,
    "fig4-analog": _fig4,
    "fig5-analog": lambda seed: _fig5("fig5-analog", seed),
    "fig6-analog": lambda seed: _fig5("fig6-analog", seed),
    "ablation": _ablation,
    "posthoc": _posthoc,
}
THEORY_PRESET = "theory-cert"


def preset_names() -> List[str]:
    return sorted(PRESETS) + [THEORY_PRESET]


def preset_spec(name: str, output_dir: str, base_seed: int = 0) -> ExperimentSpec:
    if name not in PRESETS:
        raise UsageError(f"unknown preset {name!r}; choose from {preset_names()}")
    return PRESETS[name](base_seed).with_output_dir(output_dir)


def _stages(spec: ExperimentSpec) -> List[List[VariantSpec]]:
    """Variants grouped so every warm start is finished before its dependents run."""
    depth: Dict[str, int] = {}
    for variant in spec.variants:
        depth[variant.name] = 0 if variant.warm_start is None else depth[variant.warm_start] + 1
    stages: List[List[VariantSpec]] = [[] for _ in range(max(depth.values()) + 1)]
    for variant in spec.variants:
        stages[depth[variant.name]].append(variant)
    return stages


def run_cell(spec_doc: Dict[str, Any], variant_name: str, seed: int) -> Dict[str, Any]:
    """Train and evaluate one (variant, seed) cell; returns its run record document."""
    spec = ExperimentSpec.from_dict(spec_doc)
    variant = next(v for v in spec.variants if v.name == variant_name)
    out = Path(spec.output_dir)
    name = cell_name(variant.name, seed)
    storage = RunStorage(out / "cells")
    record = RunRecord(run_id=name, kind=RunKind.CELL, request={"variant": variant.name, "seed": seed})
    record.status = RunStatus.RUNNING
    storage.write_run(record)
    logger.info("cell %s starting", name)

    suite = load_suite(out / "suite.json")
    config = variant.trainer.with_seed(seed)
    if variant.warm_start is not None:
        parent_name = cell_name(variant.warm_start, seed)
        parent = storage.load_run(parent_name)
        if parent is None or parent.status is not RunStatus.COMPLETED:
            state = "missing" if parent is None else parent.status.value
            record.status = RunStatus.FAILED
            record.error = f"warm start {parent_name} is {state}"
            record.result = {"warm_start": parent_name}
            storage.write_run(record)
            logger.warning("cell %s not run: warm start %s is %s", name, parent_name, state)
            return record.to_dict()
        initial = load_policy(out / "policies" / f"{parent_name}.json")
    else:
        initial = initial_policy(suite, variant.initial)
    try:
        params, log = train(config, suite, initial)
    except DivergenceError as exc:
        record.status = RunStatus.FAILED
        record.error = str(exc)
        record.result = {"diverged_at": exc.step}
        storage.write_run(record)
        logger.warning("cell %s diverged at step %d", name, exc.step)
        return record.to_dict()

    before = evaluate_policy(initial, suite, config)
    after = evaluate_policy(params, suite, config)
    write_train_log(out / "logs" / f"{name}.csv", log)
    save_policy(out / "policies" / f"{name}.json", params)
    write_json(
        out / "metrics" / f"{name}.json",
        {"variant": variant.name, "seed": seed, "initial": before.to_dict(), "final": after.to_dict()},
    )
    if after.bins is not None:
        write_csv(
            out / "bins" / f"{name}.csv",
            [["bin_lo", "bin_hi", "count", "mean_conf", "accuracy"]]
            + [
                [row["bin_lo"], row["bin_hi"], row["count"], _cell(row["mean_conf"]), _cell(row["accuracy"])]
                for row in after.bins.to_rows()
            ],
        )
    record.status = RunStatus.COMPLETED
    record.result = {"metrics": f"metrics/{name}.json", "log": f"logs/{name}.csv"}
    storage.write_run(record)
    logger.info("cell %s done: acc=%.4f pce=%s", name, after.exact_accuracy, after.pce)
    return record.to_dict()


def _cell(value: Optional[float]) -> Any:
    return "" if value is None else value


def run_experiment(spec: ExperimentSpec, max_workers: int = 1) -> Dict[str, Any]:
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "spec.json", spec.to_dict())
    save_suite(out / "suite.json", build_suite(spec.suite))
    spec_doc = spec.to_dict()

    for stage in _stages(spec):
        jobs = [(v.name, seed) for v in stage for seed in spec.seeds]
        if max_workers > 1:
            with ProcessPoolExecutor(max_workers=max_workers) as pool:
                list(pool.map(run_cell, [spec_doc] * len(jobs), *zip(*jobs)))
        else:
            for variant_name, seed in jobs:
                run_cell(spec_doc, variant_name, seed)

    summary = summarize_outputs(out)
    write_json(out / "summary.json", summary)
    names = [v.name for v in spec.variants]
    baseline = "grpo" if "grpo" in names else names[0]
    try:
        write_json(out / "comparison.json", compare_variants(summary, baseline))
    except UsageError as exc:
        logger.warning("skipping comparison: %s", exc)
    return summary


def _stats(values: Sequence[Optional[float]]) -> Dict[str, Optional[float]]:
    present = [v for v in values if v is not None]
    if not present:
        return {"mean": None, "std": None, "n": 0}
    arr = np.array(present, dtype=float)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": len(present)}


def _mean_series(logs: Sequence[Any], name: str) -> List[Optional[float]]:
    columns = [log.series(name) for log in logs]
    out: List[Optional[float]] = []
    for values in zip(*columns):
        present = [v for v in values if v is not None]
        out.append(float(np.mean(present)) if present else None)
    return out


def summarize_outputs(output_dir: Path) -> Dict[str, Any]:
    """Rebuild the cross-variant summary from files under `output_dir` alone."""
    out = Path(output_dir)
    spec = ExperimentSpec.from_dict(read_json(out / "spec.json"))
    storage = RunStorage(out / "cells")
    variants: Dict[str, Any] = {}
    for variant in spec.variants:
        per_seed: Dict[str, Any] = {}
        logs = []
        failed = []
        for seed in spec.seeds:
            name = cell_name(variant.name, seed)
            record = storage.load_run(name)
            if record is None or record.status is not RunStatus.COMPLETED:
                failed.append(seed)
                continue
            metrics = read_json(out / "metrics" / f"{name}.json")
            per_seed[str(seed)] = {
                "initial": {k: metrics["initial"][k] for k in FINAL_METRICS},
                "final": {k: metrics["final"][k] for k in FINAL_METRICS},
                "sources": {
                    source.value: {
                        stage: {k: metrics[stage]["sources"][source.value][k] for k in SOURCE_METRICS}
                        for stage in ("initial", "final")
                    }
                    for source in ConfidenceSource
                },
            }
            logs.append(load_train_log(out / "logs" / f"{name}.csv"))
        series: Dict[str, Any] = {}
        if logs:
            series["step"] = [row.step for row in logs[0]]
            for metric in SERIES_METRICS:
                series[metric] = _mean_series(logs, metric)
        variants[variant.name] = {
            "algorithm": variant.trainer.algorithm.value,
            "confidence_source": variant.trainer.confidence_source.value,
            "final": {k: _stats([s["final"][k] for s in per_seed.values()]) for k in FINAL_METRICS},
            "initial": {k: _stats([s["initial"][k] for s in per_seed.values()]) for k in FINAL_METRICS},
            "sources": {
                source.value: {
                    stage: {
                        k: _stats([s["sources"][source.value][stage][k] for s in per_seed.values()])
                        for k in SOURCE_METRICS
                    }
                    for stage in ("initial", "final")
                }
                for source in ConfidenceSource
            },
            "per_seed": per_seed,
            "failed_seeds": failed,
            "series": series,
        }
    return {"name": spec.name, "seeds": spec.seeds, "variants": variants}


def compare_variants(
    summary: Dict[str, Any],
    baseline: str = "grpo",
    source: ConfidenceSource = ConfidenceSource.VERBAL,
) -> Dict[str, Any]:
    """Paired-seed deltas of every variant against `baseline`.

    Calibration deltas always pair the same confidence source on both sides:
    the flat `ece_*`/`pce_*` fields use `source`, and `sources` repeats the
    deltas for every source.
    """
    source = ConfidenceSource(source)
    variants = summary.get("variants", {})
    if baseline not in variants:
        raise UsageError(f"baseline {baseline!r} is not among {sorted(variants)}")
    base = variants[baseline]["per_seed"]
    seeds = sorted(base, key=int)
    table: Dict[str, Any] = {}
    for name, doc in variants.items():
        per_seed = doc["per_seed"]
        if set(per_seed) != set(base):
            raise UsageError(f"variant {name!r} seeds {sorted(per_seed)} are not paired with {sorted(base)}")
        row: Dict[str, Any] = {"seeds": [int(s) for s in seeds]}
        _paired_delta(row, "accuracy", [(per_seed[s]["final"], base[s]["final"]) for s in seeds], "exact_accuracy")
        by_source: Dict[str, Any] = {}
        for src in ConfidenceSource:
            pairs = [
                (per_seed[s]["sources"][src.value]["final"], base[s]["sources"][src.value]["final"]) for s in seeds
            ]
            block: Dict[str, Any] = {}
            for metric in ("conf_mean", "ece", "pce"):
                _paired_delta(block, metric, pairs, metric)
            by_source[src.value] = block
        for metric in ("ece", "pce"):
            row[f"{metric}_delta"] = by_source[source.value][f"{metric}_delta"]
            row[f"{metric}_paired"] = by_source[source.value][f"{metric}_paired"]
        row["sources"] = by_source
        table[name] = row
    return {"baseline": baseline, "source": source.value, "variants": table}


Pairs = Sequence[Tuple[Dict[str, Any], Dict[str, Any]]]


def _paired_delta(row: Dict[str, Any], metric: str, pairs: Pairs, key: str) -> None:
    diffs = [_delta(mine[key], theirs[key]) for mine, theirs in pairs]
    row[f"{metric}_delta"] = _stats(diffs)["mean"]
    row[f"{metric}_paired"] = diffs


def _delta(value: Optional[float], reference: Optional[float]) -> Optional[float]:
    if value is None or reference is None:
        return None
    return value - reference


def run_preset(name: str, output_dir: str, base_seed: int = 0, max_workers: int = 1) -> Tuple[Dict[str, Any], bool]:
    """Run a preset; returns (document, ok). Only the certificate preset can report not-ok."""
    if name == THEORY_PRESET:
        results = run_certificates(seed=base_seed, include_training=True)
        report = {key: result.to_dict() for key, result in results.items()}
        write_json(Path(output_dir) / "theory.json", report)
        return report, certificates_passed(results)
    return run_experiment(preset_spec(name, output_dir, base_seed), max_workers=max_workers), True
