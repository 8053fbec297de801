"""Command-line surface: synth, run, report, theory.

One JSON config file drives everything; its defaults are the protocol
constants (64 Hz, 16384/8192 windowing, 256/64 STFT, threshold 0.5, top-K
{2,4,8} with checkpointing under top-4, base seed 10, the 0.01 half-every-10
SGD schedule).  Exit codes: 0 success, 1 runtime failure, 2 config error,
3 leakage or invariant violation.

Every run writes the resolved scientific configuration (corpus, pipeline,
model, schedule, evaluation parameters, base seed) into its output directory;
execution-only knobs (output paths, parallelism) are excluded so output
bytes are invariant to where and how parallel the run executes.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import logging
import multiprocessing
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, analytics, classifier, cohort_store, eval_engine, signal_pipeline, theory_lab
from .montage import build_reference_montage

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "CROSSPOP_OUTPUT_ROOT"


class ConfigError(ValueError):
    """Run configuration is missing, malformed, or inconsistent."""


def _canonical_json(payload) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


@dataclass
class RunConfig:
    """Validated run parameters (see README for the file schema)."""

    corpus_dir: Path
    manifest_paths: list[Path]
    synthetic: cohort_store.SyntheticConfig | None
    pipeline: signal_pipeline.PipelineConfig
    model_spec: classifier.ModelSpec
    inner_model_spec: classifier.ModelSpec
    schedule: classifier.TrainSchedule
    k_subsets: tuple[int, ...]
    inner_folds: int
    threshold: float
    min_seconds: float
    base_seed: int
    output_dir: Path
    parallelism: int
    emit_svg: bool
    montage_name: str = "reference-65"

    def scientific_payload(self) -> dict:
        """Everything that determines results, nothing about where they go."""
        return {
            "montage": self.montage_name,
            "synthetic": self.synthetic.to_payload() if self.synthetic else None,
            "pipeline": {
                "target_rate_hz": self.pipeline.target_rate_hz,
                "window_len": self.pipeline.window_len,
                "hop": self.pipeline.hop,
                "n_fft": self.pipeline.n_fft,
                "stft_hop": self.pipeline.stft_hop,
                "log_floor": self.pipeline.log_floor,
            },
            "model": _model_payload(self.model_spec),
            "inner_model": _model_payload(self.inner_model_spec),
            "schedule": {
                "learning_rate": self.schedule.learning_rate,
                "decay_factor": self.schedule.decay_factor,
                "decay_every": self.schedule.decay_every,
                "total_epochs": self.schedule.total_epochs,
                "batch_size": self.schedule.batch_size,
            },
            "eval": {
                "k_subsets": list(self.k_subsets),
                "inner_folds": self.inner_folds,
                "threshold": self.threshold,
                "min_seconds": self.min_seconds,
            },
            "base_seed": self.base_seed,
        }

    def config_hash(self) -> str:
        return hashlib.sha256(_canonical_json(self.scientific_payload()).encode()).hexdigest()


def _model_payload(spec: classifier.ModelSpec) -> dict:
    return {
        "kind": spec.kind,
        "init_seed": spec.init_seed,
        "conv_filters": list(spec.conv_filters),
        "input_shape": list(spec.input_shape),
    }


def _model_from_payload(payload: dict) -> classifier.ModelSpec:
    return classifier.ModelSpec(
        kind=payload.get("kind", "band_logistic"),
        init_seed=int(payload.get("init_seed", 0)),
        conv_filters=tuple(payload.get("conv_filters", (8, 16, 32))),
        input_shape=tuple(payload.get("input_shape", (128, 256))),
    )


def _resolve_root(path: Path, config_dir: Path) -> Path:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if path.is_absolute():
        return path
    if root:
        return Path(root) / path
    return config_dir / path


def load_run_config(path: Path | str, min_seconds_override: float | None = None) -> RunConfig:
    """Parse and validate a config file; raises ConfigError on any problem."""
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    config_dir = path.parent.resolve()
    try:
        corpus = payload.get("corpus", {})
        corpus_dir = _resolve_root(Path(corpus.get("dir", "corpus")), config_dir)
        manifest_paths = [Path(p) for p in corpus.get("manifests", [])]
        manifest_paths = [p if p.is_absolute() else config_dir / p for p in manifest_paths]

        synthetic = None
        if payload.get("synthetic") is not None:
            synthetic = cohort_store.SyntheticConfig.from_payload(payload["synthetic"])

        montage_name = payload.get("montage", "reference-65")
        if montage_name != "reference-65":
            raise ConfigError(f"unknown montage {montage_name!r}")

        pl = payload.get("pipeline", {})
        pipeline = signal_pipeline.PipelineConfig(
            target_rate_hz=float(pl.get("target_rate_hz", 64.0)),
            window_len=int(pl.get("window_len", 16384)),
            hop=int(pl.get("hop", 8192)),
            n_fft=int(pl.get("n_fft", 256)),
            stft_hop=int(pl.get("stft_hop", 64)),
            log_floor=float(pl.get("log_floor", 1e-12)),
        )
        model_spec = _model_from_payload(payload.get("model", {}))
        inner_model_spec = _model_from_payload(payload.get("inner_model", {"kind": "band_logistic"}))
        sc = payload.get("schedule", {})
        base_seed = int(payload.get("base_seed", 10))
        schedule = classifier.TrainSchedule(
            learning_rate=float(sc.get("learning_rate", 0.01)),
            decay_factor=float(sc.get("decay_factor", 0.5)),
            decay_every=int(sc.get("decay_every", 10)),
            total_epochs=int(sc.get("total_epochs", 30)),
            batch_size=int(sc.get("batch_size", 32)),
            base_seed=base_seed,
        )
        ev = payload.get("eval", {})
        k_subsets = tuple(int(k) for k in ev.get("k_subsets", (2, 4, 8)))
        if any(k <= 0 for k in k_subsets):
            raise ConfigError("k_subsets must be positive")
        inner_folds = int(ev.get("inner_folds", 5))
        threshold = float(ev.get("threshold", 0.5))
        min_seconds = float(ev.get("min_seconds", 30.0))
        if min_seconds_override is not None:
            min_seconds = float(min_seconds_override)
        output_dir = _resolve_root(Path(payload.get("output_dir", "out")), config_dir)
        parallelism = int(payload.get("parallelism", 1))
        if parallelism < 1:
            raise ConfigError("parallelism must be at least 1")
        emit_svg = bool(payload.get("emit_svg", True))
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if synthetic is None and not manifest_paths and not corpus_dir.exists():
        raise ConfigError(f"{path}: no corpus source (synthetic config, manifests, or corpus dir)")
    return RunConfig(
        corpus_dir=corpus_dir,
        manifest_paths=manifest_paths,
        synthetic=synthetic,
        pipeline=pipeline,
        model_spec=model_spec,
        inner_model_spec=inner_model_spec,
        schedule=schedule,
        k_subsets=k_subsets,
        inner_folds=inner_folds,
        threshold=threshold,
        min_seconds=min_seconds,
        base_seed=base_seed,
        output_dir=output_dir,
        parallelism=parallelism,
        emit_svg=emit_svg,
        montage_name=montage_name,
    )


def default_config_payload() -> dict:
    """A ready-to-edit config with the default synthetic corpus."""
    return {
        "corpus": {"dir": "corpus"},
        "synthetic": cohort_store.default_synthetic_config().to_payload(),
        "output_dir": "out",
        "base_seed": 10,
        "parallelism": 1,
    }


# --------------------------------------------------------------------------
# Corpus loading


def _load_manifests(config: RunConfig) -> list[cohort_store.CohortManifest]:
    paths = list(config.manifest_paths)
    if not paths:
        paths = sorted(config.corpus_dir.glob("manifest_*.json"))
    if not paths:
        raise FileNotFoundError(f"no manifests found under {config.corpus_dir}")
    manifests = cohort_store.load_corpus(paths)
    filtered = [cohort_store.filter_eligible(m, config.min_seconds) for m in manifests]
    return [m for m in filtered if m.patients]


# --------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    config = load_run_config(args.config)
    if config.synthetic is None:
        raise ConfigError(f"{args.config}: no synthetic section")
    manifests = cohort_store.generate_synthetic(config.synthetic, config.corpus_dir)
    stats = cohort_store.corpus_stats(manifests, config.pipeline)
    sys.stdout.write(cohort_store.render_stats_table(stats))
    sys.stdout.write(f"corpus written to {config.corpus_dir}\n")
    return 0


# --------------------------------------------------------------------------
# run

_WORKER: dict = {}


def _init_worker(store, config):
    _WORKER["store"] = store
    _WORKER["config"] = config


def _plan_job(plan: eval_engine.EvaluationPlan) -> tuple[int, dict]:
    result = eval_engine.run_plan(plan, _WORKER["store"], _WORKER["config"])
    return plan.plan_index, eval_engine.result_to_payload(result)


def _result_path(results_dir: Path, plan_index: int) -> Path:
    return results_dir / f"plan_{plan_index:04d}.json"


def _payload_with_hashes(payload: dict, config_hash: str) -> dict:
    body = dict(payload)
    body["config_hash"] = config_hash
    digest = hashlib.sha256(_canonical_json(body).encode()).hexdigest()
    body["content_hash"] = digest
    return body


def _is_valid_result(path: Path, config_hash: str) -> bool:
    try:
        payload = json.loads(path.read_text())
        stored = payload.pop("content_hash")
        if payload.get("config_hash") != config_hash:
            return False
        return stored == hashlib.sha256(_canonical_json(payload).encode()).hexdigest()
    except (OSError, json.JSONDecodeError, KeyError):
        return False


def cmd_run(args) -> int:
    config = load_run_config(args.config, min_seconds_override=args.min_seconds)
    manifests = _load_manifests(config)
    if len(manifests) < 2:
        raise ConfigError("need at least two populations after eligibility filtering")
    montage = build_reference_montage()
    config_hash = config.config_hash()
    results_dir = config.output_dir / "results"
    results_dir.mkdir(parents=True, exist_ok=True)
    (config.output_dir / "config.json").write_text(_canonical_json(config.scientific_payload()))

    plans = eval_engine.enumerate_plans([m.population_id for m in manifests], config.base_seed)
    pending = [
        p for p in plans if not _is_valid_result(_result_path(results_dir, p.plan_index), config_hash)
    ]
    logger.info("run: %d plans total, %d to compute", len(plans), len(pending))
    if pending:
        store = eval_engine.FrameStore(manifests, montage, config.pipeline, config.model_spec)
        if config.parallelism > 1:
            ctx = multiprocessing.get_context("fork")
            with concurrent.futures.ProcessPoolExecutor(
                max_workers=config.parallelism,
                mp_context=ctx,
                initializer=_init_worker,
                initargs=(store, config),
            ) as pool:
                outcomes = list(pool.map(_plan_job, pending))
        else:
            _init_worker(store, config)
            outcomes = [_plan_job(p) for p in pending]
        for plan_index, payload in outcomes:
            body = _payload_with_hashes(payload, config_hash)
            _result_path(results_dir, plan_index).write_text(_canonical_json(body))

    index = {
        "config_hash": config_hash,
        "populations": [m.population_id for m in manifests],
        "n_plans": len(plans),
        "plans": [
            {
                "plan_index": p.plan_index,
                "ngram_level": p.ngram_level,
                "train_populations": list(p.train_populations),
                "test_population": p.test_population,
                "result_file": _result_path(results_dir, p.plan_index).name,
            }
            for p in plans
        ],
    }
    (config.output_dir / "run_index.json").write_text(_canonical_json(index))
    sys.stdout.write(f"{len(plans)} plans complete under {results_dir}\n")
    return 0


# --------------------------------------------------------------------------
# report


class IncompleteResults(RuntimeError):
    """The results directory is missing required plan records."""


def _format_value(value) -> str:
    return "N/A" if value is None else f"{value:.6f}"


def load_results(results_dir: Path) -> list[eval_engine.EvaluationResult]:
    files = sorted(Path(results_dir).glob("plan_*.json"))
    results = []
    for file in files:
        payload = json.loads(file.read_text())
        results.append(eval_engine.result_from_payload(payload))
    if not results:
        raise IncompleteResults(f"no plan records under {results_dir}")
    return results


def _write_table(path: Path, header: list[str], rows: list[list[str]], payload) -> None:
    lines = ["\t".join(header)]
    lines.extend("\t".join(row) for row in rows)
    path.write_text("\n".join(lines) + "\n")
    path.with_suffix(".json").write_text(_canonical_json(payload))


def write_report(results, out_dir: Path, montage, emit_svg: bool = True) -> list[str]:
    """Emit all analytics tables (TSV + JSON) and optional SVG maps."""
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    regimes = sorted(results[0].regimes)
    levels = sorted({r.plan.ngram_level for r in results})
    populations = sorted({r.plan.test_population for r in results})

    # Per-level metric summaries, global and per test population.
    def metric_rows(result_filter, tag):
        rows, payload = [], []
        for regime in regimes:
            for level in levels:
                group = [r for r in result_filter if r.plan.ngram_level == level]
                if not group:
                    continue
                entry = {"regime": regime, "ngram_level": level, "n_plans": len(group)}
                row = [regime, str(level), str(len(group))]
                for metric in analytics.METRIC_NAMES:
                    values = [
                        v for r in group
                        if (v := analytics.result_metrics(r, regime)[metric]) is not None
                    ]
                    mean = sum(values) / len(values) if values else None
                    sd = (
                        float(np.std(values, ddof=1)) if len(values) >= 2 else None
                    )
                    entry[f"{metric}_mean"] = mean
                    entry[f"{metric}_sd"] = sd
                    row.append(_format_value(mean))
                    row.append(_format_value(sd))
                rows.append(row)
                payload.append(entry)
        return rows, payload

    header = ["regime", "ngram_level", "n_plans"]
    for metric in analytics.METRIC_NAMES:
        header += [f"{metric}_mean", f"{metric}_sd"]
    rows, payload = metric_rows(results, "all")
    _write_table(out_dir / "metrics_by_level.tsv", header, rows, payload)
    written.append("metrics_by_level.tsv")

    pop_header = ["population"] + header
    pop_rows, pop_payload = [], []
    for pop in populations:
        subset = [r for r in results if r.plan.test_population == pop]
        rows, payload = metric_rows(subset, pop)
        for row, entry in zip(rows, payload):
            pop_rows.append([pop] + row)
            entry["population"] = pop
            pop_payload.append(entry)
    _write_table(out_dir / "metrics_by_population.tsv", pop_header, pop_rows, pop_payload)
    written.append("metrics_by_population.tsv")

    # Directional transfer matrices (requires the complete level-1 grid).
    level1 = [r for r in results if r.plan.ngram_level == 1]
    matrix_payload = {}
    for regime in regimes:
        matrix = analytics.build_transfer_matrix(level1, regime)
        rows = []
        for i, train in enumerate(matrix.populations):
            row = [train]
            for j in range(len(matrix.populations)):
                row.append("N/A" if i == j else f"{matrix.values[i, j]:.6f}")
            rows.append(row)
        _write_table(
            out_dir / f"transfer_matrix_{regime}.tsv",
            ["train\\test", *matrix.populations],
            rows,
            {
                "regime": regime,
                "populations": list(matrix.populations),
                "values": [
                    [None if i == j else matrix.values[i, j] for j in range(len(matrix.populations))]
                    for i in range(len(matrix.populations))
                ],
            },
        )
        written.append(f"transfer_matrix_{regime}.tsv")
        matrix_payload[regime] = True

    # Scaling regression (flagged when the design is too small).
    try:
        fits = analytics.scaling_regression(results, regimes)
        rows = []
        payload = []
        for (regime, metric), fit in sorted(fits.items()):
            rows.append(
                [
                    regime,
                    metric,
                    f"{fit.slope:.8f}",
                    f"{fit.intercept:.6f}",
                    f"[{fit.slope_ci[0]:.8f},{fit.slope_ci[1]:.8f}]",
                    f"[{fit.intercept_ci[0]:.6f},{fit.intercept_ci[1]:.6f}]",
                    str(fit.n),
                ]
            )
            payload.append(
                {
                    "regime": regime,
                    "metric": metric,
                    "slope": fit.slope,
                    "intercept": fit.intercept,
                    "slope_ci": list(fit.slope_ci),
                    "intercept_ci": list(fit.intercept_ci),
                    "n": fit.n,
                }
            )
        _write_table(
            out_dir / "scaling_regression.tsv",
            ["regime", "metric", "slope", "intercept", "slope_ci95", "intercept_ci95", "n"],
            rows,
            payload,
        )
    except analytics.DegenerateDesign as exc:
        (out_dir / "scaling_regression.tsv").write_text(f"insufficient design: {exc}\n")
        (out_dir / "scaling_regression.json").write_text(
            _canonical_json({"insufficient": True, "reason": str(exc)})
        )
    written.append("scaling_regression.tsv")

    # Stability: accuracy spread per level.
    spread = analytics.stability(results, regimes)
    rows = [
        [regime, str(level), _format_value(value)]
        for (regime, level), value in sorted(spread.items())
    ]
    _write_table(
        out_dir / "stability.tsv",
        ["regime", "ngram_level", "accuracy_sd"],
        rows,
        [
            {"regime": regime, "ngram_level": level, "accuracy_sd": value}
            for (regime, level), value in sorted(spread.items())
        ],
    )
    written.append("stability.tsv")

    # Channel-selection maps.
    maps = analytics.channel_maps(results, n_channels=len(montage))
    for pop, cmap in sorted(maps.items()):
        rows = []
        for idx, label in enumerate(montage.labels):
            rows.append(
                [
                    str(idx),
                    label,
                    f"{cmap.solo_counts[idx]:.0f}",
                    f"{cmap.mixed_counts[idx]:.0f}",
                    f"{cmap.solo_normalized[idx]:.6f}",
                    f"{cmap.mixed_normalized[idx]:.6f}",
                    f"{cmap.difference[idx]:.6f}",
                ]
            )
        _write_table(
            out_dir / f"channel_map_{pop}.tsv",
            ["index", "label", "solo_count", "mixed_count", "solo_norm", "mixed_norm", "difference"],
            rows,
            {
                "population": pop,
                "solo_counts": list(cmap.solo_counts),
                "mixed_counts": list(cmap.mixed_counts),
                "solo_normalized": list(cmap.solo_normalized),
                "mixed_normalized": list(cmap.mixed_normalized),
                "difference": list(cmap.difference),
            },
        )
        written.append(f"channel_map_{pop}.tsv")
        if emit_svg:
            for kind, values, diverging in (
                ("solo", cmap.solo_normalized, False),
                ("mixed", cmap.mixed_normalized, False),
                ("difference", cmap.difference, True),
            ):
                svg = analytics.render_channel_map_svg(
                    values, montage, f"{pop} {kind} channel selection", diverging=diverging
                )
                name = f"channel_map_{pop}_{kind}.svg"
                (out_dir / name).write_text(svg)
                written.append(name)

    (out_dir / "report_index.json").write_text(
        _canonical_json({"tables": sorted(written), "n_results": len(results)})
    )
    return written


def cmd_report(args) -> int:
    results_dir = Path(args.results_dir)
    if results_dir.name != "results" and (results_dir / "results").is_dir():
        results_dir = results_dir / "results"
    results = load_results(results_dir)
    index_path = results_dir.parent / "run_index.json"
    if index_path.exists():
        index = json.loads(index_path.read_text())
        missing = index["n_plans"] - len(results)
        if missing > 0:
            have = {r.plan.plan_index for r in results}
            absent = [p["plan_index"] for p in index["plans"] if p["plan_index"] not in have]
            raise IncompleteResults(f"{missing} plan records missing: {absent[:10]}")
    out_dir = Path(args.out) if args.out else results_dir.parent / "reports"
    montage = build_reference_montage()
    written = write_report(results, out_dir, montage, emit_svg=not args.no_svg)
    sys.stdout.write(f"{len(written)} report files under {out_dir}\n")
    return 0


# --------------------------------------------------------------------------
# theory


def cmd_theory(args) -> int:
    n = args.instances
    if n == 0:
        sys.stdout.write("warning: zero instances requested; checks are vacuous\n")
    reports = theory_lab.run_suites(
        bound_n=n, contraction_n=n // 2, projection_n=n // 5, seed=args.seed
    )
    sys.stdout.write(theory_lab.render_report(reports))
    return 0 if all(r.passed for r in reports) else 1


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crosspop",
        description="Population-aware cross-dataset evaluation engine",
    )
    parser.add_argument("--version", action="version", version=f"crosspop {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic corpus")
    p_synth.add_argument("config", help="run config file (JSON)")
    p_synth.set_defaults(func=cmd_synth)

    p_run = sub.add_parser("run", help="execute the full evaluation grid")
    p_run.add_argument("config", help="run config file (JSON)")
    p_run.add_argument("--min-seconds", type=float, default=None,
                       help="override the eligibility threshold (seconds)")
    p_run.set_defaults(func=cmd_run)

    p_report = sub.add_parser("report", help="emit tables and maps from a results directory")
    p_report.add_argument("results_dir", help="results directory (or its parent run directory)")
    p_report.add_argument("--out", default=None, help="report output directory")
    p_report.add_argument("--no-svg", action="store_true", help="skip SVG scalp maps")
    p_report.set_defaults(func=cmd_report)

    p_theory = sub.add_parser("theory", help="run the finite-instance bound suites")
    p_theory.add_argument("--seed", type=int, default=10)
    p_theory.add_argument("--instances", type=int, default=1000,
                          help="bound-suite size; contraction and projection scale as 1/2 and 1/5")
    p_theory.set_defaults(func=cmd_theory)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("CROSSPOP_LOG", "WARNING"), stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return 2
    except (cohort_store.ParseError, ValueError) as exc:
        if isinstance(exc, (cohort_store.ParseError,)):
            sys.stderr.write(f"config error: {exc}\n")
            return 2
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except eval_engine.LeakageDetected as exc:
        sys.stderr.write(f"leakage detected: {exc}\n")
        return 3
    except Exception as exc:  # noqa: BLE001 - exit-code contract
        sys.stderr.write(f"error: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
